#include "bitbudget/masks.hpp"

#include <cmath>
#include <stdexcept>

#include "bitbudget/errors.hpp"
#include "bitbudget/threading.hpp"

namespace bitbudget {

const char* constraint_mode_name(ConstraintMode m) {
  switch (m) {
    case ConstraintMode::augmented_lagrangian: return "al";
    case ConstraintMode::multiplicative_penalty: return "mult";
    case ConstraintMode::ce_loss: return "ce";
  }
  return "?";
}

ConstraintMode constraint_mode_from_name(const std::string& name) {
  if (name == "al") return ConstraintMode::augmented_lagrangian;
  if (name == "mult") return ConstraintMode::multiplicative_penalty;
  if (name == "ce") return ConstraintMode::ce_loss;
  throw std::invalid_argument("unknown constraint mode: " + name);
}

const char* relaxation_mode_name(RelaxationMode m) {
  return m == RelaxationMode::gumbel_softmax ? "gumbel_softmax" : "binary_sigmoid";
}

RelaxationMode relaxation_mode_from_name(const std::string& name) {
  if (name == "gumbel_softmax") return RelaxationMode::gumbel_softmax;
  if (name == "binary_sigmoid") return RelaxationMode::binary_sigmoid;
  throw std::invalid_argument("unknown relaxation mode: " + name);
}

const char* score_extraction_name(ScoreExtraction e) {
  switch (e) {
    case ScoreExtraction::noise_free: return "noise_free";
    case ScoreExtraction::final_sample: return "final_sample";
    case ScoreExtraction::mean_of_samples: return "mean_of_samples";
  }
  return "?";
}

ScoreExtraction score_extraction_from_name(const std::string& name) {
  if (name == "noise_free") return ScoreExtraction::noise_free;
  if (name == "final_sample") return ScoreExtraction::final_sample;
  if (name == "mean_of_samples") return ScoreExtraction::mean_of_samples;
  throw std::invalid_argument("unknown score extraction: " + name);
}

MaskState make_mask_state(const ModelSpec& spec, const BitWidthSet& bitset, double tau,
                          std::uint64_t rng_seed, RelaxationMode relaxation) {
  if (!(tau > 0.0)) throw std::invalid_argument("mask temperature must be > 0");
  bitset.validate();
  if (relaxation == RelaxationMode::binary_sigmoid && bitset.count() != 2)
    throw std::invalid_argument("binary_sigmoid requires exactly two candidate bit-widths");
  MaskState s;
  // Zero logits: uniform prior over the candidate set.
  s.logits = Tensor({spec.num_modules(), bitset.count()});
  s.tau = tau;
  s.rng_seed = rng_seed;
  s.relaxation = relaxation;
  return s;
}

void SoftScores::validate() const {
  const std::int64_t m = scores.dim(0), nb = scores.dim(1);
  if (m != static_cast<std::int64_t>(modules.size()) ||
      nb != static_cast<std::int64_t>(bits.size()) ||
      m != static_cast<std::int64_t>(param_counts.size()))
    throw std::invalid_argument("soft scores: inconsistent dimensions");
  for (std::int64_t r = 0; r < m; ++r) {
    double sum = 0.0;
    for (std::int64_t b = 0; b < nb; ++b) sum += scores[r * nb + b];
    if (std::fabs(sum - 1.0) > 1e-9)
      throw std::invalid_argument("soft scores: row does not sum to 1");
  }
  const double eb = bitbudget::expected_avg_bits(scores, param_counts, bits);
  if (std::fabs(eb - expected_avg_bits) > 1e-9)
    throw std::invalid_argument("soft scores: stored expected bits is inconsistent");
}

Tensor sample_relaxation_noise(const MaskState& state, Rng& rng) {
  const std::int64_t m = state.logits.dim(0);
  if (state.relaxation == RelaxationMode::binary_sigmoid) {
    Tensor noise({m});
    for (std::int64_t i = 0; i < m; ++i) noise[i] = rng.next_logistic();
    return noise;
  }
  Tensor noise(state.logits.shape());
  for (std::int64_t i = 0; i < noise.size(); ++i) noise[i] = rng.next_gumbel();
  return noise;
}

Tape::NodeId relaxed_probs_node(Tape& tape, Tape::NodeId logits, const Tensor& noise,
                                const MaskState& state) {
  if (state.relaxation == RelaxationMode::binary_sigmoid)
    return tape.binary_concrete_rows(logits, noise, state.tau);
  Tape::NodeId noisy = tape.add(logits, tape.constant(noise));
  return tape.softmax_rows(noisy, state.tau);
}

Tensor relaxed_probs(const MaskState& state, const Tensor& noise) {
  Tape tape(/*grad_enabled=*/false);
  return tape.value(relaxed_probs_node(tape, tape.constant(state.logits), noise, state));
}

Tensor sample_relaxed_probs(const MaskState& state, Rng& rng) {
  return relaxed_probs(state, sample_relaxation_noise(state, rng));
}

Tape::NodeId mix_weights_node(Tape& tape, const CandidatePool& pool, const ModuleId& module,
                              Tape::NodeId probs) {
  std::vector<Tape::NodeId> cands;
  cands.reserve(static_cast<std::size_t>(pool.bitset().count()));
  for (int b : pool.bitset().bits) cands.push_back(tape.constant(pool.candidate(module, b)));
  return tape.mix(cands, probs, pool.module_index(module));
}

Tensor mix_weights(const CandidatePool& pool, const ModuleId& module, const Tensor& probs) {
  Tape tape(/*grad_enabled=*/false);
  return tape.value(mix_weights_node(tape, pool, module, tape.constant(probs)));
}

double expected_avg_bits(const Tensor& probs, const std::vector<std::int64_t>& param_counts,
                         const std::vector<int>& bits) {
  const std::int64_t m = probs.dim(0), nb = probs.dim(1);
  if (m != static_cast<std::int64_t>(param_counts.size()) ||
      nb != static_cast<std::int64_t>(bits.size()))
    throw std::invalid_argument("expected_avg_bits: dimension mismatch");
  double num = 0.0, den = 0.0;
  for (std::int64_t r = 0; r < m; ++r) {
    double row = 0.0;
    for (std::int64_t b = 0; b < nb; ++b)
      row += static_cast<double>(bits[static_cast<std::size_t>(b)]) * probs[r * nb + b];
    num += static_cast<double>(param_counts[static_cast<std::size_t>(r)]) * row;
    den += static_cast<double>(param_counts[static_cast<std::size_t>(r)]);
  }
  if (den == 0.0) throw std::invalid_argument("expected_avg_bits: zero total parameter count");
  return num / den;
}

std::vector<double> expected_bits_coeffs(const std::vector<std::int64_t>& param_counts,
                                         const std::vector<int>& bits) {
  double den = 0.0;
  for (std::int64_t n : param_counts) den += static_cast<double>(n);
  std::vector<double> c;
  c.reserve(param_counts.size() * bits.size());
  for (std::int64_t n : param_counts)
    for (int b : bits) c.push_back(static_cast<double>(n) * static_cast<double>(b) / den);
  return c;
}

namespace {

// Teacher-forced reconstruction of one sample on its own tape:
// (1/L) * sum_i ||f_i(H_{i-1}; W_mix) - H_i||^2, the squared norm taken over
// the sample's full hidden tensor. Averaging over the calibration batch
// happens in the caller's reduction.
Tape::NodeId sample_recon_graph(Tape& tape, const Model& model, const CandidatePool& pool,
                                const HiddenStateTrace& trace, int sample, Tape::NodeId probs) {
  const ModelSpec& spec = model.spec;
  const std::int64_t seq = trace[0].dim(1), d = trace[0].dim(2);
  const std::int64_t per_sample = seq * d;
  Tape::NodeId acc = -1;
  for (int l = 1; l <= spec.num_layers; ++l) {
    const Tensor& in_full = trace[static_cast<std::size_t>(l - 1)];
    const Tensor& ref_full = trace[static_cast<std::size_t>(l)];
    Tensor in({1, seq, d});
    Tensor ref({1, seq, d});
    std::copy(in_full.data() + sample * per_sample, in_full.data() + (sample + 1) * per_sample,
              in.data());
    std::copy(ref_full.data() + sample * per_sample, ref_full.data() + (sample + 1) * per_sample,
              ref.data());
    LayerWeightNodes w;
    for (Projection p : kProjections)
      w[p] = mix_weights_node(tape, pool, ModuleId{l, p}, probs);
    Tape::NodeId out = layer_forward(tape, model, l, tape.constant(std::move(in)), w);
    Tape::NodeId diff = tape.sub(out, tape.constant(std::move(ref)));
    Tape::NodeId sq_norm = tape.sum_all(tape.square(diff));
    acc = acc < 0 ? sq_norm : tape.add(acc, sq_norm);
  }
  if (acc < 0) return tape.constant_scalar(0.0);  // zero-layer model
  return tape.scale(acc, 1.0 / static_cast<double>(spec.num_layers));
}

// Next-token cross entropy of one sample under mixed weights.
Tape::NodeId sample_ce_graph(Tape& tape, const Model& model, const CandidatePool& pool,
                             const TokenBatch& batch, int sample, Tape::NodeId probs) {
  TokenBatch one;
  one.batch = 1;
  one.seq_len = batch.seq_len;
  one.ids.assign(batch.ids.begin() + static_cast<std::size_t>(sample) * batch.seq_len,
                 batch.ids.begin() + static_cast<std::size_t>(sample + 1) * batch.seq_len);
  std::vector<Tape::NodeId> weights;
  weights.reserve(static_cast<std::size_t>(model.spec.num_modules()));
  for (const ModuleId& m : model.spec.modules())
    weights.push_back(mix_weights_node(tape, pool, m, probs));
  Tape::NodeId logits = full_forward_graph(tape, model, weights, one);
  return next_token_ce_graph(tape, logits, one);
}

struct SampleResult {
  double loss = 0.0;
  Tensor grad;  // dLoss_s/dlogits
};

void check_budget_range(const BitWidthSet& bitset, double b_target) {
  if (b_target < bitset.min_bits() || b_target > bitset.max_bits())
    throw InfeasibleBudgetError("b_target " + std::to_string(b_target) +
                                " outside candidate range [" +
                                std::to_string(bitset.min_bits()) + ", " +
                                std::to_string(bitset.max_bits()) + "]");
}

Tensor zero_noise(const MaskState& state) {
  if (state.relaxation == RelaxationMode::binary_sigmoid)
    return Tensor({state.logits.dim(0)});
  return Tensor(state.logits.shape());
}

}  // namespace

StepEval stage1_step_eval(const Model& model, const CandidatePool& pool,
                          const HiddenStateTrace& trace, const TokenBatch& batch,
                          const MaskState& state, const Tensor& noise, const DualState& duals,
                          const Stage1Config& cfg, bool want_grads) {
  check_budget_range(pool.bitset(), cfg.b_target);
  const int nsamples = batch.batch;
  const bool ce = cfg.mode == ConstraintMode::ce_loss;

  // Per-sample data term, each sample on an independent tape. The reduction
  // below runs in sample order regardless of the worker count.
  std::vector<SampleResult> results(static_cast<std::size_t>(nsamples));
  parallel_for(nsamples, env_worker_count(), [&](int s) {
    Tape tape;
    Tape::NodeId logits = tape.leaf(state.logits, /*requires_grad=*/true);
    Tape::NodeId probs = relaxed_probs_node(tape, logits, noise, state);
    Tape::NodeId loss = ce ? sample_ce_graph(tape, model, pool, batch, s, probs)
                           : sample_recon_graph(tape, model, pool, trace, s, probs);
    SampleResult& r = results[static_cast<std::size_t>(s)];
    r.loss = tape.value(loss).item();
    if (want_grads && tape.requires_grad(loss)) {
      tape.backward(loss);
      // Structural frozen-weights check: the logits leaf is the only node
      // that may ever receive a gradient buffer.
      if (tape.grad_allocation_count() != 1)
        throw std::logic_error("gradient allocated outside the mask logits");
      r.grad = tape.grad(logits);
    }
  });

  double data_loss = 0.0;
  Tensor data_grad(state.logits.shape());
  for (const SampleResult& r : results) {
    data_loss += r.loss;
    if (r.grad.defined())
      for (std::int64_t i = 0; i < data_grad.size(); ++i) data_grad[i] += r.grad[i];
  }
  const double inv_b = 1.0 / static_cast<double>(nsamples);
  data_loss *= inv_b;
  for (std::int64_t i = 0; i < data_grad.size(); ++i) data_grad[i] *= inv_b;

  // Constraint term on its own small tape.
  Tape pen;
  Tape::NodeId logits = pen.leaf(state.logits, /*requires_grad=*/true);
  Tape::NodeId probs = relaxed_probs_node(pen, logits, noise, state);
  const std::vector<std::int64_t> counts = [&] {
    std::vector<std::int64_t> c;
    for (const ModuleId& m : model.spec.modules()) c.push_back(model.spec.module_param_count(m));
    return c;
  }();
  Tape::NodeId bhat = pen.weighted_sum(probs, expected_bits_coeffs(counts, pool.bitset().bits));
  Tape::NodeId dev = pen.add_const(bhat, -cfg.b_target);

  StepEval out;
  out.probs = pen.value(probs);
  out.report.recon = data_loss;
  out.report.deviation = pen.value(dev).item();

  Tape::NodeId pen_total = -1;
  Tape::NodeId lam1 = -1, lam2 = -1;
  double mult_factor = 1.0;
  if (cfg.mode == ConstraintMode::multiplicative_penalty) {
    // recon * max(beta * (log(dev^2 + eps))^gamma, floor); the floor keeps the
    // factor positive near dev = 0 where the raw log is unbounded below.
    Tape::NodeId raw = pen.log(pen.add_const(pen.square(dev), cfg.penalty.eps));
    Tape::NodeId factor = pen.scale(pen.pow_const(raw, cfg.penalty.gamma), cfg.penalty.beta);
    factor = pen.clamp_min(factor, cfg.penalty.floor);
    pen_total = pen.scale(factor, data_loss);
    mult_factor = pen.value(factor).item();
    out.report.total = data_loss * mult_factor;
  } else {
    lam1 = pen.leaf(Tensor::scalar(duals.lambda1), /*requires_grad=*/true);
    lam2 = pen.leaf(Tensor::scalar(duals.lambda2), /*requires_grad=*/true);
    Tape::NodeId lin = pen.mul(lam1, dev);
    Tape::NodeId quad = pen.mul(lam2, pen.square(dev));
    pen_total = pen.add(lin, quad);
    out.report.penalty_linear = pen.value(lin).item();
    out.report.penalty_quadratic = pen.value(quad).item();
    out.report.total = data_loss + out.report.penalty_linear + out.report.penalty_quadratic;
  }

  if (want_grads) {
    pen.backward(pen_total);
    out.grad_logits = Tensor(state.logits.shape());
    // d(total)/dlogits = factor * d(data)/dlogits + d(pen_total)/dlogits in
    // multiplicative mode; the AL modes use factor = 1.
    const Tensor* pg = pen.has_grad(logits) ? &pen.grad(logits) : nullptr;
    for (std::int64_t i = 0; i < out.grad_logits.size(); ++i)
      out.grad_logits[i] = mult_factor * data_grad[i] + (pg ? (*pg)[i] : 0.0);
    if (lam1 >= 0) {
      out.grad_lambda1 = pen.has_grad(lam1) ? pen.grad(lam1).item() : 0.0;
      out.grad_lambda2 = pen.has_grad(lam2) ? pen.grad(lam2).item() : 0.0;
    }
  }
  return out;
}

LossReport stage1_loss(const Model& model, const CandidatePool& pool,
                       const HiddenStateTrace& trace, const TokenBatch& batch,
                       const Tensor& probs, const DualState& duals, double b_target,
                       ConstraintMode mode, const PenaltyParams& penalty) {
  check_budget_range(pool.bitset(), b_target);
  const bool ce = mode == ConstraintMode::ce_loss;
  double data_loss = 0.0;
  for (int s = 0; s < batch.batch; ++s) {
    Tape tape(/*grad_enabled=*/false);
    Tape::NodeId p = tape.constant(probs);
    Tape::NodeId loss = ce ? sample_ce_graph(tape, model, pool, batch, s, p)
                           : sample_recon_graph(tape, model, pool, trace, s, p);
    data_loss += tape.value(loss).item();
  }
  data_loss /= static_cast<double>(batch.batch);

  std::vector<std::int64_t> counts;
  for (const ModuleId& m : model.spec.modules()) counts.push_back(model.spec.module_param_count(m));

  LossReport r;
  r.recon = data_loss;
  r.deviation = expected_avg_bits(probs, counts, pool.bitset().bits) - b_target;
  if (mode == ConstraintMode::multiplicative_penalty) {
    const double raw = std::log(r.deviation * r.deviation + penalty.eps);
    const double factor = std::max(penalty.beta * std::pow(raw, penalty.gamma), penalty.floor);
    r.total = data_loss * factor;
  } else {
    r.penalty_linear = duals.lambda1 * r.deviation;
    r.penalty_quadratic = duals.lambda2 * r.deviation * r.deviation;
    r.total = r.recon + r.penalty_linear + r.penalty_quadratic;
  }
  return r;
}

Stage1Result train_stage1(const Model& model, const CandidatePool& pool,
                          const CalibrationStream& stream, const Stage1Config& cfg) {
  if (cfg.steps < 0 || cfg.batch_size < 1) throw std::invalid_argument("bad stage-1 config");
  check_budget_range(pool.bitset(), cfg.b_target);

  MaskState state = make_mask_state(model.spec, pool.bitset(), cfg.tau, cfg.seed, cfg.relaxation);
  DualState duals;
  duals.learning_rate = cfg.dual_lr;
  duals.lambda2 = cfg.lambda2_init;
  Rng noise_rng(derive_seed(cfg.seed, "relaxation-noise"));

  const bool ce = cfg.mode == ConstraintMode::ce_loss;
  std::vector<HiddenStateTrace> trace_cache;
  if (!ce)
    trace_cache.resize(static_cast<std::size_t>(stream.batches_per_epoch(cfg.batch_size)));

  Tensor momentum(state.logits.shape());
  // mean_of_samples averages the sampled p over the stationary tail of the
  // run (final quarter), where the constraint has settled.
  const int tail_start = cfg.steps - std::max(1, cfg.steps / 4);
  int tail_count = 0;
  Tensor mean_probs(state.logits.shape());
  Tensor last_probs;
  Stage1Result result;
  result.log.reserve(static_cast<std::size_t>(cfg.steps));

  for (int step = 0; step < cfg.steps; ++step) {
    const TokenBatch batch = stream.train_batch(step, cfg.batch_size);
    const int k = step % stream.batches_per_epoch(cfg.batch_size);
    static const HiddenStateTrace kEmptyTrace;
    const HiddenStateTrace* trace = &kEmptyTrace;
    if (!ce) {
      HiddenStateTrace& slot = trace_cache[static_cast<std::size_t>(k)];
      if (slot.empty()) slot = teacher_trace(model, batch);
      trace = &slot;
    }

    const Tensor noise = sample_relaxation_noise(state, noise_rng);
    StepEval eval =
        stage1_step_eval(model, pool, *trace, batch, state, noise, duals, cfg, /*grads=*/true);

    if (!std::isfinite(eval.report.total))
      throw DivergenceError("stage-1 loss is not finite at step " + std::to_string(step));

    // Primal descent on the logits.
    if (cfg.momentum != 0.0) {
      for (std::int64_t i = 0; i < momentum.size(); ++i) {
        momentum[i] = cfg.momentum * momentum[i] + eval.grad_logits[i];
        state.logits[i] -= cfg.lr * momentum[i];
      }
    } else {
      for (std::int64_t i = 0; i < state.logits.size(); ++i)
        state.logits[i] -= cfg.lr * eval.grad_logits[i];
    }

    // Dual ascent, lambda2 projected to stay non-negative.
    if (cfg.mode != ConstraintMode::multiplicative_penalty) {
      duals.lambda1 += duals.learning_rate * eval.grad_lambda1;
      duals.lambda2 = std::max(0.0, duals.lambda2 + duals.learning_rate * eval.grad_lambda2);
    }

    std::vector<std::int64_t> counts;
    for (const ModuleId& m : model.spec.modules())
      counts.push_back(model.spec.module_param_count(m));
    StepStats st;
    st.step = step;
    st.report = eval.report;
    st.lambda1 = duals.lambda1;
    st.lambda2 = duals.lambda2;
    st.expected_bits = expected_avg_bits(eval.probs, counts, pool.bitset().bits);
    result.log.push_back(st);

    if (step >= tail_start) {
      for (std::int64_t i = 0; i < mean_probs.size(); ++i) mean_probs[i] += eval.probs[i];
      ++tail_count;
    }
    last_probs = eval.probs;
  }

  // Export scores. Default is the noise-free softmax(logits / tau).
  Tensor scores;
  switch (cfg.extraction) {
    case ScoreExtraction::noise_free:
      scores = relaxed_probs(state, zero_noise(state));
      break;
    case ScoreExtraction::final_sample:
      scores = last_probs.defined() ? last_probs : relaxed_probs(state, zero_noise(state));
      break;
    case ScoreExtraction::mean_of_samples:
      if (tail_count == 0) {
        scores = relaxed_probs(state, zero_noise(state));
      } else {
        scores = mean_probs;
        for (std::int64_t i = 0; i < scores.size(); ++i)
          scores[i] /= static_cast<double>(tail_count);
      }
      break;
  }

  SoftScores soft;
  soft.spec_hash = model.spec.hash_hex();
  soft.modules = model.spec.modules();
  soft.bits = pool.bitset().bits;
  soft.scores = std::move(scores);
  for (const ModuleId& m : soft.modules)
    soft.param_counts.push_back(model.spec.module_param_count(m));
  soft.expected_avg_bits = expected_avg_bits(soft.scores, soft.param_counts, soft.bits);
  soft.budget_target = cfg.b_target;
  soft.steps = cfg.steps;
  soft.seed = cfg.seed;
  soft.mode = cfg.mode;
  soft.validate();

  result.scores = std::move(soft);
  result.final_state = std::move(state);
  result.duals = duals;
  return result;
}

}  // namespace bitbudget
