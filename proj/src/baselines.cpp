#include "bitbudget/baselines.hpp"

#include <cmath>
#include <stdexcept>

#include "bitbudget/rng.hpp"

namespace bitbudget {

DiscreteAssignment uniform_assignment(const ModelSpec& spec, const BitWidthSet& bitset, int b) {
  bitset.index_of(b);  // b must be a candidate
  DiscreteAssignment a;
  a.modules = spec.modules();
  a.chosen_bits.assign(a.modules.size(), b);
  a.realized_avg_bits = static_cast<double>(b);
  a.objective_value = 0.0;
  a.solver = SolverKind::auto_select;
  a.optimal = false;
  return a;
}

double assignment_objective(const SoftScores& scores, const DiscreteAssignment& assignment) {
  if (scores.modules != assignment.modules)
    throw std::invalid_argument("assignment_objective: module sets differ");
  const std::size_t k = scores.bits.size();
  double acc = 0.0;
  for (std::size_t i = assignment.modules.size(); i-- > 0;) {
    int j = -1;
    for (std::size_t b = 0; b < k; ++b)
      if (scores.bits[b] == assignment.chosen_bits[i]) j = static_cast<int>(b);
    if (j < 0) throw std::invalid_argument("assignment uses a bit outside the score set");
    acc = scores.scores[static_cast<std::int64_t>(i * k + static_cast<std::size_t>(j))] + acc;
  }
  return acc;
}

double hutchinson_trace(const GradFn& grad_fn, const std::vector<double>& w0, int num_probes,
                        std::uint64_t seed, double fd_step) {
  if (num_probes < 1) throw std::invalid_argument("hutchinson_trace: num_probes must be >= 1");
  if (!(fd_step > 0.0)) throw std::invalid_argument("hutchinson_trace: fd_step must be > 0");
  const std::size_t dim = w0.size();
  Rng rng(seed);
  std::vector<double> v(dim), wp(dim), wm(dim);
  double acc = 0.0;
  for (int kprobe = 0; kprobe < num_probes; ++kprobe) {
    for (std::size_t i = 0; i < dim; ++i) {
      v[i] = rng.next_sign();
      wp[i] = w0[i] + fd_step * v[i];
      wm[i] = w0[i] - fd_step * v[i];
    }
    const std::vector<double> gp = grad_fn(wp);
    const std::vector<double> gm = grad_fn(wm);
    if (gp.size() != dim || gm.size() != dim)
      throw std::invalid_argument("hutchinson_trace: gradient size mismatch");
    double vhv = 0.0;
    for (std::size_t i = 0; i < dim; ++i) vhv += v[i] * (gp[i] - gm[i]) / (2.0 * fd_step);
    if (!std::isfinite(vhv))
      throw std::runtime_error("hutchinson_trace: non-finite Hessian-vector product at probe " +
                               std::to_string(kprobe));
    acc += vhv;
  }
  return acc / static_cast<double>(num_probes);
}

double TraceEstimate::trace_of(const ModuleId& m) const {
  for (std::size_t i = 0; i < modules.size(); ++i)
    if (modules[i] == m) return trace[i];
  throw std::invalid_argument("no trace estimate for module " + module_name(m));
}

TraceEstimate estimate_module_traces(const Model& model, const TokenBatch& batch, int num_probes,
                                     std::uint64_t seed, double fd_step) {
  const HiddenStateTrace trace = teacher_trace(model, batch);
  TraceEstimate est;
  est.modules = model.spec.modules();
  est.num_probes = num_probes;
  est.probe_seed = seed;

  for (const ModuleId& mod : est.modules) {
    const Tensor& w_fp = model.module_weight(mod);
    const std::vector<std::int64_t> wshape = w_fp.shape();
    const Tensor& input = trace[static_cast<std::size_t>(mod.layer - 1)];
    const Tensor& ref = trace[static_cast<std::size_t>(mod.layer)];

    GradFn grad_fn = [&](const std::vector<double>& w) {
      Tape tape;
      LayerWeightNodes nodes;
      Tape::NodeId target = -1;
      for (Projection p : kProjections) {
        if (p == mod.proj) {
          target = tape.leaf(Tensor(wshape, w), /*requires_grad=*/true);
          nodes[p] = target;
        } else {
          nodes[p] = tape.constant(model.module_weight(ModuleId{mod.layer, p}));
        }
      }
      Tape::NodeId out = layer_forward(tape, model, mod.layer, tape.constant(input), nodes);
      Tape::NodeId sq = tape.sum_all(tape.square(tape.sub(out, tape.constant(ref))));
      Tape::NodeId loss = tape.scale(sq, 1.0 / static_cast<double>(batch.batch));
      tape.backward(loss);
      return tape.grad(target).values();
    };

    est.trace.push_back(hutchinson_trace(grad_fn, w_fp.values(), num_probes,
                                         derive_seed(seed, "probe:" + module_name(mod)),
                                         fd_step));
  }
  return est;
}

DiscreteAssignment hawq_allocate(const TraceEstimate& traces, const CandidatePool& pool,
                                 double b_target, SolverKind kind) {
  const std::vector<ModuleId> modules = pool.spec().modules();
  if (traces.modules != modules)
    throw std::invalid_argument("hawq_allocate: trace table does not cover the module set");

  const std::vector<int>& bits = pool.bitset().bits;
  std::vector<double> values;
  std::vector<std::int64_t> counts;
  values.reserve(modules.size() * bits.size());
  counts.reserve(modules.size());
  for (std::size_t i = 0; i < modules.size(); ++i) {
    const ModuleId& m = modules[i];
    const std::int64_t n = pool.spec().module_param_count(m);
    counts.push_back(n);
    const Tensor& fp = pool.reference(m);
    for (int b : bits) {
      const Tensor& q = pool.candidate(m, b);
      double ssd = 0.0;
      for (std::int64_t j = 0; j < fp.size(); ++j) {
        const double d = fp[j] - q[j];
        ssd += d * d;
      }
      const double omega = traces.trace[i] / static_cast<double>(n) * ssd;
      values.push_back(-omega);
    }
  }
  return solve_values(modules, bits, values, counts, b_target, kind);
}

}  // namespace bitbudget
