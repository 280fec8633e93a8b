#include "bitbudget/model.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "bitbudget/rng.hpp"

namespace bitbudget {

const char* projection_name(Projection p) {
  switch (p) {
    case Projection::q: return "q";
    case Projection::k: return "k";
    case Projection::v: return "v";
    case Projection::o: return "o";
    case Projection::up: return "up";
    case Projection::gate: return "gate";
    case Projection::down: return "down";
  }
  return "?";
}

Projection projection_from_name(const std::string& name) {
  for (Projection p : kProjections)
    if (name == projection_name(p)) return p;
  throw std::invalid_argument("unknown projection: " + name);
}

std::string module_name(const ModuleId& m) {
  return "layer" + std::to_string(m.layer) + "." + projection_name(m.proj);
}

void ModelSpec::validate() const {
  // num_layers == 0 is allowed: the trace then holds only the embedding output.
  if (num_layers < 0) throw std::invalid_argument("num_layers must be >= 0");
  if (hidden_dim < 1) throw std::invalid_argument("hidden_dim must be >= 1");
  if (num_heads < 1) throw std::invalid_argument("num_heads must be >= 1");
  if (hidden_dim % num_heads != 0)
    throw std::invalid_argument("hidden_dim must be divisible by num_heads");
  if (ffn_dim < 1) throw std::invalid_argument("ffn_dim must be >= 1");
  if (vocab_size < 2) throw std::invalid_argument("vocab_size must be >= 2");
  if (max_seq_len < 1) throw std::invalid_argument("max_seq_len must be >= 1");
  for (const ModuleScale& s : module_scales) {
    if (s.layer < 1 || s.layer > num_layers)
      throw std::invalid_argument("module_scale layer out of range");
    if (!(s.multiplier > 0.0)) throw std::invalid_argument("module_scale multiplier must be > 0");
  }
}

std::vector<ModuleId> ModelSpec::modules() const {
  std::vector<ModuleId> out;
  out.reserve(static_cast<std::size_t>(num_modules()));
  for (int l = 1; l <= num_layers; ++l)
    for (Projection p : kProjections) out.push_back(ModuleId{l, p});
  return out;
}

std::int64_t ModelSpec::module_param_count(Projection p) const {
  const std::int64_t d = hidden_dim, f = ffn_dim;
  switch (p) {
    case Projection::q:
    case Projection::k:
    case Projection::v:
    case Projection::o: return d * d;
    case Projection::up:
    case Projection::gate: return d * f;
    case Projection::down: return f * d;
  }
  return 0;
}

std::int64_t ModelSpec::total_quantizable_params() const {
  std::int64_t total = 0;
  for (Projection p : kProjections) total += module_param_count(p);
  return total * num_layers;
}

double ModelSpec::scale_multiplier(const ModuleId& m) const {
  double mult = 1.0;
  for (const ModuleScale& s : module_scales)
    if (s.layer == m.layer && s.proj == m.proj) mult *= s.multiplier;
  return mult;
}

std::string ModelSpec::canonical_text() const {
  std::ostringstream os;
  os << "num_layers=" << num_layers << "\nhidden_dim=" << hidden_dim
     << "\nnum_heads=" << num_heads << "\nffn_dim=" << ffn_dim << "\nvocab_size=" << vocab_size
     << "\nmax_seq_len=" << max_seq_len << "\nseed=" << seed << "\n";
  for (const ModuleScale& s : module_scales)
    os << "module_scale=" << s.layer << ":" << projection_name(s.proj) << ":" << s.multiplier
       << "\n";
  return os.str();
}

std::string ModelSpec::hash_hex() const {
  const std::string text = canonical_text();
  std::uint64_t h = fnv1a64(text);
  std::ostringstream os;
  os << std::hex;
  for (int i = 15; i >= 0; --i) os << ((h >> (4 * i)) & 0xF);
  return os.str();
}

int Model::module_index(const ModuleId& m) const {
  if (m.layer < 1 || m.layer > spec.num_layers)
    throw std::invalid_argument("module layer out of range: " + module_name(m));
  return (m.layer - 1) * 7 + static_cast<int>(m.proj);
}

const Tensor& Model::module_weight(const ModuleId& m) const {
  return module_weights[static_cast<std::size_t>(module_index(m))];
}

namespace {

Tensor gaussian_tensor(std::vector<std::int64_t> shape, double std_dev, std::uint64_t seed) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = std_dev * rng.next_gaussian();
  return t;
}

}  // namespace

Model build_model(const ModelSpec& spec) {
  spec.validate();
  constexpr double kInitStd = 0.02;
  Model m;
  m.spec = spec;
  const std::int64_t d = spec.hidden_dim, f = spec.ffn_dim, v = spec.vocab_size;

  m.tok_embed = gaussian_tensor({v, d}, kInitStd, derive_seed(spec.seed, "tok_embed"));
  m.pos_embed = gaussian_tensor({spec.max_seq_len, d}, kInitStd, derive_seed(spec.seed, "pos_embed"));
  m.final_norm_gain = Tensor::full({d}, 1.0);
  m.output_head = gaussian_tensor({d, v}, kInitStd, derive_seed(spec.seed, "output_head"));

  for (int l = 1; l <= spec.num_layers; ++l) {
    m.attn_norm_gain.push_back(Tensor::full({d}, 1.0));
    m.mlp_norm_gain.push_back(Tensor::full({d}, 1.0));
  }

  for (const ModuleId& mod : spec.modules()) {
    std::vector<std::int64_t> shape;
    switch (mod.proj) {
      case Projection::q:
      case Projection::k:
      case Projection::v:
      case Projection::o: shape = {d, d}; break;
      case Projection::up:
      case Projection::gate: shape = {d, f}; break;
      case Projection::down: shape = {f, d}; break;
    }
    Tensor w = gaussian_tensor(std::move(shape), kInitStd,
                               derive_seed(spec.seed, "weight:" + module_name(mod)));
    const double mult = spec.scale_multiplier(mod);
    if (mult != 1.0)
      for (std::int64_t i = 0; i < w.size(); ++i) w[i] *= mult;
    m.module_weights.push_back(std::move(w));
  }
  return m;
}

Tape::NodeId embed_forward(Tape& tape, const Model& model, const TokenBatch& batch) {
  const ModelSpec& spec = model.spec;
  if (batch.seq_len > spec.max_seq_len)
    throw std::invalid_argument("batch seq_len exceeds model max_seq_len");
  for (int id : batch.ids)
    if (id < 0 || id >= spec.vocab_size)
      throw std::invalid_argument("token id out of range: " + std::to_string(id));

  std::vector<int> pos(static_cast<std::size_t>(batch.batch) * batch.seq_len);
  for (int b = 0; b < batch.batch; ++b)
    for (int t = 0; t < batch.seq_len; ++t)
      pos[static_cast<std::size_t>(b) * batch.seq_len + t] = t;

  Tape::NodeId tok = tape.gather_rows(tape.constant(model.tok_embed), batch.ids);
  Tape::NodeId ps = tape.gather_rows(tape.constant(model.pos_embed), std::move(pos));
  Tape::NodeId h = tape.add(tok, ps);
  return tape.reshape(h, {batch.batch, batch.seq_len, spec.hidden_dim});
}

Tape::NodeId layer_forward(Tape& tape, const Model& model, int layer, Tape::NodeId input,
                           const LayerWeightNodes& weights) {
  const ModelSpec& spec = model.spec;
  if (layer < 1 || layer > spec.num_layers) throw std::invalid_argument("layer out of range");
  const Tensor& vin = tape.value(input);
  if (vin.rank() != 3 || vin.dim(2) != spec.hidden_dim)
    throw std::invalid_argument("layer_forward: input must be [batch, seq, d]");
  const std::int64_t batch = vin.dim(0), seq = vin.dim(1), d = vin.dim(2);
  const std::int64_t heads = spec.num_heads, hd = d / heads;

  Tape::NodeId h = tape.reshape(input, {batch * seq, d});

  Tape::NodeId attn_gain = tape.constant(model.attn_norm_gain[static_cast<std::size_t>(layer - 1)]);
  Tape::NodeId a = tape.rms_norm(h, attn_gain, Model::kRmsEps);
  Tape::NodeId q = tape.matmul(a, weights[Projection::q]);
  Tape::NodeId k = tape.matmul(a, weights[Projection::k]);
  Tape::NodeId v = tape.matmul(a, weights[Projection::v]);
  Tape::NodeId qh = tape.split_heads(q, batch, seq, heads);
  Tape::NodeId kh = tape.split_heads(k, batch, seq, heads);
  Tape::NodeId vh = tape.split_heads(v, batch, seq, heads);
  Tape::NodeId scores = tape.scale(tape.bmm_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(hd)));
  Tape::NodeId probs = tape.causal_softmax(scores);
  Tape::NodeId ctx = tape.bmm(probs, vh);
  Tape::NodeId merged = tape.merge_heads(ctx, batch, heads, seq);
  Tape::NodeId attn_out = tape.matmul(merged, weights[Projection::o]);
  h = tape.add(h, attn_out);

  Tape::NodeId mlp_gain = tape.constant(model.mlp_norm_gain[static_cast<std::size_t>(layer - 1)]);
  Tape::NodeId x = tape.rms_norm(h, mlp_gain, Model::kRmsEps);
  Tape::NodeId gate = tape.silu(tape.matmul(x, weights[Projection::gate]));
  Tape::NodeId up = tape.matmul(x, weights[Projection::up]);
  Tape::NodeId mlp = tape.matmul(tape.mul(gate, up), weights[Projection::down]);
  h = tape.add(h, mlp);

  return tape.reshape(h, {batch, seq, d});
}

HiddenStateTrace teacher_trace(const Model& model, const TokenBatch& batch) {
  Tape tape(/*grad_enabled=*/false);
  HiddenStateTrace trace;
  trace.reserve(static_cast<std::size_t>(model.spec.num_layers) + 1);
  Tape::NodeId h = embed_forward(tape, model, batch);
  trace.push_back(tape.value(h));
  for (int l = 1; l <= model.spec.num_layers; ++l) {
    LayerWeightNodes w;
    for (Projection p : kProjections)
      w[p] = tape.constant(model.module_weight(ModuleId{l, p}));
    h = layer_forward(tape, model, l, h, w);
    trace.push_back(tape.value(h));
  }
  return trace;
}

Tape::NodeId full_forward_graph(Tape& tape, const Model& model,
                                const std::vector<Tape::NodeId>& weights,
                                const TokenBatch& batch) {
  const ModelSpec& spec = model.spec;
  if (static_cast<int>(weights.size()) != spec.num_modules())
    throw std::invalid_argument("full_forward_graph: weight map must cover every module");
  Tape::NodeId h = embed_forward(tape, model, batch);
  for (int l = 1; l <= spec.num_layers; ++l) {
    LayerWeightNodes w;
    for (Projection p : kProjections)
      w[p] = weights[static_cast<std::size_t>((l - 1) * 7 + static_cast<int>(p))];
    h = layer_forward(tape, model, l, h, w);
  }
  const std::int64_t bs = static_cast<std::int64_t>(batch.batch) * batch.seq_len;
  Tape::NodeId flat = tape.reshape(h, {bs, spec.hidden_dim});
  Tape::NodeId normed = tape.rms_norm(flat, tape.constant(model.final_norm_gain), Model::kRmsEps);
  Tape::NodeId logits = tape.matmul(normed, tape.constant(model.output_head));
  return tape.reshape(logits, {batch.batch, batch.seq_len, spec.vocab_size});
}

Tape::NodeId next_token_ce_graph(Tape& tape, Tape::NodeId logits, const TokenBatch& batch) {
  const Tensor& v = tape.value(logits);
  if (v.rank() != 3) throw std::invalid_argument("next_token_ce_graph: logits must be 3-D");
  const std::int64_t vocab = v.dim(2);
  std::vector<int> keep, targets;
  keep.reserve(static_cast<std::size_t>(batch.batch) * (batch.seq_len - 1));
  targets.reserve(keep.capacity());
  for (int b = 0; b < batch.batch; ++b)
    for (int t = 0; t + 1 < batch.seq_len; ++t) {
      keep.push_back(b * batch.seq_len + t);
      targets.push_back(batch.token(b, t + 1));
    }
  Tape::NodeId flat =
      tape.reshape(logits, {static_cast<std::int64_t>(batch.batch) * batch.seq_len, vocab});
  Tape::NodeId sel = tape.gather_rows(flat, std::move(keep));
  return tape.cross_entropy(sel, std::move(targets));
}

Tensor mixed_layer_forward(const Model& model, int layer, const Tensor& teacher_input,
                           const LayerWeights& mixed_weights) {
  Tape tape(/*grad_enabled=*/false);
  LayerWeightNodes w;
  for (Projection p : kProjections) {
    const Tensor& wt = mixed_weights[static_cast<std::size_t>(p)];
    if (!wt.defined())
      throw std::invalid_argument(std::string("mixed_layer_forward: missing projection ") +
                                  projection_name(p));
    w[p] = tape.constant(wt);
  }
  Tape::NodeId in = tape.constant(teacher_input);
  return tape.value(layer_forward(tape, model, layer, in, w));
}

Tensor full_forward_logits(const Model& model, const std::vector<Tensor>& weights,
                           const TokenBatch& batch) {
  Tape tape(/*grad_enabled=*/false);
  std::vector<Tape::NodeId> nodes;
  nodes.reserve(weights.size());
  for (const Tensor& w : weights) nodes.push_back(tape.constant(w));
  return tape.value(full_forward_graph(tape, model, nodes, batch));
}

}  // namespace bitbudget
