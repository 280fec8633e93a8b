#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "bitbudget/calibration.hpp"
#include "bitbudget/tensor.hpp"

namespace bitbudget {

// The seven quantizable linear projections of a decoder layer, in canonical
// order. This order is also the tie-break order for discrete allocation.
enum class Projection : int { q = 0, k, v, o, up, gate, down };

inline constexpr std::array<Projection, 7> kProjections = {
    Projection::q, Projection::k, Projection::v, Projection::o,
    Projection::up, Projection::gate, Projection::down};

const char* projection_name(Projection p);
Projection projection_from_name(const std::string& name);

struct ModuleId {
  int layer = 1;  // 1-based
  Projection proj = Projection::q;

  friend bool operator==(const ModuleId&, const ModuleId&) = default;
  friend auto operator<=>(const ModuleId&, const ModuleId&) = default;
};

std::string module_name(const ModuleId& m);

// Per-module weight-scale multiplier, used to inject controlled sensitivity.
struct ModuleScale {
  int layer = 1;
  Projection proj = Projection::q;
  double multiplier = 1.0;
};

struct ModelSpec {
  int num_layers = 4;
  int hidden_dim = 64;
  int num_heads = 4;
  int ffn_dim = 128;
  int vocab_size = 256;
  int max_seq_len = 64;
  std::uint64_t seed = 1;
  std::vector<ModuleScale> module_scales;

  void validate() const;
  std::vector<ModuleId> modules() const;  // lexicographic (layer, proj)
  int num_modules() const { return num_layers * 7; }
  std::int64_t module_param_count(Projection p) const;
  std::int64_t module_param_count(const ModuleId& m) const { return module_param_count(m.proj); }
  std::int64_t total_quantizable_params() const;
  double scale_multiplier(const ModuleId& m) const;
  std::string canonical_text() const;
  std::string hash_hex() const;  // FNV-1a of canonical_text
};

// Frozen full-precision decoder model. Layer recipe: pre-RMSNorm causal
// multi-head attention (q,k,v,o projections) plus pre-RMSNorm SwiGLU MLP
// (up, gate, down), residual connections, learned absolute position
// embedding, final RMSNorm and linear head.
struct Model {
  static constexpr double kRmsEps = 1e-6;

  ModelSpec spec;
  Tensor tok_embed;                   // [vocab, d]
  Tensor pos_embed;                   // [max_seq, d]
  std::vector<Tensor> attn_norm_gain; // per layer, [d]
  std::vector<Tensor> mlp_norm_gain;  // per layer, [d]
  Tensor final_norm_gain;             // [d]
  Tensor output_head;                 // [d, vocab]
  std::vector<Tensor> module_weights; // modules() order

  int module_index(const ModuleId& m) const;
  const Tensor& module_weight(const ModuleId& m) const;
};

Model build_model(const ModelSpec& spec);

// Full-precision hidden states after each layer; entry 0 is the embedding
// output. Length num_layers + 1, entries shaped [batch, seq, d].
using HiddenStateTrace = std::vector<Tensor>;

HiddenStateTrace teacher_trace(const Model& model, const TokenBatch& batch);

// Tape node per projection of one layer, indexed by Projection.
struct LayerWeightNodes {
  std::array<Tape::NodeId, 7> node{};

  Tape::NodeId operator[](Projection p) const { return node[static_cast<std::size_t>(p)]; }
  Tape::NodeId& operator[](Projection p) { return node[static_cast<std::size_t>(p)]; }
};

// Embedding output for a batch as a graph node, shaped [batch, seq, d].
Tape::NodeId embed_forward(Tape& tape, const Model& model, const TokenBatch& batch);

// One decoder layer on the tape; input and output are [batch, seq, d].
Tape::NodeId layer_forward(Tape& tape, const Model& model, int layer, Tape::NodeId input,
                           const LayerWeightNodes& weights);

// Whole-model logits [batch, seq, vocab] with the given per-module weights
// (modules() order, all layers).
Tape::NodeId full_forward_graph(Tape& tape, const Model& model,
                                const std::vector<Tape::NodeId>& weights,
                                const TokenBatch& batch);

// Mean next-token cross entropy of the above logits.
Tape::NodeId next_token_ce_graph(Tape& tape, Tape::NodeId logits, const TokenBatch& batch);

// Value-level wrappers.
using LayerWeights = std::array<Tensor, 7>;  // indexed by Projection

Tensor mixed_layer_forward(const Model& model, int layer, const Tensor& teacher_input,
                           const LayerWeights& mixed_weights);
Tensor full_forward_logits(const Model& model, const std::vector<Tensor>& weights,
                           const TokenBatch& batch);

}  // namespace bitbudget
