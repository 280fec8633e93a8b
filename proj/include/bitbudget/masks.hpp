#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bitbudget/calibration.hpp"
#include "bitbudget/model.hpp"
#include "bitbudget/quantizer.hpp"
#include "bitbudget/rng.hpp"
#include "bitbudget/tensor.hpp"

namespace bitbudget {

enum class RelaxationMode { gumbel_softmax, binary_sigmoid };
enum class ConstraintMode { augmented_lagrangian, multiplicative_penalty, ce_loss };
enum class ScoreExtraction { noise_free, final_sample, mean_of_samples };

const char* constraint_mode_name(ConstraintMode m);
ConstraintMode constraint_mode_from_name(const std::string& name);
const char* relaxation_mode_name(RelaxationMode m);
RelaxationMode relaxation_mode_from_name(const std::string& name);
const char* score_extraction_name(ScoreExtraction e);
ScoreExtraction score_extraction_from_name(const std::string& name);

// Trainable per-module logits over candidate bit-widths.
struct MaskState {
  Tensor logits;  // [num_modules, |B|]
  double tau = 1.0;
  std::uint64_t rng_seed = 0;
  RelaxationMode relaxation = RelaxationMode::gumbel_softmax;
};

MaskState make_mask_state(const ModelSpec& spec, const BitWidthSet& bitset, double tau,
                          std::uint64_t rng_seed, RelaxationMode relaxation);

// Dual variables of the augmented Lagrangian; lambda2 is kept >= 0.
struct DualState {
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  double learning_rate = 5e-4;
};

struct LossReport {
  double recon = 0.0;
  double deviation = 0.0;
  double penalty_linear = 0.0;
  double penalty_quadratic = 0.0;
  double total = 0.0;
};

struct SoftScores {
  std::string spec_hash;
  std::vector<ModuleId> modules;            // lexicographic
  std::vector<int> bits;                    // ascending
  Tensor scores;                            // [num_modules, |B|], rows sum to 1
  std::vector<std::int64_t> param_counts;   // per module
  double expected_avg_bits = 0.0;
  double budget_target = 0.0;
  int steps = 0;
  std::uint64_t seed = 0;
  ConstraintMode mode = ConstraintMode::augmented_lagrangian;

  void validate() const;
};

// Multiplicative-penalty ablation constants:
// total = recon * max(beta * (log(dev^2 + eps))^gamma, floor).
struct PenaltyParams {
  double beta = 1.0;
  double gamma = 1.0;
  double eps = 1e-4;
  double floor = 1e-3;
};

struct Stage1Config {
  int steps = 600;
  int batch_size = 8;
  double lr = 5e-3;
  double dual_lr = 5e-4;  // 0.1 x primal by default
  double lambda2_init = 0.0;
  double tau = 1.0;
  double momentum = 0.0;
  std::uint64_t seed = 7;
  double b_target = 3.0;
  ConstraintMode mode = ConstraintMode::augmented_lagrangian;
  RelaxationMode relaxation = RelaxationMode::gumbel_softmax;
  ScoreExtraction extraction = ScoreExtraction::noise_free;
  PenaltyParams penalty;
};

// Draws the per-step relaxation noise: Gumbel(0,1) per (module, candidate) in
// gumbel_softmax mode, Logistic(0,1) per module in binary_sigmoid mode.
Tensor sample_relaxation_noise(const MaskState& state, Rng& rng);

// Eager relaxed probabilities for the given noise (zero noise tensor gives the
// noise-free distribution). Rows sum to 1.
Tensor relaxed_probs(const MaskState& state, const Tensor& noise);

// Convenience: draw noise from the stream and return probabilities.
Tensor sample_relaxed_probs(const MaskState& state, Rng& rng);

// Graph version; `logits` is a [M,|B|] node, noise is a constant.
Tape::NodeId relaxed_probs_node(Tape& tape, Tape::NodeId logits, const Tensor& noise,
                                const MaskState& state);

// W_mix candidates for one module as a graph node: sum_b probs[row,b] * W_b.
Tape::NodeId mix_weights_node(Tape& tape, const CandidatePool& pool, const ModuleId& module,
                              Tape::NodeId probs);

// Eager mixed weight for one module.
Tensor mix_weights(const CandidatePool& pool, const ModuleId& module, const Tensor& probs);

// Eq.-style expected average bit-width: sum_m N_m sum_b b p_{m,b} / sum_m N_m.
double expected_avg_bits(const Tensor& probs, const std::vector<std::int64_t>& param_counts,
                         const std::vector<int>& bits);

// Flattened constants c_{m,b} = N_m * b / sum N for the graph-side version.
std::vector<double> expected_bits_coeffs(const std::vector<std::int64_t>& param_counts,
                                         const std::vector<int>& bits);

// Stage-I loss at a fixed probability matrix (values only, no gradients).
LossReport stage1_loss(const Model& model, const CandidatePool& pool,
                       const HiddenStateTrace& trace, const TokenBatch& batch,
                       const Tensor& probs, const DualState& duals, double b_target,
                       ConstraintMode mode, const PenaltyParams& penalty = {});

// One full evaluation of the Stage-I objective at (logits, duals) with frozen
// noise: loss report plus gradients. This is the exact computation the
// training loop performs each step; samples are processed on independent
// tapes and reduced in sample order, so results do not depend on the worker
// count.
struct StepEval {
  LossReport report;
  Tensor probs;        // sampled p for this step
  Tensor grad_logits;  // dTotal/dlogits
  double grad_lambda1 = 0.0;
  double grad_lambda2 = 0.0;
};

StepEval stage1_step_eval(const Model& model, const CandidatePool& pool,
                          const HiddenStateTrace& trace, const TokenBatch& batch,
                          const MaskState& state, const Tensor& noise, const DualState& duals,
                          const Stage1Config& cfg, bool want_grads);

struct StepStats {
  int step = 0;
  LossReport report;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  double expected_bits = 0.0;  // under the step's sampled p
};

struct Stage1Result {
  SoftScores scores;
  MaskState final_state;
  DualState duals;
  std::vector<StepStats> log;
};

Stage1Result train_stage1(const Model& model, const CandidatePool& pool,
                          const CalibrationStream& stream, const Stage1Config& cfg);

}  // namespace bitbudget
