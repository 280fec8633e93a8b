#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bitbudget/allocator.hpp"
#include "bitbudget/calibration.hpp"
#include "bitbudget/masks.hpp"
#include "bitbudget/model.hpp"
#include "bitbudget/quantizer.hpp"

namespace bitbudget {

// Flat key=value run configuration; file values can be overridden by flags.
struct RunConfig {
  // model
  int num_layers = 4;
  int hidden_dim = 64;
  int num_heads = 4;
  int ffn_dim = 128;
  int vocab_size = 256;
  int max_seq_len = 64;
  std::uint64_t model_seed = 1;
  std::vector<ModuleScale> module_scales;
  // calibration data
  int num_sequences = 128;
  int seq_len = 64;
  std::uint64_t data_seed = 11;
  std::string source = "markov";
  double holdout_fraction = 0.25;
  std::string calibration_file;
  // quantizer
  std::vector<int> bits{2, 3, 4};
  int group_size = 16;
  // stage 1
  int steps = 600;
  int batch_size = 8;
  double lr = 5e-3;
  double dual_lr = -1.0;  // < 0 means 0.1 x lr
  double lambda2_init = 0.0;
  double tau = 1.0;
  double momentum = 0.0;
  std::uint64_t train_seed = 7;
  double b_target = 3.0;
  std::string mode = "al";
  std::string relaxation = "gumbel_softmax";
  std::string extraction = "noise_free";
  // stage 2
  std::string solver = "auto";
  std::vector<double> budgets;  // allocate/compare budgets; empty = {b_target}
  // baselines
  int trace_probes = 4;
  std::uint64_t trace_seed = 99;
  // output
  std::string out = "runs/default";

  static RunConfig from_file(const std::string& path);
  void set_key(const std::string& key, const std::string& value);
  void validate() const;
  std::string canonical_text() const;
  std::string hash_hex() const;

  ModelSpec model_spec() const;
  CalibrationConfig calibration_config() const;
  BitWidthSet bitset() const;
  Stage1Config stage1_config() const;
  SolverKind solver_kind() const;
  double effective_dual_lr() const { return dual_lr < 0.0 ? 0.1 * lr : dual_lr; }
  std::vector<double> effective_budgets() const { return budgets.empty() ? std::vector<double>{b_target} : budgets; }
};

}  // namespace bitbudget
