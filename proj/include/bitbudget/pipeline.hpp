#pragma once

#include <string>
#include <vector>

#include "bitbudget/allocator.hpp"
#include "bitbudget/baselines.hpp"
#include "bitbudget/config.hpp"
#include "bitbudget/container.hpp"
#include "bitbudget/masks.hpp"

namespace bitbudget {

// Teacher-forced reconstruction error of a discrete assignment on the holdout
// split: (1/L) * sum over layers of the per-element mean squared difference,
// averaged over holdout samples.
double holdout_recon_error(const Model& model, const CandidatePool& pool,
                           const DiscreteAssignment& assignment, const CalibrationStream& stream,
                           int batch_size);

// Same evaluation for a soft score matrix via the induced mixed weights.
double holdout_recon_error_soft(const Model& model, const CandidatePool& pool,
                                const Tensor& probs, const CalibrationStream& stream,
                                int batch_size);

struct AllocateReport {
  double budget = 0.0;
  DiscreteAssignment assignment;
  double pearson = 0.0;
  double holdout_error = 0.0;
};

struct CompareRow {
  std::string method;
  double budget = 0.0;
  double realized_bits = 0.0;
  double holdout_error = 0.0;
};

// Command bodies shared by the CLI and the python bindings. Each writes its
// artifacts under cfg.out and updates the run manifest.
void cmd_build(const RunConfig& cfg);
void cmd_learn(const RunConfig& cfg);
std::vector<AllocateReport> cmd_allocate(const RunConfig& cfg);
std::vector<CompareRow> cmd_compare(const RunConfig& cfg);
std::vector<std::string> cmd_validate(const RunConfig& cfg);

// CSV helpers for the figure-analog reports.
void write_heatmap_csv(const std::string& path, const ModelSpec& spec,
                       const std::vector<double>& per_module_bits);
void write_budget_curve_csv(const std::string& path, const std::vector<AllocateReport>& reports);

}  // namespace bitbudget
