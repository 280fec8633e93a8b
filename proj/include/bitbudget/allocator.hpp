#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bitbudget/masks.hpp"
#include "bitbudget/model.hpp"

namespace bitbudget {

enum class SolverKind { auto_select, dp, branch_and_bound, brute_force };

const char* solver_kind_name(SolverKind k);
SolverKind solver_kind_from_name(const std::string& name);

// One multiple-choice knapsack instance: pick exactly one bit-width per module
// to maximize the total score subject to sum N*b <= floor(budget * sum N).
struct AllocationProblem {
  std::vector<ModuleId> modules;           // lexicographic (layer, proj)
  std::vector<int> bits;                   // ascending
  std::vector<double> scores;              // [modules x bits], rows sum to 1
  std::vector<std::int64_t> param_counts;  // per module
  double budget = 3.0;

  void validate() const;  // score rows sum to 1 within 1e-6, counts positive
};

AllocationProblem problem_from_scores(const SoftScores& scores, double budget);

struct DiscreteAssignment {
  std::vector<ModuleId> modules;
  std::vector<int> chosen_bits;  // one per module
  double realized_avg_bits = 0.0;
  double objective_value = 0.0;
  SolverKind solver = SolverKind::dp;
  bool optimal = false;  // exactness certificate

  int chosen(const ModuleId& m) const;
};

// Exact optimum with deterministic tie-breaking: among equal-objective optima
// the lexicographically smallest assignment (module order, then lower bit)
// is returned. auto_select uses dynamic programming while the scaled table
// fits the cell budget and branch-and-bound beyond that.
DiscreteAssignment solve(const AllocationProblem& problem,
                         SolverKind kind = SolverKind::auto_select);

// Exhaustive oracle with identical tie-breaking. Guarded by an instance-size
// limit of |B|^modules <= 1e6.
DiscreteAssignment brute_force(const AllocationProblem& problem);

// Internal exact solver on raw values (no probability validation); used by
// sensitivity baselines that minimize a cost via negated values.
DiscreteAssignment solve_values(const std::vector<ModuleId>& modules,
                                const std::vector<int>& bits,
                                const std::vector<double>& values,
                                const std::vector<std::int64_t>& param_counts, double budget,
                                SolverKind kind);

// Re-solve the integer program at a new budget on the same learned scores.
DiscreteAssignment reuse_scores(const SoftScores& scores, double new_budget,
                                SolverKind kind = SolverKind::auto_select);

// Pearson correlation between the flattened soft scores and the one-hot
// assignment indicators.
double pearson_alignment(const SoftScores& scores, const DiscreteAssignment& assignment);

// Cosine similarity of two per-module expected-bit maps.
double allocation_similarity(const std::vector<double>& a, const std::vector<double>& b);

// Per-module expected bits under soft scores / under a discrete assignment.
std::vector<double> expected_bits_map(const SoftScores& scores);
std::vector<double> assigned_bits_map(const DiscreteAssignment& assignment);

}  // namespace bitbudget
