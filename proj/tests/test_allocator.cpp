#include <cmath>
#include <stdexcept>

#include <doctest.h>

#include "bitbudget/allocator.hpp"
#include "bitbudget/errors.hpp"
#include "bitbudget/rng.hpp"

using namespace bitbudget;

namespace {

AllocationProblem make_problem(const std::vector<std::vector<double>>& rows,
                               const std::vector<std::int64_t>& counts,
                               const std::vector<int>& bits, double budget) {
  AllocationProblem p;
  for (std::size_t i = 0; i < rows.size(); ++i)
    p.modules.push_back(ModuleId{static_cast<int>(i) + 1, Projection::q});
  p.bits = bits;
  for (const auto& r : rows) p.scores.insert(p.scores.end(), r.begin(), r.end());
  p.param_counts = counts;
  p.budget = budget;
  return p;
}

// Random probability-row instance for solver cross-checks.
AllocationProblem random_instance(Rng& rng, int max_modules) {
  const int m = 1 + rng.next_below(max_modules);
  const int k = 2 + rng.next_below(2);  // |B| in {2, 3}
  std::vector<int> bits;
  int b = 2 + rng.next_below(2);
  for (int j = 0; j < k; ++j) {
    bits.push_back(b);
    b += 1 + rng.next_below(2);
  }
  std::vector<std::vector<double>> rows;
  std::vector<std::int64_t> counts;
  for (int i = 0; i < m; ++i) {
    std::vector<double> row(static_cast<std::size_t>(k));
    double sum = 0.0;
    for (int j = 0; j < k; ++j) {
      row[static_cast<std::size_t>(j)] = rng.next_uniform_open();
      sum += row[static_cast<std::size_t>(j)];
    }
    for (double& v : row) v /= sum;
    rows.push_back(std::move(row));
    counts.push_back(1 + rng.next_below(64));
  }
  const double budget =
      bits.front() + rng.next_uniform() * (bits.back() - bits.front());
  return make_problem(rows, counts, bits, budget);
}

}  // namespace

TEST_CASE("solve: unconstrained single module picks the best score") {
  const AllocationProblem p = make_problem({{0.1, 0.2, 0.7}}, {10}, {2, 3, 4}, 4.0);
  const DiscreteAssignment a = solve(p);
  CHECK(a.chosen_bits == std::vector<int>{4});
  CHECK(a.optimal);
  CHECK(a.realized_avg_bits == 4.0);
}

TEST_CASE("solve: forced corner at the minimum budget") {
  const AllocationProblem p =
      make_problem({{0.0, 0.0, 1.0}, {0.0, 1.0, 0.0}, {0.1, 0.2, 0.7}}, {5, 7, 9}, {2, 3, 4},
                   2.0);
  const DiscreteAssignment a = solve(p);
  CHECK(a.chosen_bits == std::vector<int>{2, 2, 2});
  CHECK(a.realized_avg_bits == 2.0);
}

TEST_CASE("solve: three-module instance equals exhaustive enumeration") {
  const AllocationProblem p = make_problem(
      {{0.1, 0.2, 0.7}, {0.6, 0.3, 0.1}, {0.2, 0.5, 0.3}}, {10, 10, 10}, {2, 3, 4}, 3.0);
  const DiscreteAssignment a = solve(p);
  const DiscreteAssignment o = brute_force(p);
  CHECK(a.objective_value == o.objective_value);
  CHECK(a.chosen_bits == o.chosen_bits);
  // By hand: capacity 90, best is (4,2,3) with 0.7+0.6+0.5 = 1.8.
  CHECK(a.chosen_bits == std::vector<int>{4, 2, 3});
  CHECK(a.objective_value == doctest::Approx(1.8).epsilon(1e-12));
}

TEST_CASE("solvers agree with the oracle on random instances") {
  Rng rng(2718);
  for (int trial = 0; trial < 300; ++trial) {
    const AllocationProblem p = random_instance(rng, 8);
    const DiscreteAssignment oracle = brute_force(p);
    for (SolverKind kind : {SolverKind::dp, SolverKind::branch_and_bound}) {
      const DiscreteAssignment got = solve(p, kind);
      CHECK(got.objective_value == oracle.objective_value);
      CHECK(got.chosen_bits == oracle.chosen_bits);  // shared tie-break rule
      CHECK(got.optimal);

      std::int64_t total_params = 0, total_bits = 0;
      for (std::size_t i = 0; i < p.modules.size(); ++i) {
        total_params += p.param_counts[i];
        total_bits += p.param_counts[i] * got.chosen_bits[i];
      }
      CHECK(total_bits <=
            static_cast<std::int64_t>(std::floor(p.budget * static_cast<double>(total_params))));
    }
  }
}

TEST_CASE("deterministic lexicographic tie-breaking") {
  // All rows identical: every feasible assignment with the same bit multiset
  // scores the same, so the lexicographically smallest one must be returned.
  const AllocationProblem p = make_problem(
      {{0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}}, {10, 10, 10}, {2, 4}, 3.0);
  // Capacity 90 allows one module at 4 bits (40 + 20 + 20 = 80 <= 90).
  // Equal objective everywhere: prefer low bits first at earlier modules, so
  // the lex-smallest optimum assigns everything the low bit.
  const DiscreteAssignment a = solve(p, SolverKind::dp);
  const DiscreteAssignment b = solve(p, SolverKind::branch_and_bound);
  const DiscreteAssignment o = brute_force(p);
  CHECK(a.chosen_bits == std::vector<int>{2, 2, 2});
  CHECK(b.chosen_bits == a.chosen_bits);
  CHECK(o.chosen_bits == a.chosen_bits);

  // Give module 2 a strict preference for 4 bits; the unique optimum spends
  // the slack there and the lex rule no longer applies.
  const AllocationProblem q = make_problem(
      {{0.5, 0.5}, {0.4, 0.6}, {0.5, 0.5}}, {10, 10, 10}, {2, 4}, 3.0);
  CHECK(solve(q).chosen_bits == std::vector<int>{2, 4, 2});
}

TEST_CASE("infeasible and resource errors") {
  const AllocationProblem p = make_problem({{0.3, 0.7}}, {10}, {2, 4}, 1.5);
  CHECK_THROWS_AS(solve(p), InfeasibleBudgetError);
  CHECK_THROWS_AS(brute_force(p), InfeasibleBudgetError);

  // Brute force guard: 3^20 > 1e6 assignments.
  std::vector<std::vector<double>> rows(20, {0.3, 0.3, 0.4});
  std::vector<std::int64_t> counts(20, 10);
  const AllocationProblem big = make_problem(rows, counts, {2, 3, 4}, 3.0);
  CHECK_THROWS_AS(brute_force(big), ResourceLimitError);
  CHECK_NOTHROW(solve(big, SolverKind::dp));

  // Forced dp beyond the cell budget reports a resource error. Coprime-ish
  // counts keep the gcd reduction from shrinking the table.
  const AllocationProblem huge =
      make_problem({{0.5, 0.5}, {0.5, 0.5}}, {40'000'001, 39'999'999}, {2, 4}, 3.9);
  CHECK_THROWS_AS(solve(huge, SolverKind::dp), ResourceLimitError);
  const DiscreteAssignment via_bnb = solve(huge, SolverKind::branch_and_bound);
  CHECK(via_bnb.optimal);
  const DiscreteAssignment via_auto = solve(huge);  // auto falls back to bnb
  CHECK(via_auto.solver == SolverKind::branch_and_bound);
  CHECK(via_auto.chosen_bits == via_bnb.chosen_bits);
}

TEST_CASE("empty module list is vacuous") {
  AllocationProblem p;
  p.bits = {2, 3};
  p.budget = 2.5;
  const DiscreteAssignment a = solve(p);
  CHECK(a.chosen_bits.empty());
  CHECK(a.objective_value == 0.0);
  CHECK(a.realized_avg_bits == 0.0);
  CHECK(a.optimal);
  const DiscreteAssignment o = brute_force(p);
  CHECK(o.objective_value == 0.0);
}

TEST_CASE("problem validation") {
  AllocationProblem p = make_problem({{0.5, 0.6}}, {10}, {2, 4}, 3.0);
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);  // row sums to 1.1
  p = make_problem({{0.5, 0.5}}, {0}, {2, 4}, 3.0);
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);  // zero count
}

TEST_CASE("objective is monotone in budget; realized bits nest") {
  Rng rng(31415);
  for (int trial = 0; trial < 50; ++trial) {
    const AllocationProblem base = random_instance(rng, 6);
    AllocationProblem lo = base, hi = base;
    lo.budget = base.bits.front() +
                0.3 * (base.bits.back() - base.bits.front());
    hi.budget = base.bits.front() +
                0.9 * (base.bits.back() - base.bits.front());
    const DiscreteAssignment alo = solve(lo);
    const DiscreteAssignment ahi = solve(hi);
    CHECK(alo.objective_value <= ahi.objective_value + 1e-15);
    CHECK(alo.realized_avg_bits <= ahi.realized_avg_bits + 1e-15);
    // Cross-check both against the oracle.
    CHECK(brute_force(lo).objective_value == alo.objective_value);
    CHECK(brute_force(hi).objective_value == ahi.objective_value);
  }
}

TEST_CASE("score reuse is exactly a re-solve") {
  Rng rng(999);
  const AllocationProblem base = random_instance(rng, 7);
  SoftScores s;
  s.modules = base.modules;
  s.bits = base.bits;
  s.scores = Tensor({static_cast<std::int64_t>(base.modules.size()),
                     static_cast<std::int64_t>(base.bits.size())},
                    base.scores);
  s.param_counts = base.param_counts;
  s.expected_avg_bits = expected_avg_bits(s.scores, s.param_counts, s.bits);
  s.budget_target = base.budget;

  const DiscreteAssignment direct = solve(base);
  const DiscreteAssignment reused = reuse_scores(s, base.budget);
  CHECK(reused.chosen_bits == direct.chosen_bits);
  CHECK(reused.objective_value == direct.objective_value);
  CHECK(reused.optimal == direct.optimal);

  const double other = 0.5 * (base.bits.front() + base.bits.back());
  AllocationProblem shifted = base;
  shifted.budget = other;
  CHECK(reuse_scores(s, other).chosen_bits == solve(shifted).chosen_bits);

  CHECK_THROWS_AS(reuse_scores(s, base.bits.front() - 0.5), InfeasibleBudgetError);
  CHECK_THROWS_AS(reuse_scores(s, base.bits.back() + 0.5), InfeasibleBudgetError);
}

TEST_CASE("pearson alignment: exact, anti-aligned, and degenerate cases") {
  SoftScores s;
  s.modules = {ModuleId{1, Projection::q}, ModuleId{1, Projection::k}};
  s.bits = {2, 3, 4};
  s.scores = Tensor({2, 3}, {1, 0, 0, 0, 0, 1});
  s.param_counts = {10, 10};
  s.expected_avg_bits = 3.0;
  s.budget_target = 3.0;

  DiscreteAssignment a;
  a.modules = s.modules;
  a.chosen_bits = {2, 4};  // matches the one-hot scores
  CHECK(pearson_alignment(s, a) == doctest::Approx(1.0).epsilon(1e-12));

  // Forced corner with peaked opposing scores: scores want 4 bits, the
  // assignment is pinned at 2, giving a negative correlation.
  SoftScores anti;
  anti.modules = s.modules;
  anti.bits = {2, 4};
  anti.scores = Tensor({2, 2}, {0.05, 0.95, 0.05, 0.95});
  anti.param_counts = {10, 10};
  DiscreteAssignment corner;
  corner.modules = s.modules;
  corner.chosen_bits = {2, 2};
  CHECK(pearson_alignment(anti, corner) < 0.0);

  // Uniform scores have zero variance against any one-hot vector... not so:
  // zero variance arises from constant score vectors.
  SoftScores flat;
  flat.modules = s.modules;
  flat.bits = {2, 4};
  flat.scores = Tensor({2, 2}, {0.5, 0.5, 0.5, 0.5});
  flat.param_counts = {10, 10};
  CHECK_THROWS_AS(pearson_alignment(flat, corner), std::domain_error);

  DiscreteAssignment mismatched;
  mismatched.modules = {ModuleId{2, Projection::q}, ModuleId{2, Projection::k}};
  mismatched.chosen_bits = {2, 2};
  CHECK_THROWS_AS(pearson_alignment(s, mismatched), std::invalid_argument);
}

TEST_CASE("allocation similarity: identity, negation, zero vector") {
  const std::vector<double> a{2.0, 3.0, 4.0, 2.5};
  std::vector<double> neg(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) neg[i] = -a[i];
  CHECK(allocation_similarity(a, a) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(allocation_similarity(a, neg) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK_THROWS_AS(allocation_similarity(a, std::vector<double>(4, 0.0)), std::domain_error);
  CHECK_THROWS_AS(allocation_similarity(a, {1.0}), std::invalid_argument);
}
