#include <cmath>
#include <limits>
#include <stdexcept>

#include <doctest.h>

#include "bitbudget/baselines.hpp"
#include "bitbudget/errors.hpp"
#include "test_util.hpp"

using namespace bitbudget;
using testutil::random_tensor;

namespace {

ModelSpec tiny_spec() {
  ModelSpec s;
  s.num_layers = 1;
  s.hidden_dim = 8;
  s.num_heads = 2;
  s.ffn_dim = 12;
  s.vocab_size = 16;
  s.max_seq_len = 8;
  s.seed = 9;
  return s;
}

// Gradient of 0.5 * w^T A w for symmetric A (row-major d x d): grad = A w.
GradFn quadratic_grad(const Tensor& a) {
  return [a](const std::vector<double>& w) {
    const std::int64_t d = a.dim(0);
    std::vector<double> g(w.size(), 0.0);
    for (std::int64_t i = 0; i < d; ++i)
      for (std::int64_t j = 0; j < d; ++j) g[static_cast<std::size_t>(i)] += a[i * d + j] * w[static_cast<std::size_t>(j)];
    return g;
  };
}

}  // namespace

TEST_CASE("uniform assignment") {
  ModelSpec spec = tiny_spec();
  BitWidthSet bits;
  const DiscreteAssignment a = uniform_assignment(spec, bits, 3);
  CHECK(a.modules.size() == 7);
  for (int b : a.chosen_bits) CHECK(b == 3);
  CHECK(a.realized_avg_bits == 3.0);
  CHECK_FALSE(a.optimal);
  CHECK_THROWS_AS(uniform_assignment(spec, bits, 5), std::invalid_argument);

  // Objective under a score set is the sum of the chosen scores.
  SoftScores s;
  s.modules = spec.modules();
  s.bits = bits.bits;
  s.scores = Tensor::full({7, 3}, 1.0 / 3);
  for (const ModuleId& m : s.modules) s.param_counts.push_back(spec.module_param_count(m));
  s.expected_avg_bits = 3.0;
  CHECK(assignment_objective(s, a) == doctest::Approx(7.0 / 3).epsilon(1e-12));
}

TEST_CASE("hutchinson: identity Hessian yields exactly the dimension") {
  const std::int64_t d = 24;
  Tensor eye({d, d});
  for (std::int64_t i = 0; i < d; ++i) eye[i * d + i] = 1.0;
  const std::vector<double> w0(static_cast<std::size_t>(d), 0.0);
  // v^T I v = d for every Rademacher probe, so any probe count is exact.
  CHECK(hutchinson_trace(quadratic_grad(eye), w0, 1, 77) == static_cast<double>(d));
  CHECK(hutchinson_trace(quadratic_grad(eye), w0, 7, 123) == static_cast<double>(d));
}

TEST_CASE("hutchinson: known dense 8x8 quadratic within 5 percent") {
  const std::int64_t d = 8;
  Rng rng(2025);
  Tensor a({d, d});
  double trace = 0.0;
  for (std::int64_t i = 0; i < d; ++i) {
    for (std::int64_t j = 0; j < i; ++j) {
      const double v = 0.3 * rng.next_gaussian();
      a[i * d + j] = v;
      a[j * d + i] = v;
    }
    a[i * d + i] = 1.0 + static_cast<double>(i);
    trace += a[i * d + i];
  }
  std::vector<double> w0(static_cast<std::size_t>(d));
  for (double& v : w0) v = rng.next_gaussian();

  const double est = hutchinson_trace(quadratic_grad(a), w0, 1000, 31337);
  CHECK(std::fabs(est - trace) / trace < 0.05);

  // Doubling the loss doubles the estimate (same probes).
  Tensor a2(a.shape());
  for (std::int64_t i = 0; i < a.size(); ++i) a2[i] = 2.0 * a[i];
  const double est2 = hutchinson_trace(quadratic_grad(a2), w0, 1000, 31337);
  CHECK(est2 == doctest::Approx(2.0 * est).epsilon(1e-9));

  CHECK_THROWS_AS(hutchinson_trace(quadratic_grad(a), w0, 0, 1), std::invalid_argument);
}

TEST_CASE("hutchinson: standard error shrinks with probe count") {
  const std::int64_t d = 8;
  Rng rng(5150);
  Tensor a({d, d});
  for (std::int64_t i = 0; i < d; ++i) {
    for (std::int64_t j = 0; j < i; ++j) {
      const double v = 0.5 * rng.next_gaussian();
      a[i * d + j] = v;
      a[j * d + i] = v;
    }
    a[i * d + i] = 2.0;
  }
  const std::vector<double> w0(static_cast<std::size_t>(d), 0.25);
  auto spread = [&](int probes) {
    double mean = 0.0, m2 = 0.0;
    const int reps = 24;
    for (int r = 0; r < reps; ++r) {
      const double e = hutchinson_trace(quadratic_grad(a), w0, probes,
                                        derive_seed(900, "rep", static_cast<std::uint64_t>(r)));
      mean += e;
      m2 += e * e;
    }
    mean /= reps;
    return std::sqrt(std::max(0.0, m2 / reps - mean * mean));
  };
  CHECK(spread(256) < spread(4));
}

TEST_CASE("hutchinson: non-finite Hessian-vector products are reported") {
  GradFn bad = [](const std::vector<double>& w) {
    return std::vector<double>(w.size(), std::numeric_limits<double>::quiet_NaN());
  };
  CHECK_THROWS_AS(hutchinson_trace(bad, {1.0, 2.0}, 1, 4), std::runtime_error);
}

TEST_CASE("module traces: determinism and finiteness") {
  const ModelSpec spec = tiny_spec();
  const Model model = build_model(spec);
  TokenBatch batch;
  batch.batch = 2;
  batch.seq_len = 6;
  Rng rng(3);
  for (int i = 0; i < 12; ++i) batch.ids.push_back(rng.next_below(spec.vocab_size));

  const TraceEstimate a = estimate_module_traces(model, batch, 2, 42);
  const TraceEstimate b = estimate_module_traces(model, batch, 2, 42);
  REQUIRE(a.trace.size() == 7);
  for (std::size_t i = 0; i < a.trace.size(); ++i) {
    CHECK(std::isfinite(a.trace[i]));
    CHECK(a.trace[i] == b.trace[i]);
  }
  CHECK(a.trace_of(ModuleId{1, Projection::up}) == a.trace[4]);
  CHECK_THROWS_AS(a.trace_of(ModuleId{2, Projection::up}), std::invalid_argument);
}

TEST_CASE("hawq allocation: trace-weighted choices and feasibility") {
  // Synthetic pool with identical geometry for every module, so the only
  // differences come from the traces themselves.
  ModelSpec spec = tiny_spec();
  spec.num_layers = 2;
  BitWidthSet bits;
  std::vector<Tensor> refs, cands;
  Rng rng(8);
  const Tensor base_q = random_tensor({spec.hidden_dim, spec.hidden_dim}, rng);
  const Tensor base_up = random_tensor({spec.hidden_dim, spec.ffn_dim}, rng);
  const Tensor base_down = random_tensor({spec.ffn_dim, spec.hidden_dim}, rng);
  auto base_for = [&](Projection p) -> const Tensor& {
    if (p == Projection::up || p == Projection::gate) return base_up;
    if (p == Projection::down) return base_down;
    return base_q;
  };
  for (const ModuleId& m : spec.modules()) {
    const Tensor& w = base_for(m.proj);
    refs.push_back(w);
    for (int b : bits.bits) cands.push_back(quantize_rtn(w, b, 4));
  }
  const CandidatePool pool(spec, bits, 4, std::move(refs), std::move(cands));

  TraceEstimate traces;
  traces.modules = spec.modules();
  traces.trace.assign(14, 1.0);
  traces.num_probes = 1;

  // Equal traces: still exact and feasible; certificate present.
  const DiscreteAssignment eq = hawq_allocate(traces, pool, 3.0);
  CHECK(eq.optimal);
  CHECK(eq.realized_avg_bits <= 3.0);

  // A 10x trace on layer-1 up must receive at least as many bits as its
  // identical layer-2 twin. Cross-checked against the exhaustive oracle.
  traces.trace[4] = 10.0;  // layer 1, up
  const DiscreteAssignment a = hawq_allocate(traces, pool, 3.0);
  const int hot = a.chosen(ModuleId{1, Projection::up});
  const int twin = a.chosen(ModuleId{2, Projection::up});
  CHECK(hot >= twin);

  std::vector<double> values;
  std::vector<std::int64_t> counts;
  for (std::size_t i = 0; i < traces.modules.size(); ++i) {
    const ModuleId& m = traces.modules[i];
    counts.push_back(spec.module_param_count(m));
    const Tensor& fp = pool.reference(m);
    for (int b : bits.bits) {
      const Tensor& q = pool.candidate(m, b);
      double ssd = 0.0;
      for (std::int64_t j = 0; j < fp.size(); ++j) ssd += (fp[j] - q[j]) * (fp[j] - q[j]);
      values.push_back(-traces.trace[i] / static_cast<double>(counts.back()) * ssd);
    }
  }
  // Recompute the cost table independently and re-solve; 3^14 assignments is
  // beyond the brute-force guard, so branch-and-bound serves as the second
  // exact route here.
  const DiscreteAssignment oracle = solve_values(traces.modules, bits.bits, values, counts, 3.0,
                                                 SolverKind::branch_and_bound);
  CHECK(a.objective_value == oracle.objective_value);
  CHECK(a.chosen_bits == oracle.chosen_bits);

  TraceEstimate missing;
  missing.modules = {ModuleId{1, Projection::q}};
  missing.trace = {1.0};
  CHECK_THROWS_AS(hawq_allocate(missing, pool, 3.0), std::invalid_argument);
}
