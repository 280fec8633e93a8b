#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "bitbudget/allocator.hpp"
#include "bitbudget/calibration.hpp"
#include "bitbudget/model.hpp"
#include "bitbudget/quantizer.hpp"

namespace bitbudget {

// Every module at the same bit-width. Carries no optimality certificate.
DiscreteAssignment uniform_assignment(const ModelSpec& spec, const BitWidthSet& bitset, int b);

// Objective of an assignment under a score set, folded in module order.
double assignment_objective(const SoftScores& scores, const DiscreteAssignment& assignment);

// Gradient of a scalar loss with respect to a flat parameter vector.
using GradFn = std::function<std::vector<double>(const std::vector<double>& w)>;

// Hutchinson estimate of tr(H) at w0: mean over Rademacher probes v of
// v . Hv, with Hv formed by central differences of first gradients
// (grad(w0 + eps v) - grad(w0 - eps v)) / (2 eps).
double hutchinson_trace(const GradFn& grad_fn, const std::vector<double>& w0, int num_probes,
                        std::uint64_t seed, double fd_step = 1e-3);

struct TraceEstimate {
  std::vector<ModuleId> modules;
  std::vector<double> trace;
  int num_probes = 0;
  std::uint64_t probe_seed = 0;

  double trace_of(const ModuleId& m) const;
};

// Per-module Hessian traces of the teacher-forced layer reconstruction loss,
// evaluated at the full-precision weights on one calibration batch. Teacher
// forcing isolates layers, so each module only needs its own layer's loss.
TraceEstimate estimate_module_traces(const Model& model, const TokenBatch& batch, int num_probes,
                                     std::uint64_t seed, double fd_step = 1e-3);

// HAWQ-style allocation: per-candidate cost
//   Omega_{m,b} = (trace_m / N_m) * ||W_b - W_fp||^2,
// minimized under the bit budget by running the exact MCKP solver on -Omega.
DiscreteAssignment hawq_allocate(const TraceEstimate& traces, const CandidatePool& pool,
                                 double b_target, SolverKind kind = SolverKind::auto_select);

}  // namespace bitbudget
