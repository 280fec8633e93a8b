#include "bitbudget/allocator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "bitbudget/errors.hpp"

namespace bitbudget {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr std::int64_t kDpCellBudget = 10'000'000;  // scaled capacity x modules

// Objective of an assignment, folded in fixed module order (right fold).
// Every solver uses this exact summation so equal assignments produce
// bit-identical objectives and tie-breaks agree across solvers.
double fold_objective(const std::vector<double>& values, int num_choices,
                      const std::vector<int>& choice) {
  double acc = 0.0;
  for (int m = static_cast<int>(choice.size()) - 1; m >= 0; --m)
    acc = values[static_cast<std::size_t>(m) * num_choices + choice[static_cast<std::size_t>(m)]] +
          acc;
  return acc;
}

struct Instance {
  int num_modules = 0;
  int num_choices = 0;
  std::vector<double> values;         // [m x k]
  std::vector<std::int64_t> weights;  // [m x k], scaled by gcd
  std::int64_t capacity = 0;          // scaled by gcd

  std::int64_t w(int m, int j) const {
    return weights[static_cast<std::size_t>(m) * num_choices + j];
  }
  double v(int m, int j) const {
    return values[static_cast<std::size_t>(m) * num_choices + j];
  }
};

Instance make_instance(const std::vector<int>& bits, const std::vector<double>& values,
                       const std::vector<std::int64_t>& counts, double budget) {
  Instance inst;
  inst.num_modules = static_cast<int>(counts.size());
  inst.num_choices = static_cast<int>(bits.size());
  inst.values = values;

  std::int64_t total_params = 0;
  for (std::int64_t n : counts) {
    if (n <= 0) throw std::invalid_argument("parameter counts must be positive");
    total_params += n;
  }
  std::int64_t capacity = static_cast<std::int64_t>(
      std::floor(budget * static_cast<double>(total_params)));

  inst.weights.resize(static_cast<std::size_t>(inst.num_modules) * inst.num_choices);
  std::int64_t g = 0;
  for (int m = 0; m < inst.num_modules; ++m)
    for (int j = 0; j < inst.num_choices; ++j) {
      const std::int64_t w = counts[static_cast<std::size_t>(m)] * bits[static_cast<std::size_t>(j)];
      inst.weights[static_cast<std::size_t>(m) * inst.num_choices + j] = w;
      g = std::gcd(g, w);
    }
  if (g > 1) {
    for (std::int64_t& w : inst.weights) w /= g;
    capacity = capacity / g;  // floor; all reachable totals are multiples of g
  }
  inst.capacity = capacity;

  // Feasibility: the all-minimum assignment must fit.
  std::int64_t min_total = 0;
  for (int m = 0; m < inst.num_modules; ++m) min_total += inst.w(m, 0);
  if (inst.num_modules > 0 && min_total > inst.capacity)
    throw InfeasibleBudgetError("budget " + std::to_string(budget) +
                                " is below the minimum candidate bit-width");
  return inst;
}

// ---------------- dynamic programming ----------------

std::vector<int> solve_dp(const Instance& inst) {
  const int m_count = inst.num_modules;
  const std::int64_t cap = inst.capacity;
  // suffix[m][c]: best fold value over modules m.. with remaining capacity c.
  std::vector<double> suffix(static_cast<std::size_t>(m_count + 1) * (cap + 1), kNegInf);
  for (std::int64_t c = 0; c <= cap; ++c) suffix[static_cast<std::size_t>(m_count) * (cap + 1) + c] = 0.0;

  for (int m = m_count - 1; m >= 0; --m) {
    double* cur = suffix.data() + static_cast<std::size_t>(m) * (cap + 1);
    const double* nxt = suffix.data() + static_cast<std::size_t>(m + 1) * (cap + 1);
    for (std::int64_t c = 0; c <= cap; ++c) {
      double best = kNegInf;
      for (int j = 0; j < inst.num_choices; ++j) {
        const std::int64_t w = inst.w(m, j);
        if (w > c) continue;
        const double rest = nxt[c - w];
        if (rest == kNegInf) continue;
        best = std::max(best, inst.v(m, j) + rest);
      }
      cur[c] = best;
    }
  }

  // Walk forward choosing the smallest bit that still attains the optimum.
  std::vector<int> choice(static_cast<std::size_t>(m_count));
  std::int64_t c = cap;
  for (int m = 0; m < m_count; ++m) {
    const double* cur = suffix.data() + static_cast<std::size_t>(m) * (cap + 1);
    const double* nxt = suffix.data() + static_cast<std::size_t>(m + 1) * (cap + 1);
    bool found = false;
    for (int j = 0; j < inst.num_choices; ++j) {
      const std::int64_t w = inst.w(m, j);
      if (w > c || nxt[c - w] == kNegInf) continue;
      if (inst.v(m, j) + nxt[c - w] == cur[c]) {
        choice[static_cast<std::size_t>(m)] = j;
        c -= w;
        found = true;
        break;
      }
    }
    if (!found) throw std::logic_error("dp extraction failed");
  }
  return choice;
}

// ---------------- branch and bound ----------------

struct Upgrade {
  int module = 0;
  double dv = 0.0;
  std::int64_t dw = 0;
  double ratio = 0.0;
};

struct BnbContext {
  const Instance* inst = nullptr;
  // Per suffix start m: cheapest-choice weight/value sums over modules m..
  std::vector<std::int64_t> min_weight_suffix;
  std::vector<double> min_value_suffix;
  // Upgrades available from modules >= m, sorted by ratio descending.
  std::vector<std::vector<Upgrade>> upgrades_from;
  std::vector<int> incumbent;
  double incumbent_value = kNegInf;
  bool has_incumbent = false;
};

// LP-relaxation upper bound for the subproblem (modules m.., capacity c),
// via the standard greedy on incremental score-per-weight ratios over the
// dominance-filtered choice hull.
double lp_bound(const BnbContext& ctx, int m, std::int64_t c) {
  const std::int64_t base_w = ctx.min_weight_suffix[static_cast<std::size_t>(m)];
  if (base_w > c) return kNegInf;
  double bound = ctx.min_value_suffix[static_cast<std::size_t>(m)];
  std::int64_t slack = c - base_w;
  for (const Upgrade& u : ctx.upgrades_from[static_cast<std::size_t>(m)]) {
    if (slack <= 0) break;
    if (u.dw <= slack) {
      bound += u.dv;
      slack -= u.dw;
    } else {
      bound += u.dv * (static_cast<double>(slack) / static_cast<double>(u.dw));
      slack = 0;
    }
  }
  return bound;
}

// acc carries the value of the fixed prefix. Pruning compares the slightly
// inflated prefix+suffix bound against the incumbent so that summation-order
// rounding can never discard an optimal completion.
void bnb_dfs(BnbContext& ctx, int m, std::int64_t c, double acc, std::vector<int>& partial) {
  const Instance& inst = *ctx.inst;
  if (m == inst.num_modules) {
    const double value = fold_objective(inst.values, inst.num_choices, partial);
    if (!ctx.has_incumbent || value > ctx.incumbent_value) {
      ctx.incumbent = partial;
      ctx.incumbent_value = value;
      ctx.has_incumbent = true;
    }
    return;
  }
  if (ctx.has_incumbent) {
    const double suffix = lp_bound(ctx, m, c);
    if (suffix == kNegInf) return;
    double bound = acc + suffix;
    bound += 1e-9 * (1.0 + std::fabs(bound));
    if (bound <= ctx.incumbent_value) return;
  }
  for (int j = 0; j < inst.num_choices; ++j) {  // ascending bit order: lex-first optimum wins
    const std::int64_t w = inst.w(m, j);
    if (w > c) continue;
    if (ctx.min_weight_suffix[static_cast<std::size_t>(m + 1)] > c - w) continue;
    partial[static_cast<std::size_t>(m)] = j;
    bnb_dfs(ctx, m + 1, c - w, acc + inst.v(m, j), partial);
  }
}

std::vector<int> solve_bnb(const Instance& inst) {
  BnbContext ctx;
  ctx.inst = &inst;
  const int m_count = inst.num_modules;
  ctx.min_weight_suffix.assign(static_cast<std::size_t>(m_count) + 1, 0);
  ctx.min_value_suffix.assign(static_cast<std::size_t>(m_count) + 1, 0.0);
  ctx.upgrades_from.resize(static_cast<std::size_t>(m_count) + 1);

  for (int m = m_count - 1; m >= 0; --m) {
    std::int64_t wmin = inst.w(m, 0);
    double vmin = inst.v(m, 0);
    for (int j = 1; j < inst.num_choices; ++j)
      if (inst.w(m, j) < wmin || (inst.w(m, j) == wmin && inst.v(m, j) > vmin)) {
        wmin = inst.w(m, j);
        vmin = inst.v(m, j);
      }
    ctx.min_weight_suffix[static_cast<std::size_t>(m)] =
        ctx.min_weight_suffix[static_cast<std::size_t>(m + 1)] + wmin;
    ctx.min_value_suffix[static_cast<std::size_t>(m)] =
        ctx.min_value_suffix[static_cast<std::size_t>(m + 1)] + vmin;

    // Dominance-filtered hull of (weight, value) choices for the LP bound.
    std::vector<std::pair<std::int64_t, double>> pts;
    for (int j = 0; j < inst.num_choices; ++j)
      pts.emplace_back(inst.w(m, j), inst.v(m, j));
    std::sort(pts.begin(), pts.end());
    std::vector<std::pair<std::int64_t, double>> hull;
    for (const auto& p : pts) {
      if (!hull.empty() && p.first == hull.back().first) {
        if (p.second > hull.back().second) hull.back() = p;
        continue;
      }
      if (!hull.empty() && p.second <= hull.back().second) continue;  // IP-dominated
      while (hull.size() >= 2) {
        const auto& a = hull[hull.size() - 2];
        const auto& b = hull.back();
        // Drop b if it lies under the segment a-p (LP-dominated).
        const double left = (b.second - a.second) * static_cast<double>(p.first - b.first);
        const double right = (p.second - b.second) * static_cast<double>(b.first - a.first);
        if (left <= right) hull.pop_back();
        else break;
      }
      hull.push_back(p);
    }
    std::vector<Upgrade> ups = ctx.upgrades_from[static_cast<std::size_t>(m + 1)];
    for (std::size_t i = 1; i < hull.size(); ++i) {
      Upgrade u;
      u.module = m;
      u.dv = hull[i].second - hull[i - 1].second;
      u.dw = hull[i].first - hull[i - 1].first;
      if (u.dv <= 0.0 || u.dw <= 0) continue;
      u.ratio = u.dv / static_cast<double>(u.dw);
      ups.push_back(u);
    }
    std::sort(ups.begin(), ups.end(), [](const Upgrade& a, const Upgrade& b) {
      if (a.ratio != b.ratio) return a.ratio > b.ratio;
      if (a.module != b.module) return a.module < b.module;
      return a.dw < b.dw;
    });
    ctx.upgrades_from[static_cast<std::size_t>(m)] = std::move(ups);
  }

  std::vector<int> partial(static_cast<std::size_t>(m_count));
  bnb_dfs(ctx, 0, inst.capacity, 0.0, partial);
  if (!ctx.has_incumbent) throw std::logic_error("branch and bound found no feasible assignment");
  return ctx.incumbent;
}

// ---------------- brute force ----------------

std::vector<int> solve_brute(const Instance& inst) {
  const int m_count = inst.num_modules;
  double limit = 1.0;
  for (int m = 0; m < m_count; ++m) {
    limit *= static_cast<double>(inst.num_choices);
    if (limit > 1e6)
      throw ResourceLimitError("brute force limited to 1e6 assignments");
  }
  std::vector<int> current(static_cast<std::size_t>(m_count), 0);
  std::vector<int> best;
  double best_value = kNegInf;
  bool has_best = false;
  // Odometer enumeration in lexicographic order (first module most
  // significant, bits ascending); keeping only strict improvements leaves the
  // lexicographically smallest optimum.
  while (true) {
    std::int64_t total = 0;
    for (int m = 0; m < m_count; ++m) total += inst.w(m, current[static_cast<std::size_t>(m)]);
    if (total <= inst.capacity) {
      const double value = fold_objective(inst.values, inst.num_choices, current);
      if (!has_best || value > best_value) {
        best = current;
        best_value = value;
        has_best = true;
      }
    }
    int pos = m_count - 1;
    while (pos >= 0) {
      if (++current[static_cast<std::size_t>(pos)] < inst.num_choices) break;
      current[static_cast<std::size_t>(pos)] = 0;
      --pos;
    }
    if (pos < 0) break;
  }
  if (!has_best) throw std::logic_error("brute force found no feasible assignment");
  return best;
}

DiscreteAssignment finish(const std::vector<ModuleId>& modules, const std::vector<int>& bits,
                          const std::vector<double>& values,
                          const std::vector<std::int64_t>& counts, double budget,
                          const std::vector<int>& choice, SolverKind used) {
  DiscreteAssignment a;
  a.modules = modules;
  a.solver = used;
  a.optimal = true;
  a.chosen_bits.reserve(choice.size());
  std::int64_t total_params = 0, total_bits = 0;
  for (std::size_t m = 0; m < choice.size(); ++m) {
    const int b = bits[static_cast<std::size_t>(choice[m])];
    a.chosen_bits.push_back(b);
    total_params += counts[m];
    total_bits += counts[m] * b;
  }
  a.objective_value = fold_objective(values, static_cast<int>(bits.size()), choice);
  a.realized_avg_bits =
      total_params == 0 ? 0.0 : static_cast<double>(total_bits) / static_cast<double>(total_params);

  // Hard feasibility audit, zero tolerance, in exact integer arithmetic.
  if (total_params > 0) {
    const std::int64_t cap = static_cast<std::int64_t>(
        std::floor(budget * static_cast<double>(total_params)));
    if (total_bits > cap) throw std::logic_error("assignment violates the bit budget");
  }
  return a;
}

void check_problem(const std::vector<ModuleId>& modules, const std::vector<int>& bits,
                 const std::vector<double>& values, const std::vector<std::int64_t>& counts,
                 double budget) {
  if (bits.empty()) throw std::invalid_argument("empty bit-width set");
  if (values.size() != modules.size() * bits.size() || counts.size() != modules.size())
    throw std::invalid_argument("allocation problem dimensions are inconsistent");
  if (!modules.empty() && budget < static_cast<double>(bits.front()))
    throw InfeasibleBudgetError("budget " + std::to_string(budget) +
                                " is below the minimum candidate bit-width");
}

}  // namespace

const char* solver_kind_name(SolverKind k) {
  switch (k) {
    case SolverKind::auto_select: return "auto";
    case SolverKind::dp: return "dp";
    case SolverKind::branch_and_bound: return "bnb";
    case SolverKind::brute_force: return "brute";
  }
  return "?";
}

SolverKind solver_kind_from_name(const std::string& name) {
  if (name == "auto") return SolverKind::auto_select;
  if (name == "dp") return SolverKind::dp;
  if (name == "bnb") return SolverKind::branch_and_bound;
  if (name == "brute") return SolverKind::brute_force;
  throw std::invalid_argument("unknown solver: " + name);
}

void AllocationProblem::validate() const {
  const std::size_t m = modules.size(), k = bits.size();
  if (scores.size() != m * k || param_counts.size() != m)
    throw std::invalid_argument("allocation problem dimensions are inconsistent");
  for (std::size_t r = 0; r < m; ++r) {
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += scores[r * k + j];
    if (std::fabs(sum - 1.0) > 1e-6)
      throw std::invalid_argument("score row " + std::to_string(r) + " does not sum to 1");
  }
  for (std::int64_t n : param_counts)
    if (n <= 0) throw std::invalid_argument("parameter counts must be positive");
}

AllocationProblem problem_from_scores(const SoftScores& scores, double budget) {
  AllocationProblem p;
  p.modules = scores.modules;
  p.bits = scores.bits;
  p.scores = scores.scores.values();
  p.param_counts = scores.param_counts;
  p.budget = budget;
  p.validate();
  return p;
}

int DiscreteAssignment::chosen(const ModuleId& m) const {
  for (std::size_t i = 0; i < modules.size(); ++i)
    if (modules[i] == m) return chosen_bits[i];
  throw std::invalid_argument("module not in assignment: " + module_name(m));
}

DiscreteAssignment solve_values(const std::vector<ModuleId>& modules,
                                const std::vector<int>& bits,
                                const std::vector<double>& values,
                                const std::vector<std::int64_t>& param_counts, double budget,
                                SolverKind kind) {
  check_problem(modules, bits, values, param_counts, budget);
  if (modules.empty())
    return finish(modules, bits, values, param_counts, budget, {}, SolverKind::dp);

  if (kind == SolverKind::brute_force) {
    Instance inst = make_instance(bits, values, param_counts, budget);
    return finish(modules, bits, values, param_counts, budget, solve_brute(inst),
                  SolverKind::brute_force);
  }

  Instance inst = make_instance(bits, values, param_counts, budget);
  const std::int64_t cells = inst.capacity * static_cast<std::int64_t>(modules.size());
  SolverKind used = kind;
  if (kind == SolverKind::auto_select)
    used = cells <= kDpCellBudget ? SolverKind::dp : SolverKind::branch_and_bound;
  if (used == SolverKind::dp && cells > kDpCellBudget)
    throw ResourceLimitError("dp table would need " + std::to_string(cells) +
                             " cells; use the branch-and-bound solver");
  const std::vector<int> choice = used == SolverKind::dp ? solve_dp(inst) : solve_bnb(inst);
  return finish(modules, bits, values, param_counts, budget, choice, used);
}

DiscreteAssignment solve(const AllocationProblem& problem, SolverKind kind) {
  problem.validate();
  return solve_values(problem.modules, problem.bits, problem.scores, problem.param_counts,
                      problem.budget, kind);
}

DiscreteAssignment brute_force(const AllocationProblem& problem) {
  problem.validate();
  return solve_values(problem.modules, problem.bits, problem.scores, problem.param_counts,
                      problem.budget, SolverKind::brute_force);
}

DiscreteAssignment reuse_scores(const SoftScores& scores, double new_budget, SolverKind kind) {
  if (new_budget < scores.bits.front() || new_budget > scores.bits.back())
    throw InfeasibleBudgetError("reuse budget outside candidate range");
  return solve(problem_from_scores(scores, new_budget), kind);
}

double pearson_alignment(const SoftScores& scores, const DiscreteAssignment& assignment) {
  if (scores.modules != assignment.modules)
    throw std::invalid_argument("pearson_alignment: module sets differ");
  const std::size_t m = scores.modules.size(), k = scores.bits.size();
  std::vector<double> x(scores.scores.values());
  std::vector<double> y(m * k, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    int j = -1;
    for (std::size_t b = 0; b < k; ++b)
      if (scores.bits[b] == assignment.chosen_bits[i]) j = static_cast<int>(b);
    if (j < 0) throw std::invalid_argument("assignment uses a bit outside the score set");
    y[i * k + static_cast<std::size_t>(j)] = 1.0;
  }
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx == 0.0 || syy == 0.0)
    throw std::domain_error("pearson_alignment: zero-variance vector");
  double r = sxy / (std::sqrt(sxx) * std::sqrt(syy));
  return std::min(1.0, std::max(-1.0, r));
}

double allocation_similarity(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty())
    throw std::invalid_argument("allocation_similarity: size mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw std::domain_error("allocation_similarity: zero vector");
  double c = dot / (std::sqrt(na) * std::sqrt(nb));
  return std::min(1.0, std::max(-1.0, c));
}

std::vector<double> expected_bits_map(const SoftScores& scores) {
  const std::size_t m = scores.modules.size(), k = scores.bits.size();
  std::vector<double> out(m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < k; ++j)
      out[i] += static_cast<double>(scores.bits[j]) * scores.scores[static_cast<std::int64_t>(i * k + j)];
  return out;
}

std::vector<double> assigned_bits_map(const DiscreteAssignment& assignment) {
  std::vector<double> out;
  out.reserve(assignment.chosen_bits.size());
  for (int b : assignment.chosen_bits) out.push_back(static_cast<double>(b));
  return out;
}

}  // namespace bitbudget
