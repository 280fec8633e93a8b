#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "bitbudget/errors.hpp"
#include "bitbudget/pipeline.hpp"
#include "bitbudget/threading.hpp"

namespace py = pybind11;
using namespace bitbudget;

namespace {

RunConfig config_from_dict(const py::dict& d) {
  RunConfig cfg;
  for (auto item : d)
    cfg.set_key(py::str(item.first).cast<std::string>(), py::str(item.second).cast<std::string>());
  return cfg;
}

struct InMemoryRun {
  Model model;
  CandidatePool pool;
  CalibrationStream stream;
  SoftScores scores;
};

py::dict scores_to_dict(const SoftScores& s) {
  py::dict out;
  py::list modules, rows;
  const std::size_t k = s.bits.size();
  for (std::size_t i = 0; i < s.modules.size(); ++i) {
    modules.append(py::make_tuple(s.modules[i].layer, projection_name(s.modules[i].proj)));
    py::list row;
    for (std::size_t j = 0; j < k; ++j)
      row.append(s.scores[static_cast<std::int64_t>(i * k + j)]);
    rows.append(row);
  }
  out["modules"] = modules;
  out["bits"] = s.bits;
  out["scores"] = rows;
  out["param_counts"] = s.param_counts;
  out["expected_avg_bits"] = s.expected_avg_bits;
  out["budget_target"] = s.budget_target;
  out["spec_hash"] = s.spec_hash;
  return out;
}

py::dict assignment_to_dict(const DiscreteAssignment& a) {
  py::dict out;
  py::list modules;
  for (const ModuleId& m : a.modules)
    modules.append(py::make_tuple(m.layer, projection_name(m.proj)));
  out["modules"] = modules;
  out["chosen_bits"] = a.chosen_bits;
  out["realized_avg_bits"] = a.realized_avg_bits;
  out["objective_value"] = a.objective_value;
  out["solver"] = solver_kind_name(a.solver);
  out["optimal"] = a.optimal;
  return out;
}

SoftScores scores_from_dict(const py::dict& d) {
  SoftScores s;
  s.spec_hash = d.contains("spec_hash") ? d["spec_hash"].cast<std::string>() : "";
  s.bits = d["bits"].cast<std::vector<int>>();
  for (auto t : d["modules"].cast<py::list>()) {
    auto tup = t.cast<py::tuple>();
    s.modules.push_back(
        ModuleId{tup[0].cast<int>(), projection_from_name(tup[1].cast<std::string>())});
  }
  s.param_counts = d["param_counts"].cast<std::vector<std::int64_t>>();
  const auto rows = d["scores"].cast<std::vector<std::vector<double>>>();
  s.scores = Tensor({static_cast<std::int64_t>(rows.size()),
                     static_cast<std::int64_t>(s.bits.size())});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < s.bits.size(); ++j)
      s.scores[static_cast<std::int64_t>(i * s.bits.size() + j)] = rows[i][j];
  s.expected_avg_bits = expected_avg_bits(s.scores, s.param_counts, s.bits);
  s.budget_target = d.contains("budget_target") ? d["budget_target"].cast<double>() : 0.0;
  return s;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "mixed-precision bit allocation: quantizer, stage-1 mask learning, "
            "stage-2 exact discrete projection";

  m.def("version", [] { return std::string(kToolVersion); });
  m.def("worker_count", &env_worker_count);

  m.def(
      "quantize_rtn",
      [](const std::vector<double>& values, const std::vector<std::int64_t>& shape, int bits,
         int group_size) {
        return quantize_rtn(Tensor(shape, values), bits, group_size).values();
      },
      py::arg("values"), py::arg("shape"), py::arg("bits"), py::arg("group_size") = 16,
      "Symmetric per-group round-to-nearest quantization");

  m.def(
      "learn_scores",
      [](const py::dict& config) {
        const RunConfig cfg = config_from_dict(config);
        cfg.validate();
        const Model model = build_model(cfg.model_spec());
        const CandidatePool pool = build_pool(model, cfg.bitset(), cfg.group_size);
        const CalibrationStream stream(cfg.calibration_config());
        const Stage1Result r = train_stage1(model, pool, stream, cfg.stage1_config());
        return scores_to_dict(r.scores);
      },
      py::arg("config"),
      "Run stage 1 in memory on the given key=value config and return soft scores");

  m.def(
      "solve_allocation",
      [](const py::dict& scores, double budget, const std::string& solver) {
        const SoftScores s = scores_from_dict(scores);
        const DiscreteAssignment a = reuse_scores(s, budget, solver_kind_from_name(solver));
        py::dict out = assignment_to_dict(a);
        out["pearson"] = pearson_alignment(s, a);
        return out;
      },
      py::arg("scores"), py::arg("budget"), py::arg("solver") = "auto",
      "Project soft scores to an exact budget-feasible assignment");

  m.def(
      "mckp_solve",
      [](const std::vector<std::vector<double>>& values,
         const std::vector<std::int64_t>& param_counts, const std::vector<int>& bits,
         double budget, const std::string& solver) {
        std::vector<ModuleId> modules;
        std::vector<double> flat;
        for (std::size_t i = 0; i < values.size(); ++i) {
          modules.push_back(ModuleId{static_cast<int>(i) + 1, Projection::q});
          for (double v : values[i]) flat.push_back(v);
        }
        return assignment_to_dict(
            solve_values(modules, bits, flat, param_counts, budget, solver_kind_from_name(solver)));
      },
      py::arg("values"), py::arg("param_counts"), py::arg("bits"), py::arg("budget"),
      py::arg("solver") = "auto",
      "Exact multiple-choice knapsack on raw values (one row per group)");

  m.def(
      "allocation_similarity",
      [](const std::vector<double>& a, const std::vector<double>& b) {
        return allocation_similarity(a, b);
      },
      py::arg("a"), py::arg("b"), "Cosine similarity of two expected-bit maps");

  py::register_exception<InfeasibleBudgetError>(m, "InfeasibleBudgetError");
  py::register_exception<ResourceLimitError>(m, "ResourceLimitError");
  py::register_exception<IntegrityError>(m, "IntegrityError");
}
