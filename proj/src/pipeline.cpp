#include "bitbudget/pipeline.hpp"

#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "bitbudget/errors.hpp"

namespace fs = std::filesystem;

namespace bitbudget {

namespace {

std::string format_g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

std::string budget_tag(double b) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", b);
  std::string s(buf);
  for (char& c : s)
    if (c == '.') c = 'p';
  return s;
}

// Mixed weights for a whole batch evaluation: one tensor per module.
std::vector<Tensor> assignment_weights(const CandidatePool& pool,
                                       const DiscreteAssignment& assignment) {
  std::vector<Tensor> out;
  out.reserve(assignment.modules.size());
  for (std::size_t i = 0; i < assignment.modules.size(); ++i)
    out.push_back(pool.candidate(assignment.modules[i], assignment.chosen_bits[i]));
  return out;
}

// (1/L) * sum over layers of the squared hidden reconstruction norm,
// averaged over holdout samples; matches the training objective.
double recon_error_for_weights(const Model& model, const std::vector<Tensor>& weights,
                               const CalibrationStream& stream, int batch_size) {
  const int layers = model.spec.num_layers;
  double total = 0.0;
  std::int64_t total_samples = 0;
  for (const TokenBatch& batch : stream.holdout_batches(batch_size)) {
    const HiddenStateTrace trace = teacher_trace(model, batch);
    Tape tape(/*grad_enabled=*/false);
    std::vector<Tape::NodeId> wnodes;
    wnodes.reserve(weights.size());
    for (const Tensor& w : weights) wnodes.push_back(tape.constant(w));
    double batch_loss = 0.0;
    for (int l = 1; l <= layers; ++l) {
      LayerWeightNodes lw;
      for (Projection p : kProjections)
        lw[p] = wnodes[static_cast<std::size_t>((l - 1) * 7 + static_cast<int>(p))];
      Tape::NodeId out = layer_forward(tape, model, l, tape.constant(trace[static_cast<std::size_t>(l - 1)]), lw);
      Tape::NodeId diff = tape.sub(out, tape.constant(trace[static_cast<std::size_t>(l)]));
      batch_loss += tape.value(tape.sum_all(tape.square(diff))).item();
    }
    if (layers > 0) batch_loss /= static_cast<double>(layers);
    total += batch_loss;
    total_samples += batch.batch;
  }
  if (total_samples == 0) throw std::invalid_argument("no holdout data configured");
  return total / static_cast<double>(total_samples);
}

}  // namespace

double holdout_recon_error(const Model& model, const CandidatePool& pool,
                           const DiscreteAssignment& assignment, const CalibrationStream& stream,
                           int batch_size) {
  return recon_error_for_weights(model, assignment_weights(pool, assignment), stream, batch_size);
}

double holdout_recon_error_soft(const Model& model, const CandidatePool& pool,
                                const Tensor& probs, const CalibrationStream& stream,
                                int batch_size) {
  std::vector<Tensor> weights;
  for (const ModuleId& m : model.spec.modules())
    weights.push_back(mix_weights(pool, m, probs));
  return recon_error_for_weights(model, weights, stream, batch_size);
}

void write_heatmap_csv(const std::string& path, const ModelSpec& spec,
                       const std::vector<double>& per_module_bits) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  for (std::size_t j = 0; j < kProjections.size(); ++j)
    out << (j ? "," : "") << projection_name(kProjections[j]);
  out << "\n";
  for (int l = 0; l < spec.num_layers; ++l) {
    for (int j = 0; j < 7; ++j)
      out << (j ? "," : "") << format_g(per_module_bits[static_cast<std::size_t>(l * 7 + j)]);
    out << "\n";
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

void write_budget_curve_csv(const std::string& path, const std::vector<AllocateReport>& reports) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  out << "budget,realized_avg_bits,holdout_recon_error,pearson\n";
  for (const AllocateReport& r : reports)
    out << format_g(r.budget) << "," << format_g(r.assignment.realized_avg_bits) << ","
        << format_g(r.holdout_error) << "," << format_g(r.pearson) << "\n";
  if (!out) throw std::runtime_error("write failed: " + path);
}

namespace {

RunManifest open_or_create_manifest(const RunConfig& cfg) {
  if (manifest_exists(cfg.out)) return read_manifest(cfg.out);
  RunManifest m;
  m.tool_version = kToolVersion;
  m.config_hash = cfg.hash_hex();
  m.created_unix = static_cast<std::int64_t>(std::time(nullptr));
  return m;
}

}  // namespace

void cmd_build(const RunConfig& cfg) {
  cfg.validate();
  fs::create_directories(cfg.out);
  const Model model = build_model(cfg.model_spec());
  const CandidatePool pool = build_pool(model, cfg.bitset(), cfg.group_size);

  const std::string model_path = (fs::path(cfg.out) / "model.bin").string();
  const std::string pool_path = (fs::path(cfg.out) / "pool.bin").string();
  save_model(model_path, model);
  save_pool(pool_path, pool);

  // Per-module quantization error table, printed and saved.
  const std::string table_path = (fs::path(cfg.out) / "quant_error.csv").string();
  {
    std::ofstream csv(table_path, std::ios::trunc);
    csv << "layer,proj";
    for (int b : pool.bitset().bits) csv << ",mse_b" << b;
    csv << "\n";
    std::printf("%-10s", "module");
    for (int b : pool.bitset().bits) std::printf("  %12s", ("mse_b" + std::to_string(b)).c_str());
    std::printf("\n");
    for (const ModuleId& m : model.spec.modules()) {
      csv << m.layer << "," << projection_name(m.proj);
      std::printf("%-10s", module_name(m).c_str());
      for (int b : pool.bitset().bits) {
        const double mse = pool.quant_mse(m, b);
        csv << "," << format_g(mse);
        std::printf("  %12.6e", mse);
      }
      csv << "\n";
      std::printf("\n");
    }
  }

  RunManifest manifest = open_or_create_manifest(cfg);
  manifest_record(manifest, cfg.out, "model.bin");
  manifest_record(manifest, cfg.out, "pool.bin");
  manifest_record(manifest, cfg.out, "quant_error.csv");
  write_manifest(cfg.out, manifest);
}

void cmd_learn(const RunConfig& cfg) {
  cfg.validate();
  const std::string model_path = (fs::path(cfg.out) / "model.bin").string();
  const std::string pool_path = (fs::path(cfg.out) / "pool.bin").string();
  const Model model = load_model(model_path);
  const CandidatePool pool = load_pool(pool_path, model.spec);
  const CalibrationStream stream(cfg.calibration_config());

  const Stage1Result result = train_stage1(model, pool, stream, cfg.stage1_config());

  const std::string scores_path = (fs::path(cfg.out) / "scores.txt").string();
  save_scores(scores_path, result.scores);

  const std::string log_path = (fs::path(cfg.out) / "learn_log.txt").string();
  {
    std::ofstream log(log_path, std::ios::trunc);
    log << "step total recon deviation lambda1 lambda2 expected_bits\n";
    for (const StepStats& s : result.log)
      log << s.step << " " << format_g(s.report.total) << " " << format_g(s.report.recon) << " "
          << format_g(s.report.deviation) << " " << format_g(s.lambda1) << " "
          << format_g(s.lambda2) << " " << format_g(s.expected_bits) << "\n";
  }

  RunManifest manifest = open_or_create_manifest(cfg);
  manifest_record(manifest, cfg.out, "scores.txt");
  manifest_record(manifest, cfg.out, "learn_log.txt");
  write_manifest(cfg.out, manifest);

  std::printf("learned scores: expected_avg_bits=%.6f (target %.3f), final deviation %.6f\n",
              result.scores.expected_avg_bits, cfg.b_target,
              result.scores.expected_avg_bits - cfg.b_target);
}

std::vector<AllocateReport> cmd_allocate(const RunConfig& cfg) {
  cfg.validate();
  const std::string model_path = (fs::path(cfg.out) / "model.bin").string();
  const Model model = load_model(model_path);
  const CandidatePool pool =
      load_pool((fs::path(cfg.out) / "pool.bin").string(), model.spec);
  const SoftScores scores =
      load_scores((fs::path(cfg.out) / "scores.txt").string(), model.spec);
  const CalibrationStream stream(cfg.calibration_config());

  RunManifest manifest = open_or_create_manifest(cfg);
  std::vector<AllocateReport> reports;

  // Expected-bit heatmap is a property of the scores, shared across budgets.
  const std::string expected_path = (fs::path(cfg.out) / "heatmap_expected.csv").string();
  write_heatmap_csv(expected_path, model.spec, expected_bits_map(scores));
  manifest_record(manifest, cfg.out, "heatmap_expected.csv");

  for (double budget : cfg.effective_budgets()) {
    AllocateReport r;
    r.budget = budget;
    r.assignment = reuse_scores(scores, budget, cfg.solver_kind());
    r.pearson = pearson_alignment(scores, r.assignment);
    r.holdout_error = holdout_recon_error(model, pool, r.assignment, stream, cfg.batch_size);

    const std::string tag = budget_tag(budget);
    const std::string a_name = "assignment_b" + tag + ".txt";
    save_assignment((fs::path(cfg.out) / a_name).string(), r.assignment, model.spec.hash_hex(),
                    budget);
    manifest_record(manifest, cfg.out, a_name);

    const std::string h_name = "heatmap_assigned_b" + tag + ".csv";
    write_heatmap_csv((fs::path(cfg.out) / h_name).string(), model.spec,
                      assigned_bits_map(r.assignment));
    manifest_record(manifest, cfg.out, h_name);

    const std::string rep_name = "report_b" + tag + ".txt";
    {
      std::ofstream rep((fs::path(cfg.out) / rep_name).string(), std::ios::trunc);
      rep << "budget " << format_g(budget) << "\n";
      rep << "solver " << solver_kind_name(r.assignment.solver) << "\n";
      rep << "optimal " << (r.assignment.optimal ? 1 : 0) << "\n";
      rep << "objective " << format_g(r.assignment.objective_value) << "\n";
      rep << "realized_avg_bits " << format_g(r.assignment.realized_avg_bits) << "\n";
      rep << "pearson_alignment " << format_g(r.pearson) << "\n";
      rep << "holdout_recon_error " << format_g(r.holdout_error) << "\n";
    }
    manifest_record(manifest, cfg.out, rep_name);

    std::printf("budget %.3f: realized %.6f, pearson %.4f, holdout recon %.6e\n", budget,
                r.assignment.realized_avg_bits, r.pearson, r.holdout_error);
    reports.push_back(std::move(r));
  }

  if (reports.size() > 1) {
    write_budget_curve_csv((fs::path(cfg.out) / "budget_curve.csv").string(), reports);
    manifest_record(manifest, cfg.out, "budget_curve.csv");
  }
  write_manifest(cfg.out, manifest);
  return reports;
}

std::vector<CompareRow> cmd_compare(const RunConfig& cfg) {
  cfg.validate();
  const std::string model_path = (fs::path(cfg.out) / "model.bin").string();
  const Model model = load_model(model_path);
  const CandidatePool pool =
      load_pool((fs::path(cfg.out) / "pool.bin").string(), model.spec);
  const CalibrationStream stream(cfg.calibration_config());

  std::vector<CompareRow> rows;
  // Fixed-precision rows, one per candidate bit-width.
  for (int b : pool.bitset().bits) {
    const DiscreteAssignment a = uniform_assignment(model.spec, pool.bitset(), b);
    CompareRow row;
    row.method = "uniform-" + std::to_string(b);
    row.budget = static_cast<double>(b);
    row.realized_bits = a.realized_avg_bits;
    row.holdout_error = holdout_recon_error(model, pool, a, stream, cfg.batch_size);
    rows.push_back(std::move(row));
  }

  // Hessian-trace baseline shares one trace table across budgets.
  const TokenBatch trace_batch = stream.train_batch(0, cfg.batch_size);
  const TraceEstimate traces =
      estimate_module_traces(model, trace_batch, cfg.trace_probes, cfg.trace_seed);
  const std::string traces_path = (fs::path(cfg.out) / "traces.txt").string();
  save_traces(traces_path, traces, model.spec.hash_hex());

  for (double budget : cfg.effective_budgets()) {
    for (const std::string& method : {std::string("al"), std::string("hawq"),
                                      std::string("mult"), std::string("ce")}) {
      CompareRow row;
      row.budget = budget;
      DiscreteAssignment a;
      if (method == "hawq") {
        row.method = "hawq";
        a = hawq_allocate(traces, pool, budget, cfg.solver_kind());
      } else {
        row.method = "learned-" + method;
        Stage1Config scfg = cfg.stage1_config();
        scfg.b_target = budget;
        scfg.mode = constraint_mode_from_name(method);
        const Stage1Result learned = train_stage1(model, pool, stream, scfg);
        a = solve(problem_from_scores(learned.scores, budget), cfg.solver_kind());
      }
      row.realized_bits = a.realized_avg_bits;
      row.holdout_error = holdout_recon_error(model, pool, a, stream, cfg.batch_size);
      rows.push_back(std::move(row));
    }
  }

  const std::string cmp_path = (fs::path(cfg.out) / "compare.csv").string();
  {
    std::ofstream out(cmp_path, std::ios::trunc);
    out << "method,budget,realized_avg_bits,holdout_recon_error\n";
    for (const CompareRow& r : rows)
      out << r.method << "," << format_g(r.budget) << "," << format_g(r.realized_bits) << ","
          << format_g(r.holdout_error) << "\n";
  }

  RunManifest manifest = open_or_create_manifest(cfg);
  manifest_record(manifest, cfg.out, "traces.txt");
  manifest_record(manifest, cfg.out, "compare.csv");
  write_manifest(cfg.out, manifest);

  std::printf("%-14s %8s %14s %16s\n", "method", "budget", "realized_bits", "holdout_error");
  for (const CompareRow& r : rows)
    std::printf("%-14s %8.3f %14.6f %16.6e\n", r.method.c_str(), r.budget, r.realized_bits,
                r.holdout_error);
  return rows;
}

std::vector<std::string> cmd_validate(const RunConfig& cfg) {
  const std::vector<std::string> names = verify_manifest(cfg.out);
  for (const std::string& n : names) std::printf("ok %s\n", n.c_str());
  return names;
}

}  // namespace bitbudget
