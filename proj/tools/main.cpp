#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bitbudget/pipeline.hpp"

namespace {

struct CommonFlags {
  std::string config_path;
  std::string out;
  std::string mode;
  std::string solver;
  std::string budgets;
  long long seed = -1;
  double budget = -1.0;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "key=value config file");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--seed", f.seed, "master seed (sets model/data/train seeds)");
  cmd->add_option("--budget", f.budgets, "target average bit-width (comma list for allocate)");
  cmd->add_option("--mode", f.mode, "stage-1 objective: al, mult or ce");
  cmd->add_option("--solver", f.solver, "stage-2 solver: auto, dp, bnb or brute");
}

bitbudget::RunConfig make_config(const CommonFlags& f) {
  bitbudget::RunConfig cfg;
  if (!f.config_path.empty()) cfg = bitbudget::RunConfig::from_file(f.config_path);
  if (f.seed >= 0) {
    cfg.model_seed = static_cast<std::uint64_t>(f.seed);
    cfg.data_seed = static_cast<std::uint64_t>(f.seed) + 1;
    cfg.train_seed = static_cast<std::uint64_t>(f.seed) + 2;
  }
  if (!f.budgets.empty()) {
    cfg.set_key("budgets", f.budgets);
    cfg.b_target = cfg.budgets.front();
  }
  if (!f.mode.empty()) cfg.mode = f.mode;
  if (!f.solver.empty()) cfg.solver = f.solver;
  if (!f.out.empty()) cfg.out = f.out;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"two-stage mixed-precision bit allocation at desk scale"};
  app.require_subcommand(1);

  CommonFlags flags;
  CLI::App* build = app.add_subcommand("build", "build the model and candidate pool");
  CLI::App* learn = app.add_subcommand("learn", "learn soft precision scores (stage 1)");
  CLI::App* allocate = app.add_subcommand("allocate", "project scores to discrete bits (stage 2)");
  CLI::App* compare = app.add_subcommand("compare", "compare against baselines and ablations");
  CLI::App* validate = app.add_subcommand("validate", "re-check artifact hashes in the manifest");
  for (CLI::App* cmd : {build, learn, allocate, compare, validate}) add_common(cmd, flags);

  CLI11_PARSE(app, argc, argv);

  try {
    const bitbudget::RunConfig cfg = make_config(flags);
    if (build->parsed()) bitbudget::cmd_build(cfg);
    else if (learn->parsed()) bitbudget::cmd_learn(cfg);
    else if (allocate->parsed()) bitbudget::cmd_allocate(cfg);
    else if (compare->parsed()) bitbudget::cmd_compare(cfg);
    else if (validate->parsed()) bitbudget::cmd_validate(cfg);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
