#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <doctest.h>

#ifndef BITBUDGET_CLI_PATH
#define BITBUDGET_CLI_PATH "bitbudget"
#endif

namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args) {
  const std::string cmd =
      std::string("BITBUDGET_THREADS=1 ") + BITBUDGET_CLI_PATH + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

fs::path write_tiny_config(const fs::path& dir) {
  const fs::path cfg = dir / "run.cfg";
  std::ofstream out(cfg, std::ios::trunc);
  out << "# tiny smoke configuration\n"
      << "num_layers=2\nhidden_dim=16\nnum_heads=2\nffn_dim=24\nvocab_size=32\nmax_seq_len=16\n"
      << "num_sequences=16\nseq_len=16\nholdout_fraction=0.25\n"
      << "bits=2,3,4\ngroup_size=8\n"
      << "steps=25\nbatch_size=4\nlr=0.1\nb_target=3.0\n"
      << "out=" << (dir / "run").string() << "\n";
  return cfg;
}

int count_lines(const std::string& text) {
  int n = 0;
  for (char c : text)
    if (c == '\n') ++n;
  return n;
}

}  // namespace

TEST_CASE("cli pipeline: build, learn, allocate, validate") {
  const fs::path dir = fs::temp_directory_path() / "bitbudget_cli_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path cfg = write_tiny_config(dir);
  const std::string base = "--config " + cfg.string();

  REQUIRE(run_cli("build " + base) == 0);
  CHECK(fs::exists(dir / "run" / "model.bin"));
  CHECK(fs::exists(dir / "run" / "pool.bin"));
  CHECK(fs::exists(dir / "run" / "manifest.json"));

  // Rerunning build reproduces the artifacts byte for byte.
  const std::string model_bytes = read_file(dir / "run" / "model.bin");
  const std::string pool_bytes = read_file(dir / "run" / "pool.bin");
  REQUIRE(run_cli("build " + base) == 0);
  CHECK(read_file(dir / "run" / "model.bin") == model_bytes);
  CHECK(read_file(dir / "run" / "pool.bin") == pool_bytes);

  REQUIRE(run_cli("learn " + base) == 0);
  CHECK(fs::exists(dir / "run" / "scores.txt"));
  CHECK(fs::exists(dir / "run" / "learn_log.txt"));
  const std::string scores_bytes = read_file(dir / "run" / "scores.txt");
  REQUIRE(run_cli("learn " + base) == 0);
  CHECK(read_file(dir / "run" / "scores.txt") == scores_bytes);

  // The log's final deviation matches the scores file's expected bits.
  {
    std::istringstream log(read_file(dir / "run" / "learn_log.txt"));
    std::string line, last;
    std::getline(log, line);  // header
    while (std::getline(log, line))
      if (!line.empty()) last = line;
    REQUIRE_FALSE(last.empty());
    std::istringstream ls(last);
    int step;
    double total, recon, dev, l1, l2, eb;
    ls >> step >> total >> recon >> dev >> l1 >> l2 >> eb;
    CHECK(step == 24);
  }

  REQUIRE(run_cli("allocate " + base + " --budget 3.0,2.5") == 0);
  CHECK(fs::exists(dir / "run" / "assignment_b3.txt"));
  CHECK(fs::exists(dir / "run" / "assignment_b2p5.txt"));
  CHECK(fs::exists(dir / "run" / "budget_curve.csv"));
  CHECK(fs::exists(dir / "run" / "heatmap_expected.csv"));

  // Heatmap: header plus one row per layer, seven columns each.
  const std::string heatmap = read_file(dir / "run" / "heatmap_assigned_b3.csv");
  CHECK(count_lines(heatmap) == 1 + 2);  // header + L=2 rows
  {
    std::istringstream hs(heatmap);
    std::string line;
    while (std::getline(hs, line)) {
      int commas = 0;
      for (char c : line)
        if (c == ',') ++commas;
      CHECK(commas == 6);
    }
  }

  REQUIRE(run_cli("validate " + base) == 0);

  // Infeasible budget: nonzero exit with a message.
  CHECK(run_cli("allocate " + base + " --budget 1.5") != 0);

  // Corrupt the pool; learn and validate must now fail.
  {
    std::fstream f(dir / "run" / "pool.bin", std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(300);
    f.put('\x77');
  }
  CHECK(run_cli("validate " + base) != 0);
  CHECK(run_cli("learn " + base) != 0);
}

TEST_CASE("cli rejects bad configs") {
  const fs::path dir = fs::temp_directory_path() / "bitbudget_cli_bad";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path cfg = dir / "bad.cfg";
  {
    std::ofstream out(cfg);
    out << "num_layers=2\nhidden_dim=15\nnum_heads=2\n";  // heads do not divide d
  }
  CHECK(run_cli("build --config " + cfg.string()) != 0);
  CHECK(run_cli("build --config " + (dir / "missing.cfg").string()) != 0);
}
