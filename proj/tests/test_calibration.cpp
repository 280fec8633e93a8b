#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>

#include <doctest.h>

#include "bitbudget/calibration.hpp"

using namespace bitbudget;

namespace {

CalibrationConfig base_config() {
  CalibrationConfig c;
  c.num_sequences = 128;
  c.seq_len = 64;
  c.vocab_size = 256;
  c.seed = 11;
  c.source = CalibrationSource::markov;
  c.holdout_fraction = 0.0;
  return c;
}

}  // namespace

TEST_CASE("stream determinism and batch counting") {
  const CalibrationStream a(base_config());
  const CalibrationStream b(base_config());
  REQUIRE(a.num_sequences() == 128);
  for (int i = 0; i < a.num_sequences(); ++i) CHECK(a.sequence(i) == b.sequence(i));

  CHECK(a.batches_per_epoch(8) == 16);  // 128 sequences / batch 8

  // Batches are a deterministic function of the step index.
  const TokenBatch t0 = a.train_batch(0, 8);
  const TokenBatch t16 = a.train_batch(16, 8);  // wraps to the same batch
  CHECK(t0.ids == t16.ids);
  CHECK(t0.batch == 8);
  CHECK(t0.seq_len == 64);

  for (int id : t0.ids) {
    CHECK(id >= 0);
    CHECK(id < 256);
  }
}

TEST_CASE("holdout split is disjoint from training batches") {
  CalibrationConfig cfg = base_config();
  cfg.holdout_fraction = 0.25;
  const CalibrationStream s(cfg);
  CHECK(s.num_train() == 96);
  CHECK(s.num_holdout() == 32);
  CHECK(s.batches_per_epoch(8) == 12);

  // Training batches only draw from the first num_train sequences...
  std::set<std::vector<int>> train_seqs;
  for (int i = 0; i < s.num_train(); ++i) train_seqs.insert(s.sequence(i));
  for (int step = 0; step < 24; ++step) {
    const TokenBatch b = s.train_batch(step, 8);
    for (int r = 0; r < b.batch; ++r) {
      std::vector<int> row(b.ids.begin() + r * b.seq_len, b.ids.begin() + (r + 1) * b.seq_len);
      CHECK(train_seqs.count(row) == 1);
    }
  }
  // ...and holdout batches exactly cover the remaining sequences in order.
  int idx = s.num_train();
  for (const TokenBatch& b : s.holdout_batches(8))
    for (int r = 0; r < b.batch; ++r) {
      std::vector<int> row(b.ids.begin() + r * b.seq_len, b.ids.begin() + (r + 1) * b.seq_len);
      CHECK(row == s.sequence(idx));
      ++idx;
    }
  CHECK(idx == s.num_sequences());
}

TEST_CASE("markov stream approaches its transition table") {
  CalibrationConfig cfg;
  cfg.num_sequences = 100;
  cfg.seq_len = 1000;  // 1e5 tokens total
  cfg.vocab_size = 8;
  cfg.seed = 7;
  cfg.source = CalibrationSource::markov;
  cfg.holdout_fraction = 0.0;
  const CalibrationStream s(cfg);
  const std::vector<double>& table = s.transition_table();
  REQUIRE(table.size() == 64);

  std::vector<double> counts(64, 0.0), row_tot(8, 0.0);
  for (int i = 0; i < s.num_sequences(); ++i) {
    const std::vector<int>& seq = s.sequence(i);
    for (std::size_t t = 1; t < seq.size(); ++t) {
      counts[static_cast<std::size_t>(seq[t - 1]) * 8 + seq[t]] += 1.0;
      row_tot[static_cast<std::size_t>(seq[t - 1])] += 1.0;
    }
  }
  double max_dev = 0.0;
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c)
      max_dev = std::max(max_dev,
                         std::fabs(counts[r * 8 + c] / row_tot[static_cast<std::size_t>(r)] -
                                   table[static_cast<std::size_t>(r) * 8 + c]));
  CHECK(max_dev < 0.02);
}

TEST_CASE("uniform source stays in range and differs across seeds") {
  CalibrationConfig cfg = base_config();
  cfg.source = CalibrationSource::uniform_random;
  const CalibrationStream a(cfg);
  cfg.seed = 12;
  const CalibrationStream b(cfg);
  CHECK(a.sequence(0) != b.sequence(0));
}

TEST_CASE("file source round trip and validation") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "bitbudget_calib_test";
  fs::create_directories(dir);
  const std::string path = (dir / "tokens.txt").string();
  {
    std::ofstream out(path, std::ios::trunc);
    out << "1 2 3 4 5\n";
    out << "5 4 3 2 1 9\n";  // longer lines are truncated to seq_len
  }
  CalibrationConfig cfg;
  cfg.num_sequences = 2;
  cfg.seq_len = 5;
  cfg.vocab_size = 10;
  cfg.source = CalibrationSource::file;
  cfg.file_path = path;
  cfg.holdout_fraction = 0.0;
  const CalibrationStream s(cfg);
  CHECK(s.sequence(0) == std::vector<int>{1, 2, 3, 4, 5});
  CHECK(s.sequence(1) == std::vector<int>{5, 4, 3, 2, 1});

  {
    std::ofstream out(path, std::ios::trunc);
    out << "1 2 3 4 99\n1 2 3 4 5\n";  // 99 out of range for vocab 10
  }
  CHECK_THROWS_AS(CalibrationStream{cfg}, std::invalid_argument);

  {
    std::ofstream out(path, std::ios::trunc);
    out << "1 2\n1 2 3 4 5\n";  // line shorter than seq_len
  }
  CHECK_THROWS_AS(CalibrationStream{cfg}, std::invalid_argument);

  cfg.file_path = (dir / "missing.txt").string();
  CHECK_THROWS_AS(CalibrationStream{cfg}, std::invalid_argument);
}

TEST_CASE("config validation") {
  CalibrationConfig c = base_config();
  c.holdout_fraction = 1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = base_config();
  c.seq_len = 1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = base_config();
  c.num_sequences = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}
