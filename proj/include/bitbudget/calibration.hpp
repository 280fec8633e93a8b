#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace bitbudget {

// One batch of token ids, laid out [batch, seq_len] row-major.
struct TokenBatch {
  int batch = 0;
  int seq_len = 0;
  std::vector<int> ids;
  std::uint64_t seed_lineage = 0;

  int token(int b, int t) const { return ids[static_cast<std::size_t>(b) * seq_len + t]; }
};

enum class CalibrationSource { uniform_random, markov, file };

CalibrationSource calibration_source_from_name(const std::string& name);
const char* calibration_source_name(CalibrationSource s);

struct CalibrationConfig {
  int num_sequences = 128;
  int seq_len = 64;
  int vocab_size = 256;
  std::uint64_t seed = 11;
  CalibrationSource source = CalibrationSource::markov;
  double holdout_fraction = 0.25;
  std::string file_path;  // used by CalibrationSource::file

  void validate() const;
};

// Deterministic calibration stream. All sequences are materialized up front;
// sequence i depends only on (seed, i), so the stream is restartable and
// independent of how batches are consumed. The first (1 - holdout) fraction
// of sequences is the training split, the remainder the holdout split.
class CalibrationStream {
 public:
  explicit CalibrationStream(CalibrationConfig config);

  const CalibrationConfig& config() const { return config_; }
  int num_sequences() const { return static_cast<int>(sequences_.size()); }
  int num_train() const { return num_train_; }
  int num_holdout() const { return num_sequences() - num_train_; }
  int batches_per_epoch(int batch_size) const;

  const std::vector<int>& sequence(int i) const { return sequences_[static_cast<std::size_t>(i)]; }

  // Batch for optimization step `step`; wraps around epochs deterministically.
  TokenBatch train_batch(int step, int batch_size) const;
  std::vector<TokenBatch> holdout_batches(int batch_size) const;

  // Markov transition table [vocab, vocab], row-stochastic. Empty for other sources.
  const std::vector<double>& transition_table() const { return transition_; }

 private:
  std::vector<int> generate_sequence(std::uint64_t index) const;
  TokenBatch slice(int first_seq, int count, std::uint64_t lineage) const;

  CalibrationConfig config_;
  std::vector<std::vector<int>> sequences_;
  std::vector<double> transition_;
  int num_train_ = 0;
};

}  // namespace bitbudget
