#include "bitbudget/calibration.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "bitbudget/rng.hpp"

namespace bitbudget {

CalibrationSource calibration_source_from_name(const std::string& name) {
  if (name == "uniform_random") return CalibrationSource::uniform_random;
  if (name == "markov") return CalibrationSource::markov;
  if (name == "file") return CalibrationSource::file;
  throw std::invalid_argument("unknown calibration source: " + name);
}

const char* calibration_source_name(CalibrationSource s) {
  switch (s) {
    case CalibrationSource::uniform_random: return "uniform_random";
    case CalibrationSource::markov: return "markov";
    case CalibrationSource::file: return "file";
  }
  return "?";
}

void CalibrationConfig::validate() const {
  if (num_sequences < 1) throw std::invalid_argument("num_sequences must be >= 1");
  if (seq_len < 2) throw std::invalid_argument("seq_len must be >= 2");
  if (vocab_size < 2) throw std::invalid_argument("vocab_size must be >= 2");
  if (holdout_fraction < 0.0 || holdout_fraction >= 1.0)
    throw std::invalid_argument("holdout_fraction must be in [0, 1)");
  if (source == CalibrationSource::file && file_path.empty())
    throw std::invalid_argument("file source requires file_path");
}

namespace {

// Sample from a categorical distribution given row-stochastic weights.
int sample_categorical(const double* w, int n, double u) {
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    acc += w[i];
    if (u < acc) return i;
  }
  return n - 1;
}

}  // namespace

CalibrationStream::CalibrationStream(CalibrationConfig config) : config_(std::move(config)) {
  config_.validate();
  const int v = config_.vocab_size;

  if (config_.source == CalibrationSource::markov) {
    // Row logits drawn once from the seed; softmax per row. The spread makes
    // rows distinguishable so downstream statistics are non-degenerate.
    transition_.assign(static_cast<std::size_t>(v) * v, 0.0);
    Rng rng(derive_seed(config_.seed, "markov-table"));
    for (int r = 0; r < v; ++r) {
      double* row = transition_.data() + static_cast<std::size_t>(r) * v;
      double mx = -1e300;
      for (int c = 0; c < v; ++c) {
        row[c] = 1.5 * rng.next_gaussian();
        mx = std::max(mx, row[c]);
      }
      double sum = 0.0;
      for (int c = 0; c < v; ++c) {
        row[c] = std::exp(row[c] - mx);
        sum += row[c];
      }
      for (int c = 0; c < v; ++c) row[c] /= sum;
    }
  }

  if (config_.source == CalibrationSource::file) {
    std::ifstream in(config_.file_path);
    if (!in) throw std::invalid_argument("cannot open calibration file: " + config_.file_path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::istringstream ls(line);
      std::vector<int> seq;
      long long tok;
      while (ls >> tok) {
        if (tok < 0 || tok >= v)
          throw std::invalid_argument("calibration file token out of range: " +
                                      std::to_string(tok));
        seq.push_back(static_cast<int>(tok));
      }
      if (static_cast<int>(seq.size()) < config_.seq_len)
        throw std::invalid_argument("calibration file line shorter than seq_len");
      seq.resize(static_cast<std::size_t>(config_.seq_len));
      sequences_.push_back(std::move(seq));
      if (static_cast<int>(sequences_.size()) == config_.num_sequences) break;
    }
    if (static_cast<int>(sequences_.size()) < config_.num_sequences)
      throw std::invalid_argument("calibration file has fewer sequences than requested");
  } else {
    sequences_.reserve(static_cast<std::size_t>(config_.num_sequences));
    for (int i = 0; i < config_.num_sequences; ++i)
      sequences_.push_back(generate_sequence(static_cast<std::uint64_t>(i)));
  }

  const int holdout = static_cast<int>(
      std::floor(config_.holdout_fraction * static_cast<double>(config_.num_sequences)));
  num_train_ = config_.num_sequences - holdout;
  if (num_train_ < 1) throw std::invalid_argument("holdout fraction leaves no training data");
}

std::vector<int> CalibrationStream::generate_sequence(std::uint64_t index) const {
  const int v = config_.vocab_size;
  Rng rng(derive_seed(config_.seed, "sequence", index));
  std::vector<int> seq(static_cast<std::size_t>(config_.seq_len));
  if (config_.source == CalibrationSource::uniform_random) {
    for (int t = 0; t < config_.seq_len; ++t) seq[static_cast<std::size_t>(t)] = rng.next_below(v);
  } else {
    int cur = rng.next_below(v);
    seq[0] = cur;
    for (int t = 1; t < config_.seq_len; ++t) {
      const double* row = transition_.data() + static_cast<std::size_t>(cur) * v;
      cur = sample_categorical(row, v, rng.next_uniform());
      seq[static_cast<std::size_t>(t)] = cur;
    }
  }
  return seq;
}

int CalibrationStream::batches_per_epoch(int batch_size) const {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  return (num_train_ + batch_size - 1) / batch_size;
}

TokenBatch CalibrationStream::slice(int first_seq, int count, std::uint64_t lineage) const {
  TokenBatch b;
  b.batch = count;
  b.seq_len = config_.seq_len;
  b.seed_lineage = lineage;
  b.ids.reserve(static_cast<std::size_t>(count) * config_.seq_len);
  for (int i = first_seq; i < first_seq + count; ++i)
    b.ids.insert(b.ids.end(), sequences_[static_cast<std::size_t>(i)].begin(),
                 sequences_[static_cast<std::size_t>(i)].end());
  return b;
}

TokenBatch CalibrationStream::train_batch(int step, int batch_size) const {
  const int per_epoch = batches_per_epoch(batch_size);
  const int k = step % per_epoch;
  const int first = k * batch_size;
  const int count = std::min(batch_size, num_train_ - first);
  return slice(first, count, derive_seed(config_.seed, "batch", static_cast<std::uint64_t>(k)));
}

std::vector<TokenBatch> CalibrationStream::holdout_batches(int batch_size) const {
  std::vector<TokenBatch> out;
  int i = num_train_;
  while (i < num_sequences()) {
    const int count = std::min(batch_size, num_sequences() - i);
    out.push_back(slice(i, count, derive_seed(config_.seed, "holdout", static_cast<std::uint64_t>(i))));
    i += count;
  }
  return out;
}

}  // namespace bitbudget
