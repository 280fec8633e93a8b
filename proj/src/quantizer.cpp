#include "bitbudget/quantizer.hpp"

#include <cmath>
#include <stdexcept>

namespace bitbudget {

void BitWidthSet::validate() const {
  if (bits.size() < 2) throw std::invalid_argument("bit-width set needs at least two candidates");
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (bits[i] < 2) throw std::invalid_argument("bit-widths must be >= 2");
    if (i > 0 && bits[i] <= bits[i - 1])
      throw std::invalid_argument("bit-widths must be sorted and distinct");
  }
}

int BitWidthSet::index_of(int b) const {
  for (std::size_t i = 0; i < bits.size(); ++i)
    if (bits[i] == b) return static_cast<int>(i);
  throw std::invalid_argument("bit-width not in candidate set: " + std::to_string(b));
}

Tensor quantize_rtn(const Tensor& w, int bits, int group_size) {
  if (bits < 2) throw std::invalid_argument("quantize_rtn: bits must be >= 2");
  if (group_size < 1) throw std::invalid_argument("quantize_rtn: group_size must be >= 1");
  const std::int64_t cols = w.rank() >= 1 ? w.dim(w.rank() - 1) : 0;
  if (cols == 0) return w;
  const std::int64_t rows = w.size() / cols;
  const double max_level = static_cast<double>((1 << (bits - 1)) - 1);

  Tensor out(w.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* src = w.data() + r * cols;
    double* dst = out.data() + r * cols;
    for (std::int64_t g0 = 0; g0 < cols; g0 += group_size) {
      const std::int64_t g1 = std::min<std::int64_t>(g0 + group_size, cols);
      double amax = 0.0;
      for (std::int64_t j = g0; j < g1; ++j) amax = std::max(amax, std::fabs(src[j]));
      if (amax == 0.0) {
        for (std::int64_t j = g0; j < g1; ++j) dst[j] = 0.0;
        continue;
      }
      const double scale = amax / max_level;
      for (std::int64_t j = g0; j < g1; ++j) {
        double q = std::nearbyint(src[j] / scale);  // round half to even
        q = std::min(std::max(q, -max_level), max_level);
        dst[j] = q * scale;
      }
    }
  }
  return out;
}

CandidatePool::CandidatePool(ModelSpec spec, BitWidthSet bitset, int group_size,
                             std::vector<Tensor> references, std::vector<Tensor> candidates)
    : spec_(std::move(spec)),
      bitset_(std::move(bitset)),
      group_size_(group_size),
      references_(std::move(references)),
      candidates_(std::move(candidates)) {
  bitset_.validate();
  const std::size_t m = static_cast<std::size_t>(spec_.num_modules());
  if (references_.size() != m || candidates_.size() != m * bitset_.bits.size())
    throw std::invalid_argument("candidate pool is incomplete");
}

int CandidatePool::module_index(const ModuleId& m) const {
  if (m.layer < 1 || m.layer > spec_.num_layers)
    throw std::invalid_argument("module layer out of range: " + module_name(m));
  return (m.layer - 1) * 7 + static_cast<int>(m.proj);
}

const Tensor& CandidatePool::reference(const ModuleId& m) const {
  return references_[static_cast<std::size_t>(module_index(m))];
}

const Tensor& CandidatePool::candidate(const ModuleId& m, int bits) const {
  const int bi = bitset_.index_of(bits);
  return candidates_[static_cast<std::size_t>(module_index(m)) * bitset_.bits.size() +
                     static_cast<std::size_t>(bi)];
}

double CandidatePool::quant_mse(const ModuleId& m, int bits) const {
  const Tensor& fp = reference(m);
  const Tensor& q = candidate(m, bits);
  double acc = 0.0;
  for (std::int64_t i = 0; i < fp.size(); ++i) {
    const double d = fp[i] - q[i];
    acc += d * d;
  }
  return acc / static_cast<double>(fp.size());
}

CandidatePool build_pool(const Model& model, const BitWidthSet& bitset, int group_size) {
  bitset.validate();
  std::vector<Tensor> refs, cands;
  refs.reserve(static_cast<std::size_t>(model.spec.num_modules()));
  cands.reserve(refs.capacity() * bitset.bits.size());
  for (const ModuleId& m : model.spec.modules()) {
    const Tensor& w = model.module_weight(m);
    refs.push_back(w);
    for (int b : bitset.bits) cands.push_back(quantize_rtn(w, b, group_size));
  }
  return CandidatePool(model.spec, bitset, group_size, std::move(refs), std::move(cands));
}

}  // namespace bitbudget
