#pragma once

#include <vector>

#include "bitbudget/model.hpp"
#include "bitbudget/tensor.hpp"

namespace bitbudget {

struct BitWidthSet {
  std::vector<int> bits{2, 3, 4};  // sorted ascending, distinct, each >= 2

  void validate() const;
  int min_bits() const { return bits.front(); }
  int max_bits() const { return bits.back(); }
  int count() const { return static_cast<int>(bits.size()); }
  int index_of(int b) const;  // throws if b not in the set
};

// Symmetric per-group round-to-nearest. Groups run along each row; the final
// group may be short. scale = max|w|_group / (2^(bits-1) - 1); an all-zero
// group maps to zeros without dividing.
Tensor quantize_rtn(const Tensor& w, int bits, int group_size);

// Frozen pre-quantized candidates for every (module, bit-width), plus the
// full-precision reference.
class CandidatePool {
 public:
  CandidatePool(ModelSpec spec, BitWidthSet bitset, int group_size,
                std::vector<Tensor> references, std::vector<Tensor> candidates);

  const ModelSpec& spec() const { return spec_; }
  const BitWidthSet& bitset() const { return bitset_; }
  int group_size() const { return group_size_; }

  const Tensor& reference(const ModuleId& m) const;
  const Tensor& candidate(const ModuleId& m, int bits) const;
  double quant_mse(const ModuleId& m, int bits) const;

  int num_modules() const { return spec_.num_modules(); }
  int module_index(const ModuleId& m) const;

 private:
  ModelSpec spec_;
  BitWidthSet bitset_;
  int group_size_ = 16;
  std::vector<Tensor> references_;  // modules() order
  std::vector<Tensor> candidates_;  // [module][bit] flattened
};

CandidatePool build_pool(const Model& model, const BitWidthSet& bitset, int group_size);

}  // namespace bitbudget
