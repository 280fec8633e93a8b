#include "bitbudget/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace bitbudget {

std::int64_t shape_size(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (std::int64_t d : shape) {
    if (d < 0) throw std::invalid_argument("tensor dimension must be non-negative");
    n *= d;
  }
  return n;
}

std::string shape_str(const std::vector<std::int64_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor(std::vector<std::int64_t> shape)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_size(shape_)), 0.0) {}

Tensor::Tensor(std::vector<std::int64_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != static_cast<std::int64_t>(data_.size()))
    throw std::invalid_argument("tensor data length does not match shape " + shape_str(shape_));
}

Tensor Tensor::full(std::vector<std::int64_t> shape, double value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

double Tensor::item() const {
  if (data_.size() != 1) throw std::logic_error("item() requires a one-element tensor");
  return data_[0];
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

namespace kernels {

void mm_nn(double* c, const double* a, const double* b, std::int64_t m, std::int64_t k,
           std::int64_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void mm_nt(double* c, const double* a, const double* b, std::int64_t m, std::int64_t k,
           std::int64_t n, bool accumulate) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] = accumulate ? crow[j] + acc : acc;
    }
  }
}

void mm_tn(double* c, const double* a, const double* b, std::int64_t r, std::int64_t m,
           std::int64_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (std::int64_t p = 0; p < r; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::int64_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* crow = c + i * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace kernels

namespace {

double sigmoid(double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

// Stable softmax of src[0..n) scaled by 1/tau into dst.
void softmax_row(const double* src, double* dst, std::int64_t n, double tau) {
  double m = src[0];
  for (std::int64_t i = 1; i < n; ++i) m = std::max(m, src[i]);
  double sum = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    dst[i] = std::exp((src[i] - m) / tau);
    sum += dst[i];
  }
  for (std::int64_t i = 0; i < n; ++i) dst[i] /= sum;
}

void check_same_or_scalar(const Tensor& a, const Tensor& b, const char* what) {
  if (a.same_shape(b) || a.is_scalar() || b.is_scalar()) return;
  throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_str(a.shape()) +
                              " vs " + shape_str(b.shape()));
}

}  // namespace

Tape::NodeId Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

bool Tape::any_requires_grad(std::span<const NodeId> ins) const {
  if (!grad_enabled_) return false;
  for (NodeId i : ins)
    if (node(i).requires_grad) return true;
  return false;
}

Tape::NodeId Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.op = Op::kLeaf;
  n.value = std::move(value);
  n.requires_grad = grad_enabled_ && requires_grad;
  return push(std::move(n));
}

Tape::NodeId Tape::add(NodeId a, NodeId b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  check_same_or_scalar(va, vb, "add");
  Node n;
  n.op = Op::kAdd;
  n.inputs = {a, b};
  const bool sa = va.is_scalar() && !vb.is_scalar();
  const Tensor& big = sa ? vb : va;
  const Tensor& small = sa ? va : vb;
  if (big.same_shape(small)) {
    n.value = Tensor(big.shape());
    for (std::int64_t i = 0; i < big.size(); ++i) n.value[i] = va[i] + vb[i];
  } else {
    n.value = Tensor(big.shape());
    const double s = small.item();
    for (std::int64_t i = 0; i < big.size(); ++i) n.value[i] = big[i] + s;
  }
  n.requires_grad = any_requires_grad(n.inputs);
  return push(std::move(n));
}

Tape::NodeId Tape::sub(NodeId a, NodeId b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  check_same_or_scalar(va, vb, "sub");
  Node n;
  n.op = Op::kSub;
  n.inputs = {a, b};
  if (va.same_shape(vb)) {
    n.value = Tensor(va.shape());
    for (std::int64_t i = 0; i < va.size(); ++i) n.value[i] = va[i] - vb[i];
  } else if (vb.is_scalar()) {
    n.value = Tensor(va.shape());
    const double s = vb.item();
    for (std::int64_t i = 0; i < va.size(); ++i) n.value[i] = va[i] - s;
  } else {
    n.value = Tensor(vb.shape());
    const double s = va.item();
    for (std::int64_t i = 0; i < vb.size(); ++i) n.value[i] = s - vb[i];
  }
  n.requires_grad = any_requires_grad(n.inputs);
  return push(std::move(n));
}

Tape::NodeId Tape::mul(NodeId a, NodeId b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  check_same_or_scalar(va, vb, "mul");
  Node n;
  n.op = Op::kMul;
  n.inputs = {a, b};
  if (va.same_shape(vb)) {
    n.value = Tensor(va.shape());
    for (std::int64_t i = 0; i < va.size(); ++i) n.value[i] = va[i] * vb[i];
  } else {
    const bool sa = va.is_scalar();
    const Tensor& big = sa ? vb : va;
    const double s = sa ? va.item() : vb.item();
    n.value = Tensor(big.shape());
    for (std::int64_t i = 0; i < big.size(); ++i) n.value[i] = big[i] * s;
  }
  n.requires_grad = any_requires_grad(n.inputs);
  return push(std::move(n));
}

Tape::NodeId Tape::scale(NodeId a, double c) {
  Node n;
  n.op = Op::kScale;
  n.inputs = {a};
  n.p0 = c;
  const Tensor& va = value(a);
  n.value = Tensor(va.shape());
  for (std::int64_t i = 0; i < va.size(); ++i) n.value[i] = va[i] * c;
  n.requires_grad = any_requires_grad(n.inputs);
  return push(std::move(n));
}

Tape::NodeId Tape::add_const(NodeId a, double c) {
  Node n;
  n.op = Op::kAddConst;
  n.inputs = {a};
  n.p0 = c;
  const Tensor& va = value(a);
  n.value = Tensor(va.shape());
  for (std::int64_t i = 0; i < va.size(); ++i) n.value[i] = va[i] + c;
  n.requires_grad = any_requires_grad(n.inputs);
  return push(std::move(n));
}

Tape::NodeId Tape::square(NodeId a) {
  Node n;
  n.op = Op::kSquare;
  n.inputs = {a};
  const Tensor& va = value(a);
  n.value = Tensor(va.shape());
  for (std::int64_t i = 0; i < va.size(); ++i) n.value[i] = va[i] * va[i];
  n.requires_grad = any_requires_grad(n.inputs);
  return push(std::move(n));
}

Tape::NodeId Tape::silu(NodeId a) {
  Node n;
  n.op = Op::kSilu;
  n.inputs = {a};
  const Tensor& va = value(a);
  n.value = Tensor(va.shape());
  for (std::int64_t i = 0; i < va.size(); ++i) n.value[i] = va[i] * sigmoid(va[i]);
  n.requires_grad = any_requires_grad(n.inputs);
  return push(std::move(n));
}

Tape::NodeId Tape::log(NodeId a) {
  Node n;
  n.op = Op::kLog;
  n.inputs = {a};
  const Tensor& va = value(a);
  n.value = Tensor(va.shape());
  for (std::int64_t i = 0; i < va.size(); ++i) n.value[i] = std::log(va[i]);
  n.requires_grad = any_requires_grad(n.inputs);
  return push(std::move(n));
}

Tape::NodeId Tape::clamp_min(NodeId a, double floor) {
  Node n;
  n.op = Op::kClampMin;
  n.inputs = {a};
  n.p0 = floor;
  const Tensor& va = value(a);
  n.value = Tensor(va.shape());
  for (std::int64_t i = 0; i < va.size(); ++i) n.value[i] = std::max(va[i], floor);
  n.requires_grad = any_requires_grad(n.inputs);
  return push(std::move(n));
}

Tape::NodeId Tape::pow_const(NodeId a, double exponent) {
  Node n;
  n.op = Op::kPowConst;
  n.inputs = {a};
  n.p0 = exponent;
  const Tensor& va = value(a);
  n.value = Tensor(va.shape());
  for (std::int64_t i = 0; i < va.size(); ++i) n.value[i] = std::pow(va[i], exponent);
  n.requires_grad = any_requires_grad(n.inputs);
  return push(std::move(n));
}

Tape::NodeId Tape::matmul(NodeId a, NodeId b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(va.shape()) + " x " +
                                shape_str(vb.shape()));
  Node n;
  n.op = Op::kMatmul;
  n.inputs = {a, b};
  n.value = Tensor({va.dim(0), vb.dim(1)});
  kernels::mm_nn(n.value.data(), va.data(), vb.data(), va.dim(0), va.dim(1), vb.dim(1), false);
  n.requires_grad = any_requires_grad(n.inputs);
  return push(std::move(n));
}

Tape::NodeId Tape::bmm(NodeId a, NodeId b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (va.rank() != 3 || vb.rank() != 3 || va.dim(0) != vb.dim(0) || va.dim(2) != vb.dim(1))
    throw std::invalid_argument("bmm: incompatible shapes " + shape_str(va.shape()) + " x " +
                                shape_str(vb.shape()));
  const std::int64_t g = va.dim(0), m = va.dim(1), k = va.dim(2), nn = vb.dim(2);
  Node n;
  n.op = Op::kBmm;
  n.inputs = {a, b};
  n.value = Tensor({g, m, nn});
  for (std::int64_t s = 0; s < g; ++s)
    kernels::mm_nn(n.value.data() + s * m * nn, va.data() + s * m * k, vb.data() + s * k * nn, m,
                   k, nn, false);
  n.requires_grad = any_requires_grad(n.inputs);
  return push(std::move(n));
}

Tape::NodeId Tape::bmm_nt(NodeId a, NodeId b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (va.rank() != 3 || vb.rank() != 3 || va.dim(0) != vb.dim(0) || va.dim(2) != vb.dim(2))
    throw std::invalid_argument("bmm_nt: incompatible shapes " + shape_str(va.shape()) + " x " +
                                shape_str(vb.shape()));
  const std::int64_t g = va.dim(0), m = va.dim(1), k = va.dim(2), nn = vb.dim(1);
  Node n;
  n.op = Op::kBmmNt;
  n.inputs = {a, b};
  n.value = Tensor({g, m, nn});
  for (std::int64_t s = 0; s < g; ++s)
    kernels::mm_nt(n.value.data() + s * m * nn, va.data() + s * m * k, vb.data() + s * nn * k, m,
                   k, nn, false);
  n.requires_grad = any_requires_grad(n.inputs);
  return push(std::move(n));
}

Tape::NodeId Tape::softmax_rows(NodeId a, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("softmax_rows: temperature must be > 0");
  const Tensor& va = value(a);
  if (va.rank() < 1) throw std::invalid_argument("softmax_rows: rank must be >= 1");
  const std::int64_t d = va.dim(va.rank() - 1);
  const std::int64_t rows = va.size() / d;
  Node n;
  n.op = Op::kSoftmaxRows;
  n.inputs = {a};
  n.p0 = temperature;
  n.value = Tensor(va.shape());
  for (std::int64_t r = 0; r < rows; ++r)
    softmax_row(va.data() + r * d, n.value.data() + r * d, d, temperature);
  n.requires_grad = any_requires_grad(n.inputs);
  return push(std::move(n));
}

Tape::NodeId Tape::causal_softmax(NodeId a) {
  const Tensor& va = value(a);
  if (va.rank() != 3 || va.dim(1) != va.dim(2))
    throw std::invalid_argument("causal_softmax: expected [g,s,s], got " + shape_str(va.shape()));
  const std::int64_t g = va.dim(0), s = va.dim(1);
  Node n;
  n.op = Op::kCausalSoftmax;
  n.inputs = {a};
  n.value = Tensor(va.shape());
  for (std::int64_t b = 0; b < g; ++b) {
    for (std::int64_t i = 0; i < s; ++i) {
      const double* src = va.data() + (b * s + i) * s;
      double* dst = n.value.data() + (b * s + i) * s;
      softmax_row(src, dst, i + 1, 1.0);
      for (std::int64_t j = i + 1; j < s; ++j) dst[j] = 0.0;
    }
  }
  n.requires_grad = any_requires_grad(n.inputs);
  return push(std::move(n));
}

Tape::NodeId Tape::rms_norm(NodeId x, NodeId gain, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("rms_norm: eps must be > 0");
  const Tensor& vx = value(x);
  const Tensor& vg = value(gain);
  if (vx.rank() < 1 || vg.rank() != 1 || vg.dim(0) != vx.dim(vx.rank() - 1))
    throw std::invalid_argument("rms_norm: gain length must match last dim of x");
  const std::int64_t d = vg.dim(0);
  const std::int64_t rows = vx.size() / d;
  Node n;
  n.op = Op::kRmsNorm;
  n.inputs = {x, gain};
  n.p0 = eps;
  n.value = Tensor(vx.shape());
  n.aux = Tensor({rows});  // cached 1/rms per row
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = vx.data() + r * d;
    double ms = 0.0;
    for (std::int64_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
    ms /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(ms + eps);
    n.aux[r] = inv;
    double* yr = n.value.data() + r * d;
    for (std::int64_t j = 0; j < d; ++j) yr[j] = xr[j] * inv * vg[j];
  }
  n.requires_grad = any_requires_grad(n.inputs);
  return push(std::move(n));
}

Tape::NodeId Tape::reshape(NodeId a, std::vector<std::int64_t> shape) {
  const Tensor& va = value(a);
  if (shape_size(shape) != va.size())
    throw std::invalid_argument("reshape: element count mismatch " + shape_str(va.shape()) +
                                " -> " + shape_str(shape));
  Node n;
  n.op = Op::kReshape;
  n.inputs = {a};
  n.value = Tensor(std::move(shape), va.values());
  n.requires_grad = any_requires_grad(n.inputs);
  return push(std::move(n));
}

Tape::NodeId Tape::split_heads(NodeId a, std::int64_t batch, std::int64_t seq,
                               std::int64_t heads) {
  const Tensor& va = value(a);
  if (va.rank() != 2 || va.dim(0) != batch * seq || va.dim(1) % heads != 0)
    throw std::invalid_argument("split_heads: bad input shape " + shape_str(va.shape()));
  const std::int64_t hd = va.dim(1) / heads;
  Node n;
  n.op = Op::kSplitHeads;
  n.inputs = {a};
  n.d0 = batch;
  n.d1 = seq;
  n.d2 = heads;
  n.value = Tensor({batch * heads, seq, hd});
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t s = 0; s < seq; ++s)
      for (std::int64_t h = 0; h < heads; ++h) {
        const double* src = va.data() + (b * seq + s) * (heads * hd) + h * hd;
        double* dst = n.value.data() + ((b * heads + h) * seq + s) * hd;
        std::copy(src, src + hd, dst);
      }
  n.requires_grad = any_requires_grad(n.inputs);
  return push(std::move(n));
}

Tape::NodeId Tape::merge_heads(NodeId a, std::int64_t batch, std::int64_t heads,
                               std::int64_t seq) {
  const Tensor& va = value(a);
  if (va.rank() != 3 || va.dim(0) != batch * heads || va.dim(1) != seq)
    throw std::invalid_argument("merge_heads: bad input shape " + shape_str(va.shape()));
  const std::int64_t hd = va.dim(2);
  Node n;
  n.op = Op::kMergeHeads;
  n.inputs = {a};
  n.d0 = batch;
  n.d1 = heads;
  n.d2 = seq;
  n.value = Tensor({batch * seq, heads * hd});
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t h = 0; h < heads; ++h)
      for (std::int64_t s = 0; s < seq; ++s) {
        const double* src = va.data() + ((b * heads + h) * seq + s) * hd;
        double* dst = n.value.data() + (b * seq + s) * (heads * hd) + h * hd;
        std::copy(src, src + hd, dst);
      }
  n.requires_grad = any_requires_grad(n.inputs);
  return push(std::move(n));
}

Tape::NodeId Tape::sum_all(NodeId a) {
  Node n;
  n.op = Op::kSumAll;
  n.inputs = {a};
  const Tensor& va = value(a);
  double acc = 0.0;
  for (std::int64_t i = 0; i < va.size(); ++i) acc += va[i];
  n.value = Tensor::scalar(acc);
  n.requires_grad = any_requires_grad(n.inputs);
  return push(std::move(n));
}

Tape::NodeId Tape::mean_all(NodeId a) {
  Node n;
  n.op = Op::kMeanAll;
  n.inputs = {a};
  const Tensor& va = value(a);
  if (va.size() == 0) throw std::invalid_argument("mean_all: empty tensor");
  double acc = 0.0;
  for (std::int64_t i = 0; i < va.size(); ++i) acc += va[i];
  n.value = Tensor::scalar(acc / static_cast<double>(va.size()));
  n.requires_grad = any_requires_grad(n.inputs);
  return push(std::move(n));
}

Tape::NodeId Tape::weighted_sum(NodeId a, std::vector<double> coeffs) {
  const Tensor& va = value(a);
  if (static_cast<std::int64_t>(coeffs.size()) != va.size())
    throw std::invalid_argument("weighted_sum: coefficient count mismatch");
  Node n;
  n.op = Op::kWeightedSum;
  n.inputs = {a};
  double acc = 0.0;
  for (std::int64_t i = 0; i < va.size(); ++i) acc += coeffs[static_cast<std::size_t>(i)] * va[i];
  n.value = Tensor::scalar(acc);
  n.coeffs = std::move(coeffs);
  n.requires_grad = any_requires_grad(n.inputs);
  return push(std::move(n));
}

Tape::NodeId Tape::gather_rows(NodeId table, std::vector<int> ids) {
  const Tensor& vt = value(table);
  if (vt.rank() != 2) throw std::invalid_argument("gather_rows: table must be 2-D");
  const std::int64_t rows = vt.dim(0), d = vt.dim(1);
  for (int id : ids)
    if (id < 0 || id >= rows)
      throw std::invalid_argument("gather_rows: index out of range: " + std::to_string(id));
  Node n;
  n.op = Op::kGatherRows;
  n.inputs = {table};
  n.value = Tensor({static_cast<std::int64_t>(ids.size()), d});
  for (std::size_t r = 0; r < ids.size(); ++r)
    std::copy(vt.data() + ids[r] * d, vt.data() + (ids[r] + 1) * d,
              n.value.data() + static_cast<std::int64_t>(r) * d);
  n.ids = std::move(ids);
  n.requires_grad = any_requires_grad(n.inputs);
  return push(std::move(n));
}

Tape::NodeId Tape::cross_entropy(NodeId logits, std::vector<int> targets) {
  const Tensor& vl = value(logits);
  if (vl.rank() != 2) throw std::invalid_argument("cross_entropy: logits must be 2-D");
  const std::int64_t rows = vl.dim(0), v = vl.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != rows)
    throw std::invalid_argument("cross_entropy: one target per row required");
  for (int t : targets)
    if (t < 0 || t >= v) throw std::invalid_argument("cross_entropy: target out of range");
  Node n;
  n.op = Op::kCrossEntropy;
  n.inputs = {logits};
  n.aux = Tensor(vl.shape());  // cached softmax probabilities
  double total = 0.0;
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* x = vl.data() + r * v;
    double* p = n.aux.data() + r * v;
    softmax_row(x, p, v, 1.0);
    // -log p[target], recomputed stably from the logits.
    double m = x[0];
    for (std::int64_t j = 1; j < v; ++j) m = std::max(m, x[j]);
    double lse = 0.0;
    for (std::int64_t j = 0; j < v; ++j) lse += std::exp(x[j] - m);
    total += m + std::log(lse) - x[targets[static_cast<std::size_t>(r)]];
  }
  n.value = Tensor::scalar(total / static_cast<double>(rows));
  n.ids = std::move(targets);
  n.requires_grad = any_requires_grad(n.inputs);
  return push(std::move(n));
}

Tape::NodeId Tape::mix(const std::vector<NodeId>& candidates, NodeId probs, std::int64_t row) {
  if (candidates.empty()) throw std::invalid_argument("mix: empty candidate list");
  const Tensor& vp = value(probs);
  if (vp.rank() != 2 || vp.dim(1) != static_cast<std::int64_t>(candidates.size()))
    throw std::invalid_argument("mix: probs row width must equal candidate count");
  if (row < 0 || row >= vp.dim(0)) throw std::invalid_argument("mix: row out of range");
  const Tensor& first = value(candidates[0]);
  for (NodeId c : candidates) {
    if (requires_grad(c))
      throw std::invalid_argument("mix: candidates must be frozen (requires_grad = false)");
    if (!value(c).same_shape(first)) throw std::invalid_argument("mix: candidate shape mismatch");
  }
  Node n;
  n.op = Op::kMix;
  n.inputs = candidates;
  n.inputs.push_back(probs);
  n.d0 = row;
  n.d1 = static_cast<std::int64_t>(candidates.size());
  n.value = Tensor(first.shape());
  for (std::size_t b = 0; b < candidates.size(); ++b) {
    const double p = vp[row * vp.dim(1) + static_cast<std::int64_t>(b)];
    const Tensor& w = value(candidates[b]);
    for (std::int64_t i = 0; i < w.size(); ++i) n.value[i] += p * w[i];
  }
  n.requires_grad = any_requires_grad(n.inputs);
  return push(std::move(n));
}

Tape::NodeId Tape::binary_concrete_rows(NodeId logits, const Tensor& noise, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("binary_concrete_rows: tau must be > 0");
  const Tensor& vl = value(logits);
  if (vl.rank() != 2 || vl.dim(1) != 2)
    throw std::invalid_argument("binary_concrete_rows: logits must be [m,2]");
  const std::int64_t m = vl.dim(0);
  if (noise.size() != m) throw std::invalid_argument("binary_concrete_rows: noise length mismatch");
  Node n;
  n.op = Op::kBinaryConcrete;
  n.inputs = {logits};
  n.p0 = tau;
  n.value = Tensor(vl.shape());
  for (std::int64_t r = 0; r < m; ++r) {
    const double z = (vl[r * 2 + 1] - vl[r * 2] + noise[r]) / tau;
    const double p1 = sigmoid(z);
    n.value[r * 2] = 1.0 - p1;
    n.value[r * 2 + 1] = p1;
  }
  n.requires_grad = any_requires_grad(n.inputs);
  return push(std::move(n));
}

void Tape::accumulate(Tensor& slot, const std::vector<std::int64_t>& shape) {
  if (!slot.defined()) slot = Tensor(shape);
}

void Tape::backward(NodeId loss) {
  if (!grad_enabled_) throw std::logic_error("backward: tape was built with gradients disabled");
  const Node& ln = node(loss);
  if (!ln.value.is_scalar()) throw std::logic_error("backward: loss must be a scalar");
  std::vector<Tensor> g(static_cast<std::size_t>(loss) + 1);
  g[static_cast<std::size_t>(loss)] = Tensor(ln.value.shape(), {1.0});
  for (NodeId id = loss; id >= 0; --id) {
    Node& nd = node(id);
    if (!nd.requires_grad || !g[static_cast<std::size_t>(id)].defined()) continue;
    if (nd.op == Op::kLeaf) {
      if (!nd.grad.defined()) nd.grad = Tensor(nd.value.shape());
      const Tensor& gi = g[static_cast<std::size_t>(id)];
      for (std::int64_t i = 0; i < nd.grad.size(); ++i) nd.grad[i] += gi[i];
    } else {
      backward_node(id, g);
    }
    g[static_cast<std::size_t>(id)] = Tensor();  // release transient buffer
  }
}

void Tape::backward_node(NodeId id, std::vector<Tensor>& g) {
  Node& nd = node(id);
  const Tensor& go = g[static_cast<std::size_t>(id)];
  auto slot = [&](NodeId in) -> Tensor& {
    Tensor& s = g[static_cast<std::size_t>(in)];
    accumulate(s, node(in).value.shape());
    return s;
  };
  auto wants = [&](std::size_t k) { return node(nd.inputs[k]).requires_grad; };

  switch (nd.op) {
    case Op::kLeaf:
      break;
    case Op::kAdd: {
      for (std::size_t k = 0; k < 2; ++k) {
        if (!wants(k)) continue;
        Tensor& gi = slot(nd.inputs[k]);
        if (gi.same_shape(go)) {
          for (std::int64_t i = 0; i < go.size(); ++i) gi[i] += go[i];
        } else {  // scalar operand
          double acc = 0.0;
          for (std::int64_t i = 0; i < go.size(); ++i) acc += go[i];
          gi[0] += acc;
        }
      }
      break;
    }
    case Op::kSub: {
      for (std::size_t k = 0; k < 2; ++k) {
        if (!wants(k)) continue;
        const double sign = k == 0 ? 1.0 : -1.0;
        Tensor& gi = slot(nd.inputs[k]);
        if (gi.same_shape(go)) {
          for (std::int64_t i = 0; i < go.size(); ++i) gi[i] += sign * go[i];
        } else {
          double acc = 0.0;
          for (std::int64_t i = 0; i < go.size(); ++i) acc += go[i];
          gi[0] += sign * acc;
        }
      }
      break;
    }
    case Op::kMul: {
      const Tensor& va = value(nd.inputs[0]);
      const Tensor& vb = value(nd.inputs[1]);
      for (std::size_t k = 0; k < 2; ++k) {
        if (!wants(k)) continue;
        const Tensor& other = k == 0 ? vb : va;
        Tensor& gi = slot(nd.inputs[k]);
        if (gi.same_shape(go)) {
          if (other.same_shape(go)) {
            for (std::int64_t i = 0; i < go.size(); ++i) gi[i] += go[i] * other[i];
          } else {
            const double s = other.item();
            for (std::int64_t i = 0; i < go.size(); ++i) gi[i] += go[i] * s;
          }
        } else {  // this operand is scalar
          double acc = 0.0;
          for (std::int64_t i = 0; i < go.size(); ++i) acc += go[i] * other[i];
          gi[0] += acc;
        }
      }
      break;
    }
    case Op::kScale: {
      if (!wants(0)) break;
      Tensor& gi = slot(nd.inputs[0]);
      for (std::int64_t i = 0; i < go.size(); ++i) gi[i] += go[i] * nd.p0;
      break;
    }
    case Op::kAddConst: {
      if (!wants(0)) break;
      Tensor& gi = slot(nd.inputs[0]);
      for (std::int64_t i = 0; i < go.size(); ++i) gi[i] += go[i];
      break;
    }
    case Op::kSquare: {
      if (!wants(0)) break;
      const Tensor& vx = value(nd.inputs[0]);
      Tensor& gi = slot(nd.inputs[0]);
      for (std::int64_t i = 0; i < go.size(); ++i) gi[i] += 2.0 * vx[i] * go[i];
      break;
    }
    case Op::kSilu: {
      if (!wants(0)) break;
      const Tensor& vx = value(nd.inputs[0]);
      Tensor& gi = slot(nd.inputs[0]);
      for (std::int64_t i = 0; i < go.size(); ++i) {
        const double s = sigmoid(vx[i]);
        gi[i] += go[i] * s * (1.0 + vx[i] * (1.0 - s));
      }
      break;
    }
    case Op::kLog: {
      if (!wants(0)) break;
      const Tensor& vx = value(nd.inputs[0]);
      Tensor& gi = slot(nd.inputs[0]);
      for (std::int64_t i = 0; i < go.size(); ++i) gi[i] += go[i] / vx[i];
      break;
    }
    case Op::kClampMin: {
      if (!wants(0)) break;
      const Tensor& vx = value(nd.inputs[0]);
      Tensor& gi = slot(nd.inputs[0]);
      for (std::int64_t i = 0; i < go.size(); ++i)
        if (vx[i] > nd.p0) gi[i] += go[i];
      break;
    }
    case Op::kPowConst: {
      if (!wants(0)) break;
      const Tensor& vx = value(nd.inputs[0]);
      Tensor& gi = slot(nd.inputs[0]);
      for (std::int64_t i = 0; i < go.size(); ++i)
        gi[i] += go[i] * nd.p0 * std::pow(vx[i], nd.p0 - 1.0);
      break;
    }
    case Op::kMatmul: {
      const Tensor& va = value(nd.inputs[0]);
      const Tensor& vb = value(nd.inputs[1]);
      const std::int64_t m = va.dim(0), k = va.dim(1), nn = vb.dim(1);
      if (wants(0))
        kernels::mm_nt(slot(nd.inputs[0]).data(), go.data(), vb.data(), m, nn, k, true);
      if (wants(1))
        kernels::mm_tn(slot(nd.inputs[1]).data(), va.data(), go.data(), m, k, nn, true);
      break;
    }
    case Op::kBmm: {
      const Tensor& va = value(nd.inputs[0]);
      const Tensor& vb = value(nd.inputs[1]);
      const std::int64_t gK = va.dim(0), m = va.dim(1), k = va.dim(2), nn = vb.dim(2);
      if (wants(0)) {
        Tensor& gi = slot(nd.inputs[0]);
        for (std::int64_t s = 0; s < gK; ++s)
          kernels::mm_nt(gi.data() + s * m * k, go.data() + s * m * nn, vb.data() + s * k * nn, m,
                         nn, k, true);
      }
      if (wants(1)) {
        Tensor& gi = slot(nd.inputs[1]);
        for (std::int64_t s = 0; s < gK; ++s)
          kernels::mm_tn(gi.data() + s * k * nn, va.data() + s * m * k, go.data() + s * m * nn, m,
                         k, nn, true);
      }
      break;
    }
    case Op::kBmmNt: {
      const Tensor& va = value(nd.inputs[0]);
      const Tensor& vb = value(nd.inputs[1]);
      const std::int64_t gK = va.dim(0), m = va.dim(1), k = va.dim(2), nn = vb.dim(1);
      if (wants(0)) {
        Tensor& gi = slot(nd.inputs[0]);
        for (std::int64_t s = 0; s < gK; ++s)
          kernels::mm_nn(gi.data() + s * m * k, go.data() + s * m * nn, vb.data() + s * nn * k, m,
                         nn, k, true);
      }
      if (wants(1)) {
        Tensor& gi = slot(nd.inputs[1]);
        for (std::int64_t s = 0; s < gK; ++s)
          kernels::mm_tn(gi.data() + s * nn * k, go.data() + s * m * nn, va.data() + s * m * k, m,
                         nn, k, true);
      }
      break;
    }
    case Op::kSoftmaxRows: {
      if (!wants(0)) break;
      const Tensor& y = nd.value;
      const std::int64_t d = y.dim(y.rank() - 1);
      const std::int64_t rows = y.size() / d;
      Tensor& gi = slot(nd.inputs[0]);
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* yr = y.data() + r * d;
        const double* gr = go.data() + r * d;
        double dot = 0.0;
        for (std::int64_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
        double* gx = gi.data() + r * d;
        for (std::int64_t j = 0; j < d; ++j) gx[j] += yr[j] / nd.p0 * (gr[j] - dot);
      }
      break;
    }
    case Op::kCausalSoftmax: {
      if (!wants(0)) break;
      const Tensor& y = nd.value;
      const std::int64_t gK = y.dim(0), s = y.dim(1);
      Tensor& gi = slot(nd.inputs[0]);
      for (std::int64_t b = 0; b < gK; ++b) {
        for (std::int64_t i = 0; i < s; ++i) {
          const double* yr = y.data() + (b * s + i) * s;
          const double* gr = go.data() + (b * s + i) * s;
          double dot = 0.0;
          for (std::int64_t j = 0; j <= i; ++j) dot += gr[j] * yr[j];
          double* gx = gi.data() + (b * s + i) * s;
          for (std::int64_t j = 0; j <= i; ++j) gx[j] += yr[j] * (gr[j] - dot);
        }
      }
      break;
    }
    case Op::kRmsNorm: {
      const Tensor& vx = value(nd.inputs[0]);
      const Tensor& vg = value(nd.inputs[1]);
      const std::int64_t d = vg.dim(0);
      const std::int64_t rows = vx.size() / d;
      if (wants(0)) {
        Tensor& gi = slot(nd.inputs[0]);
        for (std::int64_t r = 0; r < rows; ++r) {
          const double inv = nd.aux[r];
          const double* xr = vx.data() + r * d;
          const double* gr = go.data() + r * d;
          double dot = 0.0;
          for (std::int64_t j = 0; j < d; ++j) dot += gr[j] * vg[j] * xr[j];
          const double c = inv * inv * inv * dot / static_cast<double>(d);
          double* gx = gi.data() + r * d;
          for (std::int64_t j = 0; j < d; ++j) gx[j] += inv * gr[j] * vg[j] - c * xr[j];
        }
      }
      if (wants(1)) {
        Tensor& gi = slot(nd.inputs[1]);
        for (std::int64_t r = 0; r < rows; ++r) {
          const double inv = nd.aux[r];
          const double* xr = vx.data() + r * d;
          const double* gr = go.data() + r * d;
          for (std::int64_t j = 0; j < d; ++j) gi[j] += gr[j] * xr[j] * inv;
        }
      }
      break;
    }
    case Op::kReshape: {
      if (!wants(0)) break;
      Tensor& gi = slot(nd.inputs[0]);
      for (std::int64_t i = 0; i < go.size(); ++i) gi[i] += go[i];
      break;
    }
    case Op::kSplitHeads: {
      if (!wants(0)) break;
      const std::int64_t batch = nd.d0, seq = nd.d1, heads = nd.d2;
      const std::int64_t hd = nd.value.dim(2);
      Tensor& gi = slot(nd.inputs[0]);
      for (std::int64_t b = 0; b < batch; ++b)
        for (std::int64_t s = 0; s < seq; ++s)
          for (std::int64_t h = 0; h < heads; ++h) {
            const double* src = go.data() + ((b * heads + h) * seq + s) * hd;
            double* dst = gi.data() + (b * seq + s) * (heads * hd) + h * hd;
            for (std::int64_t j = 0; j < hd; ++j) dst[j] += src[j];
          }
      break;
    }
    case Op::kMergeHeads: {
      if (!wants(0)) break;
      const std::int64_t batch = nd.d0, heads = nd.d1, seq = nd.d2;
      const std::int64_t hd = value(nd.inputs[0]).dim(2);
      Tensor& gi = slot(nd.inputs[0]);
      for (std::int64_t b = 0; b < batch; ++b)
        for (std::int64_t h = 0; h < heads; ++h)
          for (std::int64_t s = 0; s < seq; ++s) {
            const double* src = go.data() + (b * seq + s) * (heads * hd) + h * hd;
            double* dst = gi.data() + ((b * heads + h) * seq + s) * hd;
            for (std::int64_t j = 0; j < hd; ++j) dst[j] += src[j];
          }
      break;
    }
    case Op::kSumAll: {
      if (!wants(0)) break;
      Tensor& gi = slot(nd.inputs[0]);
      const double gv = go[0];
      for (std::int64_t i = 0; i < gi.size(); ++i) gi[i] += gv;
      break;
    }
    case Op::kMeanAll: {
      if (!wants(0)) break;
      Tensor& gi = slot(nd.inputs[0]);
      const double gv = go[0] / static_cast<double>(gi.size());
      for (std::int64_t i = 0; i < gi.size(); ++i) gi[i] += gv;
      break;
    }
    case Op::kWeightedSum: {
      if (!wants(0)) break;
      Tensor& gi = slot(nd.inputs[0]);
      const double gv = go[0];
      for (std::int64_t i = 0; i < gi.size(); ++i)
        gi[i] += gv * nd.coeffs[static_cast<std::size_t>(i)];
      break;
    }
    case Op::kGatherRows: {
      if (!wants(0)) break;
      Tensor& gi = slot(nd.inputs[0]);
      const std::int64_t d = gi.dim(1);
      for (std::size_t r = 0; r < nd.ids.size(); ++r) {
        const double* src = go.data() + static_cast<std::int64_t>(r) * d;
        double* dst = gi.data() + nd.ids[r] * d;
        for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
      }
      break;
    }
    case Op::kCrossEntropy: {
      if (!wants(0)) break;
      Tensor& gi = slot(nd.inputs[0]);
      const std::int64_t rows = gi.dim(0), v = gi.dim(1);
      const double gv = go[0] / static_cast<double>(rows);
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* p = nd.aux.data() + r * v;
        double* dst = gi.data() + r * v;
        for (std::int64_t j = 0; j < v; ++j) dst[j] += gv * p[j];
        dst[nd.ids[static_cast<std::size_t>(r)]] -= gv;
      }
      break;
    }
    case Op::kMix: {
      const std::size_t nc = static_cast<std::size_t>(nd.d1);
      const NodeId probs = nd.inputs[nc];
      if (!node(probs).requires_grad) break;
      Tensor& gi = slot(probs);
      const std::int64_t width = gi.dim(1);
      for (std::size_t b = 0; b < nc; ++b) {
        const Tensor& w = value(nd.inputs[b]);
        double acc = 0.0;
        for (std::int64_t i = 0; i < w.size(); ++i) acc += go[i] * w[i];
        gi[nd.d0 * width + static_cast<std::int64_t>(b)] += acc;
      }
      break;
    }
    case Op::kBinaryConcrete: {
      if (!wants(0)) break;
      Tensor& gi = slot(nd.inputs[0]);
      const std::int64_t m = nd.value.dim(0);
      for (std::int64_t r = 0; r < m; ++r) {
        const double p1 = nd.value[r * 2 + 1];
        const double dz = p1 * (1.0 - p1) / nd.p0;
        const double gz = (go[r * 2 + 1] - go[r * 2]) * dz;
        gi[r * 2 + 1] += gz;
        gi[r * 2] -= gz;
      }
      break;
    }
  }
}

const Tensor& Tape::grad(NodeId id) const {
  const Node& n = node(id);
  if (!n.grad.defined()) throw std::logic_error("grad: no gradient recorded for this node");
  return n.grad;
}

bool Tape::has_grad(NodeId id) const { return node(id).grad.defined(); }

void Tape::zero_grad() {
  for (Node& n : nodes_)
    if (n.grad.defined()) n.grad.fill(0.0);
}

std::size_t Tape::grad_allocation_count() const {
  std::size_t c = 0;
  for (const Node& n : nodes_)
    if (n.grad.defined()) ++c;
  return c;
}

}  // namespace bitbudget
