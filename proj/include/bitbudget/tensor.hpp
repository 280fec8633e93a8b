#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace bitbudget {

// Dense row-major tensor of 64-bit floats. Plain value type; autodiff lives on
// the Tape below.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> shape);
  Tensor(std::vector<std::int64_t> shape, std::vector<double> data);

  static Tensor full(std::vector<std::int64_t> shape, double value);
  static Tensor scalar(double value);

  const std::vector<std::int64_t>& shape() const { return shape_; }
  std::int64_t dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool defined() const { return !shape_.empty() || !data_.empty(); }
  bool is_scalar() const { return data_.size() == 1; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double item() const;  // value of a one-element tensor
  void fill(double v);
  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

 private:
  std::vector<std::int64_t> shape_;
  std::vector<double> data_;
};

std::int64_t shape_size(const std::vector<std::int64_t>& shape);
std::string shape_str(const std::vector<std::int64_t>& shape);

// Raw matrix kernels shared by forward and backward passes. C is m x n.
namespace kernels {
void mm_nn(double* c, const double* a, const double* b, std::int64_t m, std::int64_t k,
           std::int64_t n, bool accumulate);
void mm_nt(double* c, const double* a, const double* b, std::int64_t m, std::int64_t k,
           std::int64_t n, bool accumulate);  // b is n x k, C = A * B^T
void mm_tn(double* c, const double* a, const double* b, std::int64_t r, std::int64_t m,
           std::int64_t n, bool accumulate);  // a is r x m, b is r x n, C = A^T * B
}  // namespace kernels

// Reverse-mode tape. Nodes are appended in topological order; NodeId is an
// index into the tape. Backward walks the tape in reverse and accumulates
// gradients into leaves that were created with requires_grad = true.
class Tape {
 public:
  using NodeId = std::int32_t;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  NodeId leaf(Tensor value, bool requires_grad = false);
  NodeId constant(Tensor value) { return leaf(std::move(value), false); }
  NodeId constant_scalar(double v) { return leaf(Tensor::scalar(v), false); }

  // Elementwise; shapes must match except that either operand may be scalar.
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double c);       // c is a compile-time constant, not a node
  NodeId add_const(NodeId a, double c);
  NodeId square(NodeId a);
  NodeId silu(NodeId a);                  // x * sigmoid(x)
  NodeId log(NodeId a);
  NodeId clamp_min(NodeId a, double floor);
  NodeId pow_const(NodeId a, double exponent);

  NodeId matmul(NodeId a, NodeId b);      // [m,k] x [k,n]
  NodeId bmm(NodeId a, NodeId b);         // [g,m,k] x [g,k,n]
  NodeId bmm_nt(NodeId a, NodeId b);      // [g,m,k] x [g,n,k] -> [g,m,n]

  NodeId softmax_rows(NodeId a, double temperature);  // over the last dim
  NodeId causal_softmax(NodeId a);                    // [g,s,s], mask j > i
  NodeId rms_norm(NodeId x, NodeId gain, double eps);

  NodeId reshape(NodeId a, std::vector<std::int64_t> shape);
  // [batch*seq, heads*hd] -> [batch*heads, seq, hd] and back.
  NodeId split_heads(NodeId a, std::int64_t batch, std::int64_t seq, std::int64_t heads);
  NodeId merge_heads(NodeId a, std::int64_t batch, std::int64_t heads, std::int64_t seq);

  NodeId sum_all(NodeId a);
  NodeId mean_all(NodeId a);
  NodeId weighted_sum(NodeId a, std::vector<double> coeffs);  // scalar dot with constants

  NodeId gather_rows(NodeId table, std::vector<int> ids);
  // Mean over rows of -log softmax(row)[target].
  NodeId cross_entropy(NodeId logits, std::vector<int> targets);

  // Sum_b probs[row,b] * candidates[b]. Candidates must be frozen leaves;
  // gradient flows to the probs row only.
  NodeId mix(const std::vector<NodeId>& candidates, NodeId probs, std::int64_t row);

  // Two-class concrete relaxation. logits [m,2], noise [m]:
  // p1 = sigmoid((logits[:,1] - logits[:,0] + noise) / tau), p0 = 1 - p1.
  NodeId binary_concrete_rows(NodeId logits, const Tensor& noise, double tau);

  const Tensor& value(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(NodeId id) const {
    return nodes_[static_cast<std::size_t>(id)].requires_grad;
  }

  // Populates leaf gradients; repeated calls accumulate.
  void backward(NodeId loss);

  const Tensor& grad(NodeId id) const;
  bool has_grad(NodeId id) const;
  void zero_grad();

  std::size_t num_nodes() const { return nodes_.size(); }
  std::size_t grad_allocation_count() const;
  bool grad_enabled() const { return grad_enabled_; }

 private:
  enum class Op : std::uint8_t {
    kLeaf, kAdd, kSub, kMul, kScale, kAddConst, kSquare, kSilu, kLog, kClampMin,
    kPowConst, kMatmul, kBmm, kBmmNt, kSoftmaxRows, kCausalSoftmax, kRmsNorm,
    kReshape, kSplitHeads, kMergeHeads, kSumAll, kMeanAll, kWeightedSum,
    kGatherRows, kCrossEntropy, kMix, kBinaryConcrete,
  };

  struct Node {
    Op op = Op::kLeaf;
    std::vector<NodeId> inputs;
    Tensor value;
    bool requires_grad = false;
    double p0 = 0.0;            // temperature / eps / scale / exponent
    std::int64_t d0 = 0, d1 = 0, d2 = 0;  // op-specific dims, row index
    std::vector<int> ids;       // gather / target indices
    std::vector<double> coeffs; // weighted_sum constants
    Tensor aux;                 // cached intermediates for backward
    Tensor grad;                // persistent, leaves only
  };

  Node& node(NodeId id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(NodeId id) const { return nodes_[static_cast<std::size_t>(id)]; }
  NodeId push(Node n);
  bool any_requires_grad(std::span<const NodeId> ins) const;
  void backward_node(NodeId id, std::vector<Tensor>& g);
  static void accumulate(Tensor& slot, const std::vector<std::int64_t>& shape);

  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

}  // namespace bitbudget
