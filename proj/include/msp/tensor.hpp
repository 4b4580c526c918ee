#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace msp {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation or zero_grad()
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  // Propagates this node's grad into its parents. Reads saved state from its
  // own captures; never captures the owning node (no reference cycles).
  std::function<void(Node&)> backward_fn;

  std::span<double> grad_buffer();
};

}  // namespace detail

/// Dense row-major float64 tensor with reverse-mode gradient tracking.
///
/// A Tensor is a cheap handle; copies share the same storage and graph node.
/// Values produced by ops are immutable. Leaves created with requires_grad
/// accumulate gradients across backward() calls until zero_grad().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor row(std::vector<double> values, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t rows() const;  // rank-2 only
  std::size_t cols() const;  // rank-2 only

  std::span<const double> data() const;
  std::vector<double> to_vector() const;
  double item() const;
  double at(std::size_t i) const;
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  // Mutable access for initialisation and optimizer updates of leaves.
  std::span<double> mutable_data();
  std::span<double> mutable_grad();

  /// Populate gradients of every requires_grad tensor reachable from this scalar.
  void backward() const;

  /// Same values, cut from the graph.
  Tensor detach() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Global (thread-local) switch for graph recording.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---------------------------------------------------------------------------
// Differentiable operations. Rank-2 tensors are (rows x cols).
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// a (n x m) plus a bias broadcast over rows; bias has m elements.
Tensor add_bias(const Tensor& a, const Tensor& bias);

Tensor matmul(const Tensor& a, const Tensor& b);
/// a x b^T without materialising the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);

/// Softmax along `axis` (negative counts from the back). Max-subtracted.
Tensor softmax(const Tensor& x, int axis = -1);
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// Rows of `table` gathered by id.
Tensor embedding(const Tensor& table, std::span<const int> ids);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& a, Shape shape);

/// Mean negative log-likelihood of `targets` under row-wise softmax(logits).
/// Positions whose target equals `ignore_index` are excluded.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::optional<int> ignore_index = std::nullopt);

/// Mean binary cross entropy of sigmoid(logits) against targets in [0, 1].
Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets);

/// Valid 2-D convolution, stride 1. input (C,H,W), weight (O,C,KH,KW), bias (O).
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias);
/// Non-overlapping max pooling over (C,H,W); trailing rows/cols that do not fill a window are dropped.
Tensor maxpool2d(const Tensor& input, std::size_t window);

/// One segment of a packed batch: rows [begin, begin + length).
struct Segment {
  std::size_t begin = 0;
  std::size_t length = 0;
};

/// Multi-head scaled dot-product self-attention over packed sequences.
/// q, k, v are (n x d); heads split d evenly. Rows only attend within their
/// segment, and with `causal` only to earlier-or-equal rows of that segment.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            std::span<const Segment> segments, bool causal);

}  // namespace msp
