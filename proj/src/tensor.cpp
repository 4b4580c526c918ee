#include "msp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <Eigen/Core>

#include "msp/error.hpp"

namespace msp {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

std::span<double> Node::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

}  // namespace detail

namespace {

thread_local bool g_grad_enabled = true;

using detail::Node;
using NodePtr = std::shared_ptr<Node>;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

NodePtr make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_to_string(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return node;
}

// Wraps an op result. Records parents and the backward rule only when some
// parent needs a gradient and recording is on.
Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
                   std::function<void(Node&)> backward) {
  auto node = make_leaf(std::move(shape), std::move(data), false);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->is_leaf = false;
      for (const auto& t : inputs) node->parents.push_back(t.node_ptr());
      node->backward_fn = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}

Tensor make_result_n(Shape shape, std::vector<double> data, std::span<const Tensor> inputs,
                     std::function<void(Node&)> backward) {
  auto node = make_leaf(std::move(shape), std::move(data), false);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->is_leaf = false;
      for (const auto& t : inputs) node->parents.push_back(t.node_ptr());
      node->backward_fn = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}

// Grad buffer of parent `i`, or an empty span when that parent is constant.
std::span<double> parent_grad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  if (!p.requires_grad) return {};
  return p.grad_buffer();
}

const std::vector<double>& parent_data(Node& self, std::size_t i) { return self.parents[i]->data; }

void require_rank2(const Tensor& t, const char* op) {
  if (!t.defined() || t.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a rank-2 tensor, got " +
                         (t.defined() ? shape_to_string(t.shape()) : std::string("undefined")));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
  }
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  const auto in = a.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  return make_result(a.shape(), std::move(out), {a}, [deriv](Node& self) {
    auto ga = parent_grad(self, 0);
    if (ga.empty()) return;
    const auto& x = parent_data(self, 0);
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += self.grad[i] * deriv(x[i], self.data[i]);
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor handle
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return Tensor(make_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

Tensor Tensor::row(std::vector<double> values, bool requires_grad) {
  const auto n = values.size();
  return from({1, n}, std::move(values), requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values, bool requires_grad) {
  return from({rows, cols}, std::move(values), requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->data.size(); }

std::size_t Tensor::rows() const {
  require_rank2(*this, "rows()");
  return node_->shape[0];
}

std::size_t Tensor::cols() const {
  require_rank2(*this, "cols()");
  return node_->shape[1];
}

std::span<const double> Tensor::data() const { return node_->data; }
std::vector<double> Tensor::to_vector() const { return node_->data; }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_to_string(shape()));
  return node_->data[0];
}

double Tensor::at(std::size_t i) const { return node_->data.at(i); }

double Tensor::at(std::size_t r, std::size_t c) const {
  require_rank2(*this, "at(r, c)");
  return node_->data.at(r * node_->shape[1] + c);
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!node_->is_leaf) throw ContractError("requires_grad can only be changed on leaf tensors");
  node_->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }

void Tensor::zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }

std::span<double> Tensor::mutable_data() { return node_->data; }
std::span<double> Tensor::mutable_grad() { return node_->grad_buffer(); }

void Tensor::backward() const {
  if (!defined() || numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " +
                        (defined() ? shape_to_string(shape()) : std::string("undefined")));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (!n->is_leaf) n->grad.assign(n->data.size(), 0.0);
  }
  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->is_leaf && n->backward_fn) n->backward_fn(*n);
  }
}

Tensor Tensor::detach() const { return Tensor(make_leaf(shape(), node_->data, false)); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      auto g = parent_grad(self, p);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    auto ga = parent_grad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    auto gb = parent_grad(self, 1);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& x = parent_data(self, 0);
    const auto& y = parent_data(self, 1);
    auto ga = parent_grad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * y[i];
    auto gb = parent_grad(self, 1);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * x[i];
  });
}

Tensor scale(const Tensor& a, double factor) {
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * factor;
  return make_result(a.shape(), std::move(out), {a}, [factor](Node& self) {
    auto ga = parent_grad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * factor;
  });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  require_rank2(a, "add_bias");
  const std::size_t n = a.rows();
  const std::size_t m = a.cols();
  if (bias.numel() != m) {
    throw DimensionError("add_bias: bias of shape " + shape_to_string(bias.shape()) +
                         " does not broadcast over " + shape_to_string(a.shape()));
  }
  const auto x = a.data();
  const auto b = bias.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = x[i * m + j] + b[j];
  return make_result(a.shape(), std::move(out), {a, bias}, [n, m](Node& self) {
    auto ga = parent_grad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    auto gb = parent_grad(self, 1);
    if (!gb.empty())
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) gb[j] += self.grad[i * m + j];
  });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t n = a.rows();
  const std::size_t k = a.cols();
  const std::size_t m = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
  }
  std::vector<double> out(n * m);
  MatMap(out.data(), n, m).noalias() = CMatMap(a.data().data(), n, k) * CMatMap(b.data().data(), k, m);
  return make_result({n, m}, std::move(out), {a, b}, [n, k, m](Node& self) {
    const CMatMap A(parent_data(self, 0).data(), n, k);
    const CMatMap B(parent_data(self, 1).data(), k, m);
    const CMatMap G(self.grad.data(), n, m);
    if (auto ga = parent_grad(self, 0); !ga.empty()) MatMap(ga.data(), n, k).noalias() += G * B.transpose();
    if (auto gb = parent_grad(self, 1); !gb.empty()) MatMap(gb.data(), k, m).noalias() += A.transpose() * G;
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  const std::size_t n = a.rows();
  const std::size_t k = a.cols();
  const std::size_t m = b.rows();
  if (b.cols() != k) {
    throw DimensionError("matmul_nt: inner dimensions disagree, " + shape_to_string(a.shape()) +
                         " x " + shape_to_string(b.shape()) + "^T");
  }
  std::vector<double> out(n * m);
  MatMap(out.data(), n, m).noalias() =
      CMatMap(a.data().data(), n, k) * CMatMap(b.data().data(), m, k).transpose();
  return make_result({n, m}, std::move(out), {a, b}, [n, k, m](Node& self) {
    const CMatMap A(parent_data(self, 0).data(), n, k);
    const CMatMap B(parent_data(self, 1).data(), m, k);
    const CMatMap G(self.grad.data(), n, m);
    if (auto ga = parent_grad(self, 0); !ga.empty()) MatMap(ga.data(), n, k).noalias() += G * B;
    if (auto gb = parent_grad(self, 1); !gb.empty()) MatMap(gb.data(), m, k).noalias() += G.transpose() * A;
  });
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t n = a.rows();
  const std::size_t m = a.cols();
  const auto x = a.data();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j * n + i] = x[i * m + j];
  return make_result({m, n}, std::move(out), {a}, [n, m](Node& self) {
    auto ga = parent_grad(self, 0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += self.grad[j * n + i];
  });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

Tensor relu(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  // tanh approximation
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return unary(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x))); },
      [](double x, double) {
        const double u = c * (x + 0.044715 * x * x * x);
        const double t = std::tanh(u);
        const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      });
}

Tensor tanh(const Tensor& a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

// ---------------------------------------------------------------------------
// Normalisation
// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
  const auto rank = static_cast<int>(x.rank());
  if (rank < 1 || rank > 2) throw DimensionError("softmax supports rank 1 or 2, got " + shape_to_string(x.shape()));
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw DimensionError("softmax: axis out of range");

  // View as (outer x len) with a stride between consecutive elements of a lane.
  std::size_t lanes, len, lane_stride, elem_stride;
  if (rank == 1) {
    lanes = 1, len = x.numel(), lane_stride = 0, elem_stride = 1;
  } else if (axis == 1) {
    lanes = x.shape()[0], len = x.shape()[1], lane_stride = len, elem_stride = 1;
  } else {
    lanes = x.shape()[1], len = x.shape()[0], lane_stride = 1, elem_stride = x.shape()[1];
  }

  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t l = 0; l < lanes; ++l) {
    const std::size_t base = l * lane_stride;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, in[base + i * elem_stride]);
    double z = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      const double e = std::exp(in[base + i * elem_stride] - mx);
      out[base + i * elem_stride] = e;
      z += e;
    }
    for (std::size_t i = 0; i < len; ++i) out[base + i * elem_stride] /= z;
  }
  return make_result(x.shape(), std::move(out), {x}, [=](Node& self) {
    auto gx = parent_grad(self, 0);
    for (std::size_t l = 0; l < lanes; ++l) {
      const std::size_t base = l * lane_stride;
      double dot = 0.0;
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t idx = base + i * elem_stride;
        dot += self.grad[idx] * self.data[idx];
      }
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t idx = base + i * elem_stride;
        gx[idx] += self.data[idx] * (self.grad[idx] - dot);
      }
    }
  });
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank2(x, "layernorm");
  const std::size_t n = x.rows();
  const std::size_t m = x.cols();
  if (gamma.numel() != m || beta.numel() != m) {
    throw DimensionError("layernorm: gain/bias length must equal " + std::to_string(m));
  }
  const auto in = x.data();
  const auto g = gamma.data();
  const auto b = beta.data();
  std::vector<double> out(in.size());
  std::vector<double> xhat(in.size());
  std::vector<double> rstd(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* r = in.data() + i * m;
    double mu = 0.0;
    for (std::size_t j = 0; j < m; ++j) mu += r[j];
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t j = 0; j < m; ++j) var += (r[j] - mu) * (r[j] - mu);
    var /= static_cast<double>(m);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < m; ++j) {
      xhat[i * m + j] = (r[j] - mu) * rstd[i];
      out[i * m + j] = xhat[i * m + j] * g[j] + b[j];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [n, m, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                       const auto& g = parent_data(self, 1);
                       auto gx = parent_grad(self, 0);
                       auto gg = parent_grad(self, 1);
                       auto gb = parent_grad(self, 2);
                       const double inv_m = 1.0 / static_cast<double>(m);
                       for (std::size_t i = 0; i < n; ++i) {
                         const double* dy = self.grad.data() + i * m;
                         const double* xh = xhat.data() + i * m;
                         if (!gg.empty())
                           for (std::size_t j = 0; j < m; ++j) gg[j] += dy[j] * xh[j];
                         if (!gb.empty())
                           for (std::size_t j = 0; j < m; ++j) gb[j] += dy[j];
                         if (gx.empty()) continue;
                         double s1 = 0.0, s2 = 0.0;
                         for (std::size_t j = 0; j < m; ++j) {
                           const double d = dy[j] * g[j];
                           s1 += d;
                           s2 += d * xh[j];
                         }
                         for (std::size_t j = 0; j < m; ++j) {
                           const double d = dy[j] * g[j];
                           gx[i * m + j] += rstd[i] * (d - inv_m * s1 - xh[j] * inv_m * s2);
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& a) {
  const auto x = a.data();
  double s = 0.0;
  for (double v : x) s += v;
  return make_result({1}, {s}, {a}, [](Node& self) {
    auto ga = parent_grad(self, 0);
    for (auto& v : ga) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ContractError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

// ---------------------------------------------------------------------------
// Indexing and layout
// ---------------------------------------------------------------------------

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_rank2(table, "embedding");
  const std::size_t vocab = table.rows();
  const std::size_t d = table.cols();
  const auto w = table.data();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw IndexError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                       std::to_string(vocab) + " rows");
    }
    std::copy_n(w.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  std::vector<int> saved(ids.begin(), ids.end());
  return make_result({ids.size(), d}, std::move(out), {table}, [d, saved = std::move(saved)](Node& self) {
    auto gw = parent_grad(self, 0);
    for (std::size_t i = 0; i < saved.size(); ++i) {
      double* dst = gw.data() + static_cast<std::size_t>(saved[i]) * d;
      const double* src = self.grad.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_rows of zero tensors");
  for (const auto& p : parts) require_rank2(p, "concat_rows");
  const std::size_t m = parts.front().cols();
  std::size_t n = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    if (p.cols() != m) {
      throw DimensionError("concat_rows: column mismatch " + shape_to_string(parts.front().shape()) +
                           " vs " + shape_to_string(p.shape()));
    }
    offsets.push_back(n * m);
    n += p.rows();
  }
  std::vector<double> out;
  out.reserve(n * m);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_result_n({n, m}, std::move(out), parts, [offsets](Node& self) {
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      auto g = parent_grad(self, p);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offsets[p] + i];
    }
  });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank2(a, "slice_rows");
  if (begin > end || end > a.rows()) {
    throw DimensionError("slice_rows [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of range for " + shape_to_string(a.shape()));
  }
  const std::size_t m = a.cols();
  const auto x = a.data();
  std::vector<double> out(x.begin() + static_cast<std::ptrdiff_t>(begin * m),
                          x.begin() + static_cast<std::ptrdiff_t>(end * m));
  return make_result({end - begin, m}, std::move(out), {a}, [begin, m](Node& self) {
    auto ga = parent_grad(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[begin * m + i] += self.grad[i];
  });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank2(a, "slice_cols");
  if (begin > end || end > a.cols()) {
    throw DimensionError("slice_cols [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of range for " + shape_to_string(a.shape()));
  }
  const std::size_t n = a.rows();
  const std::size_t m = a.cols();
  const std::size_t w = end - begin;
  const auto x = a.data();
  std::vector<double> out(n * w);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x[i * m + begin + j];
  return make_result({n, w}, std::move(out), {a}, [n, m, w, begin](Node& self) {
    auto ga = parent_grad(self, 0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) ga[i * m + begin + j] += self.grad[i * w + j];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape " + shape_to_string(a.shape()) + " to " + shape_to_string(shape));
  }
  return make_result(std::move(shape), a.to_vector(), {a}, [](Node& self) {
    auto ga = parent_grad(self, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, std::optional<int> ignore_index) {
  require_rank2(logits, "cross_entropy");
  const std::size_t n = logits.rows();
  const std::size_t v = logits.cols();
  if (targets.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_to_string(logits.shape()));
  }
  const auto x = logits.data();
  std::vector<double> probs(n * v, 0.0);
  std::vector<char> active(n, 0);
  std::size_t count = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int t = targets[i];
    if (ignore_index && t == *ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw IndexError("cross_entropy: target id " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(v));
    }
    const double* r = x.data() + i * v;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, r[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      probs[i * v + j] = std::exp(r[j] - mx);
      z += probs[i * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) probs[i * v + j] /= z;
    total += (mx + std::log(z)) - r[t];
    active[i] = 1;
    ++count;
  }
  const double loss = count ? total / static_cast<double>(count) : 0.0;
  std::vector<int> saved(targets.begin(), targets.end());
  return make_result({1}, {loss}, {logits},
                     [n, v, count, probs = std::move(probs), active = std::move(active),
                      saved = std::move(saved)](Node& self) {
                       if (count == 0) return;
                       auto g = parent_grad(self, 0);
                       const double s = self.grad[0] / static_cast<double>(count);
                       for (std::size_t i = 0; i < n; ++i) {
                         if (!active[i]) continue;
                         for (std::size_t j = 0; j < v; ++j) g[i * v + j] += s * probs[i * v + j];
                         g[i * v + static_cast<std::size_t>(saved[i])] -= s;
                       }
                     });
}

Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets) {
  const std::size_t n = logits.numel();
  if (targets.size() != n) {
    throw DimensionError("bce_with_logits: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(n) + " logits");
  }
  if (n == 0) throw ContractError("bce_with_logits on empty input");
  const auto x = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    // max(x,0) - x*g + log(1 + exp(-|x|))
    total += std::max(x[i], 0.0) - x[i] * targets[i] + std::log1p(std::exp(-std::abs(x[i])));
  }
  std::vector<double> saved(targets.begin(), targets.end());
  return make_result({1}, {total / static_cast<double>(n)}, {logits}, [n, saved = std::move(saved)](Node& self) {
    auto g = parent_grad(self, 0);
    const auto& x = parent_data(self, 0);
    const double s = self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double p = x[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-x[i])) : std::exp(x[i]) / (1.0 + std::exp(x[i]));
      g[i] += s * (p - saved[i]);
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution and pooling
// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  if (input.rank() != 3 || weight.rank() != 4) {
    throw DimensionError("conv2d expects input (C,H,W) and weight (O,C,KH,KW), got " +
                         shape_to_string(input.shape()) + " and " + shape_to_string(weight.shape()));
  }
  const std::size_t C = input.shape()[0], H = input.shape()[1], W = input.shape()[2];
  const std::size_t O = weight.shape()[0], KH = weight.shape()[2], KW = weight.shape()[3];
  if (weight.shape()[1] != C || bias.numel() != O) {
    throw DimensionError("conv2d: channel mismatch between input " + shape_to_string(input.shape()) +
                         " and weight " + shape_to_string(weight.shape()));
  }
  if (H < KH || W < KW) {
    throw DimensionError("conv2d: input " + shape_to_string(input.shape()) + " smaller than kernel");
  }
  const std::size_t OH = H - KH + 1, OW = W - KW + 1;
  const auto x = input.data();
  const auto w = weight.data();
  const auto b = bias.data();
  std::vector<double> out(O * OH * OW);
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t i = 0; i < OH; ++i)
      for (std::size_t j = 0; j < OW; ++j) {
        double s = b[o];
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t u = 0; u < KH; ++u)
            for (std::size_t v = 0; v < KW; ++v)
              s += w[((o * C + c) * KH + u) * KW + v] * x[(c * H + i + u) * W + j + v];
        out[(o * OH + i) * OW + j] = s;
      }
  return make_result({O, OH, OW}, std::move(out), {input, weight, bias},
                     [=](Node& self) {
                       const auto& x = parent_data(self, 0);
                       const auto& w = parent_data(self, 1);
                       auto gx = parent_grad(self, 0);
                       auto gw = parent_grad(self, 1);
                       auto gb = parent_grad(self, 2);
                       for (std::size_t o = 0; o < O; ++o)
                         for (std::size_t i = 0; i < OH; ++i)
                           for (std::size_t j = 0; j < OW; ++j) {
                             const double g = self.grad[(o * OH + i) * OW + j];
                             if (!gb.empty()) gb[o] += g;
                             if (g == 0.0) continue;
                             for (std::size_t c = 0; c < C; ++c)
                               for (std::size_t u = 0; u < KH; ++u)
                                 for (std::size_t v = 0; v < KW; ++v) {
                                   const std::size_t wi = ((o * C + c) * KH + u) * KW + v;
                                   const std::size_t xi = (c * H + i + u) * W + j + v;
                                   if (!gw.empty()) gw[wi] += g * x[xi];
                                   if (!gx.empty()) gx[xi] += g * w[wi];
                                 }
                           }
                     });
}

Tensor maxpool2d(const Tensor& input, std::size_t window) {
  if (input.rank() != 3) throw DimensionError("maxpool2d expects (C,H,W), got " + shape_to_string(input.shape()));
  if (window == 0) throw ContractError("maxpool2d window must be positive");
  const std::size_t C = input.shape()[0], H = input.shape()[1], W = input.shape()[2];
  const std::size_t OH = H / window, OW = W / window;
  if (OH == 0 || OW == 0) {
    throw DimensionError("maxpool2d: input " + shape_to_string(input.shape()) + " smaller than window");
  }
  const auto x = input.data();
  std::vector<double> out(C * OH * OW);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < OH; ++i)
      for (std::size_t j = 0; j < OW; ++j) {
        std::size_t best = (c * H + i * window) * W + j * window;
        for (std::size_t u = 0; u < window; ++u)
          for (std::size_t v = 0; v < window; ++v) {
            const std::size_t idx = (c * H + i * window + u) * W + j * window + v;
            if (x[idx] > x[best]) best = idx;
          }
        const std::size_t o = (c * OH + i) * OW + j;
        out[o] = x[best];
        argmax[o] = best;
      }
  return make_result({C, OH, OW}, std::move(out), {input}, [argmax = std::move(argmax)](Node& self) {
    auto gx = parent_grad(self, 0);
    for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += self.grad[o];
  });
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            std::span<const Segment> segments, bool causal) {
  require_rank2(q, "multi_head_attention");
  require_same_shape(q, k, "multi_head_attention");
  require_same_shape(q, v, "multi_head_attention");
  const std::size_t n = q.rows();
  const std::size_t d = q.cols();
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("multi_head_attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  std::size_t covered = 0;
  for (const auto& s : segments) {
    if (s.begin != covered) throw ContractError("multi_head_attention: segments must tile the rows in order");
    covered += s.length;
  }
  if (covered != n) throw ContractError("multi_head_attention: segments cover " + std::to_string(covered) +
                                        " of " + std::to_string(n) + " rows");

  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const double* Q = q.data().data();
  const double* K = k.data().data();
  const double* V = v.data().data();
  std::vector<double> out(n * d, 0.0);
  // Attention probabilities, per segment per head, stored row-major (len x len).
  std::vector<std::vector<double>> probs;
  probs.reserve(segments.size() * heads);
  for (const auto& seg : segments) {
    const std::size_t L = seg.length;
    for (std::size_t h = 0; h < heads; ++h) {
      std::vector<double> P(L * L, 0.0);
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < L; ++i) {
        const double* qi = Q + (seg.begin + i) * d + off;
        const std::size_t lim = causal ? i + 1 : L;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < lim; ++j) {
          const double* kj = K + (seg.begin + j) * d + off;
          double s = 0.0;
          for (std::size_t t = 0; t < dh; ++t) s += qi[t] * kj[t];
          s *= inv_sqrt;
          P[i * L + j] = s;
          mx = std::max(mx, s);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < lim; ++j) {
          P[i * L + j] = std::exp(P[i * L + j] - mx);
          z += P[i * L + j];
        }
        double* oi = out.data() + (seg.begin + i) * d + off;
        for (std::size_t j = 0; j < lim; ++j) {
          P[i * L + j] /= z;
          const double p = P[i * L + j];
          const double* vj = V + (seg.begin + j) * d + off;
          for (std::size_t t = 0; t < dh; ++t) oi[t] += p * vj[t];
        }
      }
      probs.push_back(std::move(P));
    }
  }
  std::vector<Segment> segs(segments.begin(), segments.end());
  return make_result({n, d}, std::move(out), {q, k, v},
                     [=, probs = std::move(probs), segs = std::move(segs)](Node& self) {
                       const double* Q = parent_data(self, 0).data();
                       const double* K = parent_data(self, 1).data();
                       const double* V = parent_data(self, 2).data();
                       auto gq = parent_grad(self, 0);
                       auto gk = parent_grad(self, 1);
                       auto gv = parent_grad(self, 2);
                       const double* G = self.grad.data();
                       std::size_t slot = 0;
                       std::vector<double> dS;
                       for (const auto& seg : segs) {
                         const std::size_t L = seg.length;
                         for (std::size_t h = 0; h < heads; ++h, ++slot) {
                           const auto& P = probs[slot];
                           const std::size_t off = h * dh;
                           dS.assign(L * L, 0.0);
                           for (std::size_t i = 0; i < L; ++i) {
                             const std::size_t lim = causal ? i + 1 : L;
                             const double* gi = G + (seg.begin + i) * d + off;
                             double dot = 0.0;
                             for (std::size_t j = 0; j < lim; ++j) {
                               const double* vj = V + (seg.begin + j) * d + off;
                               double dp = 0.0;
                               for (std::size_t t = 0; t < dh; ++t) dp += gi[t] * vj[t];
                               dS[i * L + j] = dp;
                               dot += dp * P[i * L + j];
                               if (!gv.empty()) {
                                 double* dv = gv.data() + (seg.begin + j) * d + off;
                                 const double p = P[i * L + j];
                                 for (std::size_t t = 0; t < dh; ++t) dv[t] += p * gi[t];
                               }
                             }
                             for (std::size_t j = 0; j < lim; ++j) {
                               dS[i * L + j] = P[i * L + j] * (dS[i * L + j] - dot) * inv_sqrt;
                             }
                           }
                           for (std::size_t i = 0; i < L; ++i) {
                             const std::size_t lim = causal ? i + 1 : L;
                             for (std::size_t j = 0; j < lim; ++j) {
                               const double s = dS[i * L + j];
                               if (s == 0.0) continue;
                               if (!gq.empty()) {
                                 double* dq = gq.data() + (seg.begin + i) * d + off;
                                 const double* kj = K + (seg.begin + j) * d + off;
                                 for (std::size_t t = 0; t < dh; ++t) dq[t] += s * kj[t];
                               }
                               if (!gk.empty()) {
                                 double* dk = gk.data() + (seg.begin + j) * d + off;
                                 const double* qi = Q + (seg.begin + i) * d + off;
                                 for (std::size_t t = 0; t < dh; ++t) dk[t] += s * qi[t];
                               }
                             }
                           }
                         }
                       }
                     });
}

}  // namespace msp
