// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

// Minimal reverse-mode automatic differentiation over dense row-major
// tensors. Every op records its inputs and a backward rule on the result
// node; backward() sorts the reachable nodes topologically and replays the
// rules in reverse. Only the operations the transformer needs are provided.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace ssan {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // sized like data iff requires_grad
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into inputs' grads.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return inputs.empty(); }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : Tensor(shape, std::vector<T>(checked_numel(shape), T{0}), requires_grad) {}

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (values.size() != checked_numel(shape)) {
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(values);
    set_requires_grad(requires_grad);
  }

  static Tensor filled(Shape shape, T value, bool requires_grad = false) {
    const std::size_t n = checked_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  /// Wraps a freshly computed node; used by op implementations.
  static Tensor from_node(std::shared_ptr<Node<T>> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  const char* op_name() const { return node_->op; }

  void set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    if (flag) {
      node_->grad.assign(node_->data.size(), T{0});
    } else {
      node_->grad.clear();
    }
  }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  std::span<T> grad() { return node_->grad; }
  std::span<const T> grad() const { return node_->grad; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T{0}); }

  /// Copy of the values with no graph history.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  static std::size_t checked_numel(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one extent");
    for (std::size_t e : shape) {
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
    return shape_numel(shape);
  }

  std::shared_ptr<Node<T>> node_;
};

/// Topologically ordered view of the operations reachable from a root.
template <typename T>
class ComputationGraph {
 public:
  explicit ComputationGraph(const Tensor<T>& root) {
    if (!root.defined()) throw ContractError("graph root is undefined");
    std::unordered_set<const Node<T>*> visited;
    // Iterative post-order DFS; a node is emitted after all of its inputs.
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node<T>* child = node->inputs[next++].get();
        if (child->requires_grad && visited.insert(child).second) {
          stack.emplace_back(child, 0);
        }
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  /// Inputs precede the operations that consume them.
  const std::vector<Node<T>*>& order() const { return order_; }

  void backward() {
    Node<T>* root = order_.back();
    if (root->data.size() != 1) {
      throw ContractError("backward() requires a scalar loss, got shape " + shape_str(root->shape));
    }
    if (!root->requires_grad) throw ContractError("backward() on a tensor that does not require grad");
    for (Node<T>* node : order_) {
      if (!node->is_leaf()) std::fill(node->grad.begin(), node->grad.end(), T{0});
    }
    root->grad[0] += T{1};
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      if ((*it)->backward) (*it)->backward(**it);
    }
  }

 private:
  std::vector<Node<T>*> order_;
};

template <typename T>
void backward(const Tensor<T>& loss) {
  ComputationGraph<T>(loss).backward();
}

/// Name of the first op in topological order whose output holds a NaN or
/// Inf, or an empty string when every value is finite.
template <typename T>
std::string first_nonfinite_op(const Tensor<T>& root) {
  std::unordered_set<const Node<T>*> visited;
  std::vector<const Node<T>*> order;
  std::function<void(const Node<T>*)> visit = [&](const Node<T>* n) {
    if (!visited.insert(n).second) return;
    for (const auto& in : n->inputs) visit(in.get());
    order.push_back(n);
  };
  visit(root.node().get());
  for (const Node<T>* n : order) {
    for (T v : n->data) {
      if (!std::isfinite(v)) return n->op;
    }
  }
  return {};
}

/// Inverted dropout state. Inactive unless `training` is set and rate > 0.
struct DropoutContext {
  bool training = false;
  double rate = 0.0;
  std::mt19937_64 rng{0};

  DropoutContext() = default;
  DropoutContext(double dropout_rate, std::uint64_t seed)
      : training(true), rate(dropout_rate), rng(seed) {}

  bool active() const { return training && rate > 0.0; }
};

namespace detail {

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, const char* op,
                      std::vector<std::shared_ptr<Node<T>>> inputs,
                      std::function<void(Node<T>&)> rule) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->op = op;
  bool needs_grad = false;
  if (grad_mode()) {
    for (const auto& in : inputs) needs_grad = needs_grad || in->requires_grad;
  }
  if (needs_grad) {
    node->requires_grad = true;
    node->grad.assign(node->data.size(), T{0});
    node->inputs = std::move(inputs);
    node->backward = std::move(rule);
  }
  return Tensor<T>::from_node(std::move(node));
}

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* __restrict a, const T* __restrict b,
             T* __restrict c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* __restrict crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  // transpose B once so the inner loop is a contiguous row update
  thread_local std::vector<T> bt;
  bt.resize(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(m, k, n, a, bt.data(), c);
}

// C[m,n] += A[k,m]^T * B[k,n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* __restrict a, const T* __restrict b,
             T* __restrict c) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* __restrict brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* __restrict crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

}  // namespace detail

/// a[..., m, k] x b[k, n] -> [..., m, n]; leading axes of `a` are flattened.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() != 2 || a.shape().back() != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t k = b.dim(0), n = b.dim(1), m = a.numel() / k;
  std::vector<T> out(m * n, T{0});
  detail::gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data());
  Shape shape = a.shape();
  shape.back() = n;
  return detail::make_result<T>(std::move(shape), std::move(out), "matmul", {a.node(), b.node()},
                                [m, k, n](Node<T>& self) {
                                  Node<T>& na = *self.inputs[0];
                                  Node<T>& nb = *self.inputs[1];
                                  if (na.requires_grad)
                                    detail::gemm_nt(m, n, k, self.grad.data(), nb.data.data(),
                                                    na.grad.data());
                                  if (nb.requires_grad)
                                    detail::gemm_tn(k, m, n, na.data.data(), self.grad.data(),
                                                    nb.grad.data());
                                });
}

/// a[..., k] x b[n, k]^T -> [..., n]. Used for x * W^T projections.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (b.rank() != 2 || a.shape().back() != b.dim(1)) {
    throw DimensionError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + "^T");
  }
  const std::size_t k = b.dim(1), n = b.dim(0), m = a.numel() / k;
  std::vector<T> out(m * n, T{0});
  detail::gemm_nt(m, k, n, a.data().data(), b.data().data(), out.data());
  Shape shape = a.shape();
  shape.back() = n;
  return detail::make_result<T>(std::move(shape), std::move(out), "matmul_nt",
                                {a.node(), b.node()}, [m, k, n](Node<T>& self) {
                                  Node<T>& na = *self.inputs[0];
                                  Node<T>& nb = *self.inputs[1];
                                  if (na.requires_grad)
                                    detail::gemm_nn(m, n, k, self.grad.data(), nb.data.data(),
                                                    na.grad.data());
                                  if (nb.requires_grad)
                                    detail::gemm_tn(n, m, k, self.grad.data(), na.data.data(),
                                                    nb.grad.data());
                                });
}

/// Batched product over all leading axes: a[..., m, k] x b[..., k, n], or
/// b[..., n, k]^T when `transpose_b` is set.
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  const std::size_t r = a.rank();
  if (r < 3 || b.rank() != r ||
      !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
    throw DimensionError("bmm: incompatible batch shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(r - 2), k = a.dim(r - 1);
  const std::size_t bk = transpose_b ? b.dim(r - 1) : b.dim(r - 2);
  const std::size_t n = transpose_b ? b.dim(r - 2) : b.dim(r - 1);
  if (bk != k) {
    throw DimensionError("bmm: inner extents differ " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t batch = a.numel() / (m * k);
  std::vector<T> out(batch * m * n, T{0});
  for (std::size_t i = 0; i < batch; ++i) {
    const T* pa = a.data().data() + i * m * k;
    const T* pb = b.data().data() + i * k * n;
    T* pc = out.data() + i * m * n;
    if (transpose_b) {
      detail::gemm_nt(m, k, n, pa, pb, pc);
    } else {
      detail::gemm_nn(m, k, n, pa, pb, pc);
    }
  }
  Shape shape = a.shape();
  shape[r - 1] = n;
  return detail::make_result<T>(
      std::move(shape), std::move(out), "bmm", {a.node(), b.node()},
      [batch, m, k, n, transpose_b](Node<T>& self) {
        Node<T>& na = *self.inputs[0];
        Node<T>& nb = *self.inputs[1];
        for (std::size_t i = 0; i < batch; ++i) {
          const T* g = self.grad.data() + i * m * n;
          const T* pa = na.data.data() + i * m * k;
          const T* pb = nb.data.data() + i * k * n;
          if (na.requires_grad) {
            T* ga = na.grad.data() + i * m * k;
            if (transpose_b) {
              detail::gemm_nn(m, n, k, g, pb, ga);
            } else {
              detail::gemm_nt(m, n, k, g, pb, ga);
            }
          }
          if (nb.requires_grad) {
            T* gb = nb.grad.data() + i * k * n;
            if (transpose_b) {
              detail::gemm_tn(n, m, k, g, pa, gb);
            } else {
              detail::gemm_tn(k, m, n, pa, g, gb);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_result<T>(a.shape(), std::move(out), "add", {a.node(), b.node()},
                                [](Node<T>& self) {
                                  for (auto& in : self.inputs) {
                                    if (!in->requires_grad) continue;
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      in->grad[i] += self.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_result<T>(a.shape(), std::move(out), "mul", {a.node(), b.node()},
                                [](Node<T>& self) {
                                  Node<T>& na = *self.inputs[0];
                                  Node<T>& nb = *self.inputs[1];
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                    if (na.requires_grad) na.grad[i] += self.grad[i] * nb.data[i];
                                    if (nb.requires_grad) nb.grad[i] += self.grad[i] * na.data[i];
                                  }
                                });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return detail::make_result<T>(a.shape(), std::move(out), "scale", {a.node()},
                                [factor](Node<T>& self) {
                                  Node<T>& na = *self.inputs[0];
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                    na.grad[i] += self.grad[i] * factor;
                                });
}

/// x[..., n] + bias[n], broadcast over the leading axes.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t n = x.shape().back();
  if (bias.rank() != 1 || bias.dim(0) != n) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " vs input " +
                         shape_str(x.shape()));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias.data()[i % n];
  return detail::make_result<T>(x.shape(), std::move(out), "add_bias", {x.node(), bias.node()},
                                [n](Node<T>& self) {
                                  Node<T>& nx = *self.inputs[0];
                                  Node<T>& nb = *self.inputs[1];
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                    if (nx.requires_grad) nx.grad[i] += self.grad[i];
                                    if (nb.requires_grad) nb.grad[i % n] += self.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > T{0} ? x.data()[i] : T{0};
  return detail::make_result<T>(x.shape(), std::move(out), "relu", {x.node()},
                                [](Node<T>& self) {
                                  Node<T>& nx = *self.inputs[0];
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                    if (nx.data[i] > T{0}) nx.grad[i] += self.grad[i];
                                });
}

/// Softmax over the last axis, stabilized by subtracting the slice maximum.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * n;
    T* o = out.data() + r * n;
    const T peak = *std::max_element(in, in + n);
    T total{0};
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - peak);
      total += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= total;
  }
  return detail::make_result<T>(x.shape(), std::move(out), "softmax", {x.node()},
                                [n, rows](Node<T>& self) {
                                  Node<T>& nx = *self.inputs[0];
                                  for (std::size_t r = 0; r < rows; ++r) {
                                    const T* y = self.data.data() + r * n;
                                    const T* g = self.grad.data() + r * n;
                                    T dot{0};
                                    for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
                                    T* gx = nx.grad.data() + r * n;
                                    for (std::size_t j = 0; j < n; ++j) gx[j] += y[j] * (g[j] - dot);
                                  }
                                });
}

/// Normalizes each last-axis slice to zero mean and unit variance, then
/// applies gain and bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-6)) {
  const std::size_t n = x.shape().back();
  if (gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != n || bias.dim(0) != n) {
    throw DimensionError("layer_norm: gain/bias must have extent " + std::to_string(n));
  }
  const std::size_t rows = x.numel() / n;
  std::vector<T> out(x.numel());
  auto normalized = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * n;
    T mean{0};
    for (std::size_t j = 0; j < n; ++j) mean += in[j];
    mean /= static_cast<T>(n);
    T var{0};
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<T>(n);
    const T rstd = T{1} / std::sqrt(var + eps);
    (*inv_std)[r] = rstd;
    for (std::size_t j = 0; j < n; ++j) {
      const T xhat = (in[j] - mean) * rstd;
      (*normalized)[r * n + j] = xhat;
      out[r * n + j] = gain.data()[j] * xhat + bias.data()[j];
    }
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), "layer_norm", {x.node(), gain.node(), bias.node()},
      [n, rows, normalized, inv_std](Node<T>& self) {
        Node<T>& nx = *self.inputs[0];
        Node<T>& ng = *self.inputs[1];
        Node<T>& nb = *self.inputs[2];
        std::vector<T> dxhat(n);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* g = self.grad.data() + r * n;
          const T* xhat = normalized->data() + r * n;
          T mean_d{0}, mean_dx{0};
          for (std::size_t j = 0; j < n; ++j) {
            if (ng.requires_grad) ng.grad[j] += g[j] * xhat[j];
            if (nb.requires_grad) nb.grad[j] += g[j];
            dxhat[j] = g[j] * ng.data[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xhat[j];
          }
          if (!nx.requires_grad) continue;
          mean_d /= static_cast<T>(n);
          mean_dx /= static_cast<T>(n);
          T* gx = nx.grad.data() + r * n;
          for (std::size_t j = 0; j < n; ++j)
            gx[j] += (*inv_std)[r] * (dxhat[j] - mean_d - xhat[j] * mean_dx);
        }
      });
}

/// Inverted dropout: kept entries are scaled by 1/(1-rate). Identity when
/// the context is inactive.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, DropoutContext& ctx) {
  if (!ctx.active()) return x;
  auto mask = std::make_shared<std::vector<T>>(x.numel());
  std::bernoulli_distribution keep(1.0 - ctx.rate);
  const T kept_scale = static_cast<T>(1.0 / (1.0 - ctx.rate));
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = keep(ctx.rng) ? kept_scale : T{0};
    out[i] = x.data()[i] * (*mask)[i];
  }
  return detail::make_result<T>(x.shape(), std::move(out), "dropout", {x.node()},
                                [mask](Node<T>& self) {
                                  Node<T>& nx = *self.inputs[0];
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                    nx.grad[i] += self.grad[i] * (*mask)[i];
                                });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return detail::make_result<T>(std::move(shape), std::move(out), "reshape", {x.node()},
                                [](Node<T>& self) {
                                  Node<T>& nx = *self.inputs[0];
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                    nx.grad[i] += self.grad[i];
                                });
}

/// [a, b, c, d] -> [a, c, b, d]; moves heads next to the batch axis.
template <typename T>
Tensor<T> swap_axes_12(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("swap_axes_12 expects rank 4, got " + shape_str(x.shape()));
  const std::size_t a = x.dim(0), b = x.dim(1), c = x.dim(2), d = x.dim(3);
  auto src_index = [=](std::size_t i, std::size_t j, std::size_t k) {
    // output [i, k, j] reads input [i, j, k]
    return ((i * b + j) * c + k) * d;
  };
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < a; ++i)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t j = 0; j < b; ++j) {
        const T* src = x.data().data() + src_index(i, j, k);
        std::copy(src, src + d, out.data() + ((i * c + k) * b + j) * d);
      }
  return detail::make_result<T>(Shape{a, c, b, d}, std::move(out), "swap_axes_12", {x.node()},
                                [=](Node<T>& self) {
                                  Node<T>& nx = *self.inputs[0];
                                  for (std::size_t i = 0; i < a; ++i)
                                    for (std::size_t k = 0; k < c; ++k)
                                      for (std::size_t j = 0; j < b; ++j) {
                                        const T* g = self.grad.data() + ((i * c + k) * b + j) * d;
                                        T* dst = nx.grad.data() + src_index(i, j, k);
                                        for (std::size_t e = 0; e < d; ++e) dst[e] += g[e];
                                      }
                                });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total{0};
  for (T v : x.data()) total += v;
  return detail::make_result<T>(Shape{1}, std::vector<T>{total}, "sum", {x.node()},
                                [](Node<T>& self) {
                                  Node<T>& nx = *self.inputs[0];
                                  for (T& g : nx.grad) g += self.grad[0];
                                });
}

/// Gathers rows of `table` [V, d] for each id; output shape is
/// `leading` followed by d.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids, Shape leading) {
  if (table.rank() != 2) throw DimensionError("embedding table must be rank 2");
  if (shape_numel(leading) != ids.size()) throw DimensionError("embedding: id count mismatch");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw ContractError("token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                          std::to_string(vocab));
    }
    const T* row = table.data().data() + static_cast<std::size_t>(ids[i]) * d;
    std::copy(row, row + d, out.data() + i * d);
  }
  leading.push_back(d);
  return detail::make_result<T>(std::move(leading), std::move(out), "embedding", {table.node()},
                                [ids = std::vector<int>(ids.begin(), ids.end()), d](Node<T>& self) {
                                  Node<T>& nt = *self.inputs[0];
                                  for (std::size_t i = 0; i < ids.size(); ++i) {
                                    T* dst = nt.grad.data() + static_cast<std::size_t>(ids[i]) * d;
                                    const T* g = self.grad.data() + i * d;
                                    for (std::size_t e = 0; e < d; ++e) dst[e] += g[e];
                                  }
                                });
}

}  // namespace ssan
