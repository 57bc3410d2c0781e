#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace adaprune {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

// Multiply-accumulate instrumentation. A matmul of [m x k] by [k x n] adds
// 2*m*k*n FLOPs; an activation adds one FLOP per element. Everything else
// (bias adds, norms, softmax) is uncounted. Counting is enabled per thread
// with a FlopCountScope and never changes numerical results.
struct FlopCounter {
  std::uint64_t matmul = 0;
  std::uint64_t activation = 0;
  std::uint64_t total() const { return matmul + activation; }
};

namespace detail {

inline FlopCounter*& active_counter() {
  thread_local FlopCounter* counter = nullptr;
  return counter;
}

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Propagates this node's grad into its parents' grads.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return parents.empty(); }
  std::vector<double>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

class FlopCountScope {
 public:
  explicit FlopCountScope(FlopCounter& c) : prev_(detail::active_counter()) {
    detail::active_counter() = &c;
  }
  ~FlopCountScope() { detail::active_counter() = prev_; }
  FlopCountScope(const FlopCountScope&) = delete;
  FlopCountScope& operator=(const FlopCountScope&) = delete;

 private:
  FlopCounter* prev_;
};

/// Dense row-major tensor of doubles with reverse-mode gradient support.
///
/// A Tensor is a cheap handle; copies share the underlying node. Values are
/// immutable once produced by an operation; only leaves may be updated in
/// place (by optimizers) and only grads are written during backward().
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape_size(shape) != data.size())
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto sz = shape_size(shape);
    return from(std::move(shape), std::vector<double>(sz, 0.0), requires_grad);
  }
  static Tensor filled(Shape shape, double v, bool requires_grad = false) {
    const auto sz = shape_size(shape);
    return from(std::move(shape), std::vector<double>(sz, v), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return from({}, {v}, requires_grad);
  }
  static Tensor vector(std::vector<double> v, bool requires_grad = false) {
    const auto n = v.size();
    return from({n}, std::move(v), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rows() const { return node_->shape.at(0); }
  std::size_t cols() const { return node_->shape.at(1); }

  std::span<const double> data() const { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }
  std::span<double> mutable_grad() { return node_->grad; }

  /// In-place access for leaf updates (optimizers, test perturbations).
  std::span<double> mutable_leaf_data() {
    if (!node_->is_leaf()) throw std::logic_error("mutable access to a non-leaf tensor");
    return node_->value;
  }

  detail::Node& node() const { return *node_; }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline ConstMap cmap(const std::vector<double>& v, std::size_t r, std::size_t c) {
  return ConstMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline MutMap mmap(std::vector<double>& v, std::size_t r, std::size_t c) {
  return MutMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

// Builds the result node. The graph edge and backward closure are kept
// only when some input requires a gradient.
inline Tensor make_result(Shape shape, std::vector<double> value,
                          std::vector<std::shared_ptr<Node>> parents,
                          std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  const bool rg = std::any_of(parents.begin(), parents.end(),
                              [](const auto& p) { return p->requires_grad; });
  if (rg) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

inline void require_rank(const Tensor& t, std::size_t r, const char* op) {
  if (t.rank() != r)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                     shape_str(t.shape()));
}

inline void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

inline void count_matmul(std::size_t m, std::size_t k, std::size_t n) {
  if (auto* c = active_counter()) c->matmul += 2ULL * m * k * n;
}

template <typename F>
Tensor unary(const Tensor& x, F&& f_and_df) {
  const auto& xv = x.values();
  std::vector<double> out(xv.size()), d(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    auto [y, dy] = f_and_df(xv[i]);
    out[i] = y;
    d[i] = dy;
  }
  return make_result(x.shape(), std::move(out), {x.node_ptr()},
                     [d = std::move(d)](Node& self) {
                       auto& g = self.parents[0]->ensure_grad();
                       for (std::size_t i = 0; i < d.size(); ++i) g[i] += self.grad[i] * d[i];
                     });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// [m x k] * [k x n] -> [m x n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const auto m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw ShapeError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  detail::count_matmul(m, k, n);
  std::vector<double> out(m * n);
  detail::mmap(out, m, n).noalias() = detail::cmap(a.values(), m, k) * detail::cmap(b.values(), k, n);
  return detail::make_result({m, n}, std::move(out), {a.node_ptr(), b.node_ptr()},
                             [m, k, n](detail::Node& self) {
                               auto& pa = *self.parents[0];
                               auto& pb = *self.parents[1];
                               auto g = detail::cmap(self.grad, m, n);
                               if (pa.requires_grad)
                                 detail::mmap(pa.ensure_grad(), m, k).noalias() +=
                                     g * detail::cmap(pb.value, k, n).transpose();
                               if (pb.requires_grad)
                                 detail::mmap(pb.ensure_grad(), k, n).noalias() +=
                                     detail::cmap(pa.value, m, k).transpose() * g;
                             });
}

/// [m x k] * [n x k]^T -> [m x n]
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul_nt");
  detail::require_rank(b, 2, "matmul_nt");
  const auto m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k)
    throw ShapeError("matmul_nt: inner dimensions disagree " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  detail::count_matmul(m, k, n);
  std::vector<double> out(m * n);
  detail::mmap(out, m, n).noalias() =
      detail::cmap(a.values(), m, k) * detail::cmap(b.values(), n, k).transpose();
  return detail::make_result({m, n}, std::move(out), {a.node_ptr(), b.node_ptr()},
                             [m, k, n](detail::Node& self) {
                               auto& pa = *self.parents[0];
                               auto& pb = *self.parents[1];
                               auto g = detail::cmap(self.grad, m, n);
                               if (pa.requires_grad)
                                 detail::mmap(pa.ensure_grad(), m, k).noalias() +=
                                     g * detail::cmap(pb.value, n, k);
                               if (pb.requires_grad)
                                 detail::mmap(pb.ensure_grad(), n, k).noalias() +=
                                     g.transpose() * detail::cmap(pa.value, m, k);
                             });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result(a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()},
                             [](detail::Node& self) {
                               for (auto& p : self.parents) {
                                 if (!p->requires_grad) continue;
                                 auto& g = p->ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                               }
                             });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result(a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()},
                             [](detail::Node& self) {
                               auto& pa = *self.parents[0];
                               auto& pb = *self.parents[1];
                               if (pa.requires_grad) {
                                 auto& g = pa.ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                               }
                               if (pb.requires_grad) {
                                 auto& g = pb.ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
                               }
                             });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result(a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()},
                             [](detail::Node& self) {
                               auto& pa = *self.parents[0];
                               auto& pb = *self.parents[1];
                               if (pa.requires_grad) {
                                 auto& g = pa.ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i)
                                   g[i] += self.grad[i] * pb.value[i];
                               }
                               if (pb.requires_grad) {
                                 auto& g = pb.ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i)
                                   g[i] += self.grad[i] * pa.value[i];
                               }
                             });
}

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary(x, [c](double v) { return std::pair{v * c, c}; });
}

inline Tensor add_constant(const Tensor& x, double c) {
  return detail::unary(x, [c](double v) { return std::pair{v + c, 1.0}; });
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

inline Tensor exp(const Tensor& x) {
  return detail::unary(x, [](double v) {
    const double e = std::exp(v);
    return std::pair{e, e};
  });
}

inline Tensor log(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::pair{std::log(v), 1.0 / v}; });
}

inline Tensor sqrt(const Tensor& x) {
  return detail::unary(x, [](double v) {
    const double s = std::sqrt(v);
    return std::pair{s, 0.5 / s};
  });
}

inline Tensor square(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::pair{v * v, 2.0 * v}; });
}

inline double sigmoid_value(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(x, [](double v) {
    const double s = sigmoid_value(v);
    return std::pair{s, s * (1.0 - s)};
  });
}

inline double gelu_value(double v) { return 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2)); }

/// Exact GeLU, x * Phi(x).
inline Tensor gelu(const Tensor& x) {
  if (auto* c = detail::active_counter()) c->activation += x.size();
  return detail::unary(x, [](double v) {
    const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
    const double pdf = std::exp(-0.5 * v * v) * (0.5 * M_2_SQRTPI * M_SQRT1_2);
    return std::pair{v * cdf, cdf + v * pdf};
  });
}

/// Forward value rounded to {0,1} at 0.5; gradient passed through unchanged.
inline Tensor straight_through(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::pair{v > 0.5 ? 1.0 : 0.0, 1.0}; });
}

/// Same values, cut from the graph.
inline Tensor detach(const Tensor& x) { return Tensor::from(x.shape(), x.values()); }

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  return detail::make_result(std::move(shape), x.values(), {x.node_ptr()},
                             [](detail::Node& self) {
                               auto& g = self.parents[0]->ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                             });
}

// ---------------------------------------------------------------------------
// Broadcasting helpers (only the forms the model needs)

/// x[m x n] + b[n] on every row.
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
  detail::require_rank(x, 2, "add_bias");
  const auto m = x.rows(), n = x.cols();
  if (b.size() != n)
    throw ShapeError("add_bias: bias " + shape_str(b.shape()) + " vs input " + shape_str(x.shape()));
  std::vector<double> out(x.values());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b[j];
  return detail::make_result({m, n}, std::move(out), {x.node_ptr(), b.node_ptr()},
                             [m, n](detail::Node& self) {
                               auto& px = *self.parents[0];
                               auto& pb = *self.parents[1];
                               if (px.requires_grad) {
                                 auto& g = px.ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                               }
                               if (pb.requires_grad) {
                                 auto& g = pb.ensure_grad();
                                 for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
                               }
                             });
}

/// Row i of x[m x n] scaled by v[i].
inline Tensor mul_rows(const Tensor& x, const Tensor& v) {
  detail::require_rank(x, 2, "mul_rows");
  const auto m = x.rows(), n = x.cols();
  if (v.size() != m)
    throw ShapeError("mul_rows: gate " + shape_str(v.shape()) + " vs input " + shape_str(x.shape()));
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] * v[i];
  return detail::make_result({m, n}, std::move(out), {x.node_ptr(), v.node_ptr()},
                             [m, n](detail::Node& self) {
                               auto& px = *self.parents[0];
                               auto& pv = *self.parents[1];
                               if (px.requires_grad) {
                                 auto& g = px.ensure_grad();
                                 for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < n; ++j)
                                     g[i * n + j] += self.grad[i * n + j] * pv.value[i];
                               }
                               if (pv.requires_grad) {
                                 auto& g = pv.ensure_grad();
                                 for (std::size_t i = 0; i < m; ++i) {
                                   double acc = 0.0;
                                   for (std::size_t j = 0; j < n; ++j)
                                     acc += self.grad[i * n + j] * px.value[i * n + j];
                                   g[i] += acc;
                                 }
                               }
                             });
}

/// x scaled by the single element v[index].
inline Tensor mul_element(const Tensor& x, const Tensor& v, std::size_t index) {
  if (index >= v.size()) throw ShapeError("mul_element: index out of range");
  const double s = v[index];
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
  return detail::make_result(x.shape(), std::move(out), {x.node_ptr(), v.node_ptr()},
                             [index](detail::Node& self) {
                               auto& px = *self.parents[0];
                               auto& pv = *self.parents[1];
                               const double s = pv.value[index];
                               if (px.requires_grad) {
                                 auto& g = px.ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
                               }
                               if (pv.requires_grad) {
                                 double acc = 0.0;
                                 for (std::size_t i = 0; i < self.grad.size(); ++i)
                                   acc += self.grad[i] * px.value[i];
                                 pv.ensure_grad()[index] += acc;
                               }
                             });
}

/// x - s for a single-element s.
inline Tensor sub_scalar(const Tensor& x, const Tensor& s) {
  if (s.size() != 1) throw ShapeError("sub_scalar: expected one-element tensor");
  const double c = s[0];
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - c;
  return detail::make_result(x.shape(), std::move(out), {x.node_ptr(), s.node_ptr()},
                             [](detail::Node& self) {
                               auto& px = *self.parents[0];
                               auto& ps = *self.parents[1];
                               if (px.requires_grad) {
                                 auto& g = px.ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                               }
                               if (ps.requires_grad) {
                                 double acc = 0.0;
                                 for (double v : self.grad) acc += v;
                                 ps.ensure_grad()[0] -= acc;
                               }
                             });
}

/// x / s for a single-element s.
inline Tensor div_scalar(const Tensor& x, const Tensor& s) {
  if (s.size() != 1) throw ShapeError("div_scalar: expected one-element tensor");
  const double c = s[0];
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / c;
  return detail::make_result(x.shape(), std::move(out), {x.node_ptr(), s.node_ptr()},
                             [](detail::Node& self) {
                               auto& px = *self.parents[0];
                               auto& ps = *self.parents[1];
                               const double c = ps.value[0];
                               if (px.requires_grad) {
                                 auto& g = px.ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / c;
                               }
                               if (ps.requires_grad) {
                                 double acc = 0.0;
                                 for (std::size_t i = 0; i < self.grad.size(); ++i)
                                   acc += self.grad[i] * px.value[i];
                                 ps.ensure_grad()[0] -= acc / (c * c);
                               }
                             });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  return detail::make_result({}, {acc}, {x.node_ptr()}, [](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

inline Tensor dot(const Tensor& a, const Tensor& b) { return sum(mul(a, b)); }

/// Single element of x as a scalar.
inline Tensor element(const Tensor& x, std::size_t index) {
  if (index >= x.size()) throw ShapeError("element: index out of range");
  return detail::make_result({}, {x[index]}, {x.node_ptr()}, [index](detail::Node& self) {
    self.parents[0]->ensure_grad()[index] += self.grad[0];
  });
}

// ---------------------------------------------------------------------------
// Slicing and assembly

inline Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
  detail::require_rank(x, 2, "slice_cols");
  const auto m = x.rows(), n = x.cols();
  if (c0 > c1 || c1 > n) throw ShapeError("slice_cols: bad range for " + shape_str(x.shape()));
  const auto w = c1 - c0;
  std::vector<double> out(m * w);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(x.values().begin() + static_cast<std::ptrdiff_t>(i * n + c0), w,
                out.begin() + static_cast<std::ptrdiff_t>(i * w));
  return detail::make_result({m, w}, std::move(out), {x.node_ptr()},
                             [m, n, c0, w](detail::Node& self) {
                               auto& g = self.parents[0]->ensure_grad();
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < w; ++j)
                                   g[i * n + c0 + j] += self.grad[i * w + j];
                             });
}

inline Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1) {
  detail::require_rank(x, 2, "slice_rows");
  const auto n = x.cols();
  if (r0 > r1 || r1 > x.rows()) throw ShapeError("slice_rows: bad range for " + shape_str(x.shape()));
  std::vector<double> out(x.values().begin() + static_cast<std::ptrdiff_t>(r0 * n),
                          x.values().begin() + static_cast<std::ptrdiff_t>(r1 * n));
  return detail::make_result({r1 - r0, n}, std::move(out), {x.node_ptr()},
                             [r0, n](detail::Node& self) {
                               auto& g = self.parents[0]->ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                 g[r0 * n + i] += self.grad[i];
                             });
}

inline Tensor row(const Tensor& x, std::size_t r) { return slice_rows(x, r, r + 1); }

/// Rows of x at the given indices, in order.
inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& idx) {
  detail::require_rank(x, 2, "gather_rows");
  const auto m = x.rows(), n = x.cols();
  std::vector<double> out(idx.size() * n);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= m) throw ShapeError("gather_rows: index out of range");
    std::copy_n(x.values().begin() + static_cast<std::ptrdiff_t>(idx[r] * n), n,
                out.begin() + static_cast<std::ptrdiff_t>(r * n));
  }
  return detail::make_result({idx.size(), n}, std::move(out), {x.node_ptr()},
                             [idx, n](detail::Node& self) {
                               auto& g = self.parents[0]->ensure_grad();
                               for (std::size_t r = 0; r < idx.size(); ++r)
                                 for (std::size_t j = 0; j < n; ++j)
                                   g[idx[r] * n + j] += self.grad[r * n + j];
                             });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const auto m = parts[0].rows();
  std::vector<std::size_t> widths;
  std::size_t n = 0;
  for (const auto& p : parts) {
    detail::require_rank(p, 2, "concat_cols");
    if (p.rows() != m) throw ShapeError("concat_cols: row count mismatch");
    widths.push_back(p.cols());
    n += p.cols();
  }
  std::vector<double> out(m * n);
  std::vector<std::shared_ptr<detail::Node>> parents;
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto w = widths[k];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * n + off + j] = parts[k][i * w + j];
    off += w;
    parents.push_back(parts[k].node_ptr());
  }
  return detail::make_result({m, n}, std::move(out), std::move(parents),
                             [m, n, widths](detail::Node& self) {
                               std::size_t off = 0;
                               for (std::size_t k = 0; k < widths.size(); ++k) {
                                 auto& p = *self.parents[k];
                                 const auto w = widths[k];
                                 if (p.requires_grad) {
                                   auto& g = p.ensure_grad();
                                   for (std::size_t i = 0; i < m; ++i)
                                     for (std::size_t j = 0; j < w; ++j)
                                       g[i * w + j] += self.grad[i * n + off + j];
                                 }
                                 off += w;
                               }
                             });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const auto n = parts[0].cols();
  std::size_t m = 0;
  std::vector<double> out;
  std::vector<std::shared_ptr<detail::Node>> parents;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    detail::require_rank(p, 2, "concat_rows");
    if (p.cols() != n) throw ShapeError("concat_rows: column count mismatch");
    m += p.rows();
    out.insert(out.end(), p.values().begin(), p.values().end());
    parents.push_back(p.node_ptr());
    sizes.push_back(p.size());
  }
  return detail::make_result({m, n}, std::move(out), std::move(parents),
                             [sizes](detail::Node& self) {
                               std::size_t off = 0;
                               for (std::size_t k = 0; k < sizes.size(); ++k) {
                                 auto& p = *self.parents[k];
                                 if (p.requires_grad) {
                                   auto& g = p.ensure_grad();
                                   for (std::size_t i = 0; i < sizes[k]; ++i) g[i] += self.grad[off + i];
                                 }
                                 off += sizes[k];
                               }
                             });
}

// ---------------------------------------------------------------------------
// Normalization

/// Row-wise softmax of x[m x n]. With a key mask v[n], each numerator
/// exp(x_ij - max_i) is multiplied by v_j before renormalization, which at
/// binary masks is exactly softmax over the surviving keys.
inline Tensor softmax_rows(const Tensor& x, const Tensor* key_mask = nullptr) {
  detail::require_rank(x, 2, "softmax_rows");
  const auto m = x.rows(), n = x.cols();
  if (key_mask && key_mask->size() != n)
    throw ShapeError("softmax_rows: mask " + shape_str(key_mask->shape()) + " vs scores " +
                     shape_str(x.shape()));
  std::vector<double> out(m * n);
  // q holds exp(x - max) / Z, the per-key sensitivity used for mask grads.
  std::vector<double> q(key_mask ? m * n : 0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xr = x.values().data() + i * n;
    double mx = xr[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
    double z = 0.0;
    double* o = out.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double e = std::exp(xr[j] - mx);
      o[j] = key_mask ? e * (*key_mask)[j] : e;
      if (key_mask) q[i * n + j] = e;
      z += o[j];
    }
    if (!(z > 0.0))
      throw std::invalid_argument("softmax_rows: every key is masked out in row " + std::to_string(i));
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
    if (key_mask)
      for (std::size_t j = 0; j < n; ++j) q[i * n + j] /= z;
  }
  std::vector<std::shared_ptr<detail::Node>> parents{x.node_ptr()};
  if (key_mask) parents.push_back(key_mask->node_ptr());
  return detail::make_result({m, n}, std::move(out), std::move(parents),
                             [m, n, q = std::move(q)](detail::Node& self) {
                               auto& px = *self.parents[0];
                               const bool masked = self.parents.size() > 1;
                               std::vector<double>* gx = px.requires_grad ? &px.ensure_grad() : nullptr;
                               std::vector<double>* gm = nullptr;
                               if (masked && self.parents[1]->requires_grad)
                                 gm = &self.parents[1]->ensure_grad();
                               for (std::size_t i = 0; i < m; ++i) {
                                 const double* p = self.value.data() + i * n;
                                 const double* g = self.grad.data() + i * n;
                                 double dotgp = 0.0;
                                 for (std::size_t j = 0; j < n; ++j) dotgp += g[j] * p[j];
                                 if (gx)
                                   for (std::size_t j = 0; j < n; ++j) (*gx)[i * n + j] += p[j] * (g[j] - dotgp);
                                 if (gm)
                                   for (std::size_t j = 0; j < n; ++j)
                                     (*gm)[j] += q[i * n + j] * (g[j] - dotgp);
                               }
                             });
}

/// Log-softmax over all elements of a vector-like tensor.
inline Tensor log_softmax(const Tensor& x) {
  const auto n = x.size();
  double mx = x[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) z += std::exp(x[i] - mx);
  const double lse = mx + std::log(z);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] - lse;
  return detail::make_result(x.shape(), std::move(out), {x.node_ptr()}, [n](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    double gs = 0.0;
    for (double v : self.grad) gs += v;
    for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] - std::exp(self.value[i]) * gs;
  });
}

/// Row-wise layer norm of x[m x n] with affine gain and bias of length n.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  detail::require_rank(x, 2, "layer_norm");
  const auto m = x.rows(), n = x.cols();
  if (n == 0) throw ShapeError("layer_norm: empty rows");
  if (gain.size() != n || bias.size() != n) throw ShapeError("layer_norm: affine size mismatch");
  std::vector<double> out(m * n), xhat(m * n), inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xr = x.values().data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (xr[j] - mu) * is;
      out[i * n + j] = xhat[i * n + j] * gain[j] + bias[j];
    }
  }
  return detail::make_result(
      {m, n}, std::move(out), {x.node_ptr(), gain.node_ptr(), bias.node_ptr()},
      [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        if (pg.requires_grad) {
          auto& g = pg.ensure_grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j] * xhat[i * n + j];
        }
        if (pb.requires_grad) {
          auto& g = pb.ensure_grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
        }
        if (px.requires_grad) {
          auto& g = px.ensure_grad();
          const double dn = static_cast<double>(n);
          for (std::size_t i = 0; i < m; ++i) {
            double mean_dy = 0.0, mean_dy_xhat = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double dy = self.grad[i * n + j] * pg.value[j];
              mean_dy += dy;
              mean_dy_xhat += dy * xhat[i * n + j];
            }
            mean_dy /= dn;
            mean_dy_xhat /= dn;
            for (std::size_t j = 0; j < n; ++j) {
              const double dy = self.grad[i * n + j] * pg.value[j];
              g[i * n + j] += inv_std[i] * (dy - mean_dy - xhat[i * n + j] * mean_dy_xhat);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Reverse pass

/// Accumulates d(loss)/d(leaf) into every reachable leaf that requires a
/// gradient. Leaf grads accumulate across calls until zero_grad(); grads of
/// intermediate nodes are reset at the start of each call.
inline void backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  if (loss.node().is_leaf()) {
    loss.node().ensure_grad()[0] += 1.0;
    return;
  }

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{&loss.node(), 0}};
  seen.insert(&loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (auto* n : order)
    if (!n->is_leaf()) n->grad.assign(n->value.size(), 0.0);
  loss.node().grad.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (!n->is_leaf() && n->backward) n->backward(*n);
  }
}

}  // namespace adaprune
