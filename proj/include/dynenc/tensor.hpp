#pragma once
// Dense real tensors with a reverse-mode tape.
//
// Every op produces a fresh output buffer. When any input requires a
// gradient the op is appended to the calling thread's active tape together
// with a backward closure; `backward(root)` then replays the tape in reverse
// record order exactly once.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dynenc {

using Shape = std::vector<std::size_t>;

inline constexpr double kClampMin = 1e-12;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t tape_id = 0;  // 0: not produced by a recorded op
  std::size_t node_index = 0;

  bool is_leaf() const { return tape_id == 0; }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

using ImplPtr = std::shared_ptr<TensorImpl>;

struct Node {
  std::vector<ImplPtr> inputs;
  ImplPtr output;
  std::function<void(Node&)> backward;
};

}  // namespace detail

class Tape;
Tape& active_tape();

class Tensor {
 public:
  Tensor() : impl_(std::make_shared<detail::TensorImpl>()) { impl_->shape = {0}; }

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size())
      throw ShapeError("Tensor::from: shape " + shape_str(shape) + " holds " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    for (auto e : shape)
      if (e == 0) throw ShapeError("Tensor::from: zero extent in " + shape_str(shape));
    Tensor t(std::make_shared<detail::TensorImpl>());
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(values);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double v) {
    auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, v));
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  static Tensor vector(std::vector<double> v, bool requires_grad = false) {
    auto n = v.size();
    return from({n}, std::move(v), requires_grad);
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       bool requires_grad = false) {
    std::vector<double> v;
    std::size_t cols = rows.begin()->size();
    for (auto& r : rows) {
      if (r.size() != cols) throw ShapeError("Tensor::matrix: ragged rows");
      v.insert(v.end(), r.begin(), r.end());
    }
    return from({rows.size(), cols}, std::move(v), requires_grad);
  }

  static Tensor identity(std::size_t n) {
    auto t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.impl_->data[i * n + i] = 1.0;
    return t;
  }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t size() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  // Direct write access. Only meaningful on leaves between tape passes
  // (optimizer updates, finite-difference perturbation).
  std::span<double> mutable_data() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }

  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }
  double at(std::size_t i) const { return impl_->data.at(i); }
  double at(std::size_t i, std::size_t j) const {
    if (rank() != 2) throw ShapeError("at(i,j) on rank " + std::to_string(rank()));
    return impl_->data.at(i * impl_->shape[1] + j);
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    if (rank() != 3) throw ShapeError("at(i,j,k) on rank " + std::to_string(rank()));
    return impl_->data.at((i * impl_->shape[1] + j) * impl_->shape[2] + k);
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }
  bool has_grad() const { return impl_->grad.size() == impl_->data.size() && !impl_->data.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  // Copy of the values with no tape history.
  Tensor detach() const { return from(shape(), impl_->data); }
  // Independent copy keeping the requires_grad flag (a fresh leaf).
  Tensor clone_leaf() const { return from(shape(), impl_->data, impl_->requires_grad); }

  bool same_object(const Tensor& o) const { return impl_ == o.impl_; }

  // Internal access for op implementations.
  const detail::ImplPtr& impl() const { return impl_; }
  explicit Tensor(detail::ImplPtr p) : impl_(std::move(p)) {}

 private:
  detail::ImplPtr impl_;
};

// Per-thread record of executed ops.
class Tape {
 public:
  Tape() : id_(next_id()) {}

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return nodes_.size(); }

  // Drops all nodes; tensors produced earlier are no longer "on tape".
  void clear() {
    nodes_.clear();
    id_ = next_id();
  }

  void record(std::vector<detail::ImplPtr> inputs, const detail::ImplPtr& out,
              std::function<void(detail::Node&)> bw) {
    out->tape_id = id_;
    out->node_index = nodes_.size();
    out->requires_grad = true;
    nodes_.push_back({std::move(inputs), out, std::move(bw)});
  }

  bool owns(const detail::TensorImpl& t) const {
    return t.tape_id == id_ && t.node_index < nodes_.size() &&
           nodes_[t.node_index].output.get() == &t;
  }

  void backward(const Tensor& root) {
    auto& r = *root.impl();
    if (r.data.size() != 1)
      throw TapeError("backward: root must be scalar, got shape " + shape_str(r.shape));
    if (!owns(r)) throw TapeError("backward: root was not produced on the active tape");
    // Intermediate grads are rebuilt on every pass; leaf grads accumulate.
    for (auto& n : nodes_) n.output->grad.clear();
    r.ensure_grad();
    r.grad[0] = 1.0;
    for (std::size_t i = r.node_index + 1; i-- > 0;) {
      auto& node = nodes_[i];
      if (node.output->grad.empty()) continue;
      node.backward(node);
    }
  }

  static bool& grad_enabled() {
    thread_local bool enabled = true;
    return enabled;
  }

 private:
  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter++;
  }
  std::uint64_t id_;
  std::vector<detail::Node> nodes_;
};

inline Tape& active_tape() {
  thread_local Tape tape;
  return tape;
}

inline void backward(const Tensor& root) { active_tape().backward(root); }

// Clears the active tape on scope exit.
class TapeScope {
 public:
  TapeScope() { active_tape().clear(); }
  ~TapeScope() { active_tape().clear(); }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
};

// Disables recording for the current thread within its scope.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(Tape::grad_enabled()) { Tape::grad_enabled() = false; }
  ~NoGradGuard() { Tape::grad_enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

namespace detail {

inline bool wants_grad(std::initializer_list<const Tensor*> ins) {
  if (!Tape::grad_enabled()) return false;
  for (auto* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

inline Tensor make_out(Shape shape, std::vector<double> data) {
  auto p = std::make_shared<TensorImpl>();
  p->shape = std::move(shape);
  p->data = std::move(data);
  return Tensor(p);
}

// Adds g into t's grad buffer if t participates in differentiation.
inline void accumulate(const ImplPtr& t, std::span<const double> g) {
  if (!t->requires_grad) return;
  t->ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) t->grad[i] += g[i];
}

inline void record(std::initializer_list<const Tensor*> ins, const Tensor& out,
                   std::function<void(Node&)> bw) {
  std::vector<ImplPtr> inputs;
  inputs.reserve(ins.size());
  for (auto* t : ins) inputs.push_back(t->impl());
  active_tape().record(std::move(inputs), out.impl(), std::move(bw));
}

inline void require_rank(const Tensor& t, std::size_t r, const char* op) {
  if (t.rank() != r)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                     shape_str(t.shape()));
}

// b broadcasts against a when b's shape is a trailing suffix of a's shape
// (or b is a single element).
inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

enum class Binary { add, sub, mul, div };

inline Tensor binary(const Tensor& a, const Tensor& b, Binary kind, const char* name) {
  const bool a_big = a.size() >= b.size();
  const Tensor& big = a_big ? a : b;
  const Tensor& small = a_big ? b : a;
  if (!(small.size() == 1 || is_suffix(small.shape(), big.shape())))
    throw ShapeError(std::string(name) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " do not broadcast");
  const std::size_t n = big.size(), m = small.size();
  const auto& av = a.values();
  const auto& bv = b.values();
  auto ai = [&](std::size_t i) { return a_big ? i : i % m; };
  auto bi = [&](std::size_t i) { return a_big ? i % m : i; };
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double x = av[ai(i)], y = bv[bi(i)];
    switch (kind) {
      case Binary::add: out[i] = x + y; break;
      case Binary::sub: out[i] = x - y; break;
      case Binary::mul: out[i] = x * y; break;
      case Binary::div: {
        double d = std::abs(y) < kClampMin ? (y < 0 ? -kClampMin : kClampMin) : y;
        out[i] = x / d;
        break;
      }
    }
  }
  auto res = make_out(big.shape(), std::move(out));
  if (wants_grad({&a, &b})) {
    record({&a, &b}, res, [kind, a_big, n, m](Node& node) {
      auto& A = node.inputs[0];
      auto& B = node.inputs[1];
      const auto& g = node.output->grad;
      std::vector<double> ga(A->data.size(), 0.0), gb(B->data.size(), 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t ia = a_big ? i : i % m, ib = a_big ? i % m : i;
        double x = A->data[ia], y = B->data[ib];
        switch (kind) {
          case Binary::add: ga[ia] += g[i]; gb[ib] += g[i]; break;
          case Binary::sub: ga[ia] += g[i]; gb[ib] -= g[i]; break;
          case Binary::mul: ga[ia] += g[i] * y; gb[ib] += g[i] * x; break;
          case Binary::div:
            if (std::abs(y) < kClampMin) {
              double d = y < 0 ? -kClampMin : kClampMin;
              ga[ia] += g[i] / d;
            } else {
              ga[ia] += g[i] / y;
              gb[ib] -= g[i] * x / (y * y);
            }
            break;
        }
      }
      accumulate(A, ga);
      accumulate(B, gb);
    });
  }
  return res;
}

template <class F, class DF>
Tensor unary(const Tensor& a, F f, DF df) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  auto res = make_out(a.shape(), std::move(out));
  if (wants_grad({&a})) {
    record({&a}, res, [df](Node& node) {
      auto& A = node.inputs[0];
      const auto& g = node.output->grad;
      const auto& y = node.output->data;
      std::vector<double> ga(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * df(A->data[i], y[i]);
      accumulate(A, ga);
    });
  }
  return res;
}

}  // namespace detail

// ---- elementwise -----------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, detail::Binary::add, "add");
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, detail::Binary::sub, "sub");
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, detail::Binary::mul, "mul");
}
// Denominators with magnitude below 1e-12 are clamped (sign kept).
inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, detail::Binary::div, "div");
}

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary(
      a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::unary(
      a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

// Subgradient 0 at the kink.
inline Tensor relu(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

// Natural log with the argument clamped to >= 1e-12; zero gradient where clamped.
inline Tensor ln(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return std::log(std::max(x, kClampMin)); },
      [](double x, double) { return x > kClampMin ? 1.0 / x : 0.0; });
}

inline Tensor abs(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

inline Tensor square(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---- reductions ------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  auto res = detail::make_out({1}, {s});
  if (detail::wants_grad({&a})) {
    detail::record({&a}, res, [](detail::Node& node) {
      auto& A = node.inputs[0];
      std::vector<double> ga(A->data.size(), node.output->grad[0]);
      detail::accumulate(A, ga);
    });
  }
  return res;
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

// Sum over the last axis: [..., n] -> [...] (rank-1 input gives shape [1]).
inline Tensor sum_last(const Tensor& a) {
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.size() / n;
  Shape s(a.shape().begin(), a.shape().end() - 1);
  if (s.empty()) s = {1};
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r] += a.values()[r * n + j];
  auto res = detail::make_out(std::move(s), std::move(out));
  if (detail::wants_grad({&a})) {
    detail::record({&a}, res, [n, rows](detail::Node& node) {
      auto& A = node.inputs[0];
      std::vector<double> ga(A->data.size());
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) ga[r * n + j] = node.output->grad[r];
      detail::accumulate(A, ga);
    });
  }
  return res;
}

// Euclidean norm of all elements -> scalar. Gradient at 0 is 0.
inline Tensor norm2(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v * v;
  double r = std::sqrt(s);
  auto res = detail::make_out({1}, {r});
  if (detail::wants_grad({&a})) {
    detail::record({&a}, res, [](detail::Node& node) {
      auto& A = node.inputs[0];
      double r = node.output->data[0], g = node.output->grad[0];
      std::vector<double> ga(A->data.size(), 0.0);
      if (r > 0)
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = g * A->data[i] / r;
      detail::accumulate(A, ga);
    });
  }
  return res;
}

// Row-wise Euclidean norms of a [m, n] matrix -> [m].
inline Tensor row_norm2(const Tensor& a) {
  detail::require_rank(a, 2, "row_norm2");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += a.values()[i * n + j] * a.values()[i * n + j];
    out[i] = std::sqrt(s);
  }
  auto res = detail::make_out({m}, std::move(out));
  if (detail::wants_grad({&a})) {
    detail::record({&a}, res, [m, n](detail::Node& node) {
      auto& A = node.inputs[0];
      std::vector<double> ga(A->data.size(), 0.0);
      for (std::size_t i = 0; i < m; ++i) {
        double r = node.output->data[i];
        if (r <= 0) continue;
        for (std::size_t j = 0; j < n; ++j)
          ga[i * n + j] = node.output->grad[i] * A->data[i * n + j] / r;
      }
      detail::accumulate(A, ga);
    });
  }
  return res;
}

// Cosine similarity. Rank-1 inputs give a scalar; [m, n] inputs give [m]
// (row by row). Norms are clamped to >= 1e-12.
inline Tensor cosine_sim(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.rank() > 2)
    throw ShapeError("cosine_sim: shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  const std::size_t m = a.rank() == 2 ? a.dim(0) : 1;
  const std::size_t n = a.rank() == 2 ? a.dim(1) : a.dim(0);
  std::vector<double> out(m), na(m), nb(m), dots(m);
  for (std::size_t i = 0; i < m; ++i) {
    double d = 0, sa = 0, sb = 0;
    for (std::size_t j = 0; j < n; ++j) {
      double x = a.values()[i * n + j], y = b.values()[i * n + j];
      d += x * y;
      sa += x * x;
      sb += y * y;
    }
    na[i] = std::sqrt(sa);
    nb[i] = std::sqrt(sb);
    dots[i] = d;
    out[i] = d / (std::max(na[i], kClampMin) * std::max(nb[i], kClampMin));
  }
  auto res = detail::make_out({m}, std::move(out));
  if (detail::wants_grad({&a, &b})) {
    detail::record({&a, &b}, res, [m, n, na, nb, dots](detail::Node& node) {
      auto& A = node.inputs[0];
      auto& B = node.inputs[1];
      std::vector<double> ga(A->data.size(), 0.0), gb(B->data.size(), 0.0);
      for (std::size_t i = 0; i < m; ++i) {
        double g = node.output->grad[i];
        double ca = std::max(na[i], kClampMin), cb = std::max(nb[i], kClampMin);
        bool a_free = na[i] > kClampMin, b_free = nb[i] > kClampMin;
        for (std::size_t j = 0; j < n; ++j) {
          double x = A->data[i * n + j], y = B->data[i * n + j];
          double gx = y / (ca * cb), gy = x / (ca * cb);
          if (a_free) gx -= dots[i] * x / (ca * ca * ca * cb);
          if (b_free) gy -= dots[i] * y / (ca * cb * cb * cb);
          ga[i * n + j] = g * gx;
          gb[i * n + j] = g * gy;
        }
      }
      detail::accumulate(A, ga);
      detail::accumulate(B, gb);
    });
  }
  return res;
}

// ---- linear algebra --------------------------------------------------------

// [m, k] x [k, n] -> [m, n]. A rank>2 left operand is treated as a stack of
// rows: [..., k] x [k, n] -> [..., n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() != 2 || a.shape().back() != b.dim(0))
    throw ShapeError("matmul: shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " do not contract");
  const std::size_t k = b.dim(0), n = b.dim(1), m = a.size() / k;
  const auto& A = a.values();
  const auto& B = b.values();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      double x = A[i * k + p];
      if (x == 0.0) continue;
      const double* brow = &B[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += x * brow[j];
    }
  Shape s = a.shape();
  s.back() = n;
  auto res = detail::make_out(std::move(s), std::move(out));
  if (detail::wants_grad({&a, &b})) {
    detail::record({&a, &b}, res, [m, k, n](detail::Node& node) {
      auto& A = node.inputs[0];
      auto& B = node.inputs[1];
      const auto& g = node.output->grad;
      if (A->requires_grad) {
        std::vector<double> ga(m * k, 0.0);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * B->data[p * n + j];
            ga[i * k + p] = s;
          }
        detail::accumulate(A, ga);
      }
      if (B->requires_grad) {
        std::vector<double> gb(k * n, 0.0);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double x = A->data[i * k + p];
            if (x == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += x * g[i * n + j];
          }
        detail::accumulate(B, gb);
      }
    });
  }
  return res;
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.values()[i * n + j];
  auto res = detail::make_out({n, m}, std::move(out));
  if (detail::wants_grad({&a})) {
    detail::record({&a}, res, [m, n](detail::Node& node) {
      std::vector<double> ga(m * n);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] = node.output->grad[j * m + i];
      detail::accumulate(node.inputs[0], ga);
    });
  }
  return res;
}

// ---- shape ops -------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape s) {
  if (shape_numel(s) != a.size())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(s));
  auto res = detail::make_out(std::move(s), a.values());
  if (detail::wants_grad({&a})) {
    detail::record({&a}, res, [](detail::Node& node) {
      detail::accumulate(node.inputs[0], node.output->grad);
    });
  }
  return res;
}

// Concatenate along axis 0; trailing extents must agree.
inline Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  std::vector<double> out;
  bool grad = false;
  for (auto& p : parts) {
    Shape t(p.shape().begin() + 1, p.shape().end());
    if (t != tail)
      throw ShapeError("concat: " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    rows += p.dim(0);
    out.insert(out.end(), p.values().begin(), p.values().end());
    grad = grad || (Tape::grad_enabled() && p.requires_grad());
  }
  Shape s = parts[0].shape();
  s[0] = rows;
  auto res = detail::make_out(std::move(s), std::move(out));
  if (grad) {
    std::vector<detail::ImplPtr> inputs;
    for (auto& p : parts) inputs.push_back(p.impl());
    active_tape().record(std::move(inputs), res.impl(), [](detail::Node& node) {
      std::size_t off = 0;
      for (auto& in : node.inputs) {
        std::size_t len = in->data.size();
        detail::accumulate(in, std::span<const double>(node.output->grad).subspan(off, len));
        off += len;
      }
    });
  }
  return res;
}

// Rows [begin, end) along axis 0.
inline Tensor slice(const Tensor& a, std::size_t begin, std::size_t end) {
  if (begin >= end || end > a.dim(0))
    throw ShapeError("slice: [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") of " + shape_str(a.shape()));
  const std::size_t row = a.size() / a.dim(0);
  std::vector<double> out(a.values().begin() + begin * row, a.values().begin() + end * row);
  Shape s = a.shape();
  s[0] = end - begin;
  auto res = detail::make_out(std::move(s), std::move(out));
  if (detail::wants_grad({&a})) {
    detail::record({&a}, res, [begin, row](detail::Node& node) {
      auto& A = node.inputs[0];
      std::vector<double> ga(A->data.size(), 0.0);
      std::copy(node.output->grad.begin(), node.output->grad.end(), ga.begin() + begin * row);
      detail::accumulate(A, ga);
    });
  }
  return res;
}

// Selects rows along axis 0 (repeats allowed).
inline Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw ShapeError("gather_rows: empty index list");
  const std::size_t row = a.size() / a.dim(0);
  std::vector<double> out;
  out.reserve(idx.size() * row);
  for (auto i : idx) {
    if (i >= a.dim(0)) throw ShapeError("gather_rows: index out of range");
    out.insert(out.end(), a.values().begin() + i * row, a.values().begin() + (i + 1) * row);
  }
  Shape s = a.shape();
  s[0] = idx.size();
  auto res = detail::make_out(std::move(s), std::move(out));
  if (detail::wants_grad({&a})) {
    detail::record({&a}, res, [idx, row](detail::Node& node) {
      auto& A = node.inputs[0];
      std::vector<double> ga(A->data.size(), 0.0);
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t j = 0; j < row; ++j) ga[idx[r] * row + j] += node.output->grad[r * row + j];
      detail::accumulate(A, ga);
    });
  }
  return res;
}

// ---- normalization ---------------------------------------------------------

// Softmax over the last axis.
inline Tensor softmax(const Tensor& a) {
  const std::size_t n = a.shape().back(), rows = a.size() / n;
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = &a.values()[r * n];
    double mx = *std::max_element(x, x + n), s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += (out[r * n + j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] /= s;
  }
  auto res = detail::make_out(a.shape(), std::move(out));
  if (detail::wants_grad({&a})) {
    detail::record({&a}, res, [n, rows](detail::Node& node) {
      const auto& y = node.output->data;
      const auto& g = node.output->grad;
      std::vector<double> ga(y.size());
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
        for (std::size_t j = 0; j < n; ++j) ga[r * n + j] = y[r * n + j] * (g[r * n + j] - dot);
      }
      detail::accumulate(node.inputs[0], ga);
    });
  }
  return res;
}

// Standardizes over the last axis (no affine part): (x - mean) / sqrt(var + eps).
inline Tensor layer_norm(const Tensor& a, double eps = 1e-5) {
  const std::size_t n = a.shape().back(), rows = a.size() / n;
  std::vector<double> out(a.size()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = &a.values()[r * n];
    double mu = 0.0, var = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += x[j];
    mu /= static_cast<double>(n);
    for (std::size_t j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = (x[j] - mu) * inv_std[r];
  }
  auto res = detail::make_out(a.shape(), std::move(out));
  if (detail::wants_grad({&a})) {
    detail::record({&a}, res, [n, rows, inv_std](detail::Node& node) {
      const auto& y = node.output->data;
      const auto& g = node.output->grad;
      std::vector<double> ga(y.size());
      const double dn = static_cast<double>(n);
      for (std::size_t r = 0; r < rows; ++r) {
        double sg = 0.0, sgy = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          sg += g[r * n + j];
          sgy += g[r * n + j] * y[r * n + j];
        }
        for (std::size_t j = 0; j < n; ++j)
          ga[r * n + j] = inv_std[r] * (g[r * n + j] - sg / dn - y[r * n + j] * sgy / dn);
      }
      detail::accumulate(node.inputs[0], ga);
    });
  }
  return res;
}

// ---- sequence ops ----------------------------------------------------------

// Depthwise 1-D convolution along the token axis of a batch of sequences.
// x: [batch*seq_len, d] (sequence-major), w: [kernel, d] with odd kernel.
// Same-length output with zero padding.
inline Tensor depthwise_conv1d(const Tensor& x, const Tensor& w, std::size_t seq_len) {
  detail::require_rank(x, 2, "depthwise_conv1d");
  detail::require_rank(w, 2, "depthwise_conv1d");
  const std::size_t rows = x.dim(0), d = x.dim(1), k = w.dim(0);
  if (w.dim(1) != d || k % 2 == 0 || seq_len == 0 || rows % seq_len != 0)
    throw ShapeError("depthwise_conv1d: x " + shape_str(x.shape()) + ", w " +
                     shape_str(w.shape()) + ", seq_len " + std::to_string(seq_len));
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(k / 2);
  const std::ptrdiff_t L = static_cast<std::ptrdiff_t>(seq_len);
  std::vector<double> out(rows * d, 0.0);
  for (std::size_t b = 0; b < rows / seq_len; ++b)
    for (std::ptrdiff_t p = 0; p < L; ++p)
      for (std::ptrdiff_t q = 0; q < static_cast<std::ptrdiff_t>(k); ++q) {
        std::ptrdiff_t src = p + q - half;
        if (src < 0 || src >= L) continue;
        const double* xr = &x.values()[(b * seq_len + static_cast<std::size_t>(src)) * d];
        const double* wr = &w.values()[static_cast<std::size_t>(q) * d];
        double* o = &out[(b * seq_len + static_cast<std::size_t>(p)) * d];
        for (std::size_t j = 0; j < d; ++j) o[j] += wr[j] * xr[j];
      }
  auto res = detail::make_out({rows, d}, std::move(out));
  if (detail::wants_grad({&x, &w})) {
    detail::record({&x, &w}, res, [rows, d, k, half, L, seq_len](detail::Node& node) {
      auto& X = node.inputs[0];
      auto& W = node.inputs[1];
      const auto& g = node.output->grad;
      std::vector<double> gx(rows * d, 0.0), gw(k * d, 0.0);
      for (std::size_t b = 0; b < rows / seq_len; ++b)
        for (std::ptrdiff_t p = 0; p < L; ++p)
          for (std::ptrdiff_t q = 0; q < static_cast<std::ptrdiff_t>(k); ++q) {
            std::ptrdiff_t src = p + q - half;
            if (src < 0 || src >= L) continue;
            std::size_t xi = (b * seq_len + static_cast<std::size_t>(src)) * d;
            std::size_t oi = (b * seq_len + static_cast<std::size_t>(p)) * d;
            std::size_t wi = static_cast<std::size_t>(q) * d;
            for (std::size_t j = 0; j < d; ++j) {
              gx[xi + j] += W->data[wi + j] * g[oi + j];
              gw[wi + j] += X->data[xi + j] * g[oi + j];
            }
          }
      detail::accumulate(X, gx);
      detail::accumulate(W, gw);
    });
  }
  return res;
}

// Scaled dot-product attention applied independently to each sequence of a
// batch and each head. q, k, v: [batch*seq_len, d] with d divisible by heads;
// head h owns columns [h*d/heads, (h+1)*d/heads).
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t seq_len,
                        std::size_t heads) {
  detail::require_rank(q, 2, "attention");
  if (q.shape() != k.shape() || q.shape() != v.shape() || heads == 0 ||
      q.dim(1) % heads != 0 || seq_len == 0 || q.dim(0) % seq_len != 0)
    throw ShapeError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                     ", v " + shape_str(v.shape()));
  const std::size_t rows = q.dim(0), d = q.dim(1), dh = d / heads, L = seq_len;
  const std::size_t nb = rows / L;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  // probs[b][h][i][j]
  std::vector<double> probs(nb * heads * L * L);
  std::vector<double> out(rows * d, 0.0);
  const auto& Q = q.values();
  const auto& K = k.values();
  const auto& V = v.values();
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      double* P = &probs[((b * heads + h) * L) * L];
      for (std::size_t i = 0; i < L; ++i) {
        double mx = -1e300;
        for (std::size_t j = 0; j < L; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c)
            s += Q[(b * L + i) * d + h * dh + c] * K[(b * L + j) * d + h * dh + c];
          P[i * L + j] = s * sc;
          mx = std::max(mx, P[i * L + j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < L; ++j) z += (P[i * L + j] = std::exp(P[i * L + j] - mx));
        for (std::size_t j = 0; j < L; ++j) P[i * L + j] /= z;
        for (std::size_t j = 0; j < L; ++j)
          for (std::size_t c = 0; c < dh; ++c)
            out[(b * L + i) * d + h * dh + c] += P[i * L + j] * V[(b * L + j) * d + h * dh + c];
      }
    }
  auto res = detail::make_out({rows, d}, std::move(out));
  if (detail::wants_grad({&q, &k, &v})) {
    detail::record({&q, &k, &v}, res,
                   [probs = std::move(probs), nb, heads, L, d, dh, sc](detail::Node& node) {
                     auto& Qi = node.inputs[0];
                     auto& Ki = node.inputs[1];
                     auto& Vi = node.inputs[2];
                     const auto& g = node.output->grad;
                     std::vector<double> gq(Qi->data.size(), 0.0), gk(gq.size(), 0.0),
                         gv(gq.size(), 0.0), dp(L);
                     for (std::size_t b = 0; b < nb; ++b)
                       for (std::size_t h = 0; h < heads; ++h) {
                         const double* P = &probs[((b * heads + h) * L) * L];
                         for (std::size_t i = 0; i < L; ++i) {
                           std::size_t oi = (b * L + i) * d + h * dh;
                           double dot = 0.0;
                           for (std::size_t j = 0; j < L; ++j) {
                             std::size_t vj = (b * L + j) * d + h * dh;
                             double s = 0.0;
                             for (std::size_t c = 0; c < dh; ++c) {
                               s += g[oi + c] * Vi->data[vj + c];
                               gv[vj + c] += P[i * L + j] * g[oi + c];
                             }
                             dp[j] = s;
                             dot += s * P[i * L + j];
                           }
                           for (std::size_t j = 0; j < L; ++j) {
                             double ds = P[i * L + j] * (dp[j] - dot) * sc;
                             if (ds == 0.0) continue;
                             std::size_t kj = (b * L + j) * d + h * dh;
                             for (std::size_t c = 0; c < dh; ++c) {
                               gq[oi + c] += ds * Ki->data[kj + c];
                               gk[kj + c] += ds * Qi->data[oi + c];
                             }
                           }
                         }
                       }
                     detail::accumulate(Qi, gq);
                     detail::accumulate(Ki, gk);
                     detail::accumulate(Vi, gv);
                   });
  }
  return res;
}

// sum_i c_i * t_i over same-shape tensors, recorded as a single node.
inline Tensor linear_combination(const std::vector<Tensor>& ts, const std::vector<double>& cs) {
  if (ts.empty() || ts.size() != cs.size())
    throw ShapeError("linear_combination: need one coefficient per tensor");
  const auto& shape = ts[0].shape();
  std::vector<double> out(ts[0].size(), 0.0);
  bool grad = false;
  for (std::size_t k = 0; k < ts.size(); ++k) {
    if (ts[k].shape() != shape)
      throw ShapeError("linear_combination: " + shape_str(shape) + " vs " + shape_str(ts[k].shape()));
    const double c = cs[k];
    if (c != 0.0)
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += c * ts[k].values()[i];
    grad = grad || (Tape::grad_enabled() && ts[k].requires_grad());
  }
  auto res = detail::make_out(shape, std::move(out));
  if (grad) {
    std::vector<detail::ImplPtr> inputs;
    for (auto& t : ts) inputs.push_back(t.impl());
    active_tape().record(std::move(inputs), res.impl(), [cs](detail::Node& node) {
      const auto& g = node.output->grad;
      std::vector<double> gi(g.size());
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        if (!node.inputs[k]->requires_grad || cs[k] == 0.0) continue;
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] = cs[k] * g[i];
        detail::accumulate(node.inputs[k], gi);
      }
    });
  }
  return res;
}

// Dot product of a tensor with fixed coefficients: sum_i a_i * w_i.
inline Tensor weighted_sum(const Tensor& a, const std::vector<double>& w) {
  if (w.size() != a.size())
    throw ShapeError("weighted_sum: " + std::to_string(w.size()) + " weights for " +
                     shape_str(a.shape()));
  return sum(mul(a, Tensor::from(a.shape(), w)));
}

inline bool all_finite(const Tensor& t) {
  return std::all_of(t.values().begin(), t.values().end(),
                     [](double v) { return std::isfinite(v); });
}

}  // namespace dynenc
