#pragma once
// Initial-value solvers (Euler, classic RK4, Dormand-Prince 5(4)) and the
// graph neural ODE used as the latent dynamics learner.
//
// Solvers are generic over the state type. With Tensor states every stage is
// recorded on the tape, so gradients flow through the unrolled steps
// (discretize-then-differentiate). Step-size control only reads values.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynenc/tensor.hpp"

namespace dynenc {

enum class Method { euler, rk4, dopri5 };

inline Method parse_method(const std::string& s) {
  if (s == "euler") return Method::euler;
  if (s == "rk4") return Method::rk4;
  if (s == "dopri5") return Method::dopri5;
  throw std::invalid_argument("unknown solver '" + s + "' (expected euler, rk4 or dopri5)");
}

inline const char* method_name(Method m) {
  switch (m) {
    case Method::euler: return "euler";
    case Method::rk4: return "rk4";
    case Method::dopri5: return "dopri5";
  }
  return "?";
}

struct SolverConfig {
  Method method = Method::rk4;
  double h = 0.1;  // fixed-step methods
  double rtol = 1e-6;
  double atol = 1e-8;
  double min_step = 1e-10;
  std::size_t max_steps = 1'000'000;
  std::vector<double> t_grid;  // t_grid[0] is the initial time

  void validate() const {
    if (t_grid.empty()) throw std::invalid_argument("SolverConfig: empty t_grid");
    for (std::size_t i = 1; i < t_grid.size(); ++i)
      if (!(t_grid[i] > t_grid[i - 1]))
        throw std::invalid_argument("SolverConfig: t_grid must be strictly increasing");
    if (method == Method::dopri5) {
      if (!(rtol > 0 && atol > 0)) throw std::invalid_argument("SolverConfig: rtol, atol must be > 0");
    } else if (!(h > 0)) {
      throw std::invalid_argument("SolverConfig: h must be > 0");
    }
  }
};

struct SolveStats {
  std::size_t steps = 0;  // accepted steps
  std::size_t rejected = 0;
  std::size_t rhs_evals = 0;
  double max_error_ratio = 0.0;  // over accepted steps; <= 1 means within tolerance
};

class StiffnessError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Arithmetic the solvers need from a state type.
template <class State>
struct StateOps;

template <>
struct StateOps<std::vector<double>> {
  using S = std::vector<double>;
  static S combine(const std::vector<const S*>& xs, const std::vector<double>& cs) {
    S out(xs[0]->size(), 0.0);
    for (std::size_t k = 0; k < xs.size(); ++k)
      if (cs[k] != 0.0)
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += cs[k] * (*xs[k])[i];
    return out;
  }
  static std::span<const double> values(const S& s) { return s; }
};

template <>
struct StateOps<Tensor> {
  static Tensor combine(const std::vector<const Tensor*>& xs, const std::vector<double>& cs) {
    std::vector<Tensor> ts;
    ts.reserve(xs.size());
    for (auto* x : xs) ts.push_back(*x);
    return linear_combination(ts, cs);
  }
  static std::span<const double> values(const Tensor& s) { return s.data(); }
};

template <class State>
using VectorField = std::function<State(double, const State&)>;

namespace detail {

template <class State>
void check_finite(const State& y, double t) {
  for (double v : StateOps<State>::values(y))
    if (!std::isfinite(v)) {
      std::ostringstream os;
      os << "non-finite state at t=" << t;
      throw NonFiniteError(os.str());
    }
}

template <class State>
State fixed_step(const VectorField<State>& f, double t, const State& y, double h, Method m,
                 SolveStats& st) {
  using Ops = StateOps<State>;
  if (m == Method::euler) {
    State k1 = f(t, y);
    st.rhs_evals += 1;
    return Ops::combine({&y, &k1}, {1.0, h});
  }
  State k1 = f(t, y);
  State y2 = Ops::combine({&y, &k1}, {1.0, h / 2});
  State k2 = f(t + h / 2, y2);
  State y3 = Ops::combine({&y, &k2}, {1.0, h / 2});
  State k3 = f(t + h / 2, y3);
  State y4 = Ops::combine({&y, &k3}, {1.0, h});
  State k4 = f(t + h, y4);
  st.rhs_evals += 4;
  return Ops::combine({&y, &k1, &k2, &k3, &k4}, {1.0, h / 6, h / 3, h / 3, h / 6});
}

template <class State>
std::vector<State> integrate_fixed(const VectorField<State>& f, const State& z0,
                                   const SolverConfig& cfg, SolveStats& st) {
  using Ops = StateOps<State>;
  const double t0 = cfg.t_grid[0], h = cfg.h;
  const double tol = 1e-9 * h;
  std::vector<State> out{z0};
  State y = z0;
  std::size_t k = 0;  // y is the state at t0 + k h
  for (std::size_t g = 1; g < cfg.t_grid.size(); ++g) {
    const double target = cfg.t_grid[g];
    while (t0 + static_cast<double>(k + 1) * h <= target + tol) {
      if (st.steps >= cfg.max_steps) throw StiffnessError("fixed-step solver: max_steps exceeded");
      y = fixed_step(f, t0 + static_cast<double>(k) * h, y, h, cfg.method, st);
      ++k;
      ++st.steps;
      check_finite(y, t0 + static_cast<double>(k) * h);
    }
    const double t = t0 + static_cast<double>(k) * h;
    const double frac = (target - t) / h;
    if (frac <= tol / h) {
      out.push_back(y);
    } else {
      // Linear interpolation between the bracketing solver steps.
      State next = fixed_step(f, t, y, h, cfg.method, st);
      ++st.steps;
      check_finite(next, t + h);
      out.push_back(Ops::combine({&y, &next}, {1.0 - frac, frac}));
      y = next;
      ++k;
    }
  }
  return out;
}

// Dormand-Prince 5(4) coefficients.
struct DopriTableau {
  static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
  static constexpr double a21 = 1.0 / 5;
  static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
  static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                          a54 = -212.0 / 729;
  static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                          a64 = 49.0 / 176, a65 = -5103.0 / 18656;
  // 5th-order weights (also the 7th stage row, FSAL).
  static constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192,
                          b5 = -2187.0 / 6784, b6 = 11.0 / 84;
  // Embedded 4th-order weights.
  static constexpr double e1 = 5179.0 / 57600, e3 = 7571.0 / 16695, e4 = 393.0 / 640,
                          e5 = -92097.0 / 339200, e6 = 187.0 / 2100, e7 = 1.0 / 40;
  // Midpoint weights for dense output.
  static constexpr double m1 = 6025192743.0 / 30085553152.0 / 2,
                          m3 = 51252292925.0 / 65400821598.0 / 2,
                          m4 = -2691868925.0 / 45128329728.0 / 2,
                          m5 = 187940372067.0 / 1594534317056.0 / 2,
                          m6 = -1776094331.0 / 19743644256.0 / 2,
                          m7 = 11237099.0 / 235043384.0 / 2;
};

template <class State>
std::vector<State> integrate_dopri5(const VectorField<State>& f, const State& z0,
                                    const SolverConfig& cfg, SolveStats& st) {
  using Ops = StateOps<State>;
  using T = DopriTableau;
  const double t0 = cfg.t_grid.front(), t_end = cfg.t_grid.back();
  std::vector<State> out{z0};
  if (cfg.t_grid.size() == 1) return out;

  double t = t0;
  double h = 1e-2 * (t_end - t0);
  State y = z0;
  State f0 = f(t, y);
  st.rhs_evals += 1;
  std::size_t next_grid = 1;
  while (next_grid < cfg.t_grid.size()) {
    if (st.steps + st.rejected >= cfg.max_steps) throw StiffnessError("dopri5: max_steps exceeded");
    if (h < cfg.min_step) {
      std::ostringstream os;
      os << "dopri5: step size underflow (h=" << h << ") at t=" << t;
      throw StiffnessError(os.str());
    }
    const bool last = t + h >= t_end;
    if (last) h = t_end - t;

    State y2 = Ops::combine({&y, &f0}, {1.0, h * T::a21});
    State k2 = f(t + T::c2 * h, y2);
    State y3 = Ops::combine({&y, &f0, &k2}, {1.0, h * T::a31, h * T::a32});
    State k3 = f(t + T::c3 * h, y3);
    State y4 = Ops::combine({&y, &f0, &k2, &k3}, {1.0, h * T::a41, h * T::a42, h * T::a43});
    State k4 = f(t + T::c4 * h, y4);
    State y5 = Ops::combine({&y, &f0, &k2, &k3, &k4},
                            {1.0, h * T::a51, h * T::a52, h * T::a53, h * T::a54});
    State k5 = f(t + T::c5 * h, y5);
    State y6 = Ops::combine({&y, &f0, &k2, &k3, &k4, &k5},
                            {1.0, h * T::a61, h * T::a62, h * T::a63, h * T::a64, h * T::a65});
    State k6 = f(t + h, y6);
    State y1 = Ops::combine({&y, &f0, &k3, &k4, &k5, &k6},
                            {1.0, h * T::b1, h * T::b3, h * T::b4, h * T::b5, h * T::b6});
    State k7 = f(t + h, y1);
    st.rhs_evals += 6;

    // Error estimate from values only.
    auto v0 = Ops::values(y);
    auto v1 = Ops::values(y1);
    auto vk1 = Ops::values(f0), vk3 = Ops::values(k3), vk4 = Ops::values(k4),
         vk5 = Ops::values(k5), vk6 = Ops::values(k6), vk7 = Ops::values(k7);
    double ratio = 0.0;
    bool finite = true;
    for (std::size_t i = 0; i < v0.size(); ++i) {
      double err = h * ((T::b1 - T::e1) * vk1[i] + (T::b3 - T::e3) * vk3[i] +
                        (T::b4 - T::e4) * vk4[i] + (T::b5 - T::e5) * vk5[i] +
                        (T::b6 - T::e6) * vk6[i] - T::e7 * vk7[i]);
      double scale = cfg.atol + cfg.rtol * std::max(std::abs(v0[i]), std::abs(v1[i]));
      double r = std::abs(err) / scale;
      if (!std::isfinite(r) || !std::isfinite(v1[i])) finite = false;
      ratio = std::max(ratio, r);
    }
    if (!finite) {
      st.rejected += 1;
      h *= 0.2;
      continue;
    }
    if (ratio <= 1.0) {
      const double t1 = t + h;
      if (next_grid < cfg.t_grid.size() && cfg.t_grid[next_grid] <= t1 + 1e-12 * std::abs(t1)) {
        State ymid = Ops::combine({&y, &f0, &k3, &k4, &k5, &k6, &k7},
                                  {1.0, h * T::m1, h * T::m3, h * T::m4, h * T::m5, h * T::m6,
                                   h * T::m7});
        while (next_grid < cfg.t_grid.size() &&
               cfg.t_grid[next_grid] <= t1 + 1e-12 * std::abs(t1)) {
          const double x = std::min(1.0, (cfg.t_grid[next_grid] - t) / h);
          const double x2 = x * x, x3 = x2 * x, x4 = x3 * x;
          // Quartic interpolant through y0, y1, ymid with end slopes f0, f1.
          out.push_back(Ops::combine(
              {&y, &y1, &ymid, &f0, &k7},
              {-8 * x4 + 18 * x3 - 11 * x2 + 1, -8 * x4 + 14 * x3 - 5 * x2,
               16 * x4 - 32 * x3 + 16 * x2, h * (-2 * x4 + 5 * x3 - 4 * x2 + x),
               h * (2 * x4 - 3 * x3 + x2)}));
          ++next_grid;
        }
      }
      st.steps += 1;
      st.max_error_ratio = std::max(st.max_error_ratio, ratio);
      t = last ? t_end : t1;
      y = std::move(y1);
      f0 = std::move(k7);
      double factor = ratio == 0.0 ? 5.0 : 0.9 * std::pow(ratio, -0.2);
      h *= std::clamp(factor, 0.2, 5.0);
    } else {
      st.rejected += 1;
      h *= std::clamp(0.9 * std::pow(ratio, -0.2), 0.2, 1.0);
    }
  }
  check_finite(out.back(), t_end);
  return out;
}

}  // namespace detail

// Solves z' = f(t, z) from cfg.t_grid[0] and returns the state at every grid
// time (the first entry is z0).
template <class State>
std::vector<State> integrate(const VectorField<State>& f, const State& z0, const SolverConfig& cfg,
                             SolveStats* stats = nullptr) {
  cfg.validate();
  detail::check_finite(z0, cfg.t_grid[0]);
  SolveStats local;
  SolveStats& st = stats ? *stats : local;
  if (cfg.method == Method::dopri5) return detail::integrate_dopri5(f, z0, cfg, st);
  return detail::integrate_fixed(f, z0, cfg, st);
}

// ---- graph neural ODE --------------------------------------------------------

struct GnnOdeParams {
  Tensor w_g;        // [D, D]
  Tensor laplacian;  // [N, N], frozen
  bool activation = true;  // relu; off only for diagnostic linear flows
};

// relu(Lambda Z W_g) on Z: [N, D]. Right-multiplying by W_g applies W_g^T to
// every object's latent vector.
inline Tensor gnn_rhs(const Tensor& z, const GnnOdeParams& p) {
  if (z.rank() != 2 || p.laplacian.rank() != 2 || p.laplacian.dim(1) != z.dim(0) ||
      p.w_g.rank() != 2 || p.w_g.dim(0) != z.dim(1) || p.w_g.dim(1) != z.dim(1))
    throw ShapeError("gnn_rhs: z " + shape_str(z.shape()) + ", laplacian " +
                     shape_str(p.laplacian.shape()) + ", w_g " + shape_str(p.w_g.shape()));
  Tensor pre = matmul(matmul(p.laplacian, z), p.w_g);
  return p.activation ? relu(pre) : pre;
}

// Integrates the graph ODE from z0 and returns the states at every grid time.
inline std::vector<Tensor> latent_rollout(const Tensor& z0, const GnnOdeParams& p,
                                          const SolverConfig& cfg, SolveStats* stats = nullptr) {
  VectorField<Tensor> f = [&p](double, const Tensor& z) { return gnn_rhs(z, p); };
  return integrate(f, z0, cfg, stats);
}

// Stacks per-time states [N, D] into [N, len, D] (object-major).
inline Tensor stack_trajectory(const std::vector<Tensor>& states) {
  const std::size_t n = states[0].dim(0), d = states[0].dim(1), len = states.size();
  std::vector<std::size_t> order;  // row index into the [len*N, D] concatenation
  order.reserve(n * len);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < len; ++t) order.push_back(t * n + i);
  Tensor all = concat(states);  // [len*N, D]
  return reshape(gather_rows(all, order), {n, len, d});
}

}  // namespace dynenc
