#pragma once
// Maximal Lyapunov exponent by nearest-neighbor divergence (small-data
// method): pair every point with its nearest temporally separated neighbor,
// track the log distance of the pairs forward in time, and fit the slope of
// the averaged curve.
//
// The diagnostic estimator works on plain values; mle_loss records the same
// sums on the tape with neighbors fixed before the forward pass, so gradients
// never flow through the argmin.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynenc/tensor.hpp"

namespace dynenc {

enum class Metric { cosine, euclidean };

inline Metric parse_metric(const std::string& s) {
  if (s == "cosine") return Metric::cosine;
  if (s == "euclidean") return Metric::euclidean;
  throw std::invalid_argument("unknown metric '" + s + "' (expected cosine|euclidean)");
}

inline const char* metric_name(Metric m) { return m == Metric::cosine ? "cosine" : "euclidean"; }

class EstimatorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MleConfig {
  std::size_t t_max = 0;  // 0: floor(B / 4)
  std::size_t theiler_window = 10;
  double delta_t = 1.0;
  Metric metric = Metric::cosine;
  std::size_t t_lo = 1;
  std::size_t t_hi = 0;  // 0: t_max
  // Origins and neighbors are limited to rows that can be followed for t_max
  // steps, so no pair leaves the curve early. Off: every row takes part and
  // pairs drop out near the end of the sequence.
  bool tracked_pairs = true;

  // Fills the automatic fields for a sequence of b rows and checks the result.
  MleConfig resolved(std::size_t b) const {
    MleConfig c = *this;
    if (c.t_max == 0) c.t_max = b / 4;
    if (c.t_hi == 0) c.t_hi = c.t_max;
    c.validate();
    return c;
  }

  void validate() const {
    if (!(delta_t > 0)) throw std::invalid_argument("MleConfig: delta_t must be > 0");
    if (theiler_window < 1) throw std::invalid_argument("MleConfig: theiler_window must be >= 1");
    if (!(t_lo >= 1 && t_lo < t_hi && t_hi <= t_max))
      throw std::invalid_argument("MleConfig: need 1 <= t_lo < t_hi <= t_max (got t_lo=" +
                                  std::to_string(t_lo) + ", t_hi=" + std::to_string(t_hi) +
                                  ", t_max=" + std::to_string(t_max) + ")");
  }
};

struct DivergenceCurve {
  std::vector<double> y;                   // t = 0 .. t_max
  std::vector<std::size_t> valid_counts;  // pairs contributing at t
  double lambda_hat = 0.0;
};

// Row i = (x_i, x_{i+J}, ..., x_{i+(U-1)J}); B = T - (U-1)J rows.
inline Tensor delay_embed(const std::vector<double>& x, std::size_t dim, std::size_t lag) {
  if (dim < 1 || lag < 1) throw std::invalid_argument("delay_embed: U and J must be >= 1");
  const auto span = static_cast<long long>((dim - 1) * lag);
  const long long b = static_cast<long long>(x.size()) - span;
  if (b <= 0)
    throw std::invalid_argument("delay_embed: series of length " + std::to_string(x.size()) +
                                " too short for U=" + std::to_string(dim) +
                                ", J=" + std::to_string(lag));
  const auto rows = static_cast<std::size_t>(b);
  std::vector<double> out(rows * dim);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t u = 0; u < dim; ++u) out[i * dim + u] = x[i + u * lag];
  return Tensor::from({rows, dim}, std::move(out));
}

namespace detail {

inline double point_distance(const double* a, const double* b, std::size_t d, Metric m) {
  if (m == Metric::euclidean) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
    return std::sqrt(s);
  }
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    ab += a[k] * b[k];
    aa += a[k] * a[k];
    bb += b[k] * b[k];
  }
  return 1.0 - ab / (std::max(std::sqrt(aa), kClampMin) * std::max(std::sqrt(bb), kClampMin));
}

}  // namespace detail

// Rows that take part in neighbor search: all of them, or with tracked pairs
// the first B - t_max.
inline std::size_t tracked_rows(std::size_t b, const MleConfig& cfg) {
  if (!cfg.tracked_pairs) return b;
  const std::size_t t_max = cfg.t_max ? cfg.t_max : b / 4;
  return b > t_max ? b - t_max : 0;
}

// For each origin row i, the row j with |i - j| >= theiler_window closest to
// it (cosine distance 1 - cos, or euclidean). Ties go to the lower index.
inline std::vector<std::size_t> nearest_neighbors(const Tensor& z, const MleConfig& cfg) {
  detail::require_rank(z, 2, "nearest_neighbors");
  const std::size_t b = tracked_rows(z.dim(0), cfg), d = z.dim(1), w = cfg.theiler_window;
  const double* Z = z.values().data();
  std::vector<std::size_t> nn(b);
  for (std::size_t i = 0; i < b; ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = b;
    for (std::size_t j = 0; j < b; ++j) {
      if ((i > j ? i - j : j - i) < w) continue;
      double dist = detail::point_distance(Z + i * d, Z + j * d, d, cfg.metric);
      if (dist < best) {
        best = dist;
        arg = j;
      }
    }
    if (arg == b)
      throw EstimatorError("nearest_neighbors: row " + std::to_string(i) +
                           " has no candidate outside the Theiler window " + std::to_string(w) +
                           " among " + std::to_string(b) + " rows");
    nn[i] = arg;
  }
  return nn;
}

namespace detail {

// ln of every in-range pair distance for t = 0..t_max, one tensor entry per
// (pair, t), together with the step index of each entry.
struct DivergenceTerms {
  Tensor log_dist;
  std::vector<std::size_t> step;
  std::vector<std::size_t> counts;
};

inline DivergenceTerms divergence_terms(const Tensor& z, const std::vector<std::size_t>& pairs,
                                        const MleConfig& cfg) {
  const std::size_t b = z.dim(0);
  if (pairs.size() > b) throw std::invalid_argument("divergence_curve: more pairs than rows");
  std::vector<std::size_t> ia, ib;
  DivergenceTerms out;
  out.counts.assign(cfg.t_max + 1, 0);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const std::size_t j = pairs[i];
    if (j >= b) throw std::invalid_argument("divergence_curve: neighbor index out of range");
    for (std::size_t t = 0; t <= cfg.t_max && i + t < b && j + t < b; ++t) {
      ia.push_back(i + t);
      ib.push_back(j + t);
      out.step.push_back(t);
      ++out.counts[t];
    }
  }
  for (std::size_t t = cfg.t_lo; t <= cfg.t_hi; ++t)
    if (out.counts[t] == 0)
      throw EstimatorError("divergence_curve: no pair in range at step " + std::to_string(t) +
                           " of the fit range");
  Tensor a = gather_rows(z, ia), c = gather_rows(z, ib);
  Tensor dist = cfg.metric == Metric::cosine ? add_scalar(neg(cosine_sim(a, c)), 1.0)
                                             : row_norm2(sub(a, c));
  out.log_dist = ln(dist);  // ln clamps at kClampMin
  return out;
}

// OLS slope weights over t_lo..t_hi: slope = sum_t w_t y_t.
inline std::vector<double> ols_weights(std::size_t lo, std::size_t hi) {
  const double mean = 0.5 * static_cast<double>(lo + hi);
  double sxx = 0.0;
  for (std::size_t t = lo; t <= hi; ++t) sxx += (static_cast<double>(t) - mean) * (static_cast<double>(t) - mean);
  std::vector<double> w;
  for (std::size_t t = lo; t <= hi; ++t) w.push_back((static_cast<double>(t) - mean) / sxx);
  return w;
}

// Per-entry coefficients mapping log distances to the fitted slope.
inline std::vector<double> slope_coefficients(const DivergenceTerms& terms, const MleConfig& cfg) {
  auto w = ols_weights(cfg.t_lo, cfg.t_hi);
  std::vector<double> coef(terms.step.size(), 0.0);
  for (std::size_t k = 0; k < coef.size(); ++k) {
    const std::size_t t = terms.step[k];
    if (t < cfg.t_lo || t > cfg.t_hi) continue;
    coef[k] = w[t - cfg.t_lo] / (cfg.delta_t * static_cast<double>(terms.counts[t]));
  }
  return coef;
}

}  // namespace detail

// Ordinary least-squares slope of y against the step index over the fit
// range of cfg (already resolved).
inline double fit_slope(const std::vector<double>& y, std::size_t t_lo, std::size_t t_hi) {
  if (t_hi < t_lo || t_hi - t_lo + 1 < 2)
    throw EstimatorError("fit_slope: need at least 2 fit points");
  if (t_hi >= y.size()) throw EstimatorError("fit_slope: fit range exceeds the curve");
  auto w = detail::ols_weights(t_lo, t_hi);
  double s = 0.0;
  for (std::size_t t = t_lo; t <= t_hi; ++t) s += w[t - t_lo] * y[t];
  return s;
}

inline double fit_slope(const DivergenceCurve& c, const MleConfig& cfg) {
  return fit_slope(c.y, cfg.t_lo, cfg.t_hi);
}

// y_t = (1/dt) mean_i ln max(d_i(t), 1e-12) for t = 0..t_max, with the fitted
// slope. Values only; mle_loss is the taped form.
inline DivergenceCurve divergence_curve(const Tensor& z, const std::vector<std::size_t>& pairs,
                                        const MleConfig& raw) {
  detail::require_rank(z, 2, "divergence_curve");
  const MleConfig cfg = raw.resolved(z.dim(0));
  const std::size_t b = z.dim(0), d = z.dim(1);
  if (pairs.size() > b) throw std::invalid_argument("divergence_curve: more pairs than rows");
  const double* Z = z.values().data();
  DivergenceCurve c;
  c.valid_counts.assign(cfg.t_max + 1, 0);
  c.y.assign(cfg.t_max + 1, 0.0);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const std::size_t j = pairs[i];
    if (j >= b) throw std::invalid_argument("divergence_curve: neighbor index out of range");
    for (std::size_t t = 0; t <= cfg.t_max && i + t < b && j + t < b; ++t) {
      double dist = detail::point_distance(Z + (i + t) * d, Z + (j + t) * d, d, cfg.metric);
      c.y[t] += std::log(std::max(dist, kClampMin));
      ++c.valid_counts[t];
    }
  }
  for (std::size_t t = cfg.t_lo; t <= cfg.t_hi; ++t)
    if (c.valid_counts[t] == 0)
      throw EstimatorError("divergence_curve: no pair in range at step " + std::to_string(t) +
                           " of the fit range");
  for (std::size_t t = 0; t <= cfg.t_max; ++t)
    c.y[t] = c.valid_counts[t] ? c.y[t] / (cfg.delta_t * static_cast<double>(c.valid_counts[t]))
                               : std::numeric_limits<double>::quiet_NaN();
  c.lambda_hat = fit_slope(c, cfg);
  return c;
}

// Full estimator on vectors z [B][D].
inline DivergenceCurve mle_curve(const Tensor& z, const MleConfig& cfg) {
  return divergence_curve(z, nearest_neighbors(z, cfg.resolved(z.dim(0))), cfg);
}

inline double mle_estimate(const Tensor& z, const MleConfig& cfg) { return mle_curve(z, cfg).lambda_hat; }

// Full estimator on a scalar series via delay embedding.
inline double mle_estimate(const std::vector<double>& x, const MleConfig& cfg, std::size_t dim,
                           std::size_t lag) {
  return mle_estimate(delay_embed(x, dim, lag), cfg);
}

// True when a sequence of b tokens supports the estimator under cfg.
inline bool mle_feasible(std::size_t b, const MleConfig& cfg) {
  if (tracked_rows(b, cfg) < 2 * cfg.theiler_window + 2) return false;
  MleConfig c = cfg;
  if (c.t_max == 0) c.t_max = b / 4;
  if (c.t_hi == 0) c.t_hi = c.t_max;
  return c.t_lo >= 1 && c.t_lo < c.t_hi && c.t_hi <= c.t_max && c.t_hi < b;
}

// Differentiable slope estimate on latent tokens z [P][D]. Neighbors are
// computed from the current values (or taken from `frozen`) and held fixed.
// Returns nullopt when the sequence is too short for the estimator.
inline std::optional<Tensor> mle_loss(const Tensor& z, const MleConfig& cfg,
                                      const std::vector<std::size_t>* frozen = nullptr) {
  detail::require_rank(z, 2, "mle_loss");
  if (!mle_feasible(z.dim(0), cfg)) return std::nullopt;
  const MleConfig c = cfg.resolved(z.dim(0));
  std::vector<std::size_t> pairs = frozen ? *frozen : nearest_neighbors(z, c);
  // A neighbor layout can leave a fit step with no pair in range; that
  // sequence is as unusable as a too-short one.
  const std::size_t b = z.dim(0);
  for (std::size_t t = c.t_lo; t <= c.t_hi; ++t) {
    bool any = false;
    for (std::size_t i = 0; i < pairs.size() && !any; ++i) any = i + t < b && pairs[i] + t < b;
    if (!any) return std::nullopt;
  }
  auto terms = detail::divergence_terms(z, pairs, c);
  return weighted_sum(terms.log_dist, detail::slope_coefficients(terms, c));
}

}  // namespace dynenc
