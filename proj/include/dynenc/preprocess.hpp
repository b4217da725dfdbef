#pragma once
// Input path: instance normalization, patch tokenization, data projection.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dynenc/tensor.hpp"

namespace dynenc {

inline constexpr double kNormEps = 1e-5;

// Per-dimension statistics of one object's input window.
struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;  // >= kNormEps
};

inline std::vector<double> apply_norm(const std::vector<double>& x, const NormStats& s) {
  const std::size_t dims = s.mean.size();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - s.mean[i % dims]) / s.std[i % dims];
  return out;
}

// x: [T][V] row-major. Returns the standardized window and its statistics
// (population variance, std floored at kNormEps).
inline std::pair<std::vector<double>, NormStats> instance_normalize(const std::vector<double>& x,
                                                                    std::size_t dims) {
  if (dims == 0 || x.empty() || x.size() % dims != 0)
    throw std::invalid_argument("instance_normalize: input is not [T][V]");
  const std::size_t T = x.size() / dims;
  NormStats s{std::vector<double>(dims, 0.0), std::vector<double>(dims, 0.0)};
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t v = 0; v < dims; ++v) s.mean[v] += x[t * dims + v];
  for (auto& m : s.mean) m /= static_cast<double>(T);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t v = 0; v < dims; ++v) {
      double d = x[t * dims + v] - s.mean[v];
      s.std[v] += d * d;
    }
  for (auto& sd : s.std) sd = std::max(std::sqrt(sd / static_cast<double>(T)), kNormEps);
  return {apply_norm(x, s), s};
}

inline std::vector<double> denormalize(const std::vector<double>& x, const NormStats& s) {
  const std::size_t dims = s.mean.size();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * s.std[i % dims] + s.mean[i % dims];
  return out;
}

struct PatchConfig {
  std::size_t patch_len = 25;
  std::size_t stride = 6;

  void validate(std::size_t t_in) const {
    if (!(stride >= 1 && stride <= patch_len && patch_len <= t_in))
      throw std::invalid_argument("PatchConfig: need 1 <= stride <= patch_len <= T_in (got L_p=" +
                                  std::to_string(patch_len) + ", R=" + std::to_string(stride) +
                                  ", T_in=" + std::to_string(t_in) + ")");
  }

  // floor((T_in - L_p) / R) + 2
  std::size_t count(std::size_t t_in) const {
    validate(t_in);
    return (t_in - patch_len) / stride + 2;
  }

  // Start offsets: the stride grid 0, R, 2R, ... plus one right-aligned patch
  // at T_in - L_p (which may repeat the last grid patch).
  std::vector<std::size_t> offsets(std::size_t t_in) const {
    const std::size_t p = count(t_in);
    std::vector<std::size_t> off;
    off.reserve(p);
    for (std::size_t i = 0; i + 1 < p; ++i) off.push_back(i * stride);
    off.push_back(t_in - patch_len);
    return off;
  }
};

// x: [T_in][V] -> Tensor [P][L_p][V].
inline Tensor patchify(const std::vector<double>& x, std::size_t dims, const PatchConfig& cfg) {
  if (dims == 0 || x.size() % dims != 0) throw std::invalid_argument("patchify: input is not [T][V]");
  const std::size_t T = x.size() / dims;
  if (cfg.patch_len > T)
    throw std::invalid_argument("patchify: patch length " + std::to_string(cfg.patch_len) +
                                " exceeds input length " + std::to_string(T));
  auto off = cfg.offsets(T);
  std::vector<double> out;
  out.reserve(off.size() * cfg.patch_len * dims);
  for (auto o : off)
    out.insert(out.end(), x.begin() + static_cast<std::ptrdiff_t>(o * dims),
               x.begin() + static_cast<std::ptrdiff_t>((o + cfg.patch_len) * dims));
  return Tensor::from({off.size(), cfg.patch_len, dims}, std::move(out));
}

// Flattens each patch and maps it to the model dimension:
// patches [P][L_p][V] (or already [P][L_p*V]), w_dp [D][L_p*V] -> [P][D].
inline Tensor project(const Tensor& patches, const Tensor& w_dp, const std::string& system_id) {
  const std::size_t p = patches.dim(0);
  const std::size_t flat = patches.size() / p;
  if (w_dp.rank() != 2 || w_dp.dim(1) != flat)
    throw ShapeError("project[" + system_id + "]: patches " + shape_str(patches.shape()) +
                     " need a [D," + std::to_string(flat) + "] projection, got " +
                     shape_str(w_dp.shape()));
  return matmul(reshape(patches, {p, flat}), transpose(w_dp));
}

}  // namespace dynenc
