#pragma once
// Interaction graphs and their normalized Laplacian.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynenc/io.hpp"
#include "dynenc/tensor.hpp"

namespace dynenc {

struct InteractionGraph {
  std::size_t n_nodes = 0;
  std::vector<double> adjacency;  // n x n row-major
  bool symmetric = true;

  double operator()(std::size_t i, std::size_t j) const { return adjacency[i * n_nodes + j]; }
  double& operator()(std::size_t i, std::size_t j) { return adjacency[i * n_nodes + j]; }

  double degree(std::size_t i) const {
    double d = 0.0;
    for (std::size_t j = 0; j < n_nodes; ++j) d += (*this)(i, j);
    return d;
  }

  std::size_t edge_count() const {
    std::size_t c = 0;
    for (double w : adjacency) c += w > 0 ? 1 : 0;
    return c;
  }

  // Throws if the graph breaks its invariants.
  void validate() const {
    if (adjacency.size() != n_nodes * n_nodes)
      throw std::invalid_argument("graph: adjacency size mismatch");
    for (std::size_t i = 0; i < n_nodes; ++i) {
      if ((*this)(i, i) != 0.0) throw std::invalid_argument("graph: nonzero diagonal");
      for (std::size_t j = 0; j < n_nodes; ++j) {
        if (!((*this)(i, j) >= 0.0)) throw std::invalid_argument("graph: negative weight");
        if (symmetric && (*this)(i, j) != (*this)(j, i))
          throw std::invalid_argument("graph: flagged symmetric but A != A^T");
      }
    }
  }

  static InteractionGraph from_adjacency(std::size_t n, std::vector<double> a) {
    InteractionGraph g{n, std::move(a), true};
    for (std::size_t i = 0; i < n && g.symmetric; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (g(i, j) != g(j, i)) {
          g.symmetric = false;
          break;
        }
    g.validate();
    return g;
  }
};

// Unit-weight grid; neighborhood 4 (von Neumann) or 8 (Moore).
inline InteractionGraph grid_graph(std::size_t rows, std::size_t cols, int neighborhood = 8) {
  if (rows < 1 || cols < 1) throw std::invalid_argument("grid_graph: rows and cols must be >= 1");
  if (neighborhood != 4 && neighborhood != 8)
    throw std::invalid_argument("grid_graph: neighborhood must be 4 or 8");
  const std::size_t n = rows * cols;
  InteractionGraph g{n, std::vector<double>(n * n, 0.0), true};
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          if (dr == 0 && dc == 0) continue;
          if (neighborhood == 4 && dr != 0 && dc != 0) continue;
          const auto rr = static_cast<long>(r) + dr, cc = static_cast<long>(c) + dc;
          if (rr < 0 || cc < 0 || rr >= static_cast<long>(rows) || cc >= static_cast<long>(cols))
            continue;
          g(r * cols + c, static_cast<std::size_t>(rr) * cols + static_cast<std::size_t>(cc)) = 1.0;
        }
  return g;
}

// Thresholded Gaussian kernel: w = exp(-dist^2 / delta2), kept iff w >= eps.
// The decaying sign is used (weights shrink with distance).
inline InteractionGraph gaussian_kernel_graph(const std::vector<double>& dist, std::size_t n,
                                              double delta2, double eps) {
  if (dist.size() != n * n) throw std::invalid_argument("gaussian_kernel_graph: dist is not n x n");
  if (!(delta2 > 0)) throw std::invalid_argument("gaussian_kernel_graph: delta2 must be > 0");
  if (!(eps > 0 && eps <= 1)) throw std::invalid_argument("gaussian_kernel_graph: eps must be in (0,1]");
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double d = dist[i * n + j];
      if (!(d >= 0)) throw std::invalid_argument("gaussian_kernel_graph: negative distance");
      if (d != dist[j * n + i]) throw std::invalid_argument("gaussian_kernel_graph: asymmetric distances");
    }
  InteractionGraph g{n, std::vector<double>(n * n, 0.0), true};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      double d = dist[i * n + j];
      double w = std::exp(-d * d / delta2);
      g(i, j) = w >= eps ? w : 0.0;
    }
  return g;
}

inline InteractionGraph gaussian_kernel_graph_csv(const fs::path& path, double delta2, double eps) {
  auto t = read_csv(path, /*allow_header=*/true);
  if (t.rows != t.cols)
    throw ParseError(path.string() + ": distance matrix must be square, got " +
                     std::to_string(t.rows) + "x" + std::to_string(t.cols));
  return gaussian_kernel_graph(t.values, t.rows, delta2, eps);
}

// D^{-1/2} (D - A) D^{-1/2}. Zero-degree nodes get a zero row and column.
inline Tensor normalized_laplacian(const InteractionGraph& g) {
  const std::size_t n = g.n_nodes;
  std::vector<double> inv_sqrt(n);
  for (std::size_t i = 0; i < n; ++i) {
    double d = g.degree(i);
    inv_sqrt[i] = d > 0 ? 1.0 / std::sqrt(d) : 0.0;
  }
  std::vector<double> L(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double lij = (i == j ? g.degree(i) : 0.0) - g(i, j);
      L[i * n + j] = lij * (inv_sqrt[i] * inv_sqrt[j]);
    }
  return Tensor::from({n, n}, std::move(L));
}

inline void write_adjacency_csv(const fs::path& path, const InteractionGraph& g) {
  write_csv(path, g.n_nodes, g.adjacency);
}

inline InteractionGraph read_adjacency_csv(const fs::path& path) {
  auto t = read_csv(path);
  if (t.rows != t.cols) throw ParseError(path.string() + ": adjacency must be square");
  return InteractionGraph::from_adjacency(t.rows, t.values);
}

}  // namespace dynenc
