#pragma once
// Synthetic graph dynamics generators and the on-disk observation format.
//
//   heat         dx_i/dt = -k sum_j A_ij (x_i - x_j)
//   mutualistic  dx_i/dt = b + x_i (1 - x_i/k)(x_i/c - 1)
//                          + sum_j A_ij x_i x_j / (d + e x_i + h x_j)
//   gene         dx_i/dt = -b x_i^f + sum_j A_ij x_j^h / (x_j^h + 1)
//
// Ground truth is RK4 at the internal step `dt`, recording every
// `record_every` steps.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "dynenc/graph.hpp"
#include "dynenc/io.hpp"
#include "dynenc/ode.hpp"
#include "dynenc/rng.hpp"

namespace dynenc {

enum class SystemKind { heat, mutualistic, gene, imported };

inline SystemKind parse_system_kind(const std::string& s) {
  if (s == "heat") return SystemKind::heat;
  if (s == "mutualistic") return SystemKind::mutualistic;
  if (s == "gene") return SystemKind::gene;
  if (s == "imported") return SystemKind::imported;
  throw std::invalid_argument("unknown system '" + s + "' (expected heat, mutualistic or gene)");
}

inline std::string system_kind_name(SystemKind k) {
  switch (k) {
    case SystemKind::heat: return "heat";
    case SystemKind::mutualistic: return "mutualistic";
    case SystemKind::gene: return "gene";
    case SystemKind::imported: return "imported";
  }
  return "?";
}

using ParamMap = std::map<std::string, double>;

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SystemSpec {
  SystemKind kind = SystemKind::heat;
  InteractionGraph graph;
  ParamMap params;
  std::size_t horizon = 150;      // recorded steps T
  double dt = 0.01;               // internal integration step
  std::size_t record_every = 10;  // recorded spacing = dt * record_every
  std::size_t state_dim = 1;
  double init_lo = 0.0, init_hi = 25.0;

  double record_dt() const { return dt * static_cast<double>(record_every); }

  double param(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end())
      throw std::invalid_argument(system_kind_name(kind) + ": missing parameter '" + name + "'");
    return it->second;
  }

  void validate() const {
    if (!(dt > 0)) throw std::invalid_argument("SystemSpec: dt must be > 0");
    if (horizon < 2) throw std::invalid_argument("SystemSpec: horizon must be >= 2");
    if (record_every < 1) throw std::invalid_argument("SystemSpec: record_every must be >= 1");
    if (state_dim != 1) throw std::invalid_argument("SystemSpec: generators are one-dimensional");
    graph.validate();
    switch (kind) {
      case SystemKind::heat:
        if (!(param("k") > 0)) throw std::invalid_argument("heat: k must be > 0");
        break;
      case SystemKind::mutualistic:
        for (auto* n : {"b", "k", "c", "d", "e", "h"}) (void)param(n);
        if (!(param("b") >= 0) || !(param("k") > 0) || !(param("c") > 0) || !(param("d") > 0))
          throw std::invalid_argument("mutualistic: need b >= 0 and k, c, d > 0");
        break;
      case SystemKind::gene:
        for (auto* n : {"b", "f", "h"}) (void)param(n);
        if (!(param("b") > 0) || !(param("f") > 0) || !(param("h") > 0))
          throw std::invalid_argument("gene: b, f, h must be > 0");
        break;
      case SystemKind::imported:
        throw std::invalid_argument("imported data cannot be generated");
    }
  }
};

// Default parameters; randomized entries are drawn from `rng`.
//   heat: k ~ U[0.5, 2]
//   mutualistic: b ~ U[0.05, 0.2], k = c = d = e = h = 1, init U[0, 5]
//   gene: b = 1, f = 1, h = 2
inline SystemSpec default_spec(SystemKind kind, InteractionGraph graph, Rng& rng) {
  SystemSpec s;
  s.kind = kind;
  s.graph = std::move(graph);
  switch (kind) {
    case SystemKind::heat:
      s.params = {{"k", uniform(rng, 0.5, 2.0)}};
      break;
    case SystemKind::mutualistic:
      s.params = {{"b", uniform(rng, 0.05, 0.2)}, {"k", 1.0}, {"c", 1.0},
                  {"d", 1.0}, {"e", 1.0}, {"h", 1.0}};
      s.init_hi = 5.0;
      break;
    case SystemKind::gene:
      s.params = {{"b", 1.0}, {"f", 1.0}, {"h", 2.0}};
      break;
    case SystemKind::imported:
      throw std::invalid_argument("default_spec: imported has no generator");
  }
  return s;
}

inline std::vector<double> system_rhs(SystemKind kind, const ParamMap& params,
                                      const InteractionGraph& g, const std::vector<double>& x) {
  const std::size_t n = g.n_nodes;
  if (x.size() != n) throw std::invalid_argument("system_rhs: state size does not match graph");
  auto p = [&](const char* name) {
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument(std::string("missing parameter ") + name);
    return it->second;
  };
  std::vector<double> dx(n, 0.0);
  switch (kind) {
    case SystemKind::heat: {
      const double k = p("k");
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += g(i, j) * (x[i] - x[j]);
        dx[i] = -k * s;
      }
      break;
    }
    case SystemKind::mutualistic: {
      const double b = p("b"), kk = p("k"), c = p("c"), d = p("d"), e = p("e"), h = p("h");
      for (std::size_t i = 0; i < n; ++i) {
        double s = b + x[i] * (1 - x[i] / kk) * (x[i] / c - 1);
        for (std::size_t j = 0; j < n; ++j)
          if (g(i, j) != 0.0) s += g(i, j) * x[i] * x[j] / (d + e * x[i] + h * x[j]);
        dx[i] = s;
      }
      break;
    }
    case SystemKind::gene: {
      const double b = p("b"), f = p("f"), h = p("h");
      std::vector<double> hill(n);
      for (std::size_t j = 0; j < n; ++j) {
        double xh = std::pow(x[j], h);
        hill[j] = xh / (xh + 1);
      }
      for (std::size_t i = 0; i < n; ++i) {
        double s = -b * std::pow(x[i], f);
        for (std::size_t j = 0; j < n; ++j) s += g(i, j) * hill[j];
        dx[i] = s;
      }
      break;
    }
    case SystemKind::imported:
      throw std::invalid_argument("system_rhs: imported data has no vector field");
  }
  for (double v : dx)
    if (!std::isfinite(v)) throw DivergenceError("system_rhs: non-finite derivative");
  return dx;
}

// Observations x[m][n][t][v] of one system.
struct ObservationSet {
  std::string system_id;  // e.g. "heat" or "heat/k=1.2"; used for heads and exclusion
  SystemSpec spec;
  std::size_t samples = 0, objects = 0, steps = 0, dims = 1;
  std::size_t t_in = 0;
  std::uint64_t seed = 0;
  std::vector<double> x;

  std::size_t index(std::size_t m, std::size_t n, std::size_t t, std::size_t v = 0) const {
    return ((m * objects + n) * steps + t) * dims + v;
  }
  double at(std::size_t m, std::size_t n, std::size_t t, std::size_t v = 0) const {
    return x[index(m, n, t, v)];
  }
  // One object's trajectory, [steps * dims] row-major.
  std::vector<double> series(std::size_t m, std::size_t n) const {
    auto b = x.begin() + static_cast<std::ptrdiff_t>(index(m, n, 0));
    return {b, b + static_cast<std::ptrdiff_t>(steps * dims)};
  }
  double record_dt() const { return spec.record_dt(); }

  void validate() const {
    if (x.size() != samples * objects * steps * dims)
      throw std::invalid_argument("ObservationSet: data size does not match shape");
    if (!(t_in >= 1 && t_in < steps))
      throw std::invalid_argument("ObservationSet: need 1 <= t_in < steps");
    for (double v : x)
      if (!std::isfinite(v)) throw std::invalid_argument("ObservationSet: non-finite value");
  }
};

inline std::size_t default_t_in(std::size_t steps) {
  std::size_t t = 2 * steps / 3;
  return std::clamp<std::size_t>(t, 1, steps - 1);
}

inline std::string default_system_id(const SystemSpec& s) {
  std::ostringstream os;
  os << system_kind_name(s.kind);
  return os.str();
}

// Number of generation worker threads: DYNENC_THREADS or hardware concurrency.
inline std::size_t worker_threads() {
  if (const char* env = std::getenv("DYNENC_THREADS")) {
    long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

namespace detail {

inline void generate_sample(const SystemSpec& spec, std::uint64_t seed, std::size_t m,
                            std::vector<double>& out_block) {
  const std::size_t n = spec.graph.n_nodes;
  Rng rng = make_stream(seed, "corpus.sample", m);
  std::vector<double> x(n);
  for (auto& v : x) v = uniform(rng, spec.init_lo, spec.init_hi);
  VectorField<std::vector<double>> f = [&spec](double, const std::vector<double>& s) {
    return system_rhs(spec.kind, spec.params, spec.graph, s);
  };
  SolveStats st;
  for (std::size_t t = 0; t < spec.horizon; ++t) {
    if (t > 0) {
      for (std::size_t k = 0; k < spec.record_every; ++k) {
        x = fixed_step(f, 0.0, x, spec.dt, Method::rk4, st);
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::isfinite(x[i]) || std::abs(x[i]) > 1e6) {
        std::ostringstream os;
        os << system_kind_name(spec.kind) << ": sample " << m << " diverged at step " << t;
        throw DivergenceError(os.str());
      }
      out_block[i * spec.horizon + t] = x[i];
    }
  }
}

}  // namespace detail

// Integrates m_samples trajectories from independent random initial values.
// Each sample owns the RNG stream (seed, sample index), so the result does not
// depend on the number of worker threads.
inline ObservationSet generate(const SystemSpec& spec, std::size_t m_samples, std::uint64_t seed,
                               std::size_t threads = 0) {
  spec.validate();
  if (m_samples < 1) throw std::invalid_argument("generate: m_samples must be >= 1");
  ObservationSet obs;
  obs.system_id = default_system_id(spec);
  obs.spec = spec;
  obs.samples = m_samples;
  obs.objects = spec.graph.n_nodes;
  obs.steps = spec.horizon;
  obs.dims = 1;
  obs.t_in = default_t_in(spec.horizon);
  obs.seed = seed;
  obs.x.assign(m_samples * obs.objects * obs.steps, 0.0);
  const std::size_t block = obs.objects * obs.steps;
  if (threads == 0) threads = worker_threads();
  threads = std::min(threads, m_samples);
  std::vector<std::exception_ptr> errors(threads);
  auto work = [&](std::size_t w) {
    try {
      for (std::size_t m = w; m < m_samples; m += threads) {
        std::vector<double> buf(block);
        detail::generate_sample(spec, seed, m, buf);
        std::copy(buf.begin(), buf.end(), obs.x.begin() + static_cast<std::ptrdiff_t>(m * block));
      }
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  if (threads <= 1) {
    work(0);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(work, w);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return obs;
}

// ---- on-disk format ----------------------------------------------------------
// <dir>/meta.json, <dir>/data.f64le ([m][n][t][v] little-endian doubles),
// <dir>/adjacency.csv

inline void save_observations(const ObservationSet& obs, const fs::path& dir) {
  fs::create_directories(dir);
  Json meta;
  meta["format"] = "dynenc.observations/1";
  meta["system_id"] = obs.system_id;
  meta["kind"] = system_kind_name(obs.spec.kind);
  meta["params"] = obs.spec.params;
  meta["shape"] = {obs.samples, obs.objects, obs.steps, obs.dims};
  meta["dt"] = obs.spec.dt;
  meta["record_every"] = obs.spec.record_every;
  meta["record_dt"] = obs.record_dt();
  meta["t_in"] = obs.t_in;
  meta["seed"] = obs.seed;
  meta["init_range"] = {obs.spec.init_lo, obs.spec.init_hi};
  write_json(dir / "meta.json", meta);
  write_f64le(dir / "data.f64le", obs.x);
  write_adjacency_csv(dir / "adjacency.csv", obs.spec.graph);
}

inline ObservationSet load_observations(const fs::path& dir) {
  if (!fs::exists(dir / "meta.json")) throw IoError(dir.string() + ": missing meta.json");
  Json meta = read_json(dir / "meta.json");
  ObservationSet obs;
  try {
    obs.system_id = meta.at("system_id").get<std::string>();
    obs.spec.kind = parse_system_kind(meta.at("kind").get<std::string>());
    obs.spec.params = meta.at("params").get<ParamMap>();
    auto shape = meta.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 4) throw ParseError("shape must have 4 entries");
    obs.samples = shape[0];
    obs.objects = shape[1];
    obs.steps = shape[2];
    obs.dims = shape[3];
    obs.spec.dt = meta.at("dt").get<double>();
    obs.spec.record_every = meta.at("record_every").get<std::size_t>();
    obs.spec.horizon = obs.steps;
    obs.spec.state_dim = obs.dims;
    obs.t_in = meta.at("t_in").get<std::size_t>();
    obs.seed = meta.value("seed", std::uint64_t{0});
    if (meta.contains("init_range")) {
      obs.spec.init_lo = meta["init_range"][0].get<double>();
      obs.spec.init_hi = meta["init_range"][1].get<double>();
    }
  } catch (const Json::exception& e) {
    throw ParseError(dir.string() + "/meta.json: " + e.what());
  }
  obs.x = read_f64le(dir / "data.f64le");
  if (fs::exists(dir / "adjacency.csv")) {
    obs.spec.graph = read_adjacency_csv(dir / "adjacency.csv");
  } else {
    obs.spec.graph = InteractionGraph{obs.objects, std::vector<double>(obs.objects * obs.objects, 0.0), true};
  }
  if (obs.spec.graph.n_nodes != obs.objects)
    throw ParseError(dir.string() + ": adjacency size does not match object count");
  obs.validate();
  return obs;
}

// Single-sample import: rows are time steps, columns are objects x dims
// (object-major: n0v0, n0v1, ..., n1v0, ...).
inline ObservationSet import_csv(const fs::path& path, std::size_t n_objects, std::size_t state_dim) {
  if (n_objects < 1 || state_dim < 1) throw std::invalid_argument("import_csv: counts must be >= 1");
  auto t = read_csv(path);
  if (t.cols != n_objects * state_dim)
    throw ParseError(path.string() + ": expected " + std::to_string(n_objects * state_dim) +
                     " columns, found " + std::to_string(t.cols));
  if (t.rows < 2) throw ParseError(path.string() + ": need at least 2 rows");
  ObservationSet obs;
  obs.system_id = path.stem().string();
  obs.spec.kind = SystemKind::imported;
  obs.spec.graph = InteractionGraph{n_objects, std::vector<double>(n_objects * n_objects, 0.0), true};
  obs.spec.horizon = t.rows;
  obs.spec.dt = 1.0;
  obs.spec.record_every = 1;
  obs.spec.state_dim = state_dim;
  obs.samples = 1;
  obs.objects = n_objects;
  obs.steps = t.rows;
  obs.dims = state_dim;
  obs.t_in = default_t_in(t.rows);
  obs.x.resize(t.values.size());
  for (std::size_t r = 0; r < t.rows; ++r)
    for (std::size_t n = 0; n < n_objects; ++n)
      for (std::size_t v = 0; v < state_dim; ++v)
        obs.x[obs.index(0, n, r, v)] = t(r, n * state_dim + v);
  return obs;
}

// Inverse of import_csv for one sample.
inline void export_csv(const ObservationSet& obs, std::size_t sample, const fs::path& path) {
  std::vector<double> rows(obs.steps * obs.objects * obs.dims);
  const std::size_t cols = obs.objects * obs.dims;
  for (std::size_t t = 0; t < obs.steps; ++t)
    for (std::size_t n = 0; n < obs.objects; ++n)
      for (std::size_t v = 0; v < obs.dims; ++v)
        rows[t * cols + n * obs.dims + v] = obs.at(sample, n, t, v);
  write_csv(path, cols, rows);
}

}  // namespace dynenc
