#pragma once
// Losses, Adam, corpus registration and batch sampling, multi-system
// pre-training and graph-ODE fine-tuning.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "dynenc/graph.hpp"
#include "dynenc/io.hpp"
#include "dynenc/lyapunov.hpp"
#include "dynenc/metrics.hpp"
#include "dynenc/ode.hpp"
#include "dynenc/preprocess.hpp"
#include "dynenc/rng.hpp"
#include "dynenc/seqmodel.hpp"
#include "dynenc/systems.hpp"
#include "dynenc/tensor.hpp"

namespace dynenc {

// Warnings go to stderr unless silenced (tests silence them).
inline bool& warnings_enabled() {
  static bool on = true;
  return on;
}

inline void warn(const std::string& msg) {
  if (warnings_enabled()) std::cerr << "warning: " << msg << '\n';
}

// Mean absolute deviation.
inline Tensor l1_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape())
    throw ShapeError("l1_loss: pred " + shape_str(pred.shape()) + " vs target " +
                     shape_str(target.shape()));
  return mean(abs(sub(pred, target)));
}

// ---- optimizer ---------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip = 1.0;  // global gradient-norm bound; <= 0 disables
};

// Learning rate per parameter name; 0 freezes the parameter.
using LrPolicy = std::function<double(const std::string&)>;

inline LrPolicy group_lr(double backbone, double rest, bool freeze_backbone = false,
                         bool freeze_conv = false) {
  return [=](const std::string& name) {
    if (is_backbone_param(name)) return freeze_backbone ? 0.0 : backbone;
    if (name.rfind("encoder.conv", 0) == 0) return freeze_conv ? 0.0 : rest;
    return rest;
  };
}

struct StepReport {
  bool applied = false;
  double grad_norm = 0.0;  // before clipping
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  // Updates every parameter with a gradient and a nonzero rate, then clears
  // all gradients. Non-finite gradients skip the update.
  StepReport step(ModelParams& p, const LrPolicy& lr) {
    StepReport rep;
    double sq = 0.0;
    bool finite = true;
    for (auto& [name, t] : p.tensors) {
      if (!t.has_grad() || lr(name) == 0.0) continue;
      for (double g : t.grad()) {
        if (!std::isfinite(g)) finite = false;
        sq += g * g;
      }
    }
    rep.grad_norm = std::sqrt(sq);
    if (!finite) {
      warn("non-finite gradient; optimizer step skipped");
      zero_grads(p);
      return rep;
    }
    const double scale = cfg_.clip > 0 && rep.grad_norm > cfg_.clip ? cfg_.clip / rep.grad_norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, t] : p.tensors) {
      const double rate = lr(name);
      if (!t.has_grad() || rate == 0.0) continue;
      auto& st = state_[name];
      if (st.m.size() != t.size()) {
        st.m.assign(t.size(), 0.0);
        st.v.assign(t.size(), 0.0);
      }
      auto g = t.grad();
      auto w = t.mutable_data();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i] * scale;
        st.m[i] = cfg_.beta1 * st.m[i] + (1 - cfg_.beta1) * gi;
        st.v[i] = cfg_.beta2 * st.v[i] + (1 - cfg_.beta2) * gi * gi;
        w[i] -= rate * (st.m[i] / bc1) / (std::sqrt(st.v[i] / bc2) + cfg_.eps);
      }
    }
    zero_grads(p);
    rep.applied = true;
    return rep;
  }

  static void zero_grads(ModelParams& p) {
    for (auto& [_, t] : p.tensors) t.zero_grad();
  }

  std::size_t steps() const { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> state_;
};

// ---- flat key=value configs -------------------------------------------------

using KvMap = std::map<std::string, std::string>;

// "key = value" per line; '#' starts a comment.
inline KvMap parse_kv(std::istream& in, const std::string& source = "<config>") {
  KvMap kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ParseError(source + ":" + std::to_string(lineno) + ": expected key = value");
    auto key = detail::trim(line.substr(0, eq));
    auto val = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ParseError(source + ":" + std::to_string(lineno) + ": empty key");
    kv[key] = val;
  }
  return kv;
}

inline KvMap parse_kv_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return parse_kv(in, path.string());
}

namespace detail {

// Consumes known keys from a KvMap; leftovers are reported as unknown.
class KvReader {
 public:
  explicit KvReader(KvMap kv) : kv_(std::move(kv)) {}

  template <class T>
  void read(const std::string& key, T& out) {
    auto it = kv_.find(key);
    if (it == kv_.end()) return;
    std::istringstream is(it->second);
    if constexpr (std::is_same_v<T, bool>) {
      const auto& s = it->second;
      if (s == "true" || s == "1")
        out = true;
      else if (s == "false" || s == "0")
        out = false;
      else
        throw ParseError("config key '" + key + "': expected true/false, got '" + s + "'");
    } else if constexpr (std::is_same_v<T, std::string>) {
      out = it->second;
    } else {
      T v{};
      if constexpr (std::is_unsigned_v<T>) {
        if (!it->second.empty() && it->second[0] == '-')
          throw ParseError("config key '" + key + "': expected a non-negative count");
      }
      if (!(is >> v) || !(is >> std::ws).eof())
        throw ParseError("config key '" + key + "': cannot parse '" + it->second + "'");
      out = v;
    }
    kv_.erase(it);
  }

  void finish() const {
    if (!kv_.empty()) throw ParseError("unknown config key '" + kv_.begin()->first + "'");
  }

 private:
  KvMap kv_;
};

}  // namespace detail

// ---- corpora ---------------------------------------------------------------

struct WindowConfig {
  std::size_t window = 150;  // look-back window length; stride = window
  std::size_t t_in = 100;
  PatchConfig patch;

  void validate() const {
    if (!(t_in >= 1 && t_in < window))
      throw std::invalid_argument("WindowConfig: need 1 <= t_in < window");
    patch.validate(t_in);
  }
  std::size_t patches() const { return patch.count(t_in); }
};

// One registered system: windows cut from every sample.
struct Corpus {
  const ObservationSet* obs = nullptr;
  std::string system_id;
  std::string kind;  // system kind name, for system-level exclusion
  std::vector<std::pair<std::size_t, std::size_t>> windows;  // (sample, start)
  bool excluded = false;

  std::size_t count() const { return windows.size(); }
};

// One training sequence: object n of one window.
struct Example {
  std::size_t corpus = 0;
  std::vector<double> x_in;   // [t_in][V]
  std::vector<double> x_out;  // [window - t_in][V]
};

class CorpusRegistry {
 public:
  explicit CorpusRegistry(WindowConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }

  const WindowConfig& config() const { return cfg_; }

  // Registers a corpus and cuts look-back windows with stride = window.
  void add(const ObservationSet& obs) {
    if (obs.steps < cfg_.window)
      throw std::invalid_argument("corpus '" + obs.system_id + "' has " + std::to_string(obs.steps) +
                                  " steps, shorter than the look-back window " +
                                  std::to_string(cfg_.window));
    for (const auto& c : corpora_)
      if (c.system_id == obs.system_id)
        throw std::invalid_argument("corpus '" + obs.system_id + "' registered twice");
    Corpus c;
    c.obs = &obs;
    c.system_id = obs.system_id;
    c.kind = system_kind_name(obs.spec.kind);
    for (std::size_t m = 0; m < obs.samples; ++m)
      for (std::size_t s = 0; s + cfg_.window <= obs.steps; s += cfg_.window) c.windows.push_back({m, s});
    corpora_.push_back(std::move(c));
  }

  // Leave-one-out filters: by system kind or by system id (parameter set).
  void exclude(const std::vector<std::string>& kinds, const std::vector<std::string>& ids) {
    for (auto& c : corpora_) {
      if (std::find(kinds.begin(), kinds.end(), c.kind) != kinds.end()) c.excluded = true;
      if (std::find(ids.begin(), ids.end(), c.system_id) != ids.end()) c.excluded = true;
    }
    for (const auto& k : kinds)
      if (std::none_of(corpora_.begin(), corpora_.end(), [&](const Corpus& c) { return c.kind == k; }))
        warn("exclusion of system kind '" + k + "' matched no corpus");
    for (const auto& k : ids)
      if (std::none_of(corpora_.begin(), corpora_.end(),
                       [&](const Corpus& c) { return c.system_id == k; }))
        warn("exclusion of system id '" + k + "' matched no corpus");
  }

  const std::vector<Corpus>& corpora() const { return corpora_; }

  std::vector<std::size_t> active() const {
    std::vector<std::size_t> a;
    for (std::size_t i = 0; i < corpora_.size(); ++i)
      if (!corpora_[i].excluded) a.push_back(i);
    return a;
  }

  HeadShape head_shape(std::size_t i) const {
    const auto& o = *corpora_.at(i).obs;
    return {o.dims, cfg_.patch.patch_len, cfg_.patches(), cfg_.t_in, cfg_.window - cfg_.t_in};
  }

  // Creates heads for every active corpus.
  void ensure_heads(ModelParams& p) const {
    for (auto i : active()) ensure_system(p, corpora_[i].system_id, head_shape(i));
  }

  Example example(std::size_t corpus, std::size_t window, std::size_t object) const {
    const auto& c = corpora_.at(corpus);
    const auto& o = *c.obs;
    auto [m, start] = c.windows.at(window);
    auto s = o.series(m, object);
    const auto V = static_cast<std::ptrdiff_t>(o.dims);
    auto b = s.begin() + static_cast<std::ptrdiff_t>(start) * V;
    Example e;
    e.corpus = corpus;
    e.x_in.assign(b, b + static_cast<std::ptrdiff_t>(cfg_.t_in) * V);
    e.x_out.assign(b + static_cast<std::ptrdiff_t>(cfg_.t_in) * V,
                   b + static_cast<std::ptrdiff_t>(cfg_.window) * V);
    return e;
  }

 private:
  WindowConfig cfg_;
  std::vector<Corpus> corpora_;
};

// Draws batch elements: corpus proportional to its window count among the
// allowed corpora, then a window and an object uniformly.
class BatchSampler {
 public:
  BatchSampler(const CorpusRegistry& reg, std::uint64_t seed)
      : reg_(reg), rng_(make_stream(seed, "sampler")), audit_(reg.corpora().size(), 0) {}

  // Subset of active corpora for one round, without replacement.
  std::vector<std::size_t> choose_systems(std::size_t k) {
    auto a = reg_.active();
    if (a.empty()) throw std::invalid_argument("no active corpus to sample from");
    for (std::size_t i = a.size(); i > 1; --i) std::swap(a[i - 1], a[uniform_index(rng_, i)]);
    a.resize(std::min(k, a.size()));
    std::sort(a.begin(), a.end());
    return a;
  }

  std::vector<Example> draw(const std::vector<std::size_t>& allowed, std::size_t batch) {
    double total = 0.0;
    for (auto i : allowed) {
      if (reg_.corpora().at(i).excluded) throw std::logic_error("sampler: excluded corpus allowed");
      total += static_cast<double>(reg_.corpora()[i].count());
    }
    if (!(total > 0)) throw std::invalid_argument("sampler: allowed corpora are empty");
    std::vector<Example> out;
    for (std::size_t b = 0; b < batch; ++b) {
      double u = uniform(rng_, 0.0, total);
      std::size_t pick = allowed.back();
      for (auto i : allowed) {
        u -= static_cast<double>(reg_.corpora()[i].count());
        if (u < 0) {
          pick = i;
          break;
        }
      }
      const auto& c = reg_.corpora()[pick];
      std::size_t w = uniform_index(rng_, c.count());
      std::size_t n = uniform_index(rng_, c.obs->objects);
      ++audit_[pick];
      out.push_back(reg_.example(pick, w, n));
    }
    return out;
  }

  // Batch elements drawn per corpus so far.
  const std::vector<std::size_t>& audit() const { return audit_; }

 private:
  const CorpusRegistry& reg_;
  Rng rng_;
  std::vector<std::size_t> audit_;
};

// ---- pre-training -----------------------------------------------------------

struct PretrainConfig {
  double rho1 = 1.0;
  double rho2 = 1.0;
  std::size_t rounds = 1;
  std::size_t epochs = 1;
  std::size_t iters = 500;  // per epoch
  std::size_t batch_size = 8;
  std::size_t systems_per_round = 5;
  double lr_backbone = 1e-3;
  double lr_rest = 1e-2;
  std::uint64_t seed = 0;
  WindowConfig windows;
  MleConfig mle = [] {
    MleConfig m;
    m.theiler_window = 3;
    return m;
  }();
  EncoderConfig model;
  AdamConfig adam;

  std::size_t total_steps() const { return rounds * epochs * iters; }

  void validate() const {
    if (!(rho1 >= 0 && rho2 >= 0)) throw std::invalid_argument("PretrainConfig: rho must be >= 0");
    if (rounds < 1 || epochs < 1 || iters < 1 || batch_size < 1 || systems_per_round < 1)
      throw std::invalid_argument("PretrainConfig: counts must be >= 1");
    if (!(lr_backbone > 0 && lr_rest > 0))
      throw std::invalid_argument("PretrainConfig: learning rates must be > 0");
    windows.validate();
    model.validate();
  }

  static PretrainConfig from_kv(const KvMap& kv) {
    PretrainConfig c;
    detail::KvReader r(kv);
    r.read("rho1", c.rho1);
    r.read("rho2", c.rho2);
    r.read("rounds", c.rounds);
    r.read("epochs", c.epochs);
    r.read("iters", c.iters);
    r.read("batch_size", c.batch_size);
    r.read("systems_per_round", c.systems_per_round);
    r.read("lr_backbone", c.lr_backbone);
    r.read("lr_rest", c.lr_rest);
    r.read("seed", c.seed);
    r.read("window", c.windows.window);
    r.read("t_in", c.windows.t_in);
    r.read("patch_len", c.windows.patch.patch_len);
    r.read("stride", c.windows.patch.stride);
    r.read("theiler", c.mle.theiler_window);
    r.read("t_max", c.mle.t_max);
    r.read("fit_lo", c.mle.t_lo);
    r.read("fit_hi", c.mle.t_hi);
    r.read("tracked_pairs", c.mle.tracked_pairs);
    std::string metric = metric_name(c.mle.metric);
    r.read("metric", metric);
    c.mle.metric = parse_metric(metric);
    r.read("model_dim", c.model.model_dim);
    r.read("n_layers", c.model.n_layers);
    r.read("n_heads", c.model.n_heads);
    r.read("ff_dim", c.model.ff_dim);
    r.read("conv_kernel", c.model.conv_kernel);
    std::string conv = conv_mode_name(c.model.conv_mode);
    r.read("conv_mode", conv);
    c.model.conv_mode = parse_conv_mode(conv);
    r.read("clip", c.adam.clip);
    r.finish();
    c.validate();
    return c;
  }

  Json to_json() const {
    return {{"rho1", rho1},
            {"rho2", rho2},
            {"rounds", rounds},
            {"epochs", epochs},
            {"iters", iters},
            {"batch_size", batch_size},
            {"systems_per_round", systems_per_round},
            {"lr_backbone", lr_backbone},
            {"lr_rest", lr_rest},
            {"seed", seed},
            {"window", windows.window},
            {"t_in", windows.t_in},
            {"patch_len", windows.patch.patch_len},
            {"stride", windows.patch.stride},
            {"theiler", mle.theiler_window},
            {"t_max", mle.t_max},
            {"fit_lo", mle.t_lo},
            {"fit_hi", mle.t_hi},
            {"tracked_pairs", mle.tracked_pairs},
            {"metric", metric_name(mle.metric)},
            {"model", model.to_json()},
            {"clip", adam.clip}};
  }
};

struct ObjectiveParts {
  Tensor total;
  double l_mle = 0.0;
  double l_r = 0.0;
  double l_f = 0.0;
  std::size_t mle_skipped = 0;
};

// Sum over examples of mle(z) + rho1 * L1(recon, x_in) + rho2 * L1(forecast,
// x_out), all in the space normalized by each example's input statistics.
// Examples are encoded and decoded as one batch.
inline ObjectiveParts pretrain_objective(const std::vector<Example>& batch, const ModelParams& p,
                                         const CorpusRegistry& reg, const PretrainConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("pretrain_objective: empty batch");
  const auto& wc = reg.config();
  const std::size_t P = wc.patches();
  std::vector<Tensor> tokens, in_targets, out_targets;
  for (const auto& e : batch) {
    const auto& c = reg.corpora().at(e.corpus);
    const std::size_t V = c.obs->dims;
    auto [xn, stats] = instance_normalize(e.x_in, V);
    auto yn = apply_norm(e.x_out, stats);
    tokens.push_back(
        project(patchify(xn, V, wc.patch), p.get(system_prefix(c.system_id) + "w_dp"), c.system_id));
    const std::size_t n_in = xn.size(), n_out = yn.size();
    in_targets.push_back(Tensor::from({1, n_in}, std::move(xn)));
    out_targets.push_back(Tensor::from({1, n_out}, std::move(yn)));
  }
  Tensor z = encode(concat(tokens), p, P);
  Tensor h = decode(z, p, P);

  ObjectiveParts parts;
  std::vector<Tensor> terms;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& c = reg.corpora()[batch[b].corpus];
    const std::string pre = system_prefix(c.system_id);
    Tensor zb = slice(z, b * P, (b + 1) * P);
    Tensor hb = slice(h, b * P, (b + 1) * P);
    if (auto m = mle_loss(zb, cfg.mle)) {
      parts.l_mle += m->item();
      terms.push_back(*m);
    } else {
      ++parts.mle_skipped;
    }
    Tensor lr = l1_loss(apply_head(hb, p.get(pre + "w_r"), P, c.system_id), in_targets[b]);
    parts.l_r += lr.item();
    terms.push_back(scale(lr, cfg.rho1));
    if (p.has(pre + "w_f")) {
      Tensor lf = l1_loss(apply_head(hb, p.get(pre + "w_f"), P, c.system_id), out_targets[b]);
      parts.l_f += lf.item();
      terms.push_back(scale(lf, cfg.rho2));
    }
  }
  parts.total = linear_combination(terms, std::vector<double>(terms.size(), 1.0));
  return parts;
}

struct LossRecord {
  std::size_t iter = 0;
  double loss = 0.0, l_mle = 0.0, l_r = 0.0, l_f = 0.0;
  std::string sources;  // ';'-joined system ids in the batch
};

struct PretrainResult {
  ModelParams params;
  std::vector<LossRecord> history;
  std::vector<std::size_t> audit;  // batch elements per registered corpus
  std::size_t mle_skipped = 0;
  std::size_t skipped_steps = 0;
};

// Rounds of system subsets; each round runs epochs x iters optimizer steps on
// batches drawn from its subset. `start` resumes from existing parameters.
inline PretrainResult pretrain(const CorpusRegistry& reg, const PretrainConfig& cfg,
                               std::optional<ModelParams> start = std::nullopt,
                               std::size_t step_offset = 0) {
  cfg.validate();
  if (reg.active().empty()) throw std::invalid_argument("pretrain: no corpus to train on");
  for (auto i : reg.active())
    if (reg.corpora()[i].count() == 0)
      throw std::invalid_argument("pretrain: corpus '" + reg.corpora()[i].system_id + "' is empty");
  PretrainResult res;
  res.params = start ? start->clone() : init_params(cfg.model, cfg.seed);
  reg.ensure_heads(res.params);
  BatchSampler sampler(reg, cfg.seed + step_offset);
  Adam opt(cfg.adam);
  const auto lr = group_lr(cfg.lr_backbone, cfg.lr_rest);
  std::size_t it = step_offset;
  for (std::size_t round = 0; round < cfg.rounds; ++round) {
    auto systems = sampler.choose_systems(cfg.systems_per_round);
    for (std::size_t ep = 0; ep < cfg.epochs; ++ep)
      for (std::size_t k = 0; k < cfg.iters; ++k) {
        auto batch = sampler.draw(systems, cfg.batch_size);
        TapeScope scope;
        auto parts = pretrain_objective(batch, res.params, reg, cfg);
        backward(parts.total);
        if (!opt.step(res.params, lr).applied) ++res.skipped_steps;
        res.mle_skipped += parts.mle_skipped;
        LossRecord rec{++it, parts.total.item(), parts.l_mle, parts.l_r, parts.l_f, {}};
        std::set<std::string> ids;
        for (const auto& e : batch) ids.insert(reg.corpora()[e.corpus].system_id);
        for (const auto& id : ids) rec.sources += (rec.sources.empty() ? "" : ";") + id;
        res.history.push_back(std::move(rec));
      }
  }
  if (res.mle_skipped > 0)
    warn("Lyapunov term skipped for " + std::to_string(res.mle_skipped) +
         " sequences too short for the estimator");
  res.audit = sampler.audit();
  return res;
}

inline void write_loss_csv(const fs::path& path, const std::vector<LossRecord>& hist) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(10);
  out << "iter,loss,l_mle,l_r,l_f,sources\n";
  for (const auto& r : hist)
    out << r.iter << ',' << r.loss << ',' << r.l_mle << ',' << r.l_r << ',' << r.l_f << ','
        << r.sources << '\n';
}

// ---- fine-tuning ------------------------------------------------------------

// The training part x[0, train_len) of one sample is cut into fine-tuning
// sequences of seq_len steps; each is rolled out from its own first patch.
// The test rollout starts from the last training patch and forecasts the
// seq_len - patch_len steps after the training part.
struct FinetuneConfig {
  std::size_t epochs = 1;
  std::size_t iters = 300;  // per epoch
  double lr = 1e-2;           // ODE, conv and heads
  double lr_backbone = 1e-3;  // ignored when frozen
  bool freeze_backbone = false;
  bool zero_init_wg = false;
  Method method = Method::rk4;
  double h = 0.0;  // 0: observation spacing
  double rtol = 1e-6, atol = 1e-8;
  std::size_t seq_len = 30;     // 0: one sequence spanning the training part
  std::size_t seq_stride = 1;   // offset between consecutive sequences
  std::size_t batch_size = 4;   // sequences per step; all of them if fewer
  bool center = true;           // shift each sequence by its first-patch mean
  bool cosine_lr = true;        // rates decay to 0 over the run
  std::size_t train_len = 0;    // 0: longest that leaves a full test window
  std::size_t sample = 0;
  PatchConfig patch{10, 3};
  std::uint64_t seed = 0;
  AdamConfig adam;

  void validate() const {
    if (epochs < 1 || iters < 1) throw std::invalid_argument("FinetuneConfig: counts must be >= 1");
    if (!(lr > 0 && lr_backbone > 0)) throw std::invalid_argument("FinetuneConfig: lr must be > 0");
    if (h < 0) throw std::invalid_argument("FinetuneConfig: h must be >= 0");
    if (seq_stride < 1 || batch_size < 1)
      throw std::invalid_argument("FinetuneConfig: seq_stride and batch_size must be >= 1");
    if (seq_len != 0 && seq_len <= patch.patch_len)
      throw std::invalid_argument("FinetuneConfig: seq_len must exceed patch_len");
  }

  // (train_len, seq_len) for a series of `steps` observations.
  std::pair<std::size_t, std::size_t> resolved_lengths(std::size_t steps) const {
    const std::size_t L = patch.patch_len;
    std::size_t t = train_len, w = seq_len;
    if (w == 0) {
      if (t == 0) t = (steps + L) / 2;
      w = t;
    } else if (t == 0 && steps + L >= w) {
      t = steps + L - w;
    }
    if (t < w || w <= L || t + w - L > steps)
      throw std::invalid_argument("FinetuneConfig: train_len " + std::to_string(t) + " and seq_len " +
                                  std::to_string(w) + " need patch_len < seq_len <= train_len and " +
                                  "train_len + seq_len - patch_len <= " + std::to_string(steps) +
                                  " steps");
    patch.validate(w);
    return {t, w};
  }

  static FinetuneConfig from_kv(const KvMap& kv) {
    FinetuneConfig c;
    detail::KvReader r(kv);
    r.read("epochs", c.epochs);
    r.read("iters", c.iters);
    r.read("lr", c.lr);
    r.read("lr_backbone", c.lr_backbone);
    r.read("freeze", c.freeze_backbone);
    r.read("zero_init_wg", c.zero_init_wg);
    std::string m = method_name(c.method);
    r.read("solver", m);
    c.method = parse_method(m);
    r.read("h", c.h);
    r.read("rtol", c.rtol);
    r.read("atol", c.atol);
    r.read("seq_len", c.seq_len);
    r.read("seq_stride", c.seq_stride);
    r.read("batch_size", c.batch_size);
    r.read("center", c.center);
    r.read("cosine_lr", c.cosine_lr);
    r.read("train_len", c.train_len);
    r.read("sample", c.sample);
    r.read("patch_len", c.patch.patch_len);
    r.read("stride", c.patch.stride);
    r.read("seed", c.seed);
    r.read("clip", c.adam.clip);
    r.finish();
    c.validate();
    return c;
  }

  Json to_json() const {
    return {{"epochs", epochs},         {"iters", iters},
            {"lr", lr},                 {"lr_backbone", lr_backbone},
            {"freeze", freeze_backbone}, {"zero_init_wg", zero_init_wg},
            {"solver", method_name(method)}, {"h", h},
            {"rtol", rtol},             {"atol", atol},
            {"seq_len", seq_len},       {"seq_stride", seq_stride},
            {"batch_size", batch_size}, {"center", center},
            {"cosine_lr", cosine_lr},   {"train_len", train_len},
            {"sample", sample},         {"patch_len", patch.patch_len},
            {"stride", patch.stride},   {"seed", seed},
            {"clip", adam.clip}};
  }

  static FinetuneConfig from_json(const Json& j) {
    KvMap kv;
    for (auto& [k, v] : j.items()) kv[k] = v.is_string() ? v.get<std::string>() : v.dump();
    return from_kv(kv);
  }
};

// Everything the fine-tune loss and the test rollout need, fixed per run.
struct FinetuneSetup {
  std::string head_id;  // system id under which projection and heads live
  std::size_t objects = 0, dims = 1, train_len = 0, seq_len = 0, patches = 0;
  std::vector<std::size_t> offsets;  // start of each fine-tuning sequence
  double obs_dt = 1.0;
  Tensor laplacian;
  std::vector<NormStats> stats;    // per object, from the training part
  std::vector<double> train_norm;  // [N][train_len][V], normalized
  SolverConfig solver;             // time grid over the seq_len patches
};

inline std::string finetune_head_id(const ObservationSet& obs, std::size_t train_len,
                                    std::size_t seq_len) {
  return obs.system_id + "~ft" + std::to_string(train_len) + "w" + std::to_string(seq_len);
}

inline FinetuneSetup finetune_setup(const ObservationSet& obs, const FinetuneConfig& cfg) {
  cfg.validate();
  if (cfg.sample >= obs.samples)
    throw std::invalid_argument("finetune: sample " + std::to_string(cfg.sample) + " out of range");
  if (obs.spec.graph.n_nodes != obs.objects)
    throw std::invalid_argument("finetune: corpus '" + obs.system_id + "' has " +
                                std::to_string(obs.objects) + " objects but a graph of " +
                                std::to_string(obs.spec.graph.n_nodes) + " nodes");
  FinetuneSetup s;
  std::tie(s.train_len, s.seq_len) = cfg.resolved_lengths(obs.steps);
  s.head_id = finetune_head_id(obs, s.train_len, s.seq_len);
  s.objects = obs.objects;
  s.dims = obs.dims;
  s.patches = cfg.patch.count(s.seq_len);
  for (std::size_t o = 0; o + s.seq_len <= s.train_len; o += cfg.seq_stride) s.offsets.push_back(o);
  s.obs_dt = obs.record_dt();
  s.laplacian = normalized_laplacian(obs.spec.graph);
  const auto V = static_cast<std::ptrdiff_t>(obs.dims);
  for (std::size_t n = 0; n < obs.objects; ++n) {
    auto x = obs.series(cfg.sample, n);
    std::vector<double> win(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(s.train_len) * V);
    auto [xn, st] = instance_normalize(win, obs.dims);
    s.stats.push_back(st);
    s.train_norm.insert(s.train_norm.end(), xn.begin(), xn.end());
  }
  s.solver.method = cfg.method;
  s.solver.h = cfg.h > 0 ? cfg.h : s.obs_dt;
  s.solver.rtol = cfg.rtol;
  s.solver.atol = cfg.atol;
  for (std::size_t k = 0; k < s.patches; ++k)
    s.solver.t_grid.push_back(static_cast<double>(k * cfg.patch.stride) * s.obs_dt);
  return s;
}

// Normalized values [N][len][V] of the training part from `offset`, minus a
// per-object shift: the mean of the first patch_len steps when centering,
// else zero. `shift` receives [N][V].
inline std::vector<double> finetune_segment(const FinetuneSetup& s, std::size_t offset, std::size_t len,
                                            std::size_t patch_len, bool center,
                                            std::vector<double>* shift = nullptr) {
  const std::size_t N = s.objects, V = s.dims, T = s.train_len;
  if (offset + len > T || patch_len > len)
    throw std::invalid_argument("finetune_segment: [" + std::to_string(offset) + ", " +
                                std::to_string(offset + len) + ") exceeds the training part");
  std::vector<double> out(N * len * V), sh(N * V, 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    const double* x = s.train_norm.data() + (n * T + offset) * V;
    if (center) {
      for (std::size_t t = 0; t < patch_len; ++t)
        for (std::size_t v = 0; v < V; ++v) sh[n * V + v] += x[t * V + v];
      for (std::size_t v = 0; v < V; ++v) sh[n * V + v] /= static_cast<double>(patch_len);
    }
    for (std::size_t t = 0; t < len; ++t)
      for (std::size_t v = 0; v < V; ++v) out[(n * len + t) * V + v] = x[t * V + v] - sh[n * V + v];
  }
  if (shift) *shift = std::move(sh);
  return out;
}

// Decoded trajectory [N, seq_len * V] rolled out from the initial patches
// `first` ([N][patch_len][V]).
inline Tensor finetune_forward(const ModelParams& p, const FinetuneSetup& s,
                               const std::vector<double>& first, const PatchConfig& patch,
                               SolveStats* stats = nullptr) {
  const std::size_t N = s.objects, V = s.dims, L = patch.patch_len;
  if (first.size() != N * L * V)
    throw ShapeError("finetune_forward: initial patches hold " + std::to_string(first.size()) +
                     " values, expected " + std::to_string(N * L * V));
  const std::string pre = system_prefix(s.head_id);
  Tensor tokens = project(Tensor::from({N, L * V}, first), p.get(pre + "w_dp"), s.head_id);
  Tensor z0 = encode(tokens, p, 1);
  GnnOdeParams ode{p.get("ode.w_g"), s.laplacian, true};
  Tensor traj = stack_trajectory(latent_rollout(z0, ode, s.solver, stats));  // [N, P, D]
  Tensor h = decode(reshape(traj, {N * s.patches, p.cfg.model_dim}), p, s.patches);
  return apply_head(h, p.get(pre + "w_r"), s.patches, s.head_id);
}

// L1 loss of the sequence starting at `offset`.
inline Tensor finetune_sequence_loss(const ModelParams& p, const FinetuneSetup& s, std::size_t offset,
                                     const FinetuneConfig& cfg) {
  const std::size_t N = s.objects, V = s.dims, W = s.seq_len, L = cfg.patch.patch_len;
  auto seq = finetune_segment(s, offset, W, L, cfg.center);
  std::vector<double> first;
  first.reserve(N * L * V);
  for (std::size_t n = 0; n < N; ++n) {
    auto b = seq.begin() + static_cast<std::ptrdiff_t>(n * W * V);
    first.insert(first.end(), b, b + static_cast<std::ptrdiff_t>(L * V));
  }
  return l1_loss(finetune_forward(p, s, first, cfg.patch), Tensor::from({N, W * V}, std::move(seq)));
}

struct FinetuneResult {
  ModelParams params;
  FinetuneSetup setup;
  std::vector<double> history;  // mean sequence loss per iteration
  std::vector<std::string> trainable;
};

inline FinetuneResult finetune(const ObservationSet& obs, const ModelParams& pretrained,
                               const FinetuneConfig& cfg) {
  FinetuneResult res;
  res.setup = finetune_setup(obs, cfg);
  auto& s = res.setup;
  res.params = pretrained.clone();
  ensure_system(res.params, s.head_id, {s.dims, cfg.patch.patch_len, s.patches, s.seq_len, 0});
  if (cfg.zero_init_wg) {
    auto w = res.params.tensors.at("ode.w_g").mutable_data();
    std::fill(w.begin(), w.end(), 0.0);
  }
  // Other systems' heads receive no gradient and are left alone.
  const std::string own = system_prefix(s.head_id);
  auto base = group_lr(cfg.lr_backbone, cfg.lr, cfg.freeze_backbone, cfg.freeze_backbone);
  LrPolicy group = [base, own](const std::string& name) {
    if (name.rfind("system.", 0) == 0 && name.rfind(own, 0) != 0) return 0.0;
    return base(name);
  };
  for (const auto& [name, _] : res.params.tensors)
    if (group(name) > 0) res.trainable.push_back(name);
  const std::size_t total = cfg.epochs * cfg.iters;
  double decay = 1.0;
  LrPolicy lr = [&](const std::string& name) { return group(name) * decay; };
  Rng rng = make_stream(cfg.seed, "finetune.sequences");
  Adam opt(cfg.adam);
  const bool all = s.offsets.size() <= cfg.batch_size;
  const std::size_t per_step = all ? s.offsets.size() : cfg.batch_size;
  for (std::size_t k = 0; k < total; ++k) {
    if (cfg.cosine_lr)
      decay = 0.5 * (1.0 + std::cos(std::acos(-1.0) * static_cast<double>(k) / static_cast<double>(total)));
    TapeScope scope;
    std::vector<Tensor> losses;
    for (std::size_t b = 0; b < per_step; ++b) {
      const std::size_t o = all ? s.offsets[b] : s.offsets[uniform_index(rng, s.offsets.size())];
      losses.push_back(finetune_sequence_loss(res.params, s, o, cfg));
    }
    Tensor loss = linear_combination(losses, std::vector<double>(per_step, 1.0 / static_cast<double>(per_step)));
    backward(loss);
    opt.step(res.params, lr);
    res.history.push_back(loss.item());
  }
  return res;
}

struct ForecastOutput {
  std::size_t steps = 0, width = 0;  // pred/truth/baseline are [steps][width], width = N*V
  std::vector<double> pred, truth, baseline;
  ForecastReport model, persistence;
};

// Test rollout from the last training patch, de-normalized, scored against
// the steps that follow the training part.
inline ForecastOutput finetune_evaluate(const ObservationSet& obs, const ModelParams& p,
                                        const FinetuneConfig& cfg,
                                        const std::vector<double>& ratios = default_ratios()) {
  auto s = finetune_setup(obs, cfg);
  const std::size_t N = s.objects, V = s.dims, T = s.train_len, W = s.seq_len, L = cfg.patch.patch_len;
  const std::size_t test = W - L;
  std::vector<double> shift;
  auto first = finetune_segment(s, T - L, L, L, cfg.center, &shift);
  std::vector<double> pred_norm;
  {
    NoGradGuard ng;
    pred_norm = finetune_forward(p, s, first, cfg.patch).values();
  }
  ForecastOutput out;
  out.steps = test;
  out.width = N * V;
  out.pred.resize(test * N * V);
  out.truth.resize(test * N * V);
  out.baseline.resize(test * N * V);
  for (std::size_t n = 0; n < N; ++n) {
    std::vector<double> row(pred_norm.begin() + static_cast<std::ptrdiff_t>(n * W * V),
                            pred_norm.begin() + static_cast<std::ptrdiff_t>((n + 1) * W * V));
    for (std::size_t i = 0; i < row.size(); ++i) row[i] += shift[n * V + i % V];
    auto den = denormalize(row, s.stats[n]);
    for (std::size_t t = 0; t < test; ++t)
      for (std::size_t v = 0; v < V; ++v) {
        const std::size_t o = (t * N + n) * V + v;
        out.pred[o] = den[(L + t) * V + v];
        out.truth[o] = obs.at(cfg.sample, n, T + t, v);
        out.baseline[o] = obs.at(cfg.sample, n, T - 1, v);
      }
  }
  out.model = truncated_eval(out.pred, out.truth, ratios, out.width);
  out.persistence = truncated_eval(out.baseline, out.truth, ratios, out.width);
  return out;
}

}  // namespace dynenc
