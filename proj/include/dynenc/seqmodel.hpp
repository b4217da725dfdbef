#pragma once
// Sequence backbone: token convolution, pre-LN transformer encoder and decoder
// stacks, and per-system flatten-linear heads.
//
// Sequences are batched row-wise: a batch of B sequences of P tokens is a
// [B*P, D] tensor plus seq_len = P.

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynenc/io.hpp"
#include "dynenc/ode.hpp"
#include "dynenc/rng.hpp"
#include "dynenc/tensor.hpp"

namespace dynenc {

enum class ConvMode { cross_token, per_token };

inline ConvMode parse_conv_mode(const std::string& s) {
  if (s == "cross_token") return ConvMode::cross_token;
  if (s == "per_token") return ConvMode::per_token;
  throw std::invalid_argument("unknown conv mode '" + s + "' (expected cross_token|per_token)");
}

inline const char* conv_mode_name(ConvMode m) {
  return m == ConvMode::cross_token ? "cross_token" : "per_token";
}

struct EncoderConfig {
  std::size_t model_dim = 32;
  std::size_t n_layers = 2;  // per stack; encoder and decoder alike
  std::size_t n_heads = 4;
  std::size_t ff_dim = 64;
  std::size_t conv_kernel = 3;
  ConvMode conv_mode = ConvMode::cross_token;

  void validate() const {
    if (model_dim < 1 || n_heads < 1 || ff_dim < 1 || conv_kernel < 1)
      throw std::invalid_argument("EncoderConfig: counts must be >= 1");
    if (model_dim % n_heads != 0)
      throw std::invalid_argument("EncoderConfig: model_dim " + std::to_string(model_dim) +
                                  " not divisible by n_heads " + std::to_string(n_heads));
    if (conv_kernel % 2 == 0) throw std::invalid_argument("EncoderConfig: conv_kernel must be odd");
  }

  Json to_json() const {
    return {{"model_dim", model_dim}, {"n_layers", n_layers}, {"n_heads", n_heads},
            {"ff_dim", ff_dim},       {"conv_kernel", conv_kernel},
            {"conv_mode", conv_mode_name(conv_mode)}};
  }

  static EncoderConfig from_json(const Json& j) {
    EncoderConfig c;
    c.model_dim = j.at("model_dim").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.ff_dim = j.at("ff_dim").get<std::size_t>();
    c.conv_kernel = j.at("conv_kernel").get<std::size_t>();
    c.conv_mode = parse_conv_mode(j.value("conv_mode", std::string("cross_token")));
    c.validate();
    return c;
  }
};

// Shapes of one system's heads.
struct HeadShape {
  std::size_t dims = 1;       // V_s
  std::size_t patch_len = 25;
  std::size_t patches = 14;   // P
  std::size_t t_in = 100;
  std::size_t t_out = 50;     // T - T_in
};

// Named parameter store. Backbone tensors live under "encoder." and
// "decoder."; "system.<id>." holds per-system projection and heads; "ode."
// holds the latent vector field.
struct ModelParams {
  EncoderConfig cfg;
  std::uint64_t seed = 0;
  std::map<std::string, Tensor> tensors;

  bool has(const std::string& name) const { return tensors.count(name) != 0; }

  const Tensor& get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::out_of_range("missing parameter '" + name + "'");
    return it->second;
  }

  // Tensors are shared handles; copying ModelParams aliases the storage.
  ModelParams clone() const {
    ModelParams c{cfg, seed, {}};
    for (const auto& [name, t] : tensors) c.tensors.emplace(name, t.clone_leaf());
    return c;
  }

  std::vector<Tensor> all() const {
    std::vector<Tensor> out;
    for (auto& [_, t] : tensors) out.push_back(t);
    return out;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (auto& [_, t] : tensors) n += t.size();
    return n;
  }
};

// Transformer layers of either stack (the backbone proper).
inline bool is_backbone_param(const std::string& name) {
  auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
  return (starts("encoder.") && !starts("encoder.conv")) || starts("decoder.");
}

namespace detail {

// Capped at 1 so degenerate fans (a width-1 kernel) stay in [-1, 1].
inline double xavier_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::min(1.0, std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)));
}

// Draws from a per-name stream so creation order does not matter.
inline Tensor init_uniform(std::uint64_t seed, const std::string& name, Shape shape, double bound) {
  Rng rng = make_stream(seed, "init." + name);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = uniform(rng, -bound, bound);
  return Tensor::from(std::move(shape), std::move(v), true);
}

inline Tensor init_const(Shape shape, double c) {
  auto t = Tensor::full(std::move(shape), c);
  t.set_requires_grad(true);
  return t;
}

inline void add_stack(ModelParams& p, const std::string& prefix) {
  const auto& c = p.cfg;
  const std::size_t D = c.model_dim, F = c.ff_dim;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string L = prefix + ".layer" + std::to_string(l) + ".";
    for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"})
      p.tensors[L + w] = init_uniform(p.seed, L + w, {D, D}, xavier_bound(D, D));
    p.tensors[L + "ln1.g"] = init_const({D}, 1.0);
    p.tensors[L + "ln1.b"] = init_const({D}, 0.0);
    p.tensors[L + "ln2.g"] = init_const({D}, 1.0);
    p.tensors[L + "ln2.b"] = init_const({D}, 0.0);
    p.tensors[L + "ff.w1"] = init_uniform(p.seed, L + "ff.w1", {D, F}, xavier_bound(D, F));
    p.tensors[L + "ff.b1"] = init_const({F}, 0.0);
    p.tensors[L + "ff.w2"] = init_uniform(p.seed, L + "ff.w2", {F, D}, xavier_bound(F, D));
    p.tensors[L + "ff.b2"] = init_const({D}, 0.0);
  }
  if (c.n_layers > 0) {
    p.tensors[prefix + ".ln_f.g"] = init_const({D}, 1.0);
    p.tensors[prefix + ".ln_f.b"] = init_const({D}, 0.0);
  }
}

}  // namespace detail

// Backbone, token convolution and latent ODE weights. System heads are added
// on demand by ensure_system.
inline ModelParams init_params(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams p;
  p.cfg = cfg;
  p.seed = seed;
  const std::size_t D = cfg.model_dim, K = cfg.conv_kernel;
  if (cfg.conv_mode == ConvMode::cross_token)
    p.tensors["encoder.conv.w"] = detail::init_uniform(seed, "encoder.conv.w", {K, D},
                                                       detail::xavier_bound(K, K));
  else
    p.tensors["encoder.conv.w"] = detail::init_uniform(seed, "encoder.conv.w", {D, D},
                                                       detail::xavier_bound(D, D));
  detail::add_stack(p, "encoder");
  detail::add_stack(p, "decoder");
  p.tensors["ode.w_g"] = detail::init_uniform(seed, "ode.w_g", {D, D}, detail::xavier_bound(D, D));
  return p;
}

inline std::string system_prefix(const std::string& system_id) { return "system." + system_id + "."; }

// Creates the projection and both heads for a system, or checks the shapes of
// existing ones.
inline void ensure_system(ModelParams& p, const std::string& system_id, const HeadShape& h) {
  const std::size_t D = p.cfg.model_dim;
  const std::string pre = system_prefix(system_id);
  struct Want {
    const char* name;
    Shape shape;
  };
  const Want wants[] = {{"w_dp", {D, h.patch_len * h.dims}},
                        {"w_r", {h.t_in * h.dims, h.patches * D}},
                        {"w_f", {h.t_out * h.dims, h.patches * D}}};
  for (const auto& w : wants) {
    const std::string name = pre + w.name;
    auto it = p.tensors.find(name);
    if (it != p.tensors.end()) {
      if (it->second.shape() != w.shape)
        throw ShapeError("system '" + system_id + "': " + w.name + " is " +
                         shape_str(it->second.shape()) + ", expected " + shape_str(w.shape));
      continue;
    }
    if (w.shape[0] == 0) continue;  // no forecast horizon
    p.tensors[name] = detail::init_uniform(p.seed, name, w.shape,
                                           detail::xavier_bound(w.shape[1], w.shape[0]));
  }
}

// Sinusoidal position table [seq_len, D] tiled over the batch.
inline Tensor positional_encoding(std::size_t rows, std::size_t seq_len, std::size_t d) {
  std::vector<double> pe(rows * d);
  for (std::size_t r = 0; r < rows; ++r) {
    const double pos = static_cast<double>(r % seq_len);
    for (std::size_t i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d));
      pe[r * d + i] = i % 2 == 0 ? std::sin(pos * freq) : std::cos(pos * freq);
    }
  }
  return Tensor::from({rows, d}, std::move(pe));
}

namespace detail {

inline Tensor affine_ln(const Tensor& x, const ModelParams& p, const std::string& pre) {
  return add(mul(layer_norm(x), p.get(pre + ".g")), p.get(pre + ".b"));
}

// Pre-LN: x += Attn(LN x); x += FF(LN x). A final LN closes the stack.
inline Tensor run_stack(Tensor x, const ModelParams& p, const std::string& prefix,
                        std::size_t seq_len) {
  const auto& c = p.cfg;
  if (c.n_layers == 0) return x;
  x = add(x, positional_encoding(x.dim(0), seq_len, c.model_dim));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string L = prefix + ".layer" + std::to_string(l) + ".";
    Tensor h = affine_ln(x, p, L + "ln1");
    Tensor a = attention(matmul(h, p.get(L + "attn.wq")), matmul(h, p.get(L + "attn.wk")),
                         matmul(h, p.get(L + "attn.wv")), seq_len, c.n_heads);
    x = add(x, matmul(a, p.get(L + "attn.wo")));
    h = affine_ln(x, p, L + "ln2");
    h = relu(add(matmul(h, p.get(L + "ff.w1")), p.get(L + "ff.b1")));
    x = add(x, add(matmul(h, p.get(L + "ff.w2")), p.get(L + "ff.b2")));
  }
  return affine_ln(x, p, prefix + ".ln_f");
}

inline void require_tokens(const Tensor& t, std::size_t d, std::size_t seq_len, const char* op) {
  if (t.rank() != 2 || t.dim(1) != d || seq_len == 0 || t.dim(0) == 0 || t.dim(0) % seq_len != 0)
    throw ShapeError(std::string(op) + ": expected [B*" + std::to_string(seq_len) + ", " +
                     std::to_string(d) + "] tokens, got " + shape_str(t.shape()));
}

inline void require_finite(const Tensor& t, const char* op) {
  if (!all_finite(t)) throw NonFiniteError(std::string(op) + ": non-finite activation");
}

}  // namespace detail

// Token convolution only: [B*P, D] -> [B*P, D].
inline Tensor embed_tokens(const Tensor& tokens, const ModelParams& p, std::size_t seq_len) {
  detail::require_tokens(tokens, p.cfg.model_dim, seq_len, "embed_tokens");
  const Tensor& w = p.get("encoder.conv.w");
  if (p.cfg.conv_mode == ConvMode::cross_token) return depthwise_conv1d(tokens, w, seq_len);
  return matmul(tokens, w);
}

// z = Encoder(Conv(tokens)).
inline Tensor encode(const Tensor& tokens, const ModelParams& p, std::size_t seq_len) {
  Tensor z = detail::run_stack(embed_tokens(tokens, p, seq_len), p, "encoder", seq_len);
  detail::require_finite(z, "encode");
  return z;
}

inline Tensor encode(const Tensor& tokens, const ModelParams& p) {
  detail::require_tokens(tokens, p.cfg.model_dim, tokens.rank() == 2 ? tokens.dim(0) : 1, "encode");
  return encode(tokens, p, tokens.dim(0));
}

// Decoder stack applied to z directly (single shot, no shifting).
inline Tensor decode(const Tensor& z, const ModelParams& p, std::size_t seq_len) {
  detail::require_tokens(z, p.cfg.model_dim, seq_len, "decode");
  Tensor h = detail::run_stack(z, p, "decoder", seq_len);
  detail::require_finite(h, "decode");
  return h;
}

// Flatten-linear head: decoded [B*P, D] -> [B, out] with head [out, P*D].
inline Tensor apply_head(const Tensor& decoded, const Tensor& head, std::size_t seq_len,
                         const std::string& what) {
  const std::size_t b = decoded.dim(0) / seq_len, flat = seq_len * decoded.dim(1);
  if (head.rank() != 2 || head.dim(1) != flat)
    throw ShapeError(what + ": head " + shape_str(head.shape()) + " does not accept " +
                     std::to_string(seq_len) + " tokens of width " + std::to_string(decoded.dim(1)));
  return matmul(reshape(decoded, {b, flat}), transpose(head));
}

// Single sequence z [P, D] -> [T_in, V].
inline Tensor decode_reconstruct(const Tensor& z, const ModelParams& p, const Tensor& w_r,
                                 std::size_t dims) {
  Tensor out = apply_head(decode(z, p, z.dim(0)), w_r, z.dim(0), "decode_reconstruct");
  if (dims == 0 || out.size() % dims != 0)
    throw ShapeError("decode_reconstruct: head width " + std::to_string(out.size()) +
                     " is not a multiple of V=" + std::to_string(dims));
  return reshape(out, {out.size() / dims, dims});
}

// Single sequence z [P, D] -> [T - T_in, V].
inline Tensor decode_forecast(const Tensor& z, const ModelParams& p, const Tensor& w_f,
                              std::size_t dims) {
  Tensor out = apply_head(decode(z, p, z.dim(0)), w_f, z.dim(0), "decode_forecast");
  if (dims == 0 || out.size() % dims != 0)
    throw ShapeError("decode_forecast: head width " + std::to_string(out.size()) +
                     " is not a multiple of V=" + std::to_string(dims));
  return reshape(out, {out.size() / dims, dims});
}

// ---- checkpoints -------------------------------------------------------------

struct Checkpoint {
  ModelParams params;
  std::size_t step = 0;
  Json extra;  // caller metadata (system registry, training config)
};

inline void save_checkpoint(const fs::path& dir, const ModelParams& p, std::size_t step,
                            const Json& extra = Json::object()) {
  fs::create_directories(dir);
  Json index = Json::array();
  std::vector<double> blob;
  for (const auto& [name, t] : p.tensors) {
    index.push_back({{"name", name}, {"offset", blob.size()}, {"shape", t.shape()}});
    blob.insert(blob.end(), t.values().begin(), t.values().end());
  }
  Json meta = {{"format", "dynenc-checkpoint-1"},
               {"config", p.cfg.to_json()},
               {"step", step},
               {"seed", p.seed},
               {"tensors", index},
               {"extra", extra}};
  write_f64le(dir / "params.f64le", blob);
  write_json(dir / "meta.json", meta);
}

inline Checkpoint load_checkpoint(const fs::path& dir) {
  if (!fs::exists(dir / "meta.json") || !fs::exists(dir / "params.f64le"))
    throw IoError("no checkpoint at " + dir.string() + " (need meta.json and params.f64le)");
  Json meta = read_json(dir / "meta.json");
  auto blob = read_f64le(dir / "params.f64le");
  Checkpoint c;
  try {
    c.params.cfg = EncoderConfig::from_json(meta.at("config"));
    c.params.seed = meta.at("seed").get<std::uint64_t>();
    c.step = meta.at("step").get<std::size_t>();
    c.extra = meta.value("extra", Json::object());
    for (const auto& e : meta.at("tensors")) {
      auto shape = e.at("shape").get<Shape>();
      auto off = e.at("offset").get<std::size_t>();
      auto n = shape_numel(shape);
      if (off + n > blob.size())
        throw ParseError("tensor '" + e.at("name").get<std::string>() + "' overruns params.f64le");
      std::vector<double> v(blob.begin() + static_cast<std::ptrdiff_t>(off),
                            blob.begin() + static_cast<std::ptrdiff_t>(off + n));
      c.params.tensors[e.at("name").get<std::string>()] = Tensor::from(shape, std::move(v), true);
    }
  } catch (const Json::exception& e) {
    throw ParseError(dir.string() + "/meta.json: " + e.what());
  }
  return c;
}

}  // namespace dynenc
