#pragma once
// Command-line front end: generate, pretrain, finetune, eval, lyapunov.
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <chrono>
#include <ctime>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dynenc/graph.hpp"
#include "dynenc/io.hpp"
#include "dynenc/lyapunov.hpp"
#include "dynenc/metrics.hpp"
#include "dynenc/seqmodel.hpp"
#include "dynenc/systems.hpp"
#include "dynenc/training.hpp"

#ifndef DYNENC_VERSION
#define DYNENC_VERSION "unknown"
#endif

namespace dynenc {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kExitOk = 0, kExitRuntime = 1, kExitUsage = 2;

namespace detail {

inline std::string utc_now() {
  auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Records everything needed to rerun the command that produced `dir`.
struct Manifest {
  Json j;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  Manifest(const std::string& command, const std::vector<std::string>& argv, std::uint64_t seed) {
    j = {{"manifest_version", 1}, {"command", command}, {"argv", argv},
         {"seed", seed},          {"version", DYNENC_VERSION}, {"started", utc_now()}};
  }

  void write(const fs::path& dir) {
    j["wall_clock_s"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    j["output"] = dir.string();
    write_json(dir / "manifest.json", j);
  }
};

inline fs::path require_dir(const std::string& path, const char* what) {
  if (!fs::is_directory(path)) throw UsageError(std::string(what) + " '" + path + "' is not a directory");
  return path;
}

inline ModelParams load_model_or_usage(const std::string& dir, Checkpoint* out = nullptr) {
  if (!fs::exists(fs::path(dir) / "meta.json")) throw UsageError("no checkpoint at '" + dir + "'");
  auto c = load_checkpoint(dir);
  if (out) *out = c;
  return c.params;
}

inline ParamMap parse_params(const std::vector<std::string>& kvs) {
  ParamMap m;
  for (const auto& s : kvs) {
    auto eq = s.find('=');
    if (eq == std::string::npos) throw UsageError("--param expects name=value, got '" + s + "'");
    try {
      m[s.substr(0, eq)] = std::stod(s.substr(eq + 1));
    } catch (const std::exception&) {
      throw UsageError("--param '" + s + "': value is not a number");
    }
  }
  return m;
}

inline std::vector<double> read_series(const std::string& path) {
  auto t = read_csv(path, /*allow_header=*/true);
  if (t.cols != 1)
    throw ParseError(path + ": expected a single-column series, found " + std::to_string(t.cols) +
                     " columns");
  return t.values;
}

}  // namespace detail

struct CliStreams {
  std::ostream& out = std::cout;
  std::ostream& err = std::cerr;
};

inline int run_cli(const std::vector<std::string>& args, CliStreams io = {}) {
  CLI::App app{"dynenc: pre-trained sequence encoders for dynamical systems on graphs"};
  app.name("dynenc");
  app.require_subcommand(1);
  app.set_version_flag("--version", DYNENC_VERSION);

  // generate
  auto* gen = app.add_subcommand("generate", "simulate a graph dynamical system");
  std::string g_system, g_graph_csv, g_dist_csv, g_out, g_id;
  std::size_t g_rows = 5, g_cols = 5, g_samples = 10, g_horizon = 150, g_record = 10, g_t_in = 0;
  int g_nbhd = 8;
  double g_dt = 0.01, g_delta2 = 1.0, g_eps = 0.1;
  std::uint64_t g_seed = 0;
  std::vector<std::string> g_params;
  gen->add_option("--system", g_system, "heat | mutualistic | gene")->required();
  gen->add_option("--rows", g_rows, "grid rows");
  gen->add_option("--cols", g_cols, "grid columns");
  gen->add_option("--neighborhood", g_nbhd, "grid neighborhood, 4 or 8");
  auto* g_adj_opt = gen->add_option("--graph-csv", g_graph_csv, "adjacency matrix CSV");
  gen->add_option("--dist-csv", g_dist_csv, "distance matrix CSV for a Gaussian kernel graph")
      ->excludes(g_adj_opt);
  gen->add_option("--delta2", g_delta2, "kernel bandwidth (with --dist-csv)");
  gen->add_option("--eps", g_eps, "kernel threshold (with --dist-csv)");
  gen->add_option("--samples", g_samples, "number of samples");
  gen->add_option("--horizon", g_horizon, "recorded steps per sample");
  gen->add_option("--dt", g_dt, "internal integration step");
  gen->add_option("--record-every", g_record, "internal steps per recorded step");
  gen->add_option("--t-in", g_t_in, "input length (default 2/3 of the horizon)");
  gen->add_option("--param", g_params, "system parameter name=value (repeatable)");
  gen->add_option("--id", g_id, "system id (default: system name)");
  gen->add_option("--seed", g_seed, "random seed");
  gen->add_option("--out", g_out, "output directory")->required();

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "pre-train the encoder on registered corpora");
  std::vector<std::string> p_corpora, p_ex_sys, p_ex_param;
  std::string p_config, p_out, p_resume;
  std::uint64_t p_seed = 0;
  std::size_t p_steps = 0;
  pre->add_option("--corpus", p_corpora, "corpus directory (repeatable)")->required();
  pre->add_option("--exclude-system", p_ex_sys, "leave out a system kind (repeatable)");
  pre->add_option("--exclude-param", p_ex_param, "leave out a system id (repeatable)");
  pre->add_option("--config", p_config, "key = value config file");
  pre->add_option("--resume", p_resume, "checkpoint directory to continue from");
  pre->add_option("--steps", p_steps, "override iters per epoch");
  pre->add_option("--seed", p_seed, "random seed (overrides config)");
  pre->add_option("--out", p_out, "output directory")->required();

  // finetune
  auto* ft = app.add_subcommand("finetune", "fit the latent graph ODE on one corpus");
  std::string f_corpus, f_ckpt, f_config, f_solver, f_out;
  bool f_freeze = false;
  std::size_t f_iters = 0;
  std::uint64_t f_seed = 0;
  ft->add_option("--corpus", f_corpus, "corpus directory")->required();
  ft->add_option("--checkpoint", f_ckpt, "pre-trained checkpoint directory")->required();
  ft->add_flag("--freeze", f_freeze, "freeze the backbone and token convolution");
  ft->add_option("--solver", f_solver, "euler | rk4 | dopri5");
  ft->add_option("--config", f_config, "key = value config file");
  ft->add_option("--iters", f_iters, "override iterations per epoch");
  ft->add_option("--seed", f_seed, "random seed");
  ft->add_option("--out", f_out, "output directory")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "score a fine-tuned model on its test window");
  std::string e_model, e_corpus, e_out;
  std::vector<double> e_ratios = default_ratios();
  ev->add_option("--model", e_model, "fine-tuned model directory")->required();
  ev->add_option("--corpus", e_corpus, "corpus directory")->required();
  ev->add_option("--ratios", e_ratios, "truncation ratios in (0,1]");
  ev->add_option("--out", e_out, "output directory")->required();

  // lyapunov
  auto* ly = app.add_subcommand("lyapunov", "estimate the maximal Lyapunov exponent of a series");
  std::string l_series, l_out, l_metric = "euclidean";
  std::size_t l_dim = 3, l_lag = 1, l_tmax = 8, l_theiler = 10, l_lo = 1, l_hi = 0;
  double l_dt = 1.0;
  bool l_all_rows = false;
  ly->add_option("--series", l_series, "single-column CSV")->required();
  ly->add_option("--dim", l_dim, "embedding dimension U");
  ly->add_option("--lag", l_lag, "embedding lag J");
  ly->add_option("--t-max", l_tmax, "divergence horizon (0: B/4)");
  ly->add_option("--theiler", l_theiler, "Theiler window");
  ly->add_option("--metric", l_metric, "euclidean | cosine");
  ly->add_option("--dt", l_dt, "sampling period");
  ly->add_option("--fit-lo", l_lo, "first fitted step");
  ly->add_option("--fit-hi", l_hi, "last fitted step (0: t-max)");
  ly->add_flag("--all-rows", l_all_rows, "pair every row, letting pairs leave range before t-max");
  ly->add_option("--out", l_out, "directory for the divergence curve CSV");

  std::vector<std::string> argv_store(args.rbegin(), args.rend());
  try {
    app.parse(argv_store);
  } catch (const CLI::CallForHelp&) {
    io.out << app.help();
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    io.out << DYNENC_VERSION << '\n';
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    io.err << "usage error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (command == "generate") {
      SystemKind kind;
      try {
        kind = parse_system_kind(g_system);
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      if (kind == SystemKind::imported) throw UsageError("generate: 'imported' is not a generator");
      InteractionGraph graph = !g_graph_csv.empty() ? read_adjacency_csv(g_graph_csv)
                               : !g_dist_csv.empty()
                                   ? gaussian_kernel_graph_csv(g_dist_csv, g_delta2, g_eps)
                                   : grid_graph(g_rows, g_cols, g_nbhd);
      Rng prng = make_stream(g_seed, "corpus.params");
      SystemSpec spec = default_spec(kind, std::move(graph), prng);
      for (auto& [k, v] : detail::parse_params(g_params)) spec.params[k] = v;
      spec.horizon = g_horizon;
      spec.dt = g_dt;
      spec.record_every = g_record;
      auto obs = generate(spec, g_samples, g_seed, worker_threads());
      if (!g_id.empty()) obs.system_id = g_id;
      if (g_t_in) obs.t_in = g_t_in;
      obs.validate();
      save_observations(obs, g_out);
      detail::Manifest man("generate", args, g_seed);
      man.j["config"] = {{"system", g_system}, {"samples", g_samples}, {"horizon", g_horizon},
                         {"dt", g_dt}, {"record_every", g_record}, {"params", spec.params},
                         {"id", obs.system_id}, {"t_in", obs.t_in}};
      man.j["outputs"] = {"meta.json", "data.f64le", "adjacency.csv"};
      man.write(g_out);
      io.out << "wrote " << obs.samples << " samples x " << obs.objects << " objects x "
             << obs.steps << " steps to " << g_out << '\n';
      return kExitOk;
    }

    if (command == "pretrain") {
      PretrainConfig cfg = p_config.empty() ? PretrainConfig{} : PretrainConfig::from_kv(parse_kv_file(p_config));
      if (pre->count("--seed")) cfg.seed = p_seed;
      if (p_steps) cfg.iters = p_steps;
      std::vector<ObservationSet> sets;
      for (const auto& c : p_corpora) sets.push_back(load_observations(detail::require_dir(c, "corpus")));
      CorpusRegistry reg(cfg.windows);
      for (const auto& s : sets) reg.add(s);
      reg.exclude(p_ex_sys, p_ex_param);
      std::optional<ModelParams> start;
      std::size_t offset = 0;
      if (!p_resume.empty()) {
        Checkpoint ck;
        start = detail::load_model_or_usage(p_resume, &ck);
        offset = ck.step;
      }
      auto res = pretrain(reg, cfg, std::move(start), offset);
      fs::create_directories(p_out);
      Json systems = Json::array();
      for (std::size_t i = 0; i < reg.corpora().size(); ++i)
        systems.push_back({{"id", reg.corpora()[i].system_id},
                           {"kind", reg.corpora()[i].kind},
                           {"excluded", reg.corpora()[i].excluded},
                           {"batch_elements", res.audit[i]}});
      save_checkpoint(p_out, res.params, offset + res.history.size(),
                      {{"pretrain", cfg.to_json()}, {"systems", systems}});
      write_loss_csv(fs::path(p_out) / "loss.csv", res.history);
      detail::Manifest man("pretrain", args, cfg.seed);
      man.j["config"] = cfg.to_json();
      man.j["inputs"] = p_corpora;
      man.j["excluded"] = {{"systems", p_ex_sys}, {"params", p_ex_param}};
      man.j["systems"] = systems;
      man.j["resumed_from"] = p_resume;
      man.j["outputs"] = {"meta.json", "params.f64le", "loss.csv"};
      man.write(p_out);
      io.out << "pretrained " << res.history.size() << " steps; loss " << res.history.front().loss
             << " -> " << res.history.back().loss << '\n';
      return kExitOk;
    }

    if (command == "finetune") {
      FinetuneConfig cfg = f_config.empty() ? FinetuneConfig{} : FinetuneConfig::from_kv(parse_kv_file(f_config));
      if (f_freeze) cfg.freeze_backbone = true;
      if (!f_solver.empty()) {
        try {
          cfg.method = parse_method(f_solver);
        } catch (const std::invalid_argument& e) {
          throw UsageError(e.what());
        }
      }
      if (f_iters) cfg.iters = f_iters;
      if (ft->count("--seed")) cfg.seed = f_seed;
      auto obs = load_observations(detail::require_dir(f_corpus, "corpus"));
      auto params = detail::load_model_or_usage(f_ckpt);
      auto res = finetune(obs, std::move(params), cfg);
      fs::create_directories(f_out);
      save_checkpoint(f_out, res.params, res.history.size(),
                      {{"finetune", cfg.to_json()}, {"system", obs.system_id}});
      {
        std::ofstream h(fs::path(f_out) / "history.csv");
        h.precision(10);
        h << "iter,loss\n";
        for (std::size_t i = 0; i < res.history.size(); ++i) h << i + 1 << ',' << res.history[i] << '\n';
      }
      detail::Manifest man("finetune", args, cfg.seed);
      man.j["config"] = cfg.to_json();
      man.j["inputs"] = {{"corpus", f_corpus}, {"checkpoint", f_ckpt}};
      man.j["trainable"] = res.trainable;
      std::vector<std::string> frozen;
      for (const auto& [name, _] : res.params.tensors)
        if (std::find(res.trainable.begin(), res.trainable.end(), name) == res.trainable.end())
          frozen.push_back(name);
      man.j["frozen"] = frozen;
      man.j["outputs"] = {"meta.json", "params.f64le", "history.csv"};
      man.write(f_out);
      io.out << "fine-tuned " << res.history.size() << " iterations; loss " << res.history.front()
             << " -> " << res.history.back() << '\n';
      return kExitOk;
    }

    if (command == "eval") {
      Checkpoint ck;
      auto params = detail::load_model_or_usage(e_model, &ck);
      if (!ck.extra.contains("finetune"))
        throw UsageError("'" + e_model + "' is not a fine-tuned model (run finetune first)");
      auto cfg = FinetuneConfig::from_json(ck.extra.at("finetune"));
      auto obs = load_observations(detail::require_dir(e_corpus, "corpus"));
      if (ck.extra.value("system", obs.system_id) != obs.system_id)
        throw std::invalid_argument("model was fine-tuned on '" + ck.extra.value("system", std::string()) +
                                    "' but the corpus is '" + obs.system_id + "'");
      auto out = finetune_evaluate(obs, params, cfg, e_ratios);
      fs::create_directories(e_out);
      write_report_csv(fs::path(e_out) / "report.csv",
                       {{obs.system_id, out.model}, {obs.system_id + ":persistence", out.persistence}});
      {
        std::ofstream f(fs::path(e_out) / "forecast.csv");
        f.precision(10);
        f << "step,object,pred,truth,baseline\n";
        for (std::size_t t = 0; t < out.steps; ++t)
          for (std::size_t k = 0; k < out.width; ++k) {
            auto i = t * out.width + k;
            f << t << ',' << k << ',' << out.pred[i] << ',' << out.truth[i] << ',' << out.baseline[i] << '\n';
          }
      }
      detail::Manifest man("eval", args, cfg.seed);
      man.j["config"] = {{"ratios", e_ratios}, {"finetune", cfg.to_json()}};
      man.j["inputs"] = {{"model", e_model}, {"corpus", e_corpus}};
      man.j["outputs"] = {"report.csv", "forecast.csv"};
      man.write(e_out);
      io.out << "ratio   rmse        mae         mape%   (persistence mape%)\n";
      for (std::size_t r = 0; r < out.model.rows.size(); ++r) {
        const auto& m = out.model.rows[r];
        std::ostringstream os;
        os.precision(5);
        os << (m.is_average() ? std::string("avg") : std::to_string(m.ratio).substr(0, 4)) << "    "
           << m.rmse << "    " << m.mae << "    " << m.mape << "    (" << out.persistence.rows[r].mape << ")";
        io.out << os.str() << '\n';
      }
      return kExitOk;
    }

    if (command == "lyapunov") {
      MleConfig cfg;
      cfg.t_max = l_tmax;
      cfg.theiler_window = l_theiler;
      cfg.delta_t = l_dt;
      cfg.t_lo = l_lo;
      cfg.t_hi = l_hi;
      cfg.tracked_pairs = !l_all_rows;
      try {
        cfg.metric = parse_metric(l_metric);
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      auto x = detail::read_series(l_series);
      auto z = delay_embed(x, l_dim, l_lag);
      auto rc = cfg.resolved(z.dim(0));
      auto curve = divergence_curve(z, nearest_neighbors(z, rc), rc);
      io.out.precision(6);
      io.out << "lambda_hat " << curve.lambda_hat << '\n';
      if (!l_out.empty()) {
        fs::create_directories(l_out);
        std::ofstream f(fs::path(l_out) / "divergence.csv");
        f.precision(12);
        f << "t,y,valid_pairs\n";
        for (std::size_t t = 0; t < curve.y.size(); ++t)
          f << t << ',' << curve.y[t] << ',' << curve.valid_counts[t] << '\n';
        detail::Manifest man("lyapunov", args, 0);
        man.j["config"] = {{"dim", l_dim}, {"lag", l_lag}, {"t_max", rc.t_max},
                           {"theiler", l_theiler}, {"metric", l_metric}, {"dt", l_dt},
                           {"fit_lo", rc.t_lo}, {"fit_hi", rc.t_hi},
                           {"tracked_pairs", rc.tracked_pairs}};
        man.j["inputs"] = {l_series};
        man.j["lambda_hat"] = curve.lambda_hat;
        man.j["outputs"] = {"divergence.csv"};
        man.write(l_out);
      }
      return kExitOk;
    }
  } catch (const UsageError& e) {
    io.err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    io.err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

inline int run_cli(int argc, char** argv, CliStreams io = {}) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(args, io);
}

}  // namespace dynenc
