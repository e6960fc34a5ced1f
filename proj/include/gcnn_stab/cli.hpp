#pragma once

// Command-line front end: `gcnn-stab <subcommand> [--config f] [--seed s]
// [--out dir] [--trials n] [--threads n]`.
// Exit codes: 0 success, 1 failed verdict or self-check, 2 configuration or
// usage error, 3 numerical failure.

#include <CLI11.hpp>
#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "config.hpp"
#include "error.hpp"
#include "experiments.hpp"
#include "filters.hpp"
#include "gcnn.hpp"
#include "graph.hpp"
#include "perturbation.hpp"
#include "stability.hpp"

namespace gstab {

struct CliOverrides {
  std::optional<std::uint64_t> seed;  // RES sampling seed and training shuffle seed
  std::optional<std::size_t> trials;
  std::optional<std::size_t> threads;
  std::string out_dir;  // empty: tables go to stdout
};

// ---------------------------------------------------------------------------
// Config -> objects.

inline std::shared_ptr<const Graph> graph_from_config(const ConfigBlock& b) {
  b.allow_only({"kind", "n", "communities", "p_intra", "p_inter", "seed", "edges", "weights", "file", "density", "shift"});
  const auto kind = b.get_string("kind", "sbm");
  if (kind == "sbm") {
    return std::make_shared<const Graph>(sbm_generate(b.get_size("n", 40), b.get_size("communities", 4),
                                                      b.get_double("p_intra", 0.5), b.get_double("p_inter", 0.05),
                                                      b.get_u64("seed", 1)));
  }
  if (kind == "erdos_renyi") {
    const std::size_t n = b.get_size("n");
    const double density = b.get_double("density");
    Graph g(n);
    Stream rng(b.get_u64("seed", 1), {0xE4D0ULL});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        if (rng.bernoulli(density)) g.add_edge(i, j);
    return std::make_shared<const Graph>(std::move(g));
  }
  if (kind == "edges") {
    const auto flat = b.get_doubles("edges");
    if (flat.size() % 2 != 0) throw ConfigError("config: graph.edges needs node pairs");
    const auto w = b.get_doubles("weights", std::vector<double>(flat.size() / 2, 1.0));
    if (w.size() != flat.size() / 2) throw ConfigError("config: graph.weights needs one weight per edge");
    std::size_t n = b.get_size("n", 0);
    for (double v : flat) {
      if (v < 0.0 || v != std::floor(v)) throw ConfigError("config: graph.edges entries must be node indices");
      n = std::max(n, static_cast<std::size_t>(v) + 1);
    }
    Graph g(n);
    for (std::size_t e = 0; e < w.size(); ++e)
      g.add_edge(static_cast<std::size_t>(flat[2 * e]), static_cast<std::size_t>(flat[2 * e + 1]), w[e]);
    return std::make_shared<const Graph>(std::move(g));
  }
  if (kind == "file") {
    const auto path = b.get_string("file");
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open edge list '" + path + "'");
    return std::make_shared<const Graph>(read_edge_list(in));
  }
  throw ConfigError("config: unknown graph kind '" + kind + "'");
}

inline ShiftOperator shift_from_config(const Config& cfg) {
  const auto& b = cfg.block("graph");
  return shift_from_graph(graph_from_config(b), parse_shift_variant(b.get_string("shift", "adjacency")));
}

inline GraphFilter filter_from_config(const ConfigBlock& b) {
  b.allow_only({"coeffs"});
  return GraphFilter(b.get_doubles("coeffs"));
}

inline GCNN gcnn_from_config(const ConfigBlock& b) {
  b.allow_only({"checkpoint", "layers", "features", "order", "readout_width", "hidden", "output", "seed", "scale"});
  if (b.has("checkpoint")) {
    std::ifstream in(b.get_string("checkpoint"));
    if (!in) throw ConfigError("cannot open checkpoint '" + b.get_string("checkpoint") + "'");
    return load_checkpoint(in);
  }
  Architecture a;
  a.layers = b.get_size("layers", 2);
  a.features = b.get_size("features", 4);
  a.order = b.get_size("order", 3);
  a.readout_width = b.get_size("readout_width", 1);
  a.hidden.kind = parse_activation(b.get_string("hidden", "relu"));
  a.output.kind = parse_activation(b.get_string("output", "relu"));
  return GCNN::random(a, b.get_u64("seed", 0), b.get_double("scale", 1.0));
}

inline Eigen::VectorXd signal_from_config(const ConfigBlock& b, std::size_t n) {
  b.allow_only({"x", "seed", "norm"});
  if (b.has("x")) {
    const auto v = b.get_doubles("x");
    if (v.size() != n) throw ConfigError("config: signal.x must have one entry per node");
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
  Stream rng(b.get_u64("seed", 0), {0x5167ULL});
  Eigen::VectorXd x(static_cast<Eigen::Index>(n));
  for (auto& v : x) v = rng.uniform(-1.0, 1.0);
  return x * (b.get_double("norm", 1.0) / x.norm());
}

struct ResSettings {
  double p = 0.97;
  std::uint64_t seed = 42;
  std::size_t trials = 1000;
  std::size_t draws = 100000;
  std::size_t threads = 1;
  RealizationPolicy policy = RealizationPolicy::IndependentPerFilter;
};

inline ResSettings res_from_config(const Config& cfg, const CliOverrides& o) {
  const auto& b = cfg.block("res");
  b.allow_only({"p", "seed", "trials", "draws", "threads", "policy"});
  ResSettings r;
  r.p = b.get_double("p", r.p);
  r.seed = o.seed.value_or(b.get_u64("seed", r.seed));
  r.trials = o.trials.value_or(b.get_size("trials", r.trials));
  r.draws = b.get_size("draws", r.draws);
  r.threads = o.threads.value_or(b.get_size("threads", r.threads));
  r.policy = parse_policy(b.get_string("policy", "independent"));
  return r;
}

inline ExperimentSpec experiment_from_config(const Config& cfg, const CliOverrides& o) {
  ExperimentSpec e;
  const auto& g = cfg.block("graph");
  g.allow_only({"kind", "n", "communities", "p_intra", "p_inter", "seed"});
  if (g.get_string("kind", "sbm") != "sbm") throw ConfigError("config: experiments need graph.kind = sbm");
  e.n = g.get_size("n", e.n);
  e.communities = g.get_size("communities", e.communities);
  e.p_intra = g.get_double("p_intra", e.p_intra);
  e.p_inter = g.get_double("p_inter", e.p_inter);
  e.graph_seed = g.get_u64("seed", e.graph_seed);

  const auto& d = cfg.block("data");
  d.allow_only({"t_max", "noise_std", "train", "val", "test", "seed"});
  e.t_max = d.get_size("t_max", e.t_max);
  e.noise_std = d.get_double("noise_std", e.noise_std);
  e.sizes.train = d.get_size("train", e.sizes.train);
  e.sizes.val = d.get_size("val", e.sizes.val);
  e.sizes.test = d.get_size("test", e.sizes.test);
  e.data_seed = d.get_u64("seed", e.data_seed);

  const auto& m = cfg.block("gcnn");
  m.allow_only({"model", "layers", "features", "order", "hidden", "output", "readout", "seed", "scale"});
  const auto model = m.get_string("model", "gcnn");
  if (model == "gcnn") e.model = ModelKind::Gcnn;
  else if (model == "filter_bank") e.model = ModelKind::FilterBank;
  else throw ConfigError("config: gcnn.model must be gcnn or filter_bank");
  e.layers = m.get_size("layers", e.layers);
  e.features = m.get_size("features", e.features);
  e.order = m.get_size("order", e.order);
  e.hidden = parse_activation(m.get_string("hidden", to_string(e.hidden)));
  e.output = parse_activation(m.get_string("output", to_string(e.output)));
  e.readout = parse_readout(m.get_string("readout", to_string(e.readout)));
  e.init_seed = m.get_u64("seed", e.init_seed);
  e.init_scale = m.get_double("scale", e.init_scale);

  const auto& t = cfg.block("train");
  t.allow_only({"lr", "beta1", "beta2", "eps", "epochs", "batch_size", "seed"});
  e.train.lr = t.get_double("lr", e.train.lr);
  e.train.beta1 = t.get_double("beta1", e.train.beta1);
  e.train.beta2 = t.get_double("beta2", e.train.beta2);
  e.train.eps = t.get_double("eps", e.train.eps);
  e.train.epochs = t.get_size("epochs", e.train.epochs);
  e.train.batch_size = t.get_size("batch_size", e.train.batch_size);
  e.train.seed = o.seed.value_or(t.get_u64("seed", e.train.seed));

  const auto& r = cfg.block("res");
  r.allow_only({"p", "seed", "trials", "threads", "policy"});
  e.p = r.get_double("p", e.p);
  e.res_seed = o.seed.value_or(r.get_u64("seed", e.res_seed));
  e.trials = o.trials.value_or(r.get_size("trials", e.trials));
  e.threads = o.threads.value_or(r.get_size("threads", e.threads));
  e.policy = parse_policy(r.get_string("policy", "independent"));
  if (!(e.p > 0.0 && e.p <= 1.0)) throw ConfigError("config: res.p must lie in (0, 1]");
  return e;
}

inline SweepSpec sweep_from_config(const Config& cfg, const CliOverrides& o) {
  const auto& b = cfg.block("sweep");
  b.allow_only({"variable", "grid", "metric", "reuse_model", "replicates"});
  SweepSpec s;
  s.fixed = experiment_from_config(cfg, o);
  s.variable = parse_sweep_variable(b.get_string("variable"));
  s.grid = b.get_doubles("grid");
  const auto metric = b.get_string("metric", "accuracy");
  if (metric == "accuracy") s.fixed.metric = SweepMetric::AccuracyDifference;
  else if (metric == "deviation") s.fixed.metric = SweepMetric::OutputDeviation;
  else throw ConfigError("config: sweep.metric must be accuracy or deviation");
  s.reuse_model = b.get_bool("reuse_model", true);
  s.fixed.replicates = b.get_size("replicates", s.fixed.replicates);
  s.validate();
  return s;
}

namespace detail {

inline std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(4) << v;
  return os.str();
}

inline void emit(const CliOverrides& o, const std::string& file, const std::string& content, std::ostream& out) {
  if (o.out_dir.empty()) {
    out << content;
    return;
  }
  std::filesystem::create_directories(o.out_dir);
  const auto path = std::filesystem::path(o.out_dir) / file;
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write '" + path.string() + "'");
  f << content;
  out << "wrote " << path.string() << '\n';
}

// Lipschitz interval from the bound block, else [-lambda_max, lambda_max] of S.
inline LipschitzEstimate lipschitz_for(const Config& cfg, const ShiftOperator& s,
                                       const std::function<LipschitzEstimate(double, double, const LipschitzOptions&)>& est) {
  const auto& b = cfg.block("bound");
  LipschitzOptions opt;
  opt.n_samples = b.get_size("lipschitz_samples", opt.n_samples);
  opt.seed = b.get_u64("lipschitz_seed", opt.seed);
  double lo = 0.0, hi = 0.0;
  if (b.has("lambda_lo") || b.has("lambda_hi")) {
    lo = b.get_double("lambda_lo");
    hi = b.get_double("lambda_hi");
  } else {
    const double r = spectral_radius(eigendecompose(s));
    lo = -r;
    hi = r;
  }
  return est(lo, hi, opt);
}

inline const char* model_block(const Config& cfg) {
  if (cfg.has("filter") == cfg.has("gcnn")) throw ConfigError("config: give exactly one of the filter and gcnn blocks");
  return cfg.has("filter") ? "filter" : "gcnn";
}

struct ModelReport {
  StabilityReport report;
  std::optional<GraphFilter> filter;
  std::optional<GCNN> net;
};

inline ModelReport model_bound(const Config& cfg, const ShiftOperator& s, const RESModel& m, const Eigen::VectorXd& x) {
  ModelReport r;
  if (std::string(model_block(cfg)) == "filter") {
    r.filter = filter_from_config(cfg.block("filter"));
    const auto cl = lipschitz_for(cfg, s, [&](double lo, double hi, const LipschitzOptions& opt) {
      return estimate_integral_lipschitz(*r.filter, lo, hi, opt);
    });
    r.report = filter_bound(*r.filter, s, m, x, cl);
  } else {
    r.net = gcnn_from_config(cfg.block("gcnn"));
    if (r.net->input_width() != 1) throw ConfigError("config: the CLI feeds single-feature signals");
    const auto cl = lipschitz_for(cfg, s, [&](double lo, double hi, const LipschitzOptions& opt) {
      return bank_lipschitz(*r.net, lo, hi, opt);
    });
    r.report = gcnn_bound(*r.net, s, m, x, cl);
  }
  return r;
}

inline VerdictPolicy verdict_policy(const Config& cfg) {
  VerdictPolicy v;
  const auto& b = cfg.block("bound");
  v.slack = b.get_double("slack", v.slack);
  v.slack_min_p = b.get_double("slack_min_p", v.slack_min_p);
  v.c_l_inflation = b.get_double("c_l_inflation", v.c_l_inflation);
  return v;
}

inline void check_bound_keys(const Config& cfg) {
  cfg.block("bound").allow_only({"n", "alpha", "c_L", "p", "x_norm2", "layers", "features", "c_sigma", "epsilon",
                                 "lambda_lo", "lambda_hi", "lipschitz_samples", "lipschitz_seed", "slack",
                                 "slack_min_p", "c_l_inflation"});
}

// ---------------------------------------------------------------------------
// Subcommands.

inline int run_bound(const Config& cfg, const CliOverrides& o, std::ostream& out) {
  cfg.allow_blocks({"graph", "filter", "gcnn", "signal", "res", "bound"});
  check_bound_keys(cfg);
  const auto& b = cfg.block("bound");
  double constant = 0.0, p = 0.0, x2 = 0.0;
  std::vector<std::string> warnings;
  if (b.has("n")) {
    // Closed-form arithmetic from given n, alpha, c_L (and L, F, C_sigma for a GCNN).
    const double n = b.get_double("n"), alpha = b.get_double("alpha"), cl = b.get_double("c_L");
    p = b.get_double("p", cfg.block("res").get_double("p", 0.97));
    x2 = b.get_double("x_norm2", 1.0);
    constant = b.has("layers") ? gcnn_constant(n, alpha, cl, b.get_double("layers"), b.get_double("features", 1.0),
                                               b.get_double("c_sigma", 1.0))
                               : filter_constant(n, alpha, cl);
    out << "n " << n << "\nalpha " << alpha << "\nc_L " << cl << '\n';
  } else {
    const auto s = shift_from_config(cfg);
    const auto res = res_from_config(cfg, o);
    const RESModel m(s, res.p, res.seed);
    const auto x = signal_from_config(cfg.block("signal"), s.size());
    const auto r = model_bound(cfg, s, m, x).report;
    constant = r.stability_constant_C;
    p = r.p;
    x2 = x.squaredNorm();
    warnings = r.warnings;
    out << "n " << s.size() << "\nalpha " << r.alpha << "\nc_L " << r.c_L << '\n';
  }
  if (!(p > 0.0 && p <= 1.0)) throw ConfigError("bound: p must lie in (0, 1]");
  const double bound = first_order_bound(constant, p, x2);
  out << "p " << p << "\nx_norm2 " << x2 << "\nC " << constant << "\nbound " << bound << '\n';
  for (double eps : b.get_doubles("epsilon", {})) {
    if (!(eps > 0.0)) throw ConfigError("bound: epsilon must be > 0");
    out << "prob_within eps=" << eps << " >= " << std::max(0.0, 1.0 - bound / eps) << '\n';
  }
  for (const auto& w : warnings) out << "warning " << w << '\n';
  return 0;
}

inline int run_mc(const Config& cfg, const CliOverrides& o, std::ostream& out) {
  cfg.allow_blocks({"graph", "filter", "gcnn", "signal", "res", "bound"});
  check_bound_keys(cfg);
  const auto s = shift_from_config(cfg);
  const auto res = res_from_config(cfg, o);
  const RESModel m(s, res.p, res.seed);
  const auto x = signal_from_config(cfg.block("signal"), s.size());
  auto mr = model_bound(cfg, s, m, x);
  const MCOptions mc{res.threads, 0};
  const auto d = mr.filter ? mc_filter_deviation(*mr.filter, s, m, x, res.trials, mc)
                           : mc_gcnn_deviation(*mr.net, s, m, res.policy, x, res.trials, mc);
  attach_empirical(mr.report, d);
  assign_verdict(mr.report, verdict_policy(cfg));
  write_summary(out, mr.report);
  out << "std error          " << d.std_error() << '\n';
  emit(o, "mc.csv", report_csv_header() + "\n" + report_csv_row(mr.report) + "\n", out);
  return mr.report.verdict == Verdict::ExceedsBound ? 1 : 0;
}

inline int run_moments(const Config& cfg, const CliOverrides& o, std::ostream& out) {
  cfg.allow_blocks({"graph", "res"});
  const auto s = shift_from_config(cfg);
  const auto res = res_from_config(cfg, o);
  const RESModel m(s, res.p, res.seed);
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  os << "p,draws,first_moment_dev,second_moment_dev\n"
     << res.p << ',' << res.draws << ',' << check_first_moment(m, res.draws) << ',' << check_second_moment(m, res.draws)
     << '\n';
  emit(o, "moments.csv", os.str(), out);
  return 0;
}

inline int run_train(const Config& cfg, const CliOverrides& o, std::ostream& out) {
  cfg.allow_blocks({"graph", "data", "gcnn", "train", "res"});
  const auto e = experiment_from_config(cfg, o);
  const auto prep = prepare_experiment(e);
  std::ostringstream trace;
  write_loss_trace(trace, prep.trace);
  emit(o, "loss_trace.csv", trace.str(), out);
  if (!o.out_dir.empty()) {
    std::ostringstream ck;
    save_checkpoint(ck, prep.net);
    emit(o, "model.ckpt", ck.str(), out);
  }
  const auto test = evaluate(prep.net, prep.shift, to_dataset(prep.data.test), LossKind::SoftmaxCrossEntropy, prep.readout);
  std::size_t base = 0;
  for (const auto& smp : prep.data.test)
    base += nearest_source_classify(prep.shift, prep.data.sources, e.t_max, smp.x) == smp.label;
  out << "test_accuracy " << test.accuracy << '\n'
      << "baseline_accuracy " << static_cast<double>(base) / static_cast<double>(prep.data.test.size()) << '\n';
  return 0;
}

inline int run_sweep_cmd(const Config& cfg, const CliOverrides& o, std::ostream& out) {
  cfg.allow_blocks({"graph", "data", "gcnn", "train", "res", "sweep"});
  const auto spec = sweep_from_config(cfg, o);
  const auto r = run_sweep(spec);
  std::ostringstream csv, plot;
  write_sweep_csv(csv, r);
  const std::string stem = std::string("sweep_") + to_string(spec.variable);
  emit(o, stem + ".csv", csv.str(), out);
  if (!o.out_dir.empty()) {
    write_plot_data(plot, r);
    emit(o, stem + ".dat", plot.str(), out);
  }
  return 0;
}

// Quick invariant checks; the acceptance binary runs the full protocols.
inline int run_selftest(const CliOverrides& o, std::ostream& out) {
  int failures = 0;
  auto report = [&](const char* name, bool ok, const std::string& detail) {
    out << (ok ? "PASS " : "FAIL ") << name << "  " << detail << '\n';
    failures += !ok;
  };
  const std::size_t threads = o.threads.value_or(1);

  {
    double worst = 0.0;
    for (std::uint64_t c = 0; c < 300; ++c) {
      Stream rng(7, {c});
      const std::size_t k = 1 + rng.below(6);
      std::vector<double> h(k + 1);
      for (auto& v : h) v = rng.uniform(-1.0, 1.0);
      FrequencyVector a{std::vector<double>(k)}, b{std::vector<double>(k)};
      for (std::size_t i = 0; i < k; ++i) {
        a.lambdas[i] = rng.uniform(-2.0, 2.0);
        b.lambdas[i] = rng.uniform(-2.0, 2.0);
      }
      const GraphFilter f(h);
      const auto g = lipschitz_gradient(f, a, b);
      double rhs = 0.0;
      for (std::size_t i = 0; i < k; ++i) rhs += g[i] * (a[i] - b[i]);
      const double lhs = generalized_frequency_response(f, a) - generalized_frequency_response(f, b);
      worst = std::max(worst, std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)));
    }
    report("difference-identity", worst <= 1e-10, "max rel err " + num(worst));
  }
  {
    double worst = 0.0;
    for (std::uint64_t c = 0; c < 20; ++c) {
      Stream rng(8, {c});
      const std::size_t n = 4 + rng.below(12);
      Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
      for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = i + 1; j < a.cols(); ++j)
          if (rng.bernoulli(0.4)) a(i, j) = a(j, i) = rng.uniform(0.1, 1.0);
      const auto s = ShiftOperator::from_matrix(a);
      const GraphFilter f({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
      Eigen::VectorXd x(static_cast<Eigen::Index>(n));
      for (auto& v : x) v = rng.uniform(-1.0, 1.0);
      const auto d = eigendecompose(s);
      Eigen::VectorXd hl = d.eigenvalues.unaryExpr([&](double l) { return frequency_response(f, l); });
      const Eigen::VectorXd spectral = d.eigenvectors * hl.asDiagonal() * d.eigenvectors.transpose() * x;
      worst = std::max(worst, (spectral - filter_apply(f, s, x)).cwiseAbs().maxCoeff());
    }
    report("spectral-consistency", worst <= 1e-8, "max abs err " + num(worst));
  }
  {
    Graph g(6);
    for (auto [i, j] : std::vector<std::pair<int, int>>{{0, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 5}, {0, 3}, {1, 4}})
      g.add_edge(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
    const std::size_t draws = 20000;
    const RESModel adj(g, ShiftVariant::Adjacency, 0.8, 5), lap(g, ShiftVariant::Laplacian, 0.8, 5);
    const double first = check_first_moment(adj, draws);
    const double second = std::max(check_second_moment(adj, draws), check_second_moment(lap, draws));
    report("moment-identities", first <= 3.0 * std::sqrt(0.16 / draws) && second <= 0.1,
           "first " + num(first) + ", second " + num(second));
  }
  {
    Graph g(2);
    g.add_edge(0, 1);
    const RESModel m(g, ShiftVariant::Adjacency, 0.9, 11);
    const auto d = mc_filter_deviation(GraphFilter({0.0, 1.0}), m.nominal(), m, Eigen::Vector2d(1, 0), 20000,
                                       MCOptions{threads, 0});
    report("two-node-oracle", std::abs(d.mean - 0.1) <= 3.0 * d.std_error(),
           "mean " + num(d.mean) + " vs 0.1");
  }
  {
    Graph g(8);
    for (std::size_t i = 0; i < 8; ++i) g.add_edge(i, (i + 1) % 8);
    g.add_edge(0, 4);
    const RESModel m(g, ShiftVariant::Adjacency, 1.0, 3);
    Architecture a;
    a.layers = 2;
    a.features = 3;
    a.order = 3;
    a.hidden.kind = Activation::Tanh;
    a.output.kind = Activation::Identity;
    const auto net = GCNN::random(a, 4);
    Eigen::VectorXd x(8);
    for (Eigen::Index i = 0; i < 8; ++i) x(i) = std::sin(static_cast<double>(i) + 1.0);
    const auto nominal = gcnn_forward(net, m.nominal(), x);
    bool ok = (gcnn_forward_stochastic(net, m, RealizationPolicy::IndependentPerFilter, x, 0) - nominal.output)
                  .cwiseAbs()
                  .maxCoeff() <= 1e-12;
    ok = ok && mc_gcnn_deviation(net, m.nominal(), m, RealizationPolicy::SharedPerLayerShift, x, 4).mean == 0.0;
    report("p1-degeneracy", ok, "");

    // Central differences of sum(W .* Y) in every coefficient.
    Eigen::MatrixXd w(8, 1);
    for (Eigen::Index i = 0; i < 8; ++i) w(i, 0) = std::cos(static_cast<double>(i));
    const auto grad = gcnn_backward(net, nominal, w).flat;
    auto params = net.parameters();
    double worst = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto probe = net;
      const double h = 1e-5, orig = params[i];
      params[i] = orig + h;
      probe.set_parameters(params);
      const double up = gcnn_forward(probe, m.nominal(), x).output.cwiseProduct(w).sum();
      params[i] = orig - h;
      probe.set_parameters(params);
      const double dn = gcnn_forward(probe, m.nominal(), x).output.cwiseProduct(w).sum();
      params[i] = orig;
      const double fd = (up - dn) / (2.0 * h);
      worst = std::max(worst, std::abs(fd - grad[i]) / std::max({1.0, std::abs(fd), std::abs(grad[i])}));
    }
    report("gradient-check", worst <= 1e-5, "max rel err " + num(worst));
  }
  {
    Graph g(10);
    Stream rng(12, {1});
    for (std::size_t i = 0; i < 10; ++i)
      for (std::size_t j = i + 1; j < 10; ++j)
        if (rng.bernoulli(0.35)) g.add_edge(i, j);
    const auto s = shift_from_graph(g, ShiftVariant::Adjacency);
    const double r = spectral_radius(eigendecompose(s));
    const RESModel m(s, 0.99, 6);
    const GraphFilter f({0.3, 0.2 / r, -0.1 / (r * r)});
    Eigen::VectorXd x = Eigen::VectorXd::Ones(10) / std::sqrt(10.0);
    auto rep = filter_bound(f, s, m, x, estimate_integral_lipschitz(f, -r, r, LipschitzOptions{2000, 1, true}));
    attach_empirical(rep, mc_filter_deviation(f, s, m, x, 2000, MCOptions{threads, 0}));
    assign_verdict(rep);
    report("filter-bound", rep.verdict != Verdict::ExceedsBound,
           std::string(to_string(rep.verdict)) + ", emp " + num(rep.empirical_mean_sq_dev) + " bound " +
               num(rep.bound_first_order));
  }
  {
    SweepSpec spec;
    spec.variable = SweepVariable::P;
    spec.grid = {0.9, 0.99};
    spec.fixed.n = 16;
    spec.fixed.sizes = {40, 10, 20};
    spec.fixed.features = 2;
    spec.fixed.order = 2;
    spec.fixed.train.epochs = 2;
    spec.fixed.trials = 3;
    spec.fixed.replicates = 1;
    spec.fixed.threads = threads;
    std::ostringstream a, b;
    write_sweep_csv(a, run_sweep(spec));
    write_sweep_csv(b, run_sweep(spec));
    report("deterministic-sweep", a.str() == b.str(), "");
  }
  out << (failures == 0 ? "selftest passed\n" : "selftest FAILED\n");
  return failures == 0 ? 0 : 1;
}

}  // namespace detail

inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Stability of graph filters and GCNNs under random edge sampling"};
  app.require_subcommand(1);
  std::string config_path;
  std::uint64_t seed = 0;
  std::size_t trials = 0, threads = 0;
  CliOverrides o;
  auto* seed_opt = app.add_option("--seed", seed, "RES sampling and training shuffle seed");
  auto* trials_opt = app.add_option("--trials", trials, "Monte Carlo trials")->check(CLI::PositiveNumber);
  auto* threads_opt = app.add_option("--threads", threads, "worker threads (0 = all cores; GCNN_STAB_THREADS overrides)");
  app.add_option("--config", config_path, "config file");
  app.add_option("--out", o.out_dir, "output directory (default: tables to stdout)");

  const std::pair<const char*, const char*> cmds[] = {
      {"bound", "closed-form stability constants and bounds"},
      {"mc", "Monte Carlo deviation with bound and verdict"},
      {"moments", "first and second moment checks of the edge sampling model"},
      {"train", "train a source-localization model"},
      {"sweep", "run a parameter sweep"},
      {"selftest", "quick invariant checks"},
  };
  for (const auto& [name, help] : cmds) app.add_subcommand(name, help)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }
  if (*seed_opt) o.seed = seed;
  if (*trials_opt) o.trials = trials;
  if (*threads_opt) o.threads = threads;

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    if (name == "selftest") return detail::run_selftest(o, out);
    if (config_path.empty()) throw ConfigError(name + ": --config is required");
    const Config cfg = load_config(config_path);
    if (name == "bound") return detail::run_bound(cfg, o, out);
    if (name == "mc") return detail::run_mc(cfg, o, out);
    if (name == "moments") return detail::run_moments(cfg, o, out);
    if (name == "train") return detail::run_train(cfg, o, out);
    return detail::run_sweep_cmd(cfg, o, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const InputError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return 3;
  } catch (const TrainingDivergedError& e) {
    err << "training diverged: " << e.what() << '\n';
    return 3;
  }
}

}  // namespace gstab
