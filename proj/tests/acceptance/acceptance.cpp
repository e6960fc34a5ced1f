// Runs the acceptance criteria and prints one PASS/FAIL line per criterion.
// Usage: acceptance [criterion numbers...]   (default: all)

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gcnn_stab/gcnn_stab.hpp"

using namespace gstab;

namespace {

struct Outcome {
  bool ok = true;
  std::string detail;
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os << std::setprecision(digits) << v;
  return os.str();
}

void note(const std::string& s) { std::cout << "    " << s << '\n'; }

Graph random_graph(std::size_t n, double density, Stream& rng) {
  while (true) {
    Graph g(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        if (rng.bernoulli(density)) g.add_edge(i, j);
    if (g.num_edges() > 0) return g;
  }
}

Eigen::VectorXd unit_signal(std::size_t n, Stream& rng) {
  Eigen::VectorXd x(static_cast<Eigen::Index>(n));
  for (auto& v : x) v = rng.uniform(-1.0, 1.0);
  return x / x.norm();
}

// Random coefficients rescaled so that max |h| over the sampled frequency space is <= 1.
GraphFilter normalized_filter(std::size_t order, double lo, double hi, Stream& rng, const LipschitzOptions& opt) {
  std::vector<double> c(order + 1);
  for (auto& v : c) v = rng.uniform(-1.0, 1.0);
  GraphFilter f(c);
  for (int pass = 0; pass < 4; ++pass) {
    const auto est = estimate_integral_lipschitz(f, lo, hi, opt);
    if (est.normalized()) return f;
    for (auto& v : c) v /= est.max_abs_response * 1.0001;
    f = GraphFilter(c);
  }
  return f;
}

// ---------------------------------------------------------------------------

Outcome c1_difference_identity() {
  double worst = 0.0;
  for (std::uint64_t c = 0; c < 1000; ++c) {
    Stream rng(101, {c});
    const std::size_t k = 1 + c % 6;
    std::vector<double> h(k + 1);
    for (auto& v : h) v = rng.uniform(-1.0, 1.0);
    FrequencyVector a{std::vector<double>(k)}, b{std::vector<double>(k)};
    for (std::size_t i = 0; i < k; ++i) {
      a.lambdas[i] = rng.uniform(-1.5, 1.5);
      b.lambdas[i] = rng.uniform(-1.5, 1.5);
    }
    const GraphFilter f(h);
    const auto g = lipschitz_gradient(f, a, b);
    double rhs = 0.0;
    for (std::size_t i = 0; i < k; ++i) rhs += g[i] * (a[i] - b[i]);
    const double lhs = generalized_frequency_response(f, a) - generalized_frequency_response(f, b);
    const double denom = std::max({std::abs(lhs), std::abs(rhs), 1e-300});
    worst = std::max(worst, std::abs(lhs - rhs) / denom);
  }
  return {worst <= 1e-10, "1000 cases, max relative error " + fmt(worst)};
}

Outcome c2_spectral_consistency() {
  double worst = 0.0;
  for (std::uint64_t c = 0; c < 100; ++c) {
    Stream rng(202, {c});
    const std::size_t n = 2 + rng.below(29);
    const auto variant = c % 3 == 0 ? ShiftVariant::Laplacian
                                    : (c % 3 == 1 ? ShiftVariant::Adjacency : ShiftVariant::NormalizedAdjacency);
    Graph g(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        if (rng.bernoulli(0.3)) g.add_edge(i, j, rng.uniform(0.2, 1.0));
    if (g.num_edges() == 0) g.add_edge(0, 1);
    const auto s = shift_from_graph(g, variant);
    std::vector<double> h(1 + rng.below(6));
    for (auto& v : h) v = rng.uniform(-1.0, 1.0);
    const GraphFilter f(h);
    const auto x = unit_signal(n, rng);
    const auto d = eigendecompose(s);
    const Eigen::VectorXd hl = d.eigenvalues.unaryExpr([&](double l) { return frequency_response(f, l); });
    const Eigen::VectorXd spectral = d.eigenvectors * (hl.asDiagonal() * (d.eigenvectors.transpose() * x));
    worst = std::max(worst, (spectral - filter_apply(f, s, x)).cwiseAbs().maxCoeff());
  }
  return {worst <= 1e-8, "100 cases, max abs error " + fmt(worst)};
}

Outcome c3_moments() {
  const std::size_t draws = 100000;
  Stream rng(303, {0});
  const auto g = random_graph(8, 0.45, rng);
  const double p = 0.9;
  const RESModel adj(g, ShiftVariant::Adjacency, p, 31), lap(g, ShiftVariant::Laplacian, p, 32);
  const double first = check_first_moment(adj, draws);
  const double first_tol = 3.0 * std::sqrt(p * (1.0 - p)) / std::sqrt(static_cast<double>(draws));
  const double second_adj = check_second_moment(adj, draws);
  const double second_lap = check_second_moment(lap, draws);
  const bool ok = first <= first_tol && second_adj <= 0.03 && second_lap <= 0.03;
  return {ok, "n=8, |E|=" + std::to_string(g.num_edges()) + ", p=0.9, N=1e5: first " + fmt(first) + " (tol " +
                  fmt(first_tol) + "), second adjacency " + fmt(second_adj) + ", Laplacian " + fmt(second_lap) +
                  " (tol 0.03)"};
}

Outcome c4_two_node() {
  Graph g(2);
  g.add_edge(0, 1);
  Outcome o;
  for (double p : {0.5, 0.9, 0.99}) {
    const RESModel m(g, ShiftVariant::Adjacency, p, 404);
    const auto d = mc_filter_deviation(GraphFilter({0.0, 1.0}), m.nominal(), m, Eigen::Vector2d(1, 0), 100000);
    const double exact = (1.0 - p) * 1.0;  // (1 - p) ||S x||^2
    const double z = std::abs(d.mean - exact) / d.std_error();
    o.ok = o.ok && z <= 3.0;
    o.detail += "p=" + fmt(p) + ": " + fmt(d.mean, 5) + " vs " + fmt(exact) + " (" + fmt(z, 2) + " se)  ";
  }
  return o;
}

struct BoundCase {
  StabilityReport report;
};

std::vector<BoundCase> filter_cases;

Outcome c5_filter_bound() {
  filter_cases.clear();
  std::size_t exceeds = 0, over = 0, inconclusive = 0;
  double worst_ratio = 0.0;
  const LipschitzOptions lopt{10000, 5, true};
  for (std::uint64_t c = 0; c < 20; ++c) {
    Stream rng(505, {c});
    const std::size_t n = 6 + rng.below(15);
    const auto g = random_graph(n, 0.3, rng);
    const auto variant = c % 2 == 0 ? ShiftVariant::Adjacency : ShiftVariant::Laplacian;
    const auto s = shift_from_graph(g, variant);
    const double r = spectral_radius(eigendecompose(s));
    const auto f = normalized_filter(1 + rng.below(5), -r, r, rng, lopt);
    const auto cl = estimate_integral_lipschitz(f, -r, r, lopt);
    const auto x = unit_signal(n, rng);
    for (double p : {0.98, 0.99, 0.995}) {
      const RESModel m(s, p, 5000 + c);
      auto rep = filter_bound(f, s, m, x, cl);
      attach_empirical(rep, mc_filter_deviation(f, s, m, x, 4000));
      assign_verdict(rep);
      exceeds += rep.verdict == Verdict::ExceedsBound;
      inconclusive += rep.verdict == Verdict::Inconclusive;
      const double ratio = rep.empirical_mean_sq_dev / rep.bound_first_order;
      over += ratio > 1.5;
      worst_ratio = std::max(worst_ratio, ratio);
      filter_cases.push_back({rep});
    }
  }
  return {exceeds == 0 && over == 0,
          "60 configurations: max emp/bound " + fmt(worst_ratio) + ", above 1.5x: " + std::to_string(over) +
              ", ExceedsBound: " + std::to_string(exceeds) + ", Inconclusive: " + std::to_string(inconclusive)};
}

Outcome c6_gcnn_bound() {
  std::size_t exceeds = 0, over = 0, configs = 0;
  double worst_ratio = 0.0;
  const LipschitzOptions lopt{4000, 6, true};
  for (std::uint64_t c = 0; c < 10; ++c) {
    Stream rng(606, {c});
    const std::size_t n = 6 + rng.below(15);
    const auto g = random_graph(n, 0.3, rng);
    const auto s = shift_from_graph(g, c % 2 == 0 ? ShiftVariant::Adjacency : ShiftVariant::Laplacian);
    const double r = spectral_radius(eigendecompose(s));
    Architecture a;
    a.layers = 1 + rng.below(3);
    a.features = 1 + rng.below(4);
    a.order = 1 + rng.below(4);
    a.readout_width = 1 + rng.below(a.features);
    a.hidden.kind = a.output.kind = c % 2 == 0 ? Activation::ReLU : Activation::Tanh;
    // Random bank with every filter normalized on the sampled frequency space.
    std::vector<GcnnLayer> layers = GCNN::random(a, 60 + c).layers();
    for (auto& layer : layers)
      for (auto& f : layer.bank) f = normalized_filter(a.order, -r, r, rng, lopt);
    const GCNN net(layers);
    const auto cl = bank_lipschitz(net, -r, r, lopt);
    const Eigen::MatrixXd x = unit_signal(n, rng);
    for (double p : {0.98, 0.99, 0.995}) {
      const RESModel m(s, p, 6000 + c);
      auto rep = gcnn_bound(net, s, m, x, cl);
      attach_empirical(rep, mc_gcnn_deviation(net, s, m, RealizationPolicy::IndependentPerFilter, x, 1500));
      assign_verdict(rep);
      exceeds += rep.verdict == Verdict::ExceedsBound;
      const double ratio = rep.empirical_mean_sq_dev / rep.bound_first_order;
      over += ratio > 1.5;
      worst_ratio = std::max(worst_ratio, ratio);
      ++configs;
    }
  }
  return {exceeds == 0 && over == 0, std::to_string(configs) + " configurations: max emp/bound " + fmt(worst_ratio) +
                                         ", above 1.5x: " + std::to_string(over) +
                                         ", ExceedsBound: " + std::to_string(exceeds)};
}

Outcome c7_probability_bound() {
  if (filter_cases.empty()) c5_filter_bound();
  double worst = 1.0;  // smallest (empirical - lower) / se margin, in std errors
  std::size_t violations = 0, checks = 0, nontrivial = 0;
  for (const auto& bc : filter_cases)
    for (double eps : {0.1, 0.3, 0.6}) {
      const auto pb = probability_bound(bc.report, eps);
      ++checks;
      nontrivial += pb.lower_bound > 0.0;
      const double slack = pb.empirical_fraction - pb.lower_bound + 3.0 * pb.binomial_std_error;
      if (slack < 0.0) ++violations;
      worst = std::min(worst, pb.empirical_fraction - pb.lower_bound);
    }
  return {violations == 0, std::to_string(checks) + " checks (" + std::to_string(nontrivial) +
                               " with a positive lower bound), min empirical - lower " + fmt(worst) +
                               ", violations " + std::to_string(violations)};
}

Outcome c8_linearity() {
  Stream rng(808, {0});
  const auto g = random_graph(12, 0.35, rng);
  const auto s = shift_from_graph(g, ShiftVariant::Adjacency);
  const double r = spectral_radius(eigendecompose(s));
  const LipschitzOptions lopt{10000, 8, true};
  const auto f = normalized_filter(3, -r, r, rng, lopt);
  const auto cl = estimate_integral_lipschitz(f, -r, r, lopt);
  const auto x = unit_signal(12, rng);
  const std::vector<double> grid{0.96, 0.97, 0.98, 0.99, 0.995};
  std::vector<double> devs;
  double constant = 0.0;
  for (double p : grid) {
    const RESModel m(s, p, 88);
    devs.push_back(mc_filter_deviation(f, s, m, x, 20000).mean);
    constant = filter_bound(f, s, m, x, cl).stability_constant_C;
  }
  const auto fit = linearity_fit(grid, devs);
  const double bound_slope = constant * x.squaredNorm();
  return {fit.r2 >= 0.9 && fit.slope <= bound_slope,
          "r2 " + fmt(fit.r2) + ", slope " + fmt(fit.slope) + " vs C||x||^2 " + fmt(bound_slope)};
}

Outcome c9_gradients() {
  double worst = 0.0;
  std::size_t nets = 0, params = 0;
  const Activation acts[] = {Activation::ReLU, Activation::Tanh, Activation::AbsoluteValue, Activation::Identity};
  for (std::size_t layers = 1; layers <= 3; ++layers)
    for (std::size_t features : {1, 2, 4})
      for (std::size_t order : {1, 3, 5}) {
        Stream rng(909, {layers, features, order});
        const std::size_t n = 12;
        const auto g = random_graph(n, 0.3, rng);
        const auto s = shift_from_graph(g, ShiftVariant::NormalizedAdjacency);
        Architecture a;
        a.layers = layers;
        a.features = features;
        a.order = order;
        a.readout_width = features;
        a.hidden.kind = acts[rng.below(4)];
        a.output.kind = acts[rng.below(4)];
        const auto net = GCNN::random(a, rng());
        const Eigen::VectorXd x = unit_signal(n, rng) * 3.0;
        Sample smp{x, static_cast<std::size_t>(rng.below(features)), {}};
        auto loss = [&](const GCNN& nn) {
          return sample_loss(gcnn_forward(nn, s, x).output, smp, LossKind::SoftmaxCrossEntropy, ReadoutSpec{}).loss;
        };
        const auto cache = gcnn_forward(net, s, x);
        const auto grad =
            gcnn_backward(net, cache, sample_loss(cache.output, smp, LossKind::SoftmaxCrossEntropy, ReadoutSpec{}).grad)
                .flat;
        auto p = net.parameters();
        auto probe = net;
        for (std::size_t i = 0; i < p.size(); ++i) {
          const double h = 1e-5, orig = p[i];
          p[i] = orig + h;
          probe.set_parameters(p);
          const double up = loss(probe);
          p[i] = orig - h;
          probe.set_parameters(p);
          const double dn = loss(probe);
          p[i] = orig;
          const double fd = (up - dn) / (2.0 * h);
          worst = std::max(worst, std::abs(fd - grad[i]) / std::max({1.0, std::abs(fd), std::abs(grad[i])}));
        }
        ++nets;
        params += p.size();
      }
  return {worst <= 1e-5, std::to_string(nets) + " networks, " + std::to_string(params) +
                             " coefficients, max relative error " + fmt(worst)};
}

Outcome c10_degeneracy() {
  Stream rng(1010, {0});
  const auto g = random_graph(10, 0.4, rng);
  const RESModel m(g, ShiftVariant::Adjacency, 1.0, 10);
  const auto& s = m.nominal();
  Architecture a;
  a.layers = 3;
  a.features = 3;
  a.order = 4;
  a.readout_width = 2;
  a.hidden.kind = Activation::Tanh;
  const auto net = GCNN::random(a, 11);
  const Eigen::VectorXd x = unit_signal(10, rng);
  const auto nominal = gcnn_forward(net, s, x).output;
  double diff = 0.0;
  for (auto policy : {RealizationPolicy::IndependentPerFilter, RealizationPolicy::SharedPerLayerShift})
    for (std::uint64_t d = 0; d < 20; ++d)
      diff = std::max(diff, (gcnn_forward_stochastic(net, m, policy, x, d) - nominal).cwiseAbs().maxCoeff());
  const GraphFilter f({0.2, -0.4, 0.3});
  const double dev_f = mc_filter_deviation(f, s, m, x, 50).mean;
  const double dev_g = mc_gcnn_deviation(net, s, m, RealizationPolicy::IndependentPerFilter, x, 50).mean +
                       mc_gcnn_deviation(net, s, m, RealizationPolicy::SharedPerLayerShift, x, 50).mean;
  const double moments = check_first_moment(m, 100) + check_second_moment(m, 100);

  ExperimentSpec e;
  e.n = 16;
  e.sizes = {40, 10, 20};
  e.features = 2;
  e.order = 2;
  e.train.epochs = 1;
  const auto prep = prepare_experiment(e);
  const auto acc = run_accuracy_deviation(prep.net, RESModel(prep.shift, 1.0, 1), prep.readout, prep.data.test, 5);
  const bool ok = diff <= 1e-12 && dev_f == 0.0 && dev_g == 0.0 && moments == 0.0 && acc.difference == 0.0;
  return {ok, "forward diff " + fmt(diff) + ", filter dev " + fmt(dev_f) + ", gcnn dev " + fmt(dev_g) +
                  ", moment devs " + fmt(moments) + ", accuracy diff " + fmt(acc.difference)};
}

// ---------------------------------------------------------------------------
// Trends at desk scale.

double combined_se(const SweepRow& a, const SweepRow& b) {
  return std::sqrt(a.std_error() * a.std_error() + b.std_error() * b.std_error());
}

void print_rows(const SweepResult& r) {
  for (const auto& row : r.rows)
    note(std::string(to_string(r.variable)) + "=" + fmt(row.value) + "  diff " + fmt(row.mean) + " +- " +
         fmt(row.std_error()) + "  nominal acc " + fmt(row.nominal_accuracy) + "  " + row.status);
}

Outcome c11_trends() {
  const ExperimentSpec base;
  note("desk setup: n=" + std::to_string(base.n) + ", SBM(" + fmt(base.p_intra) + ", " + fmt(base.p_inter) +
       "), t_max=" + std::to_string(base.t_max) + ", F=" + std::to_string(base.features) +
       ", K=" + std::to_string(base.order) + ", L=" + std::to_string(base.layers) + ", " +
       std::to_string(base.trials) + " trials x " + std::to_string(base.replicates) + " replicates");
  Outcome o;
  std::vector<std::string> parts;

  SweepSpec ps;
  ps.variable = SweepVariable::P;
  ps.grid = {0.94, 0.95, 0.96, 0.97, 0.98, 0.99};
  ps.fixed = base;
  const auto pr = run_sweep(ps);
  print_rows(pr);
  bool a_ok = true;
  for (std::size_t i = 0; i + 1 < pr.rows.size(); ++i) {
    const auto &lo = pr.rows[i], &hi = pr.rows[i + 1];
    a_ok = a_ok && lo.ok && hi.ok && hi.mean <= lo.mean + 2.0 * combined_se(lo, hi);
  }
  const double gap = (pr.rows.front().mean - pr.rows.back().mean) / combined_se(pr.rows.front(), pr.rows.back());
  parts.push_back(std::string("(a) p ") + (a_ok ? "ok" : "violated") + " [0.94 vs 0.99: " + fmt(gap, 3) + " se]");

  auto nondecreasing = [&](SweepVariable v, std::vector<double> grid, const char* label) {
    SweepSpec s;
    s.variable = v;
    s.grid = std::move(grid);
    s.fixed = base;
    s.fixed.p = 0.97;
    const auto r = run_sweep(s);
    print_rows(r);
    bool ok = true;
    for (std::size_t i = 0; i + 1 < r.rows.size(); ++i) {
      const auto &lo = r.rows[i], &hi = r.rows[i + 1];
      ok = ok && lo.ok && hi.ok && hi.mean >= lo.mean - 2.0 * combined_se(lo, hi);
    }
    parts.push_back(std::string(label) + (ok ? " ok" : " violated"));
    return ok;
  };
  const bool k_ok = nondecreasing(SweepVariable::K, {2, 3, 5}, "(b) K");
  const bool f_ok = nondecreasing(SweepVariable::F, {8, 16, 32}, "(b) F");

  SweepSpec bs;
  bs.variable = SweepVariable::P;
  bs.grid = {0.95};
  bs.fixed = base;
  bs.fixed.model = ModelKind::FilterBank;
  const auto br = run_sweep(bs);
  const auto& bank = br.rows.front();
  const auto& gcnn = pr.rows[1];
  note("filter bank p=0.95  diff " + fmt(bank.mean) + " +- " + fmt(bank.std_error()) + "  nominal acc " +
       fmt(bank.nominal_accuracy));
  const bool c_ok = bank.ok && gcnn.ok && gcnn.mean <= bank.mean + 2.0 * combined_se(gcnn, bank);
  parts.push_back(std::string("(c) GCNN <= bank ") + (c_ok ? "ok" : "violated"));

  o.ok = a_ok && k_ok && f_ok && c_ok;
  for (const auto& s : parts) o.detail += s + "; ";
  return o;
}

Outcome c12_determinism() {
  namespace fs = std::filesystem;
  const auto root = fs::temp_directory_path() / "gcnn_stab_acceptance";
  fs::remove_all(root);
  const std::string cfg = std::string(GSTAB_SOURCE_DIR) + "/ex/sweep_small.cfg";
  std::string csv[2];
  for (int run = 0; run < 2; ++run) {
    const auto dir = root / ("run" + std::to_string(run));
    const std::string cmd = std::string(GSTAB_CLI_PATH) + " sweep --config " + cfg + " --seed 7 --out " + dir.string() +
                            " > /dev/null 2>&1";
    if (std::system(cmd.c_str()) != 0) return {false, "sweep command failed"};
    std::ifstream in(dir / "sweep_p.csv", std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    csv[run] = ss.str();
  }
  const bool ok = !csv[0].empty() && csv[0] == csv[1];
  return {ok, "two CLI sweep runs, " + std::to_string(csv[0].size()) + " bytes, " + (ok ? "identical" : "different")};
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {1, "difference identity", 1, c1_difference_identity},
      {2, "spectral consistency", 5, c2_spectral_consistency},
      {3, "moment identities", 30, c3_moments},
      {4, "two-node oracle", 10, c4_two_node},
      {5, "filter bound holds", 120, c5_filter_bound},
      {6, "GCNN bound holds", 180, c6_gcnn_bound},
      {7, "probability bound", 60, c7_probability_bound},
      {8, "linearity in 1-p", 60, c8_linearity},
      {9, "gradient correctness", 30, c9_gradients},
      {10, "p=1 degeneracy", 1, c10_degeneracy},
      {11, "desk-scale trends", 1200, c11_trends},
      {12, "determinism", 60, c12_determinism},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const auto& c : all) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs < c.budget_s;
    const bool ok = o.ok && in_time;
    failed += !ok;
    std::cout << (ok ? "PASS" : "FAIL") << " [" << c.id << "] " << c.name << ": " << o.detail << " (" << fmt(secs, 3)
              << " s, budget " << c.budget_s << " s" << (in_time ? "" : ", over budget") << ")" << std::endl;
  }
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return failed == 0 ? 0 : 1;
}
