#pragma once

// Monte Carlo estimates of the expected squared output deviation under RES
// perturbations, and the first-order stability bounds they are checked against:
//   filters: E||H~x - Hx||^2  <= n alpha c_L^2 (1 - p) ||x||^2
//   GCNNs:   E||Phi~ - Phi||^2 <= n alpha c_L^2 L^2 C_sigma^(2L) F^(2L-2) (1 - p) ||x||^2
// plus the Markov-type probability bound derived from them.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "error.hpp"
#include "filters.hpp"
#include "gcnn.hpp"
#include "graph.hpp"
#include "parallel.hpp"
#include "perturbation.hpp"

namespace gstab {

enum class Verdict { WithinBound, ExceedsBound, Inconclusive };

inline const char* to_string(Verdict v) {
  switch (v) {
    case Verdict::WithinBound: return "WithinBound";
    case Verdict::ExceedsBound: return "ExceedsBound";
    case Verdict::Inconclusive: return "Inconclusive";
  }
  return "?";
}

struct DeviationStats {
  double mean = 0.0;
  double std = 0.0;  // sample std (n - 1)
  std::size_t trials = 0;
  std::vector<double> samples;  // per-trial squared deviations, in draw order

  double std_error() const noexcept { return trials > 0 ? std / std::sqrt(static_cast<double>(trials)) : 0.0; }
};

struct MCOptions {
  std::size_t threads = 1;      // 0 = hardware concurrency; GCNN_STAB_THREADS overrides
  std::uint64_t first_draw = 0;  // trial t uses draw index first_draw + t
};

namespace detail {

inline DeviationStats summarize(std::vector<double> samples) {
  DeviationStats r;
  const auto ms = mean_std(samples);
  r.mean = ms.mean;
  r.std = ms.std;
  r.trials = samples.size();
  r.samples = std::move(samples);
  return r;
}

inline void check_trials(std::size_t trials) {
  if (trials < 2) throw InputError("Monte Carlo deviation: need at least 2 trials");
}

}  // namespace detail

// ||H~(S)x - H(S)x||^2 over `trials` independent chains (chain id 0 of each draw).
inline DeviationStats mc_filter_deviation(const GraphFilter& f, const ShiftOperator& s, const RESModel& m,
                                          const Eigen::VectorXd& x, std::size_t trials, const MCOptions& opt = {}) {
  detail::check_trials(trials);
  if (s.size() != m.size()) throw InputError("mc_filter_deviation: shift and RES model sizes differ");
  const Eigen::VectorXd nominal = filter_apply(f, s, x);
  const std::size_t n = s.size();
  auto samples = parallel_map(trials, resolve_threads(opt.threads), [&](std::size_t t) {
    const std::uint64_t draw = opt.first_draw + t;
    std::vector<std::vector<std::size_t>> chain(f.order() + 1);
    for (std::size_t k = 1; k <= f.order(); ++k) m.dropped_edges(RealizationKey{draw, 0, k}, chain[k]);
    std::vector<double> out(n), scratch;
    detail::accumulate_chain(
        f.coeffs(), x.data(), n, out.data(),
        [&](std::size_t k, const double* in, double* o) { m.apply_realization(chain[k], in, o); }, scratch);
    double d = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double e = out[i] - nominal(static_cast<Eigen::Index>(i));
      d += e * e;
    }
    return d;
  });
  return detail::summarize(std::move(samples));
}

// ||Phi~(x) - Phi(x)||_F^2 over `trials` stochastic forwards.
inline DeviationStats mc_gcnn_deviation(const GCNN& net, const ShiftOperator& s, const RESModel& m,
                                        RealizationPolicy policy, const Eigen::MatrixXd& x, std::size_t trials,
                                        const MCOptions& opt = {}) {
  detail::check_trials(trials);
  if (s.size() != m.size()) throw InputError("mc_gcnn_deviation: shift and RES model sizes differ");
  const Eigen::MatrixXd nominal = gcnn_forward(net, s, x).output;
  auto samples = parallel_map(trials, resolve_threads(opt.threads), [&](std::size_t t) {
    return (gcnn_forward_stochastic(net, m, policy, x, opt.first_draw + t) - nominal).squaredNorm();
  });
  return detail::summarize(std::move(samples));
}

// ---------------------------------------------------------------------------
// Bounds.

// alpha = max degree for adjacency-type shifts, 2 for the Laplacian.
inline double alpha_for(const ShiftOperator& s) {
  return s.variant() == ShiftVariant::Laplacian ? 2.0 : static_cast<double>(max_degree(s.source()));
}

inline double filter_constant(double n, double alpha, double c_l) { return n * alpha * c_l * c_l; }

inline double gcnn_constant(double n, double alpha, double c_l, double layers, double features, double c_sigma = 1.0) {
  return n * alpha * c_l * c_l * layers * layers * std::pow(c_sigma, 2.0 * layers) * std::pow(features, 2.0 * layers - 2.0);
}

inline double first_order_bound(double constant, double p, double x_norm_sq) { return constant * (1.0 - p) * x_norm_sq; }

struct StabilityReport {
  double empirical_mean_sq_dev = 0.0;
  double empirical_std = 0.0;
  std::size_t trials = 0;
  double bound_first_order = 0.0;
  double stability_constant_C = 0.0;
  double p = 1.0;
  double alpha = 0.0;
  double c_L = 0.0;
  Verdict verdict = Verdict::Inconclusive;
  double slack = 0.0;  // slack actually applied
  // Bound recomputed with c_L scaled by VerdictPolicy::c_l_inflation.
  double bound_inflated = 0.0;
  std::vector<double> samples;
  std::vector<std::string> warnings;
};

namespace detail {

inline void check_interval(const ShiftOperator& s, const LipschitzEstimate& cl, StabilityReport& r) {
  if (!std::isfinite(cl.lambda_lo) || !std::isfinite(cl.lambda_hi) || !(cl.lambda_lo < cl.lambda_hi))
    throw ConfigError("stability bound: Lipschitz estimate has an invalid frequency interval");
  if (!std::isfinite(cl.c_L) || cl.c_L < 0.0) throw ConfigError("stability bound: c_L must be finite and >= 0");
  const auto d = eigendecompose(s);
  const double lo = d.eigenvalues.minCoeff(), hi = d.eigenvalues.maxCoeff();
  const double tol = 1e-9 * std::max(1.0, std::max(std::abs(lo), std::abs(hi)));
  if (lo < cl.lambda_lo - tol || hi > cl.lambda_hi + tol) {
    std::ostringstream os;
    os << "spectrum [" << lo << ", " << hi << "] not contained in the Lipschitz interval [" << cl.lambda_lo << ", "
       << cl.lambda_hi << "]";
    r.warnings.push_back(os.str());
  }
  if (!cl.normalized()) {
    std::ostringstream os;
    os << "filter is not normalized: max |h| = " << cl.max_abs_response << " > 1";
    r.warnings.push_back(os.str());
  }
}

}  // namespace detail

inline StabilityReport filter_bound(const GraphFilter& f, const ShiftOperator& s, const RESModel& m,
                                    const Eigen::VectorXd& x, const LipschitzEstimate& cl) {
  (void)f;
  StabilityReport r;
  detail::check_interval(s, cl, r);
  r.p = m.p();
  r.alpha = alpha_for(s);
  r.c_L = cl.c_L;
  r.stability_constant_C = filter_constant(static_cast<double>(s.size()), r.alpha, r.c_L);
  r.bound_first_order = first_order_bound(r.stability_constant_C, r.p, x.squaredNorm());
  return r;
}

// c_L is the largest estimate over the bank; pass it in `cl`.
inline StabilityReport gcnn_bound(const GCNN& net, const ShiftOperator& s, const RESModel& m, const Eigen::MatrixXd& x,
                                  const LipschitzEstimate& cl) {
  StabilityReport r;
  detail::check_interval(s, cl, r);
  double c_sigma = 0.0;
  for (const auto& l : net.layers()) c_sigma = std::max(c_sigma, l.sigma.c_sigma());
  r.p = m.p();
  r.alpha = alpha_for(s);
  r.c_L = cl.c_L;
  r.stability_constant_C = gcnn_constant(static_cast<double>(s.size()), r.alpha, r.c_L,
                                         static_cast<double>(net.num_layers()), static_cast<double>(net.width()), c_sigma);
  r.bound_first_order = first_order_bound(r.stability_constant_C, r.p, x.squaredNorm());
  return r;
}

// Largest Lipschitz estimate over every filter of a network.
inline LipschitzEstimate bank_lipschitz(const GCNN& net, double lambda_lo, double lambda_hi, const LipschitzOptions& opt = {}) {
  LipschitzEstimate best;
  bool first = true;
  for (const auto& l : net.layers())
    for (const auto& f : l.bank) {
      const auto e = estimate_integral_lipschitz(f, lambda_lo, lambda_hi, opt);
      if (first || e.c_L > best.c_L) {
        const double resp = first ? e.max_abs_response : std::max(best.max_abs_response, e.max_abs_response);
        best = e;
        best.max_abs_response = resp;
      } else {
        best.max_abs_response = std::max(best.max_abs_response, e.max_abs_response);
      }
      first = false;
    }
  return best;
}

struct VerdictPolicy {
  double slack = 0.5;            // multiplicative allowance for the O((1-p)^2) remainder
  double slack_min_p = 0.98;     // slack (and ExceedsBound) only where the first-order term dominates
  double c_l_inflation = 1.1;    // sampled c_L is a lower bound; re-check with this factor
};

// WithinBound: emp <= bound (1 + slack).
// ExceedsBound: emp also exceeds the bound recomputed with an inflated c_L, at p >= slack_min_p.
// Inconclusive otherwise.
inline void assign_verdict(StabilityReport& r, const VerdictPolicy& policy = {}) {
  r.slack = r.p >= policy.slack_min_p ? policy.slack : 0.0;
  r.bound_inflated = r.bound_first_order * policy.c_l_inflation * policy.c_l_inflation;
  const double threshold = r.bound_first_order * (1.0 + r.slack);
  if (r.empirical_mean_sq_dev <= threshold) {
    r.verdict = Verdict::WithinBound;
  } else if (r.p >= policy.slack_min_p && r.empirical_mean_sq_dev > r.bound_inflated * (1.0 + r.slack)) {
    r.verdict = Verdict::ExceedsBound;
  } else {
    r.verdict = Verdict::Inconclusive;
  }
}

inline void attach_empirical(StabilityReport& r, const DeviationStats& d) {
  r.empirical_mean_sq_dev = d.mean;
  r.empirical_std = d.std;
  r.trials = d.trials;
  r.samples = d.samples;
}

struct ProbabilityBound {
  double lower_bound = 0.0;          // max(0, 1 - bound / eps)
  double empirical_fraction = 0.0;   // fraction of trials with dev^2 <= eps
  double binomial_std_error = 0.0;   // sqrt(q (1 - q) / trials) at the lower bound q
};

inline ProbabilityBound probability_bound(const StabilityReport& r, double epsilon) {
  if (!(epsilon > 0.0)) throw InputError("probability_bound: epsilon must be > 0");
  ProbabilityBound b;
  b.lower_bound = std::isinf(epsilon) ? 1.0 : std::max(0.0, 1.0 - r.bound_first_order / epsilon);
  if (!r.samples.empty()) {
    std::size_t within = 0;
    for (double d : r.samples) within += d <= epsilon;
    b.empirical_fraction = static_cast<double>(within) / static_cast<double>(r.samples.size());
    const double q = b.lower_bound;
    b.binomial_std_error = std::sqrt(q * (1.0 - q) / static_cast<double>(r.samples.size()));
  }
  return b;
}

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};

// Least squares of deviation against (1 - p).
inline LinearFit linearity_fit(const std::vector<double>& p_grid, const std::vector<double>& deviations) {
  if (p_grid.size() != deviations.size()) throw InputError("linearity_fit: grid and deviations differ in length");
  if (p_grid.size() < 3) throw InputError("linearity_fit: need at least 3 grid points");
  for (double p : p_grid)
    if (!(p >= 0.9 && p <= 1.0)) throw InputError("linearity_fit: grid points must lie in [0.9, 1]");
  const auto n = static_cast<double>(p_grid.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < p_grid.size(); ++i) {
    mx += (1.0 - p_grid[i]) / n;
    my += deviations[i] / n;
  }
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < p_grid.size(); ++i) {
    const double dx = (1.0 - p_grid[i]) - mx, dy = deviations[i] - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) throw InputError("linearity_fit: degenerate grid or constant deviations");
  LinearFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  fit.r2 = (sxy * sxy) / (sxx * syy);
  return fit;
}

// ---------------------------------------------------------------------------
// Output.

inline std::string report_csv_header() { return "p,trials,emp_mean,emp_std,bound,C,cL,alpha,verdict"; }

inline std::string report_csv_row(const StabilityReport& r) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << r.p << ',' << r.trials << ','
     << r.empirical_mean_sq_dev << ',' << r.empirical_std << ',' << r.bound_first_order << ',' << r.stability_constant_C
     << ',' << r.c_L << ',' << r.alpha << ',' << to_string(r.verdict);
  return os.str();
}

inline void write_summary(std::ostream& out, const StabilityReport& r) {
  out << "p                  " << r.p << '\n'
      << "trials             " << r.trials << '\n'
      << "empirical mean     " << r.empirical_mean_sq_dev << '\n'
      << "empirical std      " << r.empirical_std << '\n'
      << "alpha              " << r.alpha << '\n'
      << "c_L                " << r.c_L << '\n'
      << "constant C         " << r.stability_constant_C << '\n'
      << "first-order bound  " << r.bound_first_order << '\n'
      << "slack              " << r.slack << '\n'
      << "verdict            " << to_string(r.verdict) << '\n';
  for (const auto& w : r.warnings) out << "warning            " << w << '\n';
}

}  // namespace gstab
