#pragma once

// Polynomial graph filters H(S) = sum_k h_k S^k, their random-chain variant
// sum_k h_k S_k ... S_1 x, and the spectral quantities used by the stability
// bounds: the univariate and multivariate frequency responses, the mixed-point
// ("Lipschitz") gradient and sampled integral-Lipschitz constants.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "error.hpp"
#include "graph.hpp"
#include "rng.hpp"

namespace gstab {

class GraphFilter {
 public:
  GraphFilter() : coeffs_{1.0} {}
  explicit GraphFilter(std::vector<double> coeffs) : coeffs_(std::move(coeffs)) { validate(); }
  GraphFilter(std::initializer_list<double> coeffs) : coeffs_(coeffs) { validate(); }

  std::size_t order() const noexcept { return coeffs_.size() - 1; }
  const std::vector<double>& coeffs() const noexcept { return coeffs_; }
  double operator[](std::size_t k) const noexcept { return coeffs_[k]; }

  void set_coeffs(std::vector<double> c) {
    coeffs_ = std::move(c);
    validate();
  }

 private:
  void validate() const {
    if (coeffs_.empty()) throw InputError("graph filter needs at least one coefficient");
    for (double c : coeffs_)
      if (!std::isfinite(c)) throw InputError("graph filter coefficients must be finite");
  }

  std::vector<double> coeffs_;
};

// Plain text: one line of decimal coefficients.
inline std::string format_coeffs(const GraphFilter& f) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t k = 0; k < f.coeffs().size(); ++k) os << (k ? " " : "") << f[k];
  return os.str();
}

inline GraphFilter parse_coeffs(const std::string& line) {
  std::istringstream is(line);
  std::vector<double> c;
  std::string tok;
  while (is >> tok) {
    try {
      std::size_t used = 0;
      c.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw ConfigError("filter coefficients: cannot parse '" + tok + "'");
    }
  }
  if (c.empty()) throw ConfigError("filter coefficients: empty line");
  return GraphFilter(std::move(c));
}

namespace detail {

// Sum_k h_k z_k where z_0 = x and z_k = shift(k, z_{k-1}).
// `shift(k, in, out)` applies the k-th (1-based) shift.
template <typename ShiftFn>
void accumulate_chain(std::span<const double> h, const double* x, std::size_t n, double* out, ShiftFn&& shift,
                      std::vector<double>& scratch) {
  scratch.resize(2 * n);
  double* cur = scratch.data();
  double* nxt = scratch.data() + n;
  std::copy(x, x + n, cur);
  for (std::size_t i = 0; i < n; ++i) out[i] = h[0] * cur[i];
  for (std::size_t k = 1; k < h.size(); ++k) {
    shift(k, static_cast<const double*>(cur), nxt);
    std::swap(cur, nxt);
    for (std::size_t i = 0; i < n; ++i) out[i] += h[k] * cur[i];
  }
}

}  // namespace detail

inline Eigen::VectorXd filter_apply(const GraphFilter& f, const ShiftOperator& s, const Eigen::VectorXd& x) {
  if (static_cast<std::size_t>(x.size()) != s.size()) throw InputError("filter_apply: signal length != node count");
  Eigen::VectorXd out(x.size());
  std::vector<double> scratch;
  detail::accumulate_chain(f.coeffs(), x.data(), s.size(), out.data(),
                           [&](std::size_t, const double* in, double* o) { s.apply(in, o); }, scratch);
  return out;
}

// h_0 x + sum_{k>=1} h_k S_k ... S_1 x; chain[k-1] is S_k.
inline Eigen::VectorXd filter_apply_chain(const GraphFilter& f, std::span<const ShiftOperator> chain,
                                          const Eigen::VectorXd& x) {
  if (chain.size() != f.order()) throw InputError("filter_apply_chain: chain length must equal the filter order");
  const auto n = static_cast<std::size_t>(x.size());
  for (const auto& s : chain)
    if (s.size() != n) throw InputError("filter_apply_chain: chain member dimension mismatch");
  Eigen::VectorXd out(x.size());
  std::vector<double> scratch;
  detail::accumulate_chain(f.coeffs(), x.data(), n, out.data(),
                           [&](std::size_t k, const double* in, double* o) { chain[k - 1].apply(in, o); }, scratch);
  return out;
}

// h(lambda) by Horner.
inline double frequency_response(const GraphFilter& f, double lambda) noexcept {
  const auto& h = f.coeffs();
  double acc = h.back();
  for (std::size_t k = h.size() - 1; k-- > 0;) acc = acc * lambda + h[k];
  return acc;
}

// Multivariate frequency vector [lambda_1 .. lambda_K]; lambda_0 = 1 implicitly.
struct FrequencyVector {
  std::vector<double> lambdas;

  std::size_t size() const noexcept { return lambdas.size(); }
  double operator[](std::size_t k) const noexcept { return lambdas[k]; }
};

// sum_k h_k prod_{kappa <= k} lambda_kappa.
inline double generalized_frequency_response(const GraphFilter& f, const FrequencyVector& lv) {
  if (lv.size() != f.order()) throw InputError("generalized_frequency_response: vector length != filter order");
  double prefix = 1.0;
  double acc = f[0];
  for (std::size_t k = 1; k <= f.order(); ++k) {
    prefix *= lv[k - 1];
    acc += f[k] * prefix;
  }
  return acc;
}

// Entry k (1-based) is the partial derivative in lambda_k evaluated at the
// mixed point [l1_1..l1_k, l2_{k+1}..l2_K]:
//   sum_{j>=k} h_j prod_{kappa<k} l1_kappa prod_{k<kappa<=j} l2_kappa.
inline std::vector<double> lipschitz_gradient(const GraphFilter& f, const FrequencyVector& l1,
                                              const FrequencyVector& l2) {
  const std::size_t order = f.order();
  if (l1.size() != order || l2.size() != order)
    throw InputError("lipschitz_gradient: frequency vectors must have the filter order as length");
  std::vector<double> grad(order);
  if (order == 0) return grad;
  // tail[k] = h_k + l2_{k+1} * tail[k+1], tail[K] = h_K  (1-based k)
  std::vector<double> tail(order + 1);
  tail[order] = f[order];
  for (std::size_t k = order - 1; k >= 1; --k) tail[k] = f[k] + l2[k] * tail[k + 1];
  double prefix = 1.0;
  for (std::size_t k = 1; k <= order; ++k) {
    grad[k - 1] = prefix * tail[k];
    prefix *= l1[k - 1];
  }
  return grad;
}

// Max |h(lambda)| over a uniform grid of the interval (univariate response).
inline double max_abs_response(const GraphFilter& f, double lambda_lo, double lambda_hi, std::size_t points = 1001) {
  double m = 0.0;
  for (std::size_t i = 0; i < points; ++i) {
    const double t = points == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(points - 1);
    m = std::max(m, std::abs(frequency_response(f, lambda_lo + t * (lambda_hi - lambda_lo))));
  }
  return m;
}

struct LipschitzEstimate {
  double c_plain = 0.0;   // max ||grad_L h||_2
  double c_scaled = 0.0;  // max ||lambda_1 .* grad_L h||_2
  double c_L = 0.0;
  std::size_t samples_used = 0;
  double lambda_lo = 0.0;
  double lambda_hi = 0.0;
  double max_abs_response = 0.0;  // max |h| over the univariate grid and every sampled point

  bool normalized() const noexcept { return max_abs_response <= 1.0; }
};

struct LipschitzOptions {
  std::size_t n_samples = 10000;
  std::uint64_t seed = 0;
  bool refine = true;  // local pattern search around the best samples
};

namespace detail {

struct LipschitzProbe {
  double plain = 0.0;
  double scaled = 0.0;
  double response = 0.0;
};

// point = [l1 (K entries), l2 (K entries)]
inline LipschitzProbe probe(const GraphFilter& f, const std::vector<double>& point) {
  const std::size_t order = f.order();
  FrequencyVector l1{std::vector<double>(point.begin(), point.begin() + static_cast<std::ptrdiff_t>(order))};
  FrequencyVector l2{std::vector<double>(point.begin() + static_cast<std::ptrdiff_t>(order), point.end())};
  const auto g = lipschitz_gradient(f, l1, l2);
  LipschitzProbe r;
  for (std::size_t k = 0; k < order; ++k) {
    r.plain += g[k] * g[k];
    r.scaled += (l1[k] * g[k]) * (l1[k] * g[k]);
  }
  r.plain = std::sqrt(r.plain);
  r.scaled = std::sqrt(r.scaled);
  r.response = std::max(std::abs(generalized_frequency_response(f, l1)), std::abs(generalized_frequency_response(f, l2)));
  return r;
}

}  // namespace detail

inline LipschitzEstimate estimate_integral_lipschitz(const GraphFilter& f, double lambda_lo, double lambda_hi,
                                                     const LipschitzOptions& opt = {}) {
  if (!(lambda_lo < lambda_hi) || !std::isfinite(lambda_lo) || !std::isfinite(lambda_hi))
    throw ConfigError("estimate_integral_lipschitz: need a finite interval with lo < hi");
  if (opt.n_samples == 0) throw ConfigError("estimate_integral_lipschitz: n_samples must be >= 1");
  LipschitzEstimate est;
  est.lambda_lo = lambda_lo;
  est.lambda_hi = lambda_hi;
  est.samples_used = opt.n_samples;
  const std::size_t order = f.order();
  est.max_abs_response = max_abs_response(f, lambda_lo, lambda_hi);
  if (order == 0) return est;

  std::vector<double> point(2 * order);
  std::vector<double> best_plain_pt, best_scaled_pt;
  for (std::size_t s = 0; s < opt.n_samples; ++s) {
    Stream rng(opt.seed, {0x11B5ULL, s});
    for (auto& v : point) v = rng.uniform(lambda_lo, lambda_hi);
    const auto pr = detail::probe(f, point);
    est.max_abs_response = std::max(est.max_abs_response, pr.response);
    if (best_plain_pt.empty() || pr.plain > est.c_plain) {
      est.c_plain = pr.plain;
      best_plain_pt = point;
    }
    if (best_scaled_pt.empty() || pr.scaled > est.c_scaled) {
      est.c_scaled = pr.scaled;
      best_scaled_pt = point;
    }
  }

  if (opt.refine) {
    // Coordinate pattern search; every accepted point is a genuine evaluation,
    // so the estimate stays a lower bound on the true constant.
    auto refine = [&](std::vector<double> pt, double best, bool scaled) {
      double step = 0.25 * (lambda_hi - lambda_lo);
      while (step > 1e-9 * (lambda_hi - lambda_lo)) {
        bool improved = false;
        for (std::size_t c = 0; c < pt.size(); ++c) {
          for (double dir : {1.0, -1.0}) {
            const double old = pt[c];
            pt[c] = std::clamp(old + dir * step, lambda_lo, lambda_hi);
            const auto pr = detail::probe(f, pt);
            est.max_abs_response = std::max(est.max_abs_response, pr.response);
            const double val = scaled ? pr.scaled : pr.plain;
            if (val > best) {
              best = val;
              improved = true;
            } else {
              pt[c] = old;
            }
          }
        }
        if (!improved) step *= 0.5;
      }
      return best;
    };
    est.c_plain = refine(best_plain_pt, est.c_plain, false);
    est.c_scaled = refine(best_scaled_pt, est.c_scaled, true);
  }
  est.c_L = std::max(est.c_plain, est.c_scaled);
  return est;
}

}  // namespace gstab
