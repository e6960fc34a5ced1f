#pragma once

// Graph convolutional neural network: L layers, each a bank of polynomial graph
// filters H^{fg} followed by a pointwise nonlinearity,
//   x_l^f = sigma( sum_g H_l^{fg}(S) x_{l-1}^g ).
// No bias terms. The first layer reads a single input feature, hidden layers
// carry F features and the last layer emits `readout_width` features.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <iomanip>
#include <istream>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "error.hpp"
#include "filters.hpp"
#include "graph.hpp"
#include "parallel.hpp"
#include "perturbation.hpp"
#include "rng.hpp"

namespace gstab {

enum class Activation { ReLU, AbsoluteValue, Tanh, Identity };

struct Nonlinearity {
  Activation kind = Activation::ReLU;

  double c_sigma() const noexcept { return 1.0; }

  double operator()(double a) const noexcept {
    switch (kind) {
      case Activation::ReLU: return a > 0.0 ? a : 0.0;
      case Activation::AbsoluteValue: return std::abs(a);
      case Activation::Tanh: return std::tanh(a);
      case Activation::Identity: return a;
    }
    return a;
  }

  // Subgradient at the kinks is 0.
  double derivative(double a) const noexcept {
    switch (kind) {
      case Activation::ReLU: return a > 0.0 ? 1.0 : 0.0;
      case Activation::AbsoluteValue: return a > 0.0 ? 1.0 : (a < 0.0 ? -1.0 : 0.0);
      case Activation::Tanh: {
        const double t = std::tanh(a);
        return 1.0 - t * t;
      }
      case Activation::Identity: return 1.0;
    }
    return 1.0;
  }
};

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::ReLU: return "relu";
    case Activation::AbsoluteValue: return "abs";
    case Activation::Tanh: return "tanh";
    case Activation::Identity: return "identity";
  }
  return "?";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::ReLU;
  if (s == "abs" || s == "absolute") return Activation::AbsoluteValue;
  if (s == "tanh") return Activation::Tanh;
  if (s == "identity" || s == "linear") return Activation::Identity;
  throw ConfigError("unknown nonlinearity '" + s + "'");
}

struct GcnnLayer {
  std::size_t in_features = 1;
  std::size_t out_features = 1;
  std::vector<GraphFilter> bank;  // bank[f * in_features + g]: input g -> output f
  Nonlinearity sigma;

  const GraphFilter& filter(std::size_t f, std::size_t g) const { return bank[f * in_features + g]; }
};

struct Architecture {
  std::size_t layers = 2;
  std::size_t features = 16;  // F
  std::size_t order = 5;      // K
  std::size_t readout_width = 1;
  std::size_t input_width = 1;
  Nonlinearity hidden{Activation::ReLU};
  Nonlinearity output{Activation::ReLU};
};

class GCNN {
 public:
  GCNN() = default;

  explicit GCNN(std::vector<GcnnLayer> layers) : layers_(std::move(layers)) { validate(); }

  // Coefficients uniform in +-scale / sqrt(in_features * (K + 1)).
  static GCNN random(const Architecture& arch, std::uint64_t seed, double scale = 1.0) {
    if (arch.layers == 0) throw ConfigError("gcnn: need at least one layer");
    if (arch.features == 0 || arch.readout_width == 0 || arch.input_width == 0) throw ConfigError("gcnn: feature widths must be positive");
    std::vector<GcnnLayer> layers(arch.layers);
    for (std::size_t l = 0; l < arch.layers; ++l) {
      auto& layer = layers[l];
      layer.in_features = l == 0 ? arch.input_width : arch.features;
      layer.out_features = l + 1 == arch.layers ? arch.readout_width : arch.features;
      layer.sigma = l + 1 == arch.layers ? arch.output : arch.hidden;
      const double a = scale / std::sqrt(static_cast<double>(layer.in_features * (arch.order + 1)));
      Stream rng(seed, {0x6C4EULL, l});
      layer.bank.reserve(layer.in_features * layer.out_features);
      for (std::size_t q = 0; q < layer.in_features * layer.out_features; ++q) {
        std::vector<double> c(arch.order + 1);
        for (auto& v : c) v = rng.uniform(-a, a);
        layer.bank.emplace_back(std::move(c));
      }
    }
    return GCNN(std::move(layers));
  }

  const std::vector<GcnnLayer>& layers() const noexcept { return layers_; }
  std::size_t num_layers() const noexcept { return layers_.size(); }
  std::size_t order() const noexcept { return layers_.front().bank.front().order(); }
  std::size_t input_width() const noexcept { return layers_.front().in_features; }
  std::size_t output_width() const noexcept { return layers_.back().out_features; }
  // Widest bank dimension (the F of the stability constant).
  std::size_t width() const noexcept {
    std::size_t f = 1;
    for (const auto& l : layers_) f = std::max({f, l.in_features, l.out_features});
    return f;
  }
  std::size_t num_filters() const noexcept {
    std::size_t c = 0;
    for (const auto& l : layers_) c += l.bank.size();
    return c;
  }
  std::size_t parameter_count() const noexcept { return num_filters() * (order() + 1); }

  std::vector<double> parameters() const {
    std::vector<double> p;
    p.reserve(parameter_count());
    for (const auto& l : layers_)
      for (const auto& f : l.bank) p.insert(p.end(), f.coeffs().begin(), f.coeffs().end());
    return p;
  }

  void set_parameters(std::span<const double> p) {
    if (p.size() != parameter_count()) throw InputError("gcnn: parameter vector has the wrong length");
    const std::size_t stride = order() + 1;
    std::size_t off = 0;
    for (auto& l : layers_)
      for (auto& f : l.bank) {
        f.set_coeffs(std::vector<double>(p.begin() + static_cast<std::ptrdiff_t>(off),
                                         p.begin() + static_cast<std::ptrdiff_t>(off + stride)));
        off += stride;
      }
  }

  // Order-sensitive hash of all coefficients; used to detect stale caches.
  std::uint64_t fingerprint() const noexcept {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (const auto& l : layers_)
      for (const auto& f : l.bank)
        for (double c : f.coeffs()) {
          std::uint64_t bits;
          std::memcpy(&bits, &c, sizeof bits);
          h = mix64(h ^ bits);
        }
    return h;
  }

  // Parameter offset of filter (l, f, g).
  std::size_t offset(std::size_t l, std::size_t f, std::size_t g) const noexcept {
    std::size_t off = 0;
    for (std::size_t i = 0; i < l; ++i) off += layers_[i].bank.size();
    return (off + f * layers_[l].in_features + g) * (order() + 1);
  }

 private:
  void validate() const {
    if (layers_.empty()) throw InputError("gcnn: need at least one layer");
    const std::size_t k = layers_.front().bank.empty() ? 0 : layers_.front().bank.front().order();
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& layer = layers_[l];
      if (layer.in_features == 0 || layer.out_features == 0) throw InputError("gcnn: feature widths must be positive");
      if (layer.bank.size() != layer.in_features * layer.out_features)
        throw InputError("gcnn: filter bank size does not match its feature widths");
      if (l > 0 && layers_[l - 1].out_features != layer.in_features)
        throw InputError("gcnn: layer widths do not chain");
      for (const auto& f : layer.bank)
        if (f.order() != k) throw InputError("gcnn: all filters must share the same order");
    }
  }

  std::vector<GcnnLayer> layers_;
};

// ---------------------------------------------------------------------------
// Forward passes.

namespace detail {

inline void axpy(double a, const double* x, double* y, std::size_t n) noexcept {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

// powers.col(k) = S^k x for k = 0..K using `shift(k, in, out)`.
template <typename ShiftFn>
void shift_powers(const double* x, std::size_t n, std::size_t order, Eigen::MatrixXd& powers, ShiftFn&& shift) {
  powers.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(order + 1));
  std::copy(x, x + n, powers.col(0).data());
  for (std::size_t k = 1; k <= order; ++k)
    shift(k, static_cast<const double*>(powers.col(static_cast<Eigen::Index>(k - 1)).data()),
          powers.col(static_cast<Eigen::Index>(k)).data());
}

// out = sum_k h_k powers.col(k), accumulated in the same order as accumulate_chain.
inline void combine_powers(const GraphFilter& f, const Eigen::MatrixXd& powers, double* out) {
  const auto n = static_cast<std::size_t>(powers.rows());
  const double* z0 = powers.col(0).data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f[0] * z0[i];
  for (std::size_t k = 1; k <= f.order(); ++k) axpy(f[k], powers.col(static_cast<Eigen::Index>(k)).data(), out, n);
}

}  // namespace detail

struct ForwardCache {
  std::size_t n = 0;
  std::uint64_t fingerprint = 0;
  const ShiftOperator* shift = nullptr;              // must outlive the cache
  std::vector<Eigen::MatrixXd> inputs;               // per layer: n x in_features
  std::vector<std::vector<Eigen::MatrixXd>> powers;  // per layer, per input feature: n x (K + 1)
  std::vector<Eigen::MatrixXd> pre;                  // per layer: n x out_features
  Eigen::MatrixXd output;                            // n x output_width
};

namespace detail {

inline void check_input(const GCNN& net, std::size_t n, const Eigen::MatrixXd& x, const char* who) {
  if (static_cast<std::size_t>(x.rows()) != n) throw InputError(std::string(who) + ": signal length != node count");
  if (static_cast<std::size_t>(x.cols()) != net.input_width())
    throw InputError(std::string(who) + ": input feature count != network input width");
}

}  // namespace detail

// x is n x input_width (a plain signal for the usual single-feature input).
inline ForwardCache gcnn_forward(const GCNN& net, const ShiftOperator& s, const Eigen::MatrixXd& x) {
  const std::size_t n = s.size();
  detail::check_input(net, n, x, "gcnn_forward");
  ForwardCache c;
  c.n = n;
  c.fingerprint = net.fingerprint();
  c.shift = &s;
  const std::size_t order = net.order();
  Eigen::MatrixXd cur = x;
  std::vector<double> u(n);
  for (const auto& layer : net.layers()) {
    c.inputs.push_back(cur);
    auto& pw = c.powers.emplace_back(layer.in_features);
    for (std::size_t g = 0; g < layer.in_features; ++g)
      detail::shift_powers(cur.col(static_cast<Eigen::Index>(g)).data(), n, order, pw[g],
                           [&](std::size_t, const double* in, double* out) { s.apply(in, out); });
    Eigen::MatrixXd pre = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(layer.out_features));
    for (std::size_t f = 0; f < layer.out_features; ++f) {
      double* uf = pre.col(static_cast<Eigen::Index>(f)).data();
      for (std::size_t g = 0; g < layer.in_features; ++g) {
        detail::combine_powers(layer.filter(f, g), pw[g], u.data());
        detail::axpy(1.0, u.data(), uf, n);
      }
    }
    cur = pre.unaryExpr([&](double a) { return layer.sigma(a); });
    c.pre.push_back(std::move(pre));
  }
  c.output = std::move(cur);
  return c;
}

enum class RealizationPolicy { IndependentPerFilter, SharedPerLayerShift };

inline const char* to_string(RealizationPolicy p) {
  return p == RealizationPolicy::IndependentPerFilter ? "independent" : "shared";
}

inline RealizationPolicy parse_policy(const std::string& s) {
  if (s == "independent" || s == "independent_per_filter") return RealizationPolicy::IndependentPerFilter;
  if (s == "shared" || s == "shared_per_layer") return RealizationPolicy::SharedPerLayerShift;
  throw ConfigError("unknown realization policy '" + s + "'");
}

struct StochasticStats {
  std::size_t chains = 0;        // distinct random chains consumed
  std::size_t realizations = 0;  // random shift realizations consumed
};

// Forward pass in which every shift is a RES realization. Chains are keyed by
// (draw_index, chain id): IndependentPerFilter numbers filters consecutively
// across layers, SharedPerLayerShift uses the layer index.
inline Eigen::MatrixXd gcnn_forward_stochastic(const GCNN& net, const RESModel& m, RealizationPolicy policy,
                                               const Eigen::MatrixXd& x, std::uint64_t draw_index,
                                               StochasticStats* stats = nullptr) {
  const std::size_t n = m.size();
  detail::check_input(net, n, x, "gcnn_forward_stochastic");
  const std::size_t order = net.order();
  Eigen::MatrixXd cur = x;
  Eigen::MatrixXd powers;
  std::vector<double> u(n);
  std::vector<std::vector<std::size_t>> chain(order + 1);
  auto draw_chain = [&](std::uint64_t id) {
    for (std::size_t k = 1; k <= order; ++k) m.dropped_edges(RealizationKey{draw_index, id, k}, chain[k]);
    if (stats) {
      ++stats->chains;
      stats->realizations += order;
    }
  };
  auto realized = [&](std::size_t k, const double* in, double* out) { m.apply_realization(chain[k], in, out); };

  std::uint64_t filter_id = 0;
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const auto& layer = net.layers()[l];
    Eigen::MatrixXd pre = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(layer.out_features));
    if (policy == RealizationPolicy::SharedPerLayerShift) {
      draw_chain(l);
      std::vector<Eigen::MatrixXd> pw(layer.in_features);
      for (std::size_t g = 0; g < layer.in_features; ++g)
        detail::shift_powers(cur.col(static_cast<Eigen::Index>(g)).data(), n, order, pw[g], realized);
      for (std::size_t f = 0; f < layer.out_features; ++f)
        for (std::size_t g = 0; g < layer.in_features; ++g) {
          detail::combine_powers(layer.filter(f, g), pw[g], u.data());
          detail::axpy(1.0, u.data(), pre.col(static_cast<Eigen::Index>(f)).data(), n);
        }
    } else {
      // Filter ids follow the bank layout f * in + g; evaluate in (f, g) order.
      for (std::size_t f = 0; f < layer.out_features; ++f)
        for (std::size_t g = 0; g < layer.in_features; ++g) {
          draw_chain(filter_id + f * layer.in_features + g);
          detail::shift_powers(cur.col(static_cast<Eigen::Index>(g)).data(), n, order, powers, realized);
          detail::combine_powers(layer.filter(f, g), powers, u.data());
          detail::axpy(1.0, u.data(), pre.col(static_cast<Eigen::Index>(f)).data(), n);
        }
      filter_id += layer.bank.size();
    }
    cur = pre.unaryExpr([&](double a) { return layer.sigma(a); });
  }
  return cur;
}

// ---------------------------------------------------------------------------
// Backpropagation.

// Gradient of a scalar loss in the layout of GCNN::parameters().
struct GcnnGradient {
  std::vector<double> flat;
};

inline GcnnGradient gcnn_backward(const GCNN& net, const ForwardCache& cache, const Eigen::MatrixXd& loss_grad) {
  if (cache.shift == nullptr || cache.fingerprint != net.fingerprint() || cache.pre.size() != net.num_layers())
    throw InputError("gcnn_backward: cache does not belong to this network");
  const std::size_t n = cache.n;
  if (static_cast<std::size_t>(loss_grad.rows()) != n || static_cast<std::size_t>(loss_grad.cols()) != net.output_width())
    throw InputError("gcnn_backward: loss gradient has the wrong shape");
  const auto& s = *cache.shift;
  const std::size_t order = net.order();
  GcnnGradient grad;
  grad.flat.assign(net.parameter_count(), 0.0);

  Eigen::MatrixXd d_out = loss_grad;
  std::vector<double> tmp(n);
  for (std::size_t l = net.num_layers(); l-- > 0;) {
    const auto& layer = net.layers()[l];
    const Eigen::MatrixXd& pre = cache.pre[l];
    Eigen::MatrixXd d_pre(pre.rows(), pre.cols());
    for (Eigen::Index j = 0; j < pre.cols(); ++j)
      for (Eigen::Index i = 0; i < pre.rows(); ++i) d_pre(i, j) = d_out(i, j) * layer.sigma.derivative(pre(i, j));

    for (std::size_t f = 0; f < layer.out_features; ++f)
      for (std::size_t g = 0; g < layer.in_features; ++g) {
        const std::size_t off = net.offset(l, f, g);
        const auto& pw = cache.powers[l][g];
        for (std::size_t k = 0; k <= order; ++k)
          grad.flat[off + k] = d_pre.col(static_cast<Eigen::Index>(f)).dot(pw.col(static_cast<Eigen::Index>(k)));
      }
    if (l == 0) break;

    // d x_{l-1}^g = sum_k S^k w_k^g with w_k^g = sum_f h_k^{fg} d_pre^f  (S symmetric), by Horner.
    Eigen::MatrixXd d_in = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(layer.in_features));
    Eigen::VectorXd w(static_cast<Eigen::Index>(n));
    for (std::size_t g = 0; g < layer.in_features; ++g) {
      Eigen::VectorXd r = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
      for (std::size_t k = order + 1; k-- > 0;) {
        w.setZero();
        for (std::size_t f = 0; f < layer.out_features; ++f) w += layer.filter(f, g)[k] * d_pre.col(static_cast<Eigen::Index>(f));
        if (k == order) {
          r = w;
        } else {
          s.apply(r.data(), tmp.data());
          for (std::size_t i = 0; i < n; ++i) r(static_cast<Eigen::Index>(i)) = tmp[i] + w(static_cast<Eigen::Index>(i));
        }
      }
      d_in.col(static_cast<Eigen::Index>(g)) = r;
    }
    d_out = std::move(d_in);
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Readout.

enum class Readout {
  MaxNodePooling,  // max over nodes per feature, then argmax
  CandidateNodes,  // feature c is read at candidate node nodes[c]
};

inline const char* to_string(Readout r) { return r == Readout::MaxNodePooling ? "max_node_pooling" : "candidate_nodes"; }

inline Readout parse_readout(const std::string& s) {
  if (s == "max_node_pooling" || s == "max") return Readout::MaxNodePooling;
  if (s == "candidate_nodes" || s == "candidates") return Readout::CandidateNodes;
  throw ConfigError("unknown readout '" + s + "'");
}

struct ReadoutSpec {
  Readout mode = Readout::MaxNodePooling;
  std::vector<std::size_t> nodes;  // CandidateNodes only
};

// Per-class logits and, for each class, the node the logit was read from.
struct PooledLogits {
  Eigen::VectorXd logits;
  std::vector<Eigen::Index> argnode;
};

inline PooledLogits readout_logits(const Eigen::MatrixXd& output, const ReadoutSpec& spec) {
  PooledLogits r;
  const Eigen::Index classes = output.cols();
  r.logits.resize(classes);
  r.argnode.resize(static_cast<std::size_t>(classes));
  for (Eigen::Index c = 0; c < classes; ++c) {
    if (spec.mode == Readout::CandidateNodes) {
      if (static_cast<std::size_t>(c) >= spec.nodes.size()) throw InputError("readout: fewer candidate nodes than classes");
      const auto node = static_cast<Eigen::Index>(spec.nodes[static_cast<std::size_t>(c)]);
      if (node >= output.rows()) throw InputError("readout: candidate node out of range");
      r.logits(c) = output(node, c);
      r.argnode[static_cast<std::size_t>(c)] = node;
    } else {
      Eigen::Index best = 0;
      for (Eigen::Index i = 1; i < output.rows(); ++i)
        if (output(i, c) > output(best, c)) best = i;
      r.logits(c) = output(best, c);
      r.argnode[static_cast<std::size_t>(c)] = best;
    }
  }
  return r;
}

// Argmax of the pooled logits; ties go to the lowest class index.
inline std::size_t readout_classify(const Eigen::MatrixXd& output, const ReadoutSpec& spec = {}) {
  const auto pooled = readout_logits(output, spec);
  Eigen::Index best = 0;
  for (Eigen::Index c = 1; c < pooled.logits.size(); ++c)
    if (pooled.logits(c) > pooled.logits(best)) best = c;
  return static_cast<std::size_t>(best);
}

// ---------------------------------------------------------------------------
// Training.

struct Sample {
  Eigen::VectorXd x;
  std::size_t label = 0;
  Eigen::MatrixXd target;  // squared-error targets (n x output_width)
};

using Dataset = std::vector<Sample>;

enum class LossKind { SoftmaxCrossEntropy, SquaredError };

struct TrainOptions {
  LossKind loss = LossKind::SoftmaxCrossEntropy;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  ReadoutSpec readout;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double val_acc = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  GCNN net;
  std::vector<EpochRecord> trace;
};

struct LossAndGrad {
  double loss = 0.0;
  Eigen::MatrixXd grad;  // d loss / d output
};

inline LossAndGrad sample_loss(const Eigen::MatrixXd& output, const Sample& s, LossKind kind, const ReadoutSpec& readout) {
  LossAndGrad r;
  r.grad = Eigen::MatrixXd::Zero(output.rows(), output.cols());
  if (kind == LossKind::SquaredError) {
    if (s.target.rows() != output.rows() || s.target.cols() != output.cols())
      throw InputError("squared error: target shape does not match the network output");
    const Eigen::MatrixXd diff = output - s.target;
    r.loss = diff.squaredNorm();
    r.grad = 2.0 * diff;
    return r;
  }
  const auto pooled = readout_logits(output, readout);
  if (s.label >= static_cast<std::size_t>(pooled.logits.size())) throw InputError("cross entropy: label out of range");
  const double mx = pooled.logits.maxCoeff();
  const Eigen::VectorXd ex = (pooled.logits.array() - mx).exp();
  const double z = ex.sum();
  r.loss = -(pooled.logits(static_cast<Eigen::Index>(s.label)) - mx - std::log(z));
  for (Eigen::Index c = 0; c < pooled.logits.size(); ++c) {
    const double g = ex(c) / z - (static_cast<std::size_t>(c) == s.label ? 1.0 : 0.0);
    r.grad(pooled.argnode[static_cast<std::size_t>(c)], c) += g;
  }
  return r;
}

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

inline EvalResult evaluate(const GCNN& net, const ShiftOperator& s, const Dataset& data, LossKind kind,
                           const ReadoutSpec& readout) {
  EvalResult r;
  if (data.empty()) return r;
  CompensatedSum loss;
  std::size_t correct = 0;
  for (const auto& smp : data) {
    const auto c = gcnn_forward(net, s, smp.x);
    loss.add(sample_loss(c.output, smp, kind, readout).loss);
    if (kind == LossKind::SoftmaxCrossEntropy && readout_classify(c.output, readout) == smp.label) ++correct;
  }
  r.loss = loss.value() / static_cast<double>(data.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return r;
}

// Mini-batch ADAM on the nominal shift. Deterministic given options.seed.
inline TrainResult train_adam(GCNN net, const ShiftOperator& s, const Dataset& train, const Dataset* validation,
                              const TrainOptions& opt) {
  if (train.empty()) throw InputError("train_adam: empty training set");
  if (opt.batch_size == 0) throw ConfigError("train_adam: batch size must be positive");
  TrainResult result;
  std::vector<double> params = net.parameters();
  std::vector<double> m1(params.size(), 0.0), m2(params.size(), 0.0);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    Stream rng(opt.seed, {0x7A1ULL, epoch});
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    CompensatedSum epoch_loss;
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      const std::size_t end = std::min(order.size(), start + opt.batch_size);
      std::vector<double> g(params.size(), 0.0);
      for (std::size_t b = start; b < end; ++b) {
        const auto& smp = train[order[b]];
        const auto cache = gcnn_forward(net, s, smp.x);
        const auto lg = sample_loss(cache.output, smp, opt.loss, opt.readout);
        if (!std::isfinite(lg.loss))
          throw TrainingDivergedError(epoch, "train_adam: non-finite loss in epoch " + std::to_string(epoch));
        epoch_loss.add(lg.loss);
        const auto gr = gcnn_backward(net, cache, lg.grad);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gr.flat[i];
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      ++step;
      const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step));
      for (std::size_t i = 0; i < params.size(); ++i) {
        const double gi = g[i] * inv;
        m1[i] = opt.beta1 * m1[i] + (1.0 - opt.beta1) * gi;
        m2[i] = opt.beta2 * m2[i] + (1.0 - opt.beta2) * gi * gi;
        params[i] -= opt.lr * (m1[i] / bc1) / (std::sqrt(m2[i] / bc2) + opt.eps);
      }
      for (double v : params)
        if (!std::isfinite(v))
          throw TrainingDivergedError(epoch, "train_adam: non-finite coefficients in epoch " + std::to_string(epoch));
      net.set_parameters(params);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = epoch_loss.value() / static_cast<double>(train.size());
    if (!std::isfinite(rec.train_loss))
      throw TrainingDivergedError(epoch, "train_adam: non-finite loss in epoch " + std::to_string(epoch));
    if (validation != nullptr && !validation->empty()) {
      const auto ev = evaluate(net, s, *validation, opt.loss, opt.readout);
      rec.val_loss = ev.loss;
      rec.val_acc = ev.accuracy;
    }
    result.trace.push_back(rec);
  }
  result.net = std::move(net);
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints: structured text, one filter per line.
//
//   gcnn_checkpoint 1
//   layers <L> order <K>
//   layer <l> in <F_in> out <F_out> sigma <name>
//   filter <l> <f> <g> <h_0> ... <h_K>

inline void save_checkpoint(std::ostream& out, const GCNN& net) {
  out << "gcnn_checkpoint 1\n";
  out << "layers " << net.num_layers() << " order " << net.order() << '\n';
  const auto old = out.precision(std::numeric_limits<double>::max_digits10);
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const auto& layer = net.layers()[l];
    out << "layer " << l << " in " << layer.in_features << " out " << layer.out_features << " sigma "
        << to_string(layer.sigma.kind) << '\n';
    for (std::size_t f = 0; f < layer.out_features; ++f)
      for (std::size_t g = 0; g < layer.in_features; ++g) {
        out << "filter " << l << ' ' << f << ' ' << g;
        for (double c : layer.filter(f, g).coeffs()) out << ' ' << c;
        out << '\n';
      }
  }
  out.precision(old);
}

inline GCNN load_checkpoint(std::istream& in) {
  std::string tag;
  int version = 0;
  std::size_t layers = 0, order = 0;
  std::string l_tag, o_tag;
  if (!(in >> tag >> version) || tag != "gcnn_checkpoint" || version != 1)
    throw ConfigError("checkpoint: bad header");
  if (!(in >> l_tag >> layers >> o_tag >> order) || l_tag != "layers" || o_tag != "order")
    throw ConfigError("checkpoint: bad layer/order line");
  std::vector<GcnnLayer> out(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    std::size_t idx = 0;
    std::string in_tag, out_tag, s_tag, sigma;
    auto& layer = out[l];
    if (!(in >> tag >> idx >> in_tag >> layer.in_features >> out_tag >> layer.out_features >> s_tag >> sigma) ||
        tag != "layer" || idx != l)
      throw ConfigError("checkpoint: bad layer line");
    layer.sigma.kind = parse_activation(sigma);
    layer.bank.assign(layer.in_features * layer.out_features, GraphFilter{});
    for (std::size_t q = 0; q < layer.bank.size(); ++q) {
      std::size_t ll = 0, f = 0, g = 0;
      if (!(in >> tag >> ll >> f >> g) || tag != "filter" || ll != l || f >= layer.out_features || g >= layer.in_features)
        throw ConfigError("checkpoint: bad filter line");
      std::vector<double> c(order + 1);
      for (auto& v : c)
        if (!(in >> v)) throw ConfigError("checkpoint: truncated coefficients");
      layer.bank[f * layer.in_features + g] = GraphFilter(std::move(c));
    }
  }
  return GCNN(std::move(out));
}

}  // namespace gstab
