#pragma once

// Random edge sampling: every nominal edge survives a realization independently
// with probability p. Realizations are addressed by (draw, chain, position) and
// drawn from their own counter-based stream.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "error.hpp"
#include "graph.hpp"
#include "parallel.hpp"
#include "rng.hpp"

namespace gstab {

struct RealizationKey {
  std::uint64_t draw = 0;
  std::uint64_t chain = 0;
  std::uint64_t position = 1;  // 1-based position inside a chain
};

class RESModel {
 public:
  RESModel(std::shared_ptr<const Graph> base, ShiftVariant variant, double p, std::uint64_t seed)
      : base_(std::move(base)), variant_(variant), p_(p), seed_(seed), nominal_(make_nominal()) {}

  RESModel(const Graph& base, ShiftVariant variant, double p, std::uint64_t seed)
      : RESModel(std::make_shared<const Graph>(base), variant, p, seed) {}

  // Reuses an already assembled nominal shift (and its normalization).
  RESModel(const ShiftOperator& nominal, double p, std::uint64_t seed)
      : base_(nominal.source_ptr()), variant_(nominal.variant()), p_(p), seed_(seed), nominal_(nominal) {
    validate();
  }

  const Graph& base() const noexcept { return *base_; }
  ShiftVariant variant() const noexcept { return variant_; }
  double p() const noexcept { return p_; }
  std::uint64_t seed() const noexcept { return seed_; }
  const ShiftOperator& nominal() const noexcept { return nominal_; }
  std::size_t size() const noexcept { return nominal_.size(); }

  RESModel with_p(double p) const { return RESModel(nominal_, p, seed_); }
  RESModel with_seed(std::uint64_t seed) const { return RESModel(nominal_, p_, seed); }

  // Indices (into base().edges()) of the edges removed in one realization, ascending.
  // Uses geometric gaps between removals, which is distributionally identical to
  // an independent Bernoulli(1 - p) trial per edge.
  void dropped_edges(const RealizationKey& key, std::vector<std::size_t>& out) const {
    out.clear();
    const double q = 1.0 - p_;
    if (q <= 0.0) return;
    const auto m = static_cast<double>(base_->num_edges());
    Stream rng(seed_, {0xD7E5ULL, key.draw, key.chain, key.position});
    const double log_keep = std::log1p(-q);
    double idx = -1.0;
    while (true) {
      const double u = rng.uniform_open0();
      const double gap = q >= 1.0 ? 0.0 : std::floor(std::log(u) / log_keep);
      idx += gap + 1.0;
      if (!(idx < m)) break;
      out.push_back(static_cast<std::size_t>(idx));
    }
  }

  std::vector<std::size_t> dropped_edges(const RealizationKey& key) const {
    std::vector<std::size_t> out;
    dropped_edges(key, out);
    return out;
  }

  // out = S_k in, with S_k the realization whose removed edges are `dropped`.
  void apply_realization(std::span<const std::size_t> dropped, const double* in, double* out) const noexcept {
    nominal_.apply(in, out);
    const auto& edges = base_->edges();
    const double scale = nominal_.normalization();
    for (std::size_t idx : dropped) {
      const auto& e = edges[idx];
      if (variant_ == ShiftVariant::Laplacian) {
        const double d = e.weight * (in[e.i] - in[e.j]);
        out[e.i] -= d;
        out[e.j] += d;
      } else {
        const double a = e.weight * scale;
        out[e.i] -= a * in[e.j];
        out[e.j] -= a * in[e.i];
      }
    }
  }

  // Realized shift S + E_k: removed adjacency entries are zeroed; for the
  // Laplacian this equals D_k - A_k of the surviving subgraph. The nominal
  // normalization is kept.
  ShiftOperator realization(std::span<const std::size_t> dropped) const {
    auto g = std::make_shared<Graph>(base_->num_nodes());
    const auto& edges = base_->edges();
    std::size_t next = 0;
    for (std::size_t idx = 0; idx < edges.size(); ++idx) {
      if (next < dropped.size() && dropped[next] == idx) {
        ++next;
        continue;
      }
      g->add_edge(edges[idx].i, edges[idx].j, edges[idx].weight);
    }
    Eigen::MatrixXd m = nominal_.matrix();
    for (const auto& t : error_terms(dropped)) m(t.row, t.col) += t.value;
    if (variant_ != ShiftVariant::Laplacian)
      for (std::size_t idx : dropped) {
        const auto i = static_cast<Eigen::Index>(edges[idx].i);
        const auto j = static_cast<Eigen::Index>(edges[idx].j);
        m(i, j) = m(j, i) = 0.0;
      }
    return ShiftOperator(std::move(m), variant_, std::move(g), nominal_.normalization());
  }

  ShiftOperator sample_subgraph(std::uint64_t draw_index) const {
    return realization(dropped_edges(RealizationKey{draw_index, 0, 1}));
  }

  // k independent realizations; element j-1 is the shift at chain position j.
  std::vector<ShiftOperator> sample_chain(std::size_t k, std::uint64_t draw_index, std::uint64_t chain = 0) const {
    std::vector<ShiftOperator> out;
    out.reserve(k);
    for (std::size_t j = 1; j <= k; ++j) out.push_back(realization(dropped_edges(RealizationKey{draw_index, chain, j})));
    return out;
  }

  // E_k = S_k - S.
  Eigen::MatrixXd error_matrix(std::span<const std::size_t> dropped) const {
    const auto n = static_cast<Eigen::Index>(size());
    Eigen::MatrixXd e = Eigen::MatrixXd::Zero(n, n);
    for (const auto& t : error_terms(dropped)) e(t.row, t.col) += t.value;
    return e;
  }

  struct Entry {
    Eigen::Index row;
    Eigen::Index col;
    double value;
  };

  // Sparse entries of -S_e for each removed edge e.
  std::vector<Entry> error_terms(std::span<const std::size_t> dropped) const {
    std::vector<Entry> out;
    const auto& edges = base_->edges();
    for (std::size_t idx : dropped) {
      const auto& e = edges[idx];
      const auto i = static_cast<Eigen::Index>(e.i);
      const auto j = static_cast<Eigen::Index>(e.j);
      if (variant_ == ShiftVariant::Laplacian) {
        out.push_back({i, i, -e.weight});
        out.push_back({j, j, -e.weight});
        out.push_back({i, j, e.weight});
        out.push_back({j, i, e.weight});
      } else {
        const double a = e.weight * nominal_.normalization();
        out.push_back({i, j, -a});
        out.push_back({j, i, -a});
      }
    }
    return out;
  }

 private:
  void validate() const {
    if (!(p_ > 0.0 && p_ <= 1.0)) throw ConfigError("RES model: p must lie in (0, 1]");
  }

  ShiftOperator make_nominal() const {
    validate();
    return shift_from_graph(base_, variant_);
  }

  std::shared_ptr<const Graph> base_;
  ShiftVariant variant_;
  double p_;
  std::uint64_t seed_;
  ShiftOperator nominal_;
};

// ---------------------------------------------------------------------------
// Moment identities.

// max |mean_k S_k - p S| over `draws` realizations.
inline double check_first_moment(const RESModel& m, std::size_t draws) {
  if (draws == 0) throw InputError("check_first_moment: draws must be >= 1");
  const auto& edges = m.base().edges();
  std::vector<std::size_t> removed_count(edges.size(), 0);
  std::vector<std::size_t> dropped;
  for (std::size_t d = 0; d < draws; ++d) {
    m.dropped_edges(RealizationKey{d, 0, 1}, dropped);
    for (std::size_t idx : dropped) ++removed_count[idx];
  }
  // mean S_k - pS = sum_e ((1 - p) - removed_e / N) S_e
  const auto n = static_cast<Eigen::Index>(m.size());
  Eigen::MatrixXd dev = Eigen::MatrixXd::Zero(n, n);
  for (std::size_t idx = 0; idx < edges.size(); ++idx) {
    if (m.p() == 1.0) break;
    const double coef = (1.0 - m.p()) - static_cast<double>(removed_count[idx]) / static_cast<double>(draws);
    const std::size_t one[1] = {idx};
    for (const auto& t : m.error_terms(one)) dev(t.row, t.col) -= coef * t.value;
  }
  return dev.cwiseAbs().maxCoeff();
}

// (1 - p)^2 S^2 + beta p (1 - p) E_hat with beta = 1, E_hat = sum_e S_e^2 (the degree
// matrix for unit weights) for the adjacency and beta = 2, E_hat = the Laplacian
// of squared weights (S itself for unit weights) for the Laplacian.
inline Eigen::MatrixXd second_moment_prediction(const RESModel& m) {
  const auto& s = m.nominal().matrix();
  const auto n = s.rows();
  const double p = m.p();
  Eigen::MatrixXd e_hat = Eigen::MatrixXd::Zero(n, n);
  double beta = 1.0;
  switch (m.variant()) {
    case ShiftVariant::Adjacency:
      for (const auto& e : m.base().edges()) {
        e_hat(static_cast<Eigen::Index>(e.i), static_cast<Eigen::Index>(e.i)) += e.weight * e.weight;
        e_hat(static_cast<Eigen::Index>(e.j), static_cast<Eigen::Index>(e.j)) += e.weight * e.weight;
      }
      break;
    case ShiftVariant::Laplacian:
      beta = 2.0;
      for (const auto& e : m.base().edges()) {
        const auto i = static_cast<Eigen::Index>(e.i);
        const auto j = static_cast<Eigen::Index>(e.j);
        const double w2 = e.weight * e.weight;
        e_hat(i, i) += w2;
        e_hat(j, j) += w2;
        e_hat(i, j) -= w2;
        e_hat(j, i) -= w2;
      }
      break;
    case ShiftVariant::NormalizedAdjacency:
      throw ConfigError("check_second_moment: identity is stated for adjacency and Laplacian shifts only");
  }
  return (1.0 - p) * (1.0 - p) * s * s + beta * p * (1.0 - p) * e_hat;
}

// max |mean_k E_k^2 - prediction| over `draws` realizations.
inline double check_second_moment(const RESModel& m, std::size_t draws) {
  if (draws == 0) throw InputError("check_second_moment: draws must be >= 1");
  const Eigen::MatrixXd predicted = second_moment_prediction(m);
  const auto n = static_cast<Eigen::Index>(m.size());
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(n, n);
  std::vector<std::size_t> dropped;
  for (std::size_t d = 0; d < draws; ++d) {
    m.dropped_edges(RealizationKey{d, 0, 1}, dropped);
    if (dropped.empty()) continue;
    const auto terms = m.error_terms(dropped);
    for (const auto& a : terms)
      for (const auto& b : terms)
        if (a.col == b.row) acc(a.row, b.col) += a.value * b.value;
  }
  acc /= static_cast<double>(draws);
  return (acc - predicted).cwiseAbs().maxCoeff();
}

}  // namespace gstab
