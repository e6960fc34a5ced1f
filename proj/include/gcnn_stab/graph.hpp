#pragma once

// Undirected weighted graphs, graph shift operators and their symmetric
// eigendecomposition.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <limits>
#include <memory>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "error.hpp"
#include "rng.hpp"

namespace gstab {

struct Edge {
  std::size_t i = 0;  // i < j
  std::size_t j = 0;
  double weight = 1.0;
};

class Graph {
 public:
  Graph() = default;
  explicit Graph(std::size_t n) : n_(n) {}

  // Adds the undirected edge {i, j}; stored canonically with i < j.
  void add_edge(std::size_t i, std::size_t j, double weight = 1.0) {
    if (i >= n_ || j >= n_) throw InputError("edge endpoint out of range");
    if (i == j) throw InputError("self-loops are not edges; use the shift diagonal");
    if (!std::isfinite(weight)) throw InputError("edge weight must be finite");
    if (i > j) std::swap(i, j);
    if (!keys_.insert(key(i, j)).second) throw InputError("duplicate edge");
    edges_.push_back({i, j, weight});
  }

  bool has_edge(std::size_t i, std::size_t j) const {
    if (i > j) std::swap(i, j);
    return keys_.count(key(i, j)) != 0;
  }

  std::size_t num_nodes() const noexcept { return n_; }
  std::size_t num_edges() const noexcept { return edges_.size(); }
  const std::vector<Edge>& edges() const noexcept { return edges_; }

  // Incident-edge counts.
  std::vector<std::size_t> degrees() const {
    std::vector<std::size_t> d(n_, 0);
    for (const auto& e : edges_) {
      ++d[e.i];
      ++d[e.j];
    }
    return d;
  }

  Eigen::MatrixXd adjacency() const {
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n_), static_cast<Eigen::Index>(n_));
    for (const auto& e : edges_) {
      a(static_cast<Eigen::Index>(e.i), static_cast<Eigen::Index>(e.j)) = e.weight;
      a(static_cast<Eigen::Index>(e.j), static_cast<Eigen::Index>(e.i)) = e.weight;
    }
    return a;
  }

 private:
  std::uint64_t key(std::size_t i, std::size_t j) const noexcept {
    return static_cast<std::uint64_t>(i) * static_cast<std::uint64_t>(n_) + j;
  }

  std::size_t n_ = 0;
  std::vector<Edge> edges_;
  std::unordered_set<std::uint64_t> keys_;
};

inline std::size_t max_degree(const Graph& g) {
  const auto d = g.degrees();
  return d.empty() ? 0 : *std::max_element(d.begin(), d.end());
}

// ---------------------------------------------------------------------------
// Stochastic block model.

inline std::size_t community_of(std::size_t node, std::size_t n, std::size_t communities) {
  return node / (n / communities);
}

inline Graph sbm_generate(std::size_t n, std::size_t communities, double p_intra, double p_inter,
                          std::uint64_t seed) {
  if (communities == 0 || n == 0 || n % communities != 0)
    throw ConfigError("sbm: node count must be a positive multiple of the community count");
  if (!(p_intra >= 0.0 && p_intra <= 1.0) || !(p_inter >= 0.0 && p_inter <= 1.0))
    throw ConfigError("sbm: link probabilities must lie in [0, 1]");
  Graph g(n);
  Stream rng(seed, {0x5B3ULL});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const bool same = community_of(i, n, communities) == community_of(j, n, communities);
      if (rng.bernoulli(same ? p_intra : p_inter)) g.add_edge(i, j);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Edge-list text format:
//   n <count>
//   i j [weight]
// with 0-based indices and '#' comments.

inline Graph read_edge_list(std::istream& in) {
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  Graph g;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string first;
    if (!(ls >> first)) continue;
    if (!have_header) {
      std::size_t n = 0;
      if (first != "n" || !(ls >> n)) throw ConfigError("edge list: expected 'n <count>' header at line " + std::to_string(lineno));
      g = Graph(n);
      have_header = true;
      continue;
    }
    std::size_t i = 0, j = 0;
    double w = 1.0;
    try {
      i = std::stoul(first);
    } catch (...) {
      throw ConfigError("edge list: bad node index at line " + std::to_string(lineno));
    }
    if (!(ls >> j)) throw ConfigError("edge list: missing second endpoint at line " + std::to_string(lineno));
    if (!(ls >> w)) w = 1.0;
    try {
      g.add_edge(i, j, w);
    } catch (const InputError& e) {
      throw ConfigError(std::string("edge list: ") + e.what() + " at line " + std::to_string(lineno));
    }
  }
  if (!have_header) throw ConfigError("edge list: missing 'n <count>' header");
  return g;
}

inline void write_edge_list(std::ostream& out, const Graph& g) {
  out << "n " << g.num_nodes() << '\n';
  const auto old = out.precision(std::numeric_limits<double>::max_digits10);
  for (const auto& e : g.edges()) {
    out << e.i << ' ' << e.j;
    if (e.weight != 1.0) out << ' ' << e.weight;
    out << '\n';
  }
  out.precision(old);
}

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition (cyclic Jacobi).

struct SpectralDecomposition {
  Eigen::VectorXd eigenvalues;   // ascending
  Eigen::MatrixXd eigenvectors;  // columns, orthonormal

  Eigen::MatrixXd reconstruct() const {
    return eigenvectors * eigenvalues.asDiagonal() * eigenvectors.transpose();
  }
};

struct JacobiOptions {
  int max_sweeps = 100;
  double off_tolerance = 1e-12;  // relative to max(1, ||S||_F)
};

inline SpectralDecomposition eigendecompose_symmetric(const Eigen::MatrixXd& s, const JacobiOptions& opt = {}) {
  const Eigen::Index n = s.rows();
  if (s.cols() != n) throw InputError("eigendecompose: matrix must be square");
  Eigen::MatrixXd a = s;
  Eigen::MatrixXd v = Eigen::MatrixXd::Identity(n, n);
  const double scale = std::max(1.0, s.norm());
  auto off_norm = [&] {
    double acc = 0.0;
    for (Eigen::Index q = 1; q < n; ++q)
      for (Eigen::Index p = 0; p < q; ++p) acc += 2.0 * a(p, q) * a(p, q);
    return std::sqrt(acc);
  };
  bool converged = off_norm() <= opt.off_tolerance * scale;
  for (int sweep = 0; sweep < opt.max_sweeps && !converged; ++sweep) {
    for (Eigen::Index p = 0; p < n - 1; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        double t;
        if (std::abs(theta) > 1e150)
          t = 0.5 / theta;
        else
          t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double sn = t * c;
        for (Eigen::Index k = 0; k < n; ++k) {
          if (k == p || k == q) continue;
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = a(p, k) = c * akp - sn * akq;
          a(k, q) = a(q, k) = sn * akp + c * akq;
        }
        a(p, p) -= t * apq;
        a(q, q) += t * apq;
        a(p, q) = a(q, p) = 0.0;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - sn * vkq;
          v(k, q) = sn * vkp + c * vkq;
        }
      }
    }
    converged = off_norm() <= opt.off_tolerance * scale;
  }
  if (!converged) throw NumericError("eigendecompose: Jacobi iteration did not converge within the sweep budget");

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index x, Eigen::Index y) { return a(x, x) < a(y, y); });
  SpectralDecomposition out;
  out.eigenvalues.resize(n);
  out.eigenvectors.resize(n, n);
  for (Eigen::Index k = 0; k < n; ++k) {
    out.eigenvalues(k) = a(order[static_cast<std::size_t>(k)], order[static_cast<std::size_t>(k)]);
    out.eigenvectors.col(k) = v.col(order[static_cast<std::size_t>(k)]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Graph shift operators.

enum class ShiftVariant { Adjacency, Laplacian, NormalizedAdjacency };

inline const char* to_string(ShiftVariant v) {
  switch (v) {
    case ShiftVariant::Adjacency: return "adjacency";
    case ShiftVariant::Laplacian: return "laplacian";
    case ShiftVariant::NormalizedAdjacency: return "normalized_adjacency";
  }
  return "?";
}

inline ShiftVariant parse_shift_variant(const std::string& s) {
  if (s == "adjacency") return ShiftVariant::Adjacency;
  if (s == "laplacian") return ShiftVariant::Laplacian;
  if (s == "normalized_adjacency" || s == "normalized") return ShiftVariant::NormalizedAdjacency;
  throw ConfigError("unknown shift variant '" + s + "'");
}

// Dense symmetric shift operator with a row-compressed copy used for shifting.
class ShiftOperator {
 public:
  ShiftOperator(Eigen::MatrixXd matrix, ShiftVariant variant, std::shared_ptr<const Graph> source,
                double normalization = 1.0)
      : matrix_(std::move(matrix)), variant_(variant), source_(std::move(source)), normalization_(normalization) {
    if (matrix_.rows() != matrix_.cols()) throw InputError("shift operator must be square");
    if (!matrix_.allFinite()) throw InputError("shift operator entries must be finite");
    if ((matrix_ - matrix_.transpose()).cwiseAbs().maxCoeff() > 1e-12)
      throw InputError("shift operator must be symmetric");
    compress();
  }

  // Wraps an arbitrary symmetric matrix; the source graph is its off-diagonal
  // support (with weights -S_ij for a Laplacian).
  static ShiftOperator from_matrix(const Eigen::MatrixXd& m, ShiftVariant variant = ShiftVariant::Adjacency) {
    if (m.rows() != m.cols()) throw InputError("shift operator must be square");
    auto g = std::make_shared<Graph>(static_cast<std::size_t>(m.rows()));
    const double sign = variant == ShiftVariant::Laplacian ? -1.0 : 1.0;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = i + 1; j < m.cols(); ++j)
        if (m(i, j) != 0.0) g->add_edge(static_cast<std::size_t>(i), static_cast<std::size_t>(j), sign * m(i, j));
    return ShiftOperator(m, variant, std::move(g));
  }

  const Eigen::MatrixXd& matrix() const noexcept { return matrix_; }
  ShiftVariant variant() const noexcept { return variant_; }
  const Graph& source() const noexcept { return *source_; }
  const std::shared_ptr<const Graph>& source_ptr() const noexcept { return source_; }
  std::size_t size() const noexcept { return static_cast<std::size_t>(matrix_.rows()); }
  // Factor applied to edge weights (1/lambda_max(A) for the normalized adjacency).
  double normalization() const noexcept { return normalization_; }

  // out = S x; out must not alias x.
  void apply(const double* x, double* out) const noexcept {
    const std::size_t n = size();
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t k = row_start_[i]; k < row_start_[i + 1]; ++k) acc += values_[k] * x[cols_[k]];
      out[i] = acc;
    }
  }

  Eigen::VectorXd apply(const Eigen::VectorXd& x) const {
    if (static_cast<std::size_t>(x.size()) != size()) throw InputError("shift: dimension mismatch");
    Eigen::VectorXd y(x.size());
    apply(x.data(), y.data());
    return y;
  }

 private:
  void compress() {
    const std::size_t n = size();
    row_start_.assign(n + 1, 0);
    cols_.clear();
    values_.clear();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double v = matrix_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        if (v != 0.0) {
          cols_.push_back(j);
          values_.push_back(v);
        }
      }
      row_start_[i + 1] = cols_.size();
    }
  }

  Eigen::MatrixXd matrix_;
  ShiftVariant variant_;
  std::shared_ptr<const Graph> source_;
  double normalization_ = 1.0;
  std::vector<std::size_t> row_start_;
  std::vector<std::size_t> cols_;
  std::vector<double> values_;
};

inline SpectralDecomposition eigendecompose(const ShiftOperator& s, const JacobiOptions& opt = {}) {
  return eigendecompose_symmetric(s.matrix(), opt);
}

// Builds the shift for `variant` with a fixed adjacency normalization factor.
// Used to rebuild perturbed realizations under the nominal normalization.
inline ShiftOperator shift_with_normalization(std::shared_ptr<const Graph> g, ShiftVariant variant, double normalization) {
  const auto n = static_cast<Eigen::Index>(g->num_nodes());
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, n);
  for (const auto& e : g->edges()) {
    const auto i = static_cast<Eigen::Index>(e.i);
    const auto j = static_cast<Eigen::Index>(e.j);
    if (variant == ShiftVariant::Laplacian) {
      m(i, i) += e.weight;
      m(j, j) += e.weight;
      m(i, j) -= e.weight;
      m(j, i) -= e.weight;
    } else {
      m(i, j) = m(j, i) = e.weight * normalization;
    }
  }
  return ShiftOperator(std::move(m), variant, std::move(g), variant == ShiftVariant::Laplacian ? 1.0 : normalization);
}

inline ShiftOperator shift_from_graph(std::shared_ptr<const Graph> g, ShiftVariant variant) {
  if (!g || g->num_nodes() == 0) throw ConfigError("shift_from_graph: empty graph");
  double normalization = 1.0;
  if (variant == ShiftVariant::NormalizedAdjacency) {
    const auto spec = eigendecompose_symmetric(g->adjacency());
    const double lmax = spec.eigenvalues(spec.eigenvalues.size() - 1);
    if (!(lmax > 0.0)) throw ConfigError("shift_from_graph: lambda_max(A) <= 0, cannot normalize");
    normalization = 1.0 / lmax;
  }
  return shift_with_normalization(std::move(g), variant, normalization);
}

inline ShiftOperator shift_from_graph(const Graph& g, ShiftVariant variant) {
  return shift_from_graph(std::make_shared<const Graph>(g), variant);
}

// Largest eigenvalue magnitude.
inline double spectral_radius(const SpectralDecomposition& d) {
  return d.eigenvalues.size() == 0 ? 0.0 : d.eigenvalues.cwiseAbs().maxCoeff();
}

}  // namespace gstab
