#pragma once

// Desk-scale source localization (diffused noisy deltas on an SBM graph),
// accuracy-under-perturbation measurement and parameter sweeps.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "error.hpp"
#include "gcnn.hpp"
#include "graph.hpp"
#include "parallel.hpp"
#include "perturbation.hpp"
#include "rng.hpp"
#include "stability.hpp"

namespace gstab {

struct DiffusionSample {
  Eigen::VectorXd x;
  std::size_t label = 0;   // index into the source list
  std::size_t t = 0;       // diffusion steps
};

struct SplitSizes {
  std::size_t train = 800;
  std::size_t val = 200;
  std::size_t test = 200;
};

struct SourceDataset {
  std::vector<std::size_t> sources;
  std::vector<DiffusionSample> train, val, test;
};

// Sample i (numbered across train, val, test in that order) draws its own
// stream, so every split is reproducible on its own.
inline SourceDataset make_source_dataset(const ShiftOperator& s, const std::vector<std::size_t>& sources,
                                         std::size_t t_max, double noise_std, const SplitSizes& sizes,
                                         std::uint64_t seed) {
  if (sources.empty()) throw ConfigError("source dataset: need at least one source node");
  for (auto v : sources)
    if (v >= s.size()) throw ConfigError("source dataset: source node out of range");
  if (sizes.train == 0 || sizes.test == 0) throw ConfigError("source dataset: train and test splits must be nonempty");
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) throw ConfigError("source dataset: noise std must be >= 0");
  SourceDataset ds;
  ds.sources = sources;
  const std::size_t n = s.size();
  // S^t delta_s for every source and every t, computed once.
  std::vector<std::vector<Eigen::VectorXd>> diffused(sources.size());
  for (std::size_t c = 0; c < sources.size(); ++c) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    v(static_cast<Eigen::Index>(sources[c])) = 1.0;
    diffused[c].push_back(v);
    for (std::size_t t = 1; t <= t_max; ++t) diffused[c].push_back(s.apply(diffused[c].back()));
  }
  auto make = [&](std::size_t i) {
    Stream rng(seed, {0xDA7AULL, i});
    DiffusionSample smp;
    smp.label = static_cast<std::size_t>(rng.below(sources.size()));
    smp.t = static_cast<std::size_t>(rng.below(t_max + 1));
    smp.x = diffused[smp.label][smp.t];
    for (auto& v : smp.x) v += noise_std * rng.normal();
    return smp;
  };
  std::size_t i = 0;
  for (std::size_t k = 0; k < sizes.train; ++k) ds.train.push_back(make(i++));
  for (std::size_t k = 0; k < sizes.val; ++k) ds.val.push_back(make(i++));
  for (std::size_t k = 0; k < sizes.test; ++k) ds.test.push_back(make(i++));
  return ds;
}

inline SourceDataset make_source_dataset(const Graph& g, const std::vector<std::size_t>& sources, std::size_t t_max,
                                         double noise_std, const SplitSizes& sizes, std::uint64_t seed) {
  return make_source_dataset(shift_from_graph(g, ShiftVariant::NormalizedAdjacency), sources, t_max, noise_std, sizes,
                             seed);
}

// The highest-degree node of each community (lowest index on ties).
inline std::vector<std::size_t> community_sources(const Graph& g, std::size_t communities) {
  const auto deg = g.degrees();
  const std::size_t n = g.num_nodes();
  if (communities == 0 || n % communities != 0) throw ConfigError("community_sources: bad community count");
  std::vector<std::size_t> out;
  const std::size_t size = n / communities;
  for (std::size_t c = 0; c < communities; ++c) {
    std::size_t best = c * size;
    for (std::size_t v = c * size; v < (c + 1) * size; ++v)
      if (deg[v] > deg[best]) best = v;
    out.push_back(best);
  }
  return out;
}

inline Dataset to_dataset(const std::vector<DiffusionSample>& samples) {
  Dataset d;
  d.reserve(samples.size());
  for (const auto& s : samples) d.push_back(Sample{s.x, s.label, {}});
  return d;
}

// Class of the source whose S^t delta best correlates with x, maximized over
// t <= t_max. A model-free reference classifier.
inline std::size_t nearest_source_classify(const ShiftOperator& s, const std::vector<std::size_t>& sources,
                                           std::size_t t_max, const Eigen::VectorXd& x) {
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < sources.size(); ++c) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(x.size());
    v(static_cast<Eigen::Index>(sources[c])) = 1.0;
    for (std::size_t t = 0; t <= t_max; ++t) {
      const double nv = v.norm();
      if (nv > 0.0) {
        const double score = x.dot(v) / nv;
        if (score > best_score) {
          best_score = score;
          best = c;
        }
      }
      v = s.apply(v);
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Accuracy under perturbation.

struct AccuracyDeviation {
  double nominal_accuracy = 0.0;
  double perturbed_accuracy = 0.0;  // mean over trials
  double difference = 0.0;          // nominal - perturbed
  double std = 0.0;                 // sample std of the per-trial accuracy
  std::size_t trials = 0;

  double std_error() const noexcept { return trials > 0 ? std / std::sqrt(static_cast<double>(trials)) : 0.0; }
};

// One trial is a full pass over the test split; sample i of trial t uses draw
// index t * |test| + i.
inline AccuracyDeviation run_accuracy_deviation(const GCNN& net, const RESModel& m, const ReadoutSpec& readout,
                                                const std::vector<DiffusionSample>& test, std::size_t trials,
                                                RealizationPolicy policy = RealizationPolicy::IndependentPerFilter,
                                                std::size_t threads = 1) {
  if (test.empty()) throw InputError("run_accuracy_deviation: empty test split");
  if (trials == 0) throw InputError("run_accuracy_deviation: trials must be >= 1");
  if (net.output_width() < 1 || static_cast<std::size_t>(test.front().x.size()) != m.size())
    throw InputError("run_accuracy_deviation: model does not match the dataset dimensions");
  AccuracyDeviation r;
  r.trials = trials;
  std::size_t correct = 0;
  for (const auto& smp : test) correct += readout_classify(gcnn_forward(net, m.nominal(), smp.x).output, readout) == smp.label;
  r.nominal_accuracy = static_cast<double>(correct) / static_cast<double>(test.size());
  if (m.p() == 1.0) {
    r.perturbed_accuracy = r.nominal_accuracy;
    return r;
  }
  const auto acc = parallel_map(trials, resolve_threads(threads), [&](std::size_t t) {
    std::size_t ok = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
      const auto y = gcnn_forward_stochastic(net, m, policy, test[i].x, t * test.size() + i);
      ok += readout_classify(y, readout) == test[i].label;
    }
    return static_cast<double>(ok) / static_cast<double>(test.size());
  });
  const auto ms = mean_std(acc);
  r.perturbed_accuracy = ms.mean;
  r.std = ms.std;
  r.difference = r.nominal_accuracy - r.perturbed_accuracy;
  return r;
}

// ---------------------------------------------------------------------------
// Experiment description and sweeps.

enum class ModelKind { Gcnn, FilterBank };

enum class SweepMetric { AccuracyDifference, OutputDeviation };

inline TrainOptions desk_training() {
  TrainOptions t;
  t.lr = 1e-2;
  t.epochs = 40;
  t.batch_size = 32;
  return t;
}

struct ExperimentSpec {
  // graph
  std::size_t n = 40;
  std::size_t communities = 4;
  double p_intra = 0.5;
  double p_inter = 0.05;
  std::uint64_t graph_seed = 1;
  // data
  std::size_t t_max = 3;
  double noise_std = 0.1;
  SplitSizes sizes;
  std::uint64_t data_seed = 2;
  // model
  ModelKind model = ModelKind::Gcnn;
  std::size_t layers = 2;
  std::size_t features = 16;
  std::size_t order = 5;
  Activation hidden = Activation::ReLU;
  Activation output = Activation::Identity;
  Readout readout = Readout::CandidateNodes;
  std::uint64_t init_seed = 3;
  double init_scale = 1.0;
  // training
  TrainOptions train = desk_training();
  // perturbation
  double p = 0.95;
  RealizationPolicy policy = RealizationPolicy::IndependentPerFilter;
  std::uint64_t res_seed = 4;
  std::size_t trials = 200;
  std::size_t threads = 1;
  SweepMetric metric = SweepMetric::AccuracyDifference;
  // Independent (graph, data, init, RES) realizations averaged per sweep point;
  // replicate r offsets every seed by r.
  std::size_t replicates = 3;
};

inline ExperimentSpec replicate_spec(const ExperimentSpec& e, std::size_t r) {
  ExperimentSpec out = e;
  out.graph_seed += r;
  out.data_seed += r;
  out.init_seed += r;
  out.res_seed += r;
  out.train.seed += r;
  return out;
}

// Everything derived from an ExperimentSpec before perturbation.
struct PreparedExperiment {
  std::shared_ptr<const Graph> graph;
  ShiftOperator shift;
  SourceDataset data;
  ReadoutSpec readout;
  GCNN net;
  std::vector<EpochRecord> trace;
};

inline GCNN initial_model(const ExperimentSpec& e, std::size_t classes) {
  Architecture a;
  a.order = e.order;
  a.readout_width = classes;
  a.layers = e.layers;
  a.features = e.features;
  // The linear filter bank has the same F parallel filters per layer, without nonlinearity.
  a.hidden.kind = e.model == ModelKind::FilterBank ? Activation::Identity : e.hidden;
  a.output.kind = e.model == ModelKind::FilterBank ? Activation::Identity : e.output;
  return GCNN::random(a, e.init_seed, e.init_scale);
}

inline PreparedExperiment prepare_experiment(const ExperimentSpec& e) {
  auto g = std::make_shared<const Graph>(sbm_generate(e.n, e.communities, e.p_intra, e.p_inter, e.graph_seed));
  auto s = shift_from_graph(g, ShiftVariant::NormalizedAdjacency);
  auto sources = community_sources(*g, e.communities);
  auto data = make_source_dataset(s, sources, e.t_max, e.noise_std, e.sizes, e.data_seed);
  ReadoutSpec readout{e.readout, e.readout == Readout::CandidateNodes ? sources : std::vector<std::size_t>{}};
  auto net = initial_model(e, sources.size());
  TrainOptions opt = e.train;
  opt.readout = readout;
  opt.loss = LossKind::SoftmaxCrossEntropy;
  const Dataset train = to_dataset(data.train), val = to_dataset(data.val);
  auto trained = train_adam(std::move(net), s, train, &val, opt);
  return PreparedExperiment{std::move(g), std::move(s), std::move(data), std::move(readout), std::move(trained.net),
                            std::move(trained.trace)};
}

enum class SweepVariable { P, F, K, N, L };

inline const char* to_string(SweepVariable v) {
  switch (v) {
    case SweepVariable::P: return "p";
    case SweepVariable::F: return "F";
    case SweepVariable::K: return "K";
    case SweepVariable::N: return "n";
    case SweepVariable::L: return "L";
  }
  return "?";
}

inline SweepVariable parse_sweep_variable(const std::string& s) {
  if (s == "p") return SweepVariable::P;
  if (s == "F") return SweepVariable::F;
  if (s == "K") return SweepVariable::K;
  if (s == "n") return SweepVariable::N;
  if (s == "L") return SweepVariable::L;
  throw ConfigError("unknown sweep variable '" + s + "'");
}

struct SweepSpec {
  SweepVariable variable = SweepVariable::P;
  std::vector<double> grid;
  ExperimentSpec fixed;
  bool reuse_model = true;  // a p sweep trains once and reuses the model

  void validate() const {
    if (grid.empty()) throw ConfigError("sweep: grid must be nonempty");
    if (!std::is_sorted(grid.begin(), grid.end())) throw ConfigError("sweep: grid must be sorted");
    for (double v : grid) {
      if (!std::isfinite(v)) throw ConfigError("sweep: grid values must be finite");
      if (variable == SweepVariable::P) {
        if (!(v > 0.0 && v <= 1.0)) throw ConfigError("sweep: p values must lie in (0, 1]");
      } else if (v < 1.0 || v != std::floor(v)) {
        throw ConfigError(std::string("sweep: ") + to_string(variable) + " values must be positive integers");
      }
    }
  }
};

struct SweepRow {
  double value = 0.0;
  bool ok = true;
  std::string status = "ok";
  double mean = 0.0;  // accuracy difference or mean squared output deviation
  double std = 0.0;
  std::size_t trials = 0;
  double nominal_accuracy = std::numeric_limits<double>::quiet_NaN();
  double perturbed_accuracy = std::numeric_limits<double>::quiet_NaN();

  double std_error() const noexcept { return trials > 0 ? std / std::sqrt(static_cast<double>(trials)) : 0.0; }
};

struct SweepResult {
  SweepVariable variable = SweepVariable::P;
  std::vector<SweepRow> rows;
};

inline ExperimentSpec sweep_point(const SweepSpec& spec, double v) {
  ExperimentSpec e = spec.fixed;
  const auto iv = static_cast<std::size_t>(v);
  switch (spec.variable) {
    case SweepVariable::P: e.p = v; break;
    case SweepVariable::F: e.features = iv; break;
    case SweepVariable::K: e.order = iv; break;
    case SweepVariable::N: e.n = iv; break;
    case SweepVariable::L: e.layers = iv; break;
  }
  return e;
}

inline SweepRow evaluate_point(const ExperimentSpec& e, const PreparedExperiment& prep) {
  SweepRow row;
  const RESModel m(prep.shift, e.p, e.res_seed);
  if (e.metric == SweepMetric::AccuracyDifference) {
    const auto r = run_accuracy_deviation(prep.net, m, prep.readout, prep.data.test, e.trials, e.policy, e.threads);
    row.mean = r.difference;
    row.std = r.std;
    row.trials = r.trials;
    row.nominal_accuracy = r.nominal_accuracy;
    row.perturbed_accuracy = r.perturbed_accuracy;
  } else {
    // Average over the test split of the per-signal mean squared deviation.
    std::vector<double> per_trial(e.trials, 0.0);
    for (std::size_t i = 0; i < prep.data.test.size(); ++i) {
      const auto d = mc_gcnn_deviation(prep.net, prep.shift, m, e.policy, prep.data.test[i].x, e.trials,
                                       MCOptions{e.threads, i * e.trials});
      for (std::size_t t = 0; t < e.trials; ++t) per_trial[t] += d.samples[t] / static_cast<double>(prep.data.test.size());
    }
    const auto ms = mean_std(per_trial);
    row.mean = ms.mean;
    row.std = ms.std;
    row.trials = e.trials;
  }
  return row;
}

// Averages replicate rows: the mean of the means, and a pooled per-trial std
// so that std_error() is the standard error of that average.
inline SweepRow combine_replicates(const std::vector<SweepRow>& reps) {
  SweepRow row;
  const auto r = static_cast<double>(reps.size());
  double var = 0.0, nominal = 0.0, perturbed = 0.0;
  for (const auto& x : reps) {
    row.mean += x.mean / r;
    var += x.std * x.std / r;
    nominal += x.nominal_accuracy / r;
    perturbed += x.perturbed_accuracy / r;
    row.trials += x.trials;
  }
  row.std = std::sqrt(var);
  row.nominal_accuracy = nominal;
  row.perturbed_accuracy = perturbed;
  return row;
}

// Points are evaluated in grid order; a training divergence marks the point
// failed and the sweep continues.
inline SweepResult run_sweep(const SweepSpec& spec) {
  spec.validate();
  if (spec.fixed.replicates == 0) throw ConfigError("sweep: replicates must be >= 1");
  SweepResult out;
  out.variable = spec.variable;
  const bool reuse = spec.variable == SweepVariable::P && spec.reuse_model;
  std::vector<std::optional<PreparedExperiment>> shared(spec.fixed.replicates);
  for (double v : spec.grid) {
    const ExperimentSpec point = sweep_point(spec, v);
    SweepRow row;
    try {
      std::vector<SweepRow> reps;
      for (std::size_t r = 0; r < point.replicates; ++r) {
        const ExperimentSpec e = replicate_spec(point, r);
        if (reuse) {
          if (!shared[r]) shared[r] = prepare_experiment(e);
          reps.push_back(evaluate_point(e, *shared[r]));
        } else {
          reps.push_back(evaluate_point(e, prepare_experiment(e)));
        }
      }
      row = combine_replicates(reps);
    } catch (const TrainingDivergedError& err) {
      row = SweepRow{};
      row.ok = false;
      row.status = "diverged@" + std::to_string(err.epoch());
    }
    row.value = v;
    out.rows.push_back(row);
  }
  return out;
}

inline void write_sweep_csv(std::ostream& out, const SweepResult& r) {
  out << to_string(r.variable) << ",mean,std,std_error,trials,nominal_acc,perturbed_acc,status\n";
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& row : r.rows) {
    os << row.value << ',' << row.mean << ',' << row.std << ',' << row.std_error() << ',' << row.trials << ','
       << row.nominal_accuracy << ',' << row.perturbed_accuracy << ',' << row.status << '\n';
  }
  out << os.str();
}

// "x y yerr" triplets; failed points are omitted.
inline void write_plot_data(std::ostream& out, const SweepResult& r) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  os << "# " << to_string(r.variable) << " mean std_error\n";
  for (const auto& row : r.rows)
    if (row.ok) os << row.value << ' ' << row.mean << ' ' << row.std_error() << '\n';
  out << os.str();
}

inline void write_loss_trace(std::ostream& out, const std::vector<EpochRecord>& trace) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  os << "epoch,train_loss,val_loss,val_acc\n";
  for (const auto& r : trace) os << r.epoch << ',' << r.train_loss << ',' << r.val_loss << ',' << r.val_acc << '\n';
  out << os.str();
}

}  // namespace gstab
