#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "gcnn_stab/gcnn.hpp"
#include "test_util.hpp"

using namespace gstab;

namespace {

// Straight-line oracle: materializes every S^k and every feature.
Eigen::MatrixXd materialized_forward(const GCNN& net, const Eigen::MatrixXd& s, const Eigen::MatrixXd& x) {
  const auto n = s.rows();
  std::vector<Eigen::MatrixXd> powers{Eigen::MatrixXd::Identity(n, n)};
  for (std::size_t k = 1; k <= net.order(); ++k) powers.push_back(powers.back() * s);
  Eigen::MatrixXd cur = x;
  for (const auto& layer : net.layers()) {
    Eigen::MatrixXd next(n, static_cast<Eigen::Index>(layer.out_features));
    for (std::size_t f = 0; f < layer.out_features; ++f) {
      Eigen::MatrixXd h = Eigen::MatrixXd::Zero(n, n);
      Eigen::VectorXd u = Eigen::VectorXd::Zero(n);
      for (std::size_t g = 0; g < layer.in_features; ++g) {
        Eigen::MatrixXd hfg = Eigen::MatrixXd::Zero(n, n);
        for (std::size_t k = 0; k <= net.order(); ++k) hfg += layer.filter(f, g)[k] * powers[k];
        u += hfg * cur.col(static_cast<Eigen::Index>(g));
      }
      for (Eigen::Index i = 0; i < n; ++i) next(i, static_cast<Eigen::Index>(f)) = layer.sigma(u(i));
    }
    cur = next;
  }
  return cur;
}

GCNN make_net(std::size_t layers, std::size_t features, std::size_t order, std::size_t out, Activation hidden,
              Activation output, std::uint64_t seed, double scale = 1.0) {
  Architecture a;
  a.layers = layers;
  a.features = features;
  a.order = order;
  a.readout_width = out;
  a.hidden.kind = hidden;
  a.output.kind = output;
  return GCNN::random(a, seed, scale);
}

double half_squared_loss(const GCNN& net, const ShiftOperator& s, const Eigen::VectorXd& x, const Eigen::MatrixXd& t) {
  return 0.5 * (gcnn_forward(net, s, x).output - t).squaredNorm();
}

}  // namespace

TEST(Nonlinearity, ZeroAndLipschitz) {
  Stream rng(1, {});
  for (auto kind : {Activation::ReLU, Activation::AbsoluteValue, Activation::Tanh, Activation::Identity}) {
    const Nonlinearity s{kind};
    EXPECT_EQ(s(0.0), 0.0);
    EXPECT_EQ(s.c_sigma(), 1.0);
    for (int t = 0; t < 10000; ++t) {
      const double a = rng.uniform(-5, 5), b = rng.uniform(-5, 5);
      EXPECT_LE(std::abs(s(a) - s(b)), s.c_sigma() * std::abs(a - b) + 1e-15);
    }
    for (int t = 0; t < 10000; ++t) {
      Eigen::VectorXd a(8), b(8);
      for (Eigen::Index i = 0; i < 8; ++i) a(i) = rng.uniform(-3, 3), b(i) = rng.uniform(-3, 3);
      const Eigen::VectorXd sa = a.unaryExpr([&](double v) { return s(v); });
      const Eigen::VectorXd sb = b.unaryExpr([&](double v) { return s(v); });
      EXPECT_LE((sa - sb).norm(), (a - b).norm() + 1e-14);
    }
  }
  EXPECT_EQ(Nonlinearity{Activation::ReLU}.derivative(0.0), 0.0);
  EXPECT_THROW(parse_activation("swish"), ConfigError);
}

TEST(GCNN, StructureValidation) {
  GcnnLayer a{1, 2, {GraphFilter({1.0}), GraphFilter({1.0})}, {}};
  GcnnLayer b{3, 1, {GraphFilter({1.0}), GraphFilter({1.0}), GraphFilter({1.0})}, {}};
  EXPECT_THROW(GCNN({a, b}), InputError);
  GcnnLayer c{2, 1, {GraphFilter({1.0}), GraphFilter({1.0, 2.0})}, {}};
  EXPECT_THROW(GCNN({a, c}), InputError);
  GcnnLayer d{2, 2, {GraphFilter({1.0})}, {}};
  EXPECT_THROW(GCNN({d}), InputError);
  const auto net = make_net(3, 4, 2, 3, Activation::ReLU, Activation::Identity, 1);
  EXPECT_EQ(net.parameter_count(), (4 + 16 + 12) * 3u);
  EXPECT_EQ(net.width(), 4u);
  auto p = net.parameters();
  for (double v : p) EXPECT_TRUE(std::isfinite(v));
  auto copy = net;
  p[5] += 1.0;
  copy.set_parameters(p);
  EXPECT_EQ(copy.parameters(), p);
  EXPECT_NE(copy.fingerprint(), net.fingerprint());
  EXPECT_THROW(copy.set_parameters(std::vector<double>(3)), InputError);
}

TEST(GcnnForward, IdentityNetwork) {
  const GCNN net({GcnnLayer{1, 1, {GraphFilter({1.0})}, {Activation::Identity}}});
  const auto s = shift_from_graph(testutil::random_graph(6, 0.5, 1), ShiftVariant::Adjacency);
  const Eigen::VectorXd x = testutil::random_vector(6, 2);
  EXPECT_EQ(Eigen::VectorXd(gcnn_forward(net, s, x).output), x);
  EXPECT_THROW(gcnn_forward(net, s, Eigen::VectorXd::Zero(5)), InputError);
}

TEST(GcnnForward, TwoNodeHandComputation) {
  const GCNN net({GcnnLayer{1, 1, {GraphFilter({0.0, 1.0})}, {Activation::ReLU}}});
  Eigen::MatrixXd swap(2, 2);
  swap << 0, 1, 1, 0;
  const auto s = ShiftOperator::from_matrix(swap);
  const auto y = gcnn_forward(net, s, Eigen::Vector2d(1, -2)).output;
  EXPECT_EQ(y(0, 0), 0.0);
  EXPECT_EQ(y(1, 0), 1.0);
}

TEST(GcnnForward, MatchesMaterializedOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto s = shift_from_graph(testutil::random_graph(5, 0.5, seed), ShiftVariant::Adjacency);
    const auto net = make_net(2, 2, 3, 2, Activation::ReLU, Activation::Tanh, seed);
    const Eigen::VectorXd x = testutil::random_vector(5, seed);
    const Eigen::MatrixXd oracle = materialized_forward(net, s.matrix(), x);
    EXPECT_LT((gcnn_forward(net, s, x).output - oracle).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(GcnnForward, LayerNormChain) {
  // With max |h(lambda)| <= 1 on the nominal spectrum every layer-l feature
  // satisfies ||x_l^f||^2 <= F^(2l - 2) ||x||^2.
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto s = shift_from_graph(testutil::random_graph(10, 0.4, seed), ShiftVariant::NormalizedAdjacency);
    const auto d = eigendecompose(s);
    auto net = make_net(3, 3, 3, 3, Activation::ReLU, Activation::Tanh, seed);
    std::vector<GcnnLayer> layers = net.layers();
    for (auto& l : layers)
      for (auto& f : l.bank) {
        double m = 0.0;
        for (Eigen::Index i = 0; i < d.eigenvalues.size(); ++i) m = std::max(m, std::abs(frequency_response(f, d.eigenvalues(i))));
        auto c = f.coeffs();
        for (auto& v : c) v /= m;
        f.set_coeffs(c);
      }
    net = GCNN(layers);
    const Eigen::VectorXd x = testutil::random_vector(10, seed);
    const auto cache = gcnn_forward(net, s, x);
    const double f2 = static_cast<double>(net.width() * net.width());
    for (std::size_t l = 1; l <= net.num_layers(); ++l) {
      const Eigen::MatrixXd& feats = l < net.num_layers() ? cache.inputs[l] : cache.output;
      for (Eigen::Index c = 0; c < feats.cols(); ++c)
        EXPECT_LE(feats.col(c).squaredNorm(), std::pow(f2, static_cast<double>(l) - 1.0) * x.squaredNorm() * (1 + 1e-12));
    }
  }
}

TEST(GcnnStochastic, FullSurvivalEqualsNominal) {
  const auto g = testutil::random_graph(12, 0.3, 3);
  for (auto policy : {RealizationPolicy::IndependentPerFilter, RealizationPolicy::SharedPerLayerShift}) {
    const RESModel m(g, ShiftVariant::NormalizedAdjacency, 1.0, 4);
    const auto net = make_net(3, 4, 5, 2, Activation::ReLU, Activation::Identity, 9);
    const Eigen::VectorXd x = testutil::random_vector(12, 5);
    const Eigen::MatrixXd nominal = gcnn_forward(net, m.nominal(), x).output;
    for (std::uint64_t d = 0; d < 3; ++d) EXPECT_EQ(gcnn_forward_stochastic(net, m, policy, x, d), nominal);
  }
}

TEST(GcnnStochastic, SingleFilterReduction) {
  const RESModel m(testutil::random_graph(9, 0.4, 1), ShiftVariant::Adjacency, 0.7, 13);
  const GraphFilter f({0.3, -0.6, 0.2, 0.9});
  const GCNN net({GcnnLayer{1, 1, {f}, {Activation::Tanh}}});
  const Eigen::VectorXd x = testutil::random_vector(9, 3);
  for (std::uint64_t d = 0; d < 5; ++d) {
    const Eigen::VectorXd ref = filter_apply_chain(f, m.sample_chain(3, d, 0), x).unaryExpr([](double v) { return std::tanh(v); });
    for (auto policy : {RealizationPolicy::IndependentPerFilter, RealizationPolicy::SharedPerLayerShift})
      EXPECT_LT((gcnn_forward_stochastic(net, m, policy, x, d).col(0) - ref).cwiseAbs().maxCoeff(), 1e-13);
  }
}

TEST(GcnnStochastic, DrawCounts) {
  const RESModel m(testutil::random_graph(8, 0.4, 2), ShiftVariant::Adjacency, 0.8, 5);
  Architecture a;
  a.layers = 2;
  a.features = 2;
  a.order = 2;
  a.readout_width = 2;
  a.input_width = 2;
  a.output.kind = Activation::Tanh;
  const auto net = GCNN::random(a, 3);
  const Eigen::MatrixXd x = Eigen::MatrixXd::Random(8, 2);
  StochasticStats st;
  gcnn_forward_stochastic(net, m, RealizationPolicy::IndependentPerFilter, x, 0, &st);
  EXPECT_EQ(st.chains, 8u);
  EXPECT_EQ(st.realizations, 16u);
  StochasticStats shared;
  gcnn_forward_stochastic(net, m, RealizationPolicy::SharedPerLayerShift, x, 0, &shared);
  EXPECT_EQ(shared.chains, 2u);
  // determinism and draw dependence
  EXPECT_EQ(gcnn_forward_stochastic(net, m, RealizationPolicy::IndependentPerFilter, x, 4),
            gcnn_forward_stochastic(net, m, RealizationPolicy::IndependentPerFilter, x, 4));
  EXPECT_NE(gcnn_forward_stochastic(net, m, RealizationPolicy::IndependentPerFilter, x, 4),
            gcnn_forward_stochastic(net, m, RealizationPolicy::IndependentPerFilter, x, 5));
}

TEST(GcnnBackward, LinearClosedForm) {
  const auto s = shift_from_graph(testutil::random_graph(7, 0.4, 6), ShiftVariant::Laplacian);
  const GraphFilter f({0.2, -0.4, 0.1});
  const GCNN net({GcnnLayer{1, 1, {f}, {Activation::Identity}}});
  const Eigen::VectorXd x = testutil::random_vector(7, 1), y = testutil::random_vector(7, 2);
  const auto cache = gcnn_forward(net, s, x);
  const Eigen::VectorXd hx = filter_apply(f, s, x);
  const auto grad = gcnn_backward(net, cache, 2.0 * (cache.output - y));
  Eigen::VectorXd sk = x;
  for (std::size_t k = 0; k <= 2; ++k) {
    EXPECT_NEAR(grad.flat[k], 2.0 * (hx - y).dot(sk), 1e-12);
    sk = s.matrix() * sk;
  }
}

TEST(GcnnBackward, ZeroInZeroOut) {
  const auto s = shift_from_graph(testutil::random_graph(7, 0.4, 6), ShiftVariant::Adjacency);
  const auto net = make_net(2, 3, 2, 2, Activation::ReLU, Activation::ReLU, 2);
  const auto cache = gcnn_forward(net, s, testutil::random_vector(7, 3));
  for (double g : gcnn_backward(net, cache, Eigen::MatrixXd::Zero(7, 2)).flat) EXPECT_EQ(g, 0.0);
}

TEST(GcnnBackward, StaleCacheRejected) {
  const auto s = shift_from_graph(testutil::random_graph(7, 0.4, 6), ShiftVariant::Adjacency);
  auto net = make_net(2, 3, 2, 2, Activation::ReLU, Activation::ReLU, 2);
  const auto cache = gcnn_forward(net, s, testutil::random_vector(7, 3));
  EXPECT_THROW(gcnn_backward(net, cache, Eigen::MatrixXd::Zero(7, 3)), InputError);
  auto p = net.parameters();
  p[0] += 0.1;
  net.set_parameters(p);
  EXPECT_THROW(gcnn_backward(net, cache, Eigen::MatrixXd::Zero(7, 2)), InputError);
  const auto other = make_net(1, 3, 2, 2, Activation::ReLU, Activation::ReLU, 2);
  EXPECT_THROW(gcnn_backward(other, cache, Eigen::MatrixXd::Zero(7, 2)), InputError);
}

TEST(GcnnBackward, FiniteDifferences) {
  const double step = 1e-5;
  struct Case {
    std::size_t l, f, k, n;
    Activation hidden;
  };
  const Case cases[] = {{1, 1, 3, 6, Activation::Tanh},       {2, 3, 2, 8, Activation::Tanh},
                        {3, 4, 5, 12, Activation::Tanh},      {3, 4, 5, 12, Activation::ReLU},
                        {2, 2, 4, 10, Activation::AbsoluteValue}};
  std::uint64_t seed = 0;
  for (const auto& c : cases) {
    ++seed;
    const auto s = shift_from_graph(testutil::random_graph(c.n, 0.35, seed), ShiftVariant::NormalizedAdjacency);
    auto net = make_net(c.l, c.f, c.k, 2, c.hidden, Activation::Tanh, seed);
    const Eigen::VectorXd x = testutil::random_vector(c.n, seed);
    const Eigen::MatrixXd t = Eigen::MatrixXd::Random(static_cast<Eigen::Index>(c.n), 2);
    const auto cache = gcnn_forward(net, s, x);
    const auto grad = gcnn_backward(net, cache, cache.output - t);
    const auto base = net.parameters();
    for (std::size_t i = 0; i < base.size(); ++i) {
      auto up = base, dn = base;
      up[i] += step;
      dn[i] -= step;
      GCNN a = net, b = net;
      a.set_parameters(up);
      b.set_parameters(dn);
      const double fd = (half_squared_loss(a, s, x, t) - half_squared_loss(b, s, x, t)) / (2 * step);
      const double g = grad.flat[i];
      EXPECT_LE(std::abs(fd - g) / std::max({1.0, std::abs(fd), std::abs(g)}), 1e-5) << "case " << seed << " param " << i;
    }
  }
}

TEST(Readout, Examples) {
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(4, 3);
  y.col(1).setConstant(0.5);
  EXPECT_EQ(readout_classify(y), 1u);
  Eigen::MatrixXd tie = Eigen::MatrixXd::Zero(3, 2);
  tie(0, 0) = 1.0;
  tie(2, 1) = 1.0;
  EXPECT_EQ(readout_classify(tie), 0u);
  Stream rng(4, {});
  for (int t = 0; t < 200; ++t) {
    Eigen::MatrixXd m(6, 4);
    for (Eigen::Index j = 0; j < 4; ++j)
      for (Eigen::Index i = 0; i < 6; ++i) m(i, j) = rng.uniform(-1, 1);
    std::size_t best = 0;
    double best_v = -1e300;
    for (Eigen::Index j = 0; j < 4; ++j)
      for (Eigen::Index i = 0; i < 6; ++i)
        if (m(i, j) > best_v) best_v = m(i, j), best = static_cast<std::size_t>(j);
    EXPECT_EQ(readout_classify(m), best);
  }
  ReadoutSpec cand{Readout::CandidateNodes, {3, 0}};
  Eigen::MatrixXd z = Eigen::MatrixXd::Zero(4, 2);
  z(3, 0) = 0.2;
  z(1, 1) = 5.0;
  EXPECT_EQ(readout_classify(z, cand), 0u);
  EXPECT_THROW(readout_classify(z, ReadoutSpec{Readout::CandidateNodes, {1}}), InputError);
}

TEST(TrainAdam, ZeroLearningRateKeepsCoefficients) {
  const auto s = shift_from_graph(testutil::random_graph(6, 0.5, 1), ShiftVariant::Adjacency);
  const auto net = make_net(2, 2, 2, 2, Activation::ReLU, Activation::Identity, 1);
  Dataset data;
  for (std::size_t i = 0; i < 10; ++i) data.push_back({testutil::random_vector(6, i), i % 2, {}});
  TrainOptions opt;
  opt.lr = 0.0;
  opt.epochs = 3;
  opt.batch_size = 4;
  const auto r = train_adam(net, s, data, &data, opt);
  EXPECT_EQ(r.net.parameters(), net.parameters());
  ASSERT_EQ(r.trace.size(), 3u);
  EXPECT_TRUE(std::isfinite(r.trace[0].val_acc));
}

TEST(TrainAdam, LinearRegressionDecreases) {
  const auto s = shift_from_graph(testutil::random_graph(10, 0.4, 2), ShiftVariant::NormalizedAdjacency);
  const GCNN net({GcnnLayer{1, 1, {GraphFilter({0.1, -0.2, 0.05})}, {Activation::Identity}}});
  Dataset data;
  for (std::size_t i = 0; i < 64; ++i) {
    Sample smp;
    smp.x = testutil::random_vector(10, 100 + i);
    smp.target = s.apply(smp.x);
    data.push_back(smp);
  }
  TrainOptions opt;
  opt.loss = LossKind::SquaredError;
  opt.lr = 1e-2;
  opt.epochs = 50;
  opt.batch_size = 64;
  opt.seed = 3;
  const auto r = train_adam(net, s, data, nullptr, opt);
  for (std::size_t e = 1; e < r.trace.size(); ++e) EXPECT_LT(r.trace[e].train_loss, r.trace[e - 1].train_loss);
  const auto again = train_adam(net, s, data, nullptr, opt);
  EXPECT_EQ(again.net.parameters(), r.net.parameters());
}

TEST(TrainAdam, DivergenceCarriesEpoch) {
  const auto s = shift_from_graph(testutil::random_graph(6, 0.5, 1), ShiftVariant::Adjacency);
  const GCNN net({GcnnLayer{1, 1, {GraphFilter({1.0, 1.0})}, {Activation::Identity}}});
  Dataset data(1);
  data[0].x = Eigen::VectorXd::Constant(6, 1e200);
  data[0].target = Eigen::MatrixXd::Zero(6, 1);
  TrainOptions opt;
  opt.loss = LossKind::SquaredError;
  try {
    train_adam(net, s, data, nullptr, opt);
    FAIL() << "expected divergence";
  } catch (const TrainingDivergedError& e) {
    EXPECT_EQ(e.epoch(), 1u);
  }
  EXPECT_THROW(train_adam(net, s, Dataset{}, nullptr, opt), InputError);
}

TEST(Checkpoint, RoundTrip) {
  const auto net = make_net(3, 4, 2, 3, Activation::Tanh, Activation::Identity, 8);
  std::stringstream ss;
  save_checkpoint(ss, net);
  const auto back = load_checkpoint(ss);
  EXPECT_EQ(back.parameters(), net.parameters());
  EXPECT_EQ(back.layers()[0].sigma.kind, Activation::Tanh);
  EXPECT_EQ(back.layers()[2].sigma.kind, Activation::Identity);
  std::istringstream bad("gcnn_checkpoint 1\nlayers 1 order 1\nlayer 0 in 1 out 1 sigma relu\nfilter 0 0 0 1.0\n");
  EXPECT_THROW(load_checkpoint(bad), ConfigError);
}
