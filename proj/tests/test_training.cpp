#include <gtest/gtest.h>

#include <cmath>

#include "costi/optim.hpp"
#include "costi/training.hpp"

using namespace costi;

namespace {

ParamStore<double> scalar_store(double w) {
  ParamStore<double> ps;
  ps.add("w", Tensor<double>({1}, {w}, true));
  return ps;
}

double minimize_quadratic(OptimizerKind kind, double lr, std::size_t steps) {
  auto ps = scalar_store(0.0);
  OptimizerConfig cfg = OptimizerConfig::defaults(kind, steps);
  cfg.lr = lr;
  cfg.weight_decay = 0.0;
  Optimizer<double> opt(cfg, ps);
  for (std::size_t k = 0; k < steps; ++k) {
    ps.zero_grad();
    Tape<double> tape;
    tape.backward(square(add_scalar(ps[0], -3.0)));
    opt.step(ps);
  }
  return opt.eval_params(ps)[0].item();
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.channels = 8;
  c.heads = 2;
  c.nem_layers = 1;
  c.f_t = 2;
  c.f_s = 2;
  c.embedding_frequencies = 4;
  c.dropout = 0.1;
  return c;
}

TrainConfig tiny_train(std::size_t steps) {
  TrainConfig t;
  t.batch_size = 4;
  t.total_steps = steps;
  t.val_every = 5;
  t.val_samples = 2;
  return t;
}

}  // namespace

TEST(Optimizer, ZeroGradientLeavesParametersUnchanged) {
  for (auto kind : {OptimizerKind::schedulefree_adamw, OptimizerKind::adamw_multistep, OptimizerKind::radam_plain}) {
    auto ps = scalar_store(1.25);
    OptimizerConfig cfg = OptimizerConfig::defaults(kind, 10);
    cfg.weight_decay = 0.0;
    Optimizer<double> opt(cfg, ps);
    for (int k = 0; k < 10; ++k) opt.step(ps);
    EXPECT_EQ(ps[0].item(), 1.25) << to_string(kind);
    EXPECT_EQ(opt.eval_params(ps)[0].item(), 1.25);
  }
}

TEST(Optimizer, DecoupledWeightDecayShrinksGeometrically) {
  for (auto kind : {OptimizerKind::adamw_multistep, OptimizerKind::radam_plain}) {
    auto ps = scalar_store(2.0);
    OptimizerConfig cfg = OptimizerConfig::defaults(kind, 1000);
    cfg.lr = 0.01;
    cfg.weight_decay = 0.5;
    Optimizer<double> opt(cfg, ps);
    for (int k = 0; k < 5; ++k) opt.step(ps);
    EXPECT_NEAR(ps[0].item(), 2.0 * std::pow(1.0 - 0.005, 5), 1e-15) << to_string(kind);
  }
}

TEST(Optimizer, AllKindsMinimizeQuadratic) {
  for (auto kind : {OptimizerKind::schedulefree_adamw, OptimizerKind::adamw_multistep, OptimizerKind::radam_plain})
    EXPECT_NEAR(minimize_quadratic(kind, 0.01, 5000), 3.0, 1e-3) << to_string(kind);
}

TEST(Optimizer, MultiStepDropsAtThreeQuartersAndNinetyPercent) {
  auto ps = scalar_store(0.0);
  Optimizer<double> opt(OptimizerConfig::defaults(OptimizerKind::adamw_multistep, 100), ps);
  std::vector<double> lrs;
  for (int k = 0; k < 100; ++k) {
    lrs.push_back(opt.current_lr());
    opt.step(ps);
  }
  EXPECT_DOUBLE_EQ(lrs[74], 1e-3);
  EXPECT_DOUBLE_EQ(lrs[75], 1e-4);
  EXPECT_DOUBLE_EQ(lrs[89], 1e-4);
  EXPECT_NEAR(lrs[90], 1e-5, 1e-20);
}

TEST(Optimizer, SchedulefreeEvaluatesAveragedIterate) {
  auto ps = scalar_store(0.0);
  OptimizerConfig cfg = OptimizerConfig::defaults(OptimizerKind::schedulefree_adamw, 10);
  Optimizer<double> opt(cfg, ps);
  ps.zero_grad();
  {
    Tape<double> tape;
    tape.backward(scale(ps[0], -1.0));
  }
  opt.step(ps);
  // first step: z = -lr * g / |g| = lr, x = z, y = z
  EXPECT_NEAR(opt.z(0)[0], cfg.lr, 1e-9);
  EXPECT_NEAR(opt.eval_params(ps)[0].item(), cfg.lr, 1e-9);
  EXPECT_NEAR(ps[0].item(), cfg.lr, 1e-9);
}

TEST(Optimizer, NonFiniteGradientNamesLayer) {
  auto ps = scalar_store(1.0);
  ps.add("encoder.weight", Tensor<double>({2}, {1.0, 2.0}, true));
  Optimizer<double> opt(OptimizerConfig{}, ps);
  {
    Tape<double> tape;
    tape.backward(sum(mul(ps[1], Tensor<double>({2}, {1.0, std::nan("")}))));
  }
  try {
    opt.step(ps);
    FAIL() << "expected a numeric error";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.weight"), std::string::npos);
  }
  EXPECT_THROW(parse_optimizer("sgd"), std::invalid_argument);
}

TEST(NoisyPair, SharedNoiseCoupling) {
  Rng rng(1);
  Window w;
  w.dims = Dims{6, 2, 1};
  w.values.resize(12);
  for (auto& v : w.values) v = rng.normal();
  w.observed.assign(12, 1);
  w.observed[3] = 0;
  w.values[3] = 0.0;
  set_cond_mask(w, w.observed);
  Rng a(9), b(9);
  const auto p = build_noisy_pair(w, 0.7, 2.5, a);
  const auto q = build_noisy_pair(w, 0.7, 2.5, b);
  EXPECT_EQ(p.upper, q.upper);
  EXPECT_EQ(p.lower, q.lower);
  for (std::size_t j = 0; j < 12; ++j) EXPECT_NEAR((p.upper[j] - p.lower[j]) / (2.5 - 0.7), p.eps[j], 1e-12);
  EXPECT_NEAR(p.lower[3], 0.7 * p.eps[3], 1e-15);
  Rng c(4);
  const auto same = build_noisy_pair(w, 1.3, 1.3, c);
  EXPECT_EQ(same.upper, same.lower);
}

TEST(NoisyPair, NoiseVarianceMatchesSigma) {
  Window w;
  w.dims = Dims{1, 1, 1};
  w.values = {0.5};
  w.observed = {1};
  set_cond_mask(w, {1});
  Rng rng(5);
  const int draws = 10000;
  const double sigma = 1.7;
  double s = 0, ss = 0;
  for (int i = 0; i < draws; ++i) {
    const double e = build_noisy_pair(w, sigma, 2.0 * sigma, rng).lower[0] - 0.5;
    s += e;
    ss += e * e;
  }
  const double var = ss / draws - (s / draws) * (s / draws);
  // standard error of a Gaussian variance estimate is sigma^2 sqrt(2/n)
  EXPECT_NEAR(var, sigma * sigma, 3.0 * sigma * sigma * std::sqrt(2.0 / draws));
}

TEST(Loss, CleanTargetBranchMatchesHandComputation) {
  ModelConfig cfg = tiny_model();
  cfg.dropout = 0.0;
  const Model<double> model(cfg);
  const auto ps = model.init_params(3);
  Window w;
  w.dims = Dims{2, 1, 1};
  w.values = {0.4, -1.1};
  w.observed = {1, 1};
  set_cond_mask(w, {1, 0});
  const NoiseSchedule sched;
  const auto grid = sigma_grid(sched.with_n(5));
  const std::vector<double> eps{0.3, -0.8};
  const LossItem item{&w, 0, eps};
  Graph g;
  g.nodes = 1;
  g.adjacency = {0.0};
  const auto adj = normalized_adjacency<double>(g);
  const double loss = consistency_loss(model, ps, ps, {item}, grid, sched, adj, 0.00054, {}).item();

  ModelInput<double> in;
  in.x_noisy = Tensor<double>({1, 2, 1, 1}, {0.4 + grid[1] * eps[0], -1.1 + grid[1] * eps[1]});
  in.interp = Tensor<double>({1, 2, 1, 1}, {0.4, 0.4});
  in.cond_mask = Tensor<double>({1, 2, 1, 1}, {1.0, 0.0});
  in.sigma = {grid[1]};
  in.adjacency = adj;
  const double out = model.consistency_forward(ps, in, sched, {})[1];
  const double c = 0.00054 * std::sqrt(2.0);
  const double expect = (std::sqrt((out + 1.1) * (out + 1.1) + c * c) - c) / (grid[1] - grid[0]);
  EXPECT_NEAR(loss, expect, 1e-12 * std::max(1.0, expect));
}

TEST(Loss, WindowWithoutEvaluatedCellsContributesZero) {
  const Model<double> model(tiny_model());
  const auto ps = model.init_params(1);
  Rng rng(2);
  Window w;
  w.dims = Dims{4, 2, 1};
  w.values.assign(8, 1.0);
  w.observed.assign(8, 1);
  set_cond_mask(w, w.observed);
  Graph g;
  g.nodes = 2;
  g.adjacency = {0, 1, 1, 0};
  const auto grid = sigma_grid(NoiseSchedule{}.with_n(10));
  EXPECT_EQ(consistency_loss(model, ps, w, 4, grid, NoiseSchedule{}, g, rng).item(), 0.0);
}

TEST(Loss, PerturbingUnevaluatedCellsChangesNothing) {
  Rng rng(3);
  const Shape s{2, 3, 2, 1};
  std::vector<double> a(12), b(12), w(12, 0.0);
  for (std::size_t i = 0; i < 12; ++i) {
    a[i] = rng.normal();
    b[i] = rng.normal();
    if (i % 4 == 1) w[i] = 0.25;
  }
  const double base = masked_pseudo_huber(Tensor<double>(s, a), Tensor<double>(s, b), Tensor<double>(s, w), 0.01).item();
  for (int trial = 0; trial < 100; ++trial) {
    auto a2 = a, b2 = b;
    for (std::size_t i = 0; i < 12; ++i)
      if (w[i] == 0.0) a2[i] += rng.normal() * 100.0, b2[i] -= rng.normal() * 100.0;
    ASSERT_EQ(masked_pseudo_huber(Tensor<double>(s, a2), Tensor<double>(s, b2), Tensor<double>(s, w), 0.01).item(),
              base);
  }
}

TEST(Loss, IdenticalStudentAndTeacherOutputsGiveZero) {
  const Tensor<double> x({2, 2}, {1, 2, 3, 4}), w = Tensor<double>::ones({2, 2});
  EXPECT_EQ(masked_pseudo_huber(x, x, w, 0.1).item(), 0.0);
}

TEST(Train, PrepareDataSplitsAndErrors) {
  const Dataset ds = synth_dataset(4, 400, 1);
  const auto p = prepare_data(ds, 12, 3);
  EXPECT_EQ(p.dims, (Dims{12, 4, 1}));
  EXPECT_EQ(p.train.size(), (280u - 12u) / 3u + 1u);
  EXPECT_EQ(p.val.size(), 40u / 12u);
  EXPECT_EQ(p.test.size(), 80u / 12u);
  EXPECT_EQ(p.val.front().start, 280u);
  EXPECT_THROW(prepare_data(synth_dataset(4, 10, 1), 12), DataError);
}

TEST(Train, SingleStepSmoke) {
  const auto data = prepare_data(synth_dataset(4, 300, 2), 8, 4);
  const Model<float> model(tiny_model());
  const auto r = train(model, data, tiny_train(1));
  ASSERT_EQ(r.trace.size(), 1u);
  EXPECT_TRUE(r.trace[0].val_mae.has_value());
  EXPECT_TRUE(std::isfinite(r.trace[0].loss));
  EXPECT_EQ(r.best_step, 1u);
  EXPECT_TRUE(r.best.all_finite());
}

TEST(Train, TraceFollowsCurriculumAndValidationInterval) {
  const auto data = prepare_data(synth_dataset(4, 300, 2), 8, 4);
  const Model<float> model(tiny_model());
  auto cfg = tiny_train(20);
  cfg.curriculum.kind = CurriculumKind::linear;
  std::size_t callbacks = 0;
  const auto r = train(model, data, cfg, [&](const TraceRow&) { ++callbacks; });
  ASSERT_EQ(r.trace.size(), 20u);
  EXPECT_EQ(callbacks, 20u);
  CurriculumSchedule c = cfg.curriculum;
  c.total_steps = 20;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < 20; ++k) {
    const auto& row = r.trace[k];
    EXPECT_EQ(row.step, k);
    EXPECT_EQ(row.n, curriculum_n(k, c));
    EXPECT_EQ(row.val_mae.has_value(), (k + 1) % 5 == 0);
    if (row.val_mae) best = std::min(best, *row.val_mae);
    EXPECT_GT(row.sigma_i, 0.0);
  }
  EXPECT_EQ(r.best_val_mae, best);
  EXPECT_GT(r.seconds, 0.0);
}

TEST(Train, DeterministicUnderFixedSeed) {
  const auto data = prepare_data(synth_dataset(4, 300, 2), 8, 4);
  const Model<float> model(tiny_model());
  for (auto strategy : {MaskStrategy::point, MaskStrategy::block_hybrid, MaskStrategy::historical_hybrid}) {
    auto cfg = tiny_train(10);
    cfg.mask_strategy = strategy;
    cfg.seed = 17;
    const auto a = train(model, data, cfg), b = train(model, data, cfg);
    ASSERT_EQ(a.trace.size(), b.trace.size());
    for (std::size_t k = 0; k < a.trace.size(); ++k) {
      EXPECT_EQ(a.trace[k].loss, b.trace[k].loss);
      EXPECT_EQ(a.trace[k].val_mae, b.trace[k].val_mae);
    }
    for (std::size_t i = 0; i < a.last.size(); ++i) EXPECT_EQ(a.last[i].to_vector(), b.last[i].to_vector());
    cfg.seed = 18;
    const auto c = train(model, data, cfg);
    EXPECT_NE(a.trace.back().loss, c.trace.back().loss);
  }
}

TEST(Train, AllOptimizersRun) {
  const auto data = prepare_data(synth_dataset(4, 300, 2), 8, 4);
  const Model<float> model(tiny_model());
  for (auto kind : {OptimizerKind::schedulefree_adamw, OptimizerKind::adamw_multistep, OptimizerKind::radam_plain}) {
    auto cfg = tiny_train(5);
    cfg.optimizer = kind;
    const auto r = train(model, data, cfg);
    EXPECT_TRUE(r.last.all_finite()) << to_string(kind);
  }
}

TEST(Train, InvalidConfigIsRejected) {
  const auto data = prepare_data(synth_dataset(4, 300, 2), 8, 4);
  const Model<float> model(tiny_model());
  auto cfg = tiny_train(5);
  cfg.learning_rate = 0.0;
  EXPECT_THROW(train(model, data, cfg), std::invalid_argument);
  cfg = tiny_train(0);
  EXPECT_THROW(train(model, data, cfg), std::invalid_argument);
}
