#include <gtest/gtest.h>

#include <cmath>

#include "costi/gradcheck.hpp"
#include "costi/network.hpp"
#include "costi/training.hpp"

using namespace costi;

namespace {

ModelConfig micro_config() {
  ModelConfig c;
  c.channels = 8;
  c.heads = 2;
  c.nem_layers = 1;
  c.embedding_frequencies = 4;
  c.dropout = 0.0;
  return c;
}

ModelConfig toy_config() {
  ModelConfig c;
  c.channels = 16;
  c.heads = 2;
  c.nem_layers = 2;
  c.f_t = 2;
  c.f_s = 2;
  c.embedding_frequencies = 16;
  return c;
}

/// Moves every parameter away from its initial value so that zero-initialized
/// layers also carry gradient signal.
template <typename T>
ParamStore<T> jittered(const Model<T>& model, std::uint64_t seed) {
  ParamStore<T> ps = model.init_params(seed);
  Rng rng(seed + 100);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto v = ps[i].to_vector();
    for (auto& x : v) x += static_cast<T>(rng.uniform(-0.3, 0.3));
    ps[i] = Tensor<T>(ps[i].shape(), v, true);
  }
  return ps;
}

Window random_window(std::size_t steps, std::size_t nodes, Rng& rng) {
  Window w;
  w.dims = Dims{steps, nodes, 1};
  w.values.resize(w.dims.size());
  for (auto& v : w.values) v = rng.normal();
  w.observed.assign(w.dims.size(), 1);
  Mask cond(w.dims.size(), 1);
  for (std::size_t i = 0; i < cond.size(); i += 3) cond[i] = 0;
  set_cond_mask(w, cond);
  return w;
}

Graph ring_graph(std::size_t n) {
  Graph g;
  g.nodes = n;
  g.adjacency.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    g.adjacency[i * n + (i + 1) % n] = 0.7;
    g.adjacency[((i + 1) % n) * n + i] = 0.7;
  }
  for (std::size_t i = 0; i < n; ++i) g.adjacency[i * n + i] = 0.0;
  return g;
}

template <typename T>
ModelInput<T> random_input(std::size_t b, std::size_t steps, std::size_t nodes, double sigma, Rng& rng,
                           const Graph& g) {
  const Shape s{b, steps, nodes, 1};
  std::vector<T> x(shape_numel(s)), interp(x.size()), mask(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = static_cast<T>(sigma * rng.normal());
    interp[i] = static_cast<T>(rng.normal());
    mask[i] = rng.bernoulli(0.7) ? T(1) : T(0);
  }
  ModelInput<T> in;
  in.x_noisy = Tensor<T>(s, x);
  in.interp = Tensor<T>(s, interp);
  in.cond_mask = Tensor<T>(s, mask);
  in.sigma.assign(b, sigma);
  in.adjacency = normalized_adjacency<T>(g);
  return in;
}

/// Node permutation applied to axis 2 of [B, L, N, C] data.
template <typename T>
Tensor<T> permute_nodes(const Tensor<T>& x, const std::vector<std::size_t>& perm, int axis) {
  std::vector<Tensor<T>> parts;
  for (std::size_t p : perm) parts.push_back(slice(x, axis, p, 1));
  return concat(parts, axis);
}

}  // namespace

TEST(Model, BoundaryConditionIsIdentity) {
  const NoiseSchedule sched;
  const Graph g = ring_graph(4);
  for (auto cfg : {micro_config(), toy_config()}) {
    const Model<double> model(cfg);
    const auto ps = jittered(model, 1);
    Rng rng(2);
    for (int c = 0; c < 100; ++c) {
      auto in = random_input<double>(2, 6, 4, 1.0, rng, g);
      in.sigma.assign(2, sched.sigma_min);
      const auto out = model.consistency_forward(ps, in, sched, {});
      const auto x = in.x_noisy.to_vector();
      for (std::size_t i = 0; i < x.size(); ++i) ASSERT_LT(std::fabs(out[i] - x[i]), 1e-6);
    }
  }
}

TEST(Model, OutputShapeAndFiniteForAllVariants) {
  const NoiseSchedule sched;
  const Graph g = ring_graph(5);
  Rng rng(3);
  for (auto mixer : {TemporalMixer::bidir_attention, TemporalMixer::bidir_linear_scan})
    for (int flags = 0; flags < 16; ++flags) {
      ModelConfig cfg = toy_config();
      cfg.temporal_mixer = mixer;
      cfg.use_cond = flags & 1;
      cfg.use_stfem = flags & 2;
      cfg.use_nem = flags & 4;
      cfg.use_self_attention = flags & 8;
      const Model<float> model(cfg);
      const auto ps = model.init_params(4);
      auto in = random_input<float>(3, 7, 5, 10.0, rng, g);
      const auto out = model.consistency_forward(ps, in, sched, {});
      ASSERT_EQ(out.shape(), (Shape{3, 7, 5, 1}));
      for (auto v : out.data()) ASSERT_TRUE(std::isfinite(v));
    }
}

TEST(Model, RejectsBadConfigAndShapes) {
  ModelConfig bad = toy_config();
  bad.heads = 3;
  EXPECT_THROW(Model<float>{bad}, std::invalid_argument);
  bad = toy_config();
  bad.dropout = 1.0;
  EXPECT_THROW(Model<float>{bad}, std::invalid_argument);
  EXPECT_THROW(parse_temporal_mixer("lstm"), std::invalid_argument);

  const Model<double> model(micro_config());
  const auto ps = model.init_params(0);
  Rng rng(1);
  auto in = random_input<double>(2, 4, 3, 1.0, rng, ring_graph(3));
  in.sigma = {1.0};
  EXPECT_THROW(model.consistency_forward(ps, in, NoiseSchedule{}, {}), ShapeError);
  in = random_input<double>(2, 4, 3, 1.0, rng, ring_graph(4));
  EXPECT_THROW(model.consistency_forward(ps, in, NoiseSchedule{}, {}), ShapeError);
}

TEST(Model, NoiseEmbeddingSeparatesLevels) {
  const Model<double> model(toy_config());
  const auto ps = model.init_params(5);
  const NoiseSchedule sched;
  const auto grid = sigma_grid(sched.with_n(20));
  for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
    const auto e = model.sigma_embedding(ps, {scalings(grid[i], sched).c_noise, scalings(grid[i + 1], sched).c_noise});
    const std::size_t d = e.size(1);
    double dot = 0, na = 0, nb = 0;
    for (std::size_t k = 0; k < d; ++k) {
      dot += e[k] * e[d + k];
      na += e[k] * e[k];
      nb += e[d + k] * e[d + k];
    }
    EXPECT_LT(dot / std::sqrt(na * nb), 1.0 - 1e-6) << "sigma " << grid[i];
  }
}

TEST(Model, MessagePassingIsPermutationEquivariant) {
  const Model<double> model(micro_config());
  const auto ps = jittered(model, 6);
  Rng rng(7);
  Graph g;
  g.nodes = 4;
  g.adjacency.assign(16, 0.0);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = i + 1; j < 4; ++j) g.adjacency[i * 4 + j] = g.adjacency[j * 4 + i] = rng.uniform(0, 1);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  Graph gp = g;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) gp.adjacency[i * 4 + j] = g.adjacency[perm[i] * 4 + perm[j]];
  std::vector<double> h(3 * 4 * 8);
  for (auto& v : h) v = rng.normal();
  const Tensor<double> ht({3, 4, 8}, h);
  const std::size_t w = model.stfem_primary().mp_weight;
  const auto out = model.message_passing(ps, w, ht, normalized_adjacency<double>(g), {});
  const auto out_p = model.message_passing(ps, w, permute_nodes(ht, perm, 1), normalized_adjacency<double>(gp), {});
  const auto expect = permute_nodes(out, perm, 1);
  for (std::size_t i = 0; i < expect.numel(); ++i) EXPECT_NEAR(out_p[i], expect[i], 1e-12);
}

TEST(Model, FullNetworkIsNodeEquivariantWithoutPooling) {
  ModelConfig cfg = micro_config();
  cfg.f_t = 2;
  const Model<double> model(cfg);
  const auto ps = jittered(model, 8);
  Rng rng(9);
  const Graph g = ring_graph(4);
  const std::vector<std::size_t> perm{3, 1, 0, 2};
  Graph gp = g;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) gp.adjacency[i * 4 + j] = g.adjacency[perm[i] * 4 + perm[j]];
  auto in = random_input<double>(2, 5, 4, 2.0, rng, g);
  ModelInput<double> pin = in;
  pin.x_noisy = permute_nodes(in.x_noisy, perm, 2);
  pin.interp = permute_nodes(in.interp, perm, 2);
  pin.cond_mask = permute_nodes(in.cond_mask, perm, 2);
  pin.adjacency = normalized_adjacency<double>(gp);
  const auto expect = permute_nodes(model.consistency_forward(ps, in, NoiseSchedule{}, {}), perm, 2);
  const auto got = model.consistency_forward(ps, pin, NoiseSchedule{}, {});
  for (std::size_t i = 0; i < got.numel(); ++i) EXPECT_NEAR(got[i], expect[i], 1e-10);
}

TEST(Model, ParameterCountSnapshot) {
  EXPECT_EQ(Model<float>(micro_config()).parameter_count(), 5129u);
  EXPECT_EQ(Model<float>(toy_config()).parameter_count(), 25569u);
  EXPECT_EQ(Model<float>(ModelConfig{}).parameter_count(), 552449u);
  const Model<float> m(toy_config());
  EXPECT_EQ(m.init_params(0).count(), m.parameter_count());
}

TEST(Model, InitIsDeterministicPerSeed) {
  const Model<float> m(toy_config());
  const auto a = m.init_params(3), b = m.init_params(3), c = m.init_params(4);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].to_vector(), b[i].to_vector());
    differs = differs || a[i].to_vector() != c[i].to_vector();
  }
  EXPECT_TRUE(differs);
}

TEST(Model, SinglePrecisionMatchesDouble) {
  const ModelConfig cfg = toy_config();
  const Model<double> md(cfg);
  const Model<float> mf(cfg);
  const auto pd = md.init_params(11);
  const auto pf = mf.init_params(11);
  Rng r1(12), r2(12);
  const Graph g = ring_graph(6);
  const auto ind = random_input<double>(2, 8, 6, 3.0, r1, g);
  const auto inf = random_input<float>(2, 8, 6, 3.0, r2, g);
  const auto od = md.consistency_forward(pd, ind, NoiseSchedule{}, {});
  const auto of = mf.consistency_forward(pf, inf, NoiseSchedule{}, {});
  for (std::size_t i = 0; i < od.numel(); ++i) EXPECT_NEAR(of[i], od[i], 1e-4 * (1.0 + std::fabs(od[i])));
}

TEST(Model, DropoutOnlyInTraining) {
  ModelConfig cfg = toy_config();
  cfg.dropout = 0.3;
  const Model<double> model(cfg);
  const auto ps = jittered(model, 1);
  Rng rng(2), drop(3);
  const auto in = random_input<double>(1, 6, 4, 1.0, rng, ring_graph(4));
  const auto a = model.consistency_forward(ps, in, NoiseSchedule{}, {}).to_vector();
  const auto b = model.consistency_forward(ps, in, NoiseSchedule{}, {}).to_vector();
  EXPECT_EQ(a, b);
  ForwardContext train{true, &drop};
  EXPECT_NE(model.consistency_forward(ps, in, NoiseSchedule{}, train).to_vector(), a);
}

TEST(Loss, GradientMatchesFiniteDifferencesForEveryParameter) {
  for (auto mixer : {TemporalMixer::bidir_attention, TemporalMixer::bidir_linear_scan}) {
    ModelConfig cfg = micro_config();
    cfg.temporal_mixer = mixer;
    const Model<double> model(cfg);
    const auto student = jittered(model, 21);
    const auto teacher = jittered(model, 22);
    Rng rng(23);
    const Window w = random_window(4, 2, rng);
    const NoiseSchedule sched;
    const auto grid = sigma_grid(sched.with_n(10));
    std::vector<LossItem> items{{&w, 3, {}}, {&w, 6, {}}};
    for (auto& it : items)
      for (std::size_t j = 0; j < w.dims.size(); ++j) it.eps.push_back(rng.normal());
    const auto adj = normalized_adjacency<double>(ring_graph(2));
    auto check = [&](std::size_t p, double h) {
      return grad_check(
          [&](const Tensor<double>& t) {
            ParamStore<double> ps = student;
            ps[p] = t;
            return consistency_loss(model, ps, teacher, items, grid, sched, adj, 0.00054, {});
          },
          student[p], h);
    };
    double abs_err = 0.0, scale = 0.0;
    std::size_t degenerate = 0;
    for (std::size_t p = 0; p < student.size(); ++p) {
      const auto fine = check(p, 1e-6);
      abs_err = std::max(abs_err, fine.max_abs_error);
      for (std::size_t i = 0; i < fine.analytic.size(); ++i)
        scale = std::max({scale, std::fabs(fine.analytic[i]), std::fabs(fine.numeric[i])});
      // per tensor, the larger step lifts gradients as small as 1e-9 above rounding noise
      const auto r = check(p, 3e-3);
      double a = 0.0, n = 0.0;
      for (std::size_t i = 0; i < r.analytic.size(); ++i)
        a = std::max(a, std::fabs(r.analytic[i])), n = std::max(n, std::fabs(r.numeric[i]));
      // key biases shift all logits of a query equally: their gradient is 0
      if (a < 1e-15 && n < 1e-9) {
        ++degenerate;
        continue;
      }
      ASSERT_LT(r.max_rel_error, 1e-4) << student.path(p);
    }
    EXPECT_LT(abs_err / scale, 1e-4);
    EXPECT_LT(degenerate * 4, student.size());
  }
}

TEST(Loss, TeacherReceivesNoGradient) {
  const Model<double> model(micro_config());
  const auto student = jittered(model, 31);
  const auto teacher = jittered(model, 32);
  Rng rng(33);
  const Window w = random_window(4, 2, rng);
  const NoiseSchedule sched;
  const auto grid = sigma_grid(sched.with_n(10));
  std::vector<LossItem> items{{&w, 4, {}}};
  for (std::size_t j = 0; j < w.dims.size(); ++j) items[0].eps.push_back(rng.normal());
  const auto adj = normalized_adjacency<double>(ring_graph(2));
  double numeric_max = 0.0;
  for (std::size_t p = 0; p < teacher.size(); ++p) {
    const auto r = grad_check(
        [&](const Tensor<double>& t) {
          ParamStore<double> tp = teacher;
          tp[p] = t;
          return consistency_loss(model, student, tp, items, grid, sched, adj, 0.00054, {});
        },
        teacher[p]);
    for (double a : r.analytic) ASSERT_EQ(a, 0.0) << teacher.path(p);
    for (double n : r.numeric) numeric_max = std::max(numeric_max, std::fabs(n));
  }
  // the teacher does influence the loss value, only its gradient is blocked
  EXPECT_GT(numeric_max, 1e-6);
}

TEST(Loss, SharedParametersOnlyGetStudentGradient) {
  const Model<double> model(micro_config());
  const auto params = jittered(model, 41);
  const auto frozen = params.clone();
  Rng rng(42);
  const Window w = random_window(4, 2, rng);
  const NoiseSchedule sched;
  const auto grid = sigma_grid(sched.with_n(10));
  std::vector<LossItem> items{{&w, 5, {}}};
  for (std::size_t j = 0; j < w.dims.size(); ++j) items[0].eps.push_back(rng.normal());
  const auto adj = normalized_adjacency<double>(ring_graph(2));
  auto grads = [&](const ParamStore<double>& teacher) {
    ParamStore<double> ps = params.clone();
    Tape<double> tape;
    tape.backward(consistency_loss(model, ps, teacher.size() ? teacher : ps, items, grid, sched, adj, 0.00054, {}));
    std::vector<double> g;
    for (std::size_t i = 0; i < ps.size(); ++i)
      if (ps[i].has_grad()) g.insert(g.end(), ps[i].grad().begin(), ps[i].grad().end());
    return g;
  };
  EXPECT_EQ(grads(ParamStore<double>{}), grads(frozen));
}

TEST(Loss, ZeroWeightCellsDoNotAffectLoss) {
  const Model<double> model(micro_config());
  const auto ps = jittered(model, 51);
  Rng rng(52);
  Window w = random_window(4, 2, rng);
  w.observed[1] = 0;
  w.values[1] = 0.0;
  set_cond_mask(w, w.cond);
  const NoiseSchedule sched;
  const auto grid = sigma_grid(sched.with_n(10));
  Rng a(7), b(7);
  const double base = consistency_loss(model, ps, w, 2, grid, sched, ring_graph(2), a).item();
  // a raw-missing cell is neither input nor target, so its stored value is irrelevant
  Window changed = w;
  changed.values[1] = 123.0;
  EXPECT_EQ(consistency_loss(model, ps, changed, 2, grid, sched, ring_graph(2), b).item(), base);
}
