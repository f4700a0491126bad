#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "costi/csv.hpp"
#include "costi/data.hpp"

using namespace costi;
namespace fs = std::filesystem;

namespace {

Window full_window(std::size_t steps, std::size_t nodes, Rng& rng, double missing = 0.0) {
  Window w;
  w.dims = Dims{steps, nodes, 1};
  w.values.resize(w.dims.size());
  w.observed.resize(w.dims.size());
  for (std::size_t i = 0; i < w.values.size(); ++i) {
    w.observed[i] = rng.uniform() >= missing;
    w.values[i] = w.observed[i] ? rng.normal() : 0.0;
  }
  w.cond = w.observed;
  w.eval.assign(w.dims.size(), 0);
  return w;
}

void expect_mask_invariants(const Window& w) {
  for (std::size_t i = 0; i < w.observed.size(); ++i) {
    ASSERT_LE(w.cond[i], w.observed[i]);
    ASSERT_EQ(w.eval[i], static_cast<std::uint8_t>(w.observed[i] && !w.cond[i]));
  }
}

fs::path temp_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("costi_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

double pearson(const Dataset& ds, std::size_t a, std::size_t b) {
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  const double n = static_cast<double>(ds.dims.steps);
  for (std::size_t t = 0; t < ds.dims.steps; ++t) {
    const double x = ds.values[ds.dims.index(t, a, 0)], y = ds.values[ds.dims.index(t, b, 0)];
    sx += x, sy += y, sxx += x * x, syy += y * y, sxy += x * y;
  }
  return (sxy - sx * sy / n) / std::sqrt((sxx - sx * sx / n) * (syy - sy * sy / n));
}

}  // namespace

TEST(Masking, InvariantsHoldForAllStrategies) {
  Rng rng(1);
  std::vector<Mask> bank;
  for (int i = 0; i < 20; ++i) bank.push_back(full_window(12, 4, rng, 0.3).observed);
  for (auto s : {MaskStrategy::point, MaskStrategy::block_hybrid, MaskStrategy::historical_hybrid}) {
    for (int i = 0; i < 10000; ++i) {
      Window w = full_window(12, 4, rng, 0.1);
      apply_mask_strategy(w, s, bank, rng);
      expect_mask_invariants(w);
    }
  }
}

TEST(Masking, PointHidesExactFraction) {
  Rng rng(2);
  Mask observed(1000, 1);
  for (int i = 0; i < 100; ++i) observed[static_cast<std::size_t>(i * 7)] = 0;
  const Mask m = mask_point(observed, 0.25, 0.25, rng);
  EXPECT_EQ(count_set(m), 900u - 225u);
  for (std::size_t i = 0; i < m.size(); ++i) EXPECT_LE(m[i], observed[i]);
  EXPECT_EQ(count_set(mask_point(observed, 0.0, 0.0, rng)), 900u);
  EXPECT_EQ(count_set(mask_point(observed, 1.0, 1.0, rng)), 0u);
}

TEST(Masking, PointRateIsUniformOverRange) {
  Rng rng(3);
  const Mask observed(400, 1);
  double total = 0;
  const int trials = 4000;
  for (int i = 0; i < trials; ++i) total += 1.0 - count_set(mask_point(observed, 0.0, 1.0, rng)) / 400.0;
  EXPECT_NEAR(total / trials, 0.5, 0.02);
}

TEST(Masking, BlockHidesContiguousRuns) {
  Rng rng(4);
  const Dims d{24, 1, 1};
  const Mask observed(24, 1);
  BlockMaskConfig cfg;
  cfg.fail_prob_lo = cfg.fail_prob_hi = 1.0;
  cfg.extra_point = 0.0;
  for (int i = 0; i < 200; ++i) {
    const Mask m = mask_block(observed, d, cfg, rng);
    std::size_t first = 24, last = 0, hidden = 0;
    for (std::size_t t = 0; t < 24; ++t)
      if (!m[t]) first = std::min(first, t), last = std::max(last, t), ++hidden;
    ASSERT_GE(hidden, 12u);
    ASSERT_EQ(last - first + 1, hidden);
  }
}

TEST(Masking, HistoricalIntersectsPattern) {
  Rng rng(5);
  const Mask observed{1, 1, 0, 1};
  const std::vector<Mask> bank{{1, 0, 1, 1}};
  EXPECT_EQ(mask_historical(observed, bank, rng), (Mask{1, 0, 0, 1}));
  EXPECT_THROW(mask_historical(observed, {}, rng), std::invalid_argument);
  EXPECT_THROW(mask_historical(observed, {{1, 0}}, rng), std::invalid_argument);
}

TEST(Masking, OutageProducesLongGaps) {
  Rng rng(6);
  const Dims d{2000, 4, 1};
  const Mask observed(d.size(), 1);
  OutageMaskConfig cfg;
  cfg.point_rate = 0.0;
  const Mask m = mask_outage(observed, d, cfg, rng);
  const double missing = 1.0 - static_cast<double>(count_set(m)) / static_cast<double>(m.size());
  EXPECT_GT(missing, 0.01);
  EXPECT_LT(missing, 0.2);
}

TEST(Masking, CondMaskSizeMismatchIsAnError) {
  Rng rng(7);
  Window w = full_window(4, 2, rng);
  EXPECT_THROW(set_cond_mask(w, Mask(3, 1)), std::invalid_argument);
  EXPECT_THROW(parse_mask_strategy("random"), std::invalid_argument);
}

TEST(LinearInterpolate, FillsGapsAndKeepsVisible) {
  const Dims d{5, 1, 1};
  const std::vector<double> v{1, 0, 0, 4, 0};
  const Mask vis{1, 0, 0, 1, 0};
  EXPECT_EQ(linear_interpolate(v, vis, d), (std::vector<double>{1, 2, 3, 4, 4}));
  const Mask lead{0, 0, 1, 0, 0};
  EXPECT_EQ(linear_interpolate({0, 0, 7, 0, 0}, lead, d), (std::vector<double>{7, 7, 7, 7, 7}));
  EXPECT_EQ(linear_interpolate({0, 0, 0, 0, 0}, Mask(5, 0), d), (std::vector<double>(5, 0.0)));
}

TEST(Windowize, CountsAndContents) {
  const Dataset ds = synth_dataset(3, 48, 1);
  const auto w = windowize(ds, 24, 24);
  ASSERT_EQ(w.size(), 2u);
  EXPECT_EQ(w[1].start, 24u);
  EXPECT_EQ(w[1].values[0], ds.values[ds.dims.index(24, 0, 0)]);
  EXPECT_EQ(windowize(ds, 24, 1).size(), 25u);
  EXPECT_EQ(windowize(ds, 49, 1).size(), 0u);
  EXPECT_THROW(windowize(ds, 0, 1), std::invalid_argument);
}

TEST(Normalizer, StandardizesTrainingRowsAndInverts) {
  const Dataset ds = synth_dataset(4, 500, 2);
  const auto z = Normalizer::fit(ds, 350);
  for (std::size_t n = 0; n < 4; ++n) {
    double s = 0, ss = 0;
    for (std::size_t t = 0; t < 350; ++t) {
      const double x = (ds.values[ds.dims.index(t, n, 0)] - z.mean[n]) / z.std[n];
      s += x, ss += x * x;
    }
    EXPECT_NEAR(s / 350, 0.0, 1e-9);
    EXPECT_NEAR(ss / 350, 1.0, 1e-9);
  }
  const auto w = windowize(ds, 24, 24)[3];
  const auto back = z.invert(z.apply(w).values);
  for (std::size_t i = 0; i < back.size(); ++i) EXPECT_NEAR(back[i], w.values[i], 1e-9);
}

TEST(Synth, ShapeDeterminismAndGraph) {
  const Dataset a = synth_dataset(8, 300, 5), b = synth_dataset(8, 300, 5), c = synth_dataset(8, 300, 6);
  EXPECT_EQ(a.dims, (Dims{300, 8, 1}));
  EXPECT_EQ(a.values, b.values);
  EXPECT_NE(a.values, c.values);
  EXPECT_EQ(count_set(a.mask), a.dims.size());
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(a.graph.at(i, i), 0.0);
    EXPECT_GT(a.graph.at(i, (i + 1) % 8), 0.0);
    for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(a.graph.at(i, j), a.graph.at(j, i));
  }
  EXPECT_EQ(a.split.train_end, 210u);
  EXPECT_EQ(a.split.val_end, 240u);
}

TEST(Synth, NeighboursMoreCorrelatedAndBounded) {
  const Dataset ds = synth_dataset(8, 2000, 0);
  EXPECT_GT(pearson(ds, 0, 1), pearson(ds, 0, 4));
  EXPECT_GT(pearson(ds, 3, 4), pearson(ds, 3, 7));
  const SynthConfig cfg;
  const double bound = 1.5 * cfg.amplitude + 6.0 * cfg.noise_std * std::sqrt(3.0);
  for (std::size_t t = 0; t < ds.dims.steps; ++t)
    for (std::size_t n = 0; n < 8; ++n)
      EXPECT_LE(std::fabs(ds.values[ds.dims.index(t, n, 0)] - (10.0 + 0.5 * static_cast<double>(n))), bound);
}

TEST(Adjacency, GaussianKernelValues) {
  const auto g = adjacency_gaussian(ring_distances(5), 5, 0.1, 2.0);
  EXPECT_NEAR(g.at(0, 1), 0.7788007831, 1e-10);
  EXPECT_NEAR(g.at(0, 2), 0.3678794412, 1e-10);
  EXPECT_EQ(g.at(0, 0), 0.0);
  const auto sparse = adjacency_gaussian(ring_distances(5), 5, 0.5, 2.0);
  EXPECT_EQ(sparse.at(0, 2), 0.0);
  EXPECT_THROW(adjacency_gaussian({0, 1}, 2, 0.1, 1.0), std::invalid_argument);
}

TEST(Adjacency, CorrelationIsSymmetricAndBounded) {
  const Dataset ds = synth_dataset(5, 400, 3);
  const auto g = adjacency_correlation(ds.values, ds.mask, ds.dims);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      EXPECT_EQ(g.at(i, j), g.at(j, i));
      EXPECT_GE(g.at(i, j), 0.0);
      EXPECT_LE(g.at(i, j), 1.0);
    }
  EXPECT_NEAR(g.at(0, 1), std::fabs(pearson(ds, 0, 1)), 1e-9);
}

TEST(Csv, RoundTripSmallTable) {
  const auto dir = temp_dir("roundtrip");
  write_text(dir / "v.csv", "a,b\n1.5,2\n,4\n5,-6e-3\n");
  write_text(dir / "adj.csv", "0,1\n1,0\n");
  const Dataset ds = load_csv((dir / "v.csv").string(), std::nullopt, (dir / "adj.csv").string());
  EXPECT_EQ(ds.dims, (Dims{3, 2, 1}));
  EXPECT_EQ(ds.graph.labels, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(ds.mask, (Mask{1, 1, 0, 1, 1, 1}));
  EXPECT_EQ(ds.values, (std::vector<double>{1.5, 2, 0, 4, 5, -6e-3}));
  EXPECT_EQ(ds.graph.at(0, 1), 1.0);

  save_csv(ds, (dir / "out").string());
  const Dataset back = load_csv((dir / "out" / "values.csv").string(), (dir / "out" / "mask.csv").string(),
                                (dir / "out" / "adjacency.csv").string());
  EXPECT_EQ(back.values, ds.values);
  EXPECT_EQ(back.mask, ds.mask);
  EXPECT_EQ(back.graph.adjacency, ds.graph.adjacency);
  EXPECT_EQ(back.graph.labels, ds.graph.labels);
}

TEST(Csv, SynthRoundTripIsExact) {
  const auto dir = temp_dir("synth");
  const Dataset ds = synth_dataset(4, 60, 9);
  save_csv(ds, dir.string());
  const Dataset back = load_csv((dir / "values.csv").string(), (dir / "mask.csv").string(),
                                (dir / "adjacency.csv").string());
  EXPECT_EQ(back.values, ds.values);
  EXPECT_EQ(back.graph.adjacency, ds.graph.adjacency);
}

TEST(Csv, MaskZeroHidesValueAndErrorsAreReported) {
  const auto dir = temp_dir("errors");
  write_text(dir / "v.csv", "a,b\n1,2\n3,4\n");
  write_text(dir / "m.csv", "a,b\n1,0\n1,1\n");
  const Dataset ds = load_csv((dir / "v.csv").string(), (dir / "m.csv").string());
  EXPECT_EQ(ds.mask, (Mask{1, 0, 1, 1}));
  EXPECT_EQ(ds.values[1], 0.0);
  EXPECT_EQ(ds.graph.adjacency, std::vector<double>(4, 0.0));

  write_text(dir / "short.csv", "a,b\n1,1\n");
  EXPECT_THROW(load_csv((dir / "v.csv").string(), (dir / "short.csv").string()), DataError);
  write_text(dir / "bad.csv", "a,b\n1,x\n3,4\n");
  try {
    load_csv((dir / "bad.csv").string());
    FAIL() << "expected a data error";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("row 2, column 2"), std::string::npos);
  }
  write_text(dir / "ragged.csv", "a,b\n1,2,3\n");
  EXPECT_THROW(load_csv((dir / "ragged.csv").string()), DataError);
  write_text(dir / "m2.csv", "a,b\n1,2\n1,1\n");
  EXPECT_THROW(load_csv((dir / "v.csv").string(), (dir / "m2.csv").string()), DataError);
  write_text(dir / "adj.csv", "0,1,1\n1,0,1\n");
  EXPECT_THROW(load_csv((dir / "v.csv").string(), std::nullopt, (dir / "adj.csv").string()), DataError);
  EXPECT_THROW(load_csv((dir / "missing.csv").string()), DataError);
}

TEST(Csv, MultiChannelFiles) {
  const auto dir = temp_dir("multi");
  write_text(dir / "values_c0.csv", "a\n1\n2\n");
  write_text(dir / "values_c1.csv", "a\n\n10\n");
  const Dataset ds = load_csv((dir / "values.csv").string());
  EXPECT_EQ(ds.dims, (Dims{2, 1, 2}));
  EXPECT_EQ(ds.values, (std::vector<double>{1, 0, 2, 10}));
  EXPECT_EQ(ds.mask, (Mask{1, 0, 1, 1}));
}
