#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "fettl/metrics.hpp"
#include "fettl/rng.hpp"

using namespace fettl;

namespace {

Tensor mask(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({1, 1, n}, std::move(v));
}

// Two-sided p by enumerating all 2^n sign assignments of the observed ranks.
double brute_force_p(const std::vector<double>& x, const std::vector<double>& y) {
  std::vector<double> d;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] != y[i]) d.push_back(x[i] - y[i]);
  const std::size_t n = d.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return std::abs(d[a]) < std::abs(d[b]); });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = (i + j + 2) / 2.0;
    i = j + 1;
  }
  double wp = 0.0, total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    total += rank[i];
    if (d[i] > 0) wp += rank[i];
  }
  const double w = std::min(wp, total - wp);
  std::size_t le = 0;
  for (std::size_t m = 0; m < (1u << n); ++m) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      if (m >> i & 1u) s += rank[i];
    if (s <= w + 1e-9) ++le;
  }
  return std::min(1.0, 2.0 * static_cast<double>(le) / static_cast<double>(1u << n));
}

TEST(Dice, HandCounts) {
  EXPECT_EQ(dice(mask({1, 0, 1, 1}), mask({1, 0, 1, 1})), 1.0);
  EXPECT_EQ(dice(mask({1, 1, 0, 0}), mask({0, 0, 1, 1})), 0.0);
  EXPECT_EQ(dice(mask({1, 1, 0, 0}), mask({0, 1, 1, 0})), 0.5);
  EXPECT_EQ(dice(mask({0.2, 0.7, 0.5, 0.49}), mask({0, 1, 1, 0})), 1.0);
}

TEST(Dice, BothEmptyConvention) {
  EXPECT_EQ(dice(mask({0, 0}), mask({0, 0})), 1.0);
  EXPECT_EQ(dice(mask({0, 0}), mask({0, 0}), DiceOptions{0.5, 0.0}), 0.0);
}

TEST(Dice, Errors) {
  EXPECT_THROW(dice(mask({1, 0}), mask({1, 0, 0})), DimensionError);
  EXPECT_THROW(dice(mask({1, 0}), mask({0.5, 0})), InvalidInput);
}

TEST(Dice, SymmetricAndPermutationInvariant) {
  Rng rng = make_rng(1, "dice");
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> a(64), b(64);
    for (auto& v : a) v = bernoulli(rng, 0.3);
    for (auto& v : b) v = bernoulli(rng, 0.4);
    const double ab = dice(mask(a), mask(b));
    EXPECT_EQ(ab, dice(mask(b), mask(a)));
    std::vector<std::size_t> perm(64);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> pa(64), pb(64);
    for (std::size_t i = 0; i < 64; ++i) {
      pa[i] = a[perm[i]];
      pb[i] = b[perm[i]];
    }
    EXPECT_EQ(ab, dice(mask(pa), mask(pb)));
  }
}

TEST(Aupr, HandSweep) {
  EXPECT_EQ(aupr({0.9, 0.8, 0.7, 0.6}, {1, 0, 1, 0}), 5.0 / 6.0);
  EXPECT_DOUBLE_EQ(aupr({0.9, 0.8, 0.3, 0.1}, {1, 1, 0, 0}), 1.0);
}

TEST(Aupr, TiedScoresFormOnePoint) {
  const auto curve = pr_curve({0.5, 0.5, 0.5, 0.1}, {1, 0, 1, 0});
  ASSERT_EQ(curve.size(), 2u);
  EXPECT_DOUBLE_EQ(curve[0].precision, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(curve[0].recall, 1.0);
}

TEST(Aupr, RecallMonotoneAlongSweep) {
  Rng rng = make_rng(2, "pr");
  std::vector<double> s(200);
  std::vector<int> l(200);
  for (std::size_t i = 0; i < 200; ++i) {
    s[i] = std::round(uniform(rng, 0, 1) * 20) / 20;
    l[i] = bernoulli(rng, 0.3);
  }
  l[0] = 1;
  l[1] = 0;
  const auto curve = pr_curve(s, l);
  for (std::size_t i = 1; i < curve.size(); ++i) {
    EXPECT_LT(curve[i].threshold, curve[i - 1].threshold);
    EXPECT_GE(curve[i].recall, curve[i - 1].recall);
  }
  EXPECT_DOUBLE_EQ(curve.back().recall, 1.0);
}

TEST(Aupr, MonotoneTransformInvariance) {
  Rng rng = make_rng(3, "pr");
  std::vector<double> s(300), t(300);
  std::vector<int> l(300);
  for (std::size_t i = 0; i < 300; ++i) {
    s[i] = uniform(rng, -2, 2);
    t[i] = std::exp(3.0 * s[i]) + 1.0;
    l[i] = bernoulli(rng, 0.5 + 0.2 * std::tanh(s[i]));
  }
  EXPECT_DOUBLE_EQ(aupr(s, l), aupr(t, l));
}

TEST(Aupr, RandomScoresNearPrevalence) {
  Rng rng = make_rng(4, "pr");
  std::vector<double> s(10000);
  std::vector<int> l(10000);
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = uniform(rng, 0, 1);
    l[i] = bernoulli(rng, 0.3);
  }
  const double ap = aupr(s, l);
  EXPECT_GE(ap, 0.27);
  EXPECT_LE(ap, 0.33);
}

TEST(Aupr, SingleClassRejected) {
  EXPECT_THROW(aupr({0.1, 0.2}, {1, 1}), InvalidInput);
  EXPECT_THROW(aupr({0.1, 0.2}, {0, 0}), InvalidInput);
  EXPECT_THROW(aupr({0.1}, {0, 1}), DimensionError);
}

TEST(Wilcoxon, IdenticalSamplesDegenerate) {
  const std::vector<double> x{1, 2, 3, 4, 5, 6, 7};
  const auto r = wilcoxon_signed_rank(x, x);
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.p_value, 1.0);
}

TEST(Wilcoxon, ShiftByOne) {
  std::vector<double> y(10), x(10);
  for (int i = 0; i < 10; ++i) {
    y[i] = i * 0.37;
    x[i] = y[i] + 1.0;
  }
  const auto r = wilcoxon_signed_rank(x, y);
  EXPECT_EQ(r.w_minus, 0.0);
  EXPECT_EQ(r.n, 10u);
  EXPECT_NEAR(r.p_value, 2.0 / 1024.0, 1e-12);
  EXPECT_NEAR(brute_force_p(x, y), r.p_value, 1e-12);
  const auto sr = wilcoxon_signed_rank(x, y, 0);
  EXPECT_FALSE(sr.exact);
  EXPECT_NEAR(sr.p_value, r.p_value, 0.01);
}

TEST(Wilcoxon, NormalApproximationByHand) {
  // n = 10 without ties, W = 8: mu = 27.5, var = 96.25, z = (19.5 - 0.5) / sqrt(96.25).
  const double p = wilcoxon_normal_p(8.0, 10, std::vector<std::size_t>(10, 1));
  EXPECT_NEAR(p, std::erfc(19.0 / std::sqrt(96.25) / std::sqrt(2.0)), 1e-14);
}

TEST(Wilcoxon, ExactMatchesBruteForceWithTies) {
  Rng rng = make_rng(5, "wilcoxon");
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 6 + uniform_index(rng, 7);
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = std::round(uniform(rng, -3, 3) * 2) / 2;
      y[i] = std::round(uniform(rng, -3, 3) * 2) / 2;
    }
    std::size_t nonzero = 0;
    for (std::size_t i = 0; i < n; ++i) nonzero += x[i] != y[i];
    if (nonzero < 6) continue;
    const auto r = wilcoxon_signed_rank(x, y);
    EXPECT_NEAR(r.p_value, brute_force_p(x, y), 1e-12);
    EXPECT_GT(r.p_value, 0.0);
    EXPECT_LE(r.p_value, 1.0);
    EXPECT_EQ(r.p_value, wilcoxon_signed_rank(y, x).p_value);
  }
}

TEST(Wilcoxon, Errors) {
  EXPECT_THROW(wilcoxon_signed_rank({1, 2, 3}, {1, 2}), DimensionError);
  EXPECT_THROW(wilcoxon_signed_rank({1, 2, 3, 4, 5, 6}, {0, 2, 3, 4, 5, 6}), InvalidInput);
}

TEST(Compactness, SeparatedConstantSites) {
  StylePoints pts{{"a", {{0, 0, 0}, {0, 0, 0}}}, {"b", {{1, 1, 1}, {1, 1, 1}}}};
  EXPECT_EQ(within_total_ratio(pts), 0.0);
  EXPECT_EQ(cluster_compactness(pts), 1.0);
}

TEST(Compactness, AllPointsEqualIsZero) {
  StylePoints pts{{"a", {{1, 2, 3}, {1, 2, 3}}}, {"b", {{1, 2, 3}, {1, 2, 3}}}};
  EXPECT_EQ(within_total_ratio(pts), 0.0);
  EXPECT_EQ(cluster_compactness(pts), 0.0);
}

TEST(Compactness, SharedDistributionRatioNearOne) {
  Rng rng = make_rng(6, "compact");
  StylePoints pts;
  for (const char* s : {"a", "b", "c"})
    for (int i = 0; i < 2000; ++i) pts[s].push_back({normal(rng), normal(rng), normal(rng)});
  EXPECT_GT(within_total_ratio(pts), 0.99);
  EXPECT_LT(cluster_compactness(pts), 0.01);
  EXPECT_NEAR(within_total_ratio(pts) + cluster_compactness(pts), 1.0, 1e-12);
}

TEST(Compactness, Preconditions) {
  EXPECT_THROW(cluster_compactness({{"a", {{0, 0, 0}, {1, 1, 1}}}}), InvalidInput);
  EXPECT_THROW(cluster_compactness({{"a", {{0, 0, 0}}}, {"b", {{0, 0, 0}, {1, 1, 1}}}}), InvalidInput);
}

TEST(RunReport, KeysUniqueValuesFinite) {
  RunReport r;
  r.add(0, "A", "val", "dice", 0.5);
  EXPECT_THROW(r.add(0, "A", "val", "dice", 0.6), ContractError);
  EXPECT_THROW(r.add(1, "A", "val", "dice", std::nan("")), NumericError);
  EXPECT_EQ(r.value(0, "A", "val", "dice"), 0.5);
  EXPECT_THROW(r.value(3, "A", "val", "dice"), ContractError);
}

TEST(RunReport, JsonRoundTripAndCsv) {
  RunReport r;
  r.config_digest = "abc";
  r.strategy = "fettl";
  r.task = "segmentation";
  r.seed = 7;
  r.selected_round = 2;
  r.add(2, "A", "val", "dice", 0.25);
  r.final_test["A"]["dice"] = 0.75;
  r.final_test["B"]["dice"] = 0.25;
  r.image_scores.push_back({"A", 3, 0.5});
  r.summary["mean_site_test_dice"] = 0.5;
  const auto j = r.to_json();
  const RunReport back = RunReport::from_json(j);
  EXPECT_EQ(back.to_json().dump(), j.dump());
  EXPECT_EQ(r.to_csv(), "site,dice\nA,0.75\nB,0.25\nmean,0.5\n");
}

}  // namespace
