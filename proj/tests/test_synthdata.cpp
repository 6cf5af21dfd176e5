#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "fettl/metrics.hpp"
#include "fettl/synthdata.hpp"

using namespace fettl;

namespace {

Tensor gray(std::size_t n, double v) { return Tensor({3, n, n}, v); }

SiteStyle test_style() {
  Rng rng = make_rng(3, "test-style");
  return random_style(rng);
}

TEST(Style, IdentityIsExact) {
  Rng rng = make_rng(1, "content");
  const Tensor img = seg_content(16, rng).first;
  EXPECT_TRUE(apply_style(img, SiteStyle::identity(), 5) == img);
}

TEST(Style, GainTwoOnGray) {
  SiteStyle s;
  s.channel_gain = {2.0, 2.0, 2.0};
  const Tensor out = apply_style(gray(4, 0.4), s, 0);
  for (double v : out.data()) EXPECT_NEAR(v, 0.8, 1e-15);
}

TEST(Style, OnesSaturateUnderGain) {
  Rng rng = make_rng(2, "gain");
  for (int k = 0; k < 20; ++k) {
    SiteStyle s;
    for (auto& g : s.channel_gain) g = uniform(rng, 1.0, 1.6);
    EXPECT_TRUE(apply_style(gray(4, 1.0), s, 0) == gray(4, 1.0));
  }
}

TEST(Style, OutputStaysInUnitRange) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng = make_rng(seed, "range");
    const SiteStyle s = random_style(rng);
    const Tensor out = apply_style(seg_content(16, rng).first, s, seed);
    for (double v : out.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Style, RejectsOutOfRangeInput) {
  Tensor img = gray(4, 0.5);
  img[3] = 1.5;
  EXPECT_THROW(apply_style(img, SiteStyle::identity(), 0), InvalidInput);
  EXPECT_THROW(apply_style(Tensor({1, 4, 4}), SiteStyle::identity(), 0), DimensionError);
}

TEST(Style, HsvRoundTrip) {
  Rng rng = make_rng(4, "hsv");
  for (int k = 0; k < 200; ++k) {
    const double r = uniform(rng, 0, 1), g = uniform(rng, 0, 1), b = uniform(rng, 0, 1);
    const auto hsv = rgb_to_hsv(r, g, b);
    const auto rgb = hsv_to_rgb(hsv[0], hsv[1], hsv[2]);
    EXPECT_NEAR(rgb[0], r, 1e-12);
    EXPECT_NEAR(rgb[1], g, 1e-12);
    EXPECT_NEAR(rgb[2], b, 1e-12);
  }
}

TEST(SegSite, DeterministicAndSplitDisjoint) {
  const auto a = gen_seg_site("A", 23, 16, test_style(), 7);
  const auto b = gen_seg_site("A", 23, 16, test_style(), 7);
  ASSERT_EQ(a.size(), 23u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(a.images[i] == b.images[i]);
    EXPECT_TRUE(a.masks[i] == b.masks[i]);
  }
  std::set<std::size_t> all;
  for (const auto* v : {&a.split.train, &a.split.val, &a.split.test})
    for (std::size_t i : *v) EXPECT_TRUE(all.insert(i).second) << "index " << i << " in two splits";
  EXPECT_EQ(all.size(), 23u);
  EXPECT_EQ(a.split.val.size(), 5u);
  EXPECT_EQ(a.split.test.size(), 5u);
  EXPECT_FALSE(gen_seg_site("B", 23, 16, test_style(), 7).images[0] == a.images[0]);
}

TEST(SegSite, MaskForegroundBounds) {
  for (std::size_t size : {16u, 32u}) {
    const auto d = gen_seg_site("A", 200, size, SiteStyle::identity(), 9);
    for (const auto& m : d.masks) {
      double fg = 0.0;
      for (double v : m.data()) {
        EXPECT_TRUE(v == 0.0 || v == 1.0);
        fg += v;
      }
      fg /= static_cast<double>(m.numel());
      EXPECT_GE(fg, 0.02);
      EXPECT_LE(fg, 0.30);
    }
  }
}

TEST(SegSite, StyleNeverTouchesMasks) {
  Rng rng = make_rng(5, "styles");
  const auto a = gen_seg_site("A", 12, 16, random_style(rng), 2);
  const auto b = gen_seg_site("A", 12, 16, random_style(rng), 2);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_FALSE(a.images[i] == b.images[i]);
    EXPECT_EQ(dice(a.masks[i], b.masks[i]), 1.0);
  }
}

TEST(SegSite, Errors) {
  EXPECT_THROW(gen_seg_site("A", 2, 16, SiteStyle::identity(), 0), InvalidInput);
  EXPECT_THROW(gen_seg_site("A", 10, 18, SiteStyle::identity(), 0), InvalidInput);
}

TEST(ClfSite, ExactBalance) {
  const auto d = gen_clf_site("X", 100, 16, SiteStyle::identity(), 0.5, 3);
  EXPECT_EQ(std::count(d.labels.begin(), d.labels.end(), 1), 50);
  const auto e = gen_clf_site("X", 100, 16, SiteStyle::identity(), 0.3, 3);
  EXPECT_EQ(std::count(e.labels.begin(), e.labels.end(), 1), 30);
  EXPECT_THROW(gen_clf_site("X", 3, 16, SiteStyle::identity(), 0.5, 3), InvalidInput);
  EXPECT_THROW(gen_clf_site("X", 10, 16, SiteStyle::identity(), 1.0, 3), InvalidInput);
}

// Leave-one-out 3-NN on raw pixels within one styled site.
TEST(ClfSite, ThreeNearestNeighbourOracle) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto d = gen_clf_site("X", 120, 32, test_style(), 0.4, seed);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      std::vector<std::pair<double, int>> dist;
      for (std::size_t j = 0; j < d.size(); ++j) {
        if (j == i) continue;
        double s = 0.0;
        for (std::size_t k = 0; k < d.images[i].numel(); ++k) {
          const double diff = d.images[i][k] - d.images[j][k];
          s += diff * diff;
        }
        dist.emplace_back(s, d.labels[j]);
      }
      std::partial_sort(dist.begin(), dist.begin() + 3, dist.end());
      const int votes = dist[0].second + dist[1].second + dist[2].second;
      correct += (votes >= 2 ? 1 : 0) == d.labels[i];
    }
    EXPECT_GE(static_cast<double>(correct) / d.size(), 0.9) << "seed " << seed;
  }
}

TEST(SiteStyles, NonIidCertificate) {
  const std::vector<std::string> sites{"A", "B", "C", "D", "E"};
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto styles = draw_site_styles(TaskKind::segmentation, sites, 32, seed);
    std::vector<StyleSample> stats;
    for (std::size_t k = 0; k < sites.size(); ++k) {
      const auto d = gen_seg_site(sites[k], 40, 32, styles[k], seed);
      stats.push_back(style_statistics(d.images));
    }
    for (std::size_t a = 0; a < sites.size(); ++a)
      for (std::size_t b = a + 1; b < sites.size(); ++b) {
        double best = 0.0;
        for (int c = 0; c < 3; ++c)
          best = std::max(best, std::abs(stats[a].mean[c] - stats[b].mean[c]) / std::max(stats[a].sd[c], stats[b].sd[c]));
        EXPECT_GE(best, 3.0) << sites[a] << " vs " << sites[b] << " seed " << seed;
      }
    EXPECT_EQ(style_to_json(styles[0]), style_to_json(draw_site_styles(TaskKind::segmentation, sites, 32, seed)[0]));
  }
}

TEST(Augment, DeterministicAndPaired) {
  const auto d = gen_seg_site("A", 6, 16, test_style(), 1);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto a = augment(d.images[0], d.masks[0], seed);
    const auto b = augment(d.images[0], d.masks[0], seed);
    EXPECT_TRUE(a.image == b.image);
    ASSERT_TRUE(a.mask.has_value());
    EXPECT_TRUE(*a.mask == *b.mask);
    for (double v : a.mask->data()) EXPECT_TRUE(v == 0.0 || v == 1.0);
  }
}

TEST(Augment, FlipConsistency) {
  const auto d = gen_seg_site("A", 4, 16, test_style(), 1);
  // The image is the mask itself, so after any geometric step the bright
  // pixels must still coincide with the moved mask.
  Tensor as_image({3, 16, 16});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 256; ++i) as_image[c * 256 + i] = d.masks[1][i] * 0.5 + 0.25;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto a = augment(as_image, d.masks[1], seed);
    double in = 0.0, out = 0.0, nin = 0.0, nout = 0.0;
    for (std::size_t i = 0; i < 256; ++i) {
      if ((*a.mask)[i] > 0.5) {
        in += a.image[i];
        ++nin;
      } else {
        out += a.image[i];
        ++nout;
      }
    }
    ASSERT_GT(nin, 0.0);
    ASSERT_GT(nout, 0.0);
    EXPECT_GT(in / nin, out / nout + 0.2) << "seed " << seed;
  }
}

// A bright left column lands on the right after a horizontal flip, and on
// the top after a flip followed by the quarter turn.
TEST(Augment, HorizontalFlipFrequency) {
  Tensor img({3, 8, 8}, 0.0);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t c = 0; c < 3; ++c) img[(c * 8 + y) * 8] = 1.0;
  const std::size_t draws = 10000;
  std::size_t flips = 0;
  for (std::size_t s = 0; s < draws; ++s) {
    const auto a = augment(img, std::nullopt, s);
    double left = 0.0, right = 0.0, top = 0.0, bottom = 0.0;
    for (std::size_t i = 0; i < 8; ++i) {
      left += a.image[i * 8];
      right += a.image[i * 8 + 7];
      top += a.image[i];
      bottom += a.image[56 + i];
    }
    const double edge = std::max({left, right, top, bottom});
    flips += edge == right || edge == top;
  }
  const double f = static_cast<double>(flips) / draws;
  EXPECT_GE(f, 0.47);
  EXPECT_LE(f, 0.53);
}

TEST(Persistence, SaveLoadRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "fettl_synth_roundtrip";
  std::filesystem::remove_all(dir);
  std::vector<SiteDataset> sites{gen_seg_site("A", 9, 16, test_style(), 4),
                                 gen_clf_site("X", 10, 16, test_style(), 0.4, 4)};
  save_datasets(dir, sites);
  const auto back = load_datasets(dir);
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_EQ(back[k].site_id, sites[k].site_id);
    EXPECT_EQ(back[k].labels, sites[k].labels);
    EXPECT_EQ(back[k].split.test, sites[k].split.test);
    EXPECT_EQ(style_to_json(back[k].style), style_to_json(sites[k].style));
    for (std::size_t i = 0; i < sites[k].size(); ++i) EXPECT_TRUE(back[k].images[i] == sites[k].images[i]);
  }
  // Corrupt one byte: the digest check catches it.
  {
    std::fstream f(dir / "A" / "images.f64", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(100);
    f.put('\x7f');
  }
  EXPECT_THROW(load_datasets(dir), IoError);
  std::filesystem::remove_all(dir);
  EXPECT_THROW(load_datasets(dir), IoError);
}

TEST(PretrainPool, DisjointFromSites) {
  const auto pool = gen_pretrain_pool(TaskKind::segmentation, 10, 16, 0);
  const auto site = gen_seg_site("A", 10, 16, test_style(), 0);
  EXPECT_EQ(pool.size(), 10u);
  for (const auto& p : pool)
    for (const auto& q : site.images) EXPECT_FALSE(p == q);
}

}  // namespace
