#pragma once

// Synthetic multi-site datasets: shared content, site-specific acquisition style.
//
// Content (disc geometry, textures, labels) is drawn from streams keyed by
// (seed, site, image index); style is applied afterwards, to images only.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "fettl/paramset.hpp"
#include "fettl/rng.hpp"
#include "fettl/tensor.hpp"

namespace fettl {

enum class TaskKind { segmentation, classification };

inline const char* to_string(TaskKind t) { return t == TaskKind::segmentation ? "segmentation" : "classification"; }

inline TaskKind parse_task(const std::string& s) {
  if (s == "segmentation") return TaskKind::segmentation;
  if (s == "classification") return TaskKind::classification;
  throw ConfigError("unknown task '" + s + "' (expected segmentation or classification)");
}

struct SiteStyle {
  std::array<double, 3> channel_gain{1.0, 1.0, 1.0};
  std::array<double, 3> channel_bias{0.0, 0.0, 0.0};
  double gamma = 1.0;
  double hue_rotation = 0.0;  // degrees
  double noise_sigma = 0.0;

  static SiteStyle identity() { return {}; }
};

inline SiteStyle random_style(Rng& rng) {
  SiteStyle s;
  for (auto& g : s.channel_gain) g = uniform(rng, 0.5, 1.6);
  for (auto& b : s.channel_bias) b = uniform(rng, -0.25, 0.25);
  s.gamma = uniform(rng, 0.6, 1.7);
  s.hue_rotation = uniform(rng, -90.0, 90.0);
  s.noise_sigma = uniform(rng, 0.0, 0.03);
  return s;
}

struct Split {
  std::vector<std::size_t> train, val, test;
};

struct SiteDataset {
  std::string site_id;
  TaskKind task = TaskKind::segmentation;
  std::size_t image_size = 0;
  std::uint64_t seed = 0;
  SiteStyle style;
  std::vector<Tensor> images;  // 3×H×W in [0,1]
  std::vector<Tensor> masks;   // 1×H×W in {0,1}; segmentation only
  std::vector<int> labels;     // classification only
  Split split;

  std::size_t size() const { return images.size(); }
};

// ---------------------------------------------------------------------------
// Colour space (hexcone model, all components in [0,1])

inline std::array<double, 3> rgb_to_hsv(double r, double g, double b) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const double d = mx - mn;
  double h = 0.0;
  if (d > 0.0) {
    if (mx == r) {
      h = std::fmod((g - b) / d, 6.0);
    } else if (mx == g) {
      h = (b - r) / d + 2.0;
    } else {
      h = (r - g) / d + 4.0;
    }
    h /= 6.0;
    if (h < 0.0) h += 1.0;
  }
  const double s = mx > 0.0 ? d / mx : 0.0;
  return {h, s, mx};
}

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  const double m = v - c;
  return {r + m, g + m, b + m};
}

// Per-channel means of the HSV representation of a 3×H×W image.
inline std::array<double, 3> hsv_mean(const Tensor& img) {
  const std::size_t hw = img.dim(1) * img.dim(2);
  std::array<double, 3> acc{0, 0, 0};
  for (std::size_t i = 0; i < hw; ++i) {
    const auto hsv = rgb_to_hsv(img[i], img[hw + i], img[2 * hw + i]);
    for (int c = 0; c < 3; ++c) acc[c] += hsv[c];
  }
  for (double& a : acc) a /= static_cast<double>(hw);
  return acc;
}

// ---------------------------------------------------------------------------
// Style

namespace detail {
inline void check_unit_image(const Tensor& img, const char* who) {
  if (img.rank() != 3 || img.dim(0) != 3)
    throw DimensionError(std::string(who) + ": expected 3×H×W, got " + shape_str(img.shape()));
  for (double v : img.data())
    if (!(v >= 0.0 && v <= 1.0)) throw InvalidInput(std::string(who) + ": pixel value " + std::to_string(v) + " outside [0,1]");
}
}  // namespace detail

// Affine, gamma, hue rotation, noise, clamp. The affine result is clamped
// before the gamma curve so the power is always taken of a non-negative value.
inline Tensor apply_style(const Tensor& img, const SiteStyle& st, std::uint64_t seed) {
  detail::check_unit_image(img, "apply_style");
  const std::size_t hw = img.dim(1) * img.dim(2);
  Tensor out(img.shape());
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < hw; ++i) {
      double v = st.channel_gain[c] * img[c * hw + i] + st.channel_bias[c];
      v = std::clamp(v, 0.0, 1.0);
      if (st.gamma != 1.0) v = std::pow(v, st.gamma);
      out[c * hw + i] = v;
    }
  if (st.hue_rotation != 0.0) {
    const double shift = st.hue_rotation / 360.0;
    for (std::size_t i = 0; i < hw; ++i) {
      auto hsv = rgb_to_hsv(out[i], out[hw + i], out[2 * hw + i]);
      const auto rgb = hsv_to_rgb(hsv[0] + shift, hsv[1], hsv[2]);
      for (std::size_t c = 0; c < 3; ++c) out[c * hw + i] = rgb[c];
    }
  }
  if (st.noise_sigma > 0.0) {
    Rng rng = make_rng(seed, "style-noise");
    for (double& v : out.data()) v += normal(rng, 0.0, st.noise_sigma);
  }
  for (double& v : out.data()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Content generators

namespace detail {

// Smooth random field in roughly [-1, 1]: a few low-frequency sinusoids.
inline std::vector<double> smooth_field(std::size_t n, Rng& rng, int waves, double max_freq) {
  std::vector<double> f(n * n, 0.0);
  for (int k = 0; k < waves; ++k) {
    const double fx = uniform(rng, -max_freq, max_freq), fy = uniform(rng, -max_freq, max_freq);
    const double ph = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x)
        f[y * n + x] += std::sin(2.0 * std::numbers::pi * (fx * x + fy * y) / static_cast<double>(n) + ph) / waves;
  }
  return f;
}

inline Split make_split(std::size_t n, std::uint64_t seed, const std::string& site) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng = make_rng(seed, "split", site);
  std::shuffle(idx.begin(), idx.end(), rng);
  const std::size_t n_val = std::max<std::size_t>(1, n / 4);
  const std::size_t n_test = std::max<std::size_t>(1, n / 4);
  Split s;
  s.val.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.begin() + static_cast<std::ptrdiff_t>(n_val + n_test));
  s.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_val + n_test), idx.end());
  for (auto* v : {&s.train, &s.val, &s.test}) std::sort(v->begin(), v->end());
  return s;
}

}  // namespace detail

// Fundus-like scene: reddish background with vessels and pale distractor
// spots, plus a bright yellowish elliptical disc whose interior is the mask.
inline std::pair<Tensor, Tensor> seg_content(std::size_t size, Rng& rng) {
  const std::size_t n = size;
  Tensor img({3, n, n}), mask({1, n, n});
  const auto field = detail::smooth_field(n, rng, 3, 2.0);
  const std::array<double, 3> base{uniform(rng, 0.55, 0.7), uniform(rng, 0.22, 0.32), uniform(rng, 0.08, 0.16)};
  const std::array<double, 3> disc{uniform(rng, 0.85, 0.95), uniform(rng, 0.7, 0.82), uniform(rng, 0.35, 0.5)};
  const std::array<double, 3> spot{uniform(rng, 0.85, 0.95), uniform(rng, 0.45, 0.55), uniform(rng, 0.5, 0.65)};
  const double fn = static_cast<double>(n);

  double cx = 0, cy = 0, ra = 0, rb = 0, th = 0;
  std::size_t fg = 0;
  for (int attempt = 0;; ++attempt) {
    ra = uniform(rng, 0.12, 0.25) * fn;
    rb = uniform(rng, 0.12, 0.25) * fn;
    cx = uniform(rng, 0.3, 0.7) * fn;
    cy = uniform(rng, 0.3, 0.7) * fn;
    th = uniform(rng, 0.0, std::numbers::pi);
    fg = 0;
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        const double u = (dx * std::cos(th) + dy * std::sin(th)) / ra;
        const double v = (-dx * std::sin(th) + dy * std::cos(th)) / rb;
        const bool in = u * u + v * v <= 1.0;
        mask[y * n + x] = in ? 1.0 : 0.0;
        fg += in;
      }
    const double frac = static_cast<double>(fg) / (fn * fn);
    if (frac >= 0.02 && frac <= 0.30) break;
    if (attempt > 100) throw NumericError("seg_content: cannot place disc");
  }

  // Two distractor spots away from the disc.
  std::array<std::array<double, 3>, 2> spots{};
  for (auto& s : spots) {
    for (int attempt = 0; attempt < 50; ++attempt) {
      s = {uniform(rng, 0.1, 0.9) * fn, uniform(rng, 0.1, 0.9) * fn, uniform(rng, 0.06, 0.1) * fn};
      if (std::hypot(s[0] - cx, s[1] - cy) > std::max(ra, rb) + s[2] + 1.0) break;
    }
  }
  const double vessel_phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double vessel_freq = uniform(rng, 1.0, 2.0);

  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const std::size_t i = y * n + x;
      std::array<double, 3> px;
      const double shade = 1.0 + 0.15 * field[i];
      for (int c = 0; c < 3; ++c) px[c] = base[c] * shade;
      const double vessel = std::sin(2.0 * std::numbers::pi * vessel_freq * (x + 0.5 * y) / fn + vessel_phase);
      if (std::abs(vessel) < 0.12)
        for (int c = 0; c < 3; ++c) px[c] *= 0.6;
      for (const auto& s : spots) {
        const double d = std::hypot(x + 0.5 - s[0], y + 0.5 - s[1]);
        if (d <= s[2] && mask[i] == 0.0) px = spot;
      }
      if (mask[i] > 0.0) {
        for (int c = 0; c < 3; ++c) px[c] = disc[c] * (1.0 + 0.05 * field[i]);
      }
      for (std::size_t c = 0; c < 3; ++c) img[c * n * n + i] = std::clamp(px[c], 0.0, 1.0);
    }
  return {std::move(img), std::move(mask)};
}

// Class 0: smooth pink tissue. Class 1: darker purple tissue with dense
// small dark nuclei.
inline Tensor clf_content(std::size_t size, int label, Rng& rng) {
  const std::size_t n = size;
  Tensor img({3, n, n});
  const auto field = detail::smooth_field(n, rng, 3, 2.0);
  const double fn = static_cast<double>(n);
  if (label == 0) {
    const std::array<double, 3> base{uniform(rng, 0.85, 0.95), uniform(rng, 0.55, 0.65), uniform(rng, 0.7, 0.8)};
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < n * n; ++i) img[c * n * n + i] = std::clamp(base[c] * (1.0 + 0.06 * field[i]), 0.0, 1.0);
    return img;
  }
  const std::array<double, 3> base{uniform(rng, 0.55, 0.65), uniform(rng, 0.32, 0.4), uniform(rng, 0.55, 0.65)};
  const std::array<double, 3> nucleus{uniform(rng, 0.2, 0.3), uniform(rng, 0.1, 0.18), uniform(rng, 0.35, 0.45)};
  std::vector<double> nuc(n * n, 0.0);
  const int count = static_cast<int>(fn * fn / 40.0);
  for (int k = 0; k < count; ++k) {
    const double cx = uniform(rng, 0.0, fn), cy = uniform(rng, 0.0, fn), r = uniform(rng, 0.8, 1.8);
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x)
        if (std::hypot(x + 0.5 - cx, y + 0.5 - cy) <= r) nuc[y * n + x] = 1.0;
  }
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < n * n; ++i) {
      const double v = nuc[i] > 0.0 ? nucleus[c] : base[c] * (1.0 + 0.1 * field[i]);
      img[c * n * n + i] = std::clamp(v, 0.0, 1.0);
    }
  return img;
}

inline void check_site_args(std::size_t n, std::size_t min_n, std::size_t image_size, const char* who) {
  if (n < min_n)
    throw InvalidInput(std::string(who) + ": need at least " + std::to_string(min_n) + " images, got " + std::to_string(n));
  if (image_size == 0 || image_size % 4 != 0)
    throw InvalidInput(std::string(who) + ": image size " + std::to_string(image_size) + " not divisible by 4");
}

inline SiteDataset gen_seg_site(const std::string& site_id, std::size_t n, std::size_t image_size, const SiteStyle& style,
                                std::uint64_t seed) {
  check_site_args(n, 3, image_size, "gen_seg_site");
  SiteDataset d{site_id, TaskKind::segmentation, image_size, seed, style, {}, {}, {}, {}};
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = make_rng(seed, "seg-content", site_id, i);
    auto [img, mask] = seg_content(image_size, rng);
    d.images.push_back(apply_style(img, style, derive_seed(seed, "style", site_id, i)));
    d.masks.push_back(std::move(mask));
  }
  d.split = detail::make_split(n, seed, site_id);
  return d;
}

inline SiteDataset gen_clf_site(const std::string& site_id, std::size_t n, std::size_t image_size, const SiteStyle& style,
                                double class_balance, std::uint64_t seed) {
  check_site_args(n, 4, image_size, "gen_clf_site");
  if (!(class_balance > 0.0 && class_balance < 1.0))
    throw InvalidInput("gen_clf_site: class_balance must lie in (0,1), got " + std::to_string(class_balance));
  SiteDataset d{site_id, TaskKind::classification, image_size, seed, style, {}, {}, {}, {}};
  const auto n_pos = static_cast<std::size_t>(std::llround(class_balance * static_cast<double>(n)));
  d.labels.assign(n, 0);
  std::fill(d.labels.begin(), d.labels.begin() + static_cast<std::ptrdiff_t>(n_pos), 1);
  Rng order = make_rng(seed, "clf-labels", site_id);
  std::shuffle(d.labels.begin(), d.labels.end(), order);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = make_rng(seed, "clf-content", site_id, i);
    d.images.push_back(apply_style(clf_content(image_size, d.labels[i], rng), style, derive_seed(seed, "style", site_id, i)));
  }
  d.split = detail::make_split(n, seed, site_id);
  return d;
}

// Images for encoder pretraining that belong to no client: content from the
// task's generator, each image with its own random style.
inline std::vector<Tensor> gen_pretrain_pool(TaskKind task, std::size_t count, std::size_t image_size, std::uint64_t seed) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = make_rng(seed, "pretrain-pool", i);
    const SiteStyle style = random_style(rng);
    Tensor content = task == TaskKind::segmentation ? seg_content(image_size, rng).first
                                                    : clf_content(image_size, static_cast<int>(i % 2), rng);
    out.push_back(apply_style(content, style, derive_seed(seed, "pretrain-noise", i)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Non-IID style certificate

struct StyleSample {
  std::array<double, 3> mean{};
  std::array<double, 3> sd{};
};

inline StyleSample style_statistics(const std::vector<Tensor>& images) {
  StyleSample s;
  const double n = static_cast<double>(images.size());
  std::vector<std::array<double, 3>> pts;
  for (const auto& img : images) pts.push_back(hsv_mean(img));
  for (const auto& p : pts)
    for (int c = 0; c < 3; ++c) s.mean[c] += p[c] / n;
  for (const auto& p : pts)
    for (int c = 0; c < 3; ++c) s.sd[c] += (p[c] - s.mean[c]) * (p[c] - s.mean[c]) / std::max(1.0, n - 1.0);
  for (double& v : s.sd) v = std::sqrt(v);
  return s;
}

// Two sites are separated when some HSV channel mean differs by at least
// `factor` times the larger within-site standard deviation of that channel.
inline bool styles_separated(const StyleSample& a, const StyleSample& b, double factor = 3.0) {
  for (int c = 0; c < 3; ++c)
    if (std::abs(a.mean[c] - b.mean[c]) >= factor * std::max(a.sd[c], b.sd[c])) return true;
  return false;
}

// Draws one style per site, redrawing the whole set until every pair of sites
// is separated on a probe sample of styled content.
inline std::vector<SiteStyle> draw_site_styles(TaskKind task, const std::vector<std::string>& sites,
                                               std::size_t image_size, std::uint64_t seed, std::size_t probe = 12,
                                               double factor = 3.0) {
  for (std::size_t attempt = 0; attempt < 1000; ++attempt) {
    std::vector<SiteStyle> styles;
    std::vector<StyleSample> stats;
    for (const auto& site : sites) {
      Rng rng = make_rng(seed, "site-style", site, attempt);
      styles.push_back(random_style(rng));
      std::vector<Tensor> imgs;
      for (std::size_t i = 0; i < probe; ++i) {
        Rng crng = make_rng(seed, "style-probe", site, i);
        Tensor content = task == TaskKind::segmentation ? seg_content(image_size, crng).first
                                                        : clf_content(image_size, static_cast<int>(i % 2), crng);
        imgs.push_back(apply_style(content, styles.back(), derive_seed(seed, "probe-noise", site, i)));
      }
      stats.push_back(style_statistics(imgs));
    }
    bool ok = true;
    for (std::size_t a = 0; a < sites.size() && ok; ++a)
      for (std::size_t b = a + 1; b < sites.size() && ok; ++b) ok = styles_separated(stats[a], stats[b], factor);
    if (ok) return styles;
  }
  throw NumericError("draw_site_styles: no separated style set after 1000 attempts");
}

// ---------------------------------------------------------------------------
// Augmentation

struct Augmented {
  Tensor image;
  std::optional<Tensor> mask;
};

namespace detail {

inline Tensor flip(const Tensor& t, bool horizontal) {
  const std::size_t c = t.dim(0), h = t.dim(1), w = t.dim(2);
  Tensor out(t.shape());
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        out[(k * h + y) * w + x] = horizontal ? t[(k * h + y) * w + (w - 1 - x)] : t[(k * h + (h - 1 - y)) * w + x];
  return out;
}

inline Tensor rot90(const Tensor& t) {
  const std::size_t c = t.dim(0), h = t.dim(1), w = t.dim(2);
  Tensor out({c, w, h});
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(k * w + (w - 1 - x)) * h + y] = t[(k * h + y) * w + x];
  return out;
}

// Rotation about the image centre with edge replication.
inline Tensor rotate(const Tensor& t, double degrees, bool nearest) {
  const std::size_t c = t.dim(0), h = t.dim(1), w = t.dim(2);
  const double a = degrees * std::numbers::pi / 180.0, ca = std::cos(a), sa = std::sin(a);
  const double cx = (static_cast<double>(w) - 1.0) / 2.0, cy = (static_cast<double>(h) - 1.0) / 2.0;
  auto at = [&](std::size_t k, long y, long x) {
    y = std::clamp<long>(y, 0, static_cast<long>(h) - 1);
    x = std::clamp<long>(x, 0, static_cast<long>(w) - 1);
    return t[(k * h + static_cast<std::size_t>(y)) * w + static_cast<std::size_t>(x)];
  };
  Tensor out(t.shape());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double sx = ca * dx + sa * dy + cx, sy = -sa * dx + ca * dy + cy;
      for (std::size_t k = 0; k < c; ++k) {
        double v;
        if (nearest) {
          v = at(k, std::lround(sy), std::lround(sx));
        } else {
          const long x0 = static_cast<long>(std::floor(sx)), y0 = static_cast<long>(std::floor(sy));
          const double fx = sx - x0, fy = sy - y0;
          v = (1 - fy) * ((1 - fx) * at(k, y0, x0) + fx * at(k, y0, x0 + 1)) +
              fy * ((1 - fx) * at(k, y0 + 1, x0) + fx * at(k, y0 + 1, x0 + 1));
        }
        out[(k * h + y) * w + x] = v;
      }
    }
  return out;
}

}  // namespace detail

// Brightness and per-channel colour jitter of ±0.2, horizontal and vertical
// flips (p = 0.5 each), rotation in ±5°, and a 90° rotation with p = 0.5.
// Geometric steps are applied identically to the mask.
inline Augmented augment(const Tensor& image, const std::optional<Tensor>& mask, std::uint64_t seed) {
  Rng rng = make_rng(seed, "augment");
  const double brightness = uniform(rng, -0.2, 0.2);
  std::array<double, 3> jitter{};
  for (auto& j : jitter) j = uniform(rng, 0.8, 1.2);
  const bool hflip = bernoulli(rng, 0.5);
  const bool vflip = bernoulli(rng, 0.5);
  const double angle = uniform(rng, -5.0, 5.0);
  const bool quarter = bernoulli(rng, 0.5);

  const std::size_t hw = image.dim(1) * image.dim(2);
  Tensor img(image.shape());
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < hw; ++i)
      img[c * hw + i] = std::clamp(image[c * hw + i] * jitter[c] + brightness, 0.0, 1.0);

  Augmented out{std::move(img), mask};
  auto geo = [&](auto&& f) {
    out.image = f(out.image, false);
    if (out.mask) out.mask = f(*out.mask, true);
  };
  if (hflip) geo([](const Tensor& t, bool) { return detail::flip(t, true); });
  if (vflip) geo([](const Tensor& t, bool) { return detail::flip(t, false); });
  geo([angle](const Tensor& t, bool nearest) { return detail::rotate(t, angle, nearest); });
  if (quarter && image.dim(1) == image.dim(2)) geo([](const Tensor& t, bool) { return detail::rot90(t); });
  return out;
}

// ---------------------------------------------------------------------------
// Persistence: <dir>/<site>/images.f64 (+ masks.f64) and <dir>/manifest.json.

namespace detail {

inline void write_blob(const std::filesystem::path& p, const std::vector<Tensor>& ts) {
  std::vector<std::uint8_t> bytes;
  for (const auto& t : ts)
    for (double v : t.data()) wire::put_f64(bytes, v);
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot open " + p.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for " + p.string());
}

inline std::vector<Tensor> read_blob(const std::filesystem::path& p, std::size_t count, const Shape& shape) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot open " + p.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const std::size_t per = shape_numel(shape);
  if (bytes.size() != count * per * 8) throw IoError(p.string() + ": unexpected size " + std::to_string(bytes.size()));
  wire::Reader r(bytes);
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < count; ++k) {
    std::vector<double> d(per);
    for (auto& v : d) v = r.f64();
    out.emplace_back(shape, std::move(d));
  }
  return out;
}

inline std::uint64_t dataset_digest(const SiteDataset& d) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  std::vector<std::uint8_t> bytes;
  for (const auto* set : {&d.images, &d.masks})
    for (const auto& t : *set) {
      bytes.clear();
      for (double v : t.data()) wire::put_f64(bytes, v);
      h = fnv1a(bytes, h);
    }
  bytes.clear();
  for (int l : d.labels) wire::put_u32(bytes, static_cast<std::uint32_t>(l));
  return fnv1a(bytes, h);
}

}  // namespace detail

inline nlohmann::json style_to_json(const SiteStyle& s) {
  return {{"channel_gain", s.channel_gain},
          {"channel_bias", s.channel_bias},
          {"gamma", s.gamma},
          {"hue_rotation", s.hue_rotation},
          {"noise_sigma", s.noise_sigma}};
}

inline SiteStyle style_from_json(const nlohmann::json& j) {
  SiteStyle s;
  s.channel_gain = j.at("channel_gain").get<std::array<double, 3>>();
  s.channel_bias = j.at("channel_bias").get<std::array<double, 3>>();
  s.gamma = j.at("gamma").get<double>();
  s.hue_rotation = j.at("hue_rotation").get<double>();
  s.noise_sigma = j.at("noise_sigma").get<double>();
  return s;
}

inline nlohmann::json site_manifest(const SiteDataset& d) {
  return {{"site_id", d.site_id},
          {"task", to_string(d.task)},
          {"n", d.size()},
          {"image_size", d.image_size},
          {"seed", d.seed},
          {"style", style_to_json(d.style)},
          {"labels", d.labels},
          {"split", {{"train", d.split.train}, {"val", d.split.val}, {"test", d.split.test}}},
          {"digest", hex64(detail::dataset_digest(d))}};
}

inline nlohmann::json save_datasets(const std::filesystem::path& dir, const std::vector<SiteDataset>& sites) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json manifest = {{"sites", nlohmann::json::array()}};
  for (const auto& d : sites) {
    const auto sub = dir / d.site_id;
    std::filesystem::create_directories(sub, ec);
    if (ec) throw IoError("cannot create " + sub.string() + ": " + ec.message());
    detail::write_blob(sub / "images.f64", d.images);
    if (d.task == TaskKind::segmentation) detail::write_blob(sub / "masks.f64", d.masks);
    manifest["sites"].push_back(site_manifest(d));
  }
  std::ofstream f(dir / "manifest.json");
  if (!f) throw IoError("cannot write " + (dir / "manifest.json").string());
  f << manifest.dump(2) << '\n';
  return manifest;
}

inline std::vector<SiteDataset> load_datasets(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw IoError("cannot open " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest: " + std::string(e.what()));
  }
  std::vector<SiteDataset> out;
  for (const auto& j : manifest.at("sites")) {
    SiteDataset d;
    d.site_id = j.at("site_id").get<std::string>();
    d.task = parse_task(j.at("task").get<std::string>());
    d.image_size = j.at("image_size").get<std::size_t>();
    d.seed = j.at("seed").get<std::uint64_t>();
    d.style = style_from_json(j.at("style"));
    d.labels = j.at("labels").get<std::vector<int>>();
    d.split.train = j.at("split").at("train").get<std::vector<std::size_t>>();
    d.split.val = j.at("split").at("val").get<std::vector<std::size_t>>();
    d.split.test = j.at("split").at("test").get<std::vector<std::size_t>>();
    const std::size_t n = j.at("n").get<std::size_t>(), s = d.image_size;
    d.images = detail::read_blob(dir / d.site_id / "images.f64", n, {3, s, s});
    if (d.task == TaskKind::segmentation) d.masks = detail::read_blob(dir / d.site_id / "masks.f64", n, {1, s, s});
    if (hex64(detail::dataset_digest(d)) != j.at("digest").get<std::string>())
      throw IoError("dataset " + d.site_id + " does not match its manifest digest");
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace fettl
