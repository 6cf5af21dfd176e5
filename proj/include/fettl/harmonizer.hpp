#pragma once

// Whitening-coloring harmonization.
//
// Feature maps C×Ht×Wt are viewed as C×M matrices (M = Ht·Wt spatial
// samples). Matrix square roots come from the coupled Newton-Schulz
// iteration, which is a chain of matrix products and therefore differentiable
// on the tape without special backward rules.

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "fettl/autodiff.hpp"
#include "fettl/models.hpp"
#include "fettl/paramset.hpp"

namespace fettl {

struct WctOptions {
  double epsilon = 1e-5;
  // The iteration stops once max|ZY - I| <= tolerance or after max_iterations.
  std::size_t max_iterations = 100;
  double tolerance = 1e-12;
};

struct Template {
  Tensor features;  // C×Ht×Wt

  std::size_t channels() const { return features.dim(0); }

  ParamSet to_params() const {
    ParamSet ps;
    ps.add("template", features);
    return ps;
  }
  static Template from_params(const ParamSet& ps) { return Template{ps.at("template")}; }
};

struct CovarianceFactors {
  Tensor mean;      // [C]
  Tensor cov;       // C×C, unregularized
  Tensor sqrt;      // (cov + eps I)^{1/2}
  Tensor inv_sqrt;  // (cov + eps I)^{-1/2}
  std::size_t iterations = 0;
};

// ---------------------------------------------------------------------------
// Tape-level building blocks

struct SqrtPair {
  Var sqrt;
  Var inv_sqrt;
  std::size_t iterations = 0;
};

// Square root and inverse square root of an SPD matrix. The input is scaled
// by its Frobenius norm so every eigenvalue lies in (0, 1].
inline SqrtPair newton_schulz(Var a, const WctOptions& opt = {}) {
  Tape& t = detail::tape_of(a);
  const Tensor& av = a.value();
  if (av.rank() != 2 || av.dim(0) != av.dim(1))
    throw DimensionError("newton_schulz expects a square matrix, got " + shape_str(av.shape()));
  const std::size_t c = av.dim(0);
  Var norm = sqrt(sum(mul(a, a)));
  if (!(norm.value()[0] > 0.0) || !std::isfinite(norm.value()[0]))
    throw NumericError("newton_schulz: matrix norm is " + std::to_string(norm.value()[0]));
  Var y = scale_by(a, pow(norm, -1.0));
  Var z = t.constant(Tensor::eye(c));
  Var eye3 = t.constant([&] {
    Tensor e = Tensor::eye(c);
    for (double& v : e.data()) v *= 1.5;
    return e;
  }());
  std::size_t it = 0;
  for (; it < opt.max_iterations; ++it) {
    Var zy = matmul(z, y);
    double dev = 0.0;
    for (std::size_t i = 0; i < c; ++i)
      for (std::size_t j = 0; j < c; ++j)
        dev = std::max(dev, std::abs(zy.value()[i * c + j] - (i == j ? 1.0 : 0.0)));
    if (dev <= opt.tolerance) break;
    Var tm = sub(eye3, scale(zy, 0.5));
    y = matmul(y, tm);
    z = matmul(tm, z);
  }
  Var root = sqrt(norm);
  return {scale_by(y, root), scale_by(z, pow(root, -1.0)), it};
}

struct MomentVars {
  Var mean;      // [C]
  Var centered;  // C×M
  Var cov;       // C×C
};

// Row mean and unbiased covariance of a C×M matrix.
inline MomentVars channel_moments(Var m) {
  Tape& t = detail::tape_of(m);
  const Tensor& mv = m.value();
  if (mv.rank() != 2) throw DimensionError("channel_moments expects C×M, got " + shape_str(mv.shape()));
  const std::size_t c = mv.dim(0), n = mv.dim(1);
  if (n < 2) throw InvalidInput("covariance needs at least 2 spatial samples, got " + std::to_string(n));
  Var ones = t.constant(Tensor({n, 1}, 1.0 / static_cast<double>(n)));
  Var mean = reshape(matmul(m, ones), {c});
  Var centered = sub(m, broadcast_cols(mean, n));
  Var cov = scale(matmul(centered, transpose(centered)), 1.0 / static_cast<double>(n - 1));
  return {mean, centered, cov};
}

inline Var add_ridge(Var cov, double eps) {
  Tape& t = detail::tape_of(cov);
  Tensor e = Tensor::eye(cov.value().dim(0));
  for (double& v : e.data()) v *= eps;
  return add(cov, t.constant(std::move(e)));
}

inline Var as_channel_matrix(Var f) {
  const Tensor& v = f.value();
  if (v.rank() == 2) return f;
  if (v.rank() != 3) throw DimensionError("feature map must be C×Ht×Wt, got " + shape_str(v.shape()));
  return reshape(f, {v.dim(0), v.dim(1) * v.dim(2)});
}

// inv_sqrt(cov + eps I) · (f - mean); input and output are C×M.
inline Var whiten(Var f, const WctOptions& opt = {}) {
  MomentVars mo = channel_moments(as_channel_matrix(f));
  SqrtPair r = newton_schulz(add_ridge(mo.cov, opt.epsilon), opt);
  return matmul(r.inv_sqrt, mo.centered);
}

// sqrt(Cov(T) + eps I) · fw + mean(T). `fw` is C×M, the template C×Ht×Wt.
inline Var color(Var fw, Var template_features, const WctOptions& opt = {}) {
  const Tensor& wv = fw.value();
  Var tm = as_channel_matrix(template_features);
  if (wv.rank() != 2 || wv.dim(0) != tm.value().dim(0))
    throw DimensionError("color: features " + shape_str(wv.shape()) + " vs template " +
                         shape_str(template_features.shape()));
  MomentVars mo = channel_moments(tm);
  SqrtPair r = newton_schulz(add_ridge(mo.cov, opt.epsilon), opt);
  return add(matmul(r.sqrt, fw), broadcast_cols(mo.mean, wv.dim(1)));
}

// Per-channel mean/std matching, the AdaIN alternative to coloring. Both
// inputs are C×M matrices or C×Ht×Wt maps; `content` need not be whitened.
inline Var adain(Var content, Var template_features, double eps = 1e-5) {
  Tape& t = detail::tape_of(content);
  Var cm = as_channel_matrix(content);
  Var tm = as_channel_matrix(template_features);
  const std::size_t c = cm.value().dim(0), n = cm.value().dim(1);
  if (tm.value().dim(0) != c)
    throw DimensionError("adain: channel mismatch " + shape_str(content.shape()) + " vs " +
                         shape_str(template_features.shape()));
  struct Stats {
    Var mean, centered, sd;
  };
  auto stats = [&](Var m) {
    const std::size_t k = m.value().dim(1);
    Var ones = t.constant(Tensor({k, 1}, 1.0 / static_cast<double>(k)));
    Var mu = reshape(matmul(m, ones), {c});
    Var centered = sub(m, broadcast_cols(mu, k));
    Var var = reshape(matmul(mul(centered, centered), ones), {c});
    return Stats{mu, centered, sqrt(add_scalar(var, eps))};
  };
  const Stats sc = stats(cm);
  const Stats st = stats(tm);
  Var normalized = div(sc.centered, broadcast_cols(sc.sd, n));
  return add(mul(normalized, broadcast_cols(st.sd, n)), broadcast_cols(st.mean, n));
}

// ---------------------------------------------------------------------------
// Numeric entry points

namespace detail {
inline void check_features(const Tensor& f, const WctOptions& opt, const char* who) {
  if (f.rank() != 3) throw DimensionError(std::string(who) + ": expected C×Ht×Wt, got " + shape_str(f.shape()));
  if (f.dim(1) * f.dim(2) < 2)
    throw InvalidInput(std::string(who) + ": need Ht·Wt >= 2, got " + shape_str(f.shape()));
  if (!(opt.epsilon > 0.0)) throw InvalidInput(std::string(who) + ": epsilon must be positive");
  if (!f.all_finite()) throw InvalidInput(std::string(who) + ": non-finite feature values");
}
}  // namespace detail

inline CovarianceFactors channel_covariance(const Tensor& f, const WctOptions& opt = {}) {
  detail::check_features(f, opt, "channel_covariance");
  Tape t;
  MomentVars mo = channel_moments(as_channel_matrix(t.constant(f)));
  SqrtPair r = newton_schulz(add_ridge(mo.cov, opt.epsilon), opt);
  return {mo.mean.value(), mo.cov.value(), r.sqrt.value(), r.inv_sqrt.value(), r.iterations};
}

// Square root pair of an arbitrary SPD matrix.
inline std::pair<Tensor, Tensor> matrix_sqrt(const Tensor& spd, const WctOptions& opt = {}) {
  Tape t;
  SqrtPair r = newton_schulz(t.constant(spd), opt);
  return {r.sqrt.value(), r.inv_sqrt.value()};
}

inline std::pair<Tensor, CovarianceFactors> whiten(const Tensor& f0, const WctOptions& opt = {}) {
  CovarianceFactors cf = channel_covariance(f0, opt);
  const std::size_t c = f0.dim(0), m = f0.dim(1) * f0.dim(2);
  Tensor out(f0.shape());
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t k = 0; k < c; ++k) {
      const double w = cf.inv_sqrt[i * c + k];
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] += w * (f0[k * m + j] - cf.mean[k]);
    }
  return {std::move(out), std::move(cf)};
}

inline Tensor color(const Tensor& fw, const Template& tpl, const WctOptions& opt = {}) {
  if (fw.rank() != 3 || tpl.features.rank() != 3 || fw.dim(0) != tpl.features.dim(0))
    throw DimensionError("color: features " + shape_str(fw.shape()) + " vs template " +
                         shape_str(tpl.features.shape()));
  CovarianceFactors cf = channel_covariance(tpl.features, opt);
  const std::size_t c = fw.dim(0), m = fw.dim(1) * fw.dim(2);
  Tensor out(fw.shape());
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = cf.mean[i];
    for (std::size_t k = 0; k < c; ++k) {
      const double w = cf.sqrt[i * c + k];
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] += w * fw[k * m + j];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Full pipeline: I_h = dec(color(whiten(enc(I0)), T)).

enum class StyleTransfer { wct, adain };

// Whitened content features for a batch of images, N×C×Ht×Wt. These depend
// only on the frozen encoder, so callers may cache them.
inline Tensor whitened_content(const Encoder& enc, const Tensor& images, const WctOptions& opt = {}) {
  const Tensor f = encode(enc, images.rank() == 3 ? images.reshaped({1, images.dim(0), images.dim(1), images.dim(2)})
                                                  : images);
  const std::size_t n = f.dim(0);
  Tensor out(f.shape());
  for (std::size_t s = 0; s < n; ++s) {
    Tensor w = whiten(unstack(f, s), opt).first;
    std::copy(w.data().begin(), w.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(s * w.numel()));
  }
  return out;
}

// Decoded harmonized batch from prepared content features (whitened for WCT,
// raw encoder features for AdaIN). Values are clamped to [0,1] only when
// `clamp` is set, i.e. in evaluation.
inline Var harmonize_prepared(Tape& tape, const Decoder& dec, Var content, Var template_features, bool clamp_output,
                              StyleTransfer kind = StyleTransfer::wct, const WctOptions& opt = {}) {
  const Tensor& cv = content.value();
  if (cv.rank() != 4) throw DimensionError("harmonize: content must be N×C×Ht×Wt, got " + shape_str(cv.shape()));
  const std::size_t n = cv.dim(0), h = cv.dim(2), w = cv.dim(3);
  Var styled;
  if (kind == StyleTransfer::wct) {
    styled = from_channel_major(color(to_channel_major(content), template_features, opt), n, h, w);
  } else {
    std::vector<Var> parts;
    for (std::size_t s = 0; s < n; ++s)
      parts.push_back(reshape(adain(select(content, s), template_features, opt.epsilon), {cv.dim(1), h, w}));
    styled = stack(parts);
  }
  Var out = decoder_forward(tape, dec, styled, false);
  return clamp_output ? clamp(out, 0.0, 1.0) : out;
}

inline Tensor prepare_content(const Encoder& enc, const Tensor& images, StyleTransfer kind, const WctOptions& opt = {}) {
  if (kind == StyleTransfer::wct) return whitened_content(enc, images, opt);
  return encode(enc, images.rank() == 3 ? images.reshaped({1, images.dim(0), images.dim(1), images.dim(2)}) : images);
}

// Evaluation-mode harmonization of one image or a batch; output is clamped.
inline Tensor harmonize(const Encoder& enc, const Decoder& dec, const Tensor& image, const Template& tpl,
                        const WctOptions& opt = {}, StyleTransfer kind = StyleTransfer::wct) {
  if (tpl.features.rank() != 3 || tpl.features.dim(0) != kFeatureChannels)
    throw DimensionError("harmonize: template " + shape_str(tpl.features.shape()) + " does not match encoder output");
  Tape t;
  Var y = harmonize_prepared(t, dec, t.constant(prepare_content(enc, image, kind, opt)), t.constant(tpl.features), true,
                             kind, opt);
  if (image.rank() == 3) return y.value().reshaped(image.shape());
  return y.value();
}

}  // namespace fettl
