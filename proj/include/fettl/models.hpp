#pragma once

// Desk-scale networks: a frozen feature encoder, its reconstruction decoder,
// a two-level U-Net-style segmenter and a small convolutional classifier.
// All models are plain value objects holding ParamSets; forward passes are
// recorded on a caller-owned Tape.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "fettl/autodiff.hpp"
#include "fettl/optim.hpp"
#include "fettl/paramset.hpp"
#include "fettl/rng.hpp"

namespace fettl {

inline constexpr std::size_t kFeatureChannels = 32;
inline constexpr std::size_t kDownsample = 4;

enum class NormKind { none, instance, batch };

inline const char* to_string(NormKind k) {
  switch (k) {
    case NormKind::none:
      return "none";
    case NormKind::instance:
      return "instance";
    case NormKind::batch:
      return "batch";
  }
  return "?";
}

struct Encoder {
  ParamSet params;
  bool frozen = false;
};

struct Decoder {
  ParamSet params;
};

struct SegModel {
  ParamSet params;
  ParamSet buffers;  // batch-norm running statistics
  NormKind norm = NormKind::instance;
};

struct ClfModel {
  ParamSet params;
  ParamSet buffers;
  NormKind norm = NormKind::none;
};

// How a forward pass treats the model: `training` selects batch statistics
// and updates running averages; `grad_params` records parameters as leaves.
struct Pass {
  bool training = false;
  bool grad_params = false;
};

inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kNormEps = 1e-5;

namespace detail {

inline Tensor he_normal(Shape shape, std::size_t fan_in, double gain, Rng& rng) {
  Tensor t(std::move(shape));
  const double sd = gain / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.data()) v = normal(rng, 0.0, sd);
  return t;
}

inline void add_conv(ParamSet& ps, const std::string& name, std::size_t cout, std::size_t cin, std::size_t k,
                     bool bias, double gain, Rng& rng) {
  ps.add(name + ".w", he_normal({cout, cin, k, k}, cin * k * k, gain, rng));
  if (bias) ps.add(name + ".b", Tensor({cout}));
}

inline void add_norm(ParamSet& params, ParamSet& buffers, const std::string& name, std::size_t c, NormKind kind) {
  if (kind == NormKind::none) return;
  params.add(name + ".gamma", Tensor({c}, 1.0));
  params.add(name + ".beta", Tensor({c}));
  if (kind == NormKind::batch) {
    buffers.add(name + ".running_mean", Tensor({c}));
    buffers.add(name + ".running_var", Tensor({c}, 1.0));
  }
}

// Resolves parameters to tape variables once per forward pass.
class Binder {
 public:
  Binder(Tape& tape, const ParamSet& ps, bool grad) : tape_(tape), ps_(ps), grad_(grad) {}

  Var operator()(const std::string& name) {
    const Tensor& t = ps_.at(name);
    return grad_ ? tape_.leaf(t, name) : tape_.constant(t);
  }

  Tape& tape() { return tape_; }

 private:
  Tape& tape_;
  const ParamSet& ps_;
  bool grad_;
};

inline Var conv(Binder& p, Var x, const std::string& name, std::size_t stride, std::size_t pad, bool bias) {
  Var y = conv2d(x, p(name + ".w"), stride, pad);
  return bias ? add_channel_bias(y, p(name + ".b")) : y;
}

inline Var norm_layer(Binder& p, ParamSet& buffers, Var x, const std::string& name, NormKind kind, bool training) {
  switch (kind) {
    case NormKind::none:
      return x;
    case NormKind::instance:
      return channel_affine(instance_norm(x, kNormEps), p(name + ".gamma"), p(name + ".beta"));
    case NormKind::batch:
      break;
  }
  Tensor& rm = buffers.at(name + ".running_mean");
  Tensor& rv = buffers.at(name + ".running_var");
  const Tensor& xv = x.value();
  const std::size_t n = xv.rank() == 4 ? xv.dim(0) : 1;
  const std::size_t c = xv.rank() == 4 ? xv.dim(1) : xv.dim(0);
  const std::size_t hw = xv.numel() / (n * c);
  if (training) {
    const double m = static_cast<double>(n * hw);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double mu = 0.0, var = 0.0;
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t j = 0; j < hw; ++j) mu += xv[(s * c + ch) * hw + j];
      mu /= m;
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t j = 0; j < hw; ++j) {
          const double d = xv[(s * c + ch) * hw + j] - mu;
          var += d * d;
        }
      const double unbiased = m > 1 ? var / (m - 1.0) : 0.0;
      rm[ch] = (1.0 - kBatchNormMomentum) * rm[ch] + kBatchNormMomentum * mu;
      rv[ch] = (1.0 - kBatchNormMomentum) * rv[ch] + kBatchNormMomentum * unbiased;
    }
    return channel_affine(batch_norm(x, kNormEps), p(name + ".gamma"), p(name + ".beta"));
  }
  // Inference: fixed affine map from running statistics, then the learned affine.
  Tensor scale_t({c}), shift_t({c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    scale_t[ch] = 1.0 / std::sqrt(rv[ch] + kNormEps);
    shift_t[ch] = -rm[ch] * scale_t[ch];
  }
  Var normalized = channel_affine(x, p.tape().constant(scale_t), p.tape().constant(shift_t));
  return channel_affine(normalized, p(name + ".gamma"), p(name + ".beta"));
}

inline Var as_batch(Var x) {
  if (x.value().rank() == 4) return x;
  Shape s{1};
  s.insert(s.end(), x.shape().begin(), x.shape().end());
  return reshape(x, s);
}

inline void check_image_batch(const Tensor& x, std::size_t channels, const char* who) {
  if (x.rank() != 4 || x.dim(1) != channels)
    throw DimensionError(std::string(who) + ": expected N×" + std::to_string(channels) + "×H×W, got " +
                         shape_str(x.shape()));
  if (x.dim(2) % kDownsample != 0 || x.dim(3) % kDownsample != 0)
    throw DimensionError(std::string(who) + ": spatial size " + shape_str(x.shape()) + " not divisible by " +
                         std::to_string(kDownsample));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Construction

inline Encoder make_encoder(std::uint64_t seed) {
  Rng rng = make_rng(seed, "encoder-init");
  Encoder e;
  detail::add_conv(e.params, "enc.conv1", 16, 3, 3, true, std::sqrt(2.0), rng);
  detail::add_conv(e.params, "enc.conv2", kFeatureChannels, 16, 3, true, 1.0, rng);
  return e;
}

inline Decoder make_decoder(std::uint64_t seed) {
  Rng rng = make_rng(seed, "decoder-init");
  Decoder d;
  detail::add_conv(d.params, "dec.conv1", 16, kFeatureChannels, 3, true, std::sqrt(2.0), rng);
  detail::add_conv(d.params, "dec.conv2", 3, 16, 3, true, 1.0, rng);
  return d;
}

inline SegModel make_seg_model(std::uint64_t seed, NormKind norm = NormKind::instance) {
  Rng rng = make_rng(seed, "seg-init");
  SegModel m;
  m.norm = norm;
  const bool bias = norm == NormKind::none;
  detail::add_conv(m.params, "seg.enc1", 16, 3, 3, bias, std::sqrt(2.0), rng);
  detail::add_norm(m.params, m.buffers, "seg.enc1.norm", 16, norm);
  detail::add_conv(m.params, "seg.enc2", 32, 16, 3, bias, std::sqrt(2.0), rng);
  detail::add_norm(m.params, m.buffers, "seg.enc2.norm", 32, norm);
  detail::add_conv(m.params, "seg.up", 16, 32, 1, true, 1.0, rng);
  detail::add_conv(m.params, "seg.dec", 16, 16, 3, bias, std::sqrt(2.0), rng);
  detail::add_norm(m.params, m.buffers, "seg.dec.norm", 16, norm);
  detail::add_conv(m.params, "seg.head", 1, 16, 1, true, 1.0, rng);
  return m;
}

inline ClfModel make_clf_model(std::uint64_t seed, NormKind norm = NormKind::none) {
  Rng rng = make_rng(seed, "clf-init");
  ClfModel m;
  m.norm = norm;
  const bool bias = norm == NormKind::none;
  const std::size_t widths[4] = {3, 8, 16, 16};
  for (int b = 0; b < 3; ++b) {
    const std::string name = "clf.block" + std::to_string(b + 1);
    detail::add_conv(m.params, name, widths[b + 1], widths[b], 3, bias, std::sqrt(2.0), rng);
    detail::add_norm(m.params, m.buffers, name + ".norm", widths[b + 1], norm);
  }
  m.params.add("clf.fc.w", detail::he_normal({16, 2}, 16, 1.0, rng));
  m.params.add("clf.fc.b", Tensor({2}));
  return m;
}

// ---------------------------------------------------------------------------
// Forward passes. Inputs may be a single C×H×W image or an N×C×H×W batch;
// outputs are always batched.

inline Var encoder_forward(Tape& tape, const Encoder& enc, Var images, bool grad_params = false) {
  Var x = detail::as_batch(images);
  detail::check_image_batch(x.value(), 3, "encode");
  detail::Binder p(tape, enc.params, grad_params && !enc.frozen);
  Var h = relu(detail::conv(p, x, "enc.conv1", 2, 1, true));
  return detail::conv(p, h, "enc.conv2", 2, 1, true);
}

inline Var decoder_forward(Tape& tape, const Decoder& dec, Var features, bool grad_params = false) {
  Var f = detail::as_batch(features);
  if (f.value().dim(1) != kFeatureChannels)
    throw DimensionError("decoder expects " + std::to_string(kFeatureChannels) + " feature channels, got " +
                         shape_str(f.shape()));
  detail::Binder p(tape, dec.params, grad_params);
  Var h = relu(detail::conv(p, upsample_nearest(f, 2), "dec.conv1", 1, 1, true));
  return detail::conv(p, upsample_nearest(h, 2), "dec.conv2", 1, 1, true);
}

// Sigmoid probabilities, N×1×H×W.
inline Var seg_forward(Tape& tape, SegModel& m, Var images, Pass pass = {}) {
  Var x = detail::as_batch(images);
  detail::check_image_batch(x.value(), 3, "seg_forward");
  detail::Binder p(tape, m.params, pass.grad_params);
  const bool bias = m.norm == NormKind::none;
  auto block = [&](Var in, const std::string& name, std::size_t stride) {
    Var y = detail::conv(p, in, name, stride, 1, bias);
    return relu(detail::norm_layer(p, m.buffers, y, name + ".norm", m.norm, pass.training));
  };
  Var e1 = block(x, "seg.enc1", 1);
  Var e2 = block(e1, "seg.enc2", 2);
  Var u = upsample_nearest(detail::conv(p, e2, "seg.up", 1, 0, true), 2);
  Var d = block(add(u, e1), "seg.dec", 1);
  return sigmoid(detail::conv(p, d, "seg.head", 1, 0, true));
}

// Logits, N×2.
inline Var clf_forward(Tape& tape, ClfModel& m, Var images, Pass pass = {}) {
  Var x = detail::as_batch(images);
  detail::check_image_batch(x.value(), 3, "clf_forward");
  detail::Binder p(tape, m.params, pass.grad_params);
  const bool bias = m.norm == NormKind::none;
  Var h = x;
  for (int b = 1; b <= 3; ++b) {
    const std::string name = "clf.block" + std::to_string(b);
    h = relu(detail::norm_layer(p, m.buffers, detail::conv(p, h, name, 2, 1, bias), name + ".norm", m.norm,
                                pass.training));
  }
  return add_row_bias(matmul(channel_mean(h), p("clf.fc.w")), p("clf.fc.b"));
}

// Const convenience wrappers for evaluation.
inline Tensor encode(const Encoder& enc, const Tensor& image) {
  Tape tape;
  Var f = encoder_forward(tape, enc, tape.constant(image));
  if (image.rank() == 3) return f.value().reshaped({f.shape()[1], f.shape()[2], f.shape()[3]});
  return f.value();
}

inline Tensor decode(const Decoder& dec, const Tensor& features) {
  Tape tape;
  Var y = decoder_forward(tape, dec, tape.constant(features));
  if (features.rank() == 3) return y.value().reshaped({3, y.shape()[2], y.shape()[3]});
  return y.value();
}

inline Tensor seg_predict(const SegModel& m, const Tensor& image) {
  SegModel copy = m;
  Tape tape;
  Var y = seg_forward(tape, copy, tape.constant(image));
  if (image.rank() == 3) return y.value().reshaped({1, image.dim(1), image.dim(2)});
  return y.value();
}

inline Tensor clf_logits(const ClfModel& m, const Tensor& image) {
  ClfModel copy = m;
  Tape tape;
  Var y = clf_forward(tape, copy, tape.constant(image));
  if (image.rank() == 3) return y.value().reshaped({2});
  return y.value();
}

inline std::vector<double> softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] = std::exp(logits[i] - mx));
  for (double& v : p) v /= s;
  return p;
}

// ---------------------------------------------------------------------------
// Losses

// Soft Dice loss averaged over the batch: 1 - (2 sum(pg) + s) / (sum(p) + sum(g) + s).
inline Var dice_loss(Var probs, Var masks, double smooth = 1.0) {
  detail::same_shape("dice_loss", probs.value(), masks.value());
  Var inter = sum_per_sample(mul(probs, masks));
  Var denom = add(sum_per_sample(probs), sum_per_sample(masks));
  Var ratio = div(add_scalar(scale(inter, 2.0), smooth), add_scalar(denom, smooth));
  return add_scalar(scale(mean(ratio), -1.0), 1.0);
}

inline Var cross_entropy(Var logits, const std::vector<int>& labels) { return nll_loss(log_softmax(logits), labels); }

inline Var l1_loss(Var a, Var b) { return mean(abs(sub(a, b))); }

// Mean absolute reconstruction error of dec(enc(I)); differentiable w.r.t. the decoder only.
inline Var reconstruction_loss(Tape& tape, const Decoder& dec, const Encoder& enc, Var images, bool grad_decoder = true) {
  Var x = detail::as_batch(images);
  Var f = encoder_forward(tape, enc, x, false);
  return l1_loss(decoder_forward(tape, dec, f, grad_decoder), x);
}

inline double reconstruction_loss(const Decoder& dec, const Encoder& enc, const Tensor& image) {
  Tape tape;
  return reconstruction_loss(tape, dec, enc, tape.constant(image), false).value().item();
}

// Stacks C×H×W tensors into an N×C×H×W batch.
inline Tensor stack_tensors(const std::vector<const Tensor*>& items) {
  if (items.empty()) throw InvalidInput("empty batch");
  const Shape inner = items[0]->shape();
  Shape s{items.size()};
  s.insert(s.end(), inner.begin(), inner.end());
  Tensor out(s);
  const std::size_t per = shape_numel(inner);
  for (std::size_t k = 0; k < items.size(); ++k) {
    if (items[k]->shape() != inner)
      throw InvalidInput("batch items differ in shape: " + shape_str(inner) + " vs " + shape_str(items[k]->shape()));
    std::copy(items[k]->data().begin(), items[k]->data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(k * per));
  }
  return out;
}

inline Tensor unstack(const Tensor& batch, std::size_t k) {
  Shape inner(batch.shape().begin() + 1, batch.shape().end());
  const std::size_t per = shape_numel(inner);
  std::vector<double> d(batch.data().begin() + static_cast<std::ptrdiff_t>(k * per),
                        batch.data().begin() + static_cast<std::ptrdiff_t>((k + 1) * per));
  return Tensor(inner, std::move(d));
}

// ---------------------------------------------------------------------------
// Encoder pretraining: autoencode pooled images, then freeze the encoder.

struct PretrainOptions {
  double learning_rate = 2e-3;
  std::size_t batch_size = 8;
};

struct PretrainResult {
  Encoder encoder;
  Decoder decoder;
  double initial_l1 = 0.0;
  double final_l1 = 0.0;
};

inline double mean_reconstruction_l1(const Decoder& dec, const Encoder& enc, const std::vector<Tensor>& data) {
  double s = 0.0;
  for (std::size_t start = 0; start < data.size(); start += 16) {
    std::vector<const Tensor*> items;
    for (std::size_t i = start; i < std::min(data.size(), start + 16); ++i) items.push_back(&data[i]);
    Tape tape;
    s += reconstruction_loss(tape, dec, enc, tape.constant(stack_tensors(items)), false).value().item() *
         static_cast<double>(items.size());
  }
  return s / static_cast<double>(data.size());
}

inline PretrainResult pretrain_encoder(const std::vector<Tensor>& data, std::size_t epochs, std::uint64_t seed,
                                       PretrainOptions opt = {}) {
  if (data.empty()) throw InvalidInput("pretrain_encoder: no images");
  for (const auto& img : data)
    if (img.shape() != data[0].shape())
      throw InvalidInput("pretrain_encoder: mixed image shapes " + shape_str(data[0].shape()) + " and " +
                         shape_str(img.shape()));
  PretrainResult r{make_encoder(seed), make_decoder(seed), 0.0, 0.0};
  r.initial_l1 = mean_reconstruction_l1(r.decoder, r.encoder, data);
  AdamWState enc_state = AdamWState::with_lr(opt.learning_rate, 0.0);
  AdamWState dec_state = AdamWState::with_lr(opt.learning_rate, 0.0);
  Rng rng = make_rng(seed, "pretrain-shuffle");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t ep = 0; ep < epochs; ++ep) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      std::vector<const Tensor*> items;
      for (std::size_t i = start; i < std::min(order.size(), start + opt.batch_size); ++i) items.push_back(&data[order[i]]);
      Tape tape;
      Var x = tape.constant(stack_tensors(items));
      Var f = encoder_forward(tape, r.encoder, x, true);
      Var loss = l1_loss(decoder_forward(tape, r.decoder, f, true), x);
      GradientMap g = tape.backward(loss);
      r.encoder.params = adamw_step(std::move(r.encoder.params), g, enc_state);
      r.decoder.params = adamw_step(std::move(r.decoder.params), g, dec_state);
    }
  }
  r.encoder.frozen = true;
  r.final_l1 = mean_reconstruction_l1(r.decoder, r.encoder, data);
  return r;
}

}  // namespace fettl
