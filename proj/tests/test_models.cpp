#include <gtest/gtest.h>

#include "fettl/models.hpp"
#include "fettl/synthdata.hpp"
#include "test_util.hpp"

using namespace fettl;
using fettl::testing::random_tensor;

namespace {

// Central differences on named entries of a ParamSet. `eval` returns the
// loss and, when asked, the tape gradients keyed by parameter name.
using ParamLoss = std::function<double(ParamSet&, GradientMap*)>;

double param_fd_max_rel(ParamSet ps, const ParamLoss& eval, Rng& rng, std::size_t probes, double h = 1e-5) {
  GradientMap g;
  eval(ps, &g);
  double worst = 0.0;
  for (std::size_t p = 0; p < probes; ++p) {
    auto& entry = ps.entries()[uniform_index(rng, ps.size())];
    Tensor& t = ps.at(entry.name);
    const std::size_t i = uniform_index(rng, t.numel());
    const double orig = t[i];
    t[i] = orig + h;
    const double up = eval(ps, nullptr);
    t[i] = orig - h;
    const double down = eval(ps, nullptr);
    t[i] = orig;
    const double numeric = (up - down) / (2 * h);
    const double analytic = g.count(entry.name) ? g.at(entry.name)[i] : 0.0;
    worst = std::max(worst, std::abs(analytic - numeric) / std::max({1e-6, std::abs(analytic), std::abs(numeric)}));
  }
  return worst;
}

Tensor image_batch(std::size_t n, std::size_t size, std::uint64_t seed) {
  Rng rng = make_rng(seed, "model-images");
  return random_tensor({n, 3, size, size}, rng, 0.0, 1.0);
}

TEST(Encoder, ShapesAndDeterminism) {
  const Encoder e = make_encoder(1);
  Rng rng = make_rng(1, "img");
  const Tensor img = random_tensor({3, 32, 32}, rng, 0, 1);
  EXPECT_EQ(encode(e, img).shape(), (Shape{kFeatureChannels, 8, 8}));
  EXPECT_TRUE(encode(e, img) == encode(e, img));
  EXPECT_THROW(encode(e, Tensor({3, 30, 30})), DimensionError);
  EXPECT_THROW(encode(e, Tensor({1, 32, 32})), DimensionError);
  EXPECT_THROW(decode(make_decoder(1), Tensor({8, 4, 4})), DimensionError);
}

TEST(Decoder, ShapeRoundTrip) {
  const Encoder e = make_encoder(2);
  const Decoder d = make_decoder(2);
  for (std::size_t s : {8u, 16u, 32u, 64u}) {
    Rng rng = make_rng(s, "rt");
    const Tensor img = random_tensor({3, s, s}, rng, 0, 1);
    EXPECT_EQ(decode(d, encode(e, img)).shape(), img.shape());
  }
}

TEST(Reconstruction, ConstantDecoderCases) {
  const Encoder e = make_encoder(3);
  Decoder d = make_decoder(3);
  for (auto& entry : d.params) std::fill(entry.tensor.data().begin(), entry.tensor.data().end(), 0.0);
  // Zero weights make the output equal to the last bias everywhere.
  d.params.at("dec.conv2.b") = Tensor({3}, 1.0);
  EXPECT_DOUBLE_EQ(reconstruction_loss(d, e, Tensor({3, 8, 8}, 0.0)), 1.0);
  d.params.at("dec.conv2.b") = Tensor({3}, 0.3);
  EXPECT_NEAR(reconstruction_loss(d, e, Tensor({3, 8, 8}, 0.3)), 0.0, 1e-15);
}

TEST(Reconstruction, DecoderGradientMatchesFiniteDifferences) {
  const Encoder e = make_encoder(4);
  const Decoder d0 = make_decoder(4);
  const Tensor x = image_batch(2, 8, 4);
  auto eval = [&](ParamSet& ps, GradientMap* g) {
    Decoder d{ps};
    Tape tape;
    Var loss = reconstruction_loss(tape, d, e, tape.constant(x));
    if (g) *g = tape.backward(loss);
    return loss.value().item();
  };
  Rng rng = make_rng(4, "dec-fd");
  EXPECT_LT(param_fd_max_rel(d0.params, eval, rng, 30), 1e-4);
  // The encoder never receives a gradient.
  GradientMap g;
  ParamSet ps = d0.params;
  eval(ps, &g);
  for (const auto& [name, t] : g) EXPECT_EQ(name.rfind("dec.", 0), 0u) << name;
}

TEST(Pretrain, LossDecreasesAndEncoderFreezes) {
  const auto pool = gen_pretrain_pool(TaskKind::segmentation, 64, 16, 5);
  const auto r = pretrain_encoder(pool, 20, 5);
  EXPECT_LT(r.final_l1, r.initial_l1);
  EXPECT_TRUE(r.encoder.frozen);

  // A frozen encoder asked for gradients contributes none.
  Encoder enc = r.encoder;
  const std::string before = digest(enc.params);
  Tape tape;
  Var f = encoder_forward(tape, enc, tape.constant(pool[0]), true);
  EXPECT_TRUE(tape.backward(sum(f)).empty());
  EXPECT_EQ(digest(enc.params), before);
}

TEST(Pretrain, ZeroEpochsAndErrors) {
  const auto pool = gen_pretrain_pool(TaskKind::segmentation, 6, 16, 6);
  const auto r = pretrain_encoder(pool, 0, 6);
  EXPECT_TRUE(r.encoder.frozen);
  EXPECT_TRUE(r.encoder.params == make_encoder(6).params);
  EXPECT_TRUE(r.decoder.params == make_decoder(6).params);
  EXPECT_THROW(pretrain_encoder({}, 1, 0), InvalidInput);
  EXPECT_THROW(pretrain_encoder({Tensor({3, 8, 8}), Tensor({3, 16, 16})}, 1, 0), InvalidInput);
}

TEST(SegModel, OutputRangeAndShape) {
  for (NormKind norm : {NormKind::instance, NormKind::batch, NormKind::none}) {
    SegModel m = make_seg_model(7, norm);
    const Tensor x = image_batch(3, 32, 7);
    Tape tape;
    const Tensor y = seg_forward(tape, m, tape.constant(x), {true, false}).value();
    EXPECT_EQ(y.shape(), (Shape{3, 1, 32, 32}));
    for (double v : y.data()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
    EXPECT_EQ(seg_predict(m, unstack(x, 0)).shape(), (Shape{1, 32, 32}));
  }
}

TEST(SegModel, SeedsGiveDifferentModels) {
  const Tensor x = image_batch(1, 16, 8);
  EXPECT_GT(max_abs_diff(seg_predict(make_seg_model(1), x), seg_predict(make_seg_model(2), x)), 1e-6);
  EXPECT_GT(max_abs_diff(clf_logits(make_clf_model(1), x), clf_logits(make_clf_model(2), x)), 1e-6);
}

TEST(SegModel, InstanceNormHasNoCrossSampleCoupling) {
  SegModel m = make_seg_model(9, NormKind::instance);
  const Tensor x = image_batch(4, 16, 9);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  std::vector<Tensor> items;
  for (std::size_t k : perm) items.push_back(unstack(x, k));
  std::vector<const Tensor*> ptrs;
  for (const auto& t : items) ptrs.push_back(&t);
  const Tensor xp = stack_tensors(ptrs);
  Tape tape;
  const Tensor y = seg_forward(tape, m, tape.constant(x), {true, false}).value();
  const Tensor yp = seg_forward(tape, m, tape.constant(xp), {true, false}).value();
  for (std::size_t k = 0; k < 4; ++k) EXPECT_TRUE(unstack(yp, k) == unstack(y, perm[k]));
}

TEST(SegModel, BatchNormCouplesSamplesAndTracksStatistics) {
  SegModel m = make_seg_model(10, NormKind::batch);
  const ParamSet buffers0 = m.buffers;
  const Tensor x = image_batch(4, 16, 10);
  Tape tape;
  const Tensor full = seg_forward(tape, m, tape.constant(x), {true, false}).value();
  EXPECT_FALSE(m.buffers == buffers0);
  const Tensor x0 = unstack(x, 0), x1 = unstack(x, 1);
  const std::vector<const Tensor*> first{&x0, &x1};
  SegModel m2 = make_seg_model(10, NormKind::batch);
  const Tensor half = seg_forward(tape, m2, tape.constant(stack_tensors(first)), {true, false}).value();
  EXPECT_GT(max_abs_diff(unstack(full, 0), unstack(half, 0)), 1e-9);
  // Evaluation uses the running statistics and leaves them alone.
  const ParamSet tracked = m.buffers;
  seg_forward(tape, m, tape.constant(x), {false, false});
  EXPECT_TRUE(m.buffers == tracked);
}

TEST(SegModel, DiceLossGradientMatchesFiniteDifferences) {
  const Tensor x = image_batch(2, 8, 11);
  Rng mrng = make_rng(11, "masks");
  Tensor masks({2, 1, 8, 8});
  for (double& v : masks.data()) v = bernoulli(mrng, 0.3) ? 1.0 : 0.0;
  for (NormKind norm : {NormKind::instance, NormKind::batch}) {
    const SegModel m0 = make_seg_model(11, norm);
    auto eval = [&](ParamSet& ps, GradientMap* g) {
      SegModel m{ps, m0.buffers, norm};
      Tape tape;
      Var loss = dice_loss(seg_forward(tape, m, tape.constant(x), {true, true}), tape.constant(masks));
      if (g) *g = tape.backward(loss);
      return loss.value().item();
    };
    Rng rng = make_rng(11, "seg-fd", to_string(norm));
    EXPECT_LT(param_fd_max_rel(m0.params, eval, rng, 30), 1e-4) << to_string(norm);
  }
}

TEST(ClfModel, LogitsSoftmaxAndGradient) {
  const ClfModel m0 = make_clf_model(12);
  const Tensor x = image_batch(3, 16, 12);
  const Tensor logits = clf_logits(m0, unstack(x, 0));
  ASSERT_EQ(logits.shape(), (Shape{2}));
  const auto p = softmax(logits.data());
  EXPECT_NEAR(p[0] + p[1], 1.0, 1e-12);
  const std::vector<int> labels{1, 0, 1};
  auto eval = [&](ParamSet& ps, GradientMap* g) {
    ClfModel m{ps, m0.buffers, m0.norm};
    Tape tape;
    Var loss = cross_entropy(clf_forward(tape, m, tape.constant(x), {true, true}), labels);
    if (g) *g = tape.backward(loss);
    return loss.value().item();
  };
  Rng rng = make_rng(12, "clf-fd");
  EXPECT_LT(param_fd_max_rel(m0.params, eval, rng, 30), 1e-4);
}

TEST(Losses, DiceLossHandCases) {
  Tape tape;
  const Tensor ones({1, 1, 2, 2}, 1.0), zeros({1, 1, 2, 2}, 0.0);
  EXPECT_NEAR(dice_loss(tape.constant(ones), tape.constant(ones)).value().item(), 0.0, 1e-15);
  // 1 - (0 + 1) / (4 + 0 + 1)
  EXPECT_NEAR(dice_loss(tape.constant(ones), tape.constant(zeros)).value().item(), 0.8, 1e-15);
  EXPECT_NEAR(dice_loss(tape.constant(zeros), tape.constant(zeros)).value().item(), 0.0, 1e-15);
  EXPECT_THROW(dice_loss(tape.constant(ones), tape.constant(Tensor({1, 1, 2, 3}))), DimensionError);
}

}  // namespace
