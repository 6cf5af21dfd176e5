#pragma once

// Federated simulation: aggregation, round messaging, the three FeTTL stages
// and the baseline / ablation strategies.
//
// Clients and server exchange nothing but serialized ParamSets carried by
// RoundMessages through a Channel, which records every message in a
// Transcript. Per-client randomness is derived from (seed, round, client), so
// sequential and parallel client execution give identical results.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "fettl/autodiff.hpp"
#include "fettl/harmonizer.hpp"
#include "fettl/log.hpp"
#include "fettl/metrics.hpp"
#include "fettl/models.hpp"
#include "fettl/optim.hpp"
#include "fettl/paramset.hpp"
#include "fettl/rng.hpp"
#include "fettl/synthdata.hpp"

namespace fettl {

// ---------------------------------------------------------------------------
// Strategies and configuration

enum class Strategy {
  fettl,
  fettl_local,
  fettl_scratch,
  fedavg,
  fedprox,
  fedbn,
  adain_ablation,
  dataalchemy_ablation,
  fed_dataalchemy_ablation,
  global_template_ablation,
};

inline const std::vector<std::pair<Strategy, std::string>>& strategy_table() {
  static const std::vector<std::pair<Strategy, std::string>> t = {
      {Strategy::fettl, "fettl"},
      {Strategy::fettl_local, "fettl_local"},
      {Strategy::fettl_scratch, "fettl_scratch"},
      {Strategy::fedavg, "fedavg"},
      {Strategy::fedprox, "fedprox"},
      {Strategy::fedbn, "fedbn"},
      {Strategy::adain_ablation, "adain_ablation"},
      {Strategy::dataalchemy_ablation, "dataalchemy_ablation"},
      {Strategy::fed_dataalchemy_ablation, "fed_dataalchemy_ablation"},
      {Strategy::global_template_ablation, "global_template_ablation"},
  };
  return t;
}

inline std::string to_string(Strategy s) {
  for (const auto& [k, name] : strategy_table())
    if (k == s) return name;
  return "?";
}

inline Strategy parse_strategy(const std::string& s) {
  for (const auto& [k, name] : strategy_table())
    if (name == s) return k;
  throw ConfigError("unknown strategy '" + s + "'");
}

enum class TemplateInit { encoded_image, raw_image, gaussian_noise };

inline std::string to_string(TemplateInit t) {
  switch (t) {
    case TemplateInit::encoded_image:
      return "encoded_image";
    case TemplateInit::raw_image:
      return "raw_image";
    case TemplateInit::gaussian_noise:
      return "gaussian_noise";
  }
  return "?";
}

inline TemplateInit parse_template_init(const std::string& s) {
  for (TemplateInit t : {TemplateInit::encoded_image, TemplateInit::raw_image, TemplateInit::gaussian_noise})
    if (to_string(t) == s) return t;
  throw ConfigError("unknown template_init '" + s + "'");
}

enum class OptimizerKind { adamw, sgd };

struct FedConfig {
  TaskKind task = TaskKind::segmentation;

  // Encoder pretraining on a pool of images owned by no client.
  std::size_t pretrain_images = 64;
  std::size_t pretrain_epochs = 20;
  double pretrain_lr = 2e-3;

  // Stage 1: federated harmonizer (decoder) training.
  std::size_t harmonizer_rounds = 10;
  std::size_t harmonizer_local_steps = 10;
  std::size_t harmonizer_batch = 8;
  double harmonizer_lr = 1e-3;

  // Stage 2: initial task model at one site (empty = largest site).
  std::string init_site;
  std::size_t init_epochs = 5;
  double init_lr = 5e-4;

  // Stage 3 and baselines.
  std::size_t rounds = 10;
  std::size_t local_iters = 200;
  std::size_t local_epochs = 0;  // when > 0, overrides local_iters
  std::size_t batch_size = 16;
  double eta = 1e-4;   // template learning rate
  double beta = 1e-4;  // task model learning rate
  double mu = 0.01;    // proximal weight
  OptimizerKind optimizer = OptimizerKind::adamw;
  TemplateInit template_init = TemplateInit::encoded_image;
  WctOptions wct;
  bool augment = false;
  std::size_t parallel_clients = 1;
  DiceOptions dice;
};

// ---------------------------------------------------------------------------
// Aggregation

struct Upload {
  ParamSet params;
  std::size_t sample_count = 0;
};

namespace detail {
inline void check_uploads_schema(const std::vector<const ParamSet*>& sets) {
  if (sets.empty()) throw AggregationError("aggregation over zero uploads");
  const ParamSet& ref = *sets[0];
  for (std::size_t k = 1; k < sets.size(); ++k) {
    const ParamSet& ps = *sets[k];
    if (ps.size() != ref.size())
      throw AggregationError("upload " + std::to_string(k) + " has " + std::to_string(ps.size()) + " parameters, expected " +
                             std::to_string(ref.size()));
    for (std::size_t i = 0; i < ref.size(); ++i) {
      const auto& a = ref.entries()[i];
      const auto& b = ps.entries()[i];
      if (a.name != b.name)
        throw AggregationError("parameter '" + b.name + "' in upload " + std::to_string(k) + " where '" + a.name +
                               "' was expected");
      if (a.tensor.shape() != b.tensor.shape())
        throw AggregationError("parameter '" + a.name + "' has shape " + shape_str(b.tensor.shape()) + " in upload " +
                               std::to_string(k) + ", expected " + shape_str(a.tensor.shape()));
    }
  }
}
}  // namespace detail

// Sample-count weighted mean, accumulated as sum(n_k * x_k) in extended
// precision and divided by sum(n_k) once, so the result is the correctly
// rounded weighted mean except under extreme cancellation.
inline ParamSet fedavg_aggregate(const std::vector<Upload>& uploads) {
  std::vector<const ParamSet*> sets;
  long double total = 0.0L;
  for (const auto& u : uploads) {
    if (u.sample_count == 0) throw AggregationError("upload with zero sample_count");
    sets.push_back(&u.params);
    total += static_cast<long double>(u.sample_count);
  }
  detail::check_uploads_schema(sets);
  ParamSet out = uploads[0].params;
  std::vector<long double> acc;
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto dst = out.at(out.entries()[i].name).data();
    acc.assign(dst.size(), 0.0L);
    for (const auto& u : uploads) {
      const long double w = static_cast<long double>(u.sample_count);
      const auto src = u.params.entries()[i].tensor.data();
      for (std::size_t j = 0; j < dst.size(); ++j) acc[j] += w * static_cast<long double>(src[j]);
    }
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<double>(acc[j] / total);
  }
  return out;
}

// Unweighted mean. Each entry is computed as min + mean(x - min) over the
// sorted values, which makes the result independent of upload order and
// exact when all uploads agree.
inline ParamSet mean_aggregate(const std::vector<ParamSet>& uploads) {
  std::vector<const ParamSet*> sets;
  for (const auto& u : uploads) sets.push_back(&u);
  detail::check_uploads_schema(sets);
  ParamSet out = uploads[0];
  const std::size_t n = uploads.size();
  std::vector<double> vals(n);
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto dst = out.at(out.entries()[i].name).data();
    for (std::size_t j = 0; j < dst.size(); ++j) {
      for (std::size_t k = 0; k < n; ++k) vals[k] = uploads[k].entries()[i].tensor[j];
      std::sort(vals.begin(), vals.end());
      double s = 0.0;
      for (double v : vals) s += v - vals[0];
      dst[j] = vals[0] + s / static_cast<double>(n);
    }
  }
  return out;
}

inline Template mean_aggregate(const std::vector<Template>& uploads) {
  std::vector<ParamSet> sets;
  for (const auto& t : uploads) sets.push_back(t.to_params());
  return Template::from_params(mean_aggregate(sets));
}

// ---------------------------------------------------------------------------
// Messaging

enum class Direction { broadcast, upload };

struct RoundMessage {
  std::string phase;  // "harmonizer" or "task"
  Direction direction = Direction::broadcast;
  int round = 0;
  std::string client_id;
  std::size_t sample_count = 0;
  std::vector<std::uint8_t> payload;
};

struct TranscriptEntry {
  std::string phase;
  Direction direction;
  int round;
  std::string client_id;
  std::size_t sample_count;
  std::size_t bytes;
  std::string digest;
  std::vector<std::pair<std::string, Shape>> schema;
};

class Transcript {
 public:
  void record(const RoundMessage& m, const ParamSet& decoded) {
    TranscriptEntry e{m.phase, m.direction, m.round, m.client_id, m.sample_count, m.payload.size(),
                      hex64(fnv1a(m.payload)), {}};
    for (const auto& p : decoded) e.schema.emplace_back(p.name, p.tensor.shape());
    std::lock_guard lock(mu_);
    entries_.push_back(std::move(e));
  }

  const std::vector<TranscriptEntry>& entries() const { return entries_; }

  std::string to_text() const {
    std::ostringstream os;
    for (const auto& e : entries_) {
      os << e.phase << " round=" << e.round << ' ' << (e.direction == Direction::broadcast ? "broadcast" : "upload")
         << " client=" << e.client_id << " samples=" << e.sample_count << " bytes=" << e.bytes << " digest=" << e.digest
         << " tensors=";
      for (std::size_t i = 0; i < e.schema.size(); ++i) os << (i ? "," : "") << e.schema[i].first << shape_str(e.schema[i].second);
      os << '\n';
    }
    return os.str();
  }

 private:
  std::vector<TranscriptEntry> entries_;
  mutable std::mutex mu_;
};

// Carries payloads across the client/server boundary. Every delivered payload
// is decoded from its serialized bytes, so nothing but ParamSet content can
// cross.
class Channel {
 public:
  explicit Channel(Transcript* transcript = nullptr) : transcript_(transcript) {}

  ParamSet deliver(const RoundMessage& m) {
    if (m.direction == Direction::upload && m.sample_count == 0)
      throw ContractError("upload from client " + m.client_id + " carries sample_count 0");
    ParamSet ps = deserialize(m.payload);
    if (transcript_) transcript_->record(m, ps);
    return ps;
  }

  static RoundMessage make(std::string phase, Direction d, int round, std::string client, std::size_t samples,
                           const ParamSet& ps) {
    return RoundMessage{std::move(phase), d, round, std::move(client), samples, serialize(ps)};
  }

 private:
  Transcript* transcript_;
};

struct AuditResult {
  bool ok = true;
  std::vector<std::string> violations;
};

// Every payload tensor must be declared in `allowed` with the same shape, and
// no payload tensor may have the shape of an image or an image batch.
inline AuditResult audit_transcript(const Transcript& t, const std::map<std::string, Shape>& allowed,
                                    std::size_t image_size) {
  AuditResult r;
  auto image_like = [&](const Shape& s) {
    if (s.size() < 3) return false;
    const std::size_t k = s.size();
    return s[k - 1] == image_size && s[k - 2] == image_size && (s[k - 3] == 3 || s[k - 3] == 1);
  };
  for (const auto& e : t.entries())
    for (const auto& [name, shape] : e.schema) {
      auto it = allowed.find(name);
      std::string where = e.phase + " round " + std::to_string(e.round) + " client " + e.client_id + ": ";
      if (it == allowed.end()) {
        r.violations.push_back(where + "undeclared tensor '" + name + "'");
      } else if (it->second != shape) {
        r.violations.push_back(where + "tensor '" + name + "' has shape " + shape_str(shape));
      }
      if (image_like(shape)) r.violations.push_back(where + "image-shaped tensor '" + name + "' " + shape_str(shape));
    }
  r.ok = r.violations.empty();
  return r;
}

// ---------------------------------------------------------------------------
// Task model abstraction

struct TaskModel {
  TaskKind task = TaskKind::segmentation;
  NormKind norm = NormKind::instance;
  ParamSet params;
  ParamSet buffers;
};

inline TaskModel make_task_model(TaskKind task, std::uint64_t seed, NormKind norm) {
  if (task == TaskKind::segmentation) {
    SegModel m = make_seg_model(seed, norm);
    return {task, norm, std::move(m.params), std::move(m.buffers)};
  }
  ClfModel m = make_clf_model(seed, norm);
  return {task, norm, std::move(m.params), std::move(m.buffers)};
}

// Probabilities N×1×H×W for segmentation, logits N×2 for classification.
inline Var task_forward(Tape& tape, TaskModel& m, Var images, Pass pass) {
  if (m.task == TaskKind::segmentation) {
    SegModel s{std::move(m.params), std::move(m.buffers), m.norm};
    Var out = seg_forward(tape, s, images, pass);
    m.params = std::move(s.params);
    m.buffers = std::move(s.buffers);
    return out;
  }
  ClfModel c{std::move(m.params), std::move(m.buffers), m.norm};
  Var out = clf_forward(tape, c, images, pass);
  m.params = std::move(c.params);
  m.buffers = std::move(c.buffers);
  return out;
}

struct Batch {
  std::vector<std::size_t> indices;
  Tensor images;
  Tensor masks;
  std::vector<int> labels;
};

inline Batch make_batch(const SiteDataset& site, const std::vector<std::size_t>& idx) {
  Batch b;
  b.indices = idx;
  std::vector<const Tensor*> imgs, masks;
  for (std::size_t i : idx) {
    imgs.push_back(&site.images[i]);
    if (site.task == TaskKind::segmentation) masks.push_back(&site.masks[i]);
    else b.labels.push_back(site.labels[i]);
  }
  b.images = stack_tensors(imgs);
  if (!masks.empty()) b.masks = stack_tensors(masks);
  return b;
}

inline Var task_loss(Tape& tape, TaskKind task, Var out, const Batch& b) {
  if (task == TaskKind::segmentation) return dice_loss(out, tape.constant(b.masks));
  return cross_entropy(out, b.labels);
}

// Deterministic minibatch stream over a fixed index set: reshuffled each pass.
class BatchStream {
 public:
  BatchStream(std::vector<std::size_t> pool, std::size_t batch, Rng rng)
      : pool_(std::move(pool)), batch_(std::max<std::size_t>(1, batch)), rng_(std::move(rng)) {
    if (pool_.empty()) throw InvalidInput("batch stream over an empty index set");
    reshuffle();
  }

  std::vector<std::size_t> next() {
    if (pos_ >= pool_.size()) reshuffle();
    const std::size_t end = std::min(pool_.size(), pos_ + batch_);
    std::vector<std::size_t> out(pool_.begin() + static_cast<std::ptrdiff_t>(pos_), pool_.begin() + static_cast<std::ptrdiff_t>(end));
    pos_ = end;
    return out;
  }

  std::size_t batches_per_pass() const { return (pool_.size() + batch_ - 1) / batch_; }

 private:
  void reshuffle() {
    std::shuffle(pool_.begin(), pool_.end(), rng_);
    pos_ = 0;
  }

  std::vector<std::size_t> pool_;
  std::size_t batch_;
  Rng rng_;
  std::size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// Stage 1: harmonizer (decoder) training

struct HarmonizerOptions {
  std::size_t rounds = 10;
  std::size_t local_steps = 10;
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  std::size_t parallel_clients = 1;
};

// One client's local decoder optimisation for one round.
inline Decoder decoder_local_steps(const SiteDataset& site, const Encoder& enc, Decoder dec, const HarmonizerOptions& opt,
                                   int round) {
  if (opt.local_steps == 0) return dec;
  AdamWState state = AdamWState::with_lr(opt.learning_rate);
  BatchStream stream(site.split.train, opt.batch_size, make_rng(opt.seed, "harmonizer-batches", round, site.site_id));
  for (std::size_t step = 0; step < opt.local_steps; ++step) {
    const Batch b = make_batch(site, stream.next());
    Tape tape;
    Var loss = reconstruction_loss(tape, dec, enc, tape.constant(b.images), true);
    if (!std::isfinite(loss.value()[0]))
      throw NumericError("non-finite reconstruction loss (round " + std::to_string(round) + ", client " + site.site_id +
                         ", batch " + std::to_string(step) + ")");
    dec.params = adamw_step(std::move(dec.params), tape.backward(loss), state);
  }
  return dec;
}

inline double pooled_reconstruction_l1(const std::vector<const SiteDataset*>& sites, const Encoder& enc, const Decoder& dec,
                                       bool use_val = true) {
  std::vector<Tensor> imgs;
  for (const auto* s : sites)
    for (std::size_t i : use_val ? s->split.val : s->split.train) imgs.push_back(s->images[i]);
  return mean_reconstruction_l1(dec, enc, imgs);
}

namespace detail {
// Runs fn(k) for k in [0, n) on up to `threads` workers; rethrows the first
// failure in client order.
template <class F>
void for_each_client(std::size_t n, std::size_t threads, F fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t k = 0; k < n; ++k) fn(k);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(threads, n); ++t)
    pool.emplace_back([&] {
      for (std::size_t k; (k = next++) < n;) {
        try {
          fn(k);
        } catch (...) {
          errors[k] = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}
}  // namespace detail

// FedAvg over client decoders. `val_log` receives the pooled validation L1
// before training and after each round.
inline Decoder train_harmonizer_federated(const std::vector<const SiteDataset*>& clients, const Encoder& enc,
                                          const Decoder& dec0, const HarmonizerOptions& opt,
                                          Transcript* transcript = nullptr, std::vector<double>* val_log = nullptr) {
  if (!enc.frozen) throw ContractError("train_harmonizer_federated requires a frozen encoder");
  Channel channel(transcript);
  Decoder global = dec0;
  if (val_log) val_log->push_back(pooled_reconstruction_l1(clients, enc, global));
  for (std::size_t r = 1; r <= opt.rounds; ++r) {
    const int round = static_cast<int>(r);
    std::vector<std::size_t> active;
    for (std::size_t k = 0; k < clients.size(); ++k) {
      if (clients[k]->split.train.empty()) {
        log_info("harmonizer round " + std::to_string(r) + ": client " + clients[k]->site_id +
                 " has no training images, skipped");
        continue;
      }
      active.push_back(k);
    }
    if (active.empty()) throw InvalidInput("no client has training images");
    std::vector<std::optional<Upload>> uploads(active.size());
    detail::for_each_client(active.size(), opt.parallel_clients, [&](std::size_t a) {
      const SiteDataset& site = *clients[active[a]];
      Decoder local{channel.deliver(Channel::make("harmonizer", Direction::broadcast, round, site.site_id, 0, global.params))};
      local = decoder_local_steps(site, enc, std::move(local), opt, round);
      const std::size_t n = site.split.train.size();
      uploads[a] = Upload{channel.deliver(Channel::make("harmonizer", Direction::upload, round, site.site_id, n, local.params)), n};
    });
    std::vector<Upload> ups;
    for (auto& u : uploads) ups.push_back(std::move(*u));
    global.params = fedavg_aggregate(ups);
    if (val_log) {
      val_log->push_back(pooled_reconstruction_l1(clients, enc, global));
      log_info("harmonizer round " + std::to_string(r) + ": pooled val L1 " + std::to_string(val_log->back()));
    }
  }
  return global;
}

// Decoder training at a single site without any messaging; the reference for
// the single-client equivalence check.
inline Decoder train_decoder_centralized(const SiteDataset& site, const Encoder& enc, const Decoder& dec0,
                                         const HarmonizerOptions& opt) {
  Decoder dec = dec0;
  for (std::size_t r = 1; r <= opt.rounds; ++r) dec = decoder_local_steps(site, enc, std::move(dec), opt, static_cast<int>(r));
  return dec;
}

// ---------------------------------------------------------------------------
// Inputs to the task model

// How images reach the task model: raw, or harmonized through a decoder with
// a template. `content` holds per-image prepared features (whitened for WCT,
// encoded for AdaIN), indexed like the site's images.
struct InputPath {
  bool raw = true;
  StyleTransfer transfer = StyleTransfer::wct;
  const Encoder* encoder = nullptr;
  const Decoder* decoder = nullptr;
  const std::vector<Tensor>* content = nullptr;
  WctOptions wct;
};

inline Var model_input(Tape& tape, const InputPath& path, const Batch& b, Var tpl, bool training,
                       const std::optional<Tensor>& augmented_images = std::nullopt) {
  if (path.raw) return tape.constant(augmented_images ? *augmented_images : b.images);
  Tensor content;
  if (augmented_images) {
    content = prepare_content(*path.encoder, *augmented_images, path.transfer, path.wct);
  } else {
    std::vector<const Tensor*> parts;
    for (std::size_t i : b.indices) parts.push_back(&(*path.content)[i]);
    content = stack_tensors(parts);
  }
  return harmonize_prepared(tape, *path.decoder, tape.constant(std::move(content)), tpl, !training, path.transfer, path.wct);
}

inline std::vector<Tensor> prepare_site_content(const SiteDataset& site, const Encoder& enc, StyleTransfer kind,
                                                const WctOptions& wct) {
  std::vector<Tensor> out;
  for (std::size_t start = 0; start < site.size(); start += 32) {
    std::vector<const Tensor*> imgs;
    for (std::size_t i = start; i < std::min(site.size(), start + 32); ++i) imgs.push_back(&site.images[i]);
    const Tensor c = prepare_content(enc, stack_tensors(imgs), kind, wct);
    for (std::size_t k = 0; k < imgs.size(); ++k) out.push_back(unstack(c, k));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Local training

struct LocalSpec {
  bool learn_template = false;
  bool learn_model = true;
  std::size_t iterations = 0;
  std::size_t batch_size = 16;
  double eta = 1e-4;
  double beta = 1e-4;
  double mu = 0.0;
  const ParamSet* proximal_anchor = nullptr;  // server weights for the proximal term
  OptimizerKind optimizer = OptimizerKind::adamw;
  bool augment = false;
  std::uint64_t seed = 0;
  int round = 0;
  std::string client_id;
};

struct LocalResult {
  TaskModel model;
  Tensor template_features;
  double mean_loss = 0.0;
  std::size_t steps = 0;
};

inline Var proximal_term(Tape& tape, const ParamSet& current, const ParamSet& anchor, double mu) {
  Var total = tape.constant(Tensor::scalar(0.0));
  for (const auto& e : current) {
    Var w = tape.leaf(e.tensor, e.name);
    Var d = sub(w, tape.constant(anchor.at(e.name)));
    total = add(total, sum(mul(d, d)));
  }
  return scale(total, 0.5 * mu);
}

// Joint template and task-model optimisation at one client. The decoder and
// encoder stay fixed; the template and model each get their own optimizer.
inline LocalResult local_update(const SiteDataset& site, const InputPath& path, TaskModel model, Tensor tpl,
                                const LocalSpec& spec) {
  LocalResult res{std::move(model), std::move(tpl), 0.0, 0};
  if (spec.iterations == 0) return res;
  AdamWState model_state = AdamWState::with_lr(spec.beta);
  AdamWState tpl_state = AdamWState::with_lr(spec.eta);
  BatchStream stream(site.split.train, spec.batch_size, make_rng(spec.seed, "local-batches", spec.round, spec.client_id));
  double loss_sum = 0.0;
  for (std::size_t step = 0; step < spec.iterations; ++step) {
    const Batch b = make_batch(site, stream.next());
    std::optional<Tensor> aug;
    Batch target = b;
    if (spec.augment) {
      std::vector<Tensor> imgs, masks;
      for (std::size_t k = 0; k < b.indices.size(); ++k) {
        std::optional<Tensor> m;
        if (site.task == TaskKind::segmentation) m = site.masks[b.indices[k]];
        Augmented a = augment(site.images[b.indices[k]], m,
                              derive_seed(spec.seed, "augment", spec.round, spec.client_id, step, k));
        imgs.push_back(std::move(a.image));
        if (a.mask) masks.push_back(std::move(*a.mask));
      }
      std::vector<const Tensor*> pi, pm;
      for (auto& t : imgs) pi.push_back(&t);
      for (auto& t : masks) pm.push_back(&t);
      aug = stack_tensors(pi);
      if (!pm.empty()) target.masks = stack_tensors(pm);
    }
    Tape tape;
    Var tv = spec.learn_template ? tape.leaf(res.template_features, "template") : tape.constant(res.template_features);
    Var input = model_input(tape, path, b, tv, true, aug);
    Var out = task_forward(tape, res.model, input, Pass{spec.learn_model, spec.learn_model});
    Var loss = task_loss(tape, site.task, out, target);
    if (spec.learn_model && spec.mu > 0.0 && spec.proximal_anchor)
      loss = add(loss, proximal_term(tape, res.model.params, *spec.proximal_anchor, spec.mu));
    const double lv = loss.value()[0];
    if (!std::isfinite(lv))
      throw NumericError("non-finite local loss (round " + std::to_string(spec.round) + ", client " + spec.client_id +
                         ", batch " + std::to_string(step) + ")");
    loss_sum += lv;
    GradientMap grads = tape.backward(loss);
    if (spec.learn_model) {
      res.model.params = spec.optimizer == OptimizerKind::adamw ? adamw_step(std::move(res.model.params), grads, model_state)
                                                                : sgd_step(std::move(res.model.params), grads, spec.beta);
    }
    if (spec.learn_template) {
      ParamSet tp;
      tp.add("template", std::move(res.template_features));
      tp = spec.optimizer == OptimizerKind::adamw ? adamw_step(std::move(tp), grads, tpl_state)
                                                  : sgd_step(std::move(tp), grads, spec.eta);
      res.template_features = tp.at("template");
    }
  }
  res.steps = spec.iterations;
  res.mean_loss = loss_sum / static_cast<double>(spec.iterations);
  return res;
}

inline std::size_t local_iterations(const FedConfig& cfg, const SiteDataset& site) {
  if (cfg.local_epochs == 0) return cfg.local_iters;
  const std::size_t per_epoch = (site.split.train.size() + cfg.batch_size - 1) / cfg.batch_size;
  return cfg.local_epochs * per_epoch;
}

// ---------------------------------------------------------------------------
// Evaluation

// Per-image scores of one split: Dice per image for segmentation,
// probability of class 1 for classification.
inline std::vector<double> predict_scores(const SiteDataset& site, const std::vector<std::size_t>& idx,
                                          const InputPath& path, const TaskModel& model, const Tensor& tpl,
                                          const DiceOptions& dice_opt = {}) {
  std::vector<double> out;
  TaskModel m = model;
  for (std::size_t start = 0; start < idx.size(); start += 32) {
    std::vector<std::size_t> chunk(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                   idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), start + 32)));
    const Batch b = make_batch(site, chunk);
    Tape tape;
    Var input = model_input(tape, path, b, tape.constant(tpl), false);
    Var y = task_forward(tape, m, input, Pass{false, false});
    for (std::size_t k = 0; k < chunk.size(); ++k) {
      if (site.task == TaskKind::segmentation) {
        out.push_back(dice(unstack(y.value(), k), site.masks[chunk[k]], dice_opt));
      } else {
        const auto p = softmax(unstack(y.value(), k).data());
        out.push_back(p[1]);
      }
    }
  }
  return out;
}

inline std::vector<int> split_labels(const SiteDataset& site, const std::vector<std::size_t>& idx) {
  std::vector<int> l;
  for (std::size_t i : idx) l.push_back(site.labels[i]);
  return l;
}

inline bool has_both_classes(const std::vector<int>& l) {
  return std::find(l.begin(), l.end(), 0) != l.end() && std::find(l.begin(), l.end(), 1) != l.end();
}

// ---------------------------------------------------------------------------
// Stage 2: initial task learning

struct InitialTask {
  TaskModel model;
  Template tpl;
  std::size_t template_image = 0;
};

inline InitialTask initial_task_learning(const SiteDataset& site, const Encoder& enc, const InputPath& path,
                                         std::size_t epochs, double lr, std::size_t batch_size, std::uint64_t seed,
                                         NormKind norm = NormKind::instance) {
  if (site.split.train.empty()) throw InvalidInput("initial_task_learning: site " + site.site_id + " has no training images");
  InitialTask it;
  Rng pick = make_rng(seed, "template-image", site.site_id);
  it.template_image = site.split.train[uniform_index(pick, site.split.train.size())];
  it.tpl.features = encode(enc, site.images[it.template_image]);
  it.model = make_task_model(site.task, derive_seed(seed, "initial-model"), norm);
  AdamWState state = AdamWState::with_lr(lr);
  BatchStream stream(site.split.train, batch_size, make_rng(seed, "initial-batches", site.site_id));
  const std::size_t steps = epochs * stream.batches_per_pass();
  for (std::size_t step = 0; step < steps; ++step) {
    const Batch b = make_batch(site, stream.next());
    Tape tape;
    Var input = model_input(tape, path, b, tape.constant(it.tpl.features), true);
    Var loss = task_loss(tape, site.task, task_forward(tape, it.model, input, Pass{true, true}), b);
    if (!std::isfinite(loss.value()[0]))
      throw NumericError("non-finite loss in initial task learning at batch " + std::to_string(step));
    it.model.params = adamw_step(std::move(it.model.params), tape.backward(loss), state);
  }
  return it;
}

// ---------------------------------------------------------------------------
// Experiment driver

struct Recipe {
  bool raw = false;
  StyleTransfer transfer = StyleTransfer::wct;
  bool client_decoders = false;
  bool learn_template = false;
  bool aggregate_template = false;
  bool learn_model = false;
  bool initial_model = true;
  bool weighted_model_aggregation = false;
  bool proximal = false;
  NormKind norm = NormKind::instance;
  bool local_norm = false;
};

inline Recipe recipe_for(Strategy s) {
  Recipe r;
  switch (s) {
    case Strategy::fettl:
      r.learn_template = r.aggregate_template = r.learn_model = true;
      break;
    case Strategy::fettl_local:
      r.learn_template = r.learn_model = true;
      break;
    case Strategy::fettl_scratch:
      r.learn_template = r.aggregate_template = r.learn_model = true;
      r.initial_model = false;
      break;
    case Strategy::fedavg:
    case Strategy::fedprox:
    case Strategy::fedbn:
      r.raw = true;
      r.learn_model = true;
      r.initial_model = false;
      r.weighted_model_aggregation = true;
      r.proximal = s == Strategy::fedprox;
      if (s == Strategy::fedbn) {
        r.norm = NormKind::batch;
        r.local_norm = true;
      }
      break;
    case Strategy::adain_ablation:
      r.transfer = StyleTransfer::adain;
      r.client_decoders = true;
      break;
    case Strategy::dataalchemy_ablation:
      r.client_decoders = true;
      r.learn_template = true;
      break;
    case Strategy::fed_dataalchemy_ablation:
      r.learn_template = true;
      break;
    case Strategy::global_template_ablation:
      r.learn_template = r.aggregate_template = true;
      break;
  }
  return r;
}

inline bool is_norm_param(const std::string& name) { return name.find(".norm.") != std::string::npos; }

inline ParamSet filter_params(const ParamSet& ps, bool keep_norm) {
  ParamSet out;
  for (const auto& e : ps)
    if (is_norm_param(e.name) == keep_norm) out.add(e.name, e.tensor);
  return out;
}

inline void overwrite_params(ParamSet& dst, const ParamSet& src) {
  for (const auto& e : src) dst.at(e.name) = e.tensor;
}

// Per-seed artefacts shared by all strategies: the pretrained encoder, the
// federated and client-wise decoders, prepared content features and the
// initial task models.
class Experiment {
 public:
  Experiment(const std::vector<SiteDataset>& sites, FedConfig cfg, std::uint64_t seed)
      : sites_(sites), cfg_(std::move(cfg)), seed_(seed) {
    if (sites_.empty()) throw ConfigError("experiment has no sites");
    for (const auto& s : sites_) {
      if (s.task != cfg_.task)
        throw ConfigError("site " + s.site_id + " is a " + to_string(s.task) + " dataset but the task is " +
                          to_string(cfg_.task));
      if (s.image_size != sites_[0].image_size) throw ConfigError("sites differ in image size");
    }
    init_site_ = pick_init_site();
  }

  const FedConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<SiteDataset>& sites() const { return sites_; }
  std::size_t init_site() const { return init_site_; }
  Transcript& transcript() { return transcript_; }
  const std::vector<double>& harmonizer_log() const { return harmonizer_log_; }

  const Encoder& encoder() {
    if (!encoder_) {
      const auto pool = gen_pretrain_pool(cfg_.task, cfg_.pretrain_images, sites_[0].image_size, derive_seed(seed_, "pool"));
      PretrainOptions po;
      po.learning_rate = cfg_.pretrain_lr;
      PretrainResult pr = pretrain_encoder(pool, cfg_.pretrain_epochs, derive_seed(seed_, "pretrain"), po);
      log_info("encoder pretraining: L1 " + std::to_string(pr.initial_l1) + " -> " + std::to_string(pr.final_l1));
      encoder_ = std::move(pr.encoder);
      pretrained_decoder_ = std::move(pr.decoder);
    }
    return *encoder_;
  }

  const Decoder& pretrained_decoder() {
    encoder();
    return *pretrained_decoder_;
  }

  HarmonizerOptions harmonizer_options() const {
    return {cfg_.harmonizer_rounds, cfg_.harmonizer_local_steps, cfg_.harmonizer_batch, cfg_.harmonizer_lr,
            derive_seed(seed_, "harmonizer"), cfg_.parallel_clients};
  }

  const Decoder& federated_decoder() {
    if (!fed_decoder_) {
      std::vector<const SiteDataset*> ptrs;
      for (const auto& s : sites_) ptrs.push_back(&s);
      harmonizer_log_.clear();
      fed_decoder_ = train_harmonizer_federated(ptrs, encoder(), pretrained_decoder(), harmonizer_options(), &transcript_,
                                                &harmonizer_log_);
    }
    return *fed_decoder_;
  }

  // Each site trains its own decoder on local data only, with the same
  // number of optimisation steps as the federated harmonizer.
  const Decoder& client_decoder(std::size_t k) {
    if (!client_decoders_.count(k))
      client_decoders_[k] = train_decoder_centralized(sites_[k], encoder(), pretrained_decoder(), harmonizer_options());
    return client_decoders_.at(k);
  }

  const std::vector<Tensor>& content(std::size_t k, StyleTransfer kind) {
    auto key = std::make_pair(k, kind);
    if (!content_.count(key)) content_[key] = prepare_site_content(sites_[k], encoder(), kind, cfg_.wct);
    return content_.at(key);
  }

  InputPath input_path(std::size_t k, const Recipe& r) {
    InputPath p;
    p.raw = r.raw;
    if (r.raw) return p;
    p.transfer = r.transfer;
    p.encoder = &encoder();
    p.decoder = r.client_decoders ? &client_decoder(k) : &federated_decoder();
    p.content = &content(k, r.transfer);
    p.wct = cfg_.wct;
    return p;
  }

  const InitialTask& initial_task(const Recipe& r) {
    auto key = std::make_pair(r.client_decoders, r.transfer);
    if (!initial_.count(key)) {
      Recipe harmonized = r;
      harmonized.raw = false;
      initial_[key] = initial_task_learning(sites_[init_site_], encoder(), input_path(init_site_, harmonized),
                                            cfg_.init_epochs, cfg_.init_lr, cfg_.batch_size, derive_seed(seed_, "stage2"));
      log_info("initial task model trained at site " + sites_[init_site_].site_id);
    }
    return initial_.at(key);
  }

  Template initial_template(const Recipe& r, TemplateInit mode) {
    const InitialTask& it = initial_task(r);
    switch (mode) {
      case TemplateInit::encoded_image:
        return it.tpl;
      case TemplateInit::raw_image: {
        const Tensor& img = sites_[init_site_].images[it.template_image];
        const Shape& ts = it.tpl.features.shape();
        const std::size_t c = ts[0], h = ts[1], w = ts[2], f = img.dim(1) / h;
        Tensor t(ts);
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
              double s = 0.0;
              for (std::size_t dy = 0; dy < f; ++dy)
                for (std::size_t dx = 0; dx < f; ++dx) s += img[((ch % 3) * img.dim(1) + y * f + dy) * img.dim(2) + x * f + dx];
              t[(ch * h + y) * w + x] = s / static_cast<double>(f * f);
            }
        return {t};
      }
      case TemplateInit::gaussian_noise: {
        Rng rng = make_rng(seed_, "template-noise");
        Tensor t(it.tpl.features.shape());
        for (double& v : t.data()) v = normal(rng);
        return {t};
      }
    }
    throw ConfigError("unknown template init");
  }

  // Allowed payload schema for the privacy audit.
  std::map<std::string, Shape> payload_schema() {
    std::map<std::string, Shape> out;
    for (const auto& e : pretrained_decoder().params) out[e.name] = e.tensor.shape();
    for (NormKind nk : {NormKind::instance, NormKind::batch}) {
      TaskModel m = make_task_model(cfg_.task, 0, nk);
      for (const auto& e : m.params) out[e.name] = e.tensor.shape();
    }
    const std::size_t s = sites_[0].image_size / kDownsample;
    out["template"] = Shape{kFeatureChannels, s, s};
    return out;
  }

 private:
  std::size_t pick_init_site() const {
    if (!cfg_.init_site.empty()) {
      for (std::size_t k = 0; k < sites_.size(); ++k)
        if (sites_[k].site_id == cfg_.init_site) return k;
      throw ConfigError("init_site '" + cfg_.init_site + "' is not one of the sites");
    }
    std::size_t best = 0;
    for (std::size_t k = 1; k < sites_.size(); ++k)
      if (sites_[k].split.train.size() > sites_[best].split.train.size()) best = k;
    return best;
  }

  const std::vector<SiteDataset>& sites_;
  FedConfig cfg_;
  std::uint64_t seed_;
  std::size_t init_site_ = 0;
  std::optional<Encoder> encoder_;
  std::optional<Decoder> pretrained_decoder_;
  std::optional<Decoder> fed_decoder_;
  std::vector<double> harmonizer_log_;
  std::map<std::size_t, Decoder> client_decoders_;
  std::map<std::pair<std::size_t, StyleTransfer>, std::vector<Tensor>> content_;
  std::map<std::pair<bool, StyleTransfer>, InitialTask> initial_;
  Transcript transcript_;
};

// Model and template actually used at each site.
struct SiteState {
  TaskModel model;
  Tensor tpl;
};

struct RunResult {
  RunReport report;
  std::vector<SiteState> final_state;  // the selected checkpoint
};

namespace detail {

struct Evaluation {
  std::map<std::string, double> site_metric;
  double pooled = 0.0;
  std::vector<ImageScore> scores;
};

inline Evaluation evaluate_split(Experiment& ex, const Recipe& r, const std::vector<SiteState>& state, bool test) {
  Evaluation ev;
  std::vector<double> all_scores;
  std::vector<int> all_labels;
  double dice_sum = 0.0;
  std::size_t dice_n = 0;
  for (std::size_t k = 0; k < ex.sites().size(); ++k) {
    const SiteDataset& site = ex.sites()[k];
    const auto& idx = test ? site.split.test : site.split.val;
    const auto scores = predict_scores(site, idx, ex.input_path(k, r), state[k].model, state[k].tpl, ex.config().dice);
    if (site.task == TaskKind::segmentation) {
      double s = 0.0;
      for (std::size_t i = 0; i < scores.size(); ++i) {
        s += scores[i];
        ev.scores.push_back({site.site_id, idx[i], scores[i]});
      }
      ev.site_metric[site.site_id] = s / static_cast<double>(scores.size());
      dice_sum += s;
      dice_n += scores.size();
    } else {
      const auto labels = split_labels(site, idx);
      if (has_both_classes(labels)) ev.site_metric[site.site_id] = aupr(scores, labels);
      for (std::size_t i = 0; i < scores.size(); ++i) {
        ev.scores.push_back({site.site_id, idx[i], labels[i] == 1 ? scores[i] : 1.0 - scores[i]});
        all_scores.push_back(scores[i]);
        all_labels.push_back(labels[i]);
      }
    }
  }
  if (ex.config().task == TaskKind::segmentation) {
    ev.pooled = dice_sum / static_cast<double>(dice_n);
  } else {
    ev.pooled = has_both_classes(all_labels) ? aupr(all_scores, all_labels) : 0.0;
  }
  return ev;
}

}  // namespace detail

inline std::string metric_name(TaskKind t) { return t == TaskKind::segmentation ? "dice" : "aupr"; }

// Runs one strategy end to end and returns the report plus the selected
// checkpoint. `init_override` replaces the configured template initialisation.
inline RunResult run_strategy(Experiment& ex, Strategy strategy, std::optional<TemplateInit> init_override = std::nullopt) {
  const FedConfig& cfg = ex.config();
  const Recipe r = recipe_for(strategy);
  const std::size_t n_sites = ex.sites().size();
  const std::string metric = metric_name(cfg.task);
  const TemplateInit init_mode = init_override.value_or(cfg.template_init);

  // Round-0 server state.
  TaskModel global_model;
  Template global_tpl;
  if (r.raw) {
    global_model = make_task_model(cfg.task, derive_seed(ex.seed(), "scratch-model"), r.norm);
    global_tpl.features = Tensor({1}, 0.0);
  } else {
    global_model = r.initial_model ? ex.initial_task(r).model
                                   : make_task_model(cfg.task, derive_seed(ex.seed(), "scratch-model"), r.norm);
    global_tpl = ex.initial_template(r, init_mode);
    for (std::size_t k = 0; k < n_sites; ++k) ex.input_path(k, r);  // build caches before any parallel section
  }

  std::vector<SiteState> sites(n_sites, SiteState{global_model, global_tpl.features});
  RunReport report;
  report.strategy = to_string(strategy);
  report.task = to_string(cfg.task);
  report.seed = ex.seed();

  auto record_val = [&](int round, const std::vector<SiteState>& st) {
    const detail::Evaluation ev = detail::evaluate_split(ex, r, st, false);
    for (const auto& [site, v] : ev.site_metric) report.add(round, site, "val", metric, v);
    report.add(round, "all", "val", metric, ev.pooled);
    return ev.pooled;
  };

  double best = record_val(0, sites);
  int best_round = 0;
  std::vector<SiteState> best_state = sites;

  const bool trains = r.learn_model || r.learn_template;
  Channel channel(&ex.transcript());
  for (std::size_t rr = 1; trains && rr <= cfg.rounds; ++rr) {
    const int round = static_cast<int>(rr);
    ParamSet broadcast_model = global_model.params;
    std::vector<LocalResult> results(n_sites);
    detail::for_each_client(n_sites, cfg.parallel_clients, [&](std::size_t k) {
      const SiteDataset& site = ex.sites()[k];
      // Broadcast: shared weights and, when aggregated, the global template.
      TaskModel local = sites[k].model;
      ParamSet bcast = r.local_norm ? filter_params(broadcast_model, false) : broadcast_model;
      if (r.aggregate_template) bcast.add("template", global_tpl.features);
      ParamSet received = channel.deliver(Channel::make("task", Direction::broadcast, round, site.site_id, 0, bcast));
      Tensor tpl = sites[k].tpl;
      if (received.contains("template")) tpl = received.at("template");
      for (const auto& e : received)
        if (e.name != "template") local.params.at(e.name) = e.tensor;

      LocalSpec spec;
      spec.learn_template = r.learn_template;
      spec.learn_model = r.learn_model;
      spec.iterations = local_iterations(cfg, site);
      spec.batch_size = cfg.batch_size;
      spec.eta = cfg.eta;
      spec.beta = cfg.beta;
      spec.mu = r.proximal ? cfg.mu : 0.0;
      spec.proximal_anchor = &broadcast_model;
      spec.optimizer = cfg.optimizer;
      spec.augment = cfg.augment;
      spec.seed = derive_seed(ex.seed(), "stage3");
      spec.round = round;
      spec.client_id = site.site_id;
      LocalResult res = local_update(site, ex.input_path(k, r), std::move(local), std::move(tpl), spec);

      // Upload: everything that the server aggregates.
      ParamSet up;
      if (r.learn_model)
        for (const auto& e : res.model.params)
          if (!(r.local_norm && is_norm_param(e.name))) up.add(e.name, e.tensor);
      if (r.aggregate_template) up.add("template", res.template_features);
      if (!up.empty()) {
        ParamSet got = channel.deliver(
            Channel::make("task", Direction::upload, round, site.site_id, site.split.train.size(), up));
        for (const auto& e : got) {
          if (e.name == "template") res.template_features = e.tensor;
          else res.model.params.at(e.name) = e.tensor;
        }
      }
      results[k] = std::move(res);
    });

    // Server aggregation.
    if (r.learn_model) {
      ParamSet shared;
      if (r.weighted_model_aggregation) {
        std::vector<Upload> ups;
        for (std::size_t k = 0; k < n_sites; ++k)
          ups.push_back({r.local_norm ? filter_params(results[k].model.params, false) : results[k].model.params,
                         ex.sites()[k].split.train.size()});
        shared = fedavg_aggregate(ups);
      } else {
        std::vector<ParamSet> ups;
        for (const auto& res : results) ups.push_back(res.model.params);
        shared = mean_aggregate(ups);
      }
      overwrite_params(global_model.params, shared);
    }
    if (r.aggregate_template) {
      std::vector<Template> tps;
      for (const auto& res : results) tps.push_back(Template{res.template_features});
      global_tpl = mean_aggregate(tps);
    }

    // Site views after aggregation.
    for (std::size_t k = 0; k < n_sites; ++k) {
      SiteState& s = sites[k];
      if (r.learn_model) {
        if (r.local_norm) {
          s.model = results[k].model;  // keeps local norm parameters and running statistics
          overwrite_params(s.model.params, filter_params(global_model.params, false));
        } else {
          s.model = global_model;
        }
      }
      s.tpl = r.aggregate_template ? global_tpl.features : results[k].template_features;
      report.add(round, ex.sites()[k].site_id, "train", "loss", results[k].mean_loss);
    }

    const double v = record_val(round, sites);
    log_info(to_string(strategy) + " round " + std::to_string(round) + ": pooled val " + metric + " " + std::to_string(v));
    if (v > best) {
      best = v;
      best_round = round;
      best_state = sites;
    }
  }

  report.selected_round = best_round;
  const detail::Evaluation test = detail::evaluate_split(ex, r, best_state, true);
  for (const auto& [site, v] : test.site_metric) {
    report.final_test[site][metric] = v;
    report.add(best_round, site, "test", metric, v);
  }
  report.image_scores = test.scores;
  double mean_site = 0.0;
  for (const auto& [site, v] : test.site_metric) mean_site += v / static_cast<double>(test.site_metric.size());
  report.summary["mean_site_test_" + metric] = mean_site;
  report.summary["pooled_test_" + metric] = test.pooled;
  report.summary["best_val_" + metric] = best;
  return {std::move(report), std::move(best_state)};
}

// FeTTL run per template initialisation; modes differ only in the round-0
// template.
inline std::map<TemplateInit, RunResult> template_init_study(Experiment& ex, const std::vector<TemplateInit>& modes) {
  std::map<TemplateInit, RunResult> out;
  for (TemplateInit m : modes) out.emplace(m, run_strategy(ex, Strategy::fettl, m));
  return out;
}

// Centralized reference for raw-image baselines: the same local schedule
// applied round after round at one site, with no messaging or aggregation.
inline TaskModel train_centralized(const SiteDataset& site, const FedConfig& cfg, std::uint64_t seed) {
  TaskModel model = make_task_model(cfg.task, derive_seed(seed, "scratch-model"), NormKind::instance);
  InputPath raw;
  for (std::size_t rr = 1; rr <= cfg.rounds; ++rr) {
    LocalSpec spec;
    spec.iterations = local_iterations(cfg, site);
    spec.batch_size = cfg.batch_size;
    spec.eta = cfg.eta;
    spec.beta = cfg.beta;
    spec.optimizer = cfg.optimizer;
    spec.augment = cfg.augment;
    spec.seed = derive_seed(seed, "stage3");
    spec.round = static_cast<int>(rr);
    spec.client_id = site.site_id;
    model = local_update(site, raw, std::move(model), Tensor({1}, 0.0), spec).model;
  }
  return model;
}

// HSV-mean style descriptors of each site's test images as the task model
// sees them (raw, or harmonized with each site's template).
inline StylePoints style_points(Experiment& ex, const Recipe& r, const std::vector<SiteState>& state) {
  StylePoints pts;
  for (std::size_t k = 0; k < ex.sites().size(); ++k) {
    const SiteDataset& site = ex.sites()[k];
    auto& v = pts[site.site_id];
    if (r.raw) {
      for (std::size_t i : site.split.test) v.push_back(hsv_mean(site.images[i]));
      continue;
    }
    const InputPath path = ex.input_path(k, r);
    const Batch b = make_batch(site, site.split.test);
    Tape tape;
    Var h = model_input(tape, path, b, tape.constant(state[k].tpl), false);
    for (std::size_t i = 0; i < b.indices.size(); ++i) v.push_back(hsv_mean(unstack(h.value(), i)));
  }
  return pts;
}

}  // namespace fettl
