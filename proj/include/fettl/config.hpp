#pragma once

// JSON experiment configuration: strict parsing, defaults and digest.
//
// Schema (all keys optional unless noted; unknown keys are rejected):
//   task             "segmentation" | "classification"
//   image_size       int, divisible by 4, 8..64
//   data_seed        int; when absent, data is generated from each run seed
//   size_factor      scale applied to default site sizes
//   sites            [{"id": str, "n": int, "class_balance": frac}]
//   data_dir         directory written by gen-data; loaded instead of generating
//   strategy         see fedcore strategy names
//   seeds            [int]
//   output           output directory
//   strict           bool; requires "mu" when strategy is fedprox
//   pretrain         {images, epochs, lr}
//   harmonizer       {rounds, local_steps, batch_size, lr}
//   init             {site, epochs, lr}
//   federated        {rounds, local_iters, local_epochs, batch_size, eta, beta, mu,
//                     optimizer, template_init, augment, parallel_clients}
//   wct              {epsilon, max_iterations, tolerance}
//   metrics          {dice_threshold, dice_both_empty}

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fettl/fedcore.hpp"

namespace fettl {

struct SiteSpec {
  std::string id;
  std::size_t n = 0;
  double class_balance = 0.5;
};

struct ExperimentConfig {
  FedConfig fed;
  std::size_t image_size = 32;
  std::optional<std::uint64_t> data_seed;
  double size_factor = 1.0;
  std::vector<SiteSpec> sites;
  std::string data_dir;
  Strategy strategy = Strategy::fettl;
  std::vector<std::uint64_t> seeds{0};
  std::string output = "fettl-out";
  bool strict = false;
  bool mu_given = false;  // 'federated.mu' present in the source

  nlohmann::json to_json() const;
  std::string digest() const { return hex64(fnv1a(to_json().dump())); }
};

// Default site layouts: five imbalanced segmentation sites and two
// classification sites.
inline std::vector<SiteSpec> default_sites(TaskKind task, double size_factor) {
  std::vector<SiteSpec> out;
  auto scaled = [&](std::size_t n) { return std::max<std::size_t>(8, static_cast<std::size_t>(std::llround(n * size_factor))); };
  if (task == TaskKind::segmentation) {
    const std::pair<const char*, std::size_t> sizes[] = {{"A", 50}, {"B", 98}, {"C", 47}, {"D", 230}, {"E", 400}};
    for (auto [id, n] : sizes) out.push_back({id, scaled(n), 0.5});
  } else {
    out.push_back({"X", scaled(160), 0.4});
    out.push_back({"Y", scaled(120), 0.3});
  }
  return out;
}

namespace detail {

inline std::string optimizer_name(OptimizerKind k) { return k == OptimizerKind::adamw ? "adamw" : "sgd"; }

class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + "expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(where(key) + "has the wrong type");
    }
  }

  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  const nlohmann::json& at(const char* key) const { return j_.at(key); }

  std::string where(const std::string& key = "") const {
    std::string p = path_.empty() ? key : (key.empty() ? path_ : path_ + "." + key);
    return p.empty() ? "" : "'" + p + "': ";
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown key '" + (path_.empty() ? k : path_ + "." + k) + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

inline std::size_t line_of(const std::string& text, std::size_t byte) {
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(std::min(byte, text.size())), '\n'));
}

}  // namespace detail

inline void check_strict(const ExperimentConfig& c) {
  if (c.strict && c.strategy == Strategy::fedprox && !c.mu_given)
    throw ConfigError("strict mode: 'federated.mu' is required for fedprox");
}

inline ExperimentConfig parse_config(const nlohmann::json& j) {
  using detail::ObjectReader;
  using detail::require;
  ExperimentConfig c;
  ObjectReader r(j, "");

  std::string task = "segmentation";
  r.get("task", task);
  c.fed.task = parse_task(task);
  r.get("image_size", c.image_size);
  require(c.image_size >= 8 && c.image_size <= 64 && c.image_size % kDownsample == 0,
          "'image_size' must be a multiple of 4 between 8 and 64");
  if (r.has("data_seed")) {
    std::uint64_t ds = 0;
    r.get("data_seed", ds);
    c.data_seed = ds;
  }
  r.get("size_factor", c.size_factor);
  require(c.size_factor > 0.0, "'size_factor' must be positive");
  r.get("data_dir", c.data_dir);
  std::string strategy = "fettl";
  r.get("strategy", strategy);
  c.strategy = parse_strategy(strategy);
  r.get("seeds", c.seeds);
  require(!c.seeds.empty(), "'seeds' must not be empty");
  r.get("output", c.output);
  r.get("strict", c.strict);

  if (r.has("sites")) {
    const auto& arr = r.at("sites");
    require(arr.is_array() && !arr.empty(), "'sites' must be a non-empty array");
    std::set<std::string> ids;
    for (std::size_t i = 0; i < arr.size(); ++i) {
      ObjectReader s(arr[i], "sites[" + std::to_string(i) + "]");
      SiteSpec spec;
      s.get("id", spec.id);
      s.get("n", spec.n);
      s.get("class_balance", spec.class_balance);
      s.finish();
      require(!spec.id.empty(), s.where("id") + "missing site id");
      require(ids.insert(spec.id).second, "duplicate site id '" + spec.id + "'");
      require(spec.n >= 4, s.where("n") + "need at least 4 images");
      require(spec.class_balance > 0.0 && spec.class_balance < 1.0, s.where("class_balance") + "must lie in (0, 1)");
      c.sites.push_back(spec);
    }
  } else {
    c.sites = default_sites(c.fed.task, c.size_factor);
  }

  FedConfig& f = c.fed;
  if (r.has("pretrain")) {
    ObjectReader s(r.at("pretrain"), "pretrain");
    s.get("images", f.pretrain_images);
    s.get("epochs", f.pretrain_epochs);
    s.get("lr", f.pretrain_lr);
    s.finish();
  }
  if (r.has("harmonizer")) {
    ObjectReader s(r.at("harmonizer"), "harmonizer");
    s.get("rounds", f.harmonizer_rounds);
    s.get("local_steps", f.harmonizer_local_steps);
    s.get("batch_size", f.harmonizer_batch);
    s.get("lr", f.harmonizer_lr);
    s.finish();
  }
  if (r.has("init")) {
    ObjectReader s(r.at("init"), "init");
    s.get("site", f.init_site);
    s.get("epochs", f.init_epochs);
    s.get("lr", f.init_lr);
    s.finish();
  }
  if (r.has("federated")) {
    ObjectReader s(r.at("federated"), "federated");
    s.get("rounds", f.rounds);
    s.get("local_iters", f.local_iters);
    s.get("local_epochs", f.local_epochs);
    s.get("batch_size", f.batch_size);
    s.get("eta", f.eta);
    s.get("beta", f.beta);
    c.mu_given = s.has("mu");
    s.get("mu", f.mu);
    std::string opt = detail::optimizer_name(f.optimizer);
    s.get("optimizer", opt);
    require(opt == "adamw" || opt == "sgd", "'federated.optimizer' must be adamw or sgd");
    f.optimizer = opt == "adamw" ? OptimizerKind::adamw : OptimizerKind::sgd;
    std::string init = to_string(f.template_init);
    s.get("template_init", init);
    f.template_init = parse_template_init(init);
    s.get("augment", f.augment);
    s.get("parallel_clients", f.parallel_clients);
    s.finish();
  }
  if (r.has("wct")) {
    ObjectReader s(r.at("wct"), "wct");
    s.get("epsilon", f.wct.epsilon);
    s.get("max_iterations", f.wct.max_iterations);
    s.get("tolerance", f.wct.tolerance);
    s.finish();
  }
  if (r.has("metrics")) {
    ObjectReader s(r.at("metrics"), "metrics");
    s.get("dice_threshold", c.fed.dice.threshold);
    s.get("dice_both_empty", c.fed.dice.both_empty);
    s.finish();
  }
  r.finish();

  require(f.batch_size >= 1 && f.harmonizer_batch >= 1, "batch sizes must be at least 1");
  require(f.eta >= 0.0 && f.beta >= 0.0 && f.mu >= 0.0, "'eta', 'beta' and 'mu' must be non-negative");
  require(f.wct.epsilon > 0.0, "'wct.epsilon' must be positive");
  require(f.parallel_clients >= 1, "'federated.parallel_clients' must be at least 1");
  require(c.fed.dice.both_empty == 0.0 || c.fed.dice.both_empty == 1.0, "'metrics.dice_both_empty' must be 0 or 1");
  check_strict(c);
  if (!f.init_site.empty()) {
    bool found = false;
    for (const auto& s : c.sites) found = found || s.id == f.init_site;
    require(found || !c.data_dir.empty(), "'init.site' names no configured site");
  }
  return c;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("line " + std::to_string(detail::line_of(text, e.byte == 0 ? 0 : e.byte - 1)) + ": " + e.what());
  }
  return parse_config(j);
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  try {
    return parse_config_text(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j;
  j["task"] = to_string(fed.task);
  j["image_size"] = image_size;
  if (data_seed) j["data_seed"] = *data_seed;
  j["size_factor"] = size_factor;
  auto& s = j["sites"] = nlohmann::json::array();
  for (const auto& site : sites) s.push_back({{"id", site.id}, {"n", site.n}, {"class_balance", site.class_balance}});
  j["data_dir"] = data_dir;
  j["strategy"] = to_string(strategy);
  j["seeds"] = seeds;
  j["output"] = output;
  j["strict"] = strict;
  j["pretrain"] = {{"images", fed.pretrain_images}, {"epochs", fed.pretrain_epochs}, {"lr", fed.pretrain_lr}};
  j["harmonizer"] = {{"rounds", fed.harmonizer_rounds},
                     {"local_steps", fed.harmonizer_local_steps},
                     {"batch_size", fed.harmonizer_batch},
                     {"lr", fed.harmonizer_lr}};
  j["init"] = {{"site", fed.init_site}, {"epochs", fed.init_epochs}, {"lr", fed.init_lr}};
  j["federated"] = {{"rounds", fed.rounds},
                    {"local_iters", fed.local_iters},
                    {"local_epochs", fed.local_epochs},
                    {"batch_size", fed.batch_size},
                    {"eta", fed.eta},
                    {"beta", fed.beta},
                    {"mu", fed.mu},
                    {"optimizer", detail::optimizer_name(fed.optimizer)},
                    {"template_init", to_string(fed.template_init)},
                    {"augment", fed.augment},
                    {"parallel_clients", fed.parallel_clients}};
  j["wct"] = {{"epsilon", fed.wct.epsilon}, {"max_iterations", fed.wct.max_iterations}, {"tolerance", fed.wct.tolerance}};
  j["metrics"] = {{"dice_threshold", fed.dice.threshold}, {"dice_both_empty", fed.dice.both_empty}};
  return j;
}

// Digest of everything that influences results. Output location and client
// parallelism are excluded so they never change a report.
inline std::string results_digest(const ExperimentConfig& c) {
  nlohmann::json j = c.to_json();
  j.erase("output");
  j.erase("seeds");
  j["federated"].erase("parallel_clients");
  return hex64(fnv1a(j.dump()));
}

// Site datasets for one run seed: loaded from data_dir, or generated.
inline std::vector<SiteDataset> build_sites(const ExperimentConfig& c, std::uint64_t run_seed) {
  if (!c.data_dir.empty()) {
    auto sites = load_datasets(c.data_dir);
    for (const auto& s : sites)
      if (s.task != c.fed.task)
        throw ConfigError("dataset " + s.site_id + " in " + c.data_dir + " is " + to_string(s.task) + " but the task is " +
                          to_string(c.fed.task));
    return sites;
  }
  const std::uint64_t seed = c.data_seed.value_or(run_seed);
  std::vector<std::string> ids;
  for (const auto& s : c.sites) ids.push_back(s.id);
  const auto styles = draw_site_styles(c.fed.task, ids, c.image_size, seed);
  std::vector<SiteDataset> out;
  for (std::size_t k = 0; k < c.sites.size(); ++k) {
    const SiteSpec& s = c.sites[k];
    out.push_back(c.fed.task == TaskKind::segmentation
                      ? gen_seg_site(s.id, s.n, c.image_size, styles[k], seed)
                      : gen_clf_site(s.id, s.n, c.image_size, styles[k], s.class_balance, seed));
  }
  return out;
}

}  // namespace fettl
