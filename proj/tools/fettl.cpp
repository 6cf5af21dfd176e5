// fettl command-line driver: gen-data, pretrain, run, compare.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fettl/config.hpp"

namespace fs = std::filesystem;
using namespace fettl;

namespace {

enum Exit { kOk = 0, kConfig = 2, kRuntime = 3, kIo = 4 };

struct Common {
  std::string config;
  std::string output;
  std::string seeds;
  std::optional<std::size_t> rounds;
  std::optional<std::size_t> parallel;
  bool force = false;
};

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoull(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw ConfigError("--seeds: '" + tok + "' is not a non-negative integer");
    }
  }
  if (out.empty()) throw ConfigError("--seeds is empty");
  return out;
}

ExperimentConfig load(const Common& c) {
  if (c.config.empty()) throw ConfigError("--config is required");
  ExperimentConfig cfg = load_config(c.config);
  if (!c.output.empty()) cfg.output = c.output;
  if (!c.seeds.empty()) cfg.seeds = parse_seeds(c.seeds);
  if (c.parallel) {
    if (*c.parallel == 0) throw ConfigError("--parallel-clients must be at least 1");
    cfg.fed.parallel_clients = *c.parallel;
  }
  return cfg;
}

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot write " + p.string());
  f << text;
  if (!f) throw IoError("write failed for " + p.string());
}

void claim(const fs::path& p, bool force) {
  if (fs::exists(p) && !force) throw IoError(p.string() + " already exists (use --force to overwrite)");
}

fs::path seed_dir(const ExperimentConfig& cfg, std::uint64_t seed) {
  return fs::path(cfg.output) / ("seed-" + std::to_string(seed));
}

int cmd_gen_data(const Common& c) {
  ExperimentConfig cfg = load(c);
  if (!cfg.data_dir.empty()) throw ConfigError("gen-data writes datasets; 'data_dir' must not be set");
  const fs::path out = cfg.output;
  claim(out / "manifest.json", c.force);
  const auto sites = build_sites(cfg, cfg.data_seed.value_or(cfg.seeds.front()));
  const auto manifest = save_datasets(out, sites);
  std::cout << "wrote " << sites.size() << " sites to " << out.string() << "\n";
  for (const auto& s : manifest.at("sites"))
    std::cout << "  " << s.at("site_id").get<std::string>() << "  n=" << s.at("n") << "  digest=" << s.at("digest").get<std::string>()
              << "\n";
  return kOk;
}

int cmd_pretrain(const Common& c) {
  ExperimentConfig cfg = load(c);
  if (c.rounds) cfg.fed.harmonizer_rounds = *c.rounds;
  for (std::uint64_t seed : cfg.seeds) {
    const fs::path dir = seed_dir(cfg, seed);
    claim(dir / "checkpoints" / "decoder.params", c.force);
    const auto sites = build_sites(cfg, seed);
    Experiment ex(sites, cfg.fed, seed);
    fs::create_directories(dir / "checkpoints");
    save_params(ex.encoder().params, dir / "checkpoints" / "encoder.params");
    save_params(ex.pretrained_decoder().params, dir / "checkpoints" / "decoder_init.params");
    save_params(ex.federated_decoder().params, dir / "checkpoints" / "decoder.params");
    nlohmann::json log = {{"seed", seed}, {"config_digest", results_digest(cfg)}, {"encoder_frozen", ex.encoder().frozen},
                          {"val_l1", ex.harmonizer_log()}};
    write_text(dir / "harmonizer.json", log.dump(2) + "\n");
    write_text(dir / "transcript.log", ex.transcript().to_text());
    const auto& l1 = ex.harmonizer_log();
    std::cout << "seed " << seed << ": pooled val L1 " << l1.front() << " -> " << l1.back() << " over "
              << cfg.fed.harmonizer_rounds << " rounds\n";
  }
  return kOk;
}

int cmd_run(const Common& c, const std::string& strategy, const std::string& template_init) {
  ExperimentConfig cfg = load(c);
  if (!strategy.empty()) cfg.strategy = parse_strategy(strategy);
  if (!template_init.empty()) cfg.fed.template_init = parse_template_init(template_init);
  if (c.rounds) cfg.fed.rounds = *c.rounds;
  check_strict(cfg);
  const std::string metric = metric_name(cfg.fed.task);
  for (std::uint64_t seed : cfg.seeds) {
    const fs::path dir = seed_dir(cfg, seed);
    claim(dir / "report.json", c.force);
    const auto sites = build_sites(cfg, seed);
    Experiment ex(sites, cfg.fed, seed);
    RunResult res = run_strategy(ex, cfg.strategy);
    res.report.config_digest = results_digest(cfg);
    const AuditResult audit = audit_transcript(ex.transcript(), ex.payload_schema(), sites.front().image_size);
    if (!audit.ok) throw ContractError("transcript audit failed: " + audit.violations.front());
    write_text(dir / "report.json", res.report.to_json().dump(2) + "\n");
    write_text(dir / "report.csv", res.report.to_csv());
    write_text(dir / "transcript.log", ex.transcript().to_text());
    for (std::size_t k = 0; k < sites.size(); ++k) {
      const fs::path ck = dir / "checkpoints";
      fs::create_directories(ck);
      save_params(res.final_state[k].model.params, ck / (sites[k].site_id + "_model.params"));
      if (!res.final_state[k].model.buffers.empty())
        save_params(res.final_state[k].model.buffers, ck / (sites[k].site_id + "_buffers.params"));
      ParamSet tpl;
      tpl.add("template", res.final_state[k].tpl);
      save_params(tpl, ck / (sites[k].site_id + "_template.params"));
    }
    std::cout << "seed " << seed << " " << to_string(cfg.strategy) << ": selected round " << res.report.selected_round;
    for (const auto& [site, m] : res.report.final_test) std::cout << "  " << site << "=" << m.at(metric);
    std::cout << "  mean=" << res.report.summary.at("mean_site_test_" + metric) << "\n";
  }
  return kOk;
}

std::vector<RunReport> read_reports(const fs::path& p) {
  std::vector<fs::path> files;
  if (fs::is_directory(p)) {
    for (const auto& e : fs::directory_iterator(p))
      if (fs::exists(e.path() / "report.json")) files.push_back(e.path() / "report.json");
    if (fs::exists(p / "report.json")) files.push_back(p / "report.json");
    std::sort(files.begin(), files.end());
  } else {
    files.push_back(p);
  }
  if (files.empty()) throw IoError("no report.json under " + p.string());
  std::vector<RunReport> out;
  for (const auto& f : files) {
    std::ifstream in(f);
    if (!in) throw IoError("cannot read " + f.string());
    try {
      out.push_back(RunReport::from_json(nlohmann::json::parse(in)));
    } catch (const nlohmann::json::exception& e) {
      throw IoError(f.string() + ": " + e.what());
    }
  }
  return out;
}

int cmd_compare(const std::string& a_path, const std::string& b_path) {
  const auto a = read_reports(a_path);
  const auto b = read_reports(b_path);
  const std::string task = a.front().task;
  for (const auto& r : a)
    if (r.task != task) throw ConfigError(a_path + " mixes tasks");
  for (const auto& r : b)
    if (r.task != task)
      throw ConfigError("cannot compare a " + task + " report with a " + r.task + " report");

  using Key = std::tuple<std::uint64_t, std::string, std::size_t>;
  std::map<Key, double> bs;
  for (const auto& r : b)
    for (const auto& s : r.image_scores) bs[{r.seed, s.site, s.index}] = s.value;
  std::vector<double> x, y;
  std::map<std::string, std::pair<double, double>> per_site;
  std::map<std::string, std::size_t> per_site_n;
  for (const auto& r : a)
    for (const auto& s : r.image_scores) {
      auto it = bs.find({r.seed, s.site, s.index});
      if (it == bs.end()) continue;
      x.push_back(s.value);
      y.push_back(it->second);
      per_site[s.site].first += s.value;
      per_site[s.site].second += it->second;
      ++per_site_n[s.site];
    }
  if (x.empty()) throw ConfigError("the reports share no (seed, site, image) pairs");

  const std::string what = task == "segmentation" ? "dice" : "p(true class)";
  std::printf("%-8s %10s %10s %10s   (%s per image, %zu matched)\n", "site", "A", "B", "A-B", what.c_str(), x.size());
  for (const auto& [site, sums] : per_site) {
    const double n = static_cast<double>(per_site_n[site]);
    std::printf("%-8s %10.4f %10.4f %+10.4f\n", site.c_str(), sums.first / n, sums.second / n, (sums.first - sums.second) / n);
  }
  double mean_diff = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) mean_diff += (x[i] - y[i]) / static_cast<double>(x.size());
  std::printf("mean diff %+.6f\n", mean_diff);
  const std::string metric = task == "segmentation" ? "mean_site_test_dice" : "pooled_test_aupr";
  auto mean_summary = [&](const std::vector<RunReport>& rs) {
    double s = 0.0;
    for (const auto& r : rs) s += r.summary.at(metric) / static_cast<double>(rs.size());
    return s;
  };
  std::printf("%s: A %.4f  B %.4f  delta %+.4f\n", metric.c_str(), mean_summary(a), mean_summary(b), mean_summary(a) - mean_summary(b));
  try {
    const WilcoxonResult w = wilcoxon_signed_rank(x, y);
    std::printf("wilcoxon: W=%.1f n=%zu p=%.6g%s\n", w.statistic, w.n, w.p_value,
                w.degenerate ? " (all differences zero)" : (w.exact ? " (exact)" : " (normal approx.)"));
  } catch (const InvalidInput& e) {
    std::printf("wilcoxon: not computed (%s)\n", e.what());
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fettl: federated template and task learning on synthetic multi-site data"};
  app.require_subcommand(1);

  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "experiment config (JSON)")->required();
    sub->add_option("--output", common.output, "output directory (overrides config)");
    sub->add_option("--seeds", common.seeds, "comma-separated run seeds (overrides config)");
    sub->add_flag("--force", common.force, "overwrite existing outputs");
    sub->add_option("--parallel-clients", common.parallel, "concurrent client updates per round");
  };

  auto* gen = app.add_subcommand("gen-data", "generate and save the site datasets");
  add_common(gen);
  auto* pre = app.add_subcommand("pretrain", "pretrain the encoder and train the federated harmonizer");
  add_common(pre);
  pre->add_option("--rounds", common.rounds, "harmonizer rounds (overrides config)");
  auto* run = app.add_subcommand("run", "run one strategy end to end");
  add_common(run);
  std::string strategy, template_init;
  run->add_option("--strategy", strategy, "strategy name (overrides config)");
  run->add_option("--rounds", common.rounds, "federated rounds (overrides config)");
  run->add_option("--template-init", template_init, "encoded_image | raw_image | gaussian_noise");
  auto* cmp = app.add_subcommand("compare", "paired comparison of two reports");
  std::string report_a, report_b;
  cmp->add_option("report_a", report_a, "report.json or run directory")->required();
  cmp->add_option("report_b", report_b, "report.json or run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) return cmd_gen_data(common);
    if (*pre) return cmd_pretrain(common);
    if (*run) return cmd_run(common, strategy, template_init);
    if (*cmp) return cmd_compare(report_a, report_b);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kOk;
}
