#include <gtest/gtest.h>

#include "fettl/config.hpp"

using namespace fettl;

namespace {

std::string error_of(const std::string& text) {
  try {
    parse_config_text(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

TEST(Config, EmptyObjectGivesDefaults) {
  const ExperimentConfig c = parse_config_text("{}");
  EXPECT_EQ(c.fed.task, TaskKind::segmentation);
  EXPECT_EQ(c.strategy, Strategy::fettl);
  EXPECT_EQ(c.image_size, 32u);
  ASSERT_EQ(c.sites.size(), 5u);
  std::vector<std::size_t> n;
  for (const auto& s : c.sites) n.push_back(s.n);
  EXPECT_EQ(n, (std::vector<std::size_t>{50, 98, 47, 230, 400}));
  EXPECT_FALSE(c.data_seed.has_value());
  EXPECT_FALSE(c.mu_given);
}

TEST(Config, DefaultSites) {
  const auto clf = default_sites(TaskKind::classification, 1.0);
  ASSERT_EQ(clf.size(), 2u);
  EXPECT_EQ(clf[0].id, "X");
  EXPECT_DOUBLE_EQ(clf[1].class_balance, 0.3);
  // Scaled sizes never drop below 8 images.
  for (const auto& s : default_sites(TaskKind::segmentation, 0.01)) EXPECT_EQ(s.n, 8u);
  EXPECT_EQ(default_sites(TaskKind::segmentation, 0.5)[0].n, 25u);
}

TEST(Config, ReadsNestedSections) {
  const ExperimentConfig c = parse_config_text(R"({
    "task": "classification", "image_size": 16, "data_seed": 7, "strategy": "fedprox",
    "seeds": [3, 4], "sites": [{"id": "P", "n": 12, "class_balance": 0.25}],
    "federated": {"rounds": 2, "eta": 0.5, "mu": 0.1, "optimizer": "sgd", "template_init": "gaussian_noise"},
    "wct": {"epsilon": 1e-4}, "metrics": {"dice_both_empty": 0}
  })");
  EXPECT_EQ(c.fed.task, TaskKind::classification);
  EXPECT_EQ(c.image_size, 16u);
  EXPECT_EQ(c.data_seed, std::optional<std::uint64_t>(7));
  EXPECT_EQ(c.strategy, Strategy::fedprox);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{3, 4}));
  ASSERT_EQ(c.sites.size(), 1u);
  EXPECT_EQ(c.sites[0].n, 12u);
  EXPECT_EQ(c.fed.rounds, 2u);
  EXPECT_DOUBLE_EQ(c.fed.eta, 0.5);
  EXPECT_DOUBLE_EQ(c.fed.mu, 0.1);
  EXPECT_TRUE(c.mu_given);
  EXPECT_EQ(c.fed.optimizer, OptimizerKind::sgd);
  EXPECT_EQ(c.fed.template_init, TemplateInit::gaussian_noise);
  EXPECT_DOUBLE_EQ(c.fed.wct.epsilon, 1e-4);
  EXPECT_DOUBLE_EQ(c.fed.dice.both_empty, 0.0);
}

TEST(Config, UnknownKeysAreRejectedWithTheirPath) {
  EXPECT_NE(error_of(R"({"strategi": "fettl"})").find("unknown key 'strategi'"), std::string::npos);
  EXPECT_NE(error_of(R"({"federated": {"round": 3}})").find("'federated.round'"), std::string::npos);
  EXPECT_NE(error_of(R"({"sites": [{"id": "A", "n": 9, "size": 1}]})").find("sites[0].size"), std::string::npos);
}

TEST(Config, WrongTypesAreRejected) {
  EXPECT_NE(error_of(R"({"image_size": "big"})").find("'image_size': has the wrong type"), std::string::npos);
  EXPECT_NE(error_of(R"({"federated": {"eta": [1]}})").find("'federated.eta'"), std::string::npos);
  EXPECT_THROW(parse_config_text(R"({"pretrain": 3})"), ConfigError);
  EXPECT_THROW(parse_config_text("[]"), ConfigError);
}

TEST(Config, RangeChecks) {
  for (const char* bad : {R"({"image_size": 30})", R"({"image_size": 4})", R"({"size_factor": 0})", R"({"seeds": []})",
                          R"({"sites": []})", R"({"sites": [{"id": "A", "n": 3}]})",
                          R"({"sites": [{"id": "A", "n": 9}, {"id": "A", "n": 9}]})",
                          R"({"sites": [{"id": "A", "n": 9, "class_balance": 1.0}]})", R"({"strategy": "fedsgd"})",
                          R"({"task": "detection"})", R"({"federated": {"optimizer": "adam"}})",
                          R"({"federated": {"beta": -1}})", R"({"federated": {"batch_size": 0}})",
                          R"({"federated": {"parallel_clients": 0}})", R"({"federated": {"template_init": "zeros"}})",
                          R"({"wct": {"epsilon": 0}})", R"({"metrics": {"dice_both_empty": 0.5}})",
                          R"({"init": {"site": "Q"}})"})
    EXPECT_THROW(parse_config_text(bad), ConfigError) << bad;
}

TEST(Config, ParseErrorsCarryTheLine) {
  const std::string msg = error_of("{\n  \"task\": \"segmentation\",\n  \"seeds\": [1,,2]\n}");
  EXPECT_EQ(msg.rfind("line 3:", 0), 0u) << msg;
  EXPECT_EQ(error_of("{\"a\": 1").rfind("line 1:", 0), 0u);
}

TEST(Config, StrictFedProxNeedsMu) {
  EXPECT_THROW(parse_config_text(R"({"strict": true, "strategy": "fedprox"})"), ConfigError);
  EXPECT_NO_THROW(parse_config_text(R"({"strict": true, "strategy": "fedprox", "federated": {"mu": 0.01}})"));
  EXPECT_NO_THROW(parse_config_text(R"({"strategy": "fedprox"})"));
  EXPECT_NO_THROW(parse_config_text(R"({"strict": true, "strategy": "fedavg"})"));
  // A strategy switched after parsing is checked again.
  ExperimentConfig c = parse_config_text(R"({"strict": true})");
  c.strategy = Strategy::fedprox;
  EXPECT_THROW(check_strict(c), ConfigError);
}

TEST(Config, LoadConfigReportsPath) {
  EXPECT_THROW(load_config("/nonexistent/fettl.json"), IoError);
  const auto path = std::filesystem::temp_directory_path() / "fettl_test_config.json";
  std::ofstream(path) << R"({"bogus": 1})";
  try {
    load_config(path);
    ADD_FAILURE() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(path.string()), std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST(Config, JsonRoundTrip) {
  const ExperimentConfig a = parse_config_text(R"({"data_seed": 5, "federated": {"mu": 0.2, "rounds": 7}})");
  const ExperimentConfig b = parse_config(a.to_json());
  EXPECT_EQ(a.to_json(), b.to_json());
  EXPECT_EQ(a.digest(), b.digest());
}

TEST(Config, ResultsDigestIgnoresOnlyNonResultFields) {
  const ExperimentConfig base = parse_config_text("{}");
  const std::string d = results_digest(base);
  for (const char* same : {R"({"output": "elsewhere"})", R"({"seeds": [9, 10]})",
                           R"({"federated": {"parallel_clients": 4}})"})
    EXPECT_EQ(results_digest(parse_config_text(same)), d) << same;
  for (const char* different : {R"({"data_seed": 1})", R"({"federated": {"eta": 0.01}})", R"({"strategy": "fedavg"})",
                                R"({"wct": {"epsilon": 1e-4}})", R"({"image_size": 16})"})
    EXPECT_NE(results_digest(parse_config_text(different)), d) << different;
}

TEST(Config, BuildSitesFollowsDataSeed) {
  const ExperimentConfig c = parse_config_text(R"({"image_size": 16, "sites": [{"id": "A", "n": 8}, {"id": "B", "n": 10}]})");
  const auto a = build_sites(c, 3);
  const auto b = build_sites(c, 3);
  const auto other = build_sites(c, 4);
  ASSERT_EQ(a.size(), 2u);
  EXPECT_EQ(a[1].images.size(), 10u);
  EXPECT_EQ(detail::dataset_digest(a[0]), detail::dataset_digest(b[0]));
  EXPECT_NE(detail::dataset_digest(a[0]), detail::dataset_digest(other[0]));
  // A fixed data_seed pins the data across run seeds.
  const ExperimentConfig pinned = parse_config_text(R"({"image_size": 16, "data_seed": 11, "sites": [{"id": "A", "n": 8}]})");
  EXPECT_EQ(detail::dataset_digest(build_sites(pinned, 1)[0]), detail::dataset_digest(build_sites(pinned, 2)[0]));
}

TEST(Config, BuildSitesFromDataDirChecksTask) {
  const auto dir = std::filesystem::temp_directory_path() / "fettl_test_config_data";
  std::filesystem::remove_all(dir);
  const ExperimentConfig gen = parse_config_text(R"({"image_size": 8, "sites": [{"id": "A", "n": 6}]})");
  save_datasets(dir, build_sites(gen, 1));
  ExperimentConfig use = parse_config_text(R"({"image_size": 8, "data_dir": ")" + dir.string() + R"("})");
  EXPECT_EQ(detail::dataset_digest(build_sites(use, 99)[0]), detail::dataset_digest(build_sites(gen, 1)[0]));
  use.fed.task = TaskKind::classification;
  EXPECT_THROW(build_sites(use, 1), ConfigError);
  std::filesystem::remove_all(dir);
}

}  // namespace
