#pragma once

// Evaluation metrics, the Wilcoxon signed-rank test, a site-separation score
// and the RunReport container.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "fettl/tensor.hpp"

namespace fettl {

// ---------------------------------------------------------------------------
// Dice

struct DiceOptions {
  double threshold = 0.5;
  double both_empty = 1.0;
};

inline double dice(const Tensor& pred, const Tensor& gt, DiceOptions opt = {}) {
  if (pred.shape() != gt.shape())
    throw DimensionError("dice: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(gt.shape()));
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    if (gt[i] != 0.0 && gt[i] != 1.0) throw InvalidInput("dice: ground truth must be binary");
    const bool pi = pred[i] >= opt.threshold;
    const bool gi = gt[i] == 1.0;
    p += pi;
    g += gi;
    both += pi && gi;
  }
  if (p + g == 0) return opt.both_empty;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

// ---------------------------------------------------------------------------
// Precision-recall

struct PRPoint {
  double threshold;
  double precision;
  double recall;
  std::size_t true_positives;
  std::size_t seen;  // scores at or above the threshold
};

// One point per distinct score, thresholds descending (recall non-decreasing
// along the returned order, i.e. non-increasing as the threshold rises).
inline std::vector<PRPoint> pr_curve(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    throw DimensionError("pr_curve: " + std::to_string(scores.size()) + " scores vs " + std::to_string(labels.size()) +
                         " labels");
  std::size_t pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw InvalidInput("pr_curve: labels must be 0 or 1");
    pos += l;
  }
  if (pos == 0 || pos == labels.size()) throw InvalidInput("aupr requires both positive and negative labels");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<PRPoint> curve;
  std::size_t tp = 0, seen = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    tp += labels[order[k]];
    ++seen;
    if (k + 1 < order.size() && scores[order[k + 1]] == scores[order[k]]) continue;
    curve.push_back({scores[order[k]], static_cast<double>(tp) / static_cast<double>(seen),
                     static_cast<double>(tp) / static_cast<double>(pos), tp, seen});
  }
  return curve;
}

// Average precision: sum over thresholds of (R_i - R_{i-1}) * P_i, summed as
// (TP_i - TP_{i-1}) * TP_i / n_i in extended precision and divided by the
// positive count once.
inline double aupr(const std::vector<double>& scores, const std::vector<int>& labels) {
  const auto curve = pr_curve(scores, labels);
  long double sum = 0.0L;
  std::size_t prev = 0;
  for (const PRPoint& p : curve) {
    sum += static_cast<long double>(p.true_positives - prev) * static_cast<long double>(p.true_positives) /
           static_cast<long double>(p.seen);
    prev = p.true_positives;
  }
  return static_cast<double>(sum / static_cast<long double>(curve.back().true_positives));
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank test

struct WilcoxonResult {
  double statistic = 0.0;  // min(W+, W-)
  double w_plus = 0.0;
  double w_minus = 0.0;
  double p_value = 1.0;
  std::size_t n = 0;  // non-zero differences
  bool degenerate = false;
  bool exact = false;
};

namespace detail {

struct SignedRanks {
  std::vector<double> ranks;  // average ranks of |d|
  std::vector<bool> positive;
  std::vector<std::size_t> tie_sizes;
};

inline SignedRanks signed_ranks(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size())
    throw DimensionError("wilcoxon: samples differ in length (" + std::to_string(x.size()) + " vs " +
                         std::to_string(y.size()) + ")");
  std::vector<double> d;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] - y[i] != 0.0) d.push_back(x[i] - y[i]);
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return std::abs(d[a]) < std::abs(d[b]); });
  SignedRanks r{std::vector<double>(d.size()), std::vector<bool>(d.size()), {}};
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
    const double avg = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) r.ranks[order[k]] = avg;
    r.tie_sizes.push_back(j - i + 1);
    i = j + 1;
  }
  for (std::size_t i = 0; i < d.size(); ++i) r.positive[i] = d[i] > 0.0;
  return r;
}

inline double normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

}  // namespace detail

// Two-sided p-value from the normal approximation with tie and continuity
// corrections.
inline double wilcoxon_normal_p(double w, std::size_t n, const std::vector<std::size_t>& tie_sizes) {
  const double nn = static_cast<double>(n);
  const double mu = nn * (nn + 1.0) / 4.0;
  double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0;
  for (std::size_t t : tie_sizes) {
    const double tt = static_cast<double>(t);
    var -= (tt * tt * tt - tt) / 48.0;
  }
  if (var <= 0.0) return 1.0;
  const double z = std::max(0.0, std::abs(w - mu) - 0.5) / std::sqrt(var);
  return std::min(1.0, 2.0 * detail::normal_sf(z));
}

// Two-sided p-value from the exact null distribution of W+ given the observed
// (possibly tied) ranks. Ranks are doubled so tied half-ranks stay integral.
inline double wilcoxon_exact_p(double w, const std::vector<double>& ranks) {
  std::vector<std::size_t> r2;
  std::size_t total = 0;
  for (double r : ranks) {
    r2.push_back(static_cast<std::size_t>(std::llround(2.0 * r)));
    total += r2.back();
  }
  std::vector<double> count(total + 1, 0.0);
  count[0] = 1.0;
  for (std::size_t r : r2)
    for (std::size_t s = total + 1; s-- > r;) count[s] += count[s - r];
  const auto limit = static_cast<std::size_t>(std::llround(2.0 * w));
  double le = 0.0, all = 0.0;
  for (std::size_t s = 0; s <= total; ++s) {
    all += count[s];
    if (s <= limit) le += count[s];
  }
  return std::min(1.0, 2.0 * le / all);
}

// Zero differences are dropped. The exact distribution is used for up to
// `exact_limit` non-zero pairs, the corrected normal approximation above.
inline WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& x, const std::vector<double>& y,
                                           std::size_t exact_limit = 25) {
  const detail::SignedRanks sr = detail::signed_ranks(x, y);
  WilcoxonResult res;
  res.n = sr.ranks.size();
  if (res.n == 0) {
    res.degenerate = true;
    res.p_value = 1.0;
    return res;
  }
  if (res.n < 6)
    throw InvalidInput("wilcoxon: need at least 6 non-zero differences, got " + std::to_string(res.n));
  for (std::size_t i = 0; i < res.n; ++i) (sr.positive[i] ? res.w_plus : res.w_minus) += sr.ranks[i];
  res.statistic = std::min(res.w_plus, res.w_minus);
  res.exact = res.n <= exact_limit;
  res.p_value = res.exact ? wilcoxon_exact_p(res.statistic, sr.ranks) : wilcoxon_normal_p(res.statistic, res.n, sr.tie_sizes);
  return res;
}

// ---------------------------------------------------------------------------
// Site separation of style descriptors

using StylePoints = std::map<std::string, std::vector<std::array<double, 3>>>;

struct VarianceSplit {
  double within = 0.0;  // mean squared distance to the site centroid
  double total = 0.0;   // mean squared distance to the global centroid
};

inline VarianceSplit variance_split(const StylePoints& points) {
  if (points.size() < 2) throw InvalidInput("cluster_compactness: need at least 2 sites");
  std::array<double, 3> g{0, 0, 0};
  std::size_t n = 0;
  for (const auto& [site, pts] : points) {
    if (pts.size() < 2) throw InvalidInput("cluster_compactness: site '" + site + "' has fewer than 2 points");
    for (const auto& p : pts) {
      for (int c = 0; c < 3; ++c) g[c] += p[c];
      ++n;
    }
  }
  for (double& v : g) v /= static_cast<double>(n);
  VarianceSplit vs;
  for (const auto& [site, pts] : points) {
    std::array<double, 3> m{0, 0, 0};
    for (const auto& p : pts)
      for (int c = 0; c < 3; ++c) m[c] += p[c] / static_cast<double>(pts.size());
    for (const auto& p : pts)
      for (int c = 0; c < 3; ++c) {
        vs.within += (p[c] - m[c]) * (p[c] - m[c]);
        vs.total += (p[c] - g[c]) * (p[c] - g[c]);
      }
  }
  vs.within /= static_cast<double>(n);
  vs.total /= static_cast<double>(n);
  return vs;
}

// Within-site variance over total variance; 0 when all points coincide.
inline double within_total_ratio(const StylePoints& points) {
  const VarianceSplit vs = variance_split(points);
  return vs.total > 0.0 ? vs.within / vs.total : 0.0;
}

// Share of the total variance explained by site membership (between-site over
// total). Lower means sites are less distinguishable, i.e. better harmonized.
inline double cluster_compactness(const StylePoints& points) {
  const VarianceSplit vs = variance_split(points);
  return vs.total > 0.0 ? 1.0 - vs.within / vs.total : 0.0;
}

// ---------------------------------------------------------------------------
// RunReport

struct MetricRecord {
  int round;
  std::string site;
  std::string split;
  std::string metric;
  double value;
};

struct ImageScore {
  std::string site;
  std::size_t index;
  double value;  // per-image Dice, or probability of the true class
};

class RunReport {
 public:
  std::string config_digest;
  std::string strategy;
  std::string task;
  std::uint64_t seed = 0;
  int selected_round = -1;
  std::map<std::string, std::map<std::string, double>> final_test;  // site -> metric -> value
  std::vector<ImageScore> image_scores;
  std::map<std::string, double> summary;

  void add(int round, const std::string& site, const std::string& split, const std::string& metric, double value) {
    if (!std::isfinite(value))
      throw NumericError("non-finite metric " + metric + " for site " + site + " at round " + std::to_string(round));
    const auto key = std::make_tuple(round, site, split, metric);
    if (!keys_.insert(key).second)
      throw ContractError("duplicate metric record (" + std::to_string(round) + ", " + site + ", " + split + ", " +
                          metric + ")");
    records_.push_back({round, site, split, metric, value});
  }

  const std::vector<MetricRecord>& records() const { return records_; }

  double value(int round, const std::string& site, const std::string& split, const std::string& metric) const {
    for (const auto& r : records_)
      if (r.round == round && r.site == site && r.split == split && r.metric == metric) return r.value;
    throw ContractError("no record (" + std::to_string(round) + ", " + site + ", " + split + ", " + metric + ")");
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["config_digest"] = config_digest;
    j["strategy"] = strategy;
    j["task"] = task;
    j["seed"] = seed;
    j["selected_round"] = selected_round;
    j["final_test"] = final_test;
    j["summary"] = summary;
    auto& recs = j["records"] = nlohmann::json::array();
    for (const auto& r : records_)
      recs.push_back({{"round", r.round}, {"site", r.site}, {"split", r.split}, {"metric", r.metric}, {"value", r.value}});
    auto& scores = j["image_scores"] = nlohmann::json::array();
    for (const auto& s : image_scores) scores.push_back({{"site", s.site}, {"index", s.index}, {"value", s.value}});
    return j;
  }

  static RunReport from_json(const nlohmann::json& j) {
    RunReport r;
    r.config_digest = j.at("config_digest").get<std::string>();
    r.strategy = j.at("strategy").get<std::string>();
    r.task = j.at("task").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.selected_round = j.at("selected_round").get<int>();
    r.final_test = j.at("final_test").get<std::map<std::string, std::map<std::string, double>>>();
    r.summary = j.at("summary").get<std::map<std::string, double>>();
    for (const auto& rec : j.at("records"))
      r.add(rec.at("round").get<int>(), rec.at("site").get<std::string>(), rec.at("split").get<std::string>(),
            rec.at("metric").get<std::string>(), rec.at("value").get<double>());
    for (const auto& s : j.at("image_scores"))
      r.image_scores.push_back({s.at("site").get<std::string>(), s.at("index").get<std::size_t>(), s.at("value").get<double>()});
    return r;
  }

  // Site rows, metric columns, plus a trailing mean row.
  std::string to_csv() const {
    std::set<std::string> metrics;
    for (const auto& [site, m] : final_test)
      for (const auto& [name, v] : m) metrics.insert(name);
    std::ostringstream os;
    os.precision(17);
    os << "site";
    for (const auto& m : metrics) os << ',' << m;
    os << '\n';
    std::map<std::string, std::pair<double, int>> mean;
    for (const auto& [site, m] : final_test) {
      os << site;
      for (const auto& name : metrics) {
        os << ',';
        if (auto it = m.find(name); it != m.end()) {
          os << it->second;
          mean[name].first += it->second;
          mean[name].second += 1;
        }
      }
      os << '\n';
    }
    os << "mean";
    for (const auto& name : metrics) os << ',' << (mean[name].second ? mean[name].first / mean[name].second : 0.0);
    os << '\n';
    return os.str();
  }

 private:
  std::vector<MetricRecord> records_;
  std::set<std::tuple<int, std::string, std::string, std::string>> keys_;
};

}  // namespace fettl
