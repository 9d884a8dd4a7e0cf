#pragma once

// Empirical ROC analysis from labeled score samples: Mann-Whitney AUROC,
// operating points, and TPR at fixed FPR.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "wmlab/error.hpp"

namespace wmlab {

struct ScoredSample {
  std::size_t sample_id = 0;
  int label = 0;  // 1 = AI / watermarked (positive), 0 = human
  double score = 0.0;
};

struct OperatingPoint {
  double threshold = 0.0;  // positive iff score >= threshold
  double fpr = 0.0;
  double tpr = 0.0;
};

inline const std::vector<double> kDefaultFprGrid{0.01, 0.05, 0.1};

namespace detail {

inline void require_scores(std::span<const double> pos, std::span<const double> neg) {
  if (pos.empty() || neg.empty()) throw Error("config", "need at least one positive and one negative score");
  for (double s : pos)
    if (!std::isfinite(s)) throw Error("schema", "scores must be finite");
  for (double s : neg)
    if (!std::isfinite(s)) throw Error("schema", "scores must be finite");
}

}  // namespace detail

// P(pos > neg) + P(pos = neg)/2 over all pairs, via a merged sort.
inline double mann_whitney_auroc(std::span<const double> pos, std::span<const double> neg) {
  detail::require_scores(pos, neg);
  std::vector<double> p(pos.begin(), pos.end()), n(neg.begin(), neg.end());
  std::sort(p.begin(), p.end());
  std::sort(n.begin(), n.end());
  double wins = 0.0;
  std::size_t lo = 0, hi = 0;  // n[0..lo) < x, n[0..hi) <= x
  for (double x : p) {
    while (lo < n.size() && n[lo] < x) ++lo;
    while (hi < n.size() && n[hi] <= x) ++hi;
    wins += static_cast<double>(lo) + 0.5 * static_cast<double>(hi - lo);
  }
  return wins / (static_cast<double>(p.size()) * static_cast<double>(n.size()));
}

// Points for every distinct threshold, highest first, from (0,0) to (1,1).
inline std::vector<OperatingPoint> roc_points(std::span<const double> pos, std::span<const double> neg) {
  detail::require_scores(pos, neg);
  std::map<double, std::pair<std::size_t, std::size_t>, std::greater<>> levels;
  for (double s : pos) ++levels[s].first;
  for (double s : neg) ++levels[s].second;
  std::vector<OperatingPoint> out{{HUGE_VAL, 0.0, 0.0}};
  std::size_t tp = 0, fp = 0;
  for (const auto& [score, c] : levels) {
    tp += c.first;
    fp += c.second;
    out.push_back({score, static_cast<double>(fp) / static_cast<double>(neg.size()),
                   static_cast<double>(tp) / static_cast<double>(pos.size())});
  }
  return out;
}

inline double roc_area(std::span<const OperatingPoint> pts) {
  double a = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i)
    a += (pts[i].fpr - pts[i - 1].fpr) * 0.5 * (pts[i].tpr + pts[i - 1].tpr);
  return a;
}

// TPR of the linearly interpolated empirical ROC at the given FPR: the last
// operating point with FPR <= fpr (smallest such threshold), interpolated
// towards the next point.
inline double tpr_at_fpr(std::span<const double> pos, std::span<const double> neg, double fpr) {
  if (!(fpr > 0.0 && fpr < 1.0)) throw Error("config", "fpr must lie in (0, 1)");
  const auto pts = roc_points(pos, neg);
  std::size_t i = 0;
  while (i + 1 < pts.size() && pts[i + 1].fpr <= fpr) ++i;
  if (i + 1 == pts.size() || pts[i].fpr == fpr) return pts[i].tpr;
  const auto& a = pts[i];
  const auto& b = pts[i + 1];
  return a.tpr + (b.tpr - a.tpr) * (fpr - a.fpr) / (b.fpr - a.fpr);
}

struct RocReport {
  std::string detector;
  std::string phase;  // "before" | "after"
  std::vector<ScoredSample> samples;
  std::vector<OperatingPoint> points;
  double auroc = 0.0;
  std::vector<std::pair<double, double>> tpr_at;  // (fpr, tpr)
  double accuracy = 0.0;         // fraction of positives flagged at the operating threshold
  double false_positive_rate = 0.0;
  double threshold = 0.0;        // operating threshold used for verdicts
  nlohmann::json config;

  std::vector<double> scores(int label) const {
    std::vector<double> out;
    for (const auto& s : samples)
      if (s.label == label) out.push_back(s.score);
    return out;
  }
};

// Threshold with the largest TPR whose empirical FPR is at most `fpr`.
inline double threshold_at_fpr(std::span<const double> pos, std::span<const double> neg, double fpr) {
  const auto pts = roc_points(pos, neg);
  double t = pts.front().threshold;
  for (const auto& p : pts)
    if (p.fpr <= fpr) t = p.threshold;
  return t;
}

// Builds the report. With `fixed_threshold` the verdicts use it (watermark
// z >= 4); otherwise the threshold reaching 1% empirical FPR is used.
inline RocReport make_roc_report(std::string detector, std::string phase, std::vector<ScoredSample> samples,
                                 std::optional<double> fixed_threshold = std::nullopt,
                                 const std::vector<double>& fpr_grid = kDefaultFprGrid) {
  RocReport r;
  r.detector = std::move(detector);
  r.phase = std::move(phase);
  r.samples = std::move(samples);
  const auto pos = r.scores(1), neg = r.scores(0);
  r.points = roc_points(pos, neg);
  r.auroc = mann_whitney_auroc(pos, neg);
  for (double f : fpr_grid) r.tpr_at.emplace_back(f, tpr_at_fpr(pos, neg, f));
  r.threshold = fixed_threshold ? *fixed_threshold : threshold_at_fpr(pos, neg, 0.01);
  const auto flagged = [&](const std::vector<double>& xs) {
    double c = 0.0;
    for (double x : xs) c += x >= r.threshold;
    return c / static_cast<double>(xs.size());
  };
  r.accuracy = flagged(pos);
  r.false_positive_rate = flagged(neg);
  return r;
}

// Non-finite thresholds (the initial "nothing flagged" point) serialize as null.
inline nlohmann::json to_json(const RocReport& r) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : r.points)
    pts.push_back({{"threshold", std::isfinite(p.threshold) ? nlohmann::json(p.threshold) : nlohmann::json()},
                   {"fpr", p.fpr},
                   {"tpr", p.tpr}});
  nlohmann::json tpr = nlohmann::json::array();
  for (const auto& [f, t] : r.tpr_at) tpr.push_back({{"fpr", f}, {"tpr", t}});
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& s : r.samples) samples.push_back({{"sample_id", s.sample_id}, {"label", s.label}, {"score", s.score}});
  return {{"detector", r.detector}, {"phase", r.phase},       {"auroc", r.auroc},
          {"tpr_at_fpr", tpr},      {"accuracy", r.accuracy}, {"false_positive_rate", r.false_positive_rate},
          {"threshold", r.threshold}, {"points", pts},        {"samples", samples},
          {"config", r.config}};
}

inline RocReport roc_report_from_json(const nlohmann::json& j) {
  try {
    RocReport r;
    r.detector = j.at("detector").get<std::string>();
    r.phase = j.at("phase").get<std::string>();
    r.auroc = j.at("auroc").get<double>();
    r.accuracy = j.at("accuracy").get<double>();
    r.false_positive_rate = j.at("false_positive_rate").get<double>();
    r.threshold = j.at("threshold").get<double>();
    for (const auto& p : j.at("points"))
      r.points.push_back({p.at("threshold").is_null() ? HUGE_VAL : p.at("threshold").get<double>(),
                          p.at("fpr").get<double>(), p.at("tpr").get<double>()});
    for (const auto& t : j.at("tpr_at_fpr")) r.tpr_at.emplace_back(t.at("fpr").get<double>(), t.at("tpr").get<double>());
    for (const auto& s : j.at("samples"))
      r.samples.push_back({s.at("sample_id").get<std::size_t>(), s.at("label").get<int>(), s.at("score").get<double>()});
    r.config = j.value("config", nlohmann::json());
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error("schema", std::string("roc report: ") + e.what());
  }
}

}  // namespace wmlab
