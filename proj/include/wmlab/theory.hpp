#pragma once

// Exact finite-space machinery for the AUROC <= 1/2 + TV - TV^2/2 bound:
// total variation, tie-aware ROC/AUROC, falsification campaigns, the
// tightness construction and exhaustive sequence enumeration.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "wmlab/distribution.hpp"
#include "wmlab/error.hpp"
#include "wmlab/lm.hpp"
#include "wmlab/rng.hpp"
#include "wmlab/watermark.hpp"

namespace wmlab::theory {

inline constexpr double kBoundTolerance = 1e-12;

using DetectorFunction = std::vector<double>;  // score per outcome id

namespace detail {

inline void require_same_space(std::size_t a, std::size_t b) {
  if (a != b) throw Error("space_mismatch", "distributions live on different outcome spaces");
}

inline void require_detector(const DetectorFunction& d, std::size_t n) {
  if (d.size() != n) throw Error("space_mismatch", "detector is not defined on the whole outcome space");
  for (double s : d)
    if (!std::isfinite(s)) throw Error("schema", "detector scores must be finite");
}

}  // namespace detail

inline double tv_distance(const DiscreteDistribution& p, const DiscreteDistribution& q) {
  detail::require_same_space(p.size(), q.size());
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return std::min(1.0, 0.5 * s);
}

inline double auroc_bound(double tv) {
  if (!(tv >= 0.0 && tv <= 1.0)) throw Error("config", "tv must lie in [0, 1]");
  return 0.5 + tv - 0.5 * tv * tv;
}

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
};

struct RocCurve {
  std::vector<RocPoint> points;  // (0,0) first, (1,1) last, both coordinates non-decreasing
  double auroc = 0.0;            // area under the linearly interpolated curve
  double pair_statistic = 0.0;   // P(D(m) > D(h)) + P(D(m) = D(h)) / 2
  double tie_mass = 0.0;         // P(D(m) = D(h))
};

// Outcomes grouped by equal score, highest score first. Each level carries
// its M- and H-mass.
struct ScoreLevel {
  double score;
  double m_mass;
  double h_mass;
};

inline std::vector<ScoreLevel> score_levels(const DetectorFunction& d, const DiscreteDistribution& m,
                                            const DiscreteDistribution& h) {
  detail::require_same_space(m.size(), h.size());
  detail::require_detector(d, m.size());
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return d[a] > d[b]; });
  std::vector<ScoreLevel> levels;
  for (std::size_t idx : order) {
    if (levels.empty() || levels.back().score != d[idx]) levels.push_back({d[idx], 0.0, 0.0});
    levels.back().m_mass += m[idx];
    levels.back().h_mass += h[idx];
  }
  return levels;
}

// Exact ROC of "positive iff D(s) >= threshold", M positives, H negatives,
// swept over every realized score.
inline RocCurve auroc_of(const DetectorFunction& d, const DiscreteDistribution& m,
                         const DiscreteDistribution& h) {
  const auto levels = score_levels(d, m, h);
  RocCurve roc;
  roc.points.push_back({0.0, 0.0});
  double tpr = 0.0, fpr = 0.0, area = 0.0;
  double h_below = 1.0;  // H-mass strictly below the current level
  double greater = 0.0, ties = 0.0;
  for (const auto& lv : levels) {
    h_below -= lv.h_mass;
    greater += lv.m_mass * std::max(0.0, h_below);
    ties += lv.m_mass * lv.h_mass;
    const double next_tpr = tpr + lv.m_mass, next_fpr = fpr + lv.h_mass;
    area += lv.h_mass * 0.5 * (tpr + next_tpr);
    tpr = next_tpr;
    fpr = next_fpr;
    roc.points.push_back({std::min(fpr, 1.0), std::min(tpr, 1.0)});
  }
  roc.points.back() = {1.0, 1.0};
  roc.auroc = std::clamp(area, 0.0, 1.0);
  roc.pair_statistic = greater + 0.5 * ties;
  roc.tie_mass = ties;
  return roc;
}

struct BoundCheck {
  std::size_t detectors = 0;
  std::size_t thresholds = 0;
  double tv = 0.0;
  double bound = 0.0;
  double max_auroc = 0.0;
  double worst_auroc_slack = 1.0;  // min over detectors of bound - auroc
  double worst_tpr_slack = 1.0;    // min over thresholds of fpr + tv - tpr
  std::size_t violations = 0;

  bool holds() const { return violations == 0; }
};

inline void merge_into(BoundCheck& acc, const BoundCheck& c) {
  acc.detectors += c.detectors;
  acc.thresholds += c.thresholds;
  acc.max_auroc = std::max(acc.max_auroc, c.max_auroc);
  acc.worst_auroc_slack = std::min(acc.worst_auroc_slack, c.worst_auroc_slack);
  acc.worst_tpr_slack = std::min(acc.worst_tpr_slack, c.worst_tpr_slack);
  acc.violations += c.violations;
}

// Checks AUROC <= bound(tv) and TPR <= FPR + tv at every realized threshold
// for each detector. Violations are counted, never thrown.
inline BoundCheck verify_bound(const DiscreteDistribution& m, const DiscreteDistribution& h,
                               std::span<const DetectorFunction> detectors) {
  BoundCheck out;
  out.tv = tv_distance(m, h);
  out.bound = auroc_bound(out.tv);
  for (const auto& d : detectors) {
    const auto roc = auroc_of(d, m, h);
    ++out.detectors;
    out.max_auroc = std::max(out.max_auroc, roc.auroc);
    const double slack = out.bound - roc.auroc;
    out.worst_auroc_slack = std::min(out.worst_auroc_slack, slack);
    if (slack < -kBoundTolerance) ++out.violations;
    for (const auto& p : roc.points) {
      ++out.thresholds;
      const double s = p.fpr + out.tv - p.tpr;
      out.worst_tpr_slack = std::min(out.worst_tpr_slack, s);
      if (s < -kBoundTolerance) ++out.violations;
    }
  }
  return out;
}

// I.i.d. standard-normal scores per outcome.
inline std::vector<DetectorFunction> random_detectors(std::size_t outcomes, std::size_t count,
                                                      std::uint64_t seed) {
  std::vector<DetectorFunction> out;
  Engine rng = make_engine(seed);
  std::normal_distribution<double> normal;
  for (std::size_t i = 0; i < count; ++i) {
    DetectorFunction d(outcomes);
    for (double& s : d) s = normal(rng);
    out.push_back(std::move(d));
  }
  return out;
}

// Likelihood-ratio detector log(m/h) (the most powerful test); infinite ratios
// are mapped to finite extremes.
inline DetectorFunction likelihood_ratio_detector(const DiscreteDistribution& m, const DiscreteDistribution& h) {
  detail::require_same_space(m.size(), h.size());
  DetectorFunction d(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i] == 0.0 && h[i] == 0.0) d[i] = 0.0;
    else if (h[i] == 0.0) d[i] = 1e300;
    else if (m[i] == 0.0) d[i] = -1e300;
    else d[i] = std::log(m[i]) - std::log(h[i]);
  }
  return d;
}

// Random pmf: Dirichlet(1) weights with a random fraction of outcomes zeroed.
inline DiscreteDistribution random_distribution(std::size_t outcomes, Engine& rng, double zero_fraction = 0.0) {
  std::exponential_distribution<double> expo(1.0);
  std::vector<double> w(outcomes);
  for (double& x : w) x = bernoulli(rng, zero_fraction) ? 0.0 : expo(rng);
  if (std::all_of(w.begin(), w.end(), [](double x) { return x == 0.0; }))
    w[uniform_below(rng, outcomes)] = 1.0;
  return DiscreteDistribution::from_weights(std::move(w));
}

// H random; M = (1 - lambda) H + lambda R for random R and lambda, which
// spreads the pairs over the whole range of total variation.
inline std::pair<DiscreteDistribution, DiscreteDistribution> random_pair(std::size_t outcomes, Engine& rng) {
  const double zero_h = uniform01(rng) < 0.3 ? 0.5 * uniform01(rng) : 0.0;
  const double zero_r = uniform01(rng) < 0.3 ? 0.9 * uniform01(rng) : 0.0;
  auto h = random_distribution(outcomes, rng, zero_h);
  const auto r = random_distribution(outcomes, rng, zero_r);
  const double lambda = uniform01(rng);
  std::vector<double> mw(outcomes);
  for (std::size_t i = 0; i < outcomes; ++i) mw[i] = (1.0 - lambda) * h[i] + lambda * r[i];
  return {DiscreteDistribution::from_weights(std::move(mw)), std::move(h)};
}

struct CampaignConfig {
  std::vector<std::size_t> outcome_sizes{64, 256, 1024};
  std::size_t pairs = 1000;
  std::size_t detectors_per_pair = 50;
  bool include_likelihood_ratio = true;
  std::uint64_t seed = 1;
};

struct CampaignReport {
  CampaignConfig config;
  BoundCheck totals;
  double min_tv = 1.0, max_tv = 0.0;
};

// Pair i uses outcome size outcome_sizes[i % sizes] and seed derive_seed(seed, i).
inline CampaignReport run_bound_campaign(const CampaignConfig& cfg) {
  CampaignReport rep;
  rep.config = cfg;
  for (std::size_t i = 0; i < cfg.pairs; ++i) {
    const std::size_t n = cfg.outcome_sizes[i % cfg.outcome_sizes.size()];
    const std::uint64_t pair_seed = derive_seed(cfg.seed, i);
    Engine rng = make_engine(pair_seed);
    const auto [m, h] = random_pair(n, rng);
    auto detectors = random_detectors(n, cfg.detectors_per_pair, derive_seed(pair_seed, 1));
    if (cfg.include_likelihood_ratio) detectors.push_back(likelihood_ratio_detector(m, h));
    const auto check = verify_bound(m, h, detectors);
    merge_into(rep.totals, check);
    rep.min_tv = std::min(rep.min_tv, check.tv);
    rep.max_tv = std::max(rep.max_tv, check.tv);
  }
  return rep;
}

inline nlohmann::json to_json(const CampaignReport& r) {
  return {{"seed", r.config.seed},
          {"pairs", r.config.pairs},
          {"outcome_sizes", r.config.outcome_sizes},
          {"detectors_per_pair", r.config.detectors_per_pair},
          {"likelihood_ratio_probe", r.config.include_likelihood_ratio},
          {"detectors_checked", r.totals.detectors},
          {"thresholds_checked", r.totals.thresholds},
          {"violations", r.totals.violations},
          {"worst_auroc_slack", r.totals.worst_auroc_slack},
          {"worst_tpr_slack", r.totals.worst_tpr_slack},
          {"max_auroc", r.totals.max_auroc},
          {"tv_range", {r.min_tv, r.max_tv}},
          {"tolerance", kBoundTolerance}};
}

// ---- tightness construction ----

struct Tightness {
  DiscreteDistribution m;
  DetectorFunction detector;  // -pdf_H
  double target_tv = 0.0;
  double achieved_tv = 0.0;
  double tie_mass = 0.0;        // sum_s m(s) h(s)
  std::size_t retained = 0;     // support outcomes where M copies H
  std::size_t zero_outcomes = 0;
};

// Given H with at least one zero-mass outcome, builds M that copies H on its
// lowest-density support outcomes (a sublevel set of pdf_H) carrying mass
// 1 - tv, and spreads tv uniformly over the zero-mass outcomes. tv is the
// target snapped to the nearest achievable value.
inline Tightness tightness_construct(const DiscreteDistribution& h, double target_tv) {
  if (!(target_tv >= 0.0 && target_tv < 1.0)) throw Error("config", "target_tv must lie in [0, 1)");
  std::vector<std::size_t> zeros, support;
  for (std::size_t s = 0; s < h.size(); ++s) (h[s] == 0.0 ? zeros : support).push_back(s);
  if (zeros.empty()) throw Error("no_zero_mass", "construction requires zero-mass outcomes");
  std::stable_sort(support.begin(), support.end(), [&](std::size_t a, std::size_t b) { return h[a] < h[b]; });

  // cumulative[k] = H-mass of the k lowest-density support outcomes
  std::vector<double> cumulative(support.size() + 1, 0.0);
  for (std::size_t k = 0; k < support.size(); ++k) cumulative[k + 1] = cumulative[k] + h[support[k]];
  cumulative.back() = 1.0;
  std::size_t best = support.size();
  for (std::size_t k = 0; k <= support.size(); ++k)
    if (std::abs(1.0 - cumulative[k] - target_tv) < std::abs(1.0 - cumulative[best] - target_tv)) best = k;

  Tightness out;
  out.target_tv = target_tv;
  out.achieved_tv = 1.0 - cumulative[best];
  out.retained = best;
  out.zero_outcomes = zeros.size();
  std::vector<double> pm(h.size(), 0.0);
  for (std::size_t k = 0; k < best; ++k) pm[support[k]] = h[support[k]];
  for (std::size_t z : zeros) pm[z] = out.achieved_tv / static_cast<double>(zeros.size());
  out.m = DiscreteDistribution(std::move(pm));
  out.detector.resize(h.size());
  for (std::size_t s = 0; s < h.size(); ++s) out.detector[s] = -h[s];
  for (std::size_t s = 0; s < h.size(); ++s) out.tie_mass += out.m[s] * h[s];
  return out;
}

// Near-uniform H over `outcomes` outcomes: the last `zero_outcomes` have mass
// 0, the rest have distinct masses proportional to 1 + 0.5 u, u ~ U(0,1).
inline DiscreteDistribution near_uniform_with_zeros(std::size_t outcomes, std::size_t zero_outcomes,
                                                    std::uint64_t seed) {
  if (zero_outcomes == 0 || zero_outcomes >= outcomes) throw Error("config", "need 0 < zeros < outcomes");
  Engine rng = make_engine(seed);
  std::vector<double> w(outcomes, 0.0);
  for (std::size_t s = 0; s + zero_outcomes < outcomes; ++s) w[s] = 1.0 + 0.5 * uniform01(rng);
  return DiscreteDistribution::from_weights(std::move(w));
}

// ---- corollary checks ----

struct CorollaryCheck {
  double tv = 0.0;
  std::size_t thresholds = 0;
  double worst_slack = 1.0;  // min over thresholds and role assignments of tv + P_H[+] - P_M[+]
  std::size_t violations = 0;
  bool holds() const { return violations == 0; }
};

// For every threshold of D, P_M[D >= t] <= tv + P_H[D >= t] and the same with
// the roles of M and H exchanged.
inline CorollaryCheck verify_corollaries(const DiscreteDistribution& m, const DiscreteDistribution& h,
                                         const DetectorFunction& d) {
  CorollaryCheck out;
  out.tv = tv_distance(m, h);
  double pm = 0.0, ph = 0.0;
  for (const auto& lv : score_levels(d, m, h)) {
    pm += lv.m_mass;
    ph += lv.h_mass;
    ++out.thresholds;
    for (double s : {out.tv + ph - pm, out.tv + pm - ph}) {
      out.worst_slack = std::min(out.worst_slack, s);
      if (s < -kBoundTolerance) ++out.violations;
    }
  }
  return out;
}

// ---- exhaustive sequence enumeration ----

inline constexpr std::size_t kMaxEnumeratedOutcomes = std::size_t{1} << 20;

inline std::size_t sequence_space_size(std::size_t vocab_size, std::size_t length) {
  double total = 1.0;
  for (std::size_t i = 0; i < length; ++i) total *= static_cast<double>(vocab_size);
  if (total > static_cast<double>(kMaxEnumeratedOutcomes))
    throw Error("space_too_large", "|V|^length = " + std::to_string(total) +
                                       " exceeds the enumeration limit of 2^20 outcomes");
  return static_cast<std::size_t>(total);
}

// Outcome id of a sequence: base-|V| digits, first token most significant.
inline std::size_t sequence_index(std::span<const TokenId> seq, std::size_t vocab_size) {
  std::size_t idx = 0;
  for (TokenId t : seq) idx = idx * vocab_size + t;
  return idx;
}

inline Tokens sequence_at(std::size_t index, std::size_t vocab_size, std::size_t length) {
  Tokens seq(length);
  for (std::size_t i = length; i-- > 0;) {
    seq[i] = static_cast<TokenId>(index % vocab_size);
    index /= vocab_size;
  }
  return seq;
}

using StepDistribution = std::function<DiscreteDistribution(std::span<const TokenId>)>;

// Exact law of the next `length` tokens after `prompt`, over Omega = V^length.
inline DiscreteDistribution enumerate_sequence_dist(const StepDistribution& step, std::size_t vocab_size,
                                                    const Tokens& prompt, std::size_t length) {
  if (length == 0) throw Error("config", "length must be >= 1");
  std::vector<double> pmf(sequence_space_size(vocab_size, length), 0.0);
  Tokens history = prompt;
  std::function<void(std::size_t, double, std::size_t)> rec = [&](std::size_t depth, double mass,
                                                                   std::size_t index) {
    const auto d = step(history);
    for (std::size_t t = 0; t < vocab_size; ++t) {
      const double p = mass * d[t];
      if (p == 0.0) continue;
      const std::size_t next_index = index * vocab_size + t;
      if (depth + 1 == length) {
        pmf[next_index] = p;
      } else {
        history.push_back(static_cast<TokenId>(t));
        rec(depth + 1, p, next_index);
        history.pop_back();
      }
    }
  };
  rec(0, 1.0, 0);
  return DiscreteDistribution(std::move(pmf));  // path products already sum to 1; no renormalization
}

inline DiscreteDistribution enumerate_sequence_dist(const MarkovLM& lm, const Tokens& prompt, std::size_t length) {
  return enumerate_sequence_dist([&](std::span<const TokenId> h) { return lm.next_token_dist(h); },
                                 lm.vocab_size(), prompt, length);
}

inline DiscreteDistribution enumerate_sequence_dist(const MarkovLM& lm, const GreenPartition& partition,
                                                    const Tokens& prompt, std::size_t length) {
  return enumerate_sequence_dist(
      [&](std::span<const TokenId> h) { return watermarked_next_dist(lm, h, partition); }, lm.vocab_size(),
      prompt, length);
}

// Bound curve for plotting: "tv,bound" rows for tv = 0, 0.01, ..., 1.
inline std::string bound_curve_csv() {
  std::ostringstream out;
  out.precision(17);
  out << "tv,bound\n";
  for (int i = 0; i <= 100; ++i) {
    const double tv = i / 100.0;
    out << tv << ',' << auroc_bound(tv) << '\n';
  }
  return out.str();
}

}  // namespace wmlab::theory
