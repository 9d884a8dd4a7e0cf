#pragma once

// Non-watermark detectors. Every score follows "higher = more likely
// AI-generated".

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "wmlab/error.hpp"
#include "wmlab/lm.hpp"
#include "wmlab/paraphrase.hpp"
#include "wmlab/rng.hpp"

namespace wmlab {

enum class DetectorMethod { kAvgLoglik, kNegRank, kNegEntropy, kCurvature, kTrained };

inline std::string_view method_name(DetectorMethod m) {
  switch (m) {
    case DetectorMethod::kAvgLoglik: return "avg_loglik";
    case DetectorMethod::kNegRank: return "neg_rank";
    case DetectorMethod::kNegEntropy: return "neg_entropy";
    case DetectorMethod::kCurvature: return "curvature";
    case DetectorMethod::kTrained: return "trained";
  }
  return "unknown";
}

struct DetectorScore {
  DetectorMethod method = DetectorMethod::kAvgLoglik;
  double value = 0.0;
  std::vector<double> per_token;  // method-specific diagnostics
  std::size_t perturbations = 0;
};

inline nlohmann::json to_json(const DetectorScore& s) {
  nlohmann::json j = {{"method", method_name(s.method)}, {"value", s.value}};
  j["aux"] = {{"per_token", s.per_token}, {"perturbations", s.perturbations}};
  return j;
}

namespace detail {

inline void require_tokens(std::span<const TokenId> tokens) {
  if (tokens.empty()) throw Error("too_short", "detector needs at least one token");
}

inline double mean(std::span<const double> xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

// 1-based rank of `token` in `pmf` sorted by probability descending, ties by id.
inline std::size_t rank_of(std::span<const double> pmf, TokenId token) {
  const double p = pmf[token];
  std::size_t rank = 1;
  for (std::size_t t = 0; t < pmf.size(); ++t)
    if (pmf[t] > p || (pmf[t] == p && t < token)) ++rank;
  return rank;
}

}  // namespace detail

inline DetectorScore avg_loglik_score(const MarkovLM& eval_lm, std::span<const TokenId> tokens) {
  detail::require_tokens(tokens);
  DetectorScore s{DetectorMethod::kAvgLoglik};
  s.per_token = token_log_probs(eval_lm, tokens);
  s.value = detail::mean(s.per_token);
  return s;
}

inline DetectorScore rank_score(const MarkovLM& eval_lm, std::span<const TokenId> tokens) {
  detail::require_tokens(tokens);
  DetectorScore s{DetectorMethod::kNegRank};
  Tokens history;
  for (TokenId t : tokens) {
    const auto d = eval_lm.next_token_dist(history);
    s.per_token.push_back(static_cast<double>(detail::rank_of(d.pmf(), t)));
    history.push_back(t);
  }
  s.value = -detail::mean(s.per_token);
  return s;
}

inline DetectorScore entropy_score(const MarkovLM& eval_lm, std::span<const TokenId> tokens) {
  detail::require_tokens(tokens);
  DetectorScore s{DetectorMethod::kNegEntropy};
  Tokens history;
  for (TokenId t : tokens) {
    s.per_token.push_back(eval_lm.next_token_dist(history).entropy());
    history.push_back(t);
  }
  s.value = -detail::mean(s.per_token);
  return s;
}

inline constexpr double kCurvatureStdFloor = 1e-6;

// Normalized perturbation discrepancy: (logp(x) - mean logp(x~)) / std logp(x~),
// with logp the mean per-token log probability and std the population std.
// per_token holds the perturbed log probabilities.
inline DetectorScore curvature_score(const MarkovLM& eval_lm, const SubstitutionPerturber& perturber,
                                     std::span<const TokenId> tokens, std::size_t k_perturbations,
                                     std::uint64_t seed) {
  detail::require_tokens(tokens);
  if (k_perturbations < 2) throw Error("config", "curvature needs k >= 2 perturbations");
  auto mean_logp = [&](std::span<const TokenId> x) {
    return log_likelihood(eval_lm, x) / static_cast<double>(x.size());
  };
  DetectorScore s{DetectorMethod::kCurvature};
  s.perturbations = k_perturbations;
  for (std::size_t i = 0; i < k_perturbations; ++i)
    s.per_token.push_back(mean_logp(perturber(tokens, derive_seed(seed, i))));
  const double mu = detail::mean(s.per_token);
  double var = 0.0;
  for (double v : s.per_token) var += (v - mu) * (v - mu);
  const double sd = std::max(std::sqrt(var / static_cast<double>(k_perturbations)), kCurvatureStdFloor);
  const double diff = mean_logp(tokens) - mu;
  // Identical perturbations leave only rounding noise in the numerator.
  s.value = std::abs(diff) < 1e-12 ? 0.0 : diff / sd;
  return s;
}

// ---- trained stand-in: logistic regression over hand-crafted statistics ----

inline constexpr int kFeatureVersion = 1;
inline constexpr std::array<std::string_view, 5> kFeatureNames = {
    "avg_loglik", "mean_rank", "mean_entropy", "loglik_std", "type_token_ratio"};
using FeatureVector = std::array<double, kFeatureNames.size()>;

inline FeatureVector text_features(const MarkovLM& eval_lm, std::span<const TokenId> tokens) {
  detail::require_tokens(tokens);
  Tokens history;
  double ll = 0.0, ll2 = 0.0, rank = 0.0, ent = 0.0;
  for (TokenId t : tokens) {
    const auto d = eval_lm.next_token_dist(history);
    const double lp = std::log(d[t]);
    ll += lp;
    ll2 += lp * lp;
    rank += static_cast<double>(detail::rank_of(d.pmf(), t));
    ent += d.entropy();
    history.push_back(t);
  }
  const double n = static_cast<double>(tokens.size());
  const double mean_ll = ll / n;
  const std::unordered_set<TokenId> types(tokens.begin(), tokens.end());
  return {mean_ll, rank / n, ent / n, std::sqrt(std::max(0.0, ll2 / n - mean_ll * mean_ll)),
          static_cast<double>(types.size()) / n};
}

struct TrainedStandIn {
  int feature_version = kFeatureVersion;
  FeatureVector mean{};
  FeatureVector scale{};  // 1 for constant features
  FeatureVector weights{};
  double bias = 0.0;
  double l2 = 0.0;
  std::size_t epochs = 0;
  double final_gradient_norm = 0.0;
  std::vector<double> loss_history;

  FeatureVector standardize(const FeatureVector& x) const {
    FeatureVector z{};
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = (x[i] - mean[i]) / scale[i];
    return z;
  }

  double predict(const FeatureVector& x) const {
    const auto z = standardize(x);
    double a = bias;
    for (std::size_t i = 0; i < z.size(); ++i) a += weights[i] * z[i];
    return 1.0 / (1.0 + std::exp(-a));
  }
};

struct LogisticLoss {
  double loss = 0.0;
  FeatureVector grad_w{};
  double grad_b = 0.0;
};

// Mean log-loss plus (l2/2)|w|^2 and its gradient, over standardized rows.
inline LogisticLoss logistic_loss(const FeatureVector& w, double b, std::span<const FeatureVector> rows,
                                  std::span<const int> labels, double l2) {
  LogisticLoss out;
  const double n = static_cast<double>(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    double a = b;
    for (std::size_t i = 0; i < w.size(); ++i) a += w[i] * rows[r][i];
    const double y = labels[r];
    // log(1 + e^a) - y a, evaluated stably
    out.loss += (a > 0 ? a + std::log1p(std::exp(-a)) : std::log1p(std::exp(a))) - y * a;
    const double p = 1.0 / (1.0 + std::exp(-a));
    for (std::size_t i = 0; i < w.size(); ++i) out.grad_w[i] += (p - y) * rows[r][i];
    out.grad_b += p - y;
  }
  out.loss /= n;
  out.grad_b /= n;
  for (std::size_t i = 0; i < w.size(); ++i) {
    out.grad_w[i] = out.grad_w[i] / n + l2 * w[i];
    out.loss += 0.5 * l2 * w[i] * w[i];
  }
  return out;
}

struct StandInTraining {
  double l2 = 1e-4;
  double gradient_tolerance = 1e-6;
  std::size_t max_epochs = 10000;
};

// Full-batch gradient descent with step 1/L, L an upper bound on the loss
// curvature, so the loss never increases between epochs.
inline TrainedStandIn train_standin(std::span<const FeatureVector> features, std::span<const int> labels,
                                    const StandInTraining& opts = {}) {
  if (features.size() != labels.size()) throw Error("config", "features and labels differ in length");
  std::size_t pos = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw Error("config", "labels must be 0 or 1");
    pos += static_cast<std::size_t>(y);
  }
  if (pos < 10 || labels.size() - pos < 10) throw Error("config", "need >= 10 examples per class");

  TrainedStandIn m;
  m.l2 = opts.l2;
  const double n = static_cast<double>(features.size());
  bool informative = false;
  for (std::size_t i = 0; i < m.mean.size(); ++i) {
    double mu = 0.0;
    for (const auto& f : features) mu += f[i];
    mu /= n;
    double var = 0.0;
    for (const auto& f : features) var += (f[i] - mu) * (f[i] - mu);
    const double sd = std::sqrt(var / n);
    m.mean[i] = mu;
    m.scale[i] = sd > 1e-12 ? sd : 1.0;
    informative = informative || sd > 1e-12;
  }
  if (!informative) throw Error("uninformative_features", "uninformative features");

  std::vector<FeatureVector> rows;
  double max_norm2 = 0.0;
  for (const auto& f : features) {
    rows.push_back(m.standardize(f));
    double s = 1.0;
    for (double z : rows.back()) s += z * z;
    max_norm2 = std::max(max_norm2, s);
  }
  const double step = 1.0 / (0.25 * max_norm2 + opts.l2);

  for (m.epochs = 0; m.epochs < opts.max_epochs; ++m.epochs) {
    const auto g = logistic_loss(m.weights, m.bias, rows, labels, opts.l2);
    m.loss_history.push_back(g.loss);
    double norm2 = g.grad_b * g.grad_b;
    for (double gw : g.grad_w) norm2 += gw * gw;
    m.final_gradient_norm = std::sqrt(norm2);
    if (m.final_gradient_norm < opts.gradient_tolerance) break;
    for (std::size_t i = 0; i < m.weights.size(); ++i) m.weights[i] -= step * g.grad_w[i];
    m.bias -= step * g.grad_b;
  }
  return m;
}

inline DetectorScore trained_score(const TrainedStandIn& model, const MarkovLM& eval_lm,
                                   std::span<const TokenId> tokens) {
  DetectorScore s{DetectorMethod::kTrained};
  const auto f = text_features(eval_lm, tokens);
  s.per_token.assign(f.begin(), f.end());
  s.value = model.predict(f);
  return s;
}

inline nlohmann::json to_json(const TrainedStandIn& m) {
  return {{"feature_version", m.feature_version},
          {"features", kFeatureNames},
          {"mean", m.mean},
          {"scale", m.scale},
          {"weights", m.weights},
          {"bias", m.bias},
          {"l2", m.l2},
          {"epochs", m.epochs},
          {"final_gradient_norm", m.final_gradient_norm}};
}

inline TrainedStandIn standin_from_json(const nlohmann::json& j) {
  try {
    TrainedStandIn m;
    m.feature_version = j.at("feature_version").get<int>();
    if (m.feature_version != kFeatureVersion) throw Error("schema", "unsupported feature version");
    m.mean = j.at("mean").get<FeatureVector>();
    m.scale = j.at("scale").get<FeatureVector>();
    m.weights = j.at("weights").get<FeatureVector>();
    m.bias = j.at("bias").get<double>();
    m.l2 = j.value("l2", 0.0);
    m.epochs = j.value("epochs", std::size_t{0});
    m.final_gradient_norm = j.value("final_gradient_norm", 0.0);
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error("schema", std::string("trained stand-in: ") + e.what());
  }
}

}  // namespace wmlab
