#pragma once

// Soft watermarking: a keyed green/red split of the vocabulary for every
// prefix token, a multiplicative boost e^delta on green probabilities while
// sampling, and the one-proportion z-test detector.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "wmlab/distribution.hpp"
#include "wmlab/error.hpp"
#include "wmlab/lm.hpp"
#include "wmlab/rng.hpp"

namespace wmlab {

struct WatermarkParams {
  std::uint64_t key = 0x15c0ffee2024ULL;
  double gamma = 0.25;
  double delta = 2.0;

  std::size_t green_size(std::size_t vocab_size) const {
    return static_cast<std::size_t>(std::llround(gamma * static_cast<double>(vocab_size)));
  }

  void validate(std::size_t vocab_size) const {
    if (!(gamma > 0.0 && gamma < 1.0)) throw Error("config", "gamma must lie in (0, 1)");
    if (!(delta >= 0.0) || !std::isfinite(delta)) throw Error("config", "delta must be >= 0");
    if (vocab_size < 2) throw Error("config", "vocabulary needs at least 2 tokens");
    if (green_size(vocab_size) < 1) throw Error("config", "round(gamma * |V|) must be >= 1");
  }
};

inline std::string key_to_hex(std::uint64_t key) {
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << key;
  return ss.str();
}

inline std::uint64_t key_from_hex(const std::string& hex) {
  std::string digits = hex;
  if (digits.rfind("0x", 0) == 0 || digits.rfind("0X", 0) == 0) digits = digits.substr(2);
  if (digits.empty() || digits.size() > 16 ||
      digits.find_first_not_of("0123456789abcdefABCDEF") != std::string::npos)
    throw Error("schema", "key_hex must be 1-16 hex digits");
  return std::stoull(digits, nullptr, 16);
}

inline nlohmann::json to_json(const WatermarkParams& p) {
  return {{"key_hex", key_to_hex(p.key)}, {"gamma", p.gamma}, {"delta", p.delta}};
}

inline WatermarkParams params_from_json(const nlohmann::json& j) {
  try {
    WatermarkParams p;
    p.key = key_from_hex(j.at("key_hex").get<std::string>());
    p.gamma = j.at("gamma").get<double>();
    p.delta = j.at("delta").get<double>();
    if (!(p.gamma > 0.0 && p.gamma < 1.0)) throw Error("schema", "gamma must lie in (0, 1)");
    if (!(p.delta >= 0.0)) throw Error("schema", "delta must be >= 0");
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw Error("schema", std::string("watermark params: ") + e.what());
  }
}

// Green list for `prev_token`: a keyed hash of (key, prev_token) seeds a PRNG
// that draws a uniformly random subset of size round(gamma * vocab_size) with a
// partial Fisher-Yates shuffle. Returned sorted ascending.
inline std::vector<TokenId> green_list(const WatermarkParams& params, TokenId prev_token,
                                       std::size_t vocab_size) {
  params.validate(vocab_size);
  const std::size_t k = params.green_size(vocab_size);
  Engine rng(splitmix64(params.key ^ splitmix64(0x67726565ULL + prev_token)));
  std::vector<TokenId> perm(vocab_size);
  std::iota(perm.begin(), perm.end(), TokenId{0});
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = i + static_cast<std::size_t>(uniform_below(rng, vocab_size - i));
    std::swap(perm[i], perm[j]);
  }
  perm.resize(k);
  std::sort(perm.begin(), perm.end());
  return perm;
}

// Membership table for every prefix token, computed once (|V|^2 bytes).
class GreenPartition {
 public:
  GreenPartition(const WatermarkParams& params, std::size_t vocab_size)
      : params_(params), vocab_size_(vocab_size), member_(vocab_size * vocab_size, 0) {
    params.validate(vocab_size);
    for (std::size_t prev = 0; prev < vocab_size; ++prev)
      for (TokenId g : green_list(params, static_cast<TokenId>(prev), vocab_size))
        member_[prev * vocab_size + g] = 1;
  }

  const WatermarkParams& params() const { return params_; }
  std::size_t vocab_size() const { return vocab_size_; }

  bool is_green(TokenId prev, TokenId token) const {
    if (prev >= vocab_size_ || token >= vocab_size_) throw Error("schema", "token id out of range");
    return member_[static_cast<std::size_t>(prev) * vocab_size_ + token] != 0;
  }

 private:
  WatermarkParams params_;
  std::size_t vocab_size_;
  std::vector<std::uint8_t> member_;
};

inline TokenId prefix_token(std::span<const TokenId> context) {
  return context.empty() ? Vocabulary::kBos : context.back();
}

// p'(t) proportional to p(t) * e^delta for green t, p(t) otherwise.
inline DiscreteDistribution boost_green(const DiscreteDistribution& base, TokenId prefix,
                                        const GreenPartition& partition) {
  const double delta = partition.params().delta;
  if (delta == 0.0) return base;
  const double boost = std::exp(delta);
  std::vector<double> w(base.pmf().begin(), base.pmf().end());
  for (std::size_t t = 0; t < w.size(); ++t)
    if (partition.is_green(prefix, static_cast<TokenId>(t))) w[t] *= boost;
  return DiscreteDistribution::from_weights(std::move(w));
}

inline DiscreteDistribution watermarked_next_dist(const MarkovLM& lm, std::span<const TokenId> context,
                                                  const GreenPartition& partition) {
  return boost_green(lm.next_token_dist(context), prefix_token(context), partition);
}

inline DiscreteDistribution watermarked_next_dist(const MarkovLM& lm, std::span<const TokenId> context,
                                                  const WatermarkParams& params) {
  return watermarked_next_dist(lm, context, GreenPartition(params, lm.vocab_size()));
}

struct WatermarkedText {
  Tokens tokens;
  std::vector<bool> green_mask;  // per emitted token, keyed by its predecessor
};

inline WatermarkedText generate_watermarked(const MarkovLM& lm, const GenerationConfig& config,
                                            const GreenPartition& partition) {
  WatermarkedText out;
  out.tokens = sample_with(config, [&](std::span<const TokenId> h) {
    return watermarked_next_dist(lm, h, partition);
  });
  TokenId prev = prefix_token(config.prompt);
  for (TokenId t : out.tokens) {
    out.green_mask.push_back(partition.is_green(prev, t));
    prev = t;
  }
  return out;
}

inline WatermarkedText generate_watermarked(const MarkovLM& lm, const GenerationConfig& config,
                                            const WatermarkParams& params) {
  return generate_watermarked(lm, config, GreenPartition(params, lm.vocab_size()));
}

struct GreenCount {
  std::size_t green = 0;
  std::size_t scored = 0;
};

// Scores positions 1..n-1 against the list of their predecessor. When the
// preceding context (e.g. the last prompt token) is known, pass it as `prefix`
// and position 0 is scored too.
inline GreenCount count_green(std::span<const TokenId> tokens, const GreenPartition& partition,
                              std::optional<TokenId> prefix = std::nullopt) {
  const std::size_t needed = prefix ? 1 : 2;
  if (tokens.size() < needed) throw Error("too_short", "too short to score");
  GreenCount c;
  std::optional<TokenId> prev = prefix;
  for (TokenId t : tokens) {
    if (prev) {
      ++c.scored;
      if (partition.is_green(*prev, t)) ++c.green;
    }
    prev = t;
  }
  return c;
}

inline GreenCount count_green(std::span<const TokenId> tokens, const WatermarkParams& params,
                              std::size_t vocab_size) {
  if (tokens.size() < 2) throw Error("too_short", "too short to score");
  GreenCount c;
  for (std::size_t i = 1; i < tokens.size(); ++i) {
    ++c.scored;
    const auto green = green_list(params, tokens[i - 1], vocab_size);
    if (std::binary_search(green.begin(), green.end(), tokens[i])) ++c.green;
  }
  return c;
}

// One-proportion z statistic against Binomial(scored, gamma).
inline double z_score(std::size_t green_count, std::size_t scored_count, double gamma) {
  if (scored_count == 0) throw Error("too_short", "z_score needs at least one scored token");
  if (!(gamma > 0.0 && gamma < 1.0)) throw Error("config", "gamma must lie in (0, 1)");
  const double t = static_cast<double>(scored_count);
  return (static_cast<double>(green_count) - gamma * t) / std::sqrt(t * gamma * (1.0 - gamma));
}

inline constexpr double kDefaultZThreshold = 4.0;

struct DetectionResult {
  std::size_t green_count = 0;
  std::size_t scored_count = 0;
  double green_fraction = 0.0;
  double z = 0.0;
  bool watermarked = false;
  double threshold = kDefaultZThreshold;
};

inline DetectionResult make_detection(GreenCount c, double gamma, double threshold) {
  DetectionResult r;
  r.green_count = c.green;
  r.scored_count = c.scored;
  r.green_fraction = static_cast<double>(c.green) / static_cast<double>(c.scored);
  r.z = z_score(c.green, c.scored, gamma);
  r.threshold = threshold;
  r.watermarked = r.z >= threshold;
  return r;
}

inline DetectionResult detect_watermark(std::span<const TokenId> tokens, const GreenPartition& partition,
                                        double threshold = kDefaultZThreshold,
                                        std::optional<TokenId> prefix = std::nullopt) {
  return make_detection(count_green(tokens, partition, prefix), partition.params().gamma, threshold);
}

inline DetectionResult detect_watermark(std::span<const TokenId> tokens, const WatermarkParams& params,
                                        std::size_t vocab_size, double threshold = kDefaultZThreshold) {
  return make_detection(count_green(tokens, params, vocab_size), params.gamma, threshold);
}

inline nlohmann::json to_json(const DetectionResult& r) {
  return {{"green_count", r.green_count},
          {"scored_count", r.scored_count},
          {"green_fraction", r.green_fraction},
          {"z", r.z},
          {"verdict", r.watermarked ? "watermarked" : "not-watermarked"},
          {"threshold", r.threshold}};
}

}  // namespace wmlab
