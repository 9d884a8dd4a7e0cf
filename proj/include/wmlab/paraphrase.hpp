#pragma once

// Synonym-class substitution paraphrasing. A SynonymMap partitions part of the
// vocabulary into meaning-equivalence classes; a paraphrase replaces tokens by
// other members of their class.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "wmlab/error.hpp"
#include "wmlab/lm.hpp"
#include "wmlab/rng.hpp"

namespace wmlab {

class SynonymMap {
 public:
  static constexpr std::size_t kNoClass = static_cast<std::size_t>(-1);

  SynonymMap() = default;

  SynonymMap(std::vector<std::vector<TokenId>> classes, std::size_t vocab_size, std::string provenance)
      : classes_(std::move(classes)), class_of_(vocab_size, kNoClass), provenance_(std::move(provenance)) {
    for (std::size_t c = 0; c < classes_.size(); ++c) {
      if (classes_[c].size() < 2) throw Error("schema", "synonym classes need at least 2 members");
      for (TokenId t : classes_[c]) {
        if (t >= vocab_size) throw Error("schema", "synonym class token id out of range");
        if (class_of_[t] != kNoClass) throw Error("schema", "overlapping synonym classes");
        class_of_[t] = c;
      }
    }
  }

  const std::vector<std::vector<TokenId>>& classes() const { return classes_; }
  const std::string& provenance() const { return provenance_; }
  std::size_t vocab_size() const { return class_of_.size(); }

  std::size_t class_of(TokenId t) const { return t < class_of_.size() ? class_of_[t] : kNoClass; }
  const std::vector<TokenId>* class_members(TokenId t) const {
    const auto c = class_of(t);
    return c == kNoClass ? nullptr : &classes_[c];
  }

 private:
  std::vector<std::vector<TokenId>> classes_;
  std::vector<std::size_t> class_of_;
  std::string provenance_;
};

// Shuffles the non-special vocabulary under `seed`, keeps a `coverage`
// fraction of it and cuts it into classes of `class_size`. A remainder smaller
// than `class_size` stays unclassed.
inline SynonymMap randomized_synonym_map(std::size_t vocab_size, std::size_t class_size, double coverage,
                                         std::uint64_t seed) {
  if (class_size < 2) throw Error("config", "synonym class size must be >= 2");
  if (!(coverage > 0.0 && coverage <= 1.0)) throw Error("config", "coverage must lie in (0, 1]");
  std::vector<TokenId> ids;
  for (std::size_t t = 0; t < vocab_size; ++t)
    if (!Vocabulary::is_special(static_cast<TokenId>(t))) ids.push_back(static_cast<TokenId>(t));
  Engine rng = make_engine(seed);
  shuffle(rng, ids);
  ids.resize(static_cast<std::size_t>(std::floor(coverage * static_cast<double>(ids.size()) + 1e-9)));
  std::vector<std::vector<TokenId>> classes;
  for (std::size_t i = 0; i + class_size <= ids.size(); i += class_size) {
    std::vector<TokenId> c(ids.begin() + static_cast<std::ptrdiff_t>(i),
                           ids.begin() + static_cast<std::ptrdiff_t>(i + class_size));
    std::sort(c.begin(), c.end());
    classes.push_back(std::move(c));
  }
  return SynonymMap(std::move(classes), vocab_size, "randomized(" + std::to_string(seed) + ")");
}

inline nlohmann::json to_json(const SynonymMap& map, const Vocabulary& vocab) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : map.classes()) {
    nlohmann::json words = nlohmann::json::array();
    for (TokenId t : c) words.push_back(vocab.token(t));
    classes.push_back(std::move(words));
  }
  return {{"classes", std::move(classes)}};
}

inline SynonymMap synonym_map_from_json(const nlohmann::json& j, const Vocabulary& vocab) {
  std::vector<std::vector<TokenId>> classes;
  try {
    for (const auto& c : j.at("classes")) {
      std::vector<TokenId> ids;
      for (const auto& w : c) {
        const auto word = w.get<std::string>();
        if (!vocab.contains(word)) throw Error("schema", "unknown synonym token '" + word + "'");
        ids.push_back(vocab.id(word));
      }
      classes.push_back(std::move(ids));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error("schema", std::string("synonym map: ") + e.what());
  }
  return SynonymMap(std::move(classes), vocab.size(), "loaded");
}

struct ParaphraseConfig {
  double rate = 0.6;
  std::uint64_t seed = 0;
  std::size_t rounds = 1;
  std::size_t max_detector_queries = 8;

  void validate() const {
    if (!(rate >= 0.0 && rate <= 1.0)) throw Error("config", "paraphrase rate must lie in [0, 1]");
    if (rounds < 1) throw Error("config", "paraphrase rounds must be >= 1");
  }
};

inline nlohmann::json to_json(const ParaphraseConfig& c) {
  return {{"rate", c.rate}, {"seed", c.seed}, {"rounds", c.rounds},
          {"max_detector_queries", c.max_detector_queries}};
}

// Each round, every token in a class is independently replaced, with
// probability `rate`, by a uniformly chosen *other* member of its class.
inline Tokens paraphrase(std::span<const TokenId> tokens, const SynonymMap& map, const ParaphraseConfig& config) {
  config.validate();
  Tokens out(tokens.begin(), tokens.end());
  Engine rng = make_engine(config.seed);
  for (std::size_t round = 0; round < config.rounds; ++round) {
    for (TokenId& t : out) {
      const auto* members = map.class_members(t);
      if (members == nullptr || !bernoulli(rng, config.rate)) continue;
      const auto self = static_cast<std::size_t>(std::find(members->begin(), members->end(), t) - members->begin());
      auto pick = static_cast<std::size_t>(uniform_below(rng, members->size() - 1));
      if (pick >= self) ++pick;
      t = (*members)[pick];
    }
  }
  return out;
}

// Exact output law of one position under `rounds` substitution passes.
inline std::vector<std::pair<TokenId, double>> substitution_marginal(TokenId token, const SynonymMap& map,
                                                                     double rate, std::size_t rounds) {
  const auto* members = map.class_members(token);
  if (members == nullptr || rate == 0.0) return {{token, 1.0}};
  const std::size_t m = members->size();
  std::vector<double> p(m, 0.0);
  p[static_cast<std::size_t>(std::find(members->begin(), members->end(), token) - members->begin())] = 1.0;
  for (std::size_t r = 0; r < rounds; ++r) {
    std::vector<double> next(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      next[i] += p[i] * (1.0 - rate);
      for (std::size_t j = 0; j < m; ++j)
        if (j != i) next[j] += p[i] * rate / static_cast<double>(m - 1);
    }
    p = std::move(next);
  }
  std::vector<std::pair<TokenId, double>> out;
  for (std::size_t i = 0; i < m; ++i)
    if (p[i] > 0.0) out.emplace_back((*members)[i], p[i]);
  return out;
}

// Exact distribution of paraphrase(tokens) as a sparse map sequence -> mass.
// Positions are independent, so the law is the product of the marginals.
inline std::map<Tokens, double> paraphrase_distribution(std::span<const TokenId> tokens, const SynonymMap& map,
                                                        double rate, std::size_t rounds,
                                                        std::size_t max_outcomes = std::size_t{1} << 20) {
  std::vector<std::vector<std::pair<TokenId, double>>> marginals;
  double outcomes = 1.0;
  for (TokenId t : tokens) {
    marginals.push_back(substitution_marginal(t, map, rate, rounds));
    outcomes *= static_cast<double>(marginals.back().size());
  }
  if (outcomes > static_cast<double>(max_outcomes))
    throw Error("space_too_large",
                "paraphrase support exceeds the enumeration limit of " + std::to_string(max_outcomes));
  std::map<Tokens, double> out;
  Tokens current(tokens.size());
  std::function<void(std::size_t, double)> rec = [&](std::size_t pos, double mass) {
    if (pos == tokens.size()) {
      out[current] += mass;
      return;
    }
    for (const auto& [tok, p] : marginals[pos]) {
      current[pos] = tok;
      rec(pos + 1, mass * p);
    }
  };
  rec(0, 1.0);
  return out;
}

struct DetectorVerdict {
  bool detected = false;
  double score = 0.0;
};

using BinaryDetector = std::function<DetectorVerdict(std::span<const TokenId>)>;

struct EvadeResult {
  Tokens tokens;
  std::size_t queries_used = 0;
  bool evaded = false;
  std::size_t candidate_index = 0;
  double score = 0.0;
};

// Generates `candidates_k` paraphrases, queries them in a random order until
// the budget is spent, and returns the first undetected one. On failure the
// lowest-scoring queried candidate is returned.
inline EvadeResult paraphrase_evade(std::span<const TokenId> tokens, const SynonymMap& map,
                                    const BinaryDetector& detector, std::size_t candidates_k,
                                    const ParaphraseConfig& config) {
  if (candidates_k < 1) throw Error("config", "candidates_k must be >= 1");
  if (config.max_detector_queries < 1) throw Error("config", "max_detector_queries must be >= 1");
  std::vector<Tokens> candidates;
  for (std::size_t i = 0; i < candidates_k; ++i) {
    ParaphraseConfig c = config;
    c.seed = derive_seed(config.seed, i);
    candidates.push_back(paraphrase(tokens, map, c));
  }
  std::vector<std::size_t> order(candidates_k);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Engine rng = make_engine(derive_seed(config.seed, 0xe7a5e));
  shuffle(rng, order);

  EvadeResult best;
  bool have_best = false;
  const std::size_t budget = std::min(candidates_k, config.max_detector_queries);
  for (std::size_t q = 0; q < budget; ++q) {
    const std::size_t idx = order[q];
    const DetectorVerdict v = detector(candidates[idx]);
    if (!v.detected) return {candidates[idx], q + 1, true, idx, v.score};
    if (!have_best || v.score < best.score) {
      best = {candidates[idx], q + 1, false, idx, v.score};
      have_best = true;
    }
  }
  best.queries_used = budget;
  return best;
}

struct QualityDelta {
  double perplexity_before = 0.0;
  double perplexity_after = 0.0;
  double delta() const { return perplexity_after - perplexity_before; }
};

inline QualityDelta quality_delta(const MarkovLM& eval_lm, std::span<const TokenId> original,
                                  std::span<const TokenId> paraphrased) {
  if (original.empty() || paraphrased.empty()) throw Error("too_short", "quality_delta needs non-empty texts");
  return {perplexity(eval_lm, original), perplexity(eval_lm, paraphrased)};
}

// Token-substitution perturbation process (used by the curvature detector).
struct SubstitutionPerturber {
  SynonymMap map;
  double rate = 0.15;

  Tokens operator()(std::span<const TokenId> tokens, std::uint64_t seed) const {
    ParaphraseConfig c;
    c.rate = rate;
    c.seed = seed;
    return paraphrase(tokens, map, c);
  }
};

}  // namespace wmlab
