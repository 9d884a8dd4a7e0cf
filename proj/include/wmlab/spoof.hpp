#pragma once

// Watermark spoofing: infer per-prefix green lists from the watermarked
// model's output statistics over the N most common tokens, then compose text
// from the inferred lists.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "wmlab/error.hpp"
#include "wmlab/lm.hpp"
#include "wmlab/rng.hpp"
#include "wmlab/watermark.hpp"

namespace wmlab {

inline constexpr std::size_t kDefaultCommonTokens = 181;
inline constexpr std::uint64_t kDefaultSpoofBudget = 100000;
inline constexpr std::uint64_t kMinRowObservations = 25;

// N highest-frequency non-special tokens of the model's training data,
// frequency descending, ties by id.
inline std::vector<TokenId> select_common_tokens(const MarkovLM& lm, std::size_t n) {
  const auto counts = lm.unigram_counts();
  std::vector<TokenId> ids;
  for (std::size_t t = 0; t < counts.size(); ++t)
    if (!Vocabulary::is_special(static_cast<TokenId>(t))) ids.push_back(static_cast<TokenId>(t));
  if (n == 0 || n > ids.size())
    throw Error("config", "N must lie in [1, " + std::to_string(ids.size()) + "]");
  std::stable_sort(ids.begin(), ids.end(), [&](TokenId a, TokenId b) { return counts[a] > counts[b]; });
  ids.resize(n);
  return ids;
}

class ScoreTable {
 public:
  ScoreTable() = default;

  explicit ScoreTable(std::vector<TokenId> common_tokens)
      : common_(std::move(common_tokens)), counts_(common_.size() * common_.size(), 0) {
    for (std::size_t i = 0; i < common_.size(); ++i)
      if (!index_.emplace(common_[i], i).second) throw Error("schema", "duplicate common token");
  }

  std::size_t size() const { return common_.size(); }
  const std::vector<TokenId>& common_tokens() const { return common_; }
  std::uint64_t queries_made() const { return queries_made_; }
  void set_queries_made(std::uint64_t q) { queries_made_ = q; }

  std::optional<std::size_t> index_of(TokenId t) const {
    const auto it = index_.find(t);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::uint64_t count(std::size_t prefix_row, std::size_t suffix_col) const {
    return counts_.at(prefix_row * common_.size() + suffix_col);
  }
  void add(std::size_t prefix_row, std::size_t suffix_col, std::uint64_t n = 1) {
    counts_.at(prefix_row * common_.size() + suffix_col) += n;
  }

  std::uint64_t row_total(std::size_t prefix_row) const {
    std::uint64_t s = 0;
    for (std::size_t c = 0; c < common_.size(); ++c) s += count(prefix_row, c);
    return s;
  }
  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto c : counts_) s += c;
    return s;
  }

  bool usable(std::size_t prefix_row) const { return row_total(prefix_row) >= kMinRowObservations; }
  std::size_t usable_rows() const {
    std::size_t n = 0;
    for (std::size_t r = 0; r < common_.size(); ++r) n += usable(r) ? 1 : 0;
    return n;
  }

 private:
  std::vector<TokenId> common_;
  std::unordered_map<TokenId, std::size_t> index_;
  std::vector<std::uint64_t> counts_;  // row-major, row = prefix
  std::uint64_t queries_made_ = 0;
};

// (prompt, continuation length, seed) -> continuation tokens.
using TextGenerator = std::function<Tokens(const Tokens&, std::size_t, std::uint64_t)>;

struct LearnOptions {
  std::size_t prompt_length = 8;
  std::size_t continuation_length = 32;
};

// Queries `generator` with nonsense prompts drawn uniformly from the common
// tokens and counts every adjacent (prefix, suffix) pair of common tokens in
// the output, including the pair that joins the prompt to the continuation.
inline ScoreTable learn_scores(const TextGenerator& generator, const std::vector<TokenId>& common_tokens,
                               std::uint64_t budget_tokens, std::uint64_t seed, const LearnOptions& opts = {}) {
  ScoreTable table(common_tokens);
  if (common_tokens.empty()) throw Error("config", "no common tokens");
  Engine rng = make_engine(seed);
  std::uint64_t observed = 0;
  for (std::uint64_t query = 0; observed < budget_tokens; ++query) {
    Tokens prompt;
    for (std::size_t i = 0; i < opts.prompt_length; ++i)
      prompt.push_back(common_tokens[uniform_below(rng, common_tokens.size())]);
    const Tokens out = generator(prompt, opts.continuation_length, derive_seed(seed, query));
    if (out.empty()) throw Error("runtime", "generator returned no tokens");
    std::optional<std::size_t> prev =
        prompt.empty() ? std::nullopt : table.index_of(prompt.back());
    for (TokenId t : out) {
      const auto cur = table.index_of(t);
      if (prev && cur) table.add(*prev, *cur);
      prev = cur;
    }
    observed += out.size();
  }
  table.set_queries_made(observed);
  return table;
}

inline TextGenerator watermarked_generator(const MarkovLM& lm, const GreenPartition& partition) {
  return [&lm, &partition](const Tokens& prompt, std::size_t length, std::uint64_t seed) {
    return generate_watermarked(lm, GenerationConfig(prompt, length, seed), partition).tokens;
  };
}

namespace detail {

inline std::size_t checked_row(const ScoreTable& table, TokenId prefix) {
  const auto row = table.index_of(prefix);
  if (!row) throw Error("unknown_prefix", "prefix is not one of the common tokens");
  if (!table.usable(*row)) throw Error("insufficient_observations", "insufficient observations for prefix");
  return *row;
}

}  // namespace detail

inline double green_score(const ScoreTable& table, TokenId prefix, TokenId suffix) {
  const std::size_t row = detail::checked_row(table, prefix);
  const auto col = table.index_of(suffix);
  if (!col) return 0.0;
  return static_cast<double>(table.count(row, *col)) / static_cast<double>(table.row_total(row));
}

struct Suggestion {
  TokenId token = 0;
  double score = 0.0;
};

// Top `top_k` suffixes by green score, ties by token id.
inline std::vector<Suggestion> suggest(const ScoreTable& table, TokenId prefix, std::size_t top_k) {
  const std::size_t row = detail::checked_row(table, prefix);
  const double total = static_cast<double>(table.row_total(row));
  std::vector<Suggestion> out;
  for (std::size_t c = 0; c < table.size(); ++c)
    out.push_back({table.common_tokens()[c], static_cast<double>(table.count(row, c)) / total});
  std::sort(out.begin(), out.end(), [](const Suggestion& a, const Suggestion& b) {
    return a.score != b.score ? a.score > b.score : a.token < b.token;
  });
  if (out.size() > top_k) out.resize(top_k);
  return out;
}

// Most frequent common token whose row is usable.
inline std::optional<TokenId> fallback_token(const ScoreTable& table) {
  for (std::size_t r = 0; r < table.size(); ++r)
    if (table.usable(r)) return table.common_tokens()[r];
  return std::nullopt;
}

// Openers for a fresh composition (no prefix yet): usable common tokens ranked
// by their share of all observed pairs, ties by token id.
inline std::vector<Suggestion> start_suggestions(const ScoreTable& table, std::size_t top_k) {
  const double total = static_cast<double>(table.total());
  std::vector<Suggestion> out;
  for (std::size_t r = 0; r < table.size(); ++r)
    if (table.usable(r)) out.push_back({table.common_tokens()[r], static_cast<double>(table.row_total(r)) / total});
  std::sort(out.begin(), out.end(), [](const Suggestion& a, const Suggestion& b) {
    return a.score != b.score ? a.score > b.score : a.token < b.token;
  });
  if (out.size() > top_k) out.resize(top_k);
  return out;
}

inline Tokens compose_greedy(const ScoreTable& table, TokenId start_token, std::size_t length) {
  if (length < 2) throw Error("config", "composition length must be >= 2");
  if (!table.index_of(start_token)) throw Error("unknown_prefix", "start token is not a common token");
  const auto fallback = fallback_token(table);
  if (!fallback) throw Error("insufficient_observations", "score table has no usable rows");
  Tokens out{start_token};
  while (out.size() < length) {
    const auto row = table.index_of(out.back());
    out.push_back(row && table.usable(*row) ? suggest(table, out.back(), 1).front().token : *fallback);
  }
  return out;
}

struct InferenceReport {
  std::size_t k = 0;
  std::size_t prefixes = 0;
  std::size_t usable_prefixes = 0;
  std::vector<double> precision;  // per evaluated prefix, in common-token order
  std::vector<double> recall;     // hits / green common tokens for that prefix
  double mean_precision = 0.0;
  double median_precision = 0.0;
  double mean_recall = 0.0;
};

// Precision@k of each prefix's k highest-count suffixes (ties by id) against
// the true green lists. Evaluates the first `max_prefixes` common tokens (all
// when 0); rows are ranked by raw counts, usable or not.
inline InferenceReport verify_inference(const ScoreTable& table, const GreenPartition& truth, std::size_t k,
                                        std::size_t max_prefixes = 0) {
  if (k == 0 || k > table.size()) throw Error("config", "k must lie in [1, N]");
  InferenceReport rep;
  rep.k = k;
  const std::size_t limit = max_prefixes == 0 ? table.size() : std::min(max_prefixes, table.size());
  for (std::size_t r = 0; r < limit; ++r) {
    std::vector<std::size_t> cols(table.size());
    for (std::size_t c = 0; c < cols.size(); ++c) cols[c] = c;
    std::stable_sort(cols.begin(), cols.end(), [&](std::size_t a, std::size_t b) {
      const auto ca = table.count(r, a), cb = table.count(r, b);
      return ca != cb ? ca > cb : table.common_tokens()[a] < table.common_tokens()[b];
    });
    std::size_t hits = 0, greens = 0;
    for (std::size_t i = 0; i < k; ++i)
      hits += truth.is_green(table.common_tokens()[r], table.common_tokens()[cols[i]]) ? 1 : 0;
    for (TokenId c : table.common_tokens()) greens += truth.is_green(table.common_tokens()[r], c) ? 1 : 0;
    rep.precision.push_back(static_cast<double>(hits) / static_cast<double>(k));
    rep.recall.push_back(greens == 0 ? 1.0 : static_cast<double>(hits) / static_cast<double>(greens));
    rep.usable_prefixes += table.usable(r) ? 1 : 0;
  }
  rep.prefixes = limit;
  double s = 0.0, rs = 0.0;
  for (double p : rep.precision) s += p;
  for (double x : rep.recall) rs += x;
  rep.mean_precision = s / static_cast<double>(limit);
  rep.mean_recall = rs / static_cast<double>(limit);
  auto sorted = rep.precision;
  std::sort(sorted.begin(), sorted.end());
  rep.median_precision = limit % 2 == 1 ? sorted[limit / 2] : 0.5 * (sorted[limit / 2 - 1] + sorted[limit / 2]);
  return rep;
}

inline std::size_t inferred_green_size(const ScoreTable& table, double gamma) {
  return static_cast<std::size_t>(std::ceil(gamma * static_cast<double>(table.size()) - 1e-12));
}

// Token-by-token composition with live detector statistics. In lab mode the
// statistics use the true watermark; otherwise a suffix counts as green when it
// is among the top ceil(gamma N) inferred suffixes of its prefix.
class CompositionSession {
 public:
  CompositionSession(const ScoreTable& table, const GreenPartition* truth, double gamma,
                     double threshold = kDefaultZThreshold)
      : table_(&table), truth_(truth), gamma_(gamma), threshold_(threshold) {}

  bool params_visible() const { return truth_ != nullptr; }
  const Tokens& tokens() const { return tokens_; }
  std::size_t green_count() const { return green_; }
  std::size_t scored_count() const { return scored_; }

  std::optional<double> green_fraction() const {
    if (scored_ == 0) return std::nullopt;
    return static_cast<double>(green_) / static_cast<double>(scored_);
  }
  std::optional<double> z() const {
    if (scored_ == 0) return std::nullopt;
    return z_score(green_, scored_, gamma_);
  }
  bool watermarked() const { return scored_ > 0 && *z() >= threshold_; }
  double threshold() const { return threshold_; }

  void choose(TokenId token) {
    if (!tokens_.empty()) {
      ++scored_;
      if (is_green(tokens_.back(), token)) ++green_;
    }
    tokens_.push_back(token);
  }

 private:
  bool is_green(TokenId prev, TokenId token) const {
    if (truth_ != nullptr) return truth_->is_green(prev, token);
    const auto row = table_->index_of(prev);
    if (!row || !table_->usable(*row)) return false;
    for (const auto& s : suggest(*table_, prev, inferred_green_size(*table_, gamma_)))
      if (s.token == token && s.score > 0.0) return true;
    return false;
  }

  const ScoreTable* table_;
  const GreenPartition* truth_;
  double gamma_;
  double threshold_;
  Tokens tokens_;
  std::size_t green_ = 0;
  std::size_t scored_ = 0;
};

// ---- table file: {common_tokens:[...], counts:[[...]], queries_made} ----

inline nlohmann::json to_json(const ScoreTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t r = 0; r < t.size(); ++r) {
    std::vector<std::uint64_t> row(t.size());
    for (std::size_t c = 0; c < t.size(); ++c) row[c] = t.count(r, c);
    rows.push_back(std::move(row));
  }
  return {{"common_tokens", t.common_tokens()}, {"counts", std::move(rows)}, {"queries_made", t.queries_made()}};
}

inline ScoreTable score_table_from_json(const nlohmann::json& j) {
  try {
    ScoreTable t(j.at("common_tokens").get<std::vector<TokenId>>());
    const auto& rows = j.at("counts");
    if (rows.size() != t.size()) throw Error("schema", "counts must be N x N");
    for (std::size_t r = 0; r < t.size(); ++r) {
      if (rows[r].size() != t.size()) throw Error("schema", "counts must be N x N");
      for (std::size_t c = 0; c < t.size(); ++c) t.add(r, c, rows[r][c].get<std::uint64_t>());
    }
    t.set_queries_made(j.at("queries_made").get<std::uint64_t>());
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw Error("schema", std::string("score table: ") + e.what());
  }
}

}  // namespace wmlab
