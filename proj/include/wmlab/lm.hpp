#pragma once

// Word-level tokenization and add-alpha smoothed order-n Markov language models.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "wmlab/distribution.hpp"
#include "wmlab/error.hpp"
#include "wmlab/rng.hpp"

namespace wmlab {

using TokenId = std::uint32_t;
using Tokens = std::vector<TokenId>;

namespace detail {

// Length in bytes of a Unicode whitespace sequence starting at `pos`, or 0.
inline std::size_t whitespace_length(std::string_view text, std::size_t pos) {
  const auto c = static_cast<unsigned char>(text[pos]);
  if (c < 0x80) return std::isspace(c) ? 1 : 0;
  auto byte = [&](std::size_t k) -> unsigned {
    return pos + k < text.size() ? static_cast<unsigned char>(text[pos + k]) : 0u;
  };
  if (c == 0xC2 && (byte(1) == 0x85 || byte(1) == 0xA0)) return 2;
  if (c == 0xE1 && byte(1) == 0x9A && byte(2) == 0x80) return 3;
  if (c == 0xE2 && byte(1) == 0x80) {
    const unsigned b = byte(2);
    if ((b >= 0x80 && b <= 0x8A) || b == 0xA8 || b == 0xA9 || b == 0xAF) return 3;
  }
  if (c == 0xE2 && byte(1) == 0x81 && byte(2) == 0x9F) return 3;
  if (c == 0xE3 && byte(1) == 0x80 && byte(2) == 0x80) return 3;
  return 0;
}

}  // namespace detail

// Lowercases ASCII letters, splits on Unicode whitespace and emits every ASCII
// punctuation character as its own token.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) out.push_back(std::exchange(current, {}));
  };
  std::size_t pos = 0;
  while (pos < text.size()) {
    if (const auto ws = detail::whitespace_length(text, pos); ws > 0) {
      flush();
      pos += ws;
      continue;
    }
    const auto c = static_cast<unsigned char>(text[pos]);
    if (c < 0x80 && std::ispunct(c)) {
      flush();
      out.emplace_back(1, static_cast<char>(c));
    } else {
      current.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
    }
    ++pos;
  }
  flush();
  return out;
}

class Vocabulary {
 public:
  static constexpr TokenId kUnk = 0;
  static constexpr TokenId kBos = 1;
  static constexpr std::string_view kUnkToken = "<unk>";
  static constexpr std::string_view kBosToken = "<s>";

  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  // Specials are always ids 0 and 1; the remaining tokens are sorted and
  // de-duplicated so the id assignment does not depend on input order.
  explicit Vocabulary(std::vector<std::string> words) {
    std::erase_if(words, [](const std::string& w) {
      return w.empty() || w == kUnkToken || w == kBosToken;
    });
    std::sort(words.begin(), words.end());
    words.erase(std::unique(words.begin(), words.end()), words.end());
    tokens_.reserve(words.size() + 2);
    tokens_.emplace_back(kUnkToken);
    tokens_.emplace_back(kBosToken);
    for (auto& w : words) tokens_.push_back(std::move(w));
    for (std::size_t i = 0; i < tokens_.size(); ++i)
      index_.emplace(tokens_[i], static_cast<TokenId>(i));
  }

  // Restores a vocabulary whose first two entries are the special markers.
  static Vocabulary from_ordered(const std::vector<std::string>& tokens) {
    if (tokens.size() < 2 || tokens[0] != kUnkToken || tokens[1] != kBosToken)
      throw Error("schema", "vocabulary must start with <unk>, <s>");
    Vocabulary v;
    v.tokens_ = tokens;
    v.index_.clear();
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
      if (!v.index_.emplace(v.tokens_[i], static_cast<TokenId>(i)).second)
        throw Error("schema", "duplicate vocabulary token '" + v.tokens_[i] + "'");
    }
    return v;
  }

  std::size_t size() const { return tokens_.size(); }

  TokenId id(std::string_view token) const {
    const auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnk : it->second;
  }
  bool contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  static bool is_special(TokenId id) { return id == kUnk || id == kBos; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

inline Tokens tokenize(std::string_view text, const Vocabulary& vocab) {
  Tokens ids;
  for (const auto& t : tokenize(text)) ids.push_back(vocab.id(t));
  return ids;
}

// Space-joined rendering; punctuation attaches to the preceding word.
inline std::string detokenize(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::string out;
  for (TokenId id : ids) {
    const std::string& t = vocab.token(id);
    const bool punct = t.size() == 1 && std::ispunct(static_cast<unsigned char>(t[0]));
    if (!out.empty() && !punct) out.push_back(' ');
    out += t;
  }
  return out;
}

inline Vocabulary build_vocabulary(std::span<const std::string> documents) {
  std::vector<std::string> words;
  for (const auto& doc : documents)
    for (auto& t : tokenize(doc)) words.push_back(std::move(t));
  return Vocabulary(std::move(words));
}

struct ContextHash {
  std::size_t operator()(const Tokens& ctx) const noexcept {
    std::uint64_t h = 0x84222325cbf29ce4ULL;
    for (TokenId t : ctx) h = splitmix64(h ^ t);
    return static_cast<std::size_t>(h);
  }
};

struct SuffixCounts {
  std::map<TokenId, std::uint64_t> counts;
  std::uint64_t total = 0;
};

class MarkovLM {
 public:
  MarkovLM(std::size_t order, double alpha, Vocabulary vocab)
      : order_(order), alpha_(alpha), vocab_(std::move(vocab)) {
    if (order_ == 0) throw Error("config", "markov order must be >= 1");
    if (!(alpha_ >= 0.0) || !std::isfinite(alpha_)) throw Error("config", "alpha must be >= 0");
  }

  std::size_t order() const { return order_; }
  double alpha() const { return alpha_; }
  const Vocabulary& vocab() const { return vocab_; }
  std::size_t vocab_size() const { return vocab_.size(); }
  const std::unordered_map<Tokens, SuffixCounts, ContextHash>& counts() const { return counts_; }

  void add(const Tokens& context, TokenId next, std::uint64_t n = 1) {
    if (n == 0) return;
    if (next >= vocab_.size()) throw Error("schema", "token id out of range");
    auto& row = counts_[context];
    row.counts[next] += n;
    row.total += n;
  }

  // Left-pads with BOS and keeps the last `order` ids of `history`.
  Tokens context_of(std::span<const TokenId> history) const {
    Tokens ctx(order_, Vocabulary::kBos);
    const std::size_t take = std::min(order_, history.size());
    std::copy(history.end() - static_cast<std::ptrdiff_t>(take), history.end(),
              ctx.end() - static_cast<std::ptrdiff_t>(take));
    return ctx;
  }

  const SuffixCounts* row(const Tokens& context) const {
    const auto it = counts_.find(context);
    return it == counts_.end() ? nullptr : &it->second;
  }

  // P(next | history). Unseen contexts fall back to the uniform distribution.
  double prob(std::span<const TokenId> history, TokenId next) const {
    const auto* r = row(context_of(history));
    const double v = static_cast<double>(vocab_.size());
    if (r == nullptr || (r->total == 0)) return 1.0 / v;
    const auto it = r->counts.find(next);
    const double c = it == r->counts.end() ? 0.0 : static_cast<double>(it->second);
    return (c + alpha_) / (static_cast<double>(r->total) + alpha_ * v);
  }

  DiscreteDistribution next_token_dist(std::span<const TokenId> history) const {
    const std::size_t v = vocab_.size();
    const auto* r = row(context_of(history));
    if (r == nullptr || r->total == 0) return DiscreteDistribution::uniform(v);
    std::vector<double> w(v, alpha_);
    for (const auto& [tok, c] : r->counts) w[tok] += static_cast<double>(c);
    return DiscreteDistribution::from_weights(std::move(w));
  }

  // Token occurrence counts over the training data (each training position is
  // the suffix of exactly one window).
  std::vector<std::uint64_t> unigram_counts() const {
    std::vector<std::uint64_t> out(vocab_.size(), 0);
    for (const auto& [ctx, r] : counts_)
      for (const auto& [tok, c] : r.counts) out[tok] += c;
    return out;
  }

 private:
  std::size_t order_;
  double alpha_;
  Vocabulary vocab_;
  std::unordered_map<Tokens, SuffixCounts, ContextHash> counts_;
};

// Trains on documents tokenized against a fixed vocabulary; each document
// starts from a BOS-padded context.
inline MarkovLM train_lm(std::span<const std::string> documents, std::size_t order, double alpha,
                         const Vocabulary& vocab) {
  MarkovLM lm(order, alpha, vocab);
  std::size_t seen = 0;
  for (const auto& doc : documents) {
    const Tokens ids = tokenize(doc, lm.vocab());
    seen += ids.size();
    for (std::size_t i = 0; i < ids.size(); ++i)
      lm.add(lm.context_of(std::span(ids).first(i)), ids[i]);
  }
  if (seen == 0) throw Error("empty_corpus", "empty corpus");
  return lm;
}

inline MarkovLM train_lm(std::span<const std::string> documents, std::size_t order, double alpha) {
  return train_lm(documents, order, alpha, build_vocabulary(documents));
}

inline MarkovLM train_lm(std::string_view corpus, std::size_t order, double alpha) {
  const std::vector<std::string> docs{std::string(corpus)};
  return train_lm(std::span<const std::string>(docs), order, alpha);
}

inline DiscreteDistribution next_token_dist(const MarkovLM& lm, std::span<const TokenId> context) {
  return lm.next_token_dist(context);
}

struct GenerationConfig {
  Tokens prompt;
  std::size_t length;
  std::uint64_t rng_seed;

  GenerationConfig(Tokens prompt_ids, std::size_t n, std::uint64_t seed)
      : prompt(std::move(prompt_ids)), length(n), rng_seed(seed) {
    if (length == 0) throw Error("config", "generation length must be >= 1");
  }
};

// Samples `config.length` tokens after the prompt, drawing each step from
// `step(history)`. Returns only the generated tokens.
template <class StepDist>
Tokens sample_with(const GenerationConfig& config, StepDist&& step) {
  Engine rng = make_engine(config.rng_seed);
  Tokens history = config.prompt;
  history.reserve(config.prompt.size() + config.length);
  for (std::size_t i = 0; i < config.length; ++i) {
    const DiscreteDistribution d = step(std::span<const TokenId>(history));
    history.push_back(static_cast<TokenId>(sample_index(rng, d.pmf())));
  }
  return Tokens(history.begin() + static_cast<std::ptrdiff_t>(config.prompt.size()),
                history.end());
}

inline Tokens sample_sequence(const MarkovLM& lm, const GenerationConfig& config) {
  return sample_with(config, [&](std::span<const TokenId> h) { return lm.next_token_dist(h); });
}

// Greedy (argmax, ties to the lower id) continuation.
inline Tokens greedy_sequence(const MarkovLM& lm, const Tokens& prompt, std::size_t length) {
  Tokens history = prompt;
  for (std::size_t i = 0; i < length; ++i) {
    const auto d = lm.next_token_dist(history);
    const auto pmf = d.pmf();
    history.push_back(
        static_cast<TokenId>(std::max_element(pmf.begin(), pmf.end()) - pmf.begin()));
  }
  return Tokens(history.begin() + static_cast<std::ptrdiff_t>(prompt.size()), history.end());
}

// Per-token natural-log probabilities of `tokens` given an optional prompt.
inline std::vector<double> token_log_probs(const MarkovLM& lm, std::span<const TokenId> tokens,
                                           std::span<const TokenId> prompt = {}) {
  Tokens history(prompt.begin(), prompt.end());
  std::vector<double> out;
  out.reserve(tokens.size());
  for (TokenId t : tokens) {
    const double p = lm.prob(history, t);
    if (!(p > 0.0)) throw Error("impossible_sequence", "impossible sequence under model");
    out.push_back(std::log(p));
    history.push_back(t);
  }
  return out;
}

inline double log_likelihood(const MarkovLM& lm, std::span<const TokenId> tokens,
                             std::span<const TokenId> prompt = {}) {
  if (tokens.empty()) throw Error("too_short", "log_likelihood needs at least one token");
  double total = 0.0;
  for (double lp : token_log_probs(lm, tokens, prompt)) total += lp;
  return total;
}

inline double perplexity(const MarkovLM& lm, std::span<const TokenId> tokens,
                         std::span<const TokenId> prompt = {}) {
  return std::exp(-log_likelihood(lm, tokens, prompt) / static_cast<double>(tokens.size()));
}

// ---- model file: {version:1, order, alpha, vocab:[...], counts:[{ctx, suffixes}]} ----

inline nlohmann::json to_json(const MarkovLM& lm) {
  // Contexts sorted so the file content is deterministic.
  std::vector<const Tokens*> contexts;
  for (const auto& [ctx, r] : lm.counts()) contexts.push_back(&ctx);
  std::sort(contexts.begin(), contexts.end(),
            [](const Tokens* a, const Tokens* b) { return *a < *b; });
  nlohmann::json counts = nlohmann::json::array();
  for (const Tokens* ctx : contexts) {
    nlohmann::json suffixes = nlohmann::json::object();
    for (const auto& [tok, c] : lm.row(*ctx)->counts) suffixes[std::to_string(tok)] = c;
    counts.push_back({{"ctx", *ctx}, {"suffixes", std::move(suffixes)}});
  }
  return {{"version", 1},
          {"order", lm.order()},
          {"alpha", lm.alpha()},
          {"vocab", lm.vocab().tokens()},
          {"counts", std::move(counts)}};
}

inline MarkovLM lm_from_json(const nlohmann::json& j) {
  try {
    if (j.at("version").get<int>() != 1) throw Error("schema", "unsupported model version");
    MarkovLM lm(j.at("order").get<std::size_t>(), j.at("alpha").get<double>(),
                Vocabulary::from_ordered(j.at("vocab").get<std::vector<std::string>>()));
    for (const auto& entry : j.at("counts")) {
      const auto ctx = entry.at("ctx").get<Tokens>();
      if (ctx.size() != lm.order()) throw Error("schema", "context length != order");
      for (const auto& [key, value] : entry.at("suffixes").items())
        lm.add(ctx, static_cast<TokenId>(std::stoul(key)), value.get<std::uint64_t>());
    }
    return lm;
  } catch (const nlohmann::json::exception& e) {
    throw Error("schema", std::string("model file: ") + e.what());
  }
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("io", "cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("schema", path.string() + ": " + e.what());
  }
}

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io", "cannot write " + path.string());
  out << content;
  if (!out) throw Error("io", "write failed for " + path.string());
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io", "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void save_lm(const MarkovLM& lm, const std::filesystem::path& path) {
  write_text_file(path, to_json(lm).dump() + "\n");
}

inline MarkovLM load_lm(const std::filesystem::path& path) { return lm_from_json(read_json_file(path)); }

}  // namespace wmlab
