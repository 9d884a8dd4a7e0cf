#pragma once

// JSON-over-HTTP API. `Service::handle` is the transport-free core (used by
// tests); wmlab/http.hpp binds it to an httplib server.

#include <chrono>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <utility>

#include "json.hpp"
#include "wmlab/detectors.hpp"
#include "wmlab/error.hpp"
#include "wmlab/lm.hpp"
#include "wmlab/paraphrase.hpp"
#include "wmlab/spoof.hpp"
#include "wmlab/watermark.hpp"

namespace wmlab::service {

using json = nlohmann::json;

inline constexpr std::size_t kMaxLength = 10000;
inline constexpr std::size_t kMaxRounds = 16;
inline constexpr std::size_t kDefaultTopK = 10;
inline constexpr std::size_t kMaxTopK = 1000;

struct ServiceState {
  MarkovLM model;       // generator
  MarkovLM eval_model;  // zero-shot detectors, perplexity
  WatermarkParams params;
  double threshold = kDefaultZThreshold;
  std::optional<ScoreTable> table;
  std::optional<TrainedStandIn> trained;
  SynonymMap paraphrase_map;
  SynonymMap curvature_map;
  std::size_t curvature_k = 20;
  double curvature_rate = 0.15;
  bool lab_mode = true;  // spoof sessions score against the true watermark
};

struct Response {
  int status = 200;
  std::string body;
};

// FNV-1a over the serialized model.
inline std::string model_fingerprint(const MarkovLM& lm) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : to_json(lm).dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << h;
  return s.str();
}

// ---- request validation ----

namespace detail {

enum class Kind { kString, kUnsigned, kNumber, kBoolean, kToken };

struct Field {
  const char* name;
  Kind kind;
  bool required = false;
  double min = 0.0, max = 0.0;  // numeric range when max > min
};

[[noreturn]] inline void schema_error(const std::string& m) { throw Error("schema", m); }

inline void validate(const json& body, std::initializer_list<Field> fields) {
  if (!body.is_object()) schema_error("request body must be a JSON object");
  for (const auto& [k, v] : body.items()) {
    bool known = false;
    for (const auto& f : fields) known = known || k == f.name;
    if (!known) schema_error("unknown field '" + k + "'");
  }
  for (const auto& f : fields) {
    if (!body.contains(f.name)) {
      if (f.required) schema_error(std::string("missing field '") + f.name + "'");
      continue;
    }
    const json& v = body.at(f.name);
    bool ok = false;
    switch (f.kind) {
      case Kind::kString: ok = v.is_string(); break;
      case Kind::kUnsigned: ok = v.is_number_unsigned(); break;
      case Kind::kNumber: ok = v.is_number(); break;
      case Kind::kBoolean: ok = v.is_boolean(); break;
      case Kind::kToken: ok = v.is_number_unsigned() || v.is_string(); break;
    }
    if (!ok) schema_error(std::string("field '") + f.name + "' has the wrong type");
    if (f.max > f.min && v.is_number()) {
      const double x = v.get<double>();
      if (!(x >= f.min && x <= f.max)) schema_error(std::string("field '") + f.name + "' is out of range");
    }
  }
}

inline int status_for(const std::string& code) {
  if (code == "schema" || code == "config") return 400;
  if (code == "unknown_session" || code == "not_found") return 404;
  if (code == "no_score_table" || code == "no_trained_model") return 409;
  return 422;
}

}  // namespace detail

inline Response error_response(const std::string& code, const std::string& message) {
  return {detail::status_for(code), json{{"error", {{"code", code}, {"message", message}}}}.dump()};
}

// ---- sessions ----

class SessionStore {
 public:
  using Clock = std::chrono::steady_clock;

  struct Entry {
    explicit Entry(CompositionSession s) : session(std::move(s)) {}
    std::mutex mutex;  // exclusive mutation per session
    CompositionSession session;
    Clock::time_point created, last_used;
  };

  SessionStore(std::chrono::seconds ttl, std::size_t capacity, std::function<Clock::time_point()> clock = Clock::now)
      : ttl_(ttl), capacity_(capacity), clock_(std::move(clock)) {
    if (capacity_ < 1) throw Error("config", "session capacity must be >= 1");
  }

  std::string create(CompositionSession s) {
    std::lock_guard lock(mutex_);
    const auto now = clock_();
    purge_expired(now);
    while (entries_.size() >= capacity_) {
      auto oldest = entries_.begin();
      for (auto it = entries_.begin(); it != entries_.end(); ++it)
        if (it->second->last_used < oldest->second->last_used) oldest = it;
      entries_.erase(oldest);
    }
    std::ostringstream id;
    id << 's' << std::hex << std::setw(16) << std::setfill('0') << splitmix64(++counter_);
    auto e = std::make_shared<Entry>(std::move(s));
    e->created = e->last_used = now;
    entries_.emplace(id.str(), std::move(e));
    return id.str();
  }

  // Shared handle to a live session; refreshes its idle timer.
  std::shared_ptr<Entry> find(const std::string& id) {
    std::lock_guard lock(mutex_);
    const auto now = clock_();
    purge_expired(now);
    const auto it = entries_.find(id);
    if (it == entries_.end()) throw Error("unknown_session", "no session '" + id + "'");
    it->second->last_used = now;
    return it->second;
  }

  std::size_t size() {
    std::lock_guard lock(mutex_);
    purge_expired(clock_());
    return entries_.size();
  }

 private:
  void purge_expired(Clock::time_point now) {
    for (auto it = entries_.begin(); it != entries_.end();)
      it = now - it->second->last_used > ttl_ ? entries_.erase(it) : std::next(it);
  }

  std::mutex mutex_;
  std::chrono::seconds ttl_;
  std::size_t capacity_;
  std::function<Clock::time_point()> clock_;
  std::map<std::string, std::shared_ptr<Entry>> entries_;
  std::uint64_t counter_ = 0;
};

struct SessionOptions {
  std::chrono::seconds ttl{1800};
  std::size_t capacity = 1024;
  std::function<SessionStore::Clock::time_point()> clock = SessionStore::Clock::now;
};

// ---- payloads (shared by the service and its golden tests) ----

inline json green_mask_json(std::span<const TokenId> tokens, const GreenPartition& part,
                            std::optional<TokenId> prefix = std::nullopt) {
  json mask = json::array();
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i == 0 && !prefix)
      mask.push_back(nullptr);
    else
      mask.push_back(part.is_green(i == 0 ? *prefix : tokens[i - 1], tokens[i]));
  }
  return mask;
}

inline json suggestions_json(const std::vector<Suggestion>& s, const Vocabulary& vocab) {
  json out = json::array();
  for (std::size_t i = 0; i < s.size(); ++i)
    out.push_back({{"rank", i + 1}, {"token", s[i].token}, {"text", vocab.token(s[i].token)}, {"score", s[i].score}});
  return out;
}

inline json optional_number(std::optional<double> x) { return x ? json(*x) : json(nullptr); }

// ---- the service ----

class Service {
 public:
  explicit Service(ServiceState state, SessionOptions sessions = {})
      : state_(std::move(state)),
        partition_(state_.params, state_.model.vocab_size()),
        perturber_{state_.curvature_map, state_.curvature_rate},
        fingerprint_(model_fingerprint(state_.model)),
        sessions_(sessions.ttl, sessions.capacity, std::move(sessions.clock)) {
    if (state_.eval_model.vocab().tokens() != state_.model.vocab().tokens())
      throw Error("config", "model and evaluation model vocabularies differ");
  }
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  const ServiceState& state() const { return state_; }
  const GreenPartition& partition() const { return partition_; }
  SessionStore& sessions() { return sessions_; }

  Response handle(const std::string& method, const std::string& path, const std::string& body) {
    try {
      return {200, route(method, path, body).dump()};
    } catch (const Error& e) {
      return error_response(e.code(), e.what());
    } catch (const json::exception& e) {
      return error_response("schema", e.what());
    } catch (const std::invalid_argument& e) {
      return error_response("domain", e.what());
    } catch (const std::exception& e) {
      return {500, json{{"error", {{"code", "internal"}, {"message", e.what()}}}}.dump()};
    }
  }

 private:
  static json parse(const std::string& body) {
    if (body.empty()) return json::object();
    try {
      return json::parse(body);
    } catch (const json::parse_error& e) {
      throw Error("schema", std::string("malformed JSON: ") + e.what());
    }
  }

  json route(const std::string& method, const std::string& path, const std::string& body) {
    const std::string sessions = "/v1/spoof/sessions";
    if (path == "/v1/health") return expect(method, "GET"), health();
    if (path == "/v1/spoof/table/meta") return expect(method, "GET"), table_meta();
    if (path == "/v1/generate") return expect(method, "POST"), generate(parse(body));
    if (path == "/v1/detect") return expect(method, "POST"), detect(parse(body));
    if (path == "/v1/paraphrase") return expect(method, "POST"), paraphrase_text(parse(body));
    if (path == sessions) return expect(method, "POST"), create_session(parse(body));
    const std::string suffix = "/choose";
    if (path.size() > sessions.size() + 1 + suffix.size() && path.compare(0, sessions.size() + 1, sessions + "/") == 0 &&
        path.compare(path.size() - suffix.size(), suffix.size(), suffix) == 0) {
      expect(method, "POST");
      const std::string id = path.substr(sessions.size() + 1, path.size() - sessions.size() - 1 - suffix.size());
      if (id.find('/') != std::string::npos) throw Error("not_found", "no route for " + path);
      return choose(id, parse(body));
    }
    throw Error("not_found", "no route for " + path);
  }

  static void expect(const std::string& method, const char* want) {
    if (method != want) throw Error("not_found", "no route for method " + method);
  }

  const Vocabulary& vocab() const { return state_.model.vocab(); }

  json health() const { return {{"status", "ok"}, {"model_fingerprint", fingerprint_}}; }

  const ScoreTable& table() const {
    if (!state_.table) throw Error("no_score_table", "no score table loaded");
    return *state_.table;
  }

  json table_meta() const {
    const auto& t = table();
    return {{"N", t.size()}, {"queries_made", t.queries_made()}, {"usable_rows", t.usable_rows()}};
  }

  json generate(const json& req) const {
    using detail::Kind;
    detail::validate(req, {{"prompt", Kind::kString, true},
                           {"length", Kind::kUnsigned, true, 1, static_cast<double>(kMaxLength)},
                           {"watermark", Kind::kBoolean, true},
                           {"seed", Kind::kUnsigned}});
    const Tokens prompt = tokenize(req.at("prompt").get<std::string>(), vocab());
    const GenerationConfig g(prompt, req.at("length").get<std::size_t>(), req.value("seed", std::uint64_t{0}));
    json out;
    if (req.at("watermark").get<bool>()) {
      const auto w = generate_watermarked(state_.model, g, partition_);
      out = {{"tokens", w.tokens}, {"text", detokenize(w.tokens, vocab())}, {"green_mask", w.green_mask}};
    } else {
      const auto t = sample_sequence(state_.model, g);
      out = {{"tokens", t}, {"text", detokenize(t, vocab())}};
    }
    return out;
  }

  json detect(const json& req) const {
    using detail::Kind;
    detail::validate(req, {{"text", Kind::kString, true}, {"method", Kind::kString, true}, {"seed", Kind::kUnsigned}});
    const std::string method = req.at("method").get<std::string>();
    const Tokens tokens = tokenize(req.at("text").get<std::string>(), vocab());
    json out;
    if (method == "watermark") {
      if (tokens.size() < 2) throw Error("too_short", "need at least 2 tokens to score");
      out = to_json(detect_watermark(tokens, partition_, state_.threshold));
      out["green_mask"] = green_mask_json(tokens, partition_);
    } else if (method == "avg_loglik") {
      out = to_json(avg_loglik_score(state_.eval_model, tokens));
    } else if (method == "rank") {
      out = to_json(rank_score(state_.eval_model, tokens));
    } else if (method == "entropy") {
      out = to_json(entropy_score(state_.eval_model, tokens));
    } else if (method == "curvature") {
      out = to_json(curvature_score(state_.eval_model, perturber_, tokens, state_.curvature_k,
                                    req.value("seed", std::uint64_t{0})));
    } else if (method == "trained") {
      if (!state_.trained) throw Error("no_trained_model", "no trained detector loaded");
      out = to_json(trained_score(*state_.trained, state_.eval_model, tokens));
    } else {
      throw Error("schema", "unknown method '" + method + "'");
    }
    out["tokens"] = tokens;
    return out;
  }

  json paraphrase_text(const json& req) const {
    using detail::Kind;
    detail::validate(req, {{"text", Kind::kString, true},
                           {"rate", Kind::kNumber, true, 0.0, 1.0},
                           {"rounds", Kind::kUnsigned, true, 1, static_cast<double>(kMaxRounds)},
                           {"seed", Kind::kUnsigned}});
    const Tokens tokens = tokenize(req.at("text").get<std::string>(), vocab());
    if (tokens.empty()) throw Error("too_short", "nothing to paraphrase");
    ParaphraseConfig c;
    c.rate = req.at("rate").get<double>();
    c.rounds = req.at("rounds").get<std::size_t>();
    c.seed = req.value("seed", std::uint64_t{0});
    const Tokens out = paraphrase(tokens, state_.paraphrase_map, c);
    const auto q = quality_delta(state_.eval_model, tokens, out);
    return {{"tokens", out},
            {"text", detokenize(out, vocab())},
            {"quality", {{"ppl_before", q.perplexity_before}, {"ppl_after", q.perplexity_after}}}};
  }

  json session_payload(const CompositionSession& s) const {
    return {{"tokens", s.tokens()},
            {"text", detokenize(s.tokens(), vocab())},
            {"green_fraction", optional_number(s.green_fraction())},
            {"z", optional_number(s.z())},
            {"verdict", s.watermarked() ? "watermarked" : "not-watermarked"},
            {"threshold", s.threshold()},
            {"params_visible", s.params_visible()}};
  }

  json create_session(const json& req) {
    using detail::Kind;
    detail::validate(req, {{"top_k", Kind::kUnsigned, false, 1, static_cast<double>(kMaxTopK)}});
    const auto& t = table();
    CompositionSession s(t, state_.lab_mode ? &partition_ : nullptr, state_.params.gamma, state_.threshold);
    json out = session_payload(s);
    out["session_id"] = sessions_.create(std::move(s));
    out["start_suggestions"] = suggestions_json(start_suggestions(t, req.value("top_k", kDefaultTopK)), vocab());
    return out;
  }

  json choose(const std::string& id, const json& req) {
    using detail::Kind;
    detail::validate(req, {{"token", Kind::kToken, true}, {"top_k", Kind::kUnsigned, false, 1, static_cast<double>(kMaxTopK)}});
    const auto& t = table();
    TokenId token = 0;
    if (req.at("token").is_string()) {
      const Tokens ids = tokenize(req.at("token").get<std::string>(), vocab());
      if (ids.size() != 1) throw Error("not_single_token", "chosen text must be exactly one token");
      token = ids.front();
    } else {
      const auto raw = req.at("token").get<std::uint64_t>();
      if (raw >= vocab().size()) throw Error("unknown_token", "token id out of range");
      token = static_cast<TokenId>(raw);
    }
    const std::size_t top_k = req.value("top_k", kDefaultTopK);
    auto entry = sessions_.find(id);
    std::lock_guard lock(entry->mutex);
    entry->session.choose(token);
    json out = session_payload(entry->session);
    out["session_id"] = id;
    // Unusable or non-common prefixes fall back to the opener ranking.
    const auto row = t.index_of(token);
    out["next_suggestions"] = suggestions_json(
        row && t.usable(*row) ? suggest(t, token, top_k) : start_suggestions(t, top_k), vocab());
    return out;
  }

  ServiceState state_;
  GreenPartition partition_;
  SubstitutionPerturber perturber_;
  std::string fingerprint_;
  SessionStore sessions_;
};

}  // namespace wmlab::service
