#include <gtest/gtest.h>

#include <atomic>
#include <thread>

#include "fixtures.hpp"
#include "schema_check.hpp"
#include "wmlab/http.hpp"
#include "wmlab/service.hpp"

using namespace wmlab;
using namespace wmlab::service;

namespace {

ServiceState make_state(const fixtures::SmallLab& lab, double delta, bool with_table) {
  ServiceState s{lab.source, lab.eval, WatermarkParams{.delta = delta}};
  s.paraphrase_map = randomized_synonym_map(lab.vocab.size(), 4, 1.0, 31);
  s.curvature_map = randomized_synonym_map(lab.vocab.size(), 4, 1.0, 32);
  if (with_table) {
    const GreenPartition part(s.params, lab.vocab.size());
    s.table = learn_scores(watermarked_generator(lab.source, part), select_common_tokens(lab.source, kDefaultCommonTokens),
                           kDefaultSpoofBudget, 7);
  }
  return s;
}

// delta 8 and a learned table
Service& spoof_service() {
  static Service s(make_state(fixtures::small_lab(), 8.0, true));
  return s;
}

// delta 4, no table, no trained model
Service& plain_service() {
  static Service s(make_state(fixtures::small_lab(), 4.0, false));
  return s;
}

json call(Service& s, const std::string& method, const std::string& path, const json& body, int want = 200) {
  const auto r = s.handle(method, path, body.is_null() ? "" : body.dump());
  EXPECT_EQ(r.status, want) << path << " " << r.body;
  return json::parse(r.body);
}

std::string error_code(const Response& r) { return json::parse(r.body).at("error").at("code"); }

const json& api_schema() {
  static const json s = read_json_file(std::string(WMLAB_SOURCE_DIR) + "/schema/api.schema.json");
  return s;
}

void check(const json& v, const json& schema, const std::string& at, std::vector<std::string>& errs) {
  schema_check::check(api_schema(), v, schema, at, errs);
}

void expect_valid(const json& v, const std::string& endpoint, const std::string& part) {
  std::vector<std::string> errs;
  check(v, api_schema().at("endpoints").at(endpoint).at(part), endpoint, errs);
  EXPECT_TRUE(errs.empty()) << endpoint << " " << part << ": " << (errs.empty() ? "" : errs.front()) << "\n" << v.dump();
}

std::string some_text() {
  const auto& lab = fixtures::small_lab();
  return detokenize(sample_sequence(lab.source, GenerationConfig({}, 60, 3)), lab.vocab);
}

}  // namespace

TEST(Health, FingerprintIdentifiesModel) {
  const auto j = call(plain_service(), "GET", "/v1/health", nullptr);
  EXPECT_EQ(j.at("status"), "ok");
  EXPECT_EQ(j.at("model_fingerprint"), model_fingerprint(fixtures::small_lab().source));
  EXPECT_NE(model_fingerprint(fixtures::small_lab().source), model_fingerprint(fixtures::small_lab().human));
  expect_valid(j, "GET /v1/health", "response");
}

TEST(Golden, GenerateMatchesCore) {
  auto& svc = plain_service();
  const auto& lab = fixtures::small_lab();
  const json req = {{"prompt", "the old man"}, {"length", 40}, {"watermark", true}, {"seed", 9}};
  const auto body = svc.handle("POST", "/v1/generate", req.dump()).body;
  const auto w = generate_watermarked(lab.source, GenerationConfig(tokenize("the old man", lab.vocab), 40, 9),
                                      svc.partition());
  EXPECT_EQ(body, json({{"tokens", w.tokens}, {"text", detokenize(w.tokens, lab.vocab)}, {"green_mask", w.green_mask}}).dump());
  expect_valid(json::parse(body), "POST /v1/generate", "response");

  const json plain = {{"prompt", ""}, {"length", 25}, {"watermark", false}, {"seed", 4}};
  const auto t = sample_sequence(lab.source, GenerationConfig({}, 25, 4));
  EXPECT_EQ(svc.handle("POST", "/v1/generate", plain.dump()).body,
            json({{"tokens", t}, {"text", detokenize(t, lab.vocab)}}).dump());
  // same request, same body
  EXPECT_EQ(svc.handle("POST", "/v1/generate", req.dump()).body, body);
}

TEST(Golden, DetectMatchesCore) {
  auto& svc = plain_service();
  const auto& lab = fixtures::small_lab();
  const std::string text = some_text();
  const Tokens tokens = tokenize(text, lab.vocab);

  json wm = to_json(detect_watermark(tokens, svc.partition()));
  wm["green_mask"] = green_mask_json(tokens, svc.partition());
  wm["tokens"] = tokens;
  const auto r = svc.handle("POST", "/v1/detect", json({{"text", text}, {"method", "watermark"}}).dump());
  EXPECT_EQ(r.body, wm.dump());
  expect_valid(json::parse(r.body), "POST /v1/detect", "response");

  const SubstitutionPerturber pert{svc.state().curvature_map, 0.15};
  const std::vector<std::pair<std::string, DetectorScore>> cases = {
      {"avg_loglik", avg_loglik_score(lab.eval, tokens)},
      {"rank", rank_score(lab.eval, tokens)},
      {"entropy", entropy_score(lab.eval, tokens)},
      {"curvature", curvature_score(lab.eval, pert, tokens, 20, 5)},
  };
  for (const auto& [method, score] : cases) {
    json expected = to_json(score);
    expected["tokens"] = tokens;
    const auto b = svc.handle("POST", "/v1/detect", json({{"text", text}, {"method", method}, {"seed", 5}}).dump()).body;
    EXPECT_EQ(b, expected.dump()) << method;
    expect_valid(json::parse(b), "POST /v1/detect", "response");
  }
}

TEST(Golden, ParaphraseMatchesCore) {
  auto& svc = plain_service();
  const auto& lab = fixtures::small_lab();
  const std::string text = some_text();
  const Tokens tokens = tokenize(text, lab.vocab);
  ParaphraseConfig c;
  c.rate = 0.5;
  c.rounds = 2;
  c.seed = 12;
  const Tokens out = paraphrase(tokens, svc.state().paraphrase_map, c);
  const auto q = quality_delta(lab.eval, tokens, out);
  const json expected = {{"tokens", out},
                         {"text", detokenize(out, lab.vocab)},
                         {"quality", {{"ppl_before", q.perplexity_before}, {"ppl_after", q.perplexity_after}}}};
  const auto b = svc.handle("POST", "/v1/paraphrase",
                            json({{"text", text}, {"rate", 0.5}, {"rounds", 2}, {"seed", 12}}).dump()).body;
  EXPECT_EQ(b, expected.dump());
  expect_valid(json::parse(b), "POST /v1/paraphrase", "response");
}

TEST(EndToEnd, GeneratedWatermarkedTextIsDetected) {
  auto& svc = plain_service();
  int flagged = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto g = call(svc, "POST", "/v1/generate",
                        {{"prompt", ""}, {"length", 200}, {"watermark", true}, {"seed", seed}});
    const auto d = call(svc, "POST", "/v1/detect", {{"text", g.at("text")}, {"method", "watermark"}});
    flagged += d.at("verdict") == "watermarked";
  }
  EXPECT_GE(flagged, 95);
}

TEST(Errors, StatusCodesAndMachineReadableCodes) {
  auto& svc = plain_service();
  auto expect = [&](const std::string& method, const std::string& path, const std::string& body, int status,
                    const std::string& code) {
    const auto r = svc.handle(method, path, body);
    EXPECT_EQ(r.status, status) << path << " " << body;
    EXPECT_EQ(error_code(r), code) << path << " " << body;
    std::vector<std::string> errs;
    check(json::parse(r.body), api_schema().at("$defs").at("Error"), "error", errs);
    EXPECT_TRUE(errs.empty());
  };
  expect("POST", "/v1/detect", "{not json", 400, "schema");
  expect("POST", "/v1/detect", "[1,2]", 400, "schema");
  expect("POST", "/v1/detect", R"({"text":"the"})", 400, "schema");
  expect("POST", "/v1/detect", R"({"text":"the man","method":"oracle"})", 400, "schema");
  expect("POST", "/v1/detect", R"({"text":"the man","method":"rank","extra":1})", 400, "schema");
  expect("POST", "/v1/generate", R"({"prompt":"","length":-3,"watermark":true})", 400, "schema");
  expect("POST", "/v1/generate", R"({"prompt":"","length":0,"watermark":true})", 400, "schema");
  expect("POST", "/v1/generate", R"({"prompt":"","length":5,"watermark":"yes"})", 400, "schema");
  expect("POST", "/v1/paraphrase", R"({"text":"the man","rate":1.5,"rounds":1})", 400, "schema");
  expect("POST", "/v1/detect", R"({"text":"the","method":"watermark"})", 422, "too_short");
  expect("POST", "/v1/detect", R"({"text":"","method":"rank"})", 422, "too_short");
  expect("POST", "/v1/detect", R"({"text":"the man","method":"trained"})", 409, "no_trained_model");
  expect("POST", "/v1/spoof/sessions", "{}", 409, "no_score_table");
  expect("GET", "/v1/spoof/table/meta", "", 409, "no_score_table");
  expect("GET", "/v1/nothing", "", 404, "not_found");
  expect("GET", "/v1/generate", "", 404, "not_found");
  expect("POST", "/v1/spoof/sessions/sdeadbeef/choose", R"({"token":1})", 409, "no_score_table");
  auto& spoof = spoof_service();
  const auto unknown = spoof.handle("POST", "/v1/spoof/sessions/sdeadbeef/choose", R"({"token":1})");
  EXPECT_EQ(unknown.status, 404);
  EXPECT_EQ(error_code(unknown), "unknown_session");
  const auto id = call(spoof, "POST", "/v1/spoof/sessions", json::object()).at("session_id").get<std::string>();
  const auto r = spoof.handle("POST", "/v1/spoof/sessions/" + id + "/choose", R"({"token":"the old"})");
  EXPECT_EQ(r.status, 422);
  EXPECT_EQ(error_code(r), "not_single_token");
  EXPECT_EQ(spoof.handle("POST", "/v1/spoof/sessions/" + id + "/choose", R"({"token":999999})").status, 422);
  EXPECT_EQ(spoof.handle("POST", "/v1/spoof/sessions/" + id + "/choose", R"({})").status, 400);
}

TEST(Spoof, TableMetaAndSessionShape) {
  auto& svc = spoof_service();
  const auto meta = call(svc, "GET", "/v1/spoof/table/meta", nullptr);
  EXPECT_EQ(meta.at("N"), kDefaultCommonTokens);
  EXPECT_EQ(meta.at("usable_rows"), svc.state().table->usable_rows());
  EXPECT_GE(meta.at("queries_made").get<std::uint64_t>(), kDefaultSpoofBudget);
  expect_valid(meta, "GET /v1/spoof/table/meta", "response");

  const auto s = call(svc, "POST", "/v1/spoof/sessions", {{"top_k", 5}});
  expect_valid(s, "POST /v1/spoof/sessions", "response");
  EXPECT_TRUE(s.at("z").is_null());
  EXPECT_TRUE(s.at("green_fraction").is_null());
  EXPECT_TRUE(s.at("params_visible").get<bool>());
  ASSERT_EQ(s.at("start_suggestions").size(), 5u);
  const auto expected = start_suggestions(*svc.state().table, 5);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(s.at("start_suggestions")[i].at("token"), expected[i].token);
}

// Always taking suggestion #1 for 100 steps crosses the detection threshold.
TEST(Spoof, ChooseLoopReachesThreshold) {
  auto& svc = spoof_service();
  const auto& table = *svc.state().table;
  auto s = call(svc, "POST", "/v1/spoof/sessions", json::object());
  const std::string path = "/v1/spoof/sessions/" + s.at("session_id").get<std::string>() + "/choose";
  json next = s.at("start_suggestions");
  json last;
  for (int step = 0; step <= 100; ++step) {
    const TokenId pick = next.at(0).at("token");
    last = call(svc, "POST", path, {{"token", pick}});
    next = last.at("next_suggestions");
    // ordering identical to the core suggest()
    const auto row = table.index_of(pick);
    if (row && table.usable(*row)) {
      const auto core = suggest(table, pick, kDefaultTopK);
      ASSERT_EQ(next.size(), core.size());
      for (std::size_t i = 0; i < core.size(); ++i) {
        EXPECT_EQ(next[i].at("token"), core[i].token);
        EXPECT_EQ(next[i].at("score"), core[i].score);
      }
    }
  }
  expect_valid(last, "POST /v1/spoof/sessions/{id}/choose", "response");
  EXPECT_EQ(last.at("tokens").size(), 101u);
  std::cout << "choose loop z=" << last.at("z") << " green=" << last.at("green_fraction") << "\n";
  EXPECT_GE(last.at("z").get<double>(), 4.0);
  EXPECT_EQ(last.at("verdict"), "watermarked");
  // z agrees with the defender's detector on the composed text
  const Tokens composed = last.at("tokens").get<Tokens>();
  EXPECT_DOUBLE_EQ(last.at("z").get<double>(), detect_watermark(composed, svc.partition()).z);
}

TEST(Spoof, InterleavedAndConcurrentSessionsDoNotInterfere) {
  auto& svc = spoof_service();
  const auto& common = svc.state().table->common_tokens();
  auto open = [&] {
    return "/v1/spoof/sessions/" + call(svc, "POST", "/v1/spoof/sessions", json::object()).at("session_id").get<std::string>() +
           "/choose";
  };
  const std::string a = open(), b = open();
  ASSERT_NE(a, b);
  CompositionSession ra(*svc.state().table, &svc.partition(), 0.25), rb(*svc.state().table, &svc.partition(), 0.25);
  json la, lb;
  for (std::size_t i = 0; i < 40; ++i) {
    const TokenId ta = common[i % common.size()], tb = common[(7 * i + 3) % common.size()];
    la = call(svc, "POST", a, {{"token", ta}});
    ra.choose(ta);
    lb = call(svc, "POST", b, {{"token", tb}});
    rb.choose(tb);
  }
  EXPECT_EQ(la.at("tokens").get<Tokens>(), ra.tokens());
  EXPECT_EQ(lb.at("tokens").get<Tokens>(), rb.tokens());
  EXPECT_DOUBLE_EQ(la.at("z").get<double>(), *ra.z());
  EXPECT_DOUBLE_EQ(lb.at("z").get<double>(), *rb.z());

  // two threads hammering their own sessions
  const std::string c = open(), d = open();
  std::atomic<int> failures{0};
  auto worker = [&](const std::string& path, std::size_t stride) {
    for (std::size_t i = 0; i < 200; ++i)
      if (svc.handle("POST", path, json({{"token", common[(i * stride) % common.size()]}}).dump()).status != 200)
        ++failures;
  };
  std::thread t1(worker, c, 1), t2(worker, d, 5);
  t1.join();
  t2.join();
  EXPECT_EQ(failures.load(), 0);
  const auto fc = call(svc, "POST", c, {{"token", common[0]}});
  CompositionSession rc(*svc.state().table, &svc.partition(), 0.25);
  for (std::size_t i = 0; i < 200; ++i) rc.choose(common[i % common.size()]);
  rc.choose(common[0]);
  EXPECT_EQ(fc.at("tokens").get<Tokens>(), rc.tokens());
  EXPECT_DOUBLE_EQ(fc.at("z").get<double>(), *rc.z());
}

TEST(Sessions, TtlAndOldestIdleEviction) {
  auto now = SessionStore::Clock::time_point{};
  SessionStore store(std::chrono::seconds(10), 2, [&] { return now; });
  const auto& lab = fixtures::small_lab();
  const ScoreTable table(select_common_tokens(lab.source, 5));
  auto session = [&] { return CompositionSession(table, nullptr, 0.25); };
  const auto a = store.create(session());
  now += std::chrono::seconds(1);
  const auto b = store.create(session());
  now += std::chrono::seconds(1);
  store.find(a);  // a is now the most recently used
  const auto c = store.create(session());
  EXPECT_EQ(store.size(), 2u);
  EXPECT_NO_THROW(store.find(a));
  EXPECT_THROW(store.find(b), Error);  // evicted as the oldest idle
  now += std::chrono::seconds(11);
  EXPECT_THROW(store.find(c), Error);  // expired
  EXPECT_EQ(store.size(), 0u);
  EXPECT_NE(a, c);
  EXPECT_THROW(SessionStore(std::chrono::seconds(1), 0), Error);
}

TEST(Contract, SchemaRequestsAgreeWithService) {
  auto& svc = spoof_service();
  const auto id = call(svc, "POST", "/v1/spoof/sessions", json::object()).at("session_id").get<std::string>();
  const TokenId tok = svc.state().table->common_tokens()[0];
  const std::vector<std::tuple<std::string, std::string, json>> valid = {
      {"POST /v1/generate", "/v1/generate", {{"prompt", "the"}, {"length", 5}, {"watermark", true}, {"seed", 1}}},
      {"POST /v1/detect", "/v1/detect", {{"text", "the old man"}, {"method", "entropy"}}},
      {"POST /v1/paraphrase", "/v1/paraphrase", {{"text", "the old man"}, {"rate", 0.3}, {"rounds", 1}}},
      {"POST /v1/spoof/sessions", "/v1/spoof/sessions", {{"top_k", 3}}},
      {"POST /v1/spoof/sessions/{id}/choose", "/v1/spoof/sessions/" + id + "/choose", {{"token", tok}}},
  };
  for (const auto& [endpoint, path, req] : valid) {
    expect_valid(req, endpoint, "request");
    const auto resp = call(svc, "POST", path, req);
    expect_valid(resp, endpoint, "response");
    // every schema-required field is enforced, unknown fields are rejected
    for (const auto& k : api_schema().at("endpoints").at(endpoint).at("request").at("required")) {
      json missing = req;
      missing.erase(k.get<std::string>());
      EXPECT_EQ(svc.handle("POST", path, missing.dump()).status, 400) << endpoint << " without " << k;
    }
    json extra = req;
    extra["unexpected"] = 1;
    EXPECT_EQ(svc.handle("POST", path, extra.dump()).status, 400) << endpoint;
  }
  // the detector names in the schema are exactly those the service accepts
  for (const auto& m : api_schema().at("endpoints").at("POST /v1/detect").at("request").at("properties").at("method").at("enum")) {
    const auto r = svc.handle("POST", "/v1/detect", json({{"text", "the old man"}, {"method", m}}).dump());
    EXPECT_NE(r.status, 400) << m;
  }
}

TEST(Http, ServerRoundTrip) {
  auto& svc = plain_service();
  httplib::Server server;
  bind_routes(server, svc);
  const int port = server.bind_to_any_port("127.0.0.1");
  ASSERT_GT(port, 0);
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  httplib::Client client("127.0.0.1", port);
  const auto h = client.Get("/v1/health");
  ASSERT_TRUE(h);
  EXPECT_EQ(h->status, 200);
  EXPECT_EQ(h->body, svc.handle("GET", "/v1/health", "").body);
  EXPECT_EQ(h->get_header_value("Access-Control-Allow-Origin"), "*");
  const auto bad = client.Post("/v1/detect", "{oops", "application/json");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 400);
  EXPECT_EQ(json::parse(bad->body).at("error").at("code"), "schema");
  server.stop();
  th.join();
}
