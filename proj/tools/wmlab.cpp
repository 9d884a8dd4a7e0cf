// wmlab command-line tool. Exit codes: 0 ok, 1 configuration error,
// 2 runtime error, 3 a checked bound or assertion was violated.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "wmlab/eval.hpp"
#include "wmlab/http.hpp"
#include "wmlab/service.hpp"
#include "wmlab/spoof.hpp"
#include "wmlab/theory.hpp"

using namespace wmlab;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0, kExitConfig = 1, kExitRuntime = 2, kExitViolation = 3;

// Shared tool configuration: every section optional, unknown keys rejected.
struct ToolConfig {
  eval::CorpusConfig corpus;
  eval::LmConfig lm;
  WatermarkParams params;
  double z_threshold = kDefaultZThreshold;
  // paraphrase
  double rate = 0.6;
  std::size_t rounds = 1;
  std::size_t class_size = 4;
  double coverage = 1.0;
  std::uint64_t map_seed = 31;
  std::string map_path;
  // spoof
  std::uint64_t budget = kDefaultSpoofBudget;
  std::size_t common_tokens = kDefaultCommonTokens;
  std::size_t eval_prefixes = 50;
  std::size_t compose_length = 101;
  // theory
  theory::CampaignConfig campaign;
  std::vector<std::size_t> tightness_sizes{1024, 8192, 65536};
  std::size_t tightness_zeros = 16;
  std::vector<double> tightness_targets{0.1, 0.3, 0.5, 0.8};
  eval::BoundExperimentConfig corollary;
  // service
  std::string bind = "127.0.0.1";
  int port = 8080;
  std::size_t session_ttl = 1800;
  std::size_t session_capacity = 1024;
  bool lab_mode = true;
};

void check_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!obj.is_object()) throw Error("config", where + " must be an object");
  for (const auto& [k, v] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || k == a;
    if (!ok) throw Error("config", "unknown key '" + k + "' in " + where);
  }
}

template <class T>
void get(const json& obj, const char* key, T& field) {
  if (obj.contains(key)) field = obj.at(key).get<T>();
}

ToolConfig tool_config_from_json(const json& j) {
  ToolConfig c;
  try {
    check_keys(j, {"corpus", "lm", "watermark", "paraphrase", "spoof", "theory", "service"}, "config");
    if (j.contains("corpus") || j.contains("lm")) {
      // reuse the experiment parser for the shared sections
      json sub = json::object();
      if (j.contains("corpus")) sub["corpus"] = j.at("corpus");
      if (j.contains("lm")) sub["lm"] = j.at("lm");
      const auto e = eval::config_from_json(sub);
      c.corpus = e.corpus;
      c.lm = e.lm;
    }
    if (j.contains("watermark")) {
      const auto& x = j.at("watermark");
      check_keys(x, {"key_hex", "gamma", "delta", "z_threshold"}, "watermark");
      if (x.contains("key_hex")) c.params.key = key_from_hex(x.at("key_hex").get<std::string>());
      get(x, "gamma", c.params.gamma);
      get(x, "delta", c.params.delta);
      get(x, "z_threshold", c.z_threshold);
    }
    if (j.contains("paraphrase")) {
      const auto& x = j.at("paraphrase");
      check_keys(x, {"rate", "rounds", "class_size", "coverage", "map_seed", "map_path"}, "paraphrase");
      get(x, "rate", c.rate);
      get(x, "rounds", c.rounds);
      get(x, "class_size", c.class_size);
      get(x, "coverage", c.coverage);
      get(x, "map_seed", c.map_seed);
      get(x, "map_path", c.map_path);
    }
    if (j.contains("spoof")) {
      const auto& x = j.at("spoof");
      check_keys(x, {"budget", "common_tokens", "eval_prefixes", "compose_length"}, "spoof");
      get(x, "budget", c.budget);
      get(x, "common_tokens", c.common_tokens);
      get(x, "eval_prefixes", c.eval_prefixes);
      get(x, "compose_length", c.compose_length);
    }
    if (j.contains("theory")) {
      const auto& x = j.at("theory");
      check_keys(x,
                 {"outcome_sizes", "pairs", "detectors_per_pair", "likelihood_ratio_probe", "tightness_sizes",
                  "tightness_zeros", "tightness_targets", "corollary_length", "corollary_rate", "corollary_class_size"},
                 "theory");
      get(x, "outcome_sizes", c.campaign.outcome_sizes);
      get(x, "pairs", c.campaign.pairs);
      get(x, "detectors_per_pair", c.campaign.detectors_per_pair);
      get(x, "likelihood_ratio_probe", c.campaign.include_likelihood_ratio);
      get(x, "tightness_sizes", c.tightness_sizes);
      get(x, "tightness_zeros", c.tightness_zeros);
      get(x, "tightness_targets", c.tightness_targets);
      get(x, "corollary_length", c.corollary.length);
      get(x, "corollary_rate", c.corollary.rate);
      get(x, "corollary_class_size", c.corollary.class_size);
    }
    if (j.contains("service")) {
      const auto& x = j.at("service");
      check_keys(x, {"bind", "port", "session_ttl", "session_capacity", "lab_mode"}, "service");
      get(x, "bind", c.bind);
      get(x, "port", c.port);
      get(x, "session_ttl", c.session_ttl);
      get(x, "session_capacity", c.session_capacity);
      get(x, "lab_mode", c.lab_mode);
    }
  } catch (const json::exception& e) {
    throw Error("config", std::string("config: ") + e.what());
  }
  if (!(c.params.gamma > 0.0 && c.params.gamma < 1.0)) throw Error("config", "gamma must lie in (0, 1)");
  if (!(c.params.delta >= 0.0)) throw Error("config", "delta must be >= 0");
  if (!(c.rate >= 0.0 && c.rate <= 1.0)) throw Error("config", "paraphrase rate must lie in [0, 1]");
  if (c.campaign.outcome_sizes.empty() || c.campaign.pairs == 0) throw Error("config", "empty campaign");
  if (c.port < 0 || c.port > 65535) throw Error("config", "port out of range");
  return c;
}

json read_config(const std::string& path) {
  if (path.empty()) return json::object();
  if (!fs::exists(path)) throw Error("config", "config file not found: " + path);
  try {
    return read_json_file(path);
  } catch (const Error& e) {
    throw Error("config", e.what());
  }
}

// Options every subcommand carries.
struct Common {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out = ".";
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--seed", c.seed, "root seed (train: corpus seed, human corpus uses seed + 1)");
  app->add_option("--config", c.config, "JSON config file");
  app->add_option("--out", c.out, "output directory");
}

fs::path out_dir(const Common& c) {
  fs::create_directories(c.out);
  return c.out;
}

void write_json(const fs::path& p, const json& j) {
  write_text_file(p, j.dump(2) + "\n");
  std::cerr << "wrote " << p.string() << "\n";
}

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v != nullptr && *v != '\0' ? v : fallback;
}

// The generator model: --model file, or trained from the configured corpus.
MarkovLM load_or_train(const std::string& model_path, const ToolConfig& cfg, bool eval_order = false) {
  if (!model_path.empty()) return load_lm(model_path);
  std::cerr << "no model given; training the default lab\n";
  auto lab = eval::build_lab(cfg.corpus, cfg.lm);
  return eval_order ? std::move(lab.eval) : std::move(lab.source);
}

std::string read_input(const std::string& text, const std::string& input) {
  if (!text.empty() && !input.empty()) throw Error("config", "give --text or --input, not both");
  if (!input.empty()) return read_text_file(input);
  return text;
}

SynonymMap make_map(const ToolConfig& cfg, const Vocabulary& vocab, std::uint64_t seed) {
  if (!cfg.map_path.empty()) return synonym_map_from_json(read_json_file(cfg.map_path), vocab);
  return randomized_synonym_map(vocab.size(), cfg.class_size, cfg.coverage, seed);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"wmlab: watermarking and AI-text detection lab"};
  app.require_subcommand(1);

  // train
  Common train_c;
  std::vector<std::string> source_files, human_files;
  auto* train = app.add_subcommand("train", "train the source, evaluation and human stand-in models");
  add_common(train, train_c);
  train->add_option("--source", source_files, "source corpus files (one document per file)");
  train->add_option("--human", human_files, "human corpus files");

  // generate
  Common gen_c;
  std::string gen_model, gen_prompt;
  std::size_t gen_length = 200;
  bool gen_plain = false;
  auto* generate = app.add_subcommand("generate", "sample a (watermarked) continuation");
  add_common(generate, gen_c);
  generate->add_option("--model", gen_model, "model file from `train`");
  generate->add_option("--prompt", gen_prompt, "prompt text");
  generate->add_option("--length", gen_length, "tokens to generate")->check(CLI::Range(1, 100000));
  generate->add_flag("--no-watermark", gen_plain, "sample from the base model");

  // detect
  Common det_c;
  std::string det_model, det_method = "watermark", det_text, det_input, det_trained;
  auto* detect = app.add_subcommand("detect", "score a text with one detector");
  add_common(detect, det_c);
  detect->add_option("--model", det_model, "evaluation model file (zero-shot detectors)");
  detect->add_option("--method", det_method, "watermark|avg_loglik|rank|entropy|curvature|trained");
  detect->add_option("--text", det_text, "text to score");
  detect->add_option("--input", det_input, "file with the text to score");
  detect->add_option("--trained", det_trained, "trained detector file");

  // attack paraphrase | spoof
  auto* attack = app.add_subcommand("attack", "run an attack");
  attack->require_subcommand(1);
  Common para_c;
  std::string para_model, para_text, para_input;
  auto* para = attack->add_subcommand("paraphrase", "synonym-substitution paraphrase of a text");
  add_common(para, para_c);
  para->add_option("--model", para_model, "evaluation model file (perplexity)");
  para->add_option("--text", para_text, "text to paraphrase");
  para->add_option("--input", para_input, "file with the text");
  Common spoof_c;
  std::string spoof_model;
  auto* spoof = attack->add_subcommand("spoof", "learn green-list scores and compose a spoofed passage");
  add_common(spoof, spoof_c);
  spoof->add_option("--model", spoof_model, "watermarked generator model file");

  // theory verify | tightness
  auto* theory_cmd = app.add_subcommand("theory", "exact checks of the AUROC bound");
  theory_cmd->require_subcommand(1);
  Common verify_c;
  bool verify_corollary = false;
  auto* verify = theory_cmd->add_subcommand("verify", "random falsification campaign of the bound");
  add_common(verify, verify_c);
  verify->add_flag("--corollary", verify_corollary, "also run the enumerated paraphrase-bound cases");
  Common tight_c;
  auto* tightness = theory_cmd->add_subcommand("tightness", "construct detectors meeting the bound");
  add_common(tightness, tight_c);

  // eval run
  auto* eval_cmd = app.add_subcommand("eval", "experiments");
  eval_cmd->require_subcommand(1);
  Common run_c;
  std::vector<std::string> formats{"json", "csv"};
  auto* run = eval_cmd->add_subcommand("run", "detectors before/after an attack, with ROC reports");
  add_common(run, run_c);
  run->add_option("--format", formats, "csv and/or json");

  // serve
  Common serve_c;
  std::string serve_model, serve_eval, serve_params, serve_table, serve_trained, serve_bind;
  std::optional<int> serve_port;
  std::optional<std::size_t> serve_ttl;
  auto* serve = app.add_subcommand("serve", "HTTP JSON API");
  add_common(serve, serve_c);
  serve->add_option("--model", serve_model, "generator model file [WMLAB_MODEL]");
  serve->add_option("--eval-model", serve_eval, "evaluation model file [WMLAB_EVAL_MODEL]");
  serve->add_option("--params", serve_params, "watermark params file [WMLAB_PARAMS]");
  serve->add_option("--table", serve_table, "score table file [WMLAB_TABLE]");
  serve->add_option("--trained", serve_trained, "trained detector file");
  serve->add_option("--bind", serve_bind, "bind address [WMLAB_BIND]");
  serve->add_option("--port", serve_port, "port [WMLAB_PORT]");
  serve->add_option("--session-ttl", serve_ttl, "idle session lifetime in seconds [WMLAB_SESSION_TTL]");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (train->parsed()) {
      auto cfg = tool_config_from_json(read_config(train_c.config));
      if (!source_files.empty()) cfg.corpus.source_paths = source_files;
      if (!human_files.empty()) cfg.corpus.human_paths = human_files;
      if (train_c.seed) {
        cfg.corpus.source_seed = *train_c.seed;
        cfg.corpus.human_seed = *train_c.seed + 1;
      }
      for (const auto& f : source_files)
        if (!fs::exists(f)) throw Error("config", "file not found: " + f);
      for (const auto& f : human_files)
        if (!fs::exists(f)) throw Error("config", "file not found: " + f);
      const auto lab = eval::build_lab(cfg.corpus, cfg.lm);
      const auto dir = out_dir(train_c);
      save_lm(lab.source, dir / "source_lm.json");
      save_lm(lab.eval, dir / "eval_lm.json");
      save_lm(lab.human, dir / "human_lm.json");
      write_json(dir / "params.json", to_json(cfg.params));
      // the trained detector sees watermarked positives, as in `eval run`
      eval::ExperimentConfig det_cfg;
      det_cfg.params = cfg.params;
      if (train_c.seed) det_cfg.seed = *train_c.seed;
      const GreenPartition part(cfg.params, lab.vocab.size());
      write_json(dir / "trained_detector.json", to_json(eval::train_detector(lab, det_cfg, part)));
      std::cout << json{{"vocab_size", lab.vocab.size()},
                        {"source_fingerprint", service::model_fingerprint(lab.source)}}.dump()
                << "\n";
      return kExitOk;
    }

    if (generate->parsed()) {
      const auto cfg = tool_config_from_json(read_config(gen_c.config));
      const auto lm = load_or_train(gen_model, cfg);
      const Tokens prompt = tokenize(gen_prompt, lm.vocab());
      const GenerationConfig g(prompt, gen_length, gen_c.seed.value_or(0));
      json out;
      if (gen_plain) {
        const auto t = sample_sequence(lm, g);
        out = {{"tokens", t}, {"text", detokenize(t, lm.vocab())}};
      } else {
        const auto w = generate_watermarked(lm, g, GreenPartition(cfg.params, lm.vocab_size()));
        out = {{"tokens", w.tokens}, {"text", detokenize(w.tokens, lm.vocab())}, {"green_mask", w.green_mask}};
      }
      write_json(out_dir(gen_c) / "generation.json", out);
      std::cout << out.at("text").get<std::string>() << "\n";
      return kExitOk;
    }

    if (detect->parsed()) {
      const auto cfg = tool_config_from_json(read_config(det_c.config));
      const std::string text = read_input(det_text, det_input);
      if (std::find(eval::kDetectorNames.begin(), eval::kDetectorNames.end(), det_method) == eval::kDetectorNames.end())
        throw Error("config", "unknown detector '" + det_method + "'");
      const auto lm = load_or_train(det_model, cfg, true);
      const Tokens tokens = tokenize(text, lm.vocab());
      json out;
      if (det_method == "watermark") {
        out = to_json(detect_watermark(tokens, GreenPartition(cfg.params, lm.vocab_size()), cfg.z_threshold));
      } else if (det_method == "avg_loglik") {
        out = to_json(avg_loglik_score(lm, tokens));
      } else if (det_method == "rank") {
        out = to_json(rank_score(lm, tokens));
      } else if (det_method == "entropy") {
        out = to_json(entropy_score(lm, tokens));
      } else if (det_method == "curvature") {
        const SubstitutionPerturber p{make_map(cfg, lm.vocab(), cfg.map_seed), 0.15};
        out = to_json(curvature_score(lm, p, tokens, 20, det_c.seed.value_or(0)));
      } else {
        if (det_trained.empty()) throw Error("config", "--trained is required for the trained detector");
        out = to_json(trained_score(standin_from_json(read_json_file(det_trained)), lm, tokens));
      }
      out["tokens"] = tokens;
      write_json(out_dir(det_c) / "detection.json", out);
      std::cout << out.dump() << "\n";
      return kExitOk;
    }

    if (para->parsed()) {
      const auto cfg = tool_config_from_json(read_config(para_c.config));
      const std::string text = read_input(para_text, para_input);
      const auto lm = load_or_train(para_model, cfg, true);
      const Tokens tokens = tokenize(text, lm.vocab());
      if (tokens.empty()) throw Error("too_short", "nothing to paraphrase");
      ParaphraseConfig pc;
      pc.rate = cfg.rate;
      pc.rounds = cfg.rounds;
      pc.seed = para_c.seed.value_or(0);
      const auto map = make_map(cfg, lm.vocab(), cfg.map_seed);
      const Tokens out_tokens = paraphrase(tokens, map, pc);
      const auto q = quality_delta(lm, tokens, out_tokens);
      const json out = {{"tokens", out_tokens},
                        {"text", detokenize(out_tokens, lm.vocab())},
                        {"quality", {{"ppl_before", q.perplexity_before}, {"ppl_after", q.perplexity_after}}},
                        {"config", to_json(pc)}};
      const auto dir = out_dir(para_c);
      write_json(dir / "paraphrase.json", out);
      write_json(dir / "synonym_map.json", to_json(map, lm.vocab()));
      std::cout << out.at("text").get<std::string>() << "\n";
      return kExitOk;
    }

    if (spoof->parsed()) {
      auto cfg = tool_config_from_json(read_config(spoof_c.config));
      if (!read_config(spoof_c.config).contains("watermark")) cfg.params.delta = 8.0;  // the spoofing lab default
      const auto lm = load_or_train(spoof_model, cfg);
      const GreenPartition part(cfg.params, lm.vocab_size());
      const std::size_t n = std::min(cfg.common_tokens, lm.vocab_size() - 2);
      const auto common = select_common_tokens(lm, n);
      const auto table = learn_scores(watermarked_generator(lm, part), common, cfg.budget, spoof_c.seed.value_or(7));
      const std::size_t k = static_cast<std::size_t>(std::ceil(cfg.params.gamma * static_cast<double>(n)));
      const auto inf = verify_inference(table, part, k, cfg.eval_prefixes);
      const auto composed = compose_greedy(table, common.front(), cfg.compose_length);
      const auto det = detect_watermark(composed, part, cfg.z_threshold);
      const auto dir = out_dir(spoof_c);
      write_json(dir / "score_table.json", to_json(table));
      const json out = {{"params", to_json(cfg.params)},
                        {"N", n},
                        {"budget", cfg.budget},
                        {"queries_made", table.queries_made()},
                        {"usable_rows", table.usable_rows()},
                        {"inference", {{"k", inf.k}, {"prefixes", inf.prefixes}, {"mean_precision", inf.mean_precision},
                                       {"median_precision", inf.median_precision}, {"mean_recall", inf.mean_recall}}},
                        {"composition", {{"tokens", composed}, {"text", detokenize(composed, lm.vocab())},
                                         {"detection", to_json(det)}}}};
      write_json(dir / "spoof.json", out);
      std::cout << "precision@" << k << "=" << inf.mean_precision << " z=" << det.z
                << (det.watermarked ? " (detected as watermarked)" : "") << "\n";
      return kExitOk;
    }

    if (verify->parsed()) {
      auto cfg = tool_config_from_json(read_config(verify_c.config));
      if (verify_c.seed) cfg.campaign.seed = *verify_c.seed;
      const auto t0 = std::chrono::steady_clock::now();
      const auto rep = theory::run_bound_campaign(cfg.campaign);
      json out = theory::to_json(rep);
      out["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      bool ok = rep.totals.holds();
      if (verify_corollary) {
        const auto lab = eval::build_lab(cfg.corpus, cfg.lm);
        cfg.corollary.seed = cfg.campaign.seed;
        json cases = json::array();
        for (const auto& c : eval::run_bound_cases(lab, cfg.params, cfg.corollary)) {
          cases.push_back(eval::to_json(c));
          ok = ok && c.holds;
        }
        out["corollary_cases"] = cases;
      }
      const auto dir = out_dir(verify_c);
      write_json(dir / "campaign.json", out);
      write_text_file(dir / "bound_curve.csv", theory::bound_curve_csv());
      std::cout << "violations=" << rep.totals.violations << " detectors=" << rep.totals.detectors
                << " thresholds=" << rep.totals.thresholds << (ok ? " OK" : " VIOLATION") << "\n";
      return ok ? kExitOk : kExitViolation;
    }

    if (tightness->parsed()) {
      const auto cfg = tool_config_from_json(read_config(tight_c.config));
      json rows = json::array();
      bool ok = true;
      std::optional<double> previous_envelope;
      bool shrinking = true;
      for (std::size_t n : cfg.tightness_sizes) {
        const auto h = theory::near_uniform_with_zeros(n, cfg.tightness_zeros, tight_c.seed.value_or(7));
        double envelope = 0.0;
        for (double target : cfg.tightness_targets) {
          const auto t = theory::tightness_construct(h, target);
          const double auroc = theory::auroc_of(t.detector, t.m, h).auroc;
          const double bound = theory::auroc_bound(t.achieved_tv);
          const double gap = std::abs(bound - auroc);
          ok = ok && auroc <= bound + theory::kBoundTolerance && gap <= t.tie_mass + theory::kBoundTolerance;
          envelope = std::max(envelope, t.tie_mass);
          rows.push_back({{"outcomes", n}, {"target_tv", target}, {"achieved_tv", t.achieved_tv}, {"auroc", auroc},
                          {"bound", bound}, {"gap", gap}, {"tie_mass", t.tie_mass}});
        }
        if (previous_envelope && !(envelope < *previous_envelope)) shrinking = false;
        previous_envelope = envelope;
      }
      const json out = {{"rows", rows}, {"gap_within_tie_mass", ok}, {"tie_mass_envelope_shrinks", shrinking}};
      write_json(out_dir(tight_c) / "tightness.json", out);
      std::cout << "gap within tie mass: " << (ok ? "yes" : "NO") << ", envelope shrinks: " << (shrinking ? "yes" : "NO")
                << "\n";
      return ok && shrinking ? kExitOk : kExitViolation;
    }

    if (run->parsed()) {
      auto cfg = eval::config_from_json(read_config(run_c.config));
      if (run_c.seed) cfg.seed = *run_c.seed;
      if (run->count("--out") > 0 || run_c.config.empty()) cfg.output_dir = run_c.out;
      for (const auto& f : formats)
        if (f != "csv" && f != "json") throw Error("config", "unknown format '" + f + "'");
      const auto lab = eval::build_lab(cfg.corpus, cfg.lm);
      const auto res = eval::run_experiment(cfg, lab);
      fs::create_directories(cfg.output_dir);
      for (const auto& p : eval::write_report(res, cfg.output_dir, formats)) std::cerr << "wrote " << p.string() << "\n";
      for (const auto& r : res.reports)
        std::cout << r.detector << " " << r.phase << " auroc=" << r.auroc << " accuracy=" << r.accuracy << "\n";
      return kExitOk;
    }

    if (serve->parsed()) {
      const auto cfg = tool_config_from_json(read_config(serve_c.config));
      serve_model = serve_model.empty() ? env_or("WMLAB_MODEL", "") : serve_model;
      serve_eval = serve_eval.empty() ? env_or("WMLAB_EVAL_MODEL", "") : serve_eval;
      serve_params = serve_params.empty() ? env_or("WMLAB_PARAMS", "") : serve_params;
      serve_table = serve_table.empty() ? env_or("WMLAB_TABLE", "") : serve_table;
      serve_bind = serve_bind.empty() ? env_or("WMLAB_BIND", cfg.bind) : serve_bind;
      const int port = serve_port ? *serve_port : std::stoi(env_or("WMLAB_PORT", std::to_string(cfg.port)));
      const std::size_t ttl =
          serve_ttl ? *serve_ttl : static_cast<std::size_t>(std::stoul(env_or("WMLAB_SESSION_TTL", std::to_string(cfg.session_ttl))));

      std::optional<eval::Lab> lab;
      if (serve_model.empty() || serve_eval.empty()) lab = eval::build_lab(cfg.corpus, cfg.lm);
      service::ServiceState state{serve_model.empty() ? lab->source : load_lm(serve_model),
                                  serve_eval.empty() ? lab->eval : load_lm(serve_eval),
                                  serve_params.empty() ? cfg.params : params_from_json(read_json_file(serve_params))};
      state.threshold = cfg.z_threshold;
      state.lab_mode = cfg.lab_mode;
      const std::uint64_t seed = serve_c.seed.value_or(cfg.map_seed);
      state.paraphrase_map = make_map(cfg, state.model.vocab(), seed);
      state.curvature_map = randomized_synonym_map(state.model.vocab_size(), cfg.class_size, 1.0, derive_seed(seed, 1));
      if (!serve_table.empty()) state.table = score_table_from_json(read_json_file(serve_table));
      if (!serve_trained.empty()) state.trained = standin_from_json(read_json_file(serve_trained));
      service::Service svc(std::move(state), {std::chrono::seconds(ttl), cfg.session_capacity});
      write_json(out_dir(serve_c) / "server.json",
                 {{"bind", serve_bind}, {"port", port}, {"model_fingerprint", service::model_fingerprint(svc.state().model)},
                  {"score_table", svc.state().table.has_value()}});
      std::cerr << "listening on " << serve_bind << ":" << port << "\n";
      if (!service::serve(svc, serve_bind, port)) throw Error("io", "cannot bind " + serve_bind + ":" + std::to_string(port));
      return kExitOk;
    }
  } catch (const Error& e) {
    std::cerr << "error [" << e.code() << "]: " << e.what() << "\n";
    return e.code() == "config" || e.code() == "schema" ? kExitConfig : kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitConfig;
}
