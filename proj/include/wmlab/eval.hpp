#pragma once

// Experiment orchestration: the default lab (corpora + models), detector
// scoring before and after attacks, report files, null calibration and the
// exact paraphrase-bound experiment.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "wmlab/corpus.hpp"
#include "wmlab/detectors.hpp"
#include "wmlab/error.hpp"
#include "wmlab/lm.hpp"
#include "wmlab/paraphrase.hpp"
#include "wmlab/roc.hpp"
#include "wmlab/rng.hpp"
#include "wmlab/stats.hpp"
#include "wmlab/theory.hpp"
#include "wmlab/watermark.hpp"

namespace wmlab::eval {

// ---- lab: corpora and the three models ----

struct CorpusConfig {
  std::vector<std::string> source_paths;  // one document per file; synthetic when empty
  std::vector<std::string> human_paths;
  std::size_t synthetic_documents = 2000;
  std::size_t sentences_per_document = 40;
  std::uint64_t source_style = 1, human_style = 2;
  std::uint64_t source_seed = 11, human_seed = 12;
};

struct LmConfig {
  std::size_t source_order = 2;
  std::size_t eval_order = 3;
  std::size_t human_order = 2;
  double alpha = 0.1;
};

struct Lab {
  Vocabulary vocab;
  MarkovLM source;  // generator (watermarked or not)
  MarkovLM eval;    // larger judge: detectors and perplexity
  MarkovLM human;   // human stand-in
};

inline std::vector<std::string> read_documents(const std::vector<std::string>& paths) {
  std::vector<std::string> docs;
  for (const auto& p : paths) docs.push_back(read_text_file(p));
  return docs;
}

inline Lab build_lab(const CorpusConfig& corpus, const LmConfig& lms) {
  auto source_docs = corpus.source_paths.empty()
                         ? corpus::synthetic({.style_seed = corpus.source_style}, corpus.synthetic_documents,
                                             corpus.sentences_per_document, corpus.source_seed)
                         : read_documents(corpus.source_paths);
  auto human_docs = corpus.human_paths.empty()
                        ? corpus::synthetic({.style_seed = corpus.human_style}, corpus.synthetic_documents,
                                            corpus.sentences_per_document, corpus.human_seed)
                        : read_documents(corpus.human_paths);
  std::vector<std::string> all = source_docs;
  all.insert(all.end(), human_docs.begin(), human_docs.end());
  Vocabulary vocab = build_vocabulary(all);
  auto source = train_lm(source_docs, lms.source_order, lms.alpha, vocab);
  auto eval_lm = train_lm(source_docs, lms.eval_order, lms.alpha, vocab);
  auto human = train_lm(human_docs, lms.human_order, lms.alpha, vocab);
  return {std::move(vocab), std::move(source), std::move(eval_lm), std::move(human)};
}

// ---- experiment configuration ----

inline const std::vector<std::string> kDetectorNames{"watermark", "avg_loglik", "rank",
                                                     "entropy",   "curvature",  "trained"};

struct AttackConfig {
  std::string kind = "paraphrase";  // none | paraphrase | paraphrase_evade
  double rate = 0.6;
  std::size_t rounds = 1;
  std::size_t candidates = 10;
  std::size_t max_detector_queries = 8;
  std::string evade_target = "watermark";
  std::size_t synonym_class_size = 4;
  double synonym_coverage = 1.0;
  std::string synonym_map_path;  // randomized map when empty
};

struct ExperimentConfig {
  CorpusConfig corpus;
  LmConfig lm;
  bool watermark = true;
  WatermarkParams params{.key = 0x15c0ffee2024ULL, .gamma = 0.25, .delta = 4.0};
  double z_threshold = kDefaultZThreshold;
  std::vector<std::string> detectors = kDetectorNames;
  AttackConfig attack;
  std::size_t samples = 100;
  std::size_t train_samples = 50;
  std::size_t length = 200;
  std::size_t curvature_k = 20;
  double curvature_rate = 0.15;
  std::vector<std::string> human_text_paths;  // replace sampled negatives when given
  std::uint64_t seed = 1;
  std::string output_dir = "out";

  void validate() const {
    auto fail = [](const std::string& m) { throw Error("config", m); };
    if (samples < 10) fail("samples must be >= 10");
    if (length < 2) fail("length must be >= 2");
    if (lm.source_order < 1 || lm.eval_order < 1 || lm.human_order < 1) fail("lm orders must be >= 1");
    if (!(lm.alpha > 0.0)) fail("alpha must be > 0 for scoring");
    if (!(params.gamma > 0.0 && params.gamma < 1.0)) fail("gamma must lie in (0, 1)");
    if (!(params.delta >= 0.0)) fail("delta must be >= 0");
    if (detectors.empty()) fail("at least one detector is required");
    for (const auto& d : detectors)
      if (std::find(kDetectorNames.begin(), kDetectorNames.end(), d) == kDetectorNames.end())
        fail("unknown detector '" + d + "'");
    if (std::find(detectors.begin(), detectors.end(), "trained") != detectors.end() && train_samples < 10)
      fail("train_samples must be >= 10 for the trained detector");
    if (curvature_k < 2) fail("curvature_k must be >= 2");
    if (attack.kind != "none" && attack.kind != "paraphrase" && attack.kind != "paraphrase_evade")
      fail("attack.kind must be none, paraphrase or paraphrase_evade");
    if (!(attack.rate >= 0.0 && attack.rate <= 1.0)) fail("attack.rate must lie in [0, 1]");
    if (attack.rounds < 1) fail("attack.rounds must be >= 1");
    if (attack.kind == "paraphrase_evade") {
      if (attack.candidates < 1 || attack.max_detector_queries < 1) fail("evasion needs candidates and queries >= 1");
      if (std::find(detectors.begin(), detectors.end(), attack.evade_target) == detectors.end())
        fail("attack.evade_target must be one of the configured detectors");
    }
    if (std::find(detectors.begin(), detectors.end(), "watermark") != detectors.end() && !watermark)
      fail("the watermark detector needs watermark = true");
    if (!human_text_paths.empty() && human_text_paths.size() < 10) fail("need >= 10 human text files");
    auto exists = [&](const std::string& p) {
      if (!std::filesystem::exists(p)) fail("file not found: " + p);
    };
    for (const auto& p : corpus.source_paths) exists(p);
    for (const auto& p : corpus.human_paths) exists(p);
    for (const auto& p : human_text_paths) exists(p);
    if (!attack.synonym_map_path.empty()) exists(attack.synonym_map_path);
  }
};

inline nlohmann::json to_json(const ExperimentConfig& c) {
  return {
      {"corpus",
       {{"source_paths", c.corpus.source_paths},
        {"human_paths", c.corpus.human_paths},
        {"synthetic_documents", c.corpus.synthetic_documents},
        {"sentences_per_document", c.corpus.sentences_per_document},
        {"source_style", c.corpus.source_style},
        {"human_style", c.corpus.human_style},
        {"source_seed", c.corpus.source_seed},
        {"human_seed", c.corpus.human_seed}}},
      {"lm",
       {{"source_order", c.lm.source_order},
        {"eval_order", c.lm.eval_order},
        {"human_order", c.lm.human_order},
        {"alpha", c.lm.alpha}}},
      {"watermark",
       {{"enabled", c.watermark},
        {"key_hex", key_to_hex(c.params.key)},
        {"gamma", c.params.gamma},
        {"delta", c.params.delta},
        {"z_threshold", c.z_threshold}}},
      {"detectors", c.detectors},
      {"attack",
       {{"kind", c.attack.kind},
        {"rate", c.attack.rate},
        {"rounds", c.attack.rounds},
        {"candidates", c.attack.candidates},
        {"max_detector_queries", c.attack.max_detector_queries},
        {"evade_target", c.attack.evade_target},
        {"synonym_class_size", c.attack.synonym_class_size},
        {"synonym_coverage", c.attack.synonym_coverage},
        {"synonym_map_path", c.attack.synonym_map_path}}},
      {"samples", c.samples},
      {"train_samples", c.train_samples},
      {"length", c.length},
      {"curvature_k", c.curvature_k},
      {"curvature_rate", c.curvature_rate},
      {"human_text_paths", c.human_text_paths},
      {"seed", c.seed},
      {"output_dir", c.output_dir}};
}

// Missing keys keep their defaults; wrong types and unknown keys are errors.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  auto check_keys = [](const nlohmann::json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!obj.is_object()) throw Error("config", where + " must be an object");
    for (const auto& [k, v] : obj.items()) {
      bool ok = false;
      for (const char* a : allowed) ok = ok || k == a;
      if (!ok) throw Error("config", "unknown key '" + k + "' in " + where);
    }
  };
  try {
    check_keys(j,
               {"corpus", "lm", "watermark", "detectors", "attack", "samples", "train_samples", "length",
                "curvature_k", "curvature_rate", "human_text_paths", "seed", "output_dir"},
               "config");
    auto get = [](const nlohmann::json& obj, const char* key, auto& field) {
      if (obj.contains(key)) field = obj.at(key).get<std::decay_t<decltype(field)>>();
    };
    if (j.contains("corpus")) {
      const auto& x = j.at("corpus");
      check_keys(x,
                 {"source_paths", "human_paths", "synthetic_documents", "sentences_per_document", "source_style",
                  "human_style", "source_seed", "human_seed"},
                 "corpus");
      get(x, "source_paths", c.corpus.source_paths);
      get(x, "human_paths", c.corpus.human_paths);
      get(x, "synthetic_documents", c.corpus.synthetic_documents);
      get(x, "sentences_per_document", c.corpus.sentences_per_document);
      get(x, "source_style", c.corpus.source_style);
      get(x, "human_style", c.corpus.human_style);
      get(x, "source_seed", c.corpus.source_seed);
      get(x, "human_seed", c.corpus.human_seed);
    }
    if (j.contains("lm")) {
      const auto& x = j.at("lm");
      check_keys(x, {"source_order", "eval_order", "human_order", "alpha"}, "lm");
      get(x, "source_order", c.lm.source_order);
      get(x, "eval_order", c.lm.eval_order);
      get(x, "human_order", c.lm.human_order);
      get(x, "alpha", c.lm.alpha);
    }
    if (j.contains("watermark")) {
      const auto& x = j.at("watermark");
      check_keys(x, {"enabled", "key_hex", "gamma", "delta", "z_threshold"}, "watermark");
      get(x, "enabled", c.watermark);
      if (x.contains("key_hex")) c.params.key = key_from_hex(x.at("key_hex").get<std::string>());
      get(x, "gamma", c.params.gamma);
      get(x, "delta", c.params.delta);
      get(x, "z_threshold", c.z_threshold);
    }
    get(j, "detectors", c.detectors);
    if (j.contains("attack")) {
      const auto& x = j.at("attack");
      check_keys(x,
                 {"kind", "rate", "rounds", "candidates", "max_detector_queries", "evade_target",
                  "synonym_class_size", "synonym_coverage", "synonym_map_path"},
                 "attack");
      get(x, "kind", c.attack.kind);
      get(x, "rate", c.attack.rate);
      get(x, "rounds", c.attack.rounds);
      get(x, "candidates", c.attack.candidates);
      get(x, "max_detector_queries", c.attack.max_detector_queries);
      get(x, "evade_target", c.attack.evade_target);
      get(x, "synonym_class_size", c.attack.synonym_class_size);
      get(x, "synonym_coverage", c.attack.synonym_coverage);
      get(x, "synonym_map_path", c.attack.synonym_map_path);
    }
    get(j, "samples", c.samples);
    get(j, "train_samples", c.train_samples);
    get(j, "length", c.length);
    get(j, "curvature_k", c.curvature_k);
    get(j, "curvature_rate", c.curvature_rate);
    get(j, "human_text_paths", c.human_text_paths);
    get(j, "seed", c.seed);
    get(j, "output_dir", c.output_dir);
  } catch (const nlohmann::json::exception& e) {
    throw Error("config", std::string("experiment config: ") + e.what());
  } catch (const Error& e) {
    if (e.code() == "config") throw;
    throw Error("config", e.what());
  }
  c.validate();
  return c;
}

// ---- seeds ----

enum class Stream : std::uint64_t {
  kPositive = 1,
  kNegative,
  kAttack,
  kTrainPositive,
  kTrainNegative,
  kCurvature,
  kSynonymMap,
  kEvade,
  kNull,
};

inline std::uint64_t stream_seed(std::uint64_t root, Stream s, std::uint64_t index) {
  return derive_seed(derive_seed(root, static_cast<std::uint64_t>(s)), index);
}

// ---- scoring ----

class DetectorSuite {
 public:
  DetectorSuite(const Lab& lab, const ExperimentConfig& cfg, std::optional<GreenPartition> partition,
                SynonymMap curvature_map)
      : lab_(&lab), cfg_(&cfg), partition_(std::move(partition)),
        perturber_{std::move(curvature_map), cfg.curvature_rate} {}

  void set_trained(TrainedStandIn m) { trained_ = std::move(m); }

  double score(const std::string& name, std::span<const TokenId> tokens, std::uint64_t sample_seed) const {
    if (name == "watermark") return detect_watermark(tokens, *partition_, cfg_->z_threshold).z;
    if (name == "avg_loglik") return avg_loglik_score(lab_->eval, tokens).value;
    if (name == "rank") return rank_score(lab_->eval, tokens).value;
    if (name == "entropy") return entropy_score(lab_->eval, tokens).value;
    if (name == "curvature")
      return curvature_score(lab_->eval, perturber_, tokens, cfg_->curvature_k, sample_seed).value;
    if (name == "trained") return trained_score(*trained_, lab_->eval, tokens).value;
    throw Error("config", "unknown detector '" + name + "'");
  }

  const std::optional<GreenPartition>& partition() const { return partition_; }

 private:
  const Lab* lab_;
  const ExperimentConfig* cfg_;
  std::optional<GreenPartition> partition_;
  SubstitutionPerturber perturber_;
  std::optional<TrainedStandIn> trained_;
};

struct AttackSummary {
  std::string kind;
  double mean_perplexity_before = 0.0;
  double mean_perplexity_after = 0.0;
  std::size_t evaded = 0;            // paraphrase_evade only
  double mean_queries = 0.0;         // paraphrase_evade only
  double mean_changed_fraction = 0.0;
};

struct WatermarkSummary {
  std::size_t passages = 0;
  std::size_t scored_tokens_before = 0, green_tokens_before = 0;
  std::size_t scored_tokens_after = 0, green_tokens_after = 0;
  double accuracy_before = 0.0, accuracy_after = 0.0;  // per passage, z >= threshold
  double false_positive_rate = 0.0;
};

struct ExperimentResult {
  ExperimentConfig config;
  std::vector<RocReport> reports;  // detector-major, "before" then "after"
  std::vector<Tokens> positives, negatives, attacked;
  AttackSummary attack;
  std::optional<WatermarkSummary> watermark;

  const RocReport& report(const std::string& detector, const std::string& phase) const {
    for (const auto& r : reports)
      if (r.detector == detector && r.phase == phase) return r;
    throw Error("not_found", "no report for " + detector + "/" + phase);
  }
};

inline SynonymMap attack_map(const ExperimentConfig& cfg, const Lab& lab) {
  if (!cfg.attack.synonym_map_path.empty())
    return synonym_map_from_json(read_json_file(cfg.attack.synonym_map_path), lab.vocab);
  return randomized_synonym_map(lab.vocab.size(), cfg.attack.synonym_class_size, cfg.attack.synonym_coverage,
                                stream_seed(cfg.seed, Stream::kSynonymMap, 0));
}

// Positive passage i: a watermarked (or plain) source-LM sample from the empty prompt.
inline Tokens positive_passage(const Lab& lab, const ExperimentConfig& cfg,
                               const std::optional<GreenPartition>& partition, Stream stream, std::size_t i) {
  const GenerationConfig g({}, cfg.length, stream_seed(cfg.seed, stream, i));
  return partition && cfg.watermark ? generate_watermarked(lab.source, g, *partition).tokens
                                    : sample_sequence(lab.source, g);
}

// The trained stand-in: train_samples positives and human-LM negatives from their own seed streams.
inline TrainedStandIn train_detector(const Lab& lab, const ExperimentConfig& cfg,
                                     const std::optional<GreenPartition>& partition) {
  std::vector<FeatureVector> x;
  std::vector<int> y;
  for (std::size_t i = 0; i < cfg.train_samples; ++i) {
    x.push_back(text_features(lab.eval, positive_passage(lab, cfg, partition, Stream::kTrainPositive, i)));
    y.push_back(1);
    x.push_back(text_features(
        lab.eval,
        sample_sequence(lab.human, GenerationConfig({}, cfg.length, stream_seed(cfg.seed, Stream::kTrainNegative, i)))));
    y.push_back(0);
  }
  return train_standin(x, y);
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const Lab& lab) {
  cfg.validate();
  ExperimentResult res;
  res.config = cfg;
  std::optional<GreenPartition> partition;
  if (cfg.watermark) partition.emplace(cfg.params, lab.vocab.size());
  const bool has_trained = std::find(cfg.detectors.begin(), cfg.detectors.end(), "trained") != cfg.detectors.end();

  SynonymMap curvature_map = randomized_synonym_map(lab.vocab.size(), cfg.attack.synonym_class_size, 1.0,
                                                    stream_seed(cfg.seed, Stream::kCurvature, 0));
  DetectorSuite suite(lab, cfg, partition, std::move(curvature_map));

  for (std::size_t i = 0; i < cfg.samples; ++i) res.positives.push_back(positive_passage(lab, cfg, partition, Stream::kPositive, i));
  if (cfg.human_text_paths.empty()) {
    for (std::size_t i = 0; i < cfg.samples; ++i)
      res.negatives.push_back(
          sample_sequence(lab.human, GenerationConfig({}, cfg.length, stream_seed(cfg.seed, Stream::kNegative, i))));
  } else {
    for (const auto& p : cfg.human_text_paths) {
      Tokens t = tokenize(read_text_file(p), lab.vocab);
      if (t.size() > cfg.length) t.resize(cfg.length);
      if (t.size() < 2) throw Error("too_short", "human text too short to score: " + p);
      res.negatives.push_back(std::move(t));
    }
  }

  if (has_trained) suite.set_trained(train_detector(lab, cfg, partition));

  const std::size_t n_pos = res.positives.size();
  auto score_phase = [&](const std::string& det, const std::string& phase, const std::vector<Tokens>& pos,
                         std::optional<double> threshold) {
    std::vector<ScoredSample> samples;
    for (std::size_t i = 0; i < pos.size(); ++i)
      samples.push_back({i, 1, suite.score(det, pos[i], stream_seed(cfg.seed, Stream::kCurvature, i + 1))});
    for (std::size_t i = 0; i < res.negatives.size(); ++i)
      samples.push_back(
          {n_pos + i, 0, suite.score(det, res.negatives[i], stream_seed(cfg.seed, Stream::kCurvature, n_pos + i + 1))});
    auto r = make_roc_report(det, phase, std::move(samples), threshold);
    r.config = {{"seed", cfg.seed}, {"samples", cfg.samples}, {"length", cfg.length}, {"attack", cfg.attack.kind}};
    return r;
  };

  std::map<std::string, double> thresholds;
  for (const auto& det : cfg.detectors) {
    const std::optional<double> fixed = det == "watermark" ? std::optional<double>(cfg.z_threshold) : std::nullopt;
    res.reports.push_back(score_phase(det, "before", res.positives, fixed));
    thresholds[det] = res.reports.back().threshold;
  }

  res.attack.kind = cfg.attack.kind;
  if (cfg.attack.kind != "none") {
    const SynonymMap map = attack_map(cfg, lab);
    double changed = 0.0, queries = 0.0;
    for (std::size_t i = 0; i < res.positives.size(); ++i) {
      ParaphraseConfig pc;
      pc.rate = cfg.attack.rate;
      pc.rounds = cfg.attack.rounds;
      pc.seed = stream_seed(cfg.seed, Stream::kAttack, i);
      pc.max_detector_queries = cfg.attack.max_detector_queries;
      Tokens out;
      if (cfg.attack.kind == "paraphrase") {
        out = paraphrase(res.positives[i], map, pc);
      } else {
        const std::string& target = cfg.attack.evade_target;
        const double thr = thresholds.at(target);
        const std::uint64_t det_seed = stream_seed(cfg.seed, Stream::kEvade, i);
        const BinaryDetector detector = [&](std::span<const TokenId> x) {
          const double s = suite.score(target, x, det_seed);
          return DetectorVerdict{s >= thr, s};
        };
        const auto ev = paraphrase_evade(res.positives[i], map, detector, cfg.attack.candidates, pc);
        res.attack.evaded += ev.evaded ? 1 : 0;
        queries += static_cast<double>(ev.queries_used);
        out = ev.tokens;
      }
      std::size_t diff = 0;
      for (std::size_t k = 0; k < out.size(); ++k) diff += out[k] != res.positives[i][k];
      changed += static_cast<double>(diff) / static_cast<double>(out.size());
      const auto q = quality_delta(lab.eval, res.positives[i], out);
      res.attack.mean_perplexity_before += q.perplexity_before;
      res.attack.mean_perplexity_after += q.perplexity_after;
      res.attacked.push_back(std::move(out));
    }
    const double n = static_cast<double>(res.positives.size());
    res.attack.mean_perplexity_before /= n;
    res.attack.mean_perplexity_after /= n;
    res.attack.mean_changed_fraction = changed / n;
    res.attack.mean_queries = queries / n;
    std::vector<RocReport> after;
    for (const auto& det : cfg.detectors) after.push_back(score_phase(det, "after", res.attacked, thresholds.at(det)));
    // interleave so each detector's "before" is followed by its "after"
    std::vector<RocReport> merged;
    for (std::size_t d = 0; d < cfg.detectors.size(); ++d) {
      merged.push_back(std::move(res.reports[d]));
      merged.push_back(std::move(after[d]));
    }
    res.reports = std::move(merged);
  }

  if (partition) {
    WatermarkSummary w;
    w.passages = res.positives.size();
    std::size_t hits_before = 0, hits_after = 0, fp = 0;
    for (std::size_t i = 0; i < res.positives.size(); ++i) {
      const auto d = detect_watermark(res.positives[i], *partition, cfg.z_threshold);
      w.scored_tokens_before += d.scored_count;
      w.green_tokens_before += d.green_count;
      hits_before += d.watermarked;
      if (!res.attacked.empty()) {
        const auto a = detect_watermark(res.attacked[i], *partition, cfg.z_threshold);
        w.scored_tokens_after += a.scored_count;
        w.green_tokens_after += a.green_count;
        hits_after += a.watermarked;
      }
    }
    for (const auto& t : res.negatives) fp += detect_watermark(t, *partition, cfg.z_threshold).watermarked;
    w.accuracy_before = static_cast<double>(hits_before) / static_cast<double>(w.passages);
    w.accuracy_after = res.attacked.empty() ? w.accuracy_before
                                            : static_cast<double>(hits_after) / static_cast<double>(w.passages);
    if (res.attacked.empty()) {
      w.scored_tokens_after = w.scored_tokens_before;
      w.green_tokens_after = w.green_tokens_before;
    }
    w.false_positive_rate = static_cast<double>(fp) / static_cast<double>(res.negatives.size());
    res.watermark = w;
  }
  return res;
}

inline nlohmann::json summary_json(const ExperimentResult& r) {
  nlohmann::json detectors = nlohmann::json::array();
  for (const auto& rep : r.reports) {
    nlohmann::json tpr = nlohmann::json::object();
    for (const auto& [f, t] : rep.tpr_at) {
      std::ostringstream key;
      key << f;
      tpr[key.str()] = t;
    }
    detectors.push_back({{"detector", rep.detector},
                         {"phase", rep.phase},
                         {"auroc", rep.auroc},
                         {"accuracy", rep.accuracy},
                         {"false_positive_rate", rep.false_positive_rate},
                         {"threshold", rep.threshold},
                         {"tpr_at_fpr", tpr}});
  }
  nlohmann::json out = {
      {"notes",
       {"accuracy = fraction of positive passages flagged: watermark at z >= threshold per passage, other "
        "detectors at the threshold reaching 1% empirical FPR on the before-attack data",
        "token counts are scored tokens (the first token of a passage has no prefix and is not scored)"}},
      {"detectors", detectors},
      {"attack",
       {{"kind", r.attack.kind},
        {"mean_perplexity_before", r.attack.mean_perplexity_before},
        {"mean_perplexity_after", r.attack.mean_perplexity_after},
        {"mean_changed_fraction", r.attack.mean_changed_fraction},
        {"evaded", r.attack.evaded},
        {"mean_queries", r.attack.mean_queries}}}};
  if (r.watermark) {
    const auto& w = *r.watermark;
    auto frac = [](std::size_t g, std::size_t s) { return s == 0 ? 0.0 : static_cast<double>(g) / static_cast<double>(s); };
    out["watermark"] = {{"passages", w.passages},
                        {"scored_tokens_before", w.scored_tokens_before},
                        {"green_tokens_before", w.green_tokens_before},
                        {"green_fraction_before", frac(w.green_tokens_before, w.scored_tokens_before)},
                        {"scored_tokens_after", w.scored_tokens_after},
                        {"green_tokens_after", w.green_tokens_after},
                        {"green_fraction_after", frac(w.green_tokens_after, w.scored_tokens_after)},
                        {"accuracy_before", w.accuracy_before},
                        {"accuracy_after", w.accuracy_after},
                        {"false_positive_rate", w.false_positive_rate}};
  }
  return out;
}

// ---- report files ----

inline std::string format_double(double x) {
  std::ostringstream s;
  s.precision(17);
  s << x;
  return s.str();
}

inline std::string scores_csv(const ExperimentResult& r) {
  std::ostringstream out;
  out << "sample_id,label,detector,phase,score,verdict\n";
  for (const auto& rep : r.reports)
    for (const auto& s : rep.samples)
      out << s.sample_id << ',' << (s.label == 1 ? "ai" : "human") << ',' << rep.detector << ',' << rep.phase << ','
          << format_double(s.score) << ',' << (s.score >= rep.threshold ? "positive" : "negative") << '\n';
  return out.str();
}

inline std::string roc_points_csv(const RocReport& rep) {
  std::ostringstream out;
  out << "threshold,fpr,tpr\n";
  for (const auto& p : rep.points)
    out << (std::isfinite(p.threshold) ? format_double(p.threshold) : std::string("inf")) << ','
        << format_double(p.fpr) << ',' << format_double(p.tpr) << '\n';
  return out.str();
}

inline nlohmann::json report_json(const ExperimentResult& r) {
  nlohmann::json reports = nlohmann::json::array();
  for (const auto& rep : r.reports) reports.push_back(to_json(rep));
  // the output location is not part of the experiment, so reruns elsewhere stay byte-identical
  auto config = to_json(r.config);
  config.erase("output_dir");
  return {{"version", 1}, {"config", config}, {"summary", summary_json(r)}, {"reports", reports}};
}

// Writes report.json, scores.csv and roc_<detector>_<phase>.csv under `dir`.
// `formats` selects "json", "csv" or both. Returns the written paths.
inline std::vector<std::filesystem::path> write_report(const ExperimentResult& r, const std::filesystem::path& dir,
                                                       const std::vector<std::string>& formats = {"json", "csv"}) {
  std::vector<std::filesystem::path> written;
  const bool json = std::find(formats.begin(), formats.end(), "json") != formats.end();
  const bool csv = std::find(formats.begin(), formats.end(), "csv") != formats.end();
  if (!json && !csv) throw Error("config", "report format must be csv and/or json");
  if (json) {
    written.push_back(dir / "report.json");
    write_text_file(written.back(), report_json(r).dump(2) + "\n");
  }
  if (csv) {
    written.push_back(dir / "scores.csv");
    write_text_file(written.back(), scores_csv(r));
    for (const auto& rep : r.reports) {
      written.push_back(dir / ("roc_" + rep.detector + "_" + rep.phase + ".csv"));
      write_text_file(written.back(), roc_points_csv(rep));
    }
  }
  return written;
}

inline std::vector<RocReport> read_report(const std::filesystem::path& path) {
  const auto j = read_json_file(path);
  std::vector<RocReport> out;
  try {
    for (const auto& r : j.at("reports")) out.push_back(roc_report_from_json(r));
  } catch (const nlohmann::json::exception& e) {
    throw Error("schema", std::string("report: ") + e.what());
  }
  return out;
}

// ---- null calibration of the watermark detector ----

struct NullCalibration {
  std::size_t passages = 0;
  std::size_t flagged = 0;
  std::size_t green = 0, scored = 0;
  double false_positive_rate = 0.0;
  double pooled_z = 0.0;
  double binomial_p = 1.0;  // two-sided exact test of pooled green count vs Binomial(scored, gamma)
};

// Unwatermarked source-LM passages scored against the watermark key.
inline NullCalibration null_calibration(const Lab& lab, const WatermarkParams& params, std::size_t passages,
                                        std::size_t length, std::uint64_t seed, double threshold = kDefaultZThreshold) {
  const GreenPartition part(params, lab.vocab.size());
  NullCalibration c;
  c.passages = passages;
  for (std::size_t i = 0; i < passages; ++i) {
    const auto t = sample_sequence(lab.source, GenerationConfig({}, length, stream_seed(seed, Stream::kNull, i)));
    const auto d = detect_watermark(t, part, threshold);
    c.flagged += d.watermarked;
    c.green += d.green_count;
    c.scored += d.scored_count;
  }
  c.false_positive_rate = static_cast<double>(c.flagged) / static_cast<double>(passages);
  c.pooled_z = z_score(c.green, c.scored, params.gamma);
  c.binomial_p = stats::binomial_two_sided_p(c.green, c.scored, params.gamma);
  return c;
}

// ---- exact paraphrase-bound experiment ----

struct BoundCase {
  std::string name;
  std::size_t outcomes = 0;
  double tv = 0.0;
  double auroc = 0.0;
  double bound = 0.0;
  double slack = 0.0;  // bound - auroc
  double corollary_worst_slack = 0.0;
  bool holds = false;
};

inline nlohmann::json to_json(const BoundCase& c) {
  return {{"name", c.name},   {"outcomes", c.outcomes}, {"tv", c.tv},
          {"auroc", c.auroc}, {"bound", c.bound},       {"slack", c.slack},
          {"corollary_worst_slack", c.corollary_worst_slack}, {"holds", c.holds}};
}

// Exact check of AUROC <= bound(tv) for a detector over two sparse sequence
// distributions. The outcome space is the union of both supports.
inline BoundCase exact_bound_case(std::string name, const std::map<Tokens, double>& m_law,
                                  const std::map<Tokens, double>& h_law,
                                  const std::function<double(const Tokens&)>& detector) {
  std::map<Tokens, std::size_t> index;
  for (const auto& [s, p] : m_law) index.emplace(s, index.size());
  for (const auto& [s, p] : h_law) index.emplace(s, index.size());
  std::vector<double> pm(index.size(), 0.0), ph(index.size(), 0.0);
  theory::DetectorFunction d(index.size());
  for (const auto& [s, p] : m_law) pm[index.at(s)] = p;
  for (const auto& [s, p] : h_law) ph[index.at(s)] = p;
  for (const auto& [s, i] : index) d[i] = detector(s);
  const auto m = DiscreteDistribution::from_weights(std::move(pm));
  const auto h = DiscreteDistribution::from_weights(std::move(ph));
  BoundCase c;
  c.name = std::move(name);
  c.outcomes = index.size();
  c.tv = theory::tv_distance(m, h);
  c.auroc = theory::auroc_of(d, m, h).auroc;
  c.bound = theory::auroc_bound(c.tv);
  c.slack = c.bound - c.auroc;
  c.corollary_worst_slack = theory::verify_corollaries(m, h, d).worst_slack;
  c.holds = c.slack >= -theory::kBoundTolerance && c.corollary_worst_slack >= -theory::kBoundTolerance;
  return c;
}

inline std::map<Tokens, double> to_sparse(const DiscreteDistribution& d, std::size_t vocab_size, std::size_t length) {
  std::map<Tokens, double> out;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (d[i] > 0.0) out.emplace(theory::sequence_at(i, vocab_size, length), d[i]);
  return out;
}

struct ParaphraseChannel {
  const SynonymMap* map;
  double rate;
  std::size_t rounds = 1;
};

// s is a seeded watermarked continuation of `prompt`; R_M(s) and R_H(s) are
// the exact output laws of two substitution channels applied to s; the
// detector is the watermark z-score with the last prompt token as prefix.
inline BoundCase paraphrase_bound_experiment(std::string name, const MarkovLM& lm, const WatermarkParams& params,
                                             const Tokens& prompt, const ParaphraseChannel& channel_m,
                                             const ParaphraseChannel& channel_h, std::size_t length,
                                             std::uint64_t seed) {
  if (prompt.empty()) throw Error("config", "the bound experiment needs a non-empty prompt");
  const GreenPartition part(params, lm.vocab_size());
  const auto s = generate_watermarked(lm, GenerationConfig(prompt, length, seed), part).tokens;
  const auto m_law = paraphrase_distribution(s, *channel_m.map, channel_m.rate, channel_m.rounds);
  const auto h_law = paraphrase_distribution(s, *channel_h.map, channel_h.rate, channel_h.rounds);
  return exact_bound_case(std::move(name), m_law, h_law, [&](const Tokens& x) {
    return detect_watermark(x, part, kDefaultZThreshold, prompt.back()).z;
  });
}

// Generation-level case: M = watermarked source continuations, H = human
// stand-in continuations, both enumerated over V^length.
inline BoundCase generation_bound_case(std::string name, const Lab& lab, const WatermarkParams& params,
                                       const Tokens& prompt, std::size_t length) {
  if (prompt.empty()) throw Error("config", "the bound experiment needs a non-empty prompt");
  const GreenPartition part(params, lab.vocab.size());
  const auto m = to_sparse(theory::enumerate_sequence_dist(lab.source, part, prompt, length), lab.vocab.size(), length);
  const auto h = to_sparse(theory::enumerate_sequence_dist(lab.human, prompt, length), lab.vocab.size(), length);
  return exact_bound_case(std::move(name), m, h, [&](const Tokens& x) {
    return detect_watermark(x, part, kDefaultZThreshold, prompt.back()).z;
  });
}

struct BoundExperimentConfig {
  std::size_t length = 8;
  double rate = 0.6;
  std::size_t class_size = 4;
  std::uint64_t seed = 1;
  std::size_t generation_length = 2;
};

// The configured paraphrase-channel cases: distinct synonym maps, identical channels,
// disjoint deterministic channels, and the generation-level enumeration.
inline std::vector<BoundCase> run_bound_cases(const Lab& lab, const WatermarkParams& params,
                                              const BoundExperimentConfig& cfg) {
  const std::size_t v = lab.vocab.size();
  const SynonymMap map_m = randomized_synonym_map(v, cfg.class_size, 1.0, derive_seed(cfg.seed, 1));
  const SynonymMap map_h = randomized_synonym_map(v, cfg.class_size, 1.0, derive_seed(cfg.seed, 2));
  const SynonymMap pairs_m = randomized_synonym_map(v, 2, 1.0, derive_seed(cfg.seed, 3));
  const SynonymMap pairs_h = randomized_synonym_map(v, 2, 1.0, derive_seed(cfg.seed, 4));
  const Tokens prompt = tokenize("the old man", lab.vocab);
  std::vector<BoundCase> out;
  for (std::uint64_t k = 0; k < 3; ++k) {
    const std::uint64_t s = derive_seed(cfg.seed, 10 + k);
    out.push_back(paraphrase_bound_experiment("distinct_maps_" + std::to_string(k), lab.source, params, prompt,
                                              {&map_m, cfg.rate}, {&map_h, cfg.rate}, cfg.length, s));
  }
  out.push_back(paraphrase_bound_experiment("identical_channels", lab.source, params, prompt, {&map_m, cfg.rate},
                                            {&map_m, cfg.rate}, cfg.length, derive_seed(cfg.seed, 20)));
  out.push_back(paraphrase_bound_experiment("rate_mismatch", lab.source, params, prompt, {&map_m, cfg.rate},
                                            {&map_m, 0.2}, cfg.length, derive_seed(cfg.seed, 21)));
  out.push_back(paraphrase_bound_experiment("disjoint_channels", lab.source, params, prompt, {&pairs_m, 1.0},
                                            {&pairs_h, 1.0}, cfg.length, derive_seed(cfg.seed, 22)));
  out.push_back(generation_bound_case("generation_level", lab, params, prompt, cfg.generation_length));
  return out;
}

}  // namespace wmlab::eval
