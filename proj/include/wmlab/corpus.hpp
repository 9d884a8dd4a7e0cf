#pragma once

// Self-contained synthetic English-like corpora. A template grammar over a
// fixed word list; a "style" is a seeded choice of word preferences and
// template weights, so two styles share a vocabulary but differ in
// distribution (used as source-model text vs. the human stand-in).

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "wmlab/rng.hpp"

namespace wmlab::corpus {

namespace words {

inline const std::vector<std::string_view> kDeterminers = {
    "the", "a", "this", "that", "every", "some", "each", "another", "one", "no", "my", "our"};

inline const std::vector<std::string_view> kPronouns = {"he", "she", "they", "we", "i", "you", "it"};

inline const std::vector<std::string_view> kNouns = {
    "world",   "thing",   "city",     "river",   "house",   "friend",  "teacher", "student",
    "doctor",  "lake",   "garden",   "market",  "letter",  "story",   "song",    "game",
    "road",    "machine", "village",  "window",  "forest",  "mountain", "child",  "worker",
    "farmer",  "king",    "queen",    "soldier", "painter", "writer",  "baker",   "sailor",
    "ship",    "train",   "bridge",   "tower",   "school",  "library", "book",    "paper",
    "question", "answer", "problem",  "idea",    "plan",    "reason",  "fact",    "place",
    "people",  "team",    "family",   "country", "company", "office",  "table",   "door",
    "horse",   "dog",     "cat",      "bird",    "fish",    "tree",    "flower",  "stone",
    "water",   "fire",    "money",    "music",   "picture", "voice",   "morning", "evening"};

inline const std::vector<std::string_view> kAdjectives = {
    "first",  "best",   "old",    "new",    "young",   "small",   "large",   "quiet",
    "bright", "dark",   "cold",   "warm",   "happy",   "strange", "simple",  "famous",
    "gentle", "proud",  "tired",  "brave",  "clever",  "early",   "late",    "long",
    "short",  "heavy",  "light",  "green",  "blue",    "red",     "golden",  "silent",
    "busy",   "empty",  "rich",   "poor",   "wild",    "careful", "honest",  "ancient"};

inline const std::vector<std::string_view> kTransitiveVerbs = {
    "saw",     "found",   "built",   "made",    "took",    "gave",    "knew",   "liked",
    "painted", "wrote",   "read",    "carried", "opened",  "closed",  "sold",   "bought",
    "visited", "watched", "followed", "helped", "called",  "moved",   "kept",   "left",
    "won",     "lost",    "changed", "showed",  "heard",   "brought", "cleaned", "fixed",
    "drew",    "caught",  "met"};

inline const std::vector<std::string_view> kIntransitiveVerbs = {
    "slept",   "arrived", "waited", "laughed", "smiled",  "worked", "walked", "ran",
    "sang",    "danced",  "stayed", "rested",  "returned", "spoke", "left"};

inline const std::vector<std::string_view> kAdverbs = {
    "quickly", "slowly", "quietly", "often",   "never",  "always", "again",  "soon",
    "today",   "later",  "well",    "gladly",  "rarely", "nearly", "finally"};

inline const std::vector<std::string_view> kPrepositions = {
    "in", "on", "near", "under", "over", "with", "from", "to", "by", "behind", "across",
    "beside", "after", "before"};

inline const std::vector<std::string_view> kConjunctions = {
    "and", "but", "so", "because", "while", "although", "when", "until"};

inline const std::vector<std::string_view> kEndings = {".", "!", "?", ";"};

}  // namespace words

struct StyleOptions {
  std::uint64_t style_seed = 1;
  double zipf_exponent = 0.8;
  double function_zipf_exponent = 0.5;
  double compound_probability = 0.3;
  double adjective_probability = 0.45;
};

class Generator {
 public:
  explicit Generator(const StyleOptions& opts) : opts_(opts) {
    Engine rng = make_engine(derive_seed(opts.style_seed, 0x5713));
    dets_ = category(rng, words::kDeterminers, opts.function_zipf_exponent);
    prons_ = category(rng, words::kPronouns, opts.function_zipf_exponent);
    nouns_ = category(rng, words::kNouns, opts.zipf_exponent);
    adjs_ = category(rng, words::kAdjectives, opts.zipf_exponent);
    vts_ = category(rng, words::kTransitiveVerbs, opts.zipf_exponent);
    vis_ = category(rng, words::kIntransitiveVerbs, opts.zipf_exponent);
    advs_ = category(rng, words::kAdverbs, opts.zipf_exponent);
    preps_ = category(rng, words::kPrepositions, opts.function_zipf_exponent);
    conjs_ = category(rng, words::kConjunctions, opts.function_zipf_exponent);
    ends_ = category(rng, words::kEndings, opts.function_zipf_exponent);
    for (double& w : template_weights_) w = 0.5 + uniform01(rng);
  }

  std::string document(Engine& rng, std::size_t sentences) const {
    std::vector<std::string_view> out;
    for (std::size_t i = 0; i < sentences; ++i) {
      clause(rng, out);
      while (bernoulli(rng, opts_.compound_probability)) {
        out.push_back(pick(rng, conjs_));
        clause(rng, out);
      }
      out.push_back(pick(rng, ends_));
    }
    std::string text;
    for (auto w : out) {
      const bool punct = w.size() == 1 && (w == "." || w == "!" || w == "?" || w == ";" || w == ",");
      if (!text.empty() && !punct) text.push_back(' ');
      text += w;
    }
    return text;
  }

 private:
  struct Category {
    std::vector<std::string_view> items;
    std::vector<double> weights;
  };

  static Category category(Engine& rng, const std::vector<std::string_view>& base, double s) {
    Category c;
    c.items = base;
    shuffle(rng, c.items);
    for (std::size_t r = 0; r < c.items.size(); ++r)
      c.weights.push_back(1.0 / std::pow(static_cast<double>(r + 1), s));
    return c;
  }

  static std::string_view pick(Engine& rng, const Category& c) {
    return c.items[sample_index(rng, c.weights)];
  }

  void noun_phrase(Engine& rng, std::vector<std::string_view>& out, bool subject) const {
    if (subject && bernoulli(rng, 0.25)) {
      out.push_back(pick(rng, prons_));
      return;
    }
    out.push_back(pick(rng, dets_));
    if (bernoulli(rng, opts_.adjective_probability)) {
      out.push_back(pick(rng, adjs_));
      if (bernoulli(rng, 0.15)) out.push_back(pick(rng, adjs_));
    }
    out.push_back(pick(rng, nouns_));
  }

  void clause(Engine& rng, std::vector<std::string_view>& out) const {
    switch (sample_index(rng, template_weights_)) {
      case 0:  // NP VT NP
        noun_phrase(rng, out, true);
        out.push_back(pick(rng, vts_));
        noun_phrase(rng, out, false);
        break;
      case 1:  // NP VI ADV
        noun_phrase(rng, out, true);
        out.push_back(pick(rng, vis_));
        out.push_back(pick(rng, advs_));
        break;
      case 2:  // NP VT NP PREP NP
        noun_phrase(rng, out, true);
        out.push_back(pick(rng, vts_));
        noun_phrase(rng, out, false);
        out.push_back(pick(rng, preps_));
        noun_phrase(rng, out, false);
        break;
      case 3:  // PREP NP , NP VI
        out.push_back(pick(rng, preps_));
        noun_phrase(rng, out, false);
        out.push_back(",");
        noun_phrase(rng, out, true);
        out.push_back(pick(rng, vis_));
        break;
      case 4:  // NP VI PREP NP
        noun_phrase(rng, out, true);
        out.push_back(pick(rng, vis_));
        out.push_back(pick(rng, preps_));
        noun_phrase(rng, out, false);
        break;
      default:  // ADV , NP VT NP
        out.push_back(pick(rng, advs_));
        out.push_back(",");
        noun_phrase(rng, out, true);
        out.push_back(pick(rng, vts_));
        noun_phrase(rng, out, false);
        break;
    }
  }

  StyleOptions opts_;
  Category dets_, prons_, nouns_, adjs_, vts_, vis_, advs_, preps_, conjs_, ends_;
  std::array<double, 6> template_weights_{};
};

// `documents` documents of `sentences_per_doc` sentences each.
inline std::vector<std::string> synthetic(const StyleOptions& style, std::size_t documents,
                                          std::size_t sentences_per_doc, std::uint64_t seed) {
  const Generator gen(style);
  std::vector<std::string> docs;
  docs.reserve(documents);
  for (std::size_t d = 0; d < documents; ++d) {
    Engine rng = make_engine(derive_seed(seed, d));
    docs.push_back(gen.document(rng, sentences_per_doc));
  }
  return docs;
}

}  // namespace wmlab::corpus
