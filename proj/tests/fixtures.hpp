#pragma once

// Small shared corpora and models, built once per test binary.

#include <string>
#include <vector>

#include "wmlab/corpus.hpp"
#include "wmlab/lm.hpp"

namespace fixtures {

struct SmallLab {
  std::vector<std::string> source_docs, human_docs;
  wmlab::Vocabulary vocab;
  wmlab::MarkovLM source, eval, human;
};

inline SmallLab build_small_lab(std::size_t docs) {
  wmlab::corpus::StyleOptions s1, s2;
  s2.style_seed = 2;
  auto src = wmlab::corpus::synthetic(s1, docs, 40, 11);
  auto hum = wmlab::corpus::synthetic(s2, docs, 40, 12);
  std::vector<std::string> all = src;
  all.insert(all.end(), hum.begin(), hum.end());
  auto vocab = wmlab::build_vocabulary(all);
  auto source = wmlab::train_lm(src, 2, 0.1, vocab);
  auto eval = wmlab::train_lm(src, 3, 0.1, vocab);
  auto human = wmlab::train_lm(hum, 2, 0.1, vocab);
  return {std::move(src), std::move(hum), vocab, std::move(source), std::move(eval), std::move(human)};
}

inline const SmallLab& small_lab() {
  static const SmallLab lab = build_small_lab(300);
  return lab;
}

// Same sizes as the library's default lab.
inline const SmallLab& default_lab() {
  static const SmallLab lab = build_small_lab(2000);
  return lab;
}

}  // namespace fixtures
