#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.hpp"
#include "wmlab/stats.hpp"
#include "wmlab/watermark.hpp"

using namespace wmlab;

namespace {

WatermarkParams params(double delta, std::uint64_t key = 0x15c0ffee2024ULL) {
  WatermarkParams p;
  p.key = key;
  p.delta = delta;
  return p;
}

double green_fraction_of(const WatermarkedText& w) {
  std::size_t g = 0;
  for (bool b : w.green_mask) g += b;
  return static_cast<double>(g) / static_cast<double>(w.green_mask.size());
}

}  // namespace

TEST(GreenList, DeterministicAndSized) {
  const auto p = params(2.0);
  EXPECT_EQ(green_list(p, 17, 400), green_list(p, 17, 400));
  EXPECT_EQ(green_list(p, 17, 400).size(), 100u);
  EXPECT_NE(green_list(p, 17, 400), green_list(p, 18, 400));
  EXPECT_NE(green_list(p, 17, 400), green_list(params(2.0, 7), 17, 400));
}

TEST(GreenList, MembershipFrequencyIsGamma) {
  const auto p = params(2.0);
  const std::size_t v = 400, trials = 1000;
  std::vector<std::size_t> hits(v, 0);
  Engine rng = make_engine(1234);
  for (std::size_t i = 0; i < trials; ++i) {
    const auto prev = static_cast<TokenId>(uniform_below(rng, 1u << 30));
    for (TokenId g : green_list(p, prev, v)) ++hits[g];
  }
  const double sigma = std::sqrt(trials * p.gamma * (1 - p.gamma));
  for (std::size_t t = 0; t < v; ++t)
    EXPECT_NEAR(static_cast<double>(hits[t]), trials * p.gamma, 3 * sigma) << "token " << t;
}

TEST(GreenList, ParamsValidated) {
  WatermarkParams p;
  p.gamma = 1.0;
  EXPECT_THROW(green_list(p, 0, 10), Error);
  p.gamma = 0.01;
  EXPECT_THROW(green_list(p, 0, 10), Error);  // round(0.1) = 0
  EXPECT_THROW(green_list(params(-1.0), 0, 10), Error);
}

TEST(WatermarkedDist, ZeroDeltaIsIdentity) {
  const auto& lm = fixtures::small_lab().source;
  const GreenPartition part(params(0.0), lm.vocab_size());
  const Tokens ctx{5, 8};
  const auto base = lm.next_token_dist(ctx);
  const auto wm = watermarked_next_dist(lm, ctx, part);
  for (std::size_t t = 0; t < base.size(); ++t) EXPECT_LE(std::abs(base[t] - wm[t]), 1e-12);
}

TEST(WatermarkedDist, TwoTokenBoost) {
  WatermarkParams p;
  p.gamma = 0.5;
  p.delta = std::log(3.0);
  const GreenPartition part(p, 2);
  const TokenId green = part.is_green(0, 0) ? 0 : 1;
  const auto d = boost_green(DiscreteDistribution({0.5, 0.5}), 0, part);
  EXPECT_NEAR(d[green], 0.75, 1e-12);
  EXPECT_NEAR(d[1 - green], 0.25, 1e-12);
}

TEST(WatermarkedDist, ConstantRatioOnGreen) {
  const auto& lm = fixtures::small_lab().source;
  const GreenPartition part(params(2.0), lm.vocab_size());
  const Tokens ctx{3, 40};
  const auto base = lm.next_token_dist(ctx);
  const auto wm = watermarked_next_dist(lm, ctx, part);
  double ratio = -1.0;
  for (std::size_t t = 0; t < base.size(); ++t) {
    if (!part.is_green(40, static_cast<TokenId>(t)) || base[t] == 0) continue;
    const double r = wm[t] / base[t];
    if (ratio < 0) ratio = r;
    EXPECT_NEAR(r, ratio, 1e-9 * ratio);
  }
  EXPECT_GT(ratio, 1.0);
  EXPECT_NEAR(wm.total(), 1.0, 1e-9);
}

TEST(Generate, HighDeltaMostlyGreen) {
  const auto& lm = fixtures::small_lab().source;
  const GreenPartition part(params(8.0), lm.vocab_size());
  int ok = 0;
  for (std::uint64_t s = 0; s < 100; ++s)
    ok += green_fraction_of(generate_watermarked(lm, GenerationConfig({}, 200, s), part)) >= 0.5;
  EXPECT_GE(ok, 95);
}

TEST(Generate, DeterministicAndMaskMatchesLists) {
  const auto& lm = fixtures::small_lab().source;
  const auto p = params(2.0);
  const GreenPartition part(p, lm.vocab_size());
  const GenerationConfig cfg({7, 9}, 60, 5);
  const auto a = generate_watermarked(lm, cfg, part);
  const auto b = generate_watermarked(lm, cfg, p);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_EQ(a.green_mask, b.green_mask);
  TokenId prev = 9;
  for (std::size_t i = 0; i < a.tokens.size(); ++i) {
    const auto g = green_list(p, prev, lm.vocab_size());
    EXPECT_EQ(a.green_mask[i], std::binary_search(g.begin(), g.end(), a.tokens[i]));
    prev = a.tokens[i];
  }
}

TEST(Generate, ZeroDeltaMatchesBaseSampler) {
  const auto& lm = fixtures::small_lab().source;
  const GreenPartition part(params(0.0), lm.vocab_size());
  std::vector<double> wm(lm.vocab_size(), 0.0), base(lm.vocab_size(), 0.0);
  for (std::uint64_t s = 0; s < 100; ++s) {
    for (TokenId t : generate_watermarked(lm, GenerationConfig({}, 200, s), part).tokens) wm[t] += 1;
    for (TokenId t : sample_sequence(lm, GenerationConfig({}, 200, 1000 + s))) base[t] += 1;
  }
  EXPECT_GT(stats::chi_square_homogeneity(wm, base).p_value, 0.01);
}

TEST(Generate, PowerMonotoneInDelta) {
  const auto& lm = fixtures::small_lab().source;
  double last = 0.0;
  for (double delta : {0.0, 1.0, 2.0, 4.0, 8.0}) {
    const GreenPartition part(params(delta), lm.vocab_size());
    double total = 0.0;
    for (std::uint64_t s = 0; s < 40; ++s)
      total += green_fraction_of(generate_watermarked(lm, GenerationConfig({}, 200, s), part));
    EXPECT_GE(total / 40, last) << "delta " << delta;
    last = total / 40;
  }
}

TEST(CountGreen, ScoringWindow) {
  const auto p = params(2.0);
  const GreenPartition part(p, 50);
  const Tokens toks{3, 4, 5, 6};
  const auto c = count_green(toks, part);
  EXPECT_EQ(c.scored, 3u);
  std::size_t g = 0;
  for (std::size_t i = 1; i < toks.size(); ++i) g += part.is_green(toks[i - 1], toks[i]);
  EXPECT_EQ(c.green, g);
  const auto c2 = count_green(toks, p, 50);
  EXPECT_EQ(c2.green, c.green);
  EXPECT_EQ(c2.scored, c.scored);
  EXPECT_EQ(count_green(toks, part, TokenId{2}).scored, 4u);
}

TEST(CountGreen, TooShort) {
  const GreenPartition part(params(2.0), 50);
  try {
    count_green(Tokens{3}, part);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "too_short");
    EXPECT_STREQ(e.what(), "too short to score");
  }
  EXPECT_THROW(detect_watermark(Tokens{3}, params(2.0), 50), Error);
}

TEST(CountGreen, AggregateFractionTableOne) {
  const auto r = make_detection({11078, 19042}, 0.25, 4.0);
  EXPECT_DOUBLE_EQ(r.green_fraction, 11078.0 / 19042.0);
  EXPECT_NEAR(r.green_fraction, 0.58, 0.005);
}

TEST(ZScore, TableFourRows) {
  EXPECT_NEAR(z_score(37, 40, 0.25), 9.86, 0.005);
  EXPECT_NEAR(z_score(49, 115, 0.25), 4.36, 0.005);
  EXPECT_NEAR(static_cast<double>(37) / 40, 0.925, 1e-12);
  EXPECT_NEAR(static_cast<double>(49) / 115, 0.426, 5e-4);
  EXPECT_DOUBLE_EQ(z_score(25, 100, 0.25), 0.0);
  EXPECT_THROW(z_score(0, 0, 0.25), Error);
}

TEST(Detect, SyntheticNinetyTwoPercent) {
  const auto r = make_detection({37, 40}, 0.25, kDefaultZThreshold);
  EXPECT_TRUE(r.watermarked);
  EXPECT_NEAR(r.z, 9.86, 0.005);
  const auto j = to_json(r);
  EXPECT_EQ(j.at("verdict"), "watermarked");
  EXPECT_EQ(j.at("green_count"), 37);
  EXPECT_EQ(j.at("scored_count"), 40);
  EXPECT_EQ(j.at("threshold"), 4.0);
  EXPECT_EQ(to_json(make_detection({10, 40}, 0.25, 4.0)).at("verdict"), "not-watermarked");
}

TEST(Detect, NullFalsePositivesAndPower) {
  const auto& lm = fixtures::small_lab().source;
  const GreenPartition part(params(4.0), lm.vocab_size());
  int fp = 0, tp = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    fp += detect_watermark(sample_sequence(lm, GenerationConfig({}, 200, 500 + s)), part).watermarked;
    tp += detect_watermark(generate_watermarked(lm, GenerationConfig({}, 200, s), part).tokens, part).watermarked;
  }
  EXPECT_LE(fp, 1);
  EXPECT_GE(tp, 95);
}

TEST(Detect, NullCalibrationChiSquare) {
  const auto& lm = fixtures::small_lab().source;
  const GreenPartition part(params(2.0), lm.vocab_size());
  double green = 0, scored = 0;
  for (std::uint64_t s = 0; s < 60; ++s) {
    const auto c = count_green(sample_sequence(lm, GenerationConfig({}, 200, 9000 + s)), part);
    green += static_cast<double>(c.green);
    scored += static_cast<double>(c.scored);
  }
  ASSERT_GE(scored, 1e4);
  const std::vector<double> obs{green, scored - green}, exp{0.25 * scored, 0.75 * scored};
  EXPECT_GT(stats::chi_square_gof(obs, exp).p_value, 0.01);
  EXPECT_GT(stats::binomial_two_sided_p(static_cast<std::uint64_t>(green), static_cast<std::uint64_t>(scored), 0.25),
            0.01);
}

TEST(Params, JsonRoundTrip) {
  const auto p = params(3.5, 0xdeadbeefULL);
  const auto back = params_from_json(to_json(p));
  EXPECT_EQ(back.key, p.key);
  EXPECT_EQ(back.gamma, p.gamma);
  EXPECT_EQ(back.delta, p.delta);
  EXPECT_EQ(to_json(p).at("key_hex"), "00000000deadbeef");
  EXPECT_THROW(params_from_json(nlohmann::json{{"key_hex", "zz"}, {"gamma", 0.25}, {"delta", 1}}), Error);
  EXPECT_THROW(params_from_json(nlohmann::json{{"gamma", 0.25}}), Error);
}
