#include <gtest/gtest.h>

#include <boost/math/special_functions/digamma.hpp>
#include <cmath>
#include <numbers>

#include "disaad/evidence.hpp"
#include "disaad/special.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace disaad;

TEST(Digamma, ClosedFormsAndRecurrence) {
  EXPECT_NEAR(digamma(1.0), -oracle::kEulerGamma, 1e-12);
  EXPECT_NEAR(digamma(0.5), -oracle::kEulerGamma - 2.0 * std::numbers::ln2, 1e-12);
  EXPECT_NEAR(digamma(2.0), 1.0 - oracle::kEulerGamma, 1e-12);
  EXPECT_NEAR(digamma(10.0), oracle::digamma_int(10), 1e-12);
  EXPECT_NEAR(digamma(50.0), oracle::digamma_int(50), 1e-12);
  EXPECT_NEAR(digamma(7.5), oracle::digamma_half(7), 1e-12);
  for (int i = 0; i < 1000; ++i) {
    const double x = 0.01 + i * 0.05;
    EXPECT_NEAR(digamma(x + 1.0) - digamma(x), 1.0 / x, 1e-10) << x;
  }
}

TEST(Digamma, AgreesWithBoost) {
  for (double x : {1e-3, 0.1, 0.7, 1.3, 3.9, 5.99, 6.0, 6.01, 25.0, 1e3, 1e6})
    EXPECT_NEAR(digamma(x), boost::math::digamma(x), 1e-11 * std::max(1.0, std::abs(boost::math::digamma(x)))) << x;
}

TEST(Digamma, RejectsNonPositive) {
  EXPECT_THROW(digamma(0.0), DomainError);
  EXPECT_THROW(digamma(-1.5), DomainError);
  EXPECT_THROW(digamma(std::nan("")), DomainError);
}

TEST(Evidence, FormulaValues) {
  const auto ev11 = make_evidence({1, 1});
  EXPECT_NEAR(aleatoric(ev11), 0.5, 1e-12);
  EXPECT_NEAR(epistemic(ev11), 0.5, 1e-12);
  EXPECT_NEAR(token_reliability(ev11).r, -0.25, 1e-12);
  EXPECT_NEAR(aleatoric(make_evidence({2, 0})), 0.0, 1e-15);
  EXPECT_NEAR(epistemic(make_evidence({0, 0, 0, 0})), 1.0, 1e-15);
  EXPECT_NEAR(aleatoric(make_evidence({0, 0, 0, 0})), std::log(4.0), 1e-15);
}

TEST(Evidence, MatchesIntegerOracle) {
  const std::vector<std::vector<int>> cases = {{3, 1}, {5, 2, 1}, {1, 1, 1, 1}, {7, 0, 2}, {10, 10}};
  for (const auto& c : cases) {
    std::vector<double> a(c.begin(), c.end());
    const auto ev = make_evidence(a);
    EXPECT_NEAR(aleatoric(ev), oracle::au_int(c), 1e-12);
    EXPECT_NEAR(epistemic(ev), oracle::eu_int(c), 1e-15);
  }
}

TEST(Evidence, TopKReluExtraction) {
  const std::vector<double> z = {-1.0, 3.0, 0.5, 2.0, -4.0};
  const auto ev = evidence_from_logits(z, 3);
  ASSERT_EQ(ev.k(), 3u);
  EXPECT_EQ(ev.alphas, (std::vector<double>{3.0, 2.0, 0.5}));
  EXPECT_EQ(ev.token_ids, (std::vector<TokenId>{1, 3, 2}));
  EXPECT_NEAR(ev.alpha0, 5.5, 1e-12);
  const auto neg = evidence_from_logits(std::vector<double>{-1, -2, -3}, 2);
  EXPECT_EQ(neg.alpha0, 0.0);
  EXPECT_NEAR(epistemic(neg), 1.0, 1e-15);
  EXPECT_THROW(evidence_from_logits(z, 0), InputError);
  EXPECT_THROW(evidence_from_logits(z, 6), InputError);
}

TEST(Evidence, SinglePositiveAlphaIsFullyReliable) {
  const auto ev = evidence_from_logits(std::vector<double>{9.0, -1.0, -2.0, -3.0}, 4);
  const auto u = token_reliability(ev);
  EXPECT_EQ(u.au, 0.0);
  EXPECT_EQ(u.r, 0.0);
}

TEST(Evidence, RangeProperties) {
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> a(5);
    for (double& v : a) v = rng.uniform() < 0.3 ? 0.0 : rng.uniform(0.0, 20.0);
    const auto ev = make_evidence(a);
    const double au = aleatoric(ev), eu = epistemic(ev);
    EXPECT_GE(au, -1e-12);
    EXPECT_LE(au, std::log(5.0) + 1e-12);
    EXPECT_GT(eu, 0.0);
    EXPECT_LE(eu, 1.0);
    EXPECT_LE(token_reliability(ev).r, 0.0);
  }
}

TEST(ResponseReliability, MeanOfLeastReliableFifth) {
  std::vector<UncertaintyEstimate> toks;
  const double rs[] = {-0.1, -0.9, -0.3, -0.5, -0.2, -0.05, -0.7, 0.0, -0.4, -0.6};
  for (std::size_t i = 0; i < 10; ++i) toks.push_back({0, 0, rs[i], i});
  const auto rr = response_reliability(toks);
  EXPECT_EQ(rr.k_star, 2u);  // round(0.2 * 10)
  EXPECT_NEAR(rr.r_response, (-0.9 - 0.7) / 2.0, 1e-15);
  EXPECT_EQ(rr.positions, (std::vector<std::size_t>{1, 6}));
  // Short responses still use one token.
  const auto one = response_reliability(std::span(toks).first(2));
  EXPECT_EQ(one.k_star, 1u);
  EXPECT_NEAR(one.r_response, -0.9, 1e-15);
  EXPECT_THROW(response_reliability(std::vector<UncertaintyEstimate>{}), InputError);
}

TEST(ScoreResponse, EmptyFlaggedAndOneHotIsZero) {
  const auto m = testsupport::random_lm(6, 8);
  EXPECT_TRUE(score_response(m, testsupport::seq({1}), TokenSeq{}).empty);
  // Every position puts all positive evidence on one token: R_response = 0.
  auto hot = zero_lm({6, 2, 2, 3});
  hot.b_out = {-1, 8, -1, -1, -1, -1};
  const auto s = score_response(hot, testsupport::seq({1, 2}), testsupport::seq({1, 1, 1}), 5);
  ASSERT_FALSE(s.empty);
  EXPECT_EQ(s.reliability.r_response, 0.0);
  EXPECT_EQ(s.tokens.size(), 3u);
}

TEST(ScoreResponse, TeacherForcesTheGivenTokens) {
  const auto m = testsupport::random_lm(6, 9);
  const auto prompt = testsupport::seq({2, 3});
  const auto resp = testsupport::seq({4, 1});
  const auto s = score_response(m, prompt, resp, 4);
  const auto z1 = next_token_logits(m, testsupport::seq({2, 3, 4})).z;
  const auto ev = evidence_from_logits(z1, 4);
  EXPECT_EQ(s.evidence[1].alphas, ev.alphas);
}
