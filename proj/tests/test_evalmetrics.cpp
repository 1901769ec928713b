#include <gtest/gtest.h>

#include "disaad/evalmetrics.hpp"
#include "oracles.hpp"

using namespace disaad;

namespace {

std::vector<LabeledScore> make(std::vector<double> s, std::vector<int> l) {
  std::vector<LabeledScore> out;
  for (std::size_t i = 0; i < s.size(); ++i) out.push_back({s[i], l[i]});
  return out;
}

// Random instance with at least one of each label; scores on a coarse grid so ties occur.
std::vector<LabeledScore> random_instance(Rng& rng) {
  for (;;) {
    const std::size_t n = 2 + rng.below(11);
    std::vector<LabeledScore> v;
    int pos = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const int l = static_cast<int>(rng.below(2));
      pos += l;
      v.push_back({static_cast<double>(rng.below(6)) / 5.0, l});
    }
    if (pos > 0 && pos < static_cast<int>(n)) return v;
  }
}

}  // namespace

TEST(Auroc, Examples) {
  EXPECT_EQ(auroc(make({0.9, 0.8, 0.1}, {1, 1, 0})), 1.0);
  EXPECT_EQ(auroc(make({0.5, 0.5}, {1, 0})), 0.5);
  EXPECT_EQ(auroc(make({0.2, 0.8, 0.6, 0.4}, {1, 0, 1, 0})), 0.25);
  EXPECT_THROW(auroc(make({0.1, 0.2}, {1, 1})), UndefinedMetricError);
  EXPECT_THROW(auroc(make({0.1, 0.2}, {1, 2})), InputError);
}

TEST(Auroc, ExactlyEqualsPairwiseCount) {
  Rng rng(11);
  for (int i = 0; i < 1000; ++i) {
    const auto v = random_instance(rng);
    EXPECT_EQ(auroc(v), oracle::auroc_pairs(v));
  }
}

TEST(Auroc, InvariantUnderMonotoneMaps) {
  Rng rng(12);
  for (int i = 0; i < 200; ++i) {
    auto v = random_instance(rng);
    const double a = auroc(v);
    for (auto& x : v) x.score = std::exp(3.0 * x.score) - 7.0;
    EXPECT_EQ(auroc(v), a);
  }
}

TEST(Auroc, FlippedLabelsComplementWithoutTies) {
  Rng rng(13);
  for (int i = 0; i < 200; ++i) {
    auto v = random_instance(rng);
    for (std::size_t k = 0; k < v.size(); ++k) v[k].score = rng.uniform() + static_cast<double>(k);
    auto f = v;
    for (auto& x : f) x.label = 1 - x.label;
    EXPECT_NEAR(auroc(v) + auroc(f), 1.0, 1e-15);
  }
}

TEST(Aupr, Examples) {
  EXPECT_EQ(aupr(make({0.3, 0.2, 0.1}, {1, 1, 1})), 1.0);
  EXPECT_EQ(aupr(make({0.9, 0.1}, {1, 0})), 1.0);
  EXPECT_NEAR(aupr(make({0.9, 0.8, 0.7}, {0, 1, 1})), oracle::aupr_thresholds(make({0.9, 0.8, 0.7}, {0, 1, 1})), 1e-15);
  // by hand: recall 0.5 at precision 1/2, recall 1 at precision 2/3
  EXPECT_NEAR(aupr(make({0.9, 0.8, 0.7}, {0, 1, 1})), 0.5 * 0.5 + 0.5 * (2.0 / 3.0), 1e-15);
  EXPECT_THROW(aupr(make({0.1}, {0})), UndefinedMetricError);
}

TEST(Aupr, MatchesThresholdEnumeration) {
  Rng rng(14);
  for (int i = 0; i < 1000; ++i) {
    const auto v = random_instance(rng);
    EXPECT_NEAR(aupr(v), oracle::aupr_thresholds(v), 1e-12);
  }
}

TEST(Ece, Examples) {
  EXPECT_EQ(ece(std::vector<double>{1.0, 1.0}, std::vector<int>{1, 1}).ece, 0.0);
  EXPECT_NEAR(ece(std::vector<double>{0.9, 0.9}, std::vector<int>{0, 0}).ece, 0.9, 1e-15);
  EXPECT_NEAR(ece(std::vector<double>(5, 0.8), std::vector<int>{1, 1, 1, 1, 0}).ece, 0.0, 1e-15);
  EXPECT_THROW(ece(std::vector<double>{1.2}, std::vector<int>{1}), InputError);
  EXPECT_THROW(ece(std::vector<double>{0.5}, std::vector<int>{1}, 0), InputError);
}

TEST(Ece, ReportInvariants) {
  Rng rng(15);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> c(30);
    std::vector<int> l(30);
    for (std::size_t k = 0; k < 30; ++k) {
      c[k] = rng.uniform();
      l[k] = static_cast<int>(rng.below(2));
    }
    const auto rep = ece(c, l, 7);
    double w = 0.0, e = 0.0;
    for (const auto& b : rep.per_bin) {
      w += b.weight;
      e += b.weight * std::abs(b.accuracy - b.confidence);
    }
    EXPECT_NEAR(w, 1.0, 1e-12);
    EXPECT_NEAR(rep.ece, e, 1e-12);
  }
}

TEST(Ece, ZeroWhenEveryBinCalibrated) {
  // three occupied bins, each with accuracy equal to its confidence
  std::vector<double> c;
  std::vector<int> l;
  for (int k = 0; k < 20; ++k) {
    c.push_back(0.15);
    l.push_back(k < 3 ? 1 : 0);
  }
  for (int k = 0; k < 20; ++k) {
    c.push_back(0.55);
    l.push_back(k < 11 ? 1 : 0);
  }
  for (int k = 0; k < 4; ++k) {
    c.push_back(0.75);
    l.push_back(k < 3 ? 1 : 0);
  }
  EXPECT_NEAR(ece(c, l).ece, 0.0, 1e-12);
}

TEST(ReliabilityToConfidence, AffineRescale) {
  EXPECT_EQ(reliability_to_confidence(std::vector<double>{-1, 0}), (std::vector<double>{0, 1}));
  EXPECT_EQ(reliability_to_confidence(std::vector<double>{-3, -3}), (std::vector<double>{0.5, 0.5}));
  EXPECT_EQ(reliability_to_confidence(std::vector<double>{-4, -2, 0}), (std::vector<double>{0, 0.5, 1}));
  EXPECT_THROW(reliability_to_confidence(std::vector<double>{}), InputError);
}

TEST(LabelCorrectness, ContainmentAfterNormalization) {
  using W = std::vector<std::string>;
  EXPECT_EQ(label_correctness(W{"red"}, {W{"red"}}), 1);
  EXPECT_EQ(label_correctness(W{"blue", "."}, {W{"red"}}), 0);
  EXPECT_EQ(label_correctness(W{"red", "."}, {W{"red"}}), 1);
  EXPECT_EQ(label_correctness(W{"the", "Red", "one"}, {W{"red"}}), 1);
  EXPECT_EQ(label_correctness(W{}, {W{"red"}}), 0);
  EXPECT_THROW(label_correctness(W{"red"}, {}), InputError);
}
