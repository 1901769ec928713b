#include <gtest/gtest.h>

#include "disaad/lora.hpp"
#include "disaad/tinylm.hpp"
#include "support.hpp"

using namespace disaad;

TEST(Lora, FreshAdapterLeavesLayerUnchanged) {
  Rng rng(1);
  const Matrix w0 = Matrix::random_normal(6, 5, 1.0, rng);
  const auto a = make_lora(6, 5, 2, 2.0, rng);
  EXPECT_EQ(apply_lora(w0, a), w0);
  const auto m = testsupport::random_lm(7, 2);
  const auto ad = make_adapters(m, 2, 2.0, rng);
  EXPECT_EQ(next_token_logits(LmView(m, &ad), testsupport::seq({1, 2})).z,
            next_token_logits(m, testsupport::seq({1, 2})).z);
}

TEST(Lora, MergedWeightMatchesFactoredProduct) {
  Rng rng(3);
  const Matrix w0 = Matrix::random_normal(4, 3, 1.0, rng);
  LoraAdapter a{Matrix::random_normal(4, 1, 1.0, rng), Matrix::random_normal(1, 3, 1.0, rng), 2.0};
  const Matrix w = apply_lora(w0, a);
  const Vec x = {0.3, -1.0, 2.0};
  const Vec y1 = matvec(w, x);
  const Vec y2 = adapted_matvec(w0, &a, x);
  for (std::size_t i = 0; i < 4; ++i) {
    double expect = 0.0;
    for (std::size_t j = 0; j < 3; ++j) expect += (w0(i, j) + 2.0 * a.B(i, 0) * a.A(0, j)) * x[j];
    EXPECT_NEAR(y1[i], expect, 1e-12);
    EXPECT_NEAR(y2[i], expect, 1e-12);
  }
}

TEST(Lora, RejectsBadShapes) {
  Rng rng(4);
  EXPECT_THROW(make_lora(4, 3, 3, 1.0, rng), InputError);  // rank >= min(d, k)
  EXPECT_THROW(make_lora(4, 3, 0, 1.0, rng), InputError);
  LoraAdapter a{Matrix(4, 1), Matrix(1, 3), 1.0};
  EXPECT_THROW(apply_lora(Matrix(3, 3), a), InputError);
  a.scale = 0.0;
  EXPECT_THROW(a.validate(), InputError);
}

TEST(Lipschitz, NoViolationsOnEveryAdaptedLayer) {
  const auto m = testsupport::random_lm(9, 5, 4, 3, 8);
  const auto ad = testsupport::random_adapters(m, 2, 2.0, 6);
  const auto reps = check_lipschitz(m, ad, 1000, 7);
  ASSERT_EQ(reps.size(), 2u);
  for (const auto& r : reps) {
    EXPECT_EQ(r.trials, 1000u);
    EXPECT_EQ(r.violations, 0u) << r.layer;
    EXPECT_LE(r.max_ratio, r.bound + kLipschitzSlack);
  }
}

TEST(Lipschitz, BoundIsTightForRankOneAlignedCase) {
  // W0 = 0, B A = e1 e1^T: the bound and the achievable ratio are both scale.
  Matrix w0(3, 3);
  LoraAdapter a{Matrix(3, 1), Matrix(1, 3), 1.5};
  a.B(0, 0) = 1.0;
  a.A(0, 0) = 1.0;
  EXPECT_NEAR(lipschitz_bound(w0, a), 1.5, 1e-9);
  const std::vector<std::pair<Vec, Vec>> pairs = {{{1, 0, 0}, {0, 0, 0}}, {{1, 1, 1}, {1, 1, 1}}};
  const auto r = check_lipschitz_pairs(w0, a, pairs);
  EXPECT_NEAR(r.max_ratio, 1.5, 1e-12);
  EXPECT_EQ(r.skipped, 1u);
  EXPECT_EQ(r.violations, 0u);
}

TEST(SpectralNorm, DiagonalMatrix) {
  Matrix m(3, 3);
  m(0, 0) = 2.0;
  m(1, 1) = -5.0;
  m(2, 2) = 1.0;
  EXPECT_NEAR(spectral_norm(m), 5.0, 1e-9);
}
