#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "disaad/advtrain.hpp"
#include "support.hpp"

using namespace disaad;
using testsupport::seq;

namespace {

constexpr std::size_t kV = 8;

std::vector<DistillSample> toy_dataset(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<DistillSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    DistillSample s;
    s.id = "s" + std::to_string(i);
    s.prompt = seq({static_cast<TokenId>(1 + rng.below(kV - 1)), static_cast<TokenId>(1 + rng.below(kV - 1))},
                   SeqRole::prompt);
    for (int r = 0; r < 2; ++r) {
      TokenSeq resp;
      for (int t = 0; t < 3; ++t) resp.ids.push_back(static_cast<TokenId>(1 + rng.below(kV - 1)));
      s.responses.push_back(resp);
    }
    out.push_back(s);
  }
  return out;
}

Discriminator random_disc(std::uint64_t seed, double head_sd = 0.7) {
  Rng rng(seed);
  auto d = init_discriminator(kV, 3, 4, rng, 1.0);
  for (double& v : d.w2) v = rng.normal(0.0, head_sd);
  d.b2[0] = rng.normal(0.0, head_sd);
  for (double& v : d.b1) v = rng.normal(0.0, 0.3);
  return d;
}

AdvConfig small_config() {
  AdvConfig c;
  c.steps = 6;
  c.batch_size = 3;
  c.lora_rank = 2;
  c.max_rollout = 4;
  c.disc_embed = 3;
  c.disc_hidden = 4;
  c.val_fraction = 0.25;
  c.proxy_lr = 0.1;
  c.disc_lr = 0.05;
  return c;
}

}  // namespace

TEST(TaskLoss, UniformModelGivesLogV) {
  const auto m = zero_lm({kV, 4, 3, 6});
  EXPECT_NEAR(task_loss(LmView(m), toy_dataset(3, 1)), std::log(8.0), 1e-12);
}

TEST(TaskLoss, BiasOnlyModelByHand) {
  auto m = zero_lm({kV, 4, 3, 6});
  const double c = 3.0;
  m.b_out[3] = c;
  DistillSample s;
  s.prompt = seq({1}, SeqRole::prompt);
  s.responses = {seq({3})};
  // targets: 3 then <eos>
  const double z = std::exp(c) + 7.0;
  const double expect = 0.5 * (-std::log(std::exp(c) / z) - std::log(1.0 / z));
  EXPECT_NEAR(task_loss(LmView(m), std::vector<DistillSample>{s}), expect, 1e-12);
}

TEST(TaskLoss, RejectsEmptyBatches) {
  const auto m = zero_lm({kV, 4, 3, 6});
  EXPECT_THROW(task_loss(LmView(m), std::vector<DistillSample>{}), InputError);
  DistillSample s;
  s.prompt = seq({1}, SeqRole::prompt);
  s.responses = {TokenSeq{}};
  EXPECT_THROW(task_loss(LmView(m), std::vector<DistillSample>{s}), InputError);
}

TEST(TaskLoss, AdapterGradientMatchesFiniteDifferences) {
  const auto base = testsupport::random_lm(kV, 2);
  auto ad = testsupport::random_adapters(base, 2, 1.5, 3);
  const auto data = toy_dataset(3, 4);
  const LogitAnchor anchor{2.0, 0.3};
  for (const LogitAnchor* a : {static_cast<const LogitAnchor*>(nullptr), &anchor}) {
    LmAdapters g = zero_like(ad);
    task_loss(LmView(base, &ad), data, &g, a);
    auto loss = [&] {
      double pen = 0.0;
      const double t = task_loss(LmView(base, &ad), data, nullptr, a, &pen);
      return t + pen;
    };
    EXPECT_LT(testsupport::max_fd_error(ad.tensors(), g.tensors(), loss), 1e-6);
  }
}

TEST(RegLoss, AdapterGradientMatchesFiniteDifferences) {
  const auto base = testsupport::random_lm(kV, 5);
  auto ad = testsupport::random_adapters(base, 2, 1.5, 6);
  const auto d = random_disc(7);
  std::vector<TokenSeq> prompts = {seq({1, 2}, SeqRole::prompt), seq({5}, SeqRole::prompt)};
  LmAdapters g = zero_like(ad);
  reg_loss(LmView(base, &ad), d, prompts, 4, &g);
  auto loss = [&] { return reg_loss(LmView(base, &ad), d, prompts, 4); };
  EXPECT_LT(testsupport::max_fd_error(ad.tensors(), g.tensors(), loss), 1e-6);
}

TEST(DiscLoss, GradientMatchesFiniteDifferences) {
  const auto base = testsupport::random_lm(kV, 8);
  auto d = random_disc(9);
  const auto data = toy_dataset(3, 10);
  const auto real = real_pairs(data);
  std::vector<SoftRollout> fake;
  for (const auto& s : data) fake.push_back(soft_rollout(LmView(base), s.prompt, 4));
  Discriminator g = zero_like(d);
  disc_loss(d, real, fake, &g);
  auto loss = [&] { return disc_loss(d, real, fake); };
  EXPECT_LT(testsupport::max_fd_error(d.tensors(), g.tensors(), loss), 1e-6);
}

TEST(DiscScore, HeadGradientMatchesFiniteDifferences) {
  auto d = random_disc(11);
  const auto prompt = seq({2, 3}, SeqRole::prompt);
  const auto resp = seq({4, 4, 1});
  const auto c = disc_head(d, pool_hard(d, prompt, resp));
  Discriminator g = zero_like(d);
  const Vec dp = disc_head_backward(d, c, 1.0, &g);
  pool_hard_backward(dp, prompt, resp, g);
  auto logit = [&] { return disc_head(d, pool_hard(d, prompt, resp)).logit; };
  EXPECT_LT(testsupport::max_fd_error(d.tensors(), g.tensors(), logit), 1e-6);
}

TEST(Discriminator, ZeroHeadValues) {
  Rng rng(1);
  const auto d = init_discriminator(kV, 3, 4, rng);
  const auto base = testsupport::random_lm(kV, 12);
  const auto data = toy_dataset(2, 13);
  std::vector<SoftRollout> fake;
  for (const auto& s : data) fake.push_back(soft_rollout(LmView(base), s.prompt, 4));
  EXPECT_EQ(disc_score(d, data[0].prompt, data[0].responses[0]), 0.5);
  EXPECT_NEAR(reg_loss(LmView(base), d, fake), std::numbers::ln2, 1e-15);
  EXPECT_NEAR(disc_loss(d, real_pairs(data), fake), 2.0 * std::numbers::ln2, 1e-15);
}

TEST(Discriminator, ClampedLogitStopsGradient) {
  auto d = random_disc(14);
  d.b2[0] = 100.0;
  const auto c = disc_head(d, pool_hard(d, seq({1}), seq({2})));
  EXPECT_TRUE(c.clamped);
  EXPECT_EQ(c.logit, kDiscLogitClamp);
  Discriminator g = zero_like(d);
  disc_head_backward(d, c, 1.0, &g);
  EXPECT_EQ(g, zero_like(d));
}

// Swapping real and fake roles mirrors the loss: L(d; real, fake) with the head negated.
TEST(DiscLoss, SymmetricUnderHeadNegation) {
  auto d = random_disc(15);
  const auto prompt = seq({1, 2}, SeqRole::prompt);
  const auto a = seq({3, 4}), b = seq({5, 6, 7});
  auto one_hot = [&](const TokenSeq& s) {
    SoftRollout r;
    r.prompt = prompt;
    r.tokens = s;
    for (TokenId t : s.ids) {
      Vec p(kV, 0.0);
      p[t] = 1.0;
      r.probs.push_back(p);
    }
    return r;
  };
  const std::vector<RealPair> ra = {{prompt, a}}, rb = {{prompt, b}};
  const std::vector<SoftRollout> fa = {one_hot(a)}, fb = {one_hot(b)};
  auto neg = d;
  for (double& v : neg.w2) v = -v;
  neg.b2[0] = -neg.b2[0];
  EXPECT_NEAR(disc_loss(d, ra, fb), disc_loss(neg, rb, fa), 1e-14);
}

TEST(PredictionGap, IdenticalSamplesGiveZero) {
  const auto d = random_disc(16);
  const auto prompt = seq({1, 2}, SeqRole::prompt);
  const auto resp = seq({3, 6});
  SoftRollout r;
  r.prompt = prompt;
  r.tokens = resp;
  for (TokenId t : resp.ids) {
    Vec p(kV, 0.0);
    p[t] = 1.0;
    r.probs.push_back(p);
  }
  EXPECT_NEAR(prediction_gap(d, std::vector<SoftRollout>{r}, std::vector<RealPair>{{prompt, resp}}), 0.0, 1e-15);
}

TEST(Isolation, RegLossTouchesOnlyAdapters) {
  const auto base = testsupport::random_lm(kV, 17);
  const auto base_copy = base;
  auto ad = testsupport::random_adapters(base, 2, 1.0, 18);
  const auto d = random_disc(19);
  const auto d_copy = d;
  std::vector<TokenSeq> prompts = {seq({1}, SeqRole::prompt)};
  LmAdapters g = zero_like(ad);
  reg_loss(LmView(base, &ad), d, prompts, 4, &g);
  EXPECT_EQ(d, d_copy);
  EXPECT_EQ(base, base_copy);
}

TEST(Isolation, TrainingLeavesBaseUntouched) {
  const auto base = testsupport::random_lm(kV, 20);
  const auto copy = base;
  run_adversarial(toy_dataset(8, 21), base, small_config(), 3);
  EXPECT_EQ(base, copy);
}

TEST(Lambda, ZeroLambdaLogsZeroRegAndTaskOnlyTotal) {
  const auto base = testsupport::random_lm(kV, 22);
  auto cfg = small_config();
  cfg.lambda = 0.0;
  const auto res = run_adversarial(toy_dataset(8, 23), base, cfg, 4);
  for (std::size_t i = 1; i < res.state.log.size(); ++i) {
    EXPECT_EQ(res.state.log[i].reg, 0.0);
    EXPECT_EQ(res.state.log[i].total, res.state.log[i].task);
  }
}

TEST(Lambda, TotalIsTaskPlusLambdaReg) {
  const auto base = testsupport::random_lm(kV, 24);
  auto cfg = small_config();
  cfg.lambda = 0.37;
  const auto res = run_adversarial(toy_dataset(8, 25), base, cfg, 5);
  for (const auto& r : res.state.log) EXPECT_NEAR(r.total, r.task + 0.37 * r.reg, 1e-14);
  EXPECT_EQ(LossBreakdown::make(2.0, 3.0, 0.5).total, 3.5);
}

TEST(Training, DeterministicForFixedSeed) {
  const auto base = testsupport::random_lm(kV, 26);
  const auto data = toy_dataset(8, 27);
  const auto a = run_adversarial(data, base, small_config(), 6);
  const auto b = run_adversarial(data, base, small_config(), 6);
  EXPECT_EQ(a.best, b.best);
  EXPECT_EQ(a.best_step, b.best_step);
  EXPECT_EQ(a.state.disc, b.state.disc);
  ASSERT_EQ(a.state.log.size(), b.state.log.size());
  for (std::size_t i = 0; i < a.state.log.size(); ++i) EXPECT_EQ(a.state.log[i].total, b.state.log[i].total);
  const auto c = run_adversarial(data, base, small_config(), 7);
  EXPECT_NE(a.state.adapters, c.state.adapters);
}

TEST(Training, TwoDiscUpdatesPerProxyUpdate) {
  const auto base = testsupport::random_lm(kV, 28);
  auto cfg = small_config();
  cfg.disc_warmup = 3;
  cfg.steps = 5;
  const auto res = run_adversarial(toy_dataset(8, 29), base, cfg, 8);
  ASSERT_EQ(res.state.log.size(), 6u);
  EXPECT_EQ(res.state.log[0].disc_updates, 3u);
  for (std::size_t k = 1; k < 6; ++k) {
    EXPECT_EQ(res.state.log[k].disc_updates, 3u + 2u * k);
    EXPECT_EQ(res.state.log[k].proxy_updates, k);
  }
  EXPECT_EQ(res.state.gap_history.size(), 6u);
  EXPECT_EQ(res.train_size + res.val_size, 8u);
}

TEST(Training, BestCheckpointMinimisesValPlusGap) {
  const auto base = testsupport::random_lm(kV, 30);
  const auto res = run_adversarial(toy_dataset(8, 31), base, small_config(), 9);
  double best = 1e300;
  std::size_t step = 0;
  for (const auto& s : res.state.snapshots)
    if (s.val_task + s.gap < best) {
      best = s.val_task + s.gap;
      step = s.step;
    }
  EXPECT_EQ(res.best_step, step);
  EXPECT_EQ(res.best_criterion, best);
}

TEST(Training, DivergenceGuardThrowsWithLogTail) {
  const auto base = testsupport::random_lm(kV, 32);
  auto cfg = small_config();
  cfg.divergence_factor = 1e-3;
  try {
    run_adversarial(toy_dataset(8, 33), base, cfg, 10);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("log tail"), std::string::npos);
  }
}

TEST(Training, RejectsBadConfig) {
  const auto base = testsupport::random_lm(kV, 34);
  auto cfg = small_config();
  cfg.lambda = -1.0;
  EXPECT_THROW(run_adversarial(toy_dataset(8, 35), base, cfg, 1), InputError);
  EXPECT_THROW(run_adversarial(toy_dataset(1, 35), base, small_config(), 1), InputError);
}
