#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "disaad/common.hpp"
#include "disaad/distillset.hpp"
#include "disaad/matrix.hpp"
#include "disaad/tinylm.hpp"

// Adversarial distillation of a LoRA-adapted proxy. The proxy minimises
// token-level NLL on target responses plus lambda times a discriminator
// penalty on its own (soft) greedy generations; the discriminator learns to
// tell target responses from proxy ones.
namespace disaad {

inline constexpr double kDiscLogitClamp = 30.0;

// Mean-pooled embedding of (prompt ++ response) -> tanh layer -> linear head.
struct Discriminator {
  Matrix embedding;  // |V| x e
  Matrix w1;         // g x e
  Vec b1;            // g
  Vec w2;            // g
  Vec b2;            // 1

  std::size_t vocab_size() const { return embedding.rows(); }
  std::size_t embed_dim() const { return embedding.cols(); }
  std::size_t hidden() const { return w1.rows(); }

  std::vector<std::span<double>> tensors() { return {embedding.data(), w1.data(), b1, w2, b2}; }
  std::vector<std::span<const double>> tensors() const { return {embedding.data(), w1.data(), b1, w2, b2}; }

  friend bool operator==(const Discriminator&, const Discriminator&) = default;
};

inline Discriminator zero_discriminator(std::size_t vocab, std::size_t embed, std::size_t hidden) {
  return {Matrix(vocab, embed), Matrix(hidden, embed), Vec(hidden, 0.0), Vec(hidden, 0.0), Vec(1, 0.0)};
}

inline Discriminator zero_like(const Discriminator& d) {
  return zero_discriminator(d.vocab_size(), d.embed_dim(), d.hidden());
}

// Head starts at zero, so an untrained discriminator scores everything 0.5.
inline Discriminator init_discriminator(std::size_t vocab, std::size_t embed, std::size_t hidden, Rng& rng,
                                        double embed_sd = 1.0) {
  Discriminator d = zero_discriminator(vocab, embed, hidden);
  d.embedding = Matrix::random_normal(vocab, embed, embed_sd, rng);
  d.w1 = Matrix::random_normal(hidden, embed, 1.0 / std::sqrt(static_cast<double>(embed)), rng);
  return d;
}

// Greedy proxy continuation with the full next-token distribution kept at
// every emitted position. `probs[t]` is what the discriminator sees in place
// of a one-hot token; `caches[t]` allows back-propagation into the proxy.
struct SoftRollout {
  TokenSeq prompt;
  TokenSeq tokens;
  std::vector<Vec> probs;
  std::vector<StepCache> caches;
};

inline SoftRollout soft_rollout(LmView proxy, const TokenSeq& prompt, std::size_t max_len) {
  SoftRollout r;
  r.prompt = prompt;
  r.tokens.role = SeqRole::response;
  while (r.tokens.size() < max_len) {
    auto c = forward_window(proxy, context_window(prompt.ids, r.tokens.ids, proxy.context()));
    const std::size_t next = argmax(c.z);
    if (next == kEos) break;
    r.probs.push_back(softmax_probs(c.z));
    r.caches.push_back(std::move(c));
    r.tokens.ids.push_back(static_cast<TokenId>(next));
  }
  return r;
}

struct DiscCache {
  Vec pooled;
  Vec h;
  double logit = 0.0;  // after clamping
  bool clamped = false;
  double score = 0.5;
};

namespace adv_detail {

inline double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

// log(1 + e^x) without overflow
inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline void check_tokens(const Discriminator& d, std::span<const TokenId> ids) {
  for (TokenId t : ids)
    if (t >= d.vocab_size()) throw InputError("discriminator: token outside vocabulary");
}

inline std::size_t pooled_length(std::size_t prompt, std::size_t response) {
  const std::size_t n = prompt + response;
  if (n == 0) throw InputError("discriminator: empty (prompt, response) pair");
  return n;
}

}  // namespace adv_detail

inline Vec pool_hard(const Discriminator& d, const TokenSeq& prompt, const TokenSeq& response) {
  adv_detail::check_tokens(d, prompt.ids);
  adv_detail::check_tokens(d, response.ids);
  const double inv = 1.0 / static_cast<double>(adv_detail::pooled_length(prompt.size(), response.size()));
  Vec u(d.embed_dim(), 0.0);
  for (const auto* s : {&prompt, &response})
    for (TokenId t : s->ids) {
      const auto row = d.embedding.row(t);
      for (std::size_t k = 0; k < u.size(); ++k) u[k] += inv * row[k];
    }
  return u;
}

inline Vec pool_soft(const Discriminator& d, const TokenSeq& prompt, std::span<const Vec> probs) {
  adv_detail::check_tokens(d, prompt.ids);
  const double inv = 1.0 / static_cast<double>(adv_detail::pooled_length(prompt.size(), probs.size()));
  Vec u(d.embed_dim(), 0.0);
  for (TokenId t : prompt.ids) {
    const auto row = d.embedding.row(t);
    for (std::size_t k = 0; k < u.size(); ++k) u[k] += inv * row[k];
  }
  for (const Vec& p : probs) {
    if (p.size() != d.vocab_size()) throw InputError("discriminator: soft row has wrong width");
    for (std::size_t v = 0; v < p.size(); ++v) {
      if (p[v] == 0.0) continue;
      const auto row = d.embedding.row(v);
      for (std::size_t k = 0; k < u.size(); ++k) u[k] += inv * p[v] * row[k];
    }
  }
  return u;
}

inline DiscCache disc_head(const Discriminator& d, Vec pooled) {
  DiscCache c;
  c.pooled = std::move(pooled);
  c.h = matvec(d.w1, c.pooled);
  for (std::size_t j = 0; j < c.h.size(); ++j) c.h[j] = std::tanh(c.h[j] + d.b1[j]);
  const double raw = dot(d.w2, c.h) + d.b2[0];
  c.clamped = std::abs(raw) > kDiscLogitClamp;
  c.logit = std::clamp(raw, -kDiscLogitClamp, kDiscLogitClamp);
  c.score = adv_detail::sigmoid(c.logit);
  return c;
}

inline double disc_score(const Discriminator& d, const TokenSeq& prompt, const TokenSeq& response) {
  return disc_head(d, pool_hard(d, prompt, response)).score;
}

inline double disc_score(const Discriminator& d, const TokenSeq& prompt, std::span<const Vec> soft_response) {
  return disc_head(d, pool_soft(d, prompt, soft_response)).score;
}

inline double disc_score(const Discriminator& d, const SoftRollout& r) { return disc_score(d, r.prompt, r.probs); }

// dL/dlogit -> head gradients (into `grad` when non-null); returns dL/dpooled.
// The clamp has zero derivative outside +-30.
inline Vec disc_head_backward(const Discriminator& d, const DiscCache& c, double dlogit, Discriminator* grad) {
  if (c.clamped) dlogit = 0.0;
  Vec da(c.h.size());
  for (std::size_t j = 0; j < da.size(); ++j) da[j] = dlogit * d.w2[j] * (1.0 - c.h[j] * c.h[j]);
  if (grad) {
    for (std::size_t j = 0; j < da.size(); ++j) grad->w2[j] += dlogit * c.h[j];
    grad->b2[0] += dlogit;
    add_outer(grad->w1, 1.0, da, c.pooled);
    for (std::size_t j = 0; j < da.size(); ++j) grad->b1[j] += da[j];
  }
  return matvec_t(d.w1, da);
}

inline void pool_hard_backward(std::span<const double> dpooled, const TokenSeq& prompt, const TokenSeq& response,
                               Discriminator& grad) {
  const double inv = 1.0 / static_cast<double>(prompt.size() + response.size());
  for (const auto* s : {&prompt, &response})
    for (TokenId t : s->ids) {
      auto row = grad.embedding.row(t);
      for (std::size_t k = 0; k < dpooled.size(); ++k) row[k] += inv * dpooled[k];
    }
}

// Gradients of pool_soft w.r.t. the embedding table (`grad`) and the soft
// rows (`dprobs`); either may be null.
inline void pool_soft_backward(const Discriminator& d, std::span<const double> dpooled, const TokenSeq& prompt,
                               std::span<const Vec> probs, Discriminator* grad, std::vector<Vec>* dprobs) {
  const double inv = 1.0 / static_cast<double>(prompt.size() + probs.size());
  if (grad)
    for (TokenId t : prompt.ids) {
      auto row = grad->embedding.row(t);
      for (std::size_t k = 0; k < dpooled.size(); ++k) row[k] += inv * dpooled[k];
    }
  if (dprobs) dprobs->assign(probs.size(), Vec(d.vocab_size(), 0.0));
  for (std::size_t t = 0; t < probs.size(); ++t)
    for (std::size_t v = 0; v < d.vocab_size(); ++v) {
      if (grad && probs[t][v] != 0.0) {
        auto row = grad->embedding.row(v);
        for (std::size_t k = 0; k < dpooled.size(); ++k) row[k] += inv * probs[t][v] * dpooled[k];
      }
      if (dprobs) (*dprobs)[t][v] = inv * dot(d.embedding.row(v), dpooled);
    }
}

// ---------------------------------------------------------------- losses

// Penalty weight * (logsumexp(z) - target)^2 at each scored position, the
// same logit-scale pin used when pretraining (see TrainLmConfig).
struct LogitAnchor {
  double target = 5.0;
  double weight = 0.1;
};

// Mean teacher-forced NLL over response tokens (each response closed by
// <eos>); prompt positions carry no loss. Empty responses are skipped.
// With `anchor`, its mean penalty over the same positions is added to the
// gradient and reported through `anchor_value`, never into the return value.
inline double task_loss(LmView proxy, std::span<const DistillSample> batch, LmAdapters* grad = nullptr,
                        const LogitAnchor* anchor = nullptr, double* anchor_value = nullptr) {
  if (batch.empty()) throw InputError("task_loss: empty batch");
  std::size_t count = 0;
  for (const auto& s : batch)
    for (const auto& r : s.responses)
      if (!r.empty()) count += r.size() + 1;
  if (count == 0) throw InputError("task_loss: every response in the batch is empty");
  const double inv = 1.0 / static_cast<double>(count);
  double total = 0.0, pen = 0.0;
  for (const auto& s : batch)
    for (const auto& r : s.responses) {
      if (r.empty()) continue;
      for (std::size_t t = 0; t <= r.size(); ++t) {
        const auto c = forward_window(
            proxy, context_window(s.prompt.ids, std::span<const TokenId>(r.ids).first(t), proxy.context()));
        const TokenId target = t < r.size() ? r.ids[t] : kEos;
        const double lp = log_softmax_at(c.z, target);
        total -= lp;
        double pull = 1.0;
        if (anchor) {
          const double off = c.z[target] - lp - anchor->target;  // logsumexp(z) - target
          pen += anchor->weight * off * off;
          pull += 2.0 * anchor->weight * off;
        }
        if (grad) {
          Vec dz = softmax_probs(c.z);
          for (double& v : dz) v *= pull;
          dz[target] -= 1.0;
          for (double& v : dz) v *= inv;
          backward_window(proxy, c, dz, nullptr, grad);
        }
      }
    }
  if (anchor_value) *anchor_value = pen * inv;
  return total * inv;
}

// -mean log D over proxy generations. Gradients flow into the proxy adapters
// through each soft row (softmax of that step's logits); the greedy token
// choices themselves are treated as constants. The discriminator is read only.
inline double reg_loss(LmView proxy, const Discriminator& d, std::span<const SoftRollout> rollouts,
                       LmAdapters* grad = nullptr) {
  if (rollouts.empty()) throw InputError("reg_loss: no proxy generations");
  const double inv = 1.0 / static_cast<double>(rollouts.size());
  double total = 0.0;
  for (const auto& r : rollouts) {
    const DiscCache c = disc_head(d, pool_soft(d, r.prompt, r.probs));
    total += adv_detail::softplus(-c.logit);
    if (!grad || r.probs.empty()) continue;
    const double dlogit = inv * (c.score - 1.0);
    const Vec dpooled = disc_head_backward(d, c, dlogit, nullptr);
    std::vector<Vec> dprobs;
    pool_soft_backward(d, dpooled, r.prompt, r.probs, nullptr, &dprobs);
    for (std::size_t t = 0; t < r.probs.size(); ++t) {
      const Vec& p = r.probs[t];
      const double pg = dot(p, dprobs[t]);
      Vec dz(p.size());
      for (std::size_t v = 0; v < p.size(); ++v) dz[v] = p[v] * (dprobs[t][v] - pg);
      backward_window(proxy, r.caches[t], dz, nullptr, grad);
    }
  }
  return total * inv;
}

inline double reg_loss(LmView proxy, const Discriminator& d, std::span<const TokenSeq> prompts, std::size_t max_len,
                       LmAdapters* grad = nullptr) {
  std::vector<SoftRollout> rs;
  for (const auto& p : prompts) rs.push_back(soft_rollout(proxy, p, max_len));
  return reg_loss(proxy, d, rs, grad);
}

struct RealPair {
  TokenSeq prompt;
  TokenSeq response;
};

// -mean log D(real) - mean log(1 - D(fake)). Fakes are soft proxy
// generations, held fixed; only the discriminator receives gradients.
inline double disc_loss(const Discriminator& d, std::span<const RealPair> real, std::span<const SoftRollout> fake,
                        Discriminator* grad = nullptr) {
  if (real.empty() || fake.empty()) throw InputError("disc_loss: real and fake sets must be non-empty");
  double lr = 0.0, lf = 0.0;
  const double inv_r = 1.0 / static_cast<double>(real.size());
  const double inv_f = 1.0 / static_cast<double>(fake.size());
  for (const auto& p : real) {
    const DiscCache c = disc_head(d, pool_hard(d, p.prompt, p.response));
    lr += adv_detail::softplus(-c.logit);
    if (grad) {
      const Vec dp = disc_head_backward(d, c, inv_r * (c.score - 1.0), grad);
      pool_hard_backward(dp, p.prompt, p.response, *grad);
    }
  }
  for (const auto& f : fake) {
    const DiscCache c = disc_head(d, pool_soft(d, f.prompt, f.probs));
    lf += adv_detail::softplus(c.logit);
    if (grad) {
      const Vec dp = disc_head_backward(d, c, inv_f * c.score, grad);
      pool_soft_backward(d, dp, f.prompt, f.probs, grad, nullptr);
    }
  }
  return lr * inv_r + lf * inv_f;
}

// |mean D(target pairs) - mean D(proxy generations)|
inline double prediction_gap(const Discriminator& d, std::span<const SoftRollout> proxy,
                             std::span<const RealPair> target) {
  if (proxy.empty() || target.empty()) throw InputError("prediction_gap: both sample sets must be non-empty");
  double sp = 0.0, st = 0.0;
  for (const auto& r : proxy) sp += disc_score(d, r);
  for (const auto& p : target) st += disc_score(d, p.prompt, p.response);
  return std::abs(st / static_cast<double>(target.size()) - sp / static_cast<double>(proxy.size()));
}

struct LossBreakdown {
  double task = 0.0;
  double reg = 0.0;
  double lambda = 0.0;
  double total = 0.0;

  static LossBreakdown make(double task, double reg, double lambda) { return {task, reg, lambda, task + lambda * reg}; }
};

inline std::vector<RealPair> real_pairs(std::span<const DistillSample> samples) {
  std::vector<RealPair> out;
  for (const auto& s : samples)
    for (const auto& r : s.responses) out.push_back({s.prompt, r});
  return out;
}

// ---------------------------------------------------------------- training loop

struct AdvConfig {
  double lambda = 0.1;
  double proxy_lr = 1e-2;
  double disc_lr = 1e-3;
  std::size_t steps = 200;              // proxy updates
  std::size_t disc_updates_per_step = 2;
  std::size_t disc_warmup = 0;          // discriminator-only updates before step 0
  std::size_t batch_size = 8;           // prompts per update
  std::size_t eval_every = 1;
  std::size_t lora_rank = 4;
  double lora_scale = 2.0;
  std::size_t max_rollout = 24;
  std::size_t disc_embed = 16;
  std::size_t disc_hidden = 16;
  double disc_embed_sd = 3.0;
  double val_fraction = 0.1;
  double divergence_factor = 10.0;
  LogitAnchor anchor;  // weight 0 disables
};

struct StepRecord {
  std::size_t step = 0;
  std::size_t disc_updates = 0;   // cumulative
  std::size_t proxy_updates = 0;  // cumulative
  double task = 0.0;
  double reg = 0.0;
  double total = 0.0;
  double disc = 0.0;
  double anchor = 0.0;
  bool evaluated = false;
  double val_task = 0.0;
  double gap = 0.0;
};

struct ValSnapshot {
  std::size_t step = 0;
  double val_task = 0.0;
  double gap = 0.0;
};

struct TrainState {
  std::size_t step = 0;
  LmAdapters adapters;
  Discriminator disc;
  std::vector<double> gap_history;  // one entry per evaluation point
  std::vector<ValSnapshot> snapshots;
  std::vector<StepRecord> log;
};

struct AdvResult {
  LmAdapters best;
  std::size_t best_step = 0;
  double best_criterion = 0.0;
  TrainState state;
  std::size_t train_size = 0;
  std::size_t val_size = 0;
};

inline void sgd_step(std::vector<std::span<double>> params, std::vector<std::span<double>> grads, double lr) {
  for (std::size_t k = 0; k < params.size(); ++k)
    for (std::size_t i = 0; i < params[k].size(); ++i) params[k][i] -= lr * grads[k][i];
}

// Alternating training: per step, `disc_updates_per_step` discriminator SGD
// updates on fresh proxy generations, then one proxy update on
// task + lambda * reg. The adapter snapshot minimising val task loss + gap is
// returned as `best`.
inline AdvResult run_adversarial(const std::vector<DistillSample>& dataset, const LmParams& base,
                                 const AdvConfig& cfg, std::uint64_t seed) {
  if (dataset.size() < 2) throw InputError("run_adversarial: need at least 2 distillation samples");
  if (!(cfg.lambda >= 0.0)) throw InputError("run_adversarial: lambda must be >= 0");
  if (cfg.batch_size < 1 || cfg.eval_every < 1) throw InputError("run_adversarial: batch_size and eval_every must be >= 1");
  if (!(cfg.val_fraction > 0.0 && cfg.val_fraction < 1.0))
    throw InputError("run_adversarial: val_fraction must be in (0, 1)");

  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng split_rng(substream_seed(seed, "adv-split"));
  split_rng.shuffle(order);
  const std::size_t n_val = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(cfg.val_fraction * static_cast<double>(dataset.size()))), 1,
      dataset.size() - 1);
  std::vector<DistillSample> val, train;
  for (std::size_t i = 0; i < order.size(); ++i) (i < n_val ? val : train).push_back(dataset[order[i]]);

  AdvResult res;
  res.train_size = train.size();
  res.val_size = val.size();
  TrainState& st = res.state;
  Rng init_rng(substream_seed(seed, "adv-init"));
  st.adapters = make_adapters(base, cfg.lora_rank, cfg.lora_scale, init_rng);
  st.disc = init_discriminator(base.vocab_size(), cfg.disc_embed, cfg.disc_hidden, init_rng, cfg.disc_embed_sd);
  Rng batch_rng(substream_seed(seed, "adv-batch"));

  const auto val_reals = real_pairs(val);
  auto sample_batch = [&]() {
    std::vector<DistillSample> b;
    for (std::size_t i = 0; i < std::min(cfg.batch_size, train.size()); ++i)
      b.push_back(train[batch_rng.below(train.size())]);
    return b;
  };
  auto rollouts_for = [&](std::span<const DistillSample> b) {
    std::vector<SoftRollout> rs;
    const LmView v(base, &st.adapters);
    for (const auto& s : b) rs.push_back(soft_rollout(v, s.prompt, cfg.max_rollout));
    return rs;
  };
  auto disc_update = [&]() {
    const auto b = sample_batch();
    const auto fake = rollouts_for(b);
    const auto real = real_pairs(b);
    Discriminator g = zero_like(st.disc);
    const double l = disc_loss(st.disc, real, fake, &g);
    sgd_step(st.disc.tensors(), g.tensors(), cfg.disc_lr);
    return l;
  };
  auto evaluate = [&](StepRecord& rec) {
    const LmView v(base, &st.adapters);
    rec.evaluated = true;
    rec.val_task = task_loss(v, val);
    rec.gap = prediction_gap(st.disc, rollouts_for(val), val_reals);
    st.gap_history.push_back(rec.gap);
    st.snapshots.push_back({rec.step, rec.val_task, rec.gap});
    const double crit = rec.val_task + rec.gap;
    if (st.snapshots.size() == 1 || crit < res.best_criterion) {
      res.best_criterion = crit;
      res.best = st.adapters;
      res.best_step = rec.step;
    }
  };

  std::size_t disc_updates = 0, proxy_updates = 0;
  double last_disc = 0.0;
  for (std::size_t i = 0; i < cfg.disc_warmup; ++i) {
    last_disc = disc_update();
    ++disc_updates;
  }

  {
    StepRecord rec;
    rec.step = 0;
    rec.disc_updates = disc_updates;
    rec.disc = last_disc;
    const auto b = sample_batch();
    const LmView v(base, &st.adapters);
    const auto rs = rollouts_for(b);
    const auto lb = LossBreakdown::make(task_loss(v, b), reg_loss(v, st.disc, rs), cfg.lambda);
    rec.task = lb.task;
    rec.reg = lb.reg;
    rec.total = lb.total;
    evaluate(rec);
    st.log.push_back(rec);
  }
  const double initial_total = st.log.front().total;

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    StepRecord rec;
    rec.step = step;
    for (std::size_t k = 0; k < cfg.disc_updates_per_step; ++k) {
      last_disc = disc_update();
      ++disc_updates;
    }
    rec.disc = last_disc;

    const auto b = sample_batch();
    LmAdapters g = zero_like(st.adapters);
    const LmView v(base, &st.adapters);
    const LogitAnchor* anc = cfg.anchor.weight > 0.0 ? &cfg.anchor : nullptr;
    const double task = task_loss(v, b, &g, anc, &rec.anchor);
    double reg = 0.0;
    if (cfg.lambda > 0.0) {
      LmAdapters gr = zero_like(st.adapters);
      reg = reg_loss(v, st.disc, rollouts_for(b), &gr);
      auto gt = g.tensors();
      auto rt = gr.tensors();
      for (std::size_t k = 0; k < gt.size(); ++k)
        for (std::size_t i = 0; i < gt[k].size(); ++i) gt[k][i] += cfg.lambda * rt[k][i];
    }
    const auto lb = LossBreakdown::make(task, cfg.lambda > 0.0 ? reg : 0.0, cfg.lambda);
    rec.task = lb.task;
    rec.reg = lb.reg;
    rec.total = lb.total;
    if (!std::isfinite(lb.total) || lb.total > cfg.divergence_factor * initial_total) {
      st.log.push_back(rec);
      std::string msg = "adversarial training diverged at step " + std::to_string(step) + ": total loss " +
                        std::to_string(lb.total) + " vs initial " + std::to_string(initial_total) + "\nlog tail:";
      for (std::size_t i = st.log.size() > 5 ? st.log.size() - 5 : 0; i < st.log.size(); ++i)
        msg += "\n  step " + std::to_string(st.log[i].step) + " task " + std::to_string(st.log[i].task) + " reg " +
               std::to_string(st.log[i].reg) + " disc " + std::to_string(st.log[i].disc);
      throw DivergenceError(msg);
    }
    sgd_step(st.adapters.tensors(), g.tensors(), cfg.proxy_lr);
    ++proxy_updates;
    rec.disc_updates = disc_updates;
    rec.proxy_updates = proxy_updates;
    st.step = step;
    if (step % cfg.eval_every == 0 || step == cfg.steps) evaluate(rec);
    st.log.push_back(rec);
  }
  return res;
}

}  // namespace disaad
