#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "disaad/binio.hpp"
#include "disaad/common.hpp"
#include "disaad/lora.hpp"
#include "disaad/matrix.hpp"
#include "disaad/vocab.hpp"

// Fixed-window feed-forward language model:
//   x = [E(c_1); ...; E(c_W)],  h = tanh(W_h x + b_h),  z = W_o h + b_o
// where c is the last W tokens of the context, left-padded with <eos>.
namespace disaad {

struct LmArch {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 16;
  std::size_t context = 8;
  std::size_t hidden = 64;
};

struct LmParams {
  std::size_t context = 0;
  Matrix embedding;  // |V| x d
  Matrix w_hidden;   // H x (context * d)
  Vec b_hidden;      // H
  Matrix w_out;      // |V| x H
  Vec b_out;         // |V|

  std::size_t vocab_size() const { return embedding.rows(); }
  std::size_t embed_dim() const { return embedding.cols(); }
  std::size_t hidden() const { return w_hidden.rows(); }

  LmArch arch() const { return {vocab_size(), embed_dim(), context, hidden()}; }

  // Flat views over every tensor, in checkpoint order.
  std::vector<std::span<double>> tensors() {
    return {embedding.data(), w_hidden.data(), b_hidden, w_out.data(), b_out};
  }
  std::vector<std::span<const double>> tensors() const {
    return {embedding.data(), w_hidden.data(), b_hidden, w_out.data(), b_out};
  }

  void validate() const {
    if (vocab_size() < 2) throw InputError("LmParams: vocabulary must have at least 2 tokens");
    if (context < 1) throw InputError("LmParams: context window must be positive");
    if (w_hidden.cols() != context * embed_dim() || b_hidden.size() != hidden() ||
        w_out.rows() != vocab_size() || w_out.cols() != hidden() || b_out.size() != vocab_size())
      throw InputError("LmParams: inconsistent shapes");
    for (auto t : tensors())
      for (double v : t)
        if (!std::isfinite(v)) throw InputError("LmParams: non-finite parameter");
  }

  friend bool operator==(const LmParams&, const LmParams&) = default;
};

inline LmParams zero_lm(const LmArch& arch) {
  LmParams p;
  p.context = arch.context;
  p.embedding = Matrix(arch.vocab_size, arch.embed_dim);
  p.w_hidden = Matrix(arch.hidden, arch.context * arch.embed_dim);
  p.b_hidden = Vec(arch.hidden, 0.0);
  p.w_out = Matrix(arch.vocab_size, arch.hidden);
  p.b_out = Vec(arch.vocab_size, 0.0);
  return p;
}

inline LmParams zero_like(const LmParams& p) { return zero_lm(p.arch()); }

inline LmParams init_lm(const LmArch& arch, Rng& rng) {
  LmParams p = zero_lm(arch);
  p.validate();
  p.embedding = Matrix::random_normal(arch.vocab_size, arch.embed_dim, 0.5, rng);
  p.w_hidden = Matrix::random_normal(arch.hidden, arch.context * arch.embed_dim,
                                     1.0 / std::sqrt(static_cast<double>(arch.context * arch.embed_dim)), rng);
  p.w_out = Matrix::random_normal(arch.vocab_size, arch.hidden, 1.0 / std::sqrt(static_cast<double>(arch.hidden)), rng);
  return p;
}

// Adapters on the two projection layers that take LoRA updates.
struct LmAdapters {
  LoraAdapter hidden;
  LoraAdapter output;

  std::vector<std::span<double>> tensors() {
    return {hidden.B.data(), hidden.A.data(), output.B.data(), output.A.data()};
  }
  std::vector<std::span<const double>> tensors() const {
    return {hidden.B.data(), hidden.A.data(), output.B.data(), output.A.data()};
  }

  friend bool operator==(const LmAdapters&, const LmAdapters&) = default;
};

inline LmAdapters make_adapters(const LmParams& base, std::size_t rank, double scale, Rng& rng) {
  LmAdapters a{make_lora(base.w_hidden.rows(), base.w_hidden.cols(), rank, scale, rng),
               make_lora(base.w_out.rows(), base.w_out.cols(), rank, scale, rng)};
  a.hidden.validate_against(base.w_hidden);
  a.output.validate_against(base.w_out);
  return a;
}

inline LmAdapters zero_like(const LmAdapters& a) { return {zero_like(a.hidden), zero_like(a.output)}; }

// A base model plus optional adapters. Parameters are never mutated through
// this view, so concurrent inference over one view is safe.
struct LmView {
  const LmParams* base = nullptr;
  const LmAdapters* adapters = nullptr;

  LmView() = default;
  LmView(const LmParams& b, const LmAdapters* a = nullptr) : base(&b), adapters(a) {}  // NOLINT

  std::size_t vocab_size() const { return base->vocab_size(); }
  std::size_t context() const { return base->context; }
};

struct LogitRow {
  Vec z;
  std::size_t step = 0;
};

// Activations kept for the backward pass.
struct StepCache {
  std::vector<TokenId> window;
  Vec x;
  Vec h;
  Vec z;
};

// Last `width` tokens of prompt ++ prefix, left-padded with <eos>.
inline std::vector<TokenId> context_window(std::span<const TokenId> prompt, std::span<const TokenId> prefix,
                                           std::size_t width) {
  std::vector<TokenId> w(width, kEos);
  const std::size_t total = prompt.size() + prefix.size();
  for (std::size_t i = 0; i < width && i < total; ++i) {
    const std::size_t src = total - 1 - i;
    w[width - 1 - i] = src < prompt.size() ? prompt[src] : prefix[src - prompt.size()];
  }
  return w;
}

inline StepCache forward_window(LmView m, std::vector<TokenId> window) {
  const LmParams& p = *m.base;
  if (window.size() != p.context) throw InputError("forward: window length does not match model context");
  StepCache c;
  c.window = std::move(window);
  const std::size_t d = p.embed_dim();
  c.x.resize(p.context * d);
  for (std::size_t i = 0; i < p.context; ++i) {
    const TokenId t = c.window[i];
    if (t >= p.vocab_size()) throw InputError("forward: token id " + std::to_string(t) + " outside vocabulary");
    const auto e = p.embedding.row(t);
    std::copy(e.begin(), e.end(), c.x.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  c.h = adapted_matvec(p.w_hidden, m.adapters ? &m.adapters->hidden : nullptr, c.x);
  for (std::size_t j = 0; j < c.h.size(); ++j) c.h[j] = std::tanh(c.h[j] + p.b_hidden[j]);
  c.z = adapted_matvec(p.w_out, m.adapters ? &m.adapters->output : nullptr, c.h);
  for (std::size_t v = 0; v < c.z.size(); ++v) c.z[v] += p.b_out[v];
  return c;
}

// Back-propagates dL/dz through one forward step. Base-parameter gradients go
// to `base_grad` and adapter gradients to `adapter_grad`; either may be null.
inline void backward_window(LmView m, const StepCache& c, std::span<const double> dz, LmParams* base_grad,
                            LmAdapters* adapter_grad) {
  const LmParams& p = *m.base;
  const LoraAdapter* ad_out = m.adapters ? &m.adapters->output : nullptr;
  const LoraAdapter* ad_hid = m.adapters ? &m.adapters->hidden : nullptr;

  Vec dh = adapted_matvec_t(p.w_out, ad_out, dz);
  Vec da(dh.size());
  for (std::size_t j = 0; j < dh.size(); ++j) da[j] = dh[j] * (1.0 - c.h[j] * c.h[j]);

  if (adapter_grad && m.adapters) {
    accumulate_lora_grad(*ad_out, c.h, dz, adapter_grad->output);
    accumulate_lora_grad(*ad_hid, c.x, da, adapter_grad->hidden);
  }
  if (base_grad) {
    add_outer(base_grad->w_out, 1.0, dz, c.h);
    for (std::size_t v = 0; v < dz.size(); ++v) base_grad->b_out[v] += dz[v];
    add_outer(base_grad->w_hidden, 1.0, da, c.x);
    for (std::size_t j = 0; j < da.size(); ++j) base_grad->b_hidden[j] += da[j];
    const Vec dx = adapted_matvec_t(p.w_hidden, ad_hid, da);
    const std::size_t d = p.embed_dim();
    for (std::size_t i = 0; i < p.context; ++i) {
      auto row = base_grad->embedding.row(c.window[i]);
      for (std::size_t k = 0; k < d; ++k) row[k] += dx[i * d + k];
    }
  }
}

inline LogitRow next_token_logits(LmView m, const TokenSeq& context) {
  if (context.empty()) throw InputError("next_token_logits: context must be non-empty");
  for (TokenId t : context.ids)
    if (t >= m.vocab_size()) throw InputError("next_token_logits: token id outside vocabulary");
  auto c = forward_window(m, context_window(context.ids, {}, m.context()));
  return {std::move(c.z), context.size()};
}

// Temperature softmax with max subtraction. Temperature 0 is the greedy mode of
// sample_sequence and is rejected here.
inline Vec softmax_probs(std::span<const double> z, double temperature = 1.0) {
  if (!(temperature > 0.0)) throw InputError("softmax_probs: temperature must be > 0");
  if (z.empty()) throw InputError("softmax_probs: empty logit row");
  const double zmax = *std::max_element(z.begin(), z.end());
  Vec p(z.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp((z[i] - zmax) / temperature);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

inline double log_softmax_at(std::span<const double> z, std::size_t idx) {
  const double zmax = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double v : z) sum += std::exp(v - zmax);
  return z[idx] - zmax - std::log(sum);
}

// First index of the maximum.
inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline std::size_t sample_index(std::span<const double> probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  // Rounding left a sliver above the cumulative sum; fall back to the last
  // index with nonzero mass.
  for (std::size_t i = probs.size(); i-- > 0;)
    if (probs[i] > 0.0) return i;
  return probs.size() - 1;
}

// Autoregressive rollout from `prompt`. temperature == 0 is greedy argmax.
// The returned response excludes the terminating <eos>.
inline TokenSeq sample_sequence(LmView m, const TokenSeq& prompt, double temperature, std::size_t max_len,
                                std::uint64_t seed) {
  if (max_len < 1) throw InputError("sample_sequence: max_len must be >= 1");
  if (temperature < 0.0 || !std::isfinite(temperature))
    throw InputError("sample_sequence: temperature must be >= 0");
  for (TokenId t : prompt.ids)
    if (t >= m.vocab_size()) throw InputError("sample_sequence: prompt token outside vocabulary");
  Rng rng(seed);
  TokenSeq out{{}, SeqRole::response};
  while (out.size() < max_len) {
    const auto c = forward_window(m, context_window(prompt.ids, out.ids, m.context()));
    const std::size_t next =
        temperature == 0.0 ? argmax(c.z) : sample_index(softmax_probs(c.z, temperature), rng);
    if (next == kEos) break;
    out.ids.push_back(static_cast<TokenId>(next));
  }
  return out;
}

// Per-position teacher-forced log-probabilities of `response` (plus a final
// <eos> when `include_eos`) given `prompt`.
inline double sequence_logprob(LmView m, const TokenSeq& prompt, const TokenSeq& response, bool include_eos,
                               std::size_t* count = nullptr) {
  double lp = 0.0;
  const std::size_t n = response.size() + (include_eos ? 1 : 0);
  for (std::size_t t = 0; t < n; ++t) {
    const auto prefix = std::span<const TokenId>(response.ids).first(t);
    const auto c = forward_window(m, context_window(prompt.ids, prefix, m.context()));
    const TokenId target = t < response.size() ? response.ids[t] : kEos;
    lp += log_softmax_at(c.z, target);
  }
  if (count) *count = n;
  return lp;
}

// Mean next-token NLL over a corpus. Each sequence is scored from an all-<eos>
// context through its terminating <eos>.
inline double corpus_nll(LmView m, std::span<const TokenSeq> corpus) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& seq : corpus) {
    std::size_t n = 0;
    total -= sequence_logprob(m, TokenSeq{}, seq, true, &n);
    count += n;
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

// Corpus NLL and its gradient with respect to every base parameter.
inline double corpus_nll_grad(const LmParams& params, std::span<const TokenSeq> corpus, LmParams& grad) {
  grad = zero_like(params);
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& seq : corpus) count += seq.size() + 1;
  if (count == 0) return 0.0;
  const double inv = 1.0 / static_cast<double>(count);
  for (const auto& seq : corpus) {
    for (std::size_t t = 0; t <= seq.size(); ++t) {
      const auto prefix = std::span<const TokenId>(seq.ids).first(t);
      const auto c = forward_window(params, context_window({}, prefix, params.context));
      const TokenId target = t < seq.size() ? seq.ids[t] : kEos;
      Vec dz = softmax_probs(c.z);
      total -= std::log(std::max(dz[target], std::numeric_limits<double>::min()));
      dz[target] -= 1.0;
      for (double& v : dz) v *= inv;
      backward_window(params, c, dz, &grad, nullptr);
    }
  }
  return total * inv;
}

struct TrainLmConfig {
  LmArch arch;
  std::size_t epochs = 60;
  std::size_t batch_size = 32;
  double learning_rate = 0.01;
  // Penalty weight * (logsumexp(z) - anchor)^2 pins the free additive offset
  // of the logits, so their absolute scale (read as evidence downstream)
  // stays meaningful. Weight 0 trains on the plain NLL.
  double logit_anchor = 5.0;
  double anchor_weight = 0.1;
  std::uint64_t seed = 1;
};

struct TrainLmResult {
  LmParams params;
  double initial_nll = 0.0;
  double final_nll = 0.0;
};

// Minibatch Adam on the corpus NLL. Deterministic given the config seed.
inline TrainLmResult train_lm(std::span<const TokenSeq> corpus, const TrainLmConfig& cfg) {
  if (corpus.empty()) throw InputError("train_lm: corpus must be non-empty");
  for (const auto& s : corpus)
    for (TokenId t : s.ids)
      if (t >= cfg.arch.vocab_size) throw InputError("train_lm: corpus token outside vocabulary");

  Rng rng(cfg.seed);
  TrainLmResult res;
  res.params = init_lm(cfg.arch, rng);
  LmParams& p = res.params;
  res.initial_nll = corpus_nll(p, corpus);

  struct Example {
    std::vector<TokenId> window;
    TokenId target;
  };
  std::vector<Example> examples;
  for (const auto& seq : corpus)
    for (std::size_t t = 0; t <= seq.size(); ++t)
      examples.push_back({context_window({}, std::span<const TokenId>(seq.ids).first(t), p.context),
                          t < seq.size() ? seq.ids[t] : kEos});

  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  LmParams m1 = zero_like(p), m2 = zero_like(p), grad = zero_like(p);
  std::size_t step = 0;
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t bs = std::max<std::size_t>(1, cfg.batch_size);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      for (auto t : grad.tensors()) std::fill(t.begin(), t.end(), 0.0);
      const double inv = 1.0 / static_cast<double>(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const Example& ex = examples[order[i]];
        const auto c = forward_window(p, ex.window);
        Vec dz = softmax_probs(c.z);
        if (cfg.anchor_weight > 0.0) {
          const double lse = c.z[0] - log_softmax_at(c.z, 0);
          const double pull = 1.0 + 2.0 * cfg.anchor_weight * (lse - cfg.logit_anchor);
          for (double& v : dz) v *= pull;
        }
        dz[ex.target] -= 1.0;
        for (double& v : dz) v *= inv;
        backward_window(p, c, dz, &grad, nullptr);
      }
      ++step;
      const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
      auto pt = p.tensors();
      auto gt = grad.tensors();
      auto mt = m1.tensors();
      auto vt = m2.tensors();
      for (std::size_t k = 0; k < pt.size(); ++k)
        for (std::size_t i = 0; i < pt[k].size(); ++i) {
          const double g = gt[k][i];
          mt[k][i] = beta1 * mt[k][i] + (1.0 - beta1) * g;
          vt[k][i] = beta2 * vt[k][i] + (1.0 - beta2) * g * g;
          pt[k][i] -= cfg.learning_rate * (mt[k][i] / c1) / (std::sqrt(vt[k][i] / c2) + eps);
        }
    }
  }
  res.final_nll = corpus_nll(p, corpus);
  if (!std::isfinite(res.final_nll)) throw DivergenceError("train_lm: non-finite loss");
  return res;
}

// Checkpoint layout (little-endian): "TLM1", u64 context window, then the
// tensors embedding, w_hidden, b_hidden (1 x H), w_out, b_out (1 x |V|), each
// as name, u64 rows, u64 cols, rows*cols f64.
inline void save_lm(std::ostream& out, const LmParams& p) {
  binio::put_magic(out, "TLM1");
  binio::put_u64(out, p.context);
  binio::put_matrix(out, "embedding", p.embedding);
  binio::put_matrix(out, "w_hidden", p.w_hidden);
  binio::put_matrix(out, "b_hidden", Matrix(1, p.b_hidden.size(), p.b_hidden));
  binio::put_matrix(out, "w_out", p.w_out);
  binio::put_matrix(out, "b_out", Matrix(1, p.b_out.size(), p.b_out));
}

inline LmParams load_lm(std::istream& in) {
  binio::expect_magic(in, "TLM1");
  LmParams p;
  p.context = binio::get_u64(in);
  p.embedding = binio::get_matrix(in, "embedding");
  p.w_hidden = binio::get_matrix(in, "w_hidden");
  p.b_hidden = binio::get_matrix(in, "b_hidden").data();
  p.w_out = binio::get_matrix(in, "w_out");
  p.b_out = binio::get_matrix(in, "b_out").data();
  p.validate();
  return p;
}

inline void save_lm(const std::string& path, const LmParams& p) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write checkpoint " + path);
  save_lm(out, p);
}

inline LmParams load_lm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read checkpoint " + path);
  return load_lm(in);
}

// Adapter checkpoint, kept apart from the base weights: "LRA1", u64 layer
// count, then per layer its target name, f64 scale, B and A.
inline void save_adapters(std::ostream& out, const LmAdapters& a) {
  binio::put_magic(out, "LRA1");
  binio::put_u64(out, 2);
  for (const auto& [name, ad] : {std::pair<const char*, const LoraAdapter*>{"hidden", &a.hidden},
                                 std::pair<const char*, const LoraAdapter*>{"output", &a.output}}) {
    binio::put_string(out, name);
    binio::put_f64(out, ad->scale);
    binio::put_matrix(out, "B", ad->B);
    binio::put_matrix(out, "A", ad->A);
  }
}

inline LmAdapters load_adapters(std::istream& in) {
  binio::expect_magic(in, "LRA1");
  if (binio::get_u64(in) != 2) throw InputError("adapter checkpoint must hold exactly 2 layers");
  LmAdapters a;
  for (auto [name, ad] : {std::pair<const char*, LoraAdapter*>{"hidden", &a.hidden},
                          std::pair<const char*, LoraAdapter*>{"output", &a.output}}) {
    if (binio::get_string(in) != name) throw InputError(std::string("adapter layer '") + name + "' missing");
    ad->scale = binio::get_f64(in);
    ad->B = binio::get_matrix(in, "B");
    ad->A = binio::get_matrix(in, "A");
    ad->validate();
  }
  return a;
}

inline void save_adapters(const std::string& path, const LmAdapters& a) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write adapter checkpoint " + path);
  save_adapters(out, a);
}

inline LmAdapters load_adapters(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read adapter checkpoint " + path);
  return load_adapters(in);
}

inline LipschitzReport check_lipschitz(const LmParams& base, const LmAdapters& adapters, std::size_t trials,
                                       std::uint64_t seed, const char* layer) {
  const std::string name = layer;
  if (name == "hidden") return check_lipschitz(base.w_hidden, adapters.hidden, trials, seed, name);
  if (name == "output") return check_lipschitz(base.w_out, adapters.output, trials, seed, name);
  throw InputError("check_lipschitz: unknown layer " + name);
}

// Lipschitz reports for every adapted layer of the model.
inline std::vector<LipschitzReport> check_lipschitz(const LmParams& base, const LmAdapters& adapters,
                                                    std::size_t trials, std::uint64_t seed) {
  return {check_lipschitz(base, adapters, trials, seed, "hidden"),
          check_lipschitz(base, adapters, trials, seed + 1, "output")};
}

}  // namespace disaad
