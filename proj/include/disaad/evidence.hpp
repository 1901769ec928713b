#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "disaad/common.hpp"
#include "disaad/special.hpp"
#include "disaad/tinylm.hpp"

// Evidential uncertainty from proxy logits. The top-K logits at a decoding
// step are rectified into Dirichlet evidence alpha_k; aleatoric uncertainty
// (AU) measures how flat that evidence is, epistemic uncertainty (EU) how
// little of it there is, and token reliability is R = -AU * EU.
namespace disaad {

struct EvidenceVector {
  std::vector<double> alphas;         // rectified top-K logits, descending
  std::vector<TokenId> token_ids;     // vocabulary index of each alpha
  double alpha0 = 0.0;

  std::size_t k() const { return alphas.size(); }
};

struct UncertaintyEstimate {
  double au = 0.0;
  double eu = 1.0;
  double r = 0.0;
  std::size_t position = 0;
};

struct ResponseReliability {
  double r_response = 0.0;
  std::size_t k_star = 0;
  std::vector<std::size_t> positions;  // token positions that entered the mean
};

inline constexpr std::size_t kDefaultTopK = 10;
inline constexpr double kDefaultLeastReliableFraction = 0.2;

inline EvidenceVector make_evidence(std::vector<double> alphas) {
  EvidenceVector ev;
  for (double a : alphas)
    if (!(a >= 0.0) || !std::isfinite(a)) throw InputError("evidence: alphas must be finite and non-negative");
  ev.alpha0 = std::accumulate(alphas.begin(), alphas.end(), 0.0);
  ev.token_ids.resize(alphas.size());
  std::iota(ev.token_ids.begin(), ev.token_ids.end(), TokenId{0});
  ev.alphas = std::move(alphas);
  if (ev.alphas.empty()) throw InputError("evidence: K must be >= 1");
  return ev;
}

// Top-K logits (ties to the lower token index), then ReLU.
inline EvidenceVector evidence_from_logits(std::span<const double> z, std::size_t k) {
  if (k < 1 || k > z.size()) throw InputError("evidence_from_logits: K must be in [1, |V|]");
  for (double v : z)
    if (!std::isfinite(v)) throw InputError("evidence_from_logits: non-finite logit");
  std::vector<TokenId> idx(z.size());
  std::iota(idx.begin(), idx.end(), TokenId{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](TokenId a, TokenId b) { return z[a] > z[b] || (z[a] == z[b] && a < b); });
  EvidenceVector ev;
  ev.token_ids.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
  ev.alphas.reserve(k);
  for (TokenId t : ev.token_ids) {
    ev.alphas.push_back(std::max(z[t], 0.0));
    ev.alpha0 += ev.alphas.back();
  }
  return ev;
}

// AU = -sum_k (alpha_k / alpha0) (psi(alpha_k + 1) - psi(alpha0 + 1)).
// Zero total evidence is the uniform-belief limit, AU = ln K.
inline double aleatoric(const EvidenceVector& ev) {
  const double kk = static_cast<double>(ev.k());
  if (ev.alpha0 <= 0.0) return std::log(kk);
  const double psi0 = digamma(ev.alpha0 + 1.0);
  double au = 0.0;
  for (double a : ev.alphas) {
    if (a == 0.0) continue;
    au -= (a / ev.alpha0) * (digamma(a + 1.0) - psi0);
  }
  return au;
}

// EU = K / sum_k (alpha_k + 1), in (0, 1].
inline double epistemic(const EvidenceVector& ev) {
  const double kk = static_cast<double>(ev.k());
  return kk / (ev.alpha0 + kk);
}

inline UncertaintyEstimate token_reliability(const EvidenceVector& ev, std::size_t position = 0) {
  UncertaintyEstimate u;
  u.au = aleatoric(ev);
  u.eu = epistemic(ev);
  u.r = -u.au * u.eu;
  u.position = position;
  return u;
}

// Mean R over the K* = max(1, round(fraction * n)) least reliable tokens;
// equal R values resolve to the earlier position.
inline ResponseReliability response_reliability(std::span<const UncertaintyEstimate> tokens,
                                                double fraction = kDefaultLeastReliableFraction) {
  if (tokens.empty()) throw InputError("response_reliability: token list is empty");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw InputError("response_reliability: fraction must be in (0, 1]");
  const std::size_t n = tokens.size();
  const auto k_star = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return tokens[a].r < tokens[b].r; });
  ResponseReliability rr;
  rr.k_star = std::min(k_star, n);
  double sum = 0.0;
  for (std::size_t i = 0; i < rr.k_star; ++i) {
    sum += tokens[order[i]].r;
    rr.positions.push_back(tokens[order[i]].position);
  }
  rr.r_response = sum / static_cast<double>(rr.k_star);
  return rr;
}

struct ScoredResponse {
  std::vector<EvidenceVector> evidence;
  std::vector<UncertaintyEstimate> tokens;
  ResponseReliability reliability;
  bool empty = false;  // nothing to score; reliability left at defaults
};

// Teacher-forces `response` through the proxy and scores every position.
inline ScoredResponse score_response(LmView proxy, const TokenSeq& prompt, const TokenSeq& response,
                                     std::size_t top_k = kDefaultTopK,
                                     double fraction = kDefaultLeastReliableFraction) {
  ScoredResponse out;
  if (response.empty()) {
    out.empty = true;
    return out;
  }
  for (std::size_t t = 0; t < response.size(); ++t) {
    const auto prefix = std::span<const TokenId>(response.ids).first(t);
    const auto c = forward_window(proxy, context_window(prompt.ids, prefix, proxy.context()));
    out.evidence.push_back(evidence_from_logits(c.z, top_k));
    out.tokens.push_back(token_reliability(out.evidence.back(), t));
  }
  out.reliability = response_reliability(out.tokens, fraction);
  return out;
}

}  // namespace disaad
