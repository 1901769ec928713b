#pragma once

#include <algorithm>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "disaad/common.hpp"
#include "disaad/matrix.hpp"

namespace disaad {

// Low-rank additive update for one d x k weight: W = W0 + scale * B A.
struct LoraAdapter {
  Matrix B;  // d x r
  Matrix A;  // r x k
  double scale = 1.0;

  std::size_t rank() const { return A.rows(); }
  std::size_t out_dim() const { return B.rows(); }
  std::size_t in_dim() const { return A.cols(); }

  void validate() const {
    if (B.cols() != A.rows()) throw InputError("LoraAdapter: B columns must equal A rows");
    const std::size_t r = rank();
    if (r < 1) throw InputError("LoraAdapter: rank must be positive");
    if (r >= std::min(out_dim(), in_dim()))
      throw InputError("LoraAdapter: rank must be smaller than min(d, k)");
    if (!(scale > 0.0)) throw InputError("LoraAdapter: scale must be positive");
    if (!B.all_finite() || !A.all_finite()) throw InputError("LoraAdapter: non-finite entries");
  }

  void validate_against(const Matrix& w0) const {
    validate();
    if (w0.rows() != out_dim() || w0.cols() != in_dim())
      throw InputError("LoraAdapter: shape does not match base weight");
  }

  friend bool operator==(const LoraAdapter&, const LoraAdapter&) = default;
};

// B starts at zero so the adapted layer initially equals the base layer.
inline LoraAdapter make_lora(std::size_t d, std::size_t k, std::size_t rank, double scale, Rng& rng) {
  LoraAdapter a{Matrix(d, rank), Matrix::random_normal(rank, k, 1.0 / std::sqrt(static_cast<double>(k)), rng),
                scale};
  a.validate();
  return a;
}

inline Matrix apply_lora(const Matrix& w0, const LoraAdapter& adapter) {
  adapter.validate_against(w0);
  Matrix w = matmul(adapter.B, adapter.A).scaled(adapter.scale);
  w += w0;
  return w;
}

// W0 x + scale * B (A x), without materializing the merged weight.
inline Vec adapted_matvec(const Matrix& w0, const LoraAdapter* adapter, std::span<const double> x) {
  Vec y = matvec(w0, x);
  if (adapter) {
    const Vec ax = matvec(adapter->A, x);
    const Vec bax = matvec(adapter->B, ax);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += adapter->scale * bax[i];
  }
  return y;
}

// (W0 + scale B A)^T g
inline Vec adapted_matvec_t(const Matrix& w0, const LoraAdapter* adapter, std::span<const double> g) {
  Vec x = matvec_t(w0, g);
  if (adapter) {
    const Vec btg = matvec_t(adapter->B, g);
    const Vec atbtg = matvec_t(adapter->A, btg);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += adapter->scale * atbtg[i];
  }
  return x;
}

// Accumulates dL/dB and dL/dA given dL/dy = g for y = W x:
// dB += scale * g (A x)^T, dA += scale * (B^T g) x^T.
inline void accumulate_lora_grad(const LoraAdapter& adapter, std::span<const double> x,
                                 std::span<const double> g, LoraAdapter& grad) {
  const Vec ax = matvec(adapter.A, x);
  const Vec btg = matvec_t(adapter.B, g);
  add_outer(grad.B, adapter.scale, g, ax);
  add_outer(grad.A, adapter.scale, btg, x);
}

inline LoraAdapter zero_like(const LoraAdapter& a) {
  return {Matrix(a.B.rows(), a.B.cols()), Matrix(a.A.rows(), a.A.cols()), a.scale};
}

// ||W0|| + scale ||B|| ||A|| with spectral norms; bounds the Lipschitz constant
// of x -> (W0 + scale B A) x.
inline double lipschitz_bound(const Matrix& w0, const LoraAdapter& adapter,
                              SpectralNormOptions opts = {}) {
  adapter.validate_against(w0);
  return spectral_norm(w0, opts) + adapter.scale * spectral_norm(adapter.B, opts) * spectral_norm(adapter.A, opts);
}

struct LipschitzReport {
  std::string layer;
  double bound = 0.0;
  double max_ratio = 0.0;
  std::size_t trials = 0;  // pairs actually evaluated
  std::size_t skipped = 0;
  std::size_t violations = 0;

  bool ok() const { return violations == 0; }
};

inline constexpr double kLipschitzSlack = 1e-6;

// Records ||G(x1) - G(x2)|| / ||x1 - x2|| for each pair; identical pairs are skipped.
inline LipschitzReport check_lipschitz_pairs(const Matrix& w0, const LoraAdapter& adapter,
                                             std::span<const std::pair<Vec, Vec>> pairs,
                                             std::string layer = "layer") {
  LipschitzReport rep;
  rep.layer = std::move(layer);
  rep.bound = lipschitz_bound(w0, adapter);
  for (const auto& [x1, x2] : pairs) {
    if (x1.size() != w0.cols() || x2.size() != w0.cols())
      throw InputError("check_lipschitz: input length does not match layer");
    Vec dx(x1.size());
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = x1[i] - x2[i];
    const double in_norm = norm2(dx);
    if (in_norm == 0.0) {
      ++rep.skipped;
      continue;
    }
    // G is linear, so G(x1) - G(x2) = G(x1 - x2).
    const double ratio = norm2(adapted_matvec(w0, &adapter, dx)) / in_norm;
    rep.max_ratio = std::max(rep.max_ratio, ratio);
    if (ratio > rep.bound + kLipschitzSlack) ++rep.violations;
    ++rep.trials;
  }
  return rep;
}

inline LipschitzReport check_lipschitz(const Matrix& w0, const LoraAdapter& adapter, std::size_t trials,
                                       std::uint64_t seed, std::string layer = "layer") {
  if (trials < 1) throw InputError("check_lipschitz: trials must be >= 1");
  Rng rng(seed);
  std::vector<std::pair<Vec, Vec>> pairs;
  pairs.reserve(trials);
  for (std::size_t t = 0; t < trials; ++t) {
    Vec x1(w0.cols()), x2(w0.cols());
    for (double& v : x1) v = rng.normal();
    for (double& v : x2) v = rng.normal();
    pairs.emplace_back(std::move(x1), std::move(x2));
  }
  return check_lipschitz_pairs(w0, adapter, pairs, std::move(layer));
}

}  // namespace disaad
