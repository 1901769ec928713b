#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "disaad/common.hpp"
#include "disaad/tinylm.hpp"
#include "disaad/vocab.hpp"

namespace testsupport {

// ||analytic - numeric|| / max(||analytic||, ||numeric||) over one tensor,
// numeric from central differences of `loss` while poking `param`.
inline double fd_relative_error(std::span<double> param, std::span<const double> analytic,
                                const std::function<double()>& loss, double h = 1e-5) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double keep = param[i];
    param[i] = keep + h;
    const double up = loss();
    param[i] = keep - h;
    const double down = loss();
    param[i] = keep;
    const double num = (up - down) / (2.0 * h);
    diff += (num - analytic[i]) * (num - analytic[i]);
    na += analytic[i] * analytic[i];
    nn += num * num;
  }
  const double scale = std::sqrt(std::max(na, nn));
  return scale < 1e-12 ? std::sqrt(diff) : std::sqrt(diff) / scale;
}

inline double max_fd_error(std::vector<std::span<double>> params, std::vector<std::span<const double>> grads,
                           const std::function<double()>& loss, double h = 1e-5) {
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k)
    worst = std::max(worst, fd_relative_error(params[k], grads[k], loss, h));
  return worst;
}

inline double max_fd_error(std::vector<std::span<double>> params, std::vector<std::span<double>> grads,
                           const std::function<double()>& loss, double h = 1e-5) {
  return max_fd_error(std::move(params), std::vector<std::span<const double>>(grads.begin(), grads.end()), loss, h);
}

inline disaad::TokenSeq seq(std::vector<disaad::TokenId> ids, disaad::SeqRole role = disaad::SeqRole::response) {
  return {std::move(ids), role};
}

inline disaad::LmParams random_lm(std::size_t vocab, std::uint64_t seed, std::size_t embed = 4, std::size_t ctx = 3,
                                  std::size_t hidden = 6) {
  disaad::Rng rng(seed);
  return disaad::init_lm({vocab, embed, ctx, hidden}, rng);
}

// Adapters with both factors non-zero so gradients through B and A are both live.
inline disaad::LmAdapters random_adapters(const disaad::LmParams& base, std::size_t rank, double scale,
                                          std::uint64_t seed) {
  disaad::Rng rng(seed);
  auto a = disaad::make_adapters(base, rank, scale, rng);
  for (auto t : a.tensors())
    for (double& v : t) v = rng.normal(0.0, 0.3);
  return a;
}

}  // namespace testsupport
