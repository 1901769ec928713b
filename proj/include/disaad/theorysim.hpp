#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "disaad/common.hpp"

// Monte-Carlo checks of how fast a finite sample covers a heavy-tailed output
// distribution: missing mass, the concentration function, Hoeffding bands on
// the missing mass, and KL divergence to a smoothed empirical distribution.
namespace disaad {

struct ZipfModel {
  std::size_t n = 0;
  double alpha = 0.0;
  bool out_of_model = false;  // alpha <= 1: outside the alpha > 1 regime the decay bound assumes
  std::vector<double> probs;

  double beta() const { return (alpha - 1.0) / alpha; }
};

// p_i proportional to i^-alpha for i = 1..n. alpha <= 1 is allowed but flagged.
inline ZipfModel zipf_probs(std::size_t n, double alpha) {
  if (n < 2) throw InputError("zipf_probs: support size must be >= 2");
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw InputError("zipf_probs: exponent must be positive");
  ZipfModel m;
  m.n = n;
  m.alpha = alpha;
  m.out_of_model = alpha <= 1.0;
  m.probs.resize(n);
  // Sum smallest terms first for accuracy.
  double z = 0.0;
  for (std::size_t i = n; i >= 1; --i) {
    m.probs[i - 1] = std::pow(static_cast<double>(i), -alpha);
    z += m.probs[i - 1];
  }
  for (double& p : m.probs) p /= z;
  return m;
}

inline std::vector<double> uniform_probs(std::size_t n) {
  if (n < 1) throw InputError("uniform_probs: n must be >= 1");
  return std::vector<double>(n, 1.0 / static_cast<double>(n));
}

// Total probability of the outcomes not in `observed`.
inline double missing_mass(std::span<const double> probs, std::span<const std::size_t> observed) {
  std::vector<char> seen(probs.size(), 0);
  for (std::size_t i : observed) {
    if (i >= probs.size()) throw InputError("missing_mass: observed index out of range");
    seen[i] = 1;
  }
  double u = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i)
    if (!seen[i]) u += probs[i];
  return u;
}

// H(v): total mass of outcomes whose probability is at most v.
inline double concentration(std::span<const double> probs, double v) {
  if (!(v >= 0.0)) throw InputError("concentration: v must be >= 0");
  double h = 0.0;
  for (double p : probs)
    if (p <= v) h += p;
  return h;
}

// D_KL(P || P_hat) with P_hat_i = (c_i + s) / (sum c + s n).
inline double empirical_kl(std::span<const double> probs, std::span<const double> counts, double smoothing) {
  if (probs.size() != counts.size()) throw InputError("empirical_kl: probs and counts differ in length");
  if (!(smoothing > 0.0)) throw InputError("empirical_kl: smoothing must be > 0");
  double total = 0.0;
  for (double c : counts) {
    if (c < 0.0) throw InputError("empirical_kl: negative count");
    total += c;
  }
  if (total < 1.0) throw InputError("empirical_kl: need at least one observation");
  const double denom = total + smoothing * static_cast<double>(probs.size());
  double kl = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    kl += probs[i] * std::log(probs[i] * denom / (counts[i] + smoothing));
  }
  return std::max(kl, 0.0);
}

// Draws k samples at a time and reports the missing mass and smoothed KL of
// each batch. Bookkeeping touches only observed outcomes, so a batch costs
// O(k log n) regardless of the support size.
class MissingMassSampler {
 public:
  MissingMassSampler(std::span<const double> probs, double smoothing)
      : probs_(probs.begin(), probs.end()), cdf_(probs.size()), counts_(probs.size(), 0), smoothing_(smoothing) {
    if (probs_.empty()) throw InputError("MissingMassSampler: empty distribution");
    if (!(smoothing > 0.0)) throw InputError("MissingMassSampler: smoothing must be > 0");
    std::partial_sum(probs_.begin(), probs_.end(), cdf_.begin());
    for (double p : probs_)
      if (p > 0.0) neg_entropy_ += p * std::log(p);
  }

  struct Draw {
    double missing_mass = 0.0;
    double kl = 0.0;
  };

  Draw draw(std::size_t k, Rng& rng) {
    touched_.clear();
    for (std::size_t s = 0; s < k; ++s) {
      const double u = rng.uniform() * cdf_.back();
      auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
      std::size_t idx = std::min(static_cast<std::size_t>(it - cdf_.begin()), probs_.size() - 1);
      while (probs_[idx] == 0.0 && idx > 0) --idx;
      if (counts_[idx]++ == 0) touched_.push_back(idx);
    }
    // KL = sum p ln p - sum_obs p ln(c + s) - U ln s + ln(k + s n)
    double observed_mass = 0.0, observed_term = 0.0;
    for (std::size_t i : touched_) {
      observed_mass += probs_[i];
      observed_term += probs_[i] * std::log(static_cast<double>(counts_[i]) + smoothing_);
      counts_[i] = 0;
    }
    Draw d;
    d.missing_mass = std::max(0.0, 1.0 - observed_mass);
    const double denom = static_cast<double>(k) + smoothing_ * static_cast<double>(probs_.size());
    d.kl = std::max(0.0, neg_entropy_ - observed_term - d.missing_mass * std::log(smoothing_) + std::log(denom));
    return d;
  }

 private:
  std::vector<double> probs_;
  std::vector<double> cdf_;
  std::vector<std::uint32_t> counts_;
  std::vector<std::size_t> touched_;
  double smoothing_;
  double neg_entropy_ = 0.0;
};

struct DecayRow {
  std::size_t k = 0;
  double mean_missing_mass = 0.0;
  double std_missing_mass = 0.0;
  double mean_kl = 0.0;
};

struct DecayFitReport {
  std::vector<DecayRow> rows;
  std::size_t repeats = 0;
  std::size_t fit_points = 0;
  double slope = 0.0;        // d log mean U_k / d log k over the fitted points
  double gamma_hat = 0.0;    // -slope
  double beta = 0.0;         // (alpha - 1) / alpha for the model
  double c1 = 0.0;           // exp(intercept) of the missing-mass fit
  double c2 = 0.0;           // least-squares weight of sqrt(ln(1/delta)/k) in the KL residual
  double delta = 0.1;
  double slope_tolerance = 0.1;
  bool kl_non_increasing = false;
  bool pass = false;
};

struct DecayOptions {
  double smoothing = 0.5;
  double delta = 0.1;
  double slope_tolerance = 0.1;
};

// Ordinary least squares y = a + b x; returns {a, b}.
inline std::pair<double, double> fit_line(std::span<const double> x, std::span<const double> y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  const double b = sxy / sxx;
  return {my - b * mx, b};
}

// Mean missing mass and smoothed KL for each k, then a log-log slope fit over
// the larger half of the k grid (never fewer than 3 points). Each (k, repeat)
// pair has its own RNG stream derived from the master seed.
inline DecayFitReport run_decay_experiment(std::span<const double> probs, double beta, std::vector<std::size_t> ks,
                                           std::size_t repeats, std::uint64_t seed, DecayOptions opts = {}) {
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  if (ks.size() < 3) throw InputError("run_decay_experiment: need at least 3 distinct k values");
  if (ks.front() < 1) throw InputError("run_decay_experiment: k must be >= 1");
  if (repeats < 1) throw InputError("run_decay_experiment: repeats must be >= 1");

  MissingMassSampler sampler(probs, opts.smoothing);
  DecayFitReport rep;
  rep.repeats = repeats;
  rep.beta = beta;
  rep.delta = opts.delta;
  rep.slope_tolerance = opts.slope_tolerance;
  for (std::size_t ki = 0; ki < ks.size(); ++ki) {
    double sum_u = 0.0, sum_u2 = 0.0, sum_kl = 0.0;
    for (std::size_t r = 0; r < repeats; ++r) {
      Rng rng(substream_seed(seed, "decay", ki * repeats + r));
      const auto d = sampler.draw(ks[ki], rng);
      sum_u += d.missing_mass;
      sum_u2 += d.missing_mass * d.missing_mass;
      sum_kl += d.kl;
    }
    const double n = static_cast<double>(repeats);
    DecayRow row;
    row.k = ks[ki];
    row.mean_missing_mass = sum_u / n;
    row.std_missing_mass = repeats > 1 ? std::sqrt(std::max(0.0, (sum_u2 - n * row.mean_missing_mass * row.mean_missing_mass) / (n - 1.0))) : 0.0;
    row.mean_kl = sum_kl / n;
    rep.rows.push_back(row);
  }

  const std::size_t fit_count = std::max<std::size_t>(3, (ks.size() + 1) / 2);
  std::vector<double> lx, ly;
  for (std::size_t i = ks.size() - fit_count; i < ks.size(); ++i) {
    if (rep.rows[i].mean_missing_mass <= 0.0) continue;
    lx.push_back(std::log(static_cast<double>(rep.rows[i].k)));
    ly.push_back(std::log(rep.rows[i].mean_missing_mass));
  }
  rep.fit_points = lx.size();
  if (lx.size() >= 2) {
    const auto [a, b] = fit_line(lx, ly);
    rep.slope = b;
    rep.gamma_hat = -b;
    rep.c1 = std::exp(a);
  }
  // C2 for the remaining KL after the fitted polynomial term.
  double num = 0.0, den = 0.0;
  for (const auto& row : rep.rows) {
    const double kk = static_cast<double>(row.k);
    const double basis = std::sqrt(std::log(1.0 / opts.delta) / kk);
    const double resid = row.mean_kl - rep.c1 * std::pow(kk, -rep.gamma_hat);
    num += basis * resid;
    den += basis * basis;
  }
  rep.c2 = den > 0.0 ? num / den : 0.0;

  rep.kl_non_increasing = true;
  for (std::size_t i = 1; i < rep.rows.size(); ++i)
    if (rep.rows[i].mean_kl > rep.rows[i - 1].mean_kl) rep.kl_non_increasing = false;
  rep.pass = rep.fit_points >= 3 && std::isfinite(rep.slope) &&
             std::abs(rep.slope + beta) <= opts.slope_tolerance && rep.kl_non_increasing;
  return rep;
}

inline DecayFitReport run_decay_experiment(const ZipfModel& model, std::vector<std::size_t> ks, std::size_t repeats,
                                           std::uint64_t seed, DecayOptions opts = {}) {
  return run_decay_experiment(model.probs, model.beta(), std::move(ks), repeats, seed, opts);
}

struct HoeffdingReport {
  std::size_t k = 0;
  std::size_t repeats = 0;
  double delta = 0.1;
  double band = 0.0;  // sqrt(ln(2/delta) / (2k))
  double mean_missing_mass = 0.0;
  double violation_rate = 0.0;

  bool ok() const { return violation_rate <= delta; }
};

// Fraction of repeats whose missing mass leaves the Hoeffding band around the
// empirical mean.
inline HoeffdingReport hoeffding_check(std::span<const double> probs, std::size_t k, std::size_t repeats, double delta,
                                       std::uint64_t seed) {
  if (k < 1 || repeats < 1) throw InputError("hoeffding_check: k and repeats must be >= 1");
  if (!(delta > 0.0 && delta < 1.0)) throw InputError("hoeffding_check: delta must be in (0, 1)");
  MissingMassSampler sampler(probs, 0.5);
  std::vector<double> us(repeats);
  for (std::size_t r = 0; r < repeats; ++r) {
    Rng rng(substream_seed(seed, "hoeffding", r));
    us[r] = sampler.draw(k, rng).missing_mass;
  }
  HoeffdingReport rep;
  rep.k = k;
  rep.repeats = repeats;
  rep.delta = delta;
  rep.band = std::sqrt(std::log(2.0 / delta) / (2.0 * static_cast<double>(k)));
  rep.mean_missing_mass = std::accumulate(us.begin(), us.end(), 0.0) / static_cast<double>(repeats);
  std::size_t out = 0;
  for (double u : us)
    if (std::abs(u - rep.mean_missing_mass) > rep.band) ++out;
  rep.violation_rate = static_cast<double>(out) / static_cast<double>(repeats);
  return rep;
}

}  // namespace disaad
