#pragma once

// Independent reference computations used by the unit and acceptance tests.
// None of these call into the library's metric or evidence code.

#include <cmath>
#include <numbers>
#include <set>
#include <vector>

#include "disaad/evalmetrics.hpp"

namespace oracle {

inline constexpr double kEulerGamma = 0.57721566490153286060651209008240243;

// psi(n) = -gamma + sum_{k<n} 1/k for integer n >= 1
inline double digamma_int(int n) {
  double s = -kEulerGamma;
  for (int k = 1; k < n; ++k) s += 1.0 / k;
  return s;
}

// psi(n + 1/2) = -gamma - 2 ln 2 + sum_{k=1..n} 2/(2k-1)
inline double digamma_half(int n) {
  double s = -kEulerGamma - 2.0 * std::numbers::ln2;
  for (int k = 1; k <= n; ++k) s += 2.0 / (2.0 * k - 1.0);
  return s;
}

// AU / EU for integer evidence, written straight from the definitions.
inline double au_int(const std::vector<int>& alphas) {
  int a0 = 0;
  for (int a : alphas) a0 += a;
  if (a0 == 0) return std::log(static_cast<double>(alphas.size()));
  double au = 0.0;
  for (int a : alphas)
    if (a > 0) au -= (static_cast<double>(a) / a0) * (digamma_int(a + 1) - digamma_int(a0 + 1));
  return au;
}

inline double eu_int(const std::vector<int>& alphas) {
  int a0 = 0;
  for (int a : alphas) a0 += a;
  return static_cast<double>(alphas.size()) / (a0 + static_cast<double>(alphas.size()));
}

// Pairwise Mann-Whitney count.
inline double auroc_pairs(const std::vector<disaad::LabeledScore>& items) {
  double num = 0.0, den = 0.0;
  for (const auto& p : items) {
    if (p.label != 1) continue;
    for (const auto& n : items) {
      if (n.label != 0) continue;
      den += 1.0;
      if (p.score > n.score) num += 1.0;
      else if (p.score == n.score) num += 0.5;
    }
  }
  return num / den;
}

// Precision and recall at every distinct threshold, each recounted from scratch.
inline double aupr_thresholds(const std::vector<disaad::LabeledScore>& items) {
  std::set<double, std::greater<>> thresholds;
  double pos = 0.0;
  for (const auto& x : items) {
    thresholds.insert(x.score);
    pos += x.label;
  }
  double area = 0.0, prev_recall = 0.0;
  for (double t : thresholds) {
    double tp = 0.0, fp = 0.0;
    for (const auto& x : items)
      if (x.score >= t) (x.label ? tp : fp) += 1.0;
    const double recall = tp / pos;
    area += (recall - prev_recall) * (tp / (tp + fp));
    prev_recall = recall;
  }
  return area;
}

}  // namespace oracle
