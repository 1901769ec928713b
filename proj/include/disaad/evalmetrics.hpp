#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "disaad/common.hpp"
#include "disaad/vocab.hpp"

namespace disaad {

struct LabeledScore {
  double score = 0.0;
  int label = 0;  // 1 = correct response
};

struct CalibrationBin {
  double lower = 0.0;
  double upper = 0.0;
  std::size_t count = 0;
  double confidence = 0.0;  // mean confidence of members
  double accuracy = 0.0;
  double weight = 0.0;      // count / n
};

struct CalibrationReport {
  double ece = 0.0;
  std::size_t bins = 0;
  std::vector<CalibrationBin> per_bin;
};

inline void check_labeled(std::span<const LabeledScore> items, std::size_t& pos, std::size_t& neg) {
  pos = neg = 0;
  for (const auto& it : items) {
    if (!std::isfinite(it.score)) throw InputError("metric input has a non-finite score");
    if (it.label == 1)
      ++pos;
    else if (it.label == 0)
      ++neg;
    else
      throw InputError("labels must be 0 or 1");
  }
}

// Mann-Whitney form of AUROC: P(score_pos > score_neg) + P(tie) / 2, computed
// from midranks. The numerator is a half-integer so the result is exact.
inline double auroc(std::span<const LabeledScore> items) {
  std::size_t pos = 0, neg = 0;
  check_labeled(items, pos, neg);
  if (pos == 0 || neg == 0) throw UndefinedMetricError("auroc needs both positive and negative labels");
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return items[a].score < items[b].score; });
  // Twice the rank sum of the positives, kept integral.
  double twice_rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && items[order[j]].score == items[order[i]].score) ++j;
    // ranks i+1..j share the midrank (i+1+j)/2
    const double twice_mid = static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (items[order[k]].label == 1) twice_rank_sum += twice_mid;
    i = j;
  }
  const double p = static_cast<double>(pos);
  const double u_twice = twice_rank_sum - p * (p + 1.0);
  return u_twice / (2.0 * p * static_cast<double>(neg));
}

// Average precision: sum over distinct descending thresholds of
// (recall_i - recall_{i-1}) * precision_i.
inline double aupr(std::span<const LabeledScore> items) {
  std::size_t pos = 0, neg = 0;
  check_labeled(items, pos, neg);
  if (pos == 0) throw UndefinedMetricError("aupr needs at least one positive label");
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return items[a].score > items[b].score; });
  double area = 0.0, prev_recall = 0.0;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && items[order[j]].score == items[order[i]].score) {
      if (items[order[j]].label == 1)
        ++tp;
      else
        ++fp;
      ++j;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    area += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return area;
}

inline constexpr std::size_t kDefaultEceBins = 10;

// Equal-width bins on [0, 1]; confidence 1.0 lands in the last bin.
inline CalibrationReport ece(std::span<const double> confidences, std::span<const int> labels,
                             std::size_t bins = kDefaultEceBins) {
  if (bins < 1) throw InputError("ece: bins must be >= 1");
  if (confidences.size() != labels.size()) throw InputError("ece: confidences and labels differ in length");
  if (confidences.empty()) throw InputError("ece: empty input");
  CalibrationReport rep;
  rep.bins = bins;
  rep.per_bin.resize(bins);
  std::vector<double> conf_sum(bins, 0.0), correct(bins, 0.0);
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    const double c = confidences[i];
    if (!(c >= 0.0 && c <= 1.0)) throw InputError("ece: confidence outside [0, 1]");
    if (labels[i] != 0 && labels[i] != 1) throw InputError("ece: labels must be 0 or 1");
    const auto b = std::min(bins - 1, static_cast<std::size_t>(c * static_cast<double>(bins)));
    ++rep.per_bin[b].count;
    conf_sum[b] += c;
    correct[b] += labels[i];
  }
  const double n = static_cast<double>(confidences.size());
  for (std::size_t b = 0; b < bins; ++b) {
    auto& bin = rep.per_bin[b];
    bin.lower = static_cast<double>(b) / static_cast<double>(bins);
    bin.upper = static_cast<double>(b + 1) / static_cast<double>(bins);
    if (bin.count == 0) continue;
    const double cnt = static_cast<double>(bin.count);
    bin.confidence = conf_sum[b] / cnt;
    bin.accuracy = correct[b] / cnt;
    bin.weight = cnt / n;
    rep.ece += bin.weight * std::abs(bin.accuracy - bin.confidence);
  }
  return rep;
}

// Affine min-max map of reliability scores onto [0, 1]; a constant list maps to 0.5.
inline std::vector<double> reliability_to_confidence(std::span<const double> scores) {
  if (scores.empty()) throw InputError("reliability_to_confidence: empty input");
  const auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
  const double range = *hi - *lo;
  std::vector<double> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i)
    out[i] = range > 0.0 ? (scores[i] - *lo) / range : 0.5;
  return out;
}

inline bool is_punctuation_token(const std::string& t) {
  return !t.empty() && std::all_of(t.begin(), t.end(), [](unsigned char c) { return std::ispunct(c) != 0; });
}

// Lowercases and drops tokens made only of punctuation.
inline std::vector<std::string> normalize_answer(const std::vector<std::string>& words) {
  std::vector<std::string> out;
  for (auto w : words) {
    if (is_punctuation_token(w)) continue;
    std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    out.push_back(std::move(w));
  }
  return out;
}

// 1 iff the normalized response contains a normalized gold answer as a
// contiguous run of words.
inline int label_correctness(const std::vector<std::string>& response,
                             const std::vector<std::vector<std::string>>& gold) {
  if (gold.empty()) throw InputError("label_correctness: gold set is empty");
  const auto resp = normalize_answer(response);
  for (const auto& g : gold) {
    const auto ans = normalize_answer(g);
    if (ans.empty()) continue;
    if (std::search(resp.begin(), resp.end(), ans.begin(), ans.end()) != resp.end()) return 1;
  }
  return 0;
}

inline int label_correctness(const TokenSeq& response, const std::vector<TokenSeq>& gold, const Vocabulary& vocab) {
  auto words = [&](const TokenSeq& s) {
    std::vector<std::string> w;
    for (TokenId t : s.ids) w.push_back(vocab.token(t));
    return w;
  };
  std::vector<std::vector<std::string>> g;
  for (const auto& s : gold) g.push_back(words(s));
  return label_correctness(words(response), g);
}

}  // namespace disaad
