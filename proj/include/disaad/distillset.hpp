#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "disaad/common.hpp"
#include "disaad/tinylm.hpp"
#include "disaad/vocab.hpp"
#include "disaad/world.hpp"

// Distillation data collection against a sampled-only target: mix in-domain
// and open-domain prompts, draw one low-temperature and several
// high-temperature answers per prompt, drop weak candidates, and keep the
// high-temperature answers closest to the low-temperature one.
namespace disaad {

struct PromptEntry {
  std::string id;
  TokenSeq prompt;
  PromptSource source = PromptSource::in_domain;
};

struct PromptSet {
  std::vector<PromptEntry> prompts;

  std::size_t count(PromptSource s) const {
    return static_cast<std::size_t>(
        std::count_if(prompts.begin(), prompts.end(), [s](const PromptEntry& p) { return p.source == s; }));
  }
};

inline PromptEntry to_prompt_entry(const QaItem& q) { return {q.id, q.prompt, q.source}; }

// floor(N/2) open-domain and ceil(N/2) in-domain prompts, each drawn without
// replacement, merged and shuffled.
inline PromptSet mix_prompts(const std::vector<PromptEntry>& in_domain, const std::vector<PromptEntry>& open_domain,
                             std::size_t n, std::uint64_t seed) {
  const std::size_t n_open = n / 2;
  const std::size_t n_in = n - n_open;
  if (in_domain.size() < n_in || open_domain.size() < n_open)
    throw InputError("mix_prompts: need " + std::to_string(n_in) + " in-domain and " + std::to_string(n_open) +
                     " open-domain prompts, have " + std::to_string(in_domain.size()) + " and " +
                     std::to_string(open_domain.size()));
  auto take = [&](const std::vector<PromptEntry>& src, std::size_t k, const char* stream) {
    std::vector<std::size_t> idx(src.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(substream_seed(seed, stream));
    rng.shuffle(idx);
    std::vector<PromptEntry> out;
    for (std::size_t i = 0; i < k; ++i) out.push_back(src[idx[i]]);
    return out;
  };
  PromptSet set;
  set.prompts = take(in_domain, n_in, "mix-in");
  const auto open = take(open_domain, n_open, "mix-open");
  set.prompts.insert(set.prompts.end(), open.begin(), open.end());
  Rng rng(substream_seed(seed, "mix-merge"));
  rng.shuffle(set.prompts);
  return set;
}

// The only view of the target model the collection pipeline gets: text in,
// sampled text out. No logits, no parameters.
class SamplingTarget {
 public:
  using SampleFn = std::function<TokenSeq(const TokenSeq& prompt, double temperature, std::uint64_t seed)>;

  explicit SamplingTarget(SampleFn fn) : fn_(std::move(fn)) {}

  TokenSeq sample(const TokenSeq& prompt, double temperature, std::uint64_t seed) const {
    try {
      return fn_(prompt, temperature, seed);
    } catch (const std::exception& e) {
      throw GenerationError(std::string("target generation failed: ") + e.what());
    }
  }

 private:
  SampleFn fn_;
};

// Wraps a local model behind the sampling-only interface. The model is copied
// into the closure so callers cannot reach it through the handle.
inline SamplingTarget sampling_handle(LmParams model, std::size_t max_len) {
  return SamplingTarget([m = std::move(model), max_len](const TokenSeq& prompt, double t, std::uint64_t seed) {
    return sample_sequence(m, prompt, t, max_len, seed);
  });
}

struct CollectConfig {
  double low_temperature = 0.01;
  double high_temperature = 0.8;
  std::size_t high_samples = 14;
};

struct CandidatePool {
  TokenSeq prompt;
  TokenSeq low_temp_response;
  std::vector<TokenSeq> high_temp_responses;

  std::size_t size() const { return 1 + high_temp_responses.size(); }
};

inline CandidatePool collect_candidates(const SamplingTarget& target, const TokenSeq& prompt,
                                        const CollectConfig& cfg, std::uint64_t seed) {
  if (!(cfg.high_temperature > 0.5)) throw InputError("collect_candidates: high temperature must exceed 0.5");
  CandidatePool pool;
  pool.prompt = prompt;
  pool.low_temp_response = target.sample(prompt, cfg.low_temperature, substream_seed(seed, "low"));
  for (std::size_t j = 0; j < cfg.high_samples; ++j)
    pool.high_temp_responses.push_back(target.sample(prompt, cfg.high_temperature, substream_seed(seed, "high", j)));
  return pool;
}

// Cosine similarity of token-count vectors.
inline double semantic_similarity(const TokenSeq& a, const TokenSeq& b) {
  if (a.empty() || b.empty()) throw InputError("semantic_similarity: sequences must be non-empty");
  std::map<TokenId, double> ca, cb;
  for (TokenId t : a.ids) ca[t] += 1.0;
  for (TokenId t : b.ids) cb[t] += 1.0;
  double dot_ab = 0.0, na = 0.0, nb = 0.0;
  for (const auto& [t, c] : ca) {
    na += c * c;
    if (auto it = cb.find(t); it != cb.end()) dot_ab += c * it->second;
  }
  for (const auto& [t, c] : cb) nb += c * c;
  return std::clamp(dot_ab / std::sqrt(na * nb), 0.0, 1.0);
}

// True when some n-gram occurs at least `max_occurrences` times.
inline bool is_repetitive(const TokenSeq& s, std::size_t n, std::size_t max_occurrences) {
  if (n == 0 || s.size() < n) return false;
  std::map<std::vector<TokenId>, std::size_t> counts;
  for (std::size_t i = 0; i + n <= s.size(); ++i)
    if (++counts[std::vector<TokenId>(s.ids.begin() + static_cast<std::ptrdiff_t>(i),
                                      s.ids.begin() + static_cast<std::ptrdiff_t>(i + n))] >= max_occurrences)
      return true;
  return false;
}

// Linear-interpolation percentile (q in [0, 100]).
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw InputError("percentile: empty input");
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct FilterConfig {
  std::size_t min_length = 15;
  std::size_t repetition_ngram = 4;
  std::size_t repetition_max = 3;
  double perplexity_percentile = 95.0;  // ignored when no scoring model is given
};

// Per-sample record of what each filter removed.
struct FilterProvenance {
  std::size_t candidates = 0;
  std::size_t too_short = 0;
  std::size_t repetitive = 0;
  std::size_t high_perplexity = 0;
  std::size_t ranked_out = 0;
  double perplexity_threshold = 0.0;
  std::vector<double> selected_similarity;
  std::string rejected_by;  // empty when accepted
};

struct DistillSample {
  std::string id;
  TokenSeq prompt;
  std::vector<TokenSeq> responses;  // low-temperature response first
  PromptSource source = PromptSource::in_domain;
  FilterProvenance provenance;

  std::size_t m() const { return responses.size(); }
};

struct Selection {
  std::optional<DistillSample> sample;
  FilterProvenance provenance;

  bool accepted() const { return sample.has_value(); }
};

inline double perplexity(LmView model, const TokenSeq& prompt, const TokenSeq& response) {
  std::size_t n = 0;
  const double lp = sequence_logprob(model, prompt, response, true, &n);
  return std::exp(-lp / static_cast<double>(n));
}

// Keeps the low-temperature response plus the M-1 surviving high-temperature
// responses most similar to it (ties to the earlier draw). Fewer than M
// survivors is a rejection, not an error.
inline Selection filter_and_select(const CandidatePool& pool, std::size_t m, const FilterConfig& cfg,
                                   std::optional<LmView> scorer = std::nullopt) {
  if (m < 1) throw InputError("filter_and_select: M must be >= 1");
  Selection sel;
  FilterProvenance& prov = sel.provenance;
  prov.candidates = pool.size();

  if (pool.low_temp_response.size() < cfg.min_length || pool.low_temp_response.empty()) {
    prov.rejected_by = "length";
    return sel;
  }

  std::vector<std::size_t> survivors;
  for (std::size_t j = 0; j < pool.high_temp_responses.size(); ++j) {
    const auto& r = pool.high_temp_responses[j];
    if (r.size() < cfg.min_length || r.empty()) {
      ++prov.too_short;
    } else if (is_repetitive(r, cfg.repetition_ngram, cfg.repetition_max)) {
      ++prov.repetitive;
    } else {
      survivors.push_back(j);
    }
  }

  if (scorer && survivors.size() > 1) {
    std::vector<double> ppl;
    for (std::size_t j : survivors) ppl.push_back(perplexity(*scorer, pool.prompt, pool.high_temp_responses[j]));
    prov.perplexity_threshold = percentile(ppl, cfg.perplexity_percentile);
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < survivors.size(); ++i) {
      if (ppl[i] > prov.perplexity_threshold)
        ++prov.high_perplexity;
      else
        kept.push_back(survivors[i]);
    }
    survivors = std::move(kept);
  }

  if (survivors.size() + 1 < m) {
    // Name the filter that removed the most candidates.
    const std::pair<std::size_t, const char*> causes[] = {
        {prov.too_short, "length"}, {prov.repetitive, "repetition"}, {prov.high_perplexity, "perplexity"}};
    prov.rejected_by = "pool-size";
    std::size_t most = 0;
    for (const auto& [count, name] : causes)
      if (count > most) {
        most = count;
        prov.rejected_by = name;
      }
    return sel;
  }

  std::vector<std::pair<double, std::size_t>> ranked;
  for (std::size_t j : survivors)
    ranked.emplace_back(semantic_similarity(pool.low_temp_response, pool.high_temp_responses[j]), j);
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  prov.ranked_out = ranked.size() - (m - 1);

  DistillSample s;
  s.prompt = pool.prompt;
  s.responses.push_back(pool.low_temp_response);
  prov.selected_similarity.push_back(1.0);
  for (std::size_t i = 0; i + 1 < m; ++i) {
    s.responses.push_back(pool.high_temp_responses[ranked[i].second]);
    prov.selected_similarity.push_back(ranked[i].first);
  }
  s.provenance = prov;
  sel.sample = std::move(s);
  return sel;
}

struct DistillDataset {
  std::vector<DistillSample> samples;
  std::vector<std::pair<std::string, FilterProvenance>> rejected;

  // Filter responsible for the most rejections (for diagnostics).
  std::string dominant_rejection() const {
    std::map<std::string, std::size_t> counts;
    for (const auto& [id, p] : rejected) ++counts[p.rejected_by];
    std::string best;
    std::size_t most = 0;
    for (const auto& [name, c] : counts)
      if (c > most) {
        most = c;
        best = name;
      }
    return best;
  }
};

// Runs collection and filtering for every prompt. Prompt i draws from its own
// seed stream, so results do not depend on processing order.
inline DistillDataset build_distill_dataset(const SamplingTarget& target, const PromptSet& prompts, std::size_t m,
                                            const CollectConfig& collect, const FilterConfig& filter,
                                            std::optional<LmView> scorer, std::uint64_t seed) {
  DistillDataset ds;
  for (std::size_t i = 0; i < prompts.prompts.size(); ++i) {
    const auto& p = prompts.prompts[i];
    const auto pool = collect_candidates(target, p.prompt, collect, substream_seed(seed, "collect", i));
    auto sel = filter_and_select(pool, m, filter, scorer);
    if (sel.accepted()) {
      sel.sample->id = p.id;
      sel.sample->source = p.source;
      ds.samples.push_back(std::move(*sel.sample));
    } else {
      ds.rejected.emplace_back(p.id, sel.provenance);
    }
  }
  return ds;
}

}  // namespace disaad
