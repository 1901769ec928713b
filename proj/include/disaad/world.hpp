#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "disaad/common.hpp"
#include "disaad/vocab.hpp"

// Synthetic fact world. A table of (subject, relation, object) facts is split
// into facts the target model is trained on and facts withheld from it; the
// target then answers questions about both, and only the known ones reliably.
namespace disaad {

enum class FactSplit { known, withheld };
enum class PromptSource { in_domain, open_domain };

inline const char* to_string(FactSplit s) { return s == FactSplit::known ? "known" : "withheld"; }
inline const char* to_string(PromptSource s) { return s == PromptSource::in_domain ? "in-domain" : "open-domain"; }

inline PromptSource parse_source(const std::string& s) {
  if (s == "in-domain") return PromptSource::in_domain;
  if (s == "open-domain") return PromptSource::open_domain;
  throw InputError("unknown prompt source '" + s + "'");
}

struct Fact {
  std::string subject;
  std::string relation;
  std::string object;
  FactSplit split = FactSplit::known;
  bool proxy_known = false;  // part of the base proxy's pretraining corpus (either split)
};

struct QaItem {
  std::string id;
  TokenSeq prompt;
  std::vector<TokenSeq> gold;
  PromptSource source = PromptSource::in_domain;
  std::size_t fact = 0;  // index into World::facts; subject index for open-domain prompts
};

struct WorldConfig {
  std::size_t subjects = 8;
  std::size_t relations = 4;
  std::size_t objects_per_relation = 6;
  double withheld_fraction = 0.3;
  // The base proxy is pretrained on its own slice of the true fact table:
  // these shares of the target-known and of the withheld facts.
  double proxy_known_fraction = 2.0 / 3.0;
  double proxy_withheld_fraction = 1.0 / 3.0;
  std::size_t question_forms = 4;     // question phrasings per fact
  std::size_t paraphrases = 7;        // open-domain prompt templates per subject
};

struct World {
  Vocabulary vocab;
  std::vector<Fact> facts;
  std::vector<QaItem> in_domain;    // question_forms questions per fact
  std::vector<QaItem> open_domain;  // subject descriptions
  std::vector<TokenSeq> target_corpus;
  std::vector<TokenSeq> proxy_corpus;
};

namespace world_detail {

struct RelationSpec {
  const char* name;
  std::vector<const char*> objects;
};

inline const std::vector<RelationSpec>& relation_specs() {
  static const std::vector<RelationSpec> specs = {
      {"color", {"red", "blue", "green", "yellow", "purple", "orange", "white", "black"}},
      {"size", {"tiny", "small", "medium", "large", "huge", "giant", "narrow", "wide"}},
      {"home", {"city", "village", "forest", "desert", "island", "mountain", "valley", "harbor"}},
      {"food", {"bread", "rice", "soup", "fruit", "cheese", "noodles", "beans", "honey"}},
      {"job", {"baker", "farmer", "pilot", "doctor", "singer", "painter", "sailor", "miner"}},
      {"pet", {"cat", "dog", "parrot", "horse", "turtle", "rabbit", "goat", "owl"}},
      {"tool", {"hammer", "saw", "rope", "lamp", "shovel", "needle", "ladder", "compass"}},
      {"season", {"spring", "summer", "autumn", "winter", "monsoon", "drought", "thaw", "frost"}},
  };
  return specs;
}

inline const std::vector<std::vector<std::string>>& paraphrase_templates() {
  static const std::vector<std::vector<std::string>> t = {
      {"tell", "me", "about", "$S", "."},
      {"what", "do", "you", "know", "about", "$S", "?"},
      {"describe", "$S", "."},
      {"give", "facts", "on", "$S", "."},
      {"who", "is", "$S", "?"},
      {"talk", "about", "$S", "."},
      {"list", "facts", "on", "$S", "."},
      {"what", "is", "$S", "like", "?"},
  };
  return t;
}

inline std::string subject_name(std::size_t i) {
  std::string s = "e";
  if (i < 10) s += '0';
  return s + std::to_string(i);
}

}  // namespace world_detail

inline constexpr std::size_t kQuestionForms = 4;

// Every form ends in "the <relation> of <subject> ? a :".
// form 0: "q : what is the <relation> of <subject> ? a :"
// form 1: "q : tell me the <relation> of <subject> ? a :"
// form 2: "q : name the <relation> of <subject> ? a :"
// form 3: "q : recall the <relation> of <subject> ? a :"
inline std::vector<std::string> question_words(const Fact& f, std::size_t form = 0) {
  std::vector<std::string> w;
  switch (form) {
    case 0: w = {"q", ":", "what", "is"}; break;
    case 1: w = {"q", ":", "tell", "me"}; break;
    case 2: w = {"q", ":", "name"}; break;
    case 3: w = {"q", ":", "recall"}; break;
    default: throw InputError("question form out of range");
  }
  for (const auto& t : {std::string("the"), f.relation, std::string("of"), f.subject, std::string("?"),
                        std::string("a"), std::string(":")})
    w.push_back(t);
  return w;
}

// Concise answer: "<object> ."
inline std::vector<std::string> answer_words(const Fact& f) { return {f.object, "."}; }

// "the <relation> of <subject> is <object> ."
inline std::vector<std::string> statement_words(const Fact& f) {
  return {"the", f.relation, "of", f.subject, "is", f.object, "."};
}

inline TokenSeq encode_words(const Vocabulary& v, const std::vector<std::string>& words, SeqRole role) {
  TokenSeq s{{}, role};
  for (const auto& w : words) s.ids.push_back(v.id(w));
  return s;
}

inline World generate_world(const WorldConfig& cfg, std::uint64_t seed) {
  using namespace world_detail;
  const auto& specs = relation_specs();
  if (cfg.subjects < 1) throw InputError("world: need at least one subject");
  if (cfg.relations < 1 || cfg.relations > specs.size())
    throw InputError("world: relations must be in [1, " + std::to_string(specs.size()) + "]");
  if (cfg.objects_per_relation < 2 || cfg.objects_per_relation > specs.front().objects.size())
    throw InputError("world: objects_per_relation must be in [2, 8]");
  if (!(cfg.withheld_fraction > 0.0 && cfg.withheld_fraction <= 0.5))
    throw InputError("world: withheld_fraction must be in (0, 0.5]");
  if (!(cfg.proxy_known_fraction >= 0.0 && cfg.proxy_known_fraction <= 1.0) ||
      !(cfg.proxy_withheld_fraction >= 0.0 && cfg.proxy_withheld_fraction <= 1.0))
    throw InputError("world: proxy fractions must be in [0, 1]");
  if (cfg.question_forms < 1 || cfg.question_forms > kQuestionForms)
    throw InputError("world: question_forms must be in [1, " + std::to_string(kQuestionForms) + "]");
  if (cfg.paraphrases < 1 || cfg.paraphrases > paraphrase_templates().size())
    throw InputError("world: paraphrases must be in [1, " + std::to_string(paraphrase_templates().size()) + "]");

  Rng rng(substream_seed(seed, "world"));
  World w;

  // Vocabulary in a fixed order: template words, relations and objects, subjects.
  for (const char* t : {"q", ":", "what", "is", "the", "of", "?", "a", ".", "tell", "me", "about", "do", "you",
                        "know", "describe", "give", "facts", "on", "name", "recall", "who", "talk", "list", "like"})
    w.vocab.intern(t);
  for (std::size_t r = 0; r < cfg.relations; ++r) {
    w.vocab.intern(specs[r].name);
    for (std::size_t o = 0; o < cfg.objects_per_relation; ++o) w.vocab.intern(specs[r].objects[o]);
  }
  for (std::size_t s = 0; s < cfg.subjects; ++s) w.vocab.intern(subject_name(s));

  for (std::size_t s = 0; s < cfg.subjects; ++s)
    for (std::size_t r = 0; r < cfg.relations; ++r)
      w.facts.push_back({subject_name(s), specs[r].name, specs[r].objects[rng.below(cfg.objects_per_relation)],
                         FactSplit::known, false});

  const std::size_t total = w.facts.size();
  const auto withheld = static_cast<std::size_t>(std::llround(cfg.withheld_fraction * static_cast<double>(total)));
  if (withheld < 1 || withheld >= total) throw InputError("world: withheld split leaves an empty side");
  std::vector<std::size_t> order(total);
  for (std::size_t i = 0; i < total; ++i) order[i] = i;
  rng.shuffle(order);
  for (std::size_t i = 0; i < withheld; ++i) w.facts[order[i]].split = FactSplit::withheld;
  auto mark_proxy = [&](std::vector<std::size_t> idx, double fraction) {
    std::sort(idx.begin(), idx.end());
    rng.shuffle(idx);
    const auto n = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
    for (std::size_t i = 0; i < n; ++i) w.facts[idx[i]].proxy_known = true;
  };
  mark_proxy(std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(withheld), order.end()),
             cfg.proxy_known_fraction);
  mark_proxy(std::vector<std::size_t>(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(withheld)),
             cfg.proxy_withheld_fraction);

  for (std::size_t i = 0; i < total; ++i)
    for (std::size_t form = 0; form < cfg.question_forms; ++form) {
      const Fact& f = w.facts[i];
      QaItem q;
      q.id = "qa-" + std::to_string(i) + "-" + std::to_string(form);
      q.prompt = encode_words(w.vocab, question_words(f, form), SeqRole::prompt);
      q.gold = {encode_words(w.vocab, {f.object}, SeqRole::response)};
      q.source = PromptSource::in_domain;
      q.fact = i;
      w.in_domain.push_back(std::move(q));
    }

  auto description = [&](std::size_t s, bool for_proxy) {
    std::vector<std::string> words;
    for (std::size_t r = 0; r < cfg.relations; ++r) {
      const Fact& f = w.facts[s * cfg.relations + r];
      const bool include = for_proxy ? f.proxy_known : f.split == FactSplit::known;
      if (!include) continue;
      const auto st = statement_words(f);
      words.insert(words.end(), st.begin(), st.end());
    }
    return words;
  };

  for (std::size_t s = 0; s < cfg.subjects; ++s)
    for (std::size_t p = 0; p < cfg.paraphrases; ++p) {
      std::vector<std::string> words = paraphrase_templates()[p];
      std::replace(words.begin(), words.end(), std::string("$S"), subject_name(s));
      QaItem q;
      q.id = "od-" + std::to_string(s) + "-" + std::to_string(p);
      q.prompt = encode_words(w.vocab, words, SeqRole::prompt);
      q.source = PromptSource::open_domain;
      q.fact = s;
      for (std::size_t r = 0; r < cfg.relations; ++r)
        q.gold.push_back(encode_words(w.vocab, {w.facts[s * cfg.relations + r].object}, SeqRole::response));
      w.open_domain.push_back(std::move(q));
    }

  auto build_corpus = [&](bool for_proxy) {
    std::vector<TokenSeq> corpus;
    for (const auto& q : w.in_domain) {
      const Fact& f = w.facts[q.fact];
      if (for_proxy ? !f.proxy_known : f.split != FactSplit::known) continue;
      TokenSeq line = q.prompt;
      line.role = SeqRole::response;
      const auto ans = encode_words(w.vocab, answer_words(f), SeqRole::response);
      line.ids.insert(line.ids.end(), ans.ids.begin(), ans.ids.end());
      corpus.push_back(std::move(line));
    }
    for (const auto& q : w.open_domain) {
      const auto desc = description(q.fact, for_proxy);
      if (desc.empty()) continue;
      TokenSeq line = q.prompt;
      line.role = SeqRole::response;
      const auto d = encode_words(w.vocab, desc, SeqRole::response);
      line.ids.insert(line.ids.end(), d.ids.begin(), d.ids.end());
      corpus.push_back(std::move(line));
    }
    return corpus;
  };
  w.target_corpus = build_corpus(false);
  w.proxy_corpus = build_corpus(true);
  return w;
}

// True when `corpus` states `fact`, either as a description sentence
// ("<relation> of <subject> is <object>") or as an answered question
// ("<relation> of <subject> ? a : <object>"), as a contiguous token run.
inline bool corpus_states_fact(const std::vector<TokenSeq>& corpus, const Vocabulary& vocab, const Fact& fact) {
  const TokenId rel = vocab.id(fact.relation), of = vocab.id("of"), subj = vocab.id(fact.subject),
                obj = vocab.id(fact.object);
  const std::vector<std::vector<TokenId>> needles = {
      {rel, of, subj, vocab.id("is"), obj},
      {rel, of, subj, vocab.id("?"), vocab.id("a"), vocab.id(":"), obj},
  };
  for (const auto& seq : corpus)
    for (const auto& n : needles)
      if (std::search(seq.ids.begin(), seq.ids.end(), n.begin(), n.end()) != seq.ids.end()) return true;
  return false;
}

}  // namespace disaad
