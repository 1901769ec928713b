#include <gtest/gtest.h>

#include <set>

#include "disaad/world.hpp"

using namespace disaad;

TEST(World, SplitArithmetic) {
  WorldConfig cfg;
  cfg.subjects = 25;
  cfg.relations = 4;
  cfg.withheld_fraction = 0.3;
  const auto w = generate_world(cfg, 1);
  ASSERT_EQ(w.facts.size(), 100u);
  std::size_t withheld = 0;
  for (const auto& f : w.facts) withheld += f.split == FactSplit::withheld;
  EXPECT_EQ(withheld, 30u);
  std::size_t in_corpus = 0;
  for (const auto& f : w.facts) in_corpus += corpus_states_fact(w.target_corpus, w.vocab, f);
  EXPECT_EQ(in_corpus, 70u);
}

TEST(World, Deterministic) {
  const auto a = generate_world({}, 7);
  const auto b = generate_world({}, 7);
  EXPECT_EQ(a.vocab, b.vocab);
  EXPECT_EQ(a.target_corpus, b.target_corpus);
  EXPECT_EQ(a.proxy_corpus, b.proxy_corpus);
  ASSERT_EQ(a.facts.size(), b.facts.size());
  for (std::size_t i = 0; i < a.facts.size(); ++i) {
    EXPECT_EQ(a.facts[i].object, b.facts[i].object);
    EXPECT_EQ(a.facts[i].split, b.facts[i].split);
  }
  const auto c = generate_world({}, 8);
  EXPECT_NE(a.target_corpus, c.target_corpus);
}

// Exhaustive scan: no withheld fact is stated anywhere in the target corpus,
// and the proxy corpus states exactly its own facts.
TEST(World, WithheldFactsAbsentFromTargetCorpus) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto w = generate_world({}, seed);
    for (const auto& f : w.facts) {
      EXPECT_EQ(corpus_states_fact(w.target_corpus, w.vocab, f), f.split == FactSplit::known);
      EXPECT_EQ(corpus_states_fact(w.proxy_corpus, w.vocab, f), f.proxy_known);
    }
  }
}

TEST(World, QaCoversBothSplitsWithValidItems) {
  const WorldConfig cfg;
  const auto w = generate_world(cfg, 3);
  std::set<FactSplit> splits;
  std::set<std::string> ids;
  for (const auto& q : w.in_domain) {
    splits.insert(w.facts[q.fact].split);
    EXPECT_FALSE(q.prompt.empty());
    ASSERT_FALSE(q.gold.empty());
    for (const auto& g : q.gold) EXPECT_LE(g.size(), 40u);
    EXPECT_TRUE(ids.insert(q.id).second);
  }
  EXPECT_EQ(splits.size(), 2u);
  EXPECT_EQ(w.in_domain.size(), w.facts.size() * cfg.question_forms);
  EXPECT_EQ(w.open_domain.size(), cfg.subjects * cfg.paraphrases);
  for (const auto& q : w.open_domain) EXPECT_TRUE(ids.insert(q.id).second);
}

TEST(World, UniqueSubjectRelationKeys) {
  const auto w = generate_world({}, 2);
  std::set<std::pair<std::string, std::string>> keys;
  for (const auto& f : w.facts) EXPECT_TRUE(keys.insert({f.subject, f.relation}).second);
}

TEST(World, RejectsInconsistentConfig) {
  WorldConfig cfg;
  cfg.withheld_fraction = 1.0;
  EXPECT_THROW(generate_world(cfg, 1), InputError);
  cfg.withheld_fraction = 0.0;
  EXPECT_THROW(generate_world(cfg, 1), InputError);
  cfg = {};
  cfg.proxy_known_fraction = 1.5;
  EXPECT_THROW(generate_world(cfg, 1), InputError);
  cfg = {};
  cfg.question_forms = 0;
  EXPECT_THROW(generate_world(cfg, 1), InputError);
}
