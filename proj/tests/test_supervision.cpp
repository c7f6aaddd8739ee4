#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "oracles.hpp"
#include "relweave/rng.hpp"
#include "relweave/supervision.hpp"

using namespace relweave;
using namespace relweave::supervision;

namespace {

kb::TripleIndex index_with(std::initializer_list<std::tuple<const char*, const char*, const char*>> facts,
                           bool typeless = true) {
  const auto rel = kb::RelationVocab::conceptnet();
  kb::TripleIndex index(rel, typeless);
  for (const auto& [s, r, o] : facts) {
    kb::Triple t{s, r, rel.find(r), o, 1.0};
    index.insert(std::move(t));
  }
  return index;
}

std::vector<ConceptMention> mentions(std::size_t a, std::size_t b) {
  std::vector<ConceptMention> out;
  for (std::size_t i = 0; i < a; ++i) out.push_back({"a" + std::to_string(i), Side::A, 1 + i, 1});
  for (std::size_t j = 0; j < b; ++j) out.push_back({"b" + std::to_string(j), Side::B, 40 + j, 1});
  return out;
}

text::Example make_example(std::string doc, std::string option) {
  return {"t", std::move(doc), std::nullopt, {std::move(option), "zzz"}, 0};
}

}  // namespace

TEST(Mentions, LongestMatchWins) {
  const auto index = index_with({{"boil water", "HasSubevent", "steam"}, {"water", "IsA", "liquid"}});
  const auto vocab = text::train_bpe({"we boil water now", "steam"}, 40);
  const auto packed = text::pack(make_example("we boil water now", "steam"), 0, vocab, 32);
  const auto found = find_mentions(packed, index);
  ASSERT_EQ(found.size(), 2u);
  EXPECT_EQ(found[0].phrase, "boil water");
  EXPECT_EQ(found[0].side, Side::A);
  EXPECT_EQ(found[0].begin, packed.words_a[1].position);
  EXPECT_EQ(found[1].phrase, "steam");
  EXPECT_EQ(found[1].side, Side::B);
}

TEST(Mentions, AbsentPhraseIsIgnored) {
  const auto index = index_with({{"car", "UsedFor", "driving"}});
  const auto vocab = text::train_bpe({"a boat on the lake"}, 20);
  const auto packed = text::pack(make_example("a boat on the lake", "lake"), 0, vocab, 32);
  EXPECT_TRUE(find_mentions(packed, index).empty());
}

TEST(Mentions, FirstOccurrencePerSideOnly) {
  const auto index = index_with({{"car", "UsedFor", "driving"}});
  const auto vocab = text::train_bpe({"car and car", "car"}, 20);
  const auto packed = text::pack(make_example("car and car", "car"), 0, vocab, 32);
  const auto found = find_mentions(packed, index);
  ASSERT_EQ(found.size(), 2u);
  EXPECT_EQ(found[0].begin, 1u);
  EXPECT_EQ(found[1].side, Side::B);
}

TEST(Mentions, SpanCoversSubwords) {
  const auto index = index_with({{"kettlebell", "IsA", "weight"}});
  const auto vocab = text::train_bpe({"ket tle bell"}, 3);
  const auto packed = text::pack(make_example("a kettlebell", "weight"), 0, vocab, 32);
  const auto found = find_mentions(packed, index);
  ASSERT_FALSE(found.empty());
  EXPECT_EQ(found[0].phrase, "kettlebell");
  EXPECT_GT(found[0].span, 1u);
  EXPECT_LT(found[0].begin + found[0].span, packed.sep_first + 1);
}

TEST(Mentions, AgreeWithBruteForceOnRandomDocuments) {
  std::mt19937_64 rng(21);
  std::vector<std::string> lexicon;
  for (int i = 0; i < 30; ++i) lexicon.push_back(std::string(1, static_cast<char>('a' + i % 26)) + std::to_string(i));
  const auto rel = kb::RelationVocab::conceptnet();
  kb::TripleIndex index(rel, false);
  for (int i = 0; i < 40; ++i) {
    std::string s = lexicon[uniform_index(rng, lexicon.size())];
    std::string o = lexicon[uniform_index(rng, lexicon.size())];
    if (uniform01(rng) < 0.4) s += " " + lexicon[uniform_index(rng, lexicon.size())];
    index.insert({s, "IsA", rel.find("IsA"), o, 1.0});
  }
  const auto vocab = text::train_bpe(lexicon, 50);
  for (int doc = 0; doc < 50; ++doc) {
    std::string a, b;
    for (std::size_t i = 0, n = 5 + uniform_index(rng, 40); i < n; ++i) a += lexicon[uniform_index(rng, lexicon.size())] + " ";
    for (std::size_t i = 0, n = 1 + uniform_index(rng, 4); i < n; ++i) b += lexicon[uniform_index(rng, lexicon.size())] + " ";
    const auto packed = text::pack(make_example(a, b), 0, vocab, 48);
    const auto got = find_mentions(packed, index);
    const auto want = oracle::brute_force_mentions(packed, index, kDefaultMaxNgram);
    ASSERT_EQ(got.size(), want.size()) << "document " << doc;
    for (std::size_t k = 0; k < got.size(); ++k) {
      EXPECT_EQ(got[k].phrase, want[k].phrase);
      EXPECT_EQ(static_cast<int>(got[k].side), want[k].side);
      EXPECT_EQ(got[k].begin, want[k].begin);
      EXPECT_EQ(got[k].span, want[k].span);
    }
  }
}

TEST(Sampling, RatioOfFour) {
  const auto index = index_with({{"a0", "IsA", "b0"}, {"a1", "IsA", "b1"}});
  const auto set = build_supervision(mentions(11, 2), index, 4.0, 7);
  EXPECT_EQ(set.positives(), 2u);
  EXPECT_EQ(set.negatives(), 8u);
}

TEST(Sampling, CappedByAvailableNegatives) {
  const auto index = index_with({{"a0", "IsA", "b0"}, {"a1", "IsA", "b1"}, {"a2", "IsA", "b0"}});
  const auto set = build_supervision(mentions(4, 2), index, 4.0, 7);
  EXPECT_EQ(set.positives(), 3u);
  EXPECT_EQ(set.negatives(), 5u);
}

TEST(Sampling, NoPositivesNoPairs) {
  const auto index = index_with({{"x", "IsA", "y"}});
  const auto set = build_supervision(mentions(3, 2), index, 4.0, 7);
  EXPECT_TRUE(set.pairs.empty());
  EXPECT_EQ(set.typed_count, 0u);
  const auto labels = label_matrices(set);
  EXPECT_TRUE(labels.existence.empty());
  EXPECT_TRUE(labels.type.empty());
}

TEST(Sampling, NegativeRatioRejected) {
  const auto index = index_with({{"a0", "IsA", "b0"}});
  EXPECT_THROW(build_supervision(mentions(2, 2), index, -1.0, 1), std::invalid_argument);
  EXPECT_THROW(build_supervision(mentions(2, 2), index, std::nan(""), 1), std::invalid_argument);
}

TEST(Sampling, CountMatchesFloorOverSeeds) {
  // floor(gamma * P) whenever enough negatives exist, for many layouts.
  std::mt19937_64 rng(99);
  for (std::uint64_t build = 0; build < 300; ++build) {
    const std::size_t na = 2 + uniform_index(rng, 10), nb = 1 + uniform_index(rng, 4);
    const auto rel = kb::RelationVocab::conceptnet();
    kb::TripleIndex index(rel, false);
    for (std::size_t i = 0; i < na; ++i)
      for (std::size_t j = 0; j < nb; ++j)
        if (uniform01(rng) < 0.2)
          index.insert({"a" + std::to_string(i), "IsA", rel.find("IsA"), "b" + std::to_string(j), 1.0});
    const double gamma = static_cast<double>(uniform_index(rng, 9)) / 2.0;
    const auto set = build_supervision(mentions(na, nb), index, gamma, build);
    const std::size_t p = set.positives();
    const std::size_t available = na * nb - p;
    const auto wanted = static_cast<std::size_t>(std::floor(gamma * static_cast<double>(p)));
    EXPECT_EQ(set.negatives(), std::min(wanted, available));
  }
}

TEST(Sampling, Deterministic) {
  const auto index = index_with({{"a0", "IsA", "b0"}, {"a1", "IsA", "b1"}});
  const auto m = mentions(11, 2);
  EXPECT_EQ(build_supervision(m, index, 4.0, 3), build_supervision(m, index, 4.0, 3));
  bool differs = false;
  for (std::uint64_t s = 4; s < 20 && !differs; ++s) differs = build_supervision(m, index, 4.0, s) != build_supervision(m, index, 4.0, 3);
  EXPECT_TRUE(differs);
}

TEST(Labels, TypedUntypedAndNegative) {
  const auto rel = kb::RelationVocab::conceptnet();
  kb::TripleIndex index(rel, true);
  index.insert({"a0", "UsedFor", rel.find("UsedFor"), "b0", 1.0});
  index.insert({"a1", "RelatedTo", std::nullopt, "b0", 1.0});
  index.insert({"b1", "IsA", rel.find("IsA"), "a2", 1.0});  // B -> A only
  const auto set = build_supervision(mentions(4, 2), index, 4.0, 1);
  int seen = 0;
  for (const auto& p : set.pairs) {
    if (p.a.phrase == "a0" && p.b.phrase == "b0") {
      EXPECT_EQ(p.exists, 1);
      EXPECT_EQ(p.typed, 1);
      EXPECT_EQ(p.relation, rel.find("UsedFor"));
      ++seen;
    } else if (p.a.phrase == "a1" && p.b.phrase == "b0") {
      EXPECT_EQ(p.exists, 1);
      EXPECT_EQ(p.typed, 0);
      EXPECT_FALSE(p.relation);
      ++seen;
    } else if (p.a.phrase == "a2" && p.b.phrase == "b1") {
      EXPECT_EQ(p.exists, 1);
      EXPECT_EQ(p.typed, 0);
      ++seen;
    } else {
      EXPECT_EQ(p.exists, 0);
      EXPECT_EQ(p.typed, 0);
      EXPECT_FALSE(p.relation);
    }
  }
  EXPECT_EQ(seen, 3);
  EXPECT_EQ(set.typed_count, 1u);
  EXPECT_EQ(set.negatives(), 5u);  // 8 pairs, 3 positive, 12 wanted
}

TEST(Labels, SetInvariants) {
  std::mt19937_64 rng(5);
  const auto rel = kb::RelationVocab::conceptnet();
  for (int build = 0; build < 100; ++build) {
    kb::TripleIndex typed(rel, true);
    for (int i = 0; i < 6; ++i) {
      const std::string s = "a" + std::to_string(uniform_index(rng, 5)), o = "b" + std::to_string(uniform_index(rng, 3));
      if (uniform01(rng) < 0.3) {
        typed.insert({s, "RelatedTo", std::nullopt, o, 1.0});
      } else {
        const int k = static_cast<int>(uniform_index(rng, rel.size()));
        typed.insert({s, rel.name(k), k, o, 1.0});
      }
    }
    const auto set = build_supervision(mentions(5, 3), typed, 4.0, static_cast<std::uint64_t>(build));
    std::size_t s_count = 0;
    std::set<std::size_t> a_begins, b_begins;
    for (const auto& p : set.pairs) {
      if (p.typed) {
        ++s_count;
        EXPECT_EQ(p.exists, 1);
        ASSERT_TRUE(p.relation);
        EXPECT_LT(*p.relation, static_cast<int>(rel.size()));
      }
      EXPECT_EQ(p.exists == 1, typed.lookup(p.a.phrase, p.b.phrase).exists() || typed.lookup(p.b.phrase, p.a.phrase).exists());
      a_begins.insert(p.a.begin);
      b_begins.insert(p.b.begin);
    }
    EXPECT_EQ(s_count, set.typed_count);
    EXPECT_LE(static_cast<double>(set.negatives()), 4.0 * static_cast<double>(set.positives()));
    EXPECT_EQ(set.count_a, a_begins.size());
    EXPECT_EQ(set.count_b, b_begins.size());
  }
}

TEST(Labels, InconsistentSetsRejected) {
  SupervisionSet set;
  set.pairs.push_back({{"a", Side::A, 1, 1}, {"b", Side::B, 5, 1}, 1, 1, std::nullopt});
  set.typed_count = 1;
  EXPECT_THROW(label_matrices(set), InconsistentLabels);
  set.pairs[0].relation = 2;
  set.typed_count = 0;
  EXPECT_THROW(label_matrices(set), InconsistentLabels);
  set.typed_count = 1;
  const auto labels = label_matrices(set);
  ASSERT_EQ(labels.type.size(), 1u);
  EXPECT_EQ(labels.type[0].k, 2);
  EXPECT_EQ(labels.existence[0].i, 1u);
  EXPECT_EQ(labels.existence[0].j, 5u);
}

TEST(Merge, NegativesBecomeNoRelation) {
  const auto index = index_with({{"a0", "UsedFor", "b0"}});
  const auto set = build_supervision(mentions(3, 2), index, 4.0, 2);
  const auto merged = merge_no_relation(set, 34);
  EXPECT_EQ(merged.typed_count, merged.pairs.size());
  for (const auto& p : merged.pairs) {
    EXPECT_EQ(p.typed, 1);
    if (p.exists == 0) {
      EXPECT_EQ(p.relation, 34);
    }
  }
  EXPECT_NO_THROW(label_matrices(merged));
}

TEST(Cache, RoundTripIsExact) {
  const auto rel = kb::RelationVocab::conceptnet();
  kb::TripleIndex index(rel, true);
  index.insert({"a0", "UsedFor", rel.find("UsedFor"), "b0", 1.0});
  index.insert({"a1", "RelatedTo", std::nullopt, "b1", 1.0});
  std::vector<CacheEntry> entries;
  for (std::size_t o = 0; o < 3; ++o)
    entries.push_back({"ex-" + std::to_string(o), o, build_supervision(mentions(4, 2), index, 4.0, o)});
  entries.push_back({"empty", 0, {}});
  const auto path = std::filesystem::temp_directory_path() / "relweave_cache.jsonl";
  save_cache(path, entries);
  EXPECT_EQ(load_cache(path), entries);
  std::filesystem::remove(path);
}
