// Concept mentions in packed sequences and the sampled pair labels that
// drive the relation-existence and relation-type heads.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "relweave/knowledge_base.hpp"
#include "relweave/text.hpp"

namespace relweave::supervision {

enum class Side : std::uint8_t { A = 0, B = 1 };

struct ConceptMention {
  std::string phrase;
  Side side = Side::A;
  std::size_t begin = 0;  // packed position of the first subword
  std::size_t span = 0;   // subword count

  bool operator==(const ConceptMention&) const = default;
};

struct ConceptPair {
  ConceptMention a;
  ConceptMention b;
  int exists = 0;                 // y for the existence head
  int typed = 0;                  // s: a typed A->B relation links the pair
  std::optional<int> relation;    // k, set iff typed

  bool operator==(const ConceptPair&) const = default;
};

struct SupervisionSet {
  std::vector<ConceptPair> pairs;
  std::size_t count_a = 0;  // distinct A-side mentions among the pairs
  std::size_t count_b = 0;
  std::size_t typed_count = 0;  // |S|

  std::size_t positives() const;
  std::size_t negatives() const { return pairs.size() - positives(); }
  bool operator==(const SupervisionSet&) const = default;
};

inline constexpr std::size_t kDefaultMaxNgram = 4;

// Greedy longest match of word n-grams (n <= max_ngram) against the index's
// phrases, separately on each side. Only the first occurrence of a phrase per
// side is kept.
std::vector<ConceptMention> find_mentions(const text::PackedSequence& packed, const kb::TripleIndex& index,
                                          std::size_t max_ngram = kDefaultMaxNgram);

// Positives are all cross-side pairs linked in either direction. A pair is
// typed only when an A->B typed relation exists (k = lowest id). Negatives
// are drawn uniformly without replacement from the remaining cross-side
// pairs: min(floor(gamma * positives), available).
SupervisionSet build_supervision(const std::vector<ConceptMention>& mentions, const kb::TripleIndex& index,
                                 double gamma, std::uint64_t seed);

// "No relation" as an extra type: every sampled negative becomes typed with
// k = relation_types. Existence labels are left untouched.
SupervisionSet merge_no_relation(SupervisionSet set, std::size_t relation_types);

struct ExistenceLabel {
  std::size_t i = 0, j = 0;
  int y = 0;
};

struct TypeLabel {
  std::size_t i = 0, j = 0;
  int k = 0;
};

struct LabelMatrices {
  std::vector<ExistenceLabel> existence;
  std::vector<TypeLabel> type;
};

class InconsistentLabels : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Flattens a set into what the heads consume; throws InconsistentLabels when
// s/k disagree or |S| does not match the stored count.
LabelMatrices label_matrices(const SupervisionSet& set);

// One JSON record per (example id, option).
struct CacheEntry {
  std::string example_id;
  std::size_t option = 0;
  SupervisionSet set;

  bool operator==(const CacheEntry&) const = default;
};

void save_cache(const std::string& path, const std::vector<CacheEntry>& entries);
std::vector<CacheEntry> load_cache(const std::string& path);

}  // namespace relweave::supervision
