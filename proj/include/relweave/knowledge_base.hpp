// Commonsense triple store: relation vocabulary, ingestion, directed pair lookup.

#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace relweave::kb {

// Lowercase, '_' -> ' ', collapse whitespace, trim.
std::string phrase_normalize(std::string_view raw);

class RelationVocab {
 public:
  RelationVocab() = default;
  RelationVocab(std::vector<std::string> names, std::vector<std::string> excluded);

  // The selected ConceptNet relation types (34 names) and the standard
  // exclusions (RelatedTo, ExternalURL, dbpedia).
  static const std::vector<std::string>& conceptnet_selected();
  static const std::vector<std::string>& conceptnet_excluded();
  static RelationVocab conceptnet();
  // conceptnet_selected() restricted to the types present in a triple dump,
  // keeping the canonical order.
  static RelationVocab from_dump(const std::string& path);
  // First `count` selected types (synthetic data uses this).
  static RelationVocab first_n(std::size_t count);

  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::string& name(int id) const { return names_.at(static_cast<std::size_t>(id)); }
  std::optional<int> find(std::string_view name) const;
  bool is_excluded(std::string_view name) const;
  const std::vector<std::string>& excluded() const { return excluded_; }

  bool operator==(const RelationVocab& o) const { return names_ == o.names_ && excluded_ == o.excluded_; }

 private:
  std::vector<std::string> names_;
  std::vector<std::string> excluded_;
  std::unordered_map<std::string, int> ids_;
};

struct Triple {
  std::string subject;
  std::string relation_name;
  // Absent for facts kept only as existence evidence.
  std::optional<int> relation;
  std::string object;
  double weight = 1.0;

  bool operator==(const Triple&) const = default;
};

struct LookupResult {
  std::vector<int> relations;  // sorted, unique
  bool typeless = false;       // an untyped fact links the pair

  bool exists() const { return typeless || !relations.empty(); }
};

struct IngestStats {
  std::size_t lines = 0;
  std::size_t kept = 0;
  std::size_t duplicates = 0;
  std::size_t malformed = 0;
  std::size_t excluded = 0;
  std::size_t unselected = 0;
};

class TripleIndex {
 public:
  explicit TripleIndex(RelationVocab relations = {}, bool keep_typeless = false);

  // Returns false when the fact was already stored.
  bool insert(Triple triple);

  LookupResult lookup(std::string_view subject, std::string_view object) const;
  bool has_phrase(std::string_view phrase) const { return phrases_.contains(std::string(phrase)); }
  std::size_t max_phrase_words() const { return max_phrase_words_; }

  const RelationVocab& relations() const { return relations_; }
  bool keeps_typeless() const { return keep_typeless_; }
  const std::vector<Triple>& facts() const { return facts_; }
  std::size_t size() const { return facts_.size(); }
  const IngestStats& stats() const { return stats_; }
  IngestStats& mutable_stats() { return stats_; }

  // Writes a self-describing triple dump that load() reads back.
  void save(const std::string& path) const;
  static TripleIndex load(const std::string& path);

 private:
  static std::string pair_key(std::string_view s, std::string_view o);

  RelationVocab relations_;
  bool keep_typeless_ = false;
  std::vector<Triple> facts_;
  std::unordered_set<std::string> fact_keys_;
  std::unordered_map<std::string, LookupResult> pairs_;
  std::unordered_set<std::string> phrases_;
  std::size_t max_phrase_words_ = 0;
  IngestStats stats_;
};

// Reads a tab-separated dump (subject, relation, object[, weight]).
// Triples with selected relation types become typed facts. With
// keep_excluded_for_existence, RelatedTo facts are kept untyped for
// existence lookups. Malformed lines are counted and skipped.
TripleIndex ingest(const std::string& path, const RelationVocab& relations,
                   bool keep_excluded_for_existence);

// Parses one dump line; nullopt when malformed.
struct RawTriple {
  std::string subject, relation, object;
  double weight = 1.0;
};
std::optional<RawTriple> parse_triple_line(std::string_view line);

}  // namespace relweave::kb
