// Planted-relation multi-choice datasets with a matching triple dump.
//
// Concepts are split into one topic group per relation type, and every
// ordered pair inside a group is a fact under that group's relation. A "gap"
// example hides its answer behind such a fact: the document mentions a
// concept, only the correct option mentions another member of its group, and
// no surface word is shared. Other examples are solved by a word the document
// shares with the correct option; none of their options relates to a
// document concept. Distractors never share a group with any document concept.

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "relweave/knowledge_base.hpp"
#include "relweave/text.hpp"

namespace relweave::synth {

struct SynthSpec {
  std::size_t vocabulary_size = 400;  // filler words
  std::size_t concepts = 30;
  std::size_t relation_types = 5;     // <= 34
  std::size_t examples = 4000;
  std::size_t dev_examples = 500;
  std::size_t options = 2;
  double gap_rate = 0.5;
  double noise_rate = 0.2;            // chance of an extra unrelated concept per document
  double phrase_fraction = 0.25;      // concepts spelled as two words
  std::uint64_t seed = 1;

  std::size_t groups() const;
  void validate() const;
  nlohmann::json to_json() const;
};

class InfeasibleSpec : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct PlantedExample {
  std::string id;
  std::string split;  // "train" or "dev"
  int label = 0;
  bool gap = false;
  std::vector<std::string> document_concepts;
  std::vector<std::string> option_concepts;  // one per option
  std::string key_concept;     // document side of the deciding link (gap only)
  std::string answer_concept;  // option side of the deciding link (gap only)
  std::string relation;        // relation of the deciding link (gap only)
  std::string overlap_word;    // shared word (non-gap only)
};

struct SynthArtifacts {
  SynthSpec spec;
  std::vector<text::Example> train;
  std::vector<text::Example> dev;
  std::vector<kb::RawTriple> triples;
  std::vector<PlantedExample> manifest;

  nlohmann::json manifest_json() const;
};

SynthArtifacts generate(const SynthSpec& spec);

struct WrittenPaths {
  std::string train, dev, triples, manifest;
};

// train.jsonl, dev.jsonl, triples.tsv and manifest.json under dir.
WrittenPaths write_artifacts(const SynthArtifacts& artifacts, const std::string& dir);
std::vector<PlantedExample> load_manifest(const std::string& path);
void save_triples(const std::string& path, const std::vector<kb::RawTriple>& triples);
std::vector<kb::RawTriple> load_triples(const std::string& path);

struct AuditReport {
  std::size_t examples = 0;
  std::size_t missing_triples = 0;
  std::size_t label_mismatches = 0;
  std::size_t leaked_answers = 0;      // gap answer concept visible in the document
  std::size_t lexical_overlaps = 0;    // gap option sharing a word with the document
  std::size_t linked_distractors = 0;  // distractor linked to a document concept
  std::size_t overlap_violations = 0;  // non-gap overlap word misplaced
  std::vector<std::string> discrepancies;

  bool ok() const { return discrepancies.empty(); }
};

// Re-derives the construction invariants from the files' contents.
AuditReport audit(const std::vector<text::Example>& dataset, const std::vector<kb::RawTriple>& dump,
                  const std::vector<PlantedExample>& manifest);

}  // namespace relweave::synth
