// Small synthetic corpus with its triple index and vocabulary, built the same
// way the command line tool builds them.

#pragma once

#include <filesystem>
#include <string>

#include "relweave/knowledge_base.hpp"
#include "relweave/synth.hpp"
#include "relweave/text.hpp"
#include "relweave/training.hpp"

namespace fixtures {

struct Pipeline {
  relweave::synth::SynthArtifacts data;
  relweave::kb::TripleIndex index;
  relweave::text::Vocab vocab;
};

inline relweave::kb::TripleIndex index_from(const std::vector<relweave::kb::RawTriple>& triples,
                                             const std::string& tag) {
  namespace kb = relweave::kb;
  const auto path = std::filesystem::temp_directory_path() / ("relweave_" + tag + "_triples.tsv");
  relweave::synth::save_triples(path.string(), triples);
  auto index = kb::ingest(path.string(), kb::RelationVocab::from_dump(path.string()), true);
  std::filesystem::remove(path);
  return index;
}

inline Pipeline build_pipeline(const relweave::synth::SynthSpec& spec, int bpe_merges, const std::string& tag) {
  auto data = relweave::synth::generate(spec);
  auto index = index_from(data.triples, tag);
  auto vocab = relweave::text::train_bpe(relweave::text::corpus_of(data.train), bpe_merges);
  return {std::move(data), std::move(index), std::move(vocab)};
}

// A model small enough for unit tests to train in well under a second.
inline relweave::training::TrainConfig tiny_config() {
  relweave::training::TrainConfig c;
  c.layers = 1;
  c.heads = 2;
  c.hidden = 16;
  c.feed_forward = 32;
  c.max_seq_len = 48;
  c.bpe_merges = 200;
  c.batch_size = 4;
  c.epochs = 1;
  return c;
}

inline relweave::synth::SynthSpec small_spec(std::size_t examples, std::uint64_t seed) {
  relweave::synth::SynthSpec s;
  s.vocabulary_size = 60;
  s.concepts = 30;
  s.relation_types = 5;
  s.examples = examples;
  s.dev_examples = examples / 4;
  s.seed = seed;
  return s;
}

}  // namespace fixtures
