#include "relweave/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <unordered_set>

#include "relweave/rng.hpp"

namespace relweave::synth {

std::size_t SynthSpec::groups() const { return relation_types; }

void SynthSpec::validate() const {
  if (vocabulary_size == 0 || concepts == 0 || relation_types == 0 || examples == 0 || options == 0)
    throw std::invalid_argument("synthetic spec counts must be positive");
  if (options < 2) throw std::invalid_argument("examples need at least two options");
  for (double r : {gap_rate, noise_rate, phrase_fraction})
    if (!(r >= 0.0 && r <= 1.0)) throw std::invalid_argument("rates must lie in [0, 1]");
  if (relation_types > kb::RelationVocab::conceptnet_selected().size())
    throw InfeasibleSpec("at most " + std::to_string(kb::RelationVocab::conceptnet_selected().size()) +
                         " relation types are available");
  // Document context must come from a group no option touches, so options
  // may span at most groups - 1 of them.
  const std::size_t g = groups();
  if (g <= options)
    throw InfeasibleSpec("need more relation types than options, got " + std::to_string(relation_types) + " for " +
                         std::to_string(options) + " options");
  // Worst case one group supplies every context concept or every distractor.
  const std::size_t per_group = std::max<std::size_t>(3, options - 1);
  if (concepts < per_group * g)
    throw InfeasibleSpec("need at least " + std::to_string(per_group * g) + " concepts for " + std::to_string(g) +
                         " groups, got " + std::to_string(concepts));
  if (vocabulary_size < 20) throw InfeasibleSpec("need at least 20 filler words");
}

nlohmann::json SynthSpec::to_json() const {
  return {{"vocabulary_size", vocabulary_size}, {"concepts", concepts},     {"relation_types", relation_types},
          {"examples", examples},               {"dev_examples", dev_examples}, {"options", options},
          {"gap_rate", gap_rate},               {"noise_rate", noise_rate}, {"phrase_fraction", phrase_fraction},
          {"seed", seed}};
}

namespace {

class WordFactory {
 public:
  explicit WordFactory(std::mt19937_64& rng) : rng_(rng) {}

  std::string next() {
    static constexpr std::string_view consonants = "bdfgklmnprstvz";
    static constexpr std::string_view vowels = "aeiou";
    while (true) {
      const std::size_t syllables = 2 + uniform_index(rng_, 2);
      std::string w;
      for (std::size_t s = 0; s < syllables; ++s) {
        w.push_back(consonants[uniform_index(rng_, consonants.size())]);
        w.push_back(vowels[uniform_index(rng_, vowels.size())]);
      }
      if (used_.insert(w).second) return w;
    }
  }

 private:
  std::mt19937_64& rng_;
  std::unordered_set<std::string> used_;
};

template <typename T>
const T& choose(std::mt19937_64& rng, const std::vector<T>& v) {
  return v[uniform_index(rng, v.size())];
}

template <typename T>
void shuffle(std::mt19937_64& rng, std::vector<T>& v) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

class Generator {
 public:
  explicit Generator(const SynthSpec& spec) : spec_(spec), rng_(spec.seed), groups_(spec.groups()) {
    WordFactory words(rng_);
    members_.resize(groups_);
    for (std::size_t c = 0; c < spec.concepts; ++c) {
      std::string phrase = words.next();
      if (uniform01(rng_) < spec.phrase_fraction) phrase += " " + words.next();
      concepts_.push_back(phrase);
      members_[c % groups_].push_back(c);
    }
    const std::size_t n_question = std::max<std::size_t>(3, spec.vocabulary_size / 10);
    const std::size_t n_option = std::max<std::size_t>(6, spec.vocabulary_size * 3 / 10);
    const std::size_t n_doc = spec.vocabulary_size - std::min(spec.vocabulary_size - 1, n_question + n_option);
    for (std::size_t i = 0; i < n_doc; ++i) doc_words_.push_back(words.next());
    for (std::size_t i = 0; i < n_option; ++i) option_words_.push_back(words.next());
    for (std::size_t i = 0; i < n_question; ++i) question_words_.push_back(words.next());
    relation_names_ = kb::RelationVocab::first_n(spec.relation_types).names();
  }

  SynthArtifacts run() {
    SynthArtifacts out;
    out.spec = spec_;
    for (std::size_t g = 0; g < groups_; ++g)
      for (std::size_t a : members_[g])
        for (std::size_t b : members_[g])
          if (a != b) out.triples.push_back({concepts_[a], relation_of(g), concepts_[b], 1.0});

    const std::size_t total = spec_.examples + spec_.dev_examples;
    std::vector<int> labels(total);
    for (std::size_t i = 0; i < total; ++i) labels[i] = static_cast<int>(i % spec_.options);
    shuffle(rng_, labels);

    auto gap_flags = [&](std::size_t n) {
      const auto gaps = static_cast<std::size_t>(std::floor(spec_.gap_rate * static_cast<double>(n) + 0.5));
      std::vector<bool> flags(n, false);
      std::fill_n(flags.begin(), std::min(gaps, n), true);
      shuffle(rng_, flags);
      return flags;
    };
    const auto train_gaps = gap_flags(spec_.examples);
    const auto dev_gaps = gap_flags(spec_.dev_examples);

    for (std::size_t i = 0; i < total; ++i) {
      const bool dev = i >= spec_.examples;
      const std::size_t local = dev ? i - spec_.examples : i;
      const bool gap = dev ? dev_gaps[local] : train_gaps[local];
      PlantedExample planted;
      planted.id = std::string(dev ? "dev-" : "train-") + std::to_string(local);
      planted.split = dev ? "dev" : "train";
      planted.label = labels[i];
      planted.gap = gap;
      auto ex = gap ? make_gap(planted) : make_overlap(planted);
      (dev ? out.dev : out.train).push_back(std::move(ex));
      out.manifest.push_back(std::move(planted));
    }
    return out;
  }

 private:
  const std::string& relation_of(std::size_t group) const { return relation_names_[group % relation_names_.size()]; }
  std::size_t group_of(std::size_t c) const { return c % groups_; }
  bool linked(std::size_t g1, std::size_t g2) const { return g1 == g2; }

  // Random concept from a group satisfying `ok`, distinct from `taken`.
  template <typename GroupOk>
  std::size_t draw_concept(GroupOk ok, std::set<std::size_t>& taken) {
    std::vector<std::size_t> candidates;
    for (std::size_t g = 0; g < groups_; ++g)
      if (ok(g))
        for (std::size_t c : members_[g])
          if (!taken.contains(c)) candidates.push_back(c);
    if (candidates.empty()) throw InfeasibleSpec("not enough concepts to satisfy example constraints");
    const std::size_t c = choose(rng_, candidates);
    taken.insert(c);
    return c;
  }

  std::size_t draw_from_group(std::size_t g, std::set<std::size_t>& taken) {
    return draw_concept([g](std::size_t h) { return h == g; }, taken);
  }

  // Context concepts for the document: unlinked to every option concept.
  std::vector<std::size_t> context_concepts(const std::vector<std::size_t>& option_concepts,
                                            std::set<std::size_t>& taken) {
    const std::size_t count = 1 + (uniform01(rng_) < spec_.noise_rate ? 1 : 0);
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < count; ++i)
      out.push_back(draw_concept(
          [&](std::size_t h) {
            for (std::size_t oc : option_concepts)
              if (linked(h, group_of(oc))) return false;
            return true;
          },
          taken));
    return out;
  }

  std::string document_text(const std::vector<std::string>& inserted) {
    const std::size_t fillers = 6 + uniform_index(rng_, 4);
    std::vector<std::string> words;
    for (std::size_t i = 0; i < fillers; ++i) words.push_back(choose(rng_, doc_words_));
    for (const auto& w : inserted)
      words.insert(words.begin() + static_cast<long>(uniform_index(rng_, words.size() + 1)), w);
    std::string doc;
    for (const auto& w : words) doc += (doc.empty() ? "" : " ") + w;
    return doc + " .";
  }

  std::optional<std::string> question_text() {
    if (uniform01(rng_) < 0.5) return std::nullopt;
    return choose(rng_, question_words_) + " " + choose(rng_, question_words_) + " ?";
  }

  std::string option_text(const std::string& concept_phrase, const std::string& word) {
    return uniform01(rng_) < 0.5 ? concept_phrase + " " + word : word + " " + concept_phrase;
  }

  // Fillers of an option never occur in documents or questions.
  std::string option_filler() { return choose(rng_, option_words_); }

  text::Example make_gap(PlantedExample& planted) {
    std::set<std::size_t> taken;
    const std::size_t g = uniform_index(rng_, groups_);
    const std::size_t key = draw_from_group(g, taken);
    const std::size_t answer = draw_from_group(g, taken);
    std::vector<std::size_t> option_concepts(spec_.options);
    for (std::size_t o = 0; o < spec_.options; ++o) {
      if (static_cast<int>(o) == planted.label) {
        option_concepts[o] = answer;
      } else {
        option_concepts[o] = draw_concept([&](std::size_t h) { return !linked(h, g); }, taken);
      }
    }
    auto ctx = context_concepts(option_concepts, taken);
    std::vector<std::string> doc_concepts = {concepts_[key]};
    for (auto c : ctx) doc_concepts.push_back(concepts_[c]);

    text::Example ex;
    ex.id = planted.id;
    ex.document = document_text(doc_concepts);
    ex.question = question_text();
    for (std::size_t o = 0; o < spec_.options; ++o) ex.options.push_back(option_text(concepts_[option_concepts[o]], option_filler()));
    ex.label = planted.label;

    planted.document_concepts = doc_concepts;
    for (auto c : option_concepts) planted.option_concepts.push_back(concepts_[c]);
    planted.key_concept = concepts_[key];
    planted.answer_concept = concepts_[answer];
    planted.relation = relation_of(g);
    return ex;
  }

  text::Example make_overlap(PlantedExample& planted) {
    std::set<std::size_t> taken;
    const std::size_t g = uniform_index(rng_, groups_);
    const std::size_t anchor = draw_from_group(g, taken);
    // No option is related to the anchor: relation pairs stay silent here, so
    // the overlap word is the only cue.
    std::vector<std::size_t> option_concepts(spec_.options);
    for (auto& oc : option_concepts) oc = draw_concept([&](std::size_t h) { return !linked(h, g); }, taken);
    auto ctx = context_concepts(option_concepts, taken);
    const std::string overlap = choose(rng_, doc_words_);
    std::vector<std::string> doc_concepts = {concepts_[anchor]};
    for (auto c : ctx) doc_concepts.push_back(concepts_[c]);
    std::vector<std::string> inserted = doc_concepts;
    inserted.push_back(overlap);

    text::Example ex;
    ex.id = planted.id;
    ex.document = document_text(inserted);
    ex.question = question_text();
    for (std::size_t o = 0; o < spec_.options; ++o) {
      const bool correct = static_cast<int>(o) == planted.label;
      ex.options.push_back(option_text(concepts_[option_concepts[o]], correct ? overlap : option_filler()));
    }
    ex.label = planted.label;

    planted.document_concepts = doc_concepts;
    for (auto c : option_concepts) planted.option_concepts.push_back(concepts_[c]);
    planted.overlap_word = overlap;
    return ex;
  }

  SynthSpec spec_;
  std::mt19937_64 rng_;
  std::size_t groups_;
  std::vector<std::string> concepts_;
  std::vector<std::vector<std::size_t>> members_;
  std::vector<std::string> doc_words_, option_words_, question_words_;
  std::vector<std::string> relation_names_;
};

std::set<std::string> words_of(const std::string& s) {
  std::set<std::string> out;
  std::istringstream in(text::normalize_text(s));
  std::string w;
  while (in >> w) out.insert(w);
  return out;
}

bool contains_phrase(const std::string& haystack, const std::string& phrase) {
  const std::string h = " " + text::normalize_text(haystack) + " ";
  return h.find(" " + phrase + " ") != std::string::npos;
}

nlohmann::json planted_json(const PlantedExample& p) {
  return {{"id", p.id},
          {"split", p.split},
          {"label", p.label},
          {"gap", p.gap},
          {"document_concepts", p.document_concepts},
          {"option_concepts", p.option_concepts},
          {"key_concept", p.key_concept},
          {"answer_concept", p.answer_concept},
          {"relation", p.relation},
          {"overlap_word", p.overlap_word}};
}

}  // namespace

SynthArtifacts generate(const SynthSpec& spec) {
  spec.validate();
  return Generator(spec).run();
}

nlohmann::json SynthArtifacts::manifest_json() const {
  nlohmann::json j;
  j["spec"] = spec.to_json();
  j["triple_count"] = triples.size();
  j["examples"] = nlohmann::json::array();
  for (const auto& p : manifest) j["examples"].push_back(planted_json(p));
  return j;
}

void save_triples(const std::string& path, const std::vector<kb::RawTriple>& triples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& t : triples) out << t.subject << '\t' << t.relation << '\t' << t.object << '\n';
}

std::vector<kb::RawTriple> load_triples(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<kb::RawTriple> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.starts_with("#")) continue;
    if (auto t = kb::parse_triple_line(line)) out.push_back(std::move(*t));
  }
  return out;
}

WrittenPaths write_artifacts(const SynthArtifacts& artifacts, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const std::filesystem::path d(dir);
  WrittenPaths paths{(d / "train.jsonl").string(), (d / "dev.jsonl").string(), (d / "triples.tsv").string(),
                     (d / "manifest.json").string()};
  text::save_dataset(paths.train, artifacts.train);
  text::save_dataset(paths.dev, artifacts.dev);
  save_triples(paths.triples, artifacts.triples);
  std::ofstream out(paths.manifest, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + paths.manifest);
  out << artifacts.manifest_json().dump(1) << '\n';
  return paths;
}

std::vector<PlantedExample> load_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read manifest " + path);
  const auto j = nlohmann::json::parse(in);
  std::vector<PlantedExample> out;
  for (const auto& e : j.at("examples")) {
    PlantedExample p;
    p.id = e.at("id").get<std::string>();
    p.split = e.at("split").get<std::string>();
    p.label = e.at("label").get<int>();
    p.gap = e.at("gap").get<bool>();
    p.document_concepts = e.at("document_concepts").get<std::vector<std::string>>();
    p.option_concepts = e.at("option_concepts").get<std::vector<std::string>>();
    p.key_concept = e.at("key_concept").get<std::string>();
    p.answer_concept = e.at("answer_concept").get<std::string>();
    p.relation = e.at("relation").get<std::string>();
    p.overlap_word = e.at("overlap_word").get<std::string>();
    out.push_back(std::move(p));
  }
  return out;
}

AuditReport audit(const std::vector<text::Example>& dataset, const std::vector<kb::RawTriple>& dump,
                  const std::vector<PlantedExample>& manifest) {
  AuditReport report;
  std::set<std::tuple<std::string, std::string, std::string>> facts;
  std::set<std::pair<std::string, std::string>> links;
  for (const auto& t : dump) {
    facts.emplace(t.subject, t.relation, t.object);
    links.emplace(t.subject, t.object);
  }
  auto is_linked = [&](const std::string& x, const std::string& y) {
    return links.contains({x, y}) || links.contains({y, x});
  };
  std::map<std::string, const PlantedExample*> by_id;
  for (const auto& p : manifest) by_id[p.id] = &p;

  for (const auto& ex : dataset) {
    ++report.examples;
    auto it = by_id.find(ex.id);
    if (it == by_id.end()) {
      report.discrepancies.push_back(ex.id + ": not in manifest");
      continue;
    }
    const PlantedExample& p = *it->second;
    const std::string side_a = text::side_a_text(ex);
    if (ex.label != p.label) {
      ++report.label_mismatches;
      report.discrepancies.push_back(ex.id + ": label " + std::to_string(ex.label) + " but manifest says " +
                                     std::to_string(p.label));
    }
    if (p.option_concepts.size() != ex.options.size()) {
      report.discrepancies.push_back(ex.id + ": option count differs from manifest");
      continue;
    }
    if (p.gap) {
      if (!facts.contains({p.key_concept, p.relation, p.answer_concept})) {
        ++report.missing_triples;
        report.discrepancies.push_back(ex.id + ": planted fact (" + p.key_concept + ", " + p.relation + ", " +
                                       p.answer_concept + ") missing from dump");
      }
      if (contains_phrase(side_a, p.answer_concept)) {
        ++report.leaked_answers;
        report.discrepancies.push_back(ex.id + ": answer concept '" + p.answer_concept + "' appears in document");
      }
      const auto doc_words = words_of(side_a);
      for (const auto& opt : ex.options) {
        for (const auto& w : words_of(opt)) {
          if (doc_words.contains(w)) {
            ++report.lexical_overlaps;
            report.discrepancies.push_back(ex.id + ": option word '" + w + "' also in document");
          }
        }
      }
    } else if (p.label >= 0 && static_cast<std::size_t>(p.label) < ex.options.size()) {
      for (std::size_t o = 0; o < ex.options.size(); ++o) {
        const bool has = words_of(ex.options[o]).contains(p.overlap_word);
        if (has != (static_cast<int>(o) == p.label)) {
          ++report.overlap_violations;
          report.discrepancies.push_back(ex.id + ": overlap word '" + p.overlap_word + "' misplaced in option " +
                                         std::to_string(o));
        }
      }
    }
    for (std::size_t o = 0; o < ex.options.size(); ++o) {
      if (!contains_phrase(ex.options[o], p.option_concepts[o]))
        report.discrepancies.push_back(ex.id + ": option " + std::to_string(o) + " lacks concept '" +
                                       p.option_concepts[o] + "'");
      if (static_cast<int>(o) == p.label) continue;
      for (const auto& dc : p.document_concepts) {
        if (is_linked(dc, p.option_concepts[o])) {
          ++report.linked_distractors;
          report.discrepancies.push_back(ex.id + ": distractor '" + p.option_concepts[o] + "' linked to '" + dc + "'");
        }
      }
    }
  }
  return report;
}

}  // namespace relweave::synth
