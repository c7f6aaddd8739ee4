#include "relweave/supervision.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "relweave/rng.hpp"

namespace relweave::supervision {

std::size_t SupervisionSet::positives() const {
  return static_cast<std::size_t>(
      std::count_if(pairs.begin(), pairs.end(), [](const ConceptPair& p) { return p.exists == 1; }));
}

namespace {

void scan_side(const std::vector<text::PackedWord>& words, Side side, const kb::TripleIndex& index,
               std::size_t max_ngram, std::vector<ConceptMention>& out) {
  std::set<std::string> seen;
  std::size_t pos = 0;
  while (pos < words.size()) {
    std::size_t matched = 0;
    std::string phrase;
    for (std::size_t len = std::min(max_ngram, words.size() - pos); len > 0; --len) {
      std::string candidate = words[pos].text;
      for (std::size_t w = pos + 1; w < pos + len; ++w) candidate += ' ' + words[w].text;
      if (index.has_phrase(candidate)) {
        matched = len;
        phrase = std::move(candidate);
        break;
      }
    }
    if (matched == 0) {
      ++pos;
      continue;
    }
    std::size_t span = 0;
    for (std::size_t w = pos; w < pos + matched; ++w) span += words[w].token_count;
    if (seen.insert(phrase).second) out.push_back({phrase, side, words[pos].position, span});
    pos += matched;
  }
}

}  // namespace

std::vector<ConceptMention> find_mentions(const text::PackedSequence& packed, const kb::TripleIndex& index,
                                          std::size_t max_ngram) {
  std::vector<ConceptMention> out;
  if (max_ngram == 0) return out;
  scan_side(packed.words_a, Side::A, index, max_ngram, out);
  scan_side(packed.words_b, Side::B, index, max_ngram, out);
  return out;
}

SupervisionSet build_supervision(const std::vector<ConceptMention>& mentions, const kb::TripleIndex& index,
                                 double gamma, std::uint64_t seed) {
  if (!(gamma >= 0.0) || !std::isfinite(gamma))
    throw std::invalid_argument("negative sampling ratio must be finite and non-negative");
  std::vector<const ConceptMention*> side_a, side_b;
  for (const auto& m : mentions) (m.side == Side::A ? side_a : side_b).push_back(&m);

  struct Candidate {
    std::size_t ia, ib;
    bool positive;
    std::optional<int> relation;
  };
  std::vector<Candidate> all;
  std::vector<std::size_t> negative_slots;
  std::size_t positives = 0;
  for (std::size_t ia = 0; ia < side_a.size(); ++ia) {
    for (std::size_t ib = 0; ib < side_b.size(); ++ib) {
      const auto forward = index.lookup(side_a[ia]->phrase, side_b[ib]->phrase);
      const auto reverse = index.lookup(side_b[ib]->phrase, side_a[ia]->phrase);
      Candidate c{ia, ib, forward.exists() || reverse.exists(), std::nullopt};
      if (!forward.relations.empty()) c.relation = forward.relations.front();
      if (c.positive) ++positives;
      else negative_slots.push_back(all.size());
      all.push_back(c);
    }
  }

  const auto wanted = static_cast<std::size_t>(std::floor(gamma * static_cast<double>(positives)));
  const std::size_t take = std::min(wanted, negative_slots.size());
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < take; ++i) {
    const std::size_t j = i + uniform_index(rng, negative_slots.size() - i);
    std::swap(negative_slots[i], negative_slots[j]);
  }
  std::vector<bool> chosen(all.size(), false);
  for (std::size_t i = 0; i < take; ++i) chosen[negative_slots[i]] = true;

  SupervisionSet set;
  std::set<std::size_t> used_a, used_b;
  for (std::size_t c = 0; c < all.size(); ++c) {
    const auto& cand = all[c];
    if (!cand.positive && !chosen[c]) continue;
    ConceptPair p{*side_a[cand.ia], *side_b[cand.ib], cand.positive ? 1 : 0, 0, std::nullopt};
    if (cand.positive && cand.relation) {
      p.typed = 1;
      p.relation = cand.relation;
      ++set.typed_count;
    }
    used_a.insert(cand.ia);
    used_b.insert(cand.ib);
    set.pairs.push_back(std::move(p));
  }
  set.count_a = used_a.size();
  set.count_b = used_b.size();
  return set;
}

SupervisionSet merge_no_relation(SupervisionSet set, std::size_t relation_types) {
  for (auto& p : set.pairs) {
    if (p.exists == 0) {
      p.typed = 1;
      p.relation = static_cast<int>(relation_types);
      ++set.typed_count;
    }
  }
  return set;
}

LabelMatrices label_matrices(const SupervisionSet& set) {
  LabelMatrices out;
  for (const auto& p : set.pairs) {
    if ((p.typed == 1) != p.relation.has_value())
      throw InconsistentLabels("typed flag and relation id disagree for pair " + p.a.phrase + " / " + p.b.phrase);
    out.existence.push_back({p.a.begin, p.b.begin, p.exists});
    if (p.typed) out.type.push_back({p.a.begin, p.b.begin, *p.relation});
  }
  if (out.type.size() != set.typed_count)
    throw InconsistentLabels("typed pair count " + std::to_string(out.type.size()) + " does not match |S| = " +
                             std::to_string(set.typed_count));
  return out;
}

// ---- cache -----------------------------------------------------------------

namespace {

nlohmann::json mention_json(const ConceptMention& m) {
  return {{"phrase", m.phrase}, {"side", m.side == Side::A ? "A" : "B"}, {"begin", m.begin}, {"span", m.span}};
}

ConceptMention mention_from(const nlohmann::json& j) {
  const auto side = j.at("side").get<std::string>();
  if (side != "A" && side != "B") throw std::runtime_error("bad mention side " + side);
  return {j.at("phrase").get<std::string>(), side == "A" ? Side::A : Side::B, j.at("begin").get<std::size_t>(),
          j.at("span").get<std::size_t>()};
}

}  // namespace

void save_cache(const std::string& path, const std::vector<CacheEntry>& entries) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write supervision cache " + path);
  for (const auto& e : entries) {
    nlohmann::json pairs = nlohmann::json::array();
    for (const auto& p : e.set.pairs) {
      pairs.push_back({{"a", mention_json(p.a)},
                       {"b", mention_json(p.b)},
                       {"y", p.exists},
                       {"s", p.typed},
                       {"k", p.relation ? nlohmann::json(*p.relation) : nlohmann::json(nullptr)}});
    }
    nlohmann::json j = {{"example", e.example_id}, {"option", e.option}, {"count_a", e.set.count_a},
                        {"count_b", e.set.count_b}, {"typed_count", e.set.typed_count}, {"pairs", pairs}};
    out << j.dump() << '\n';
  }
}

std::vector<CacheEntry> load_cache(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read supervision cache " + path);
  std::vector<CacheEntry> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    CacheEntry e;
    e.example_id = j.at("example").get<std::string>();
    e.option = j.at("option").get<std::size_t>();
    e.set.count_a = j.at("count_a").get<std::size_t>();
    e.set.count_b = j.at("count_b").get<std::size_t>();
    e.set.typed_count = j.at("typed_count").get<std::size_t>();
    for (const auto& pj : j.at("pairs")) {
      ConceptPair p{mention_from(pj.at("a")), mention_from(pj.at("b")), pj.at("y").get<int>(), pj.at("s").get<int>(),
                    std::nullopt};
      if (!pj.at("k").is_null()) p.relation = pj.at("k").get<int>();
      e.set.pairs.push_back(std::move(p));
    }
    label_matrices(e.set);
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace relweave::supervision
