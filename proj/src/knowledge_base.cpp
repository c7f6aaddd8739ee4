#include "relweave/knowledge_base.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace relweave::kb {

std::string phrase_normalize(std::string_view raw) {
  std::string out;
  out.reserve(raw.size());
  bool pending_space = false;
  for (char ch : raw) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c) || c == '_') {
      pending_space = true;
      continue;
    }
    if (pending_space && !out.empty()) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

namespace {

// "/r/UsedFor" and "UsedFor" name the same relation.
std::string_view strip_relation_prefix(std::string_view name) {
  if (name.starts_with("/r/")) name.remove_prefix(3);
  return name;
}

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

}  // namespace

// ---- RelationVocab ---------------------------------------------------------

RelationVocab::RelationVocab(std::vector<std::string> names, std::vector<std::string> excluded)
    : names_(std::move(names)), excluded_(std::move(excluded)) {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (is_excluded(names_[i]))
      throw std::invalid_argument("relation " + names_[i] + " is both selected and excluded");
    if (!ids_.emplace(names_[i], static_cast<int>(i)).second)
      throw std::invalid_argument("duplicate relation name " + names_[i]);
  }
}

const std::vector<std::string>& RelationVocab::conceptnet_selected() {
  static const std::vector<std::string> names = {
      "FormOf",        "IsA",
      "PartOf",        "HasA",
      "UsedFor",       "CapableOf",
      "AtLocation",    "Causes",
      "HasSubevent",   "HasFirstSubevent",
      "HasLastSubevent", "HasPrerequisite",
      "HasProperty",   "MotivatedByGoal",
      "ObstructedBy",  "Desires",
      "CreatedBy",     "Synonym",
      "Antonym",       "DistinctFrom",
      "DerivedFrom",   "SymbolOf",
      "DefinedAs",     "MannerOf",
      "LocatedNear",   "HasContext",
      "SimilarTo",     "EtymologicallyRelatedTo",
      "EtymologicallyDerivedFrom", "CausesDesire",
      "MadeOf",        "ReceivesAction",
      "NotDesires",    "NotCapableOf",
  };
  return names;
}

const std::vector<std::string>& RelationVocab::conceptnet_excluded() {
  static const std::vector<std::string> names = {"RelatedTo", "ExternalURL", "dbpedia"};
  return names;
}

RelationVocab RelationVocab::conceptnet() {
  return RelationVocab(conceptnet_selected(), conceptnet_excluded());
}

RelationVocab RelationVocab::first_n(std::size_t count) {
  const auto& all = conceptnet_selected();
  if (count == 0 || count > all.size())
    throw std::invalid_argument("relation type count must be in [1, " + std::to_string(all.size()) + "]");
  return RelationVocab({all.begin(), all.begin() + static_cast<long>(count)}, conceptnet_excluded());
}

RelationVocab RelationVocab::from_dump(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read triple dump " + path);
  std::unordered_set<std::string> seen;
  std::string line;
  while (std::getline(in, line)) {
    if (line.starts_with("#")) continue;
    if (auto t = parse_triple_line(line)) seen.insert(t->relation);
  }
  std::vector<std::string> names;
  for (const auto& n : conceptnet_selected())
    if (seen.contains(n)) names.push_back(n);
  if (names.empty()) throw std::runtime_error("no selected relation type occurs in " + path);
  return RelationVocab(std::move(names), conceptnet_excluded());
}

std::optional<int> RelationVocab::find(std::string_view name) const {
  auto it = ids_.find(std::string(strip_relation_prefix(name)));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

bool RelationVocab::is_excluded(std::string_view name) const {
  name = strip_relation_prefix(name);
  for (const auto& e : excluded_) {
    if (name == e) return true;
    // "dbpedia" covers the whole "dbpedia/..." family.
    if (name.size() > e.size() && name.starts_with(e) && name[e.size()] == '/') return true;
  }
  return false;
}

// ---- parsing ---------------------------------------------------------------

std::optional<RawTriple> parse_triple_line(std::string_view line) {
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    fields.push_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
    if (tab == std::string_view::npos) break;
    start = tab + 1;
  }
  if (fields.size() != 3 && fields.size() != 4) return std::nullopt;
  RawTriple t;
  t.subject = phrase_normalize(fields[0]);
  t.relation = std::string(strip_relation_prefix(trim(fields[1])));
  t.object = phrase_normalize(fields[2]);
  if (t.subject.empty() || t.object.empty() || t.relation.empty()) return std::nullopt;
  if (fields.size() == 4) {
    const std::string w = trim(fields[3]);
    if (w.empty()) return std::nullopt;
    char* end = nullptr;
    t.weight = std::strtod(w.c_str(), &end);
    if (end != w.c_str() + w.size() || !std::isfinite(t.weight) || t.weight < 0) return std::nullopt;
  }
  return t;
}

// ---- TripleIndex -----------------------------------------------------------

TripleIndex::TripleIndex(RelationVocab relations, bool keep_typeless)
    : relations_(std::move(relations)), keep_typeless_(keep_typeless) {}

std::string TripleIndex::pair_key(std::string_view s, std::string_view o) {
  std::string key;
  key.reserve(s.size() + o.size() + 1);
  key.append(s);
  key.push_back('\t');
  key.append(o);
  return key;
}

bool TripleIndex::insert(Triple triple) {
  if (triple.subject.empty() || triple.object.empty())
    throw std::invalid_argument("triple phrases must be non-empty");
  if (triple.relation && (*triple.relation < 0 || static_cast<std::size_t>(*triple.relation) >= relations_.size()))
    throw std::invalid_argument("triple relation id out of range");
  std::string fact_key = pair_key(triple.subject, triple.object);
  fact_key.push_back('\t');
  fact_key += triple.relation_name;
  if (!fact_keys_.insert(fact_key).second) return false;

  auto& entry = pairs_[pair_key(triple.subject, triple.object)];
  if (triple.relation) {
    auto pos = std::lower_bound(entry.relations.begin(), entry.relations.end(), *triple.relation);
    if (pos == entry.relations.end() || *pos != *triple.relation) entry.relations.insert(pos, *triple.relation);
  } else {
    entry.typeless = true;
  }
  for (const auto* phrase : {&triple.subject, &triple.object}) {
    if (phrases_.insert(*phrase).second) {
      const auto words = static_cast<std::size_t>(std::count(phrase->begin(), phrase->end(), ' ')) + 1;
      max_phrase_words_ = std::max(max_phrase_words_, words);
    }
  }
  facts_.push_back(std::move(triple));
  return true;
}

LookupResult TripleIndex::lookup(std::string_view subject, std::string_view object) const {
  auto it = pairs_.find(pair_key(subject, object));
  if (it == pairs_.end()) return {};
  return it->second;
}

namespace {
constexpr std::string_view kHeaderMagic = "#relweave-kb\t1";
}

void TripleIndex::save(const std::string& path) const {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out << kHeaderMagic << '\n';
    out << "#relations\t";
    for (std::size_t i = 0; i < relations_.size(); ++i) out << (i ? "," : "") << relations_.names()[i];
    out << "\n#excluded\t";
    for (std::size_t i = 0; i < relations_.excluded().size(); ++i)
      out << (i ? "," : "") << relations_.excluded()[i];
    out << "\n#keep_typeless\t" << (keep_typeless_ ? 1 : 0) << '\n';
    char buf[64];
    for (const auto& t : facts_) {
      std::snprintf(buf, sizeof buf, "%.17g", t.weight);
      out << t.subject << '\t' << t.relation_name << '\t' << t.object << '\t' << buf << '\n';
    }
    if (!out) throw std::runtime_error("write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw std::runtime_error("cannot rename " + tmp);
}

namespace {
std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}
}  // namespace

TripleIndex TripleIndex::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read index " + path);
  std::string line;
  if (!std::getline(in, line) || line != kHeaderMagic)
    throw std::runtime_error(path + " is not a saved triple index");
  std::vector<std::string> names, excluded;
  bool keep = false;
  for (int i = 0; i < 3; ++i) {
    if (!std::getline(in, line)) throw std::runtime_error(path + ": truncated header");
    const auto tab = line.find('\t');
    const std::string key = line.substr(0, tab), value = tab == std::string::npos ? "" : line.substr(tab + 1);
    if (key == "#relations") names = split_commas(value);
    else if (key == "#excluded") excluded = split_commas(value);
    else if (key == "#keep_typeless") keep = value == "1";
    else throw std::runtime_error(path + ": unexpected header line " + line);
  }
  in.close();
  return ingest(path, RelationVocab(std::move(names), std::move(excluded)), keep);
}

// ---- ingest ----------------------------------------------------------------

TripleIndex ingest(const std::string& path, const RelationVocab& relations,
                   bool keep_excluded_for_existence) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read triple dump " + path);
  TripleIndex index(relations, keep_excluded_for_existence);
  IngestStats stats;
  std::string line;
  while (std::getline(in, line)) {
    if (line.starts_with("#") || line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ++stats.lines;
    auto raw = parse_triple_line(line);
    if (!raw) {
      ++stats.malformed;
      continue;
    }
    Triple t{raw->subject, raw->relation, std::nullopt, raw->object, raw->weight};
    if (auto id = relations.find(raw->relation)) {
      t.relation = *id;
    } else if (relations.is_excluded(raw->relation)) {
      // Only RelatedTo links two concepts; URL and dbpedia facts never count.
      if (!keep_excluded_for_existence || raw->relation != "RelatedTo") {
        ++stats.excluded;
        continue;
      }
    } else {
      ++stats.unselected;
      continue;
    }
    if (index.insert(std::move(t))) ++stats.kept;
    else ++stats.duplicates;
  }
  if (stats.kept == 0) throw std::runtime_error("no valid triples in " + path);
  index.mutable_stats() = stats;
  return index;
}

}  // namespace relweave::kb
