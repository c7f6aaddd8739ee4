#include "relweave/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

#include <json.hpp>

namespace relweave::text {

std::string normalize_text(std::string_view raw) {
  std::string out;
  out.reserve(raw.size());
  bool pending_space = false;
  auto emit = [&](char c) {
    if (pending_space && !out.empty()) out.push_back(' ');
    pending_space = false;
    out.push_back(c);
  };
  for (char ch : raw) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      pending_space = true;
    } else if (c < 0x80 && std::ispunct(c)) {
      pending_space = true;
      emit(static_cast<char>(c));
      pending_space = true;
    } else {
      emit(static_cast<char>(std::tolower(c)));
    }
  }
  return out;
}

// ---- Vocab -----------------------------------------------------------------

Vocab::Vocab() : Vocab(std::vector<std::string>{}) {}

Vocab::Vocab(std::vector<std::string> tokens) {
  for (auto special : {kPad, kUnk, kCls, kSep}) add(std::string(special));
  for (auto& t : tokens) {
    if (t == kPad || t == kUnk || t == kCls || t == kSep) continue;
    add(std::move(t));
  }
}

std::optional<int> Vocab::find(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

int Vocab::add(std::string token) {
  if (token.empty()) throw std::invalid_argument("empty vocabulary token");
  if (auto id = find(token)) return *id;
  const int id = static_cast<int>(tokens_.size());
  ids_.emplace(token, id);
  tokens_.push_back(std::move(token));
  return id;
}

void Vocab::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write vocab file " + path);
  for (const auto& t : tokens_) out << t << '\n';
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read vocab file " + path);
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  if (tokens.size() < 4 || tokens[0] != kPad || tokens[1] != kUnk || tokens[2] != kCls ||
      tokens[3] != kSep)
    throw std::runtime_error("vocab file " + path + " does not start with the special tokens");
  return Vocab(std::move(tokens));
}

// ---- BPE -------------------------------------------------------------------

namespace {

std::vector<std::string> split_words(const std::string& normalized) {
  std::vector<std::string> words;
  std::size_t start = 0;
  while (start < normalized.size()) {
    std::size_t end = normalized.find(' ', start);
    if (end == std::string::npos) end = normalized.size();
    if (end > start) words.push_back(normalized.substr(start, end - start));
    start = end + 1;
  }
  return words;
}

}  // namespace

Vocab train_bpe(const std::vector<std::string>& corpus, int merges) {
  if (merges < 0) throw std::invalid_argument("merge count must be non-negative");
  if (corpus.empty()) throw std::invalid_argument("cannot train a vocabulary on an empty corpus");

  std::map<std::string, long> word_freq;
  for (const auto& text : corpus)
    for (auto& w : split_words(normalize_text(text))) ++word_freq[w];

  std::set<std::string> alphabet;
  std::vector<std::pair<std::vector<std::string>, long>> words;
  for (const auto& [w, f] : word_freq) {
    std::vector<std::string> symbols;
    for (char c : w) {
      symbols.emplace_back(1, c);
      alphabet.insert(symbols.back());
    }
    words.emplace_back(std::move(symbols), f);
  }

  std::vector<std::string> learned;
  for (int m = 0; m < merges; ++m) {
    std::map<std::pair<std::string, std::string>, long> pair_freq;
    for (const auto& [symbols, f] : words)
      for (std::size_t i = 0; i + 1 < symbols.size(); ++i) pair_freq[{symbols[i], symbols[i + 1]}] += f;
    if (pair_freq.empty()) break;
    // Highest count wins; std::map order breaks ties lexicographically.
    auto best = pair_freq.begin();
    for (auto it = pair_freq.begin(); it != pair_freq.end(); ++it)
      if (it->second > best->second) best = it;
    const auto [left, right] = best->first;
    const std::string merged = left + right;
    learned.push_back(merged);
    for (auto& [symbols, f] : words) {
      std::vector<std::string> next;
      next.reserve(symbols.size());
      for (std::size_t i = 0; i < symbols.size(); ++i) {
        if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(symbols[i]);
        }
      }
      symbols = std::move(next);
    }
  }

  Vocab vocab;
  const std::string cont(Vocab::kContinuation);
  for (const auto& c : alphabet) {
    vocab.add(c);
    vocab.add(cont + c);
  }
  for (const auto& s : learned) {
    vocab.add(s);
    vocab.add(cont + s);
  }
  return vocab;
}

// ---- tokenize --------------------------------------------------------------

Tokenized tokenize(std::string_view text, const Vocab& vocab) {
  Tokenized out;
  out.normalized = normalize_text(text);
  const std::string& s = out.normalized;
  const std::string cont(Vocab::kContinuation);
  std::size_t word_begin = 0;
  while (word_begin < s.size()) {
    std::size_t word_end = s.find(' ', word_begin);
    if (word_end == std::string::npos) word_end = s.size();
    WordSpan span{s.substr(word_begin, word_end - word_begin), out.ids.size(), 0};
    std::size_t pos = word_begin;
    while (pos < word_end) {
      const bool initial = pos == word_begin;
      std::size_t len = word_end - pos;
      int id = vocab.unk_id();
      for (; len > 0; --len) {
        const std::string piece = s.substr(pos, len);
        if (auto found = vocab.find(initial ? piece : cont + piece)) {
          id = *found;
          break;
        }
      }
      if (len == 0) len = 1;
      const std::size_t begin = (initial && word_begin > 0) ? word_begin - 1 : pos;
      out.ids.push_back(id);
      out.offsets.emplace_back(begin, pos + len);
      pos += len;
    }
    span.token_count = out.ids.size() - span.first_token;
    out.words.push_back(std::move(span));
    word_begin = word_end + 1;
  }
  return out;
}

// ---- Example / pack --------------------------------------------------------

void Example::validate() const {
  if (options.size() < 2)
    throw std::invalid_argument("example " + id + ": needs at least two options");
  if (label < 0 || static_cast<std::size_t>(label) >= options.size())
    throw std::invalid_argument("example " + id + ": label out of range");
}

std::string side_a_text(const Example& example) {
  if (!example.question) return example.document;
  return example.document + " " + *example.question;
}

PackedSequence pack(const Example& example, std::size_t option_index, const Vocab& vocab,
                    std::size_t max_seq_len) {
  if (option_index >= example.options.size())
    throw std::out_of_range("option index out of range for example " + example.id);
  const Tokenized a = tokenize(side_a_text(example), vocab);
  const Tokenized b = tokenize(example.options[option_index], vocab);
  if (max_seq_len < 3 || b.ids.size() > max_seq_len - 3)
    throw PackError("option " + std::to_string(option_index) + " of example " + example.id +
                    " does not fit in " + std::to_string(max_seq_len) + " positions");
  const std::size_t a_keep = std::min(a.ids.size(), max_seq_len - 3 - b.ids.size());

  PackedSequence p;
  p.token_ids.reserve(max_seq_len);
  p.token_ids.push_back(vocab.cls_id());
  p.token_ids.insert(p.token_ids.end(), a.ids.begin(), a.ids.begin() + static_cast<long>(a_keep));
  p.sep_first = p.token_ids.size();
  p.token_ids.push_back(vocab.sep_id());
  const std::size_t b_start = p.token_ids.size();
  p.token_ids.insert(p.token_ids.end(), b.ids.begin(), b.ids.end());
  p.sep_second = p.token_ids.size();
  p.token_ids.push_back(vocab.sep_id());
  const std::size_t content = p.token_ids.size();

  p.segment_ids.assign(max_seq_len, 0);
  for (std::size_t i = p.sep_first + 1; i < content; ++i) p.segment_ids[i] = 1;
  p.attention_mask.assign(max_seq_len, 0);
  std::fill_n(p.attention_mask.begin(), content, std::uint8_t{1});
  p.token_ids.resize(max_seq_len, vocab.pad_id());

  p.text_a = a.normalized;
  p.text_b = b.normalized;
  p.char_to_token_a.assign(a.normalized.size(), -1);
  for (std::size_t t = 0; t < a_keep; ++t)
    for (std::size_t c = a.offsets[t].first; c < a.offsets[t].second; ++c)
      p.char_to_token_a[c] = static_cast<int>(1 + t);
  p.char_to_token_b.assign(b.normalized.size(), -1);
  for (std::size_t t = 0; t < b.ids.size(); ++t)
    for (std::size_t c = b.offsets[t].first; c < b.offsets[t].second; ++c)
      p.char_to_token_b[c] = static_cast<int>(b_start + t);

  for (const auto& w : a.words)
    if (w.first_token + w.token_count <= a_keep)
      p.words_a.push_back({w.text, 1 + w.first_token, w.token_count});
  for (const auto& w : b.words) p.words_b.push_back({w.text, b_start + w.first_token, w.token_count});
  return p;
}

// ---- dataset IO ------------------------------------------------------------

std::vector<Example> load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read dataset " + path);
  std::vector<Example> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Example ex;
      ex.id = j.at("id").get<std::string>();
      ex.document = j.at("document").get<std::string>();
      if (j.contains("question") && !j.at("question").is_null())
        ex.question = j.at("question").get<std::string>();
      ex.options = j.at("options").get<std::vector<std::string>>();
      ex.label = j.at("label").get<int>();
      ex.validate();
      out.push_back(std::move(ex));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void save_dataset(const std::string& path, const std::vector<Example>& examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write dataset " + path);
  for (const auto& ex : examples) {
    nlohmann::json j;
    j["id"] = ex.id;
    j["document"] = ex.document;
    j["question"] = ex.question ? nlohmann::json(*ex.question) : nlohmann::json(nullptr);
    j["options"] = ex.options;
    j["label"] = ex.label;
    out << j.dump() << '\n';
  }
}

std::vector<std::string> corpus_of(const std::vector<Example>& examples) {
  std::vector<std::string> corpus;
  for (const auto& ex : examples) {
    corpus.push_back(ex.document);
    if (ex.question) corpus.push_back(*ex.question);
    for (const auto& o : ex.options) corpus.push_back(o);
  }
  return corpus;
}

}  // namespace relweave::text
