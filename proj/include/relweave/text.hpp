// Vocabulary, subword tokenization and input packing.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace relweave::text {

// Lowercase, split ASCII punctuation into standalone words, collapse runs of
// whitespace to one space, trim.
std::string normalize_text(std::string_view raw);

class Vocab {
 public:
  static constexpr std::string_view kPad = "[PAD]";
  static constexpr std::string_view kUnk = "[UNK]";
  static constexpr std::string_view kCls = "[CLS]";
  static constexpr std::string_view kSep = "[SEP]";
  // Prefix marking a piece that continues a word.
  static constexpr std::string_view kContinuation = "##";

  // Only the four special tokens.
  Vocab();
  explicit Vocab(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  int pad_id() const { return 0; }
  int unk_id() const { return 1; }
  int cls_id() const { return 2; }
  int sep_id() const { return 3; }

  std::optional<int> find(std::string_view token) const;
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  // Appends token if absent; returns its id.
  int add(std::string token);

  void save(const std::string& path) const;
  static Vocab load(const std::string& path);

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

// Byte-pair merges learned over the normalized corpus; each learned symbol
// enters the vocabulary both as a word-initial piece and as a "##" piece.
Vocab train_bpe(const std::vector<std::string>& corpus, int merges);

struct WordSpan {
  std::string text;
  std::size_t first_token = 0;  // index into Tokenized::ids
  std::size_t token_count = 0;
};

struct Tokenized {
  std::string normalized;
  std::vector<int> ids;
  // [begin, end) into `normalized`. Consecutive spans are contiguous; a
  // word-initial piece also covers the space before it.
  std::vector<std::pair<std::size_t, std::size_t>> offsets;
  std::vector<WordSpan> words;
};

// Greedy longest-match segmentation of each normalized word. Characters with
// no matching piece become single-character [UNK] tokens.
Tokenized tokenize(std::string_view text, const Vocab& vocab);

struct Example {
  std::string id;
  std::string document;
  std::optional<std::string> question;
  std::vector<std::string> options;
  int label = 0;

  void validate() const;
  bool operator==(const Example&) const = default;
};

struct PackedWord {
  std::string text;
  std::size_t position = 0;  // first token position in the packed sequence
  std::size_t token_count = 0;
};

struct PackedSequence {
  std::vector<int> token_ids;
  std::vector<int> segment_ids;
  std::vector<std::uint8_t> attention_mask;
  std::size_t cls_index = 0;
  std::size_t sep_first = 0;
  std::size_t sep_second = 0;
  // Normalized source texts and, for every character, the packed position of
  // the token covering it (-1 when truncated away).
  std::string text_a, text_b;
  std::vector<int> char_to_token_a, char_to_token_b;
  // Words that survive truncation intact.
  std::vector<PackedWord> words_a, words_b;

  std::size_t length() const { return token_ids.size(); }
  std::size_t content_length() const { return sep_second + 1; }
};

class PackError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Builds [CLS] A [SEP] B [SEP] [PAD]... where A is the document followed by
// the question (if any) and B is the chosen option. Over-long inputs lose the
// tail of A; B and the delimiters are never cut. Pads to max_seq_len.
PackedSequence pack(const Example& example, std::size_t option_index, const Vocab& vocab,
                    std::size_t max_seq_len);

// Text of side A before normalization.
std::string side_a_text(const Example& example);

// JSON-lines dataset, one Example per line.
std::vector<Example> load_dataset(const std::string& path);
void save_dataset(const std::string& path, const std::vector<Example>& examples);

// All document, question and option texts, in dataset order.
std::vector<std::string> corpus_of(const std::vector<Example>& examples);

}  // namespace relweave::text
