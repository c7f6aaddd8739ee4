// Joint training over the answer and relation objectives, evaluation, and
// the ablation runner comparing task combinations.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "relweave/knowledge_base.hpp"
#include "relweave/model.hpp"
#include "relweave/supervision.hpp"
#include "relweave/text.hpp"

namespace relweave::training {

enum class AblationMode { AnswerOnly, Existence, Type, ExistenceType, MergedNoRelation };

inline constexpr AblationMode kAllModes[] = {AblationMode::AnswerOnly, AblationMode::Existence, AblationMode::Type,
                                             AblationMode::ExistenceType, AblationMode::MergedNoRelation};

// Short names used on the command line: ap, re, rt, re_rt, merged.
std::string mode_name(AblationMode mode);
AblationMode parse_mode(const std::string& name);
// Row labels for the ablation table.
std::string mode_label(AblationMode mode);

struct TrainConfig {
  double lambda_existence = 0.5;
  double lambda_type = 0.5;
  double gamma = 4.0;
  double learning_rate = 1e-3;
  std::size_t batch_size = 8;
  std::size_t epochs = 3;
  std::uint64_t seed = 1;
  AblationMode mode = AblationMode::ExistenceType;
  double clip_norm = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  bool resample_negatives = true;
  std::size_t max_seq_len = 128;
  std::size_t max_ngram = supervision::kDefaultMaxNgram;
  int bpe_merges = 1000;
  // encoder
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t hidden = 32;
  std::size_t feed_forward = 64;
  double dropout = 0.1;
  double init_std = 0.02;

  // Batch 24 at learning rate 2e-5, the fine-tuning setting for a
  // pretrained encoder.
  static TrainConfig pretrained_preset();

  void validate() const;
  model::JointWeights weights() const;
  // Output classes of the type head for a knowledge base with `base` types.
  std::size_t modelled_relation_types(std::size_t base) const;
  model::EncoderConfig encoder(std::size_t vocab_size) const;

  // Flat key/value view; from_map accepts any subset of these keys.
  std::map<std::string, std::string> to_map() const;
  void apply(const std::map<std::string, std::string>& values);
  // FNV-1a over the canonical key/value text.
  std::uint64_t hash() const;
};

// "key = value" lines; '#' starts a comment.
std::map<std::string, std::string> parse_config_text(const std::string& text);
std::map<std::string, std::string> load_config_file(const std::string& path);

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double joint = 0.0;
  double answer = 0.0;
  double existence = 0.0;
  double type = 0.0;
  // Weights the joint value was formed with.
  double lambda_existence = 0.0;
  double lambda_type = 0.0;
};

struct TrainResult {
  model::ModelParams params;
  std::vector<StepRecord> history;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tokenized, packed and concept-matched form of one example.
struct PreparedOption {
  text::PackedSequence packed;
  std::vector<supervision::ConceptMention> mentions;
};

struct PreparedExample {
  std::size_t ordinal = 0;
  std::size_t label = 0;
  std::vector<PreparedOption> options;
};

// Packs every option (padding trimmed; masking makes it equivalent) and
// finds concept mentions when an index is given.
std::vector<PreparedExample> prepare(const std::vector<text::Example>& data, const text::Vocab& vocab,
                                     const kb::TripleIndex* index, std::size_t max_seq_len, std::size_t max_ngram);

// Supervision for one option, relabelled for the merged mode when needed.
supervision::SupervisionSet option_supervision(const PreparedOption& option, const kb::TripleIndex& index,
                                               const TrainConfig& config, std::uint64_t seed);

using StepCallback = std::function<void(const StepRecord&)>;

TrainResult train(const std::vector<text::Example>& data, const kb::TripleIndex& index, const text::Vocab& vocab,
                  const TrainConfig& config, const StepCallback& on_step = {});

struct ExampleScore {
  std::size_t predicted = 0;
  bool correct = false;
  double answer = 0.0;
  double existence = 0.0;
  double type = 0.0;
  double joint = 0.0;
};

struct EvalReport {
  double accuracy = 0.0;
  double mean_answer = 0.0;
  double mean_existence = 0.0;
  double mean_type = 0.0;
  double mean_joint = 0.0;
  std::size_t examples = 0;
  std::map<std::string, std::string> config;
  std::vector<ExampleScore> per_example;
};

// Accuracy of predict() against labels plus mean loss components. Without
// an index the relation components are reported as zero.
EvalReport evaluate(const std::vector<text::Example>& data, const model::ModelParams& params,
                    const text::Vocab& vocab, const kb::TripleIndex* index, const TrainConfig& config);

struct AblationRow {
  AblationMode mode = AblationMode::AnswerOnly;
  std::vector<double> accuracies;  // one per seed
  double mean = 0.0;
  double stdev = 0.0;
  double delta = 0.0;  // mean minus the answer-only mean, in accuracy points
};

struct AblationTable {
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRow> rows;

  const AblationRow& row(AblationMode mode) const;
};

using AblationProgress = std::function<void(AblationMode, std::uint64_t seed, double accuracy)>;

// Trains every mode for every seed on `train_set` and scores it on `dev_set`.
AblationTable run_ablation(const std::vector<text::Example>& train_set, const std::vector<text::Example>& dev_set,
                           const kb::TripleIndex& index, const text::Vocab& vocab, const TrainConfig& config,
                           const std::vector<std::uint64_t>& seeds, const AblationProgress& progress = {});

std::string format_ablation(const AblationTable& table);
std::string ablation_json(const AblationTable& table);

}  // namespace relweave::training
