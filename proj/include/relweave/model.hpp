// Shared transformer encoder with the answer, relation-existence and
// relation-type heads, and the joint objective over all options.

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "relweave/autodiff.hpp"
#include "relweave/supervision.hpp"
#include "relweave/text.hpp"

namespace relweave::model {

using ad::Tensor;

struct EncoderConfig {
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t hidden = 32;
  std::size_t feed_forward = 64;
  std::size_t vocab_size = 0;
  std::size_t max_positions = 128;
  double dropout = 0.1;

  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

struct LayerParams {
  Tensor query, query_bias, key, value, value_bias, output, output_bias;
  Tensor attention_norm_gain, attention_norm_bias;
  Tensor ff_in, ff_in_bias, ff_out, ff_out_bias;
  Tensor ff_norm_gain, ff_norm_bias;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

class ModelParams {
 public:
  // Weights ~ truncated normal(0, init_std); biases and the answer vector and
  // relation-type output matrix start at zero; layer-norm gains at one.
  static ModelParams initialize(const EncoderConfig& config, std::size_t relation_types, std::uint64_t seed,
                                double init_std = 0.02);

  const EncoderConfig& config() const { return config_; }
  std::size_t relation_types() const { return relation_types_; }
  std::size_t hidden() const { return config_.hidden; }

  Tensor token_embedding, position_embedding, segment_embedding;
  Tensor embedding_norm_gain, embedding_norm_bias;
  std::vector<LayerParams> layers;
  Tensor answer_vector;       // v, [H x 1]
  Tensor existence_bilinear;  // W1, [H x H]
  Tensor type_hidden;         // W2, [H x 2H]
  Tensor type_output;         // W3, [R x H]

  // Every parameter with a stable dotted name, in a fixed order.
  std::vector<NamedTensor> named() const;
  std::size_t parameter_count() const;
  void zero_grad();
  ModelParams clone() const;

 private:
  EncoderConfig config_;
  std::size_t relation_types_ = 0;
};

struct ForwardContext {
  bool training = false;
  std::mt19937_64* rng = nullptr;  // required when training with dropout
};

class SequenceTooLong : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Final-layer hidden states, one row per packed position: [len x H].
Tensor encode(const text::PackedSequence& packed, const ModelParams& params, ForwardContext ctx = {});

// v^T h_0 as a one-element tensor.
Tensor answer_logit(const Tensor& hidden, const ModelParams& params);

// -log softmax(logits)[gold] over the N option logits.
Tensor answer_loss(const Tensor& logits, std::size_t gold);

// Mean BCE of sigmoid(h_i^T W1 h_j) against y over the sampled pairs; zero
// when there are none.
Tensor relation_existence_loss(const Tensor& hidden, std::span<const supervision::ExistenceLabel> pairs,
                               const ModelParams& params);

// Mean over typed pairs of -log softmax(W3 relu(W2 [h_i; h_j]))[k]; zero
// when |S| = 0.
Tensor relation_type_loss(const Tensor& hidden, std::span<const supervision::TypeLabel> pairs,
                          const ModelParams& params);

struct OptionForward {
  Tensor hidden;
  supervision::LabelMatrices labels;
};

struct JointLoss {
  Tensor total;
  Tensor logits;
  double answer = 0.0;
  double existence = 0.0;  // mean over options
  double type = 0.0;       // mean over options
};

struct JointWeights {
  double existence = 0.5;
  double type = 0.5;
  // Compute auxiliary components even when their weight is zero (they are
  // reported but never enter the total).
  bool report_all = false;
};

// L = L_AP + (1/N) sum_l (w_re * L_RE_l + w_rt * L_RT_l).
JointLoss joint_loss(std::span<const OptionForward> options, std::size_t gold, const ModelParams& params,
                     const JointWeights& weights);

struct Prediction {
  std::size_t index = 0;
  std::vector<double> probabilities;
};

// Argmax of softmax(logits); ties go to the lowest index.
Prediction predict(std::span<const double> logits);
Prediction predict(const text::Example& example, const ModelParams& params, const text::Vocab& vocab,
                   std::size_t max_seq_len);

// ---- checkpoints -----------------------------------------------------------

struct Checkpoint {
  ModelParams params;
  text::Vocab vocab;
  std::map<std::string, std::string> metadata;
};

void save_checkpoint(const std::string& path, const ModelParams& params, const text::Vocab& vocab,
                     const std::map<std::string, std::string>& metadata = {});
Checkpoint load_checkpoint(const std::string& path);

}  // namespace relweave::model
