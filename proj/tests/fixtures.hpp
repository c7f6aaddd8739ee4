// Random instances shared by the unit tests and the acceptance suite.

#pragma once

#include <cstdint>
#include <random>
#include <tuple>
#include <vector>

#include "oracles.hpp"
#include "relweave/model.hpp"
#include "relweave/rng.hpp"
#include "relweave/supervision.hpp"

namespace fixtures {

using relweave::ad::Tensor;

inline void randomize(Tensor t, std::mt19937_64& rng, double stddev = 1.0) {
  for (double& v : t.mutable_values()) v = stddev * relweave::normal01(rng);
}

inline Tensor random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, bool grad = false) {
  std::vector<double> v(rows * cols);
  for (double& x : v) x = relweave::normal01(rng);
  return Tensor::from({rows, cols}, std::move(v), grad);
}

// Heads drawn at unit scale so no loss term is trivially constant.
inline relweave::model::ModelParams head_params(std::size_t hidden, std::size_t relation_types, std::uint64_t seed) {
  relweave::model::EncoderConfig cfg;
  cfg.layers = 1;
  cfg.heads = 1;
  cfg.hidden = hidden;
  cfg.feed_forward = hidden;
  cfg.vocab_size = 8;
  cfg.max_positions = 8;
  auto params = relweave::model::ModelParams::initialize(cfg, relation_types, seed);
  std::mt19937_64 rng(relweave::derive_seed(seed, 77));
  randomize(params.answer_vector, rng);
  randomize(params.existence_bilinear, rng, 0.5);
  randomize(params.type_hidden, rng, 0.5);
  randomize(params.type_output, rng);
  return params;
}

struct LossInstance {
  std::size_t options = 2;
  std::size_t gold = 0;
  std::vector<Tensor> hidden;  // one [len x H] per option
  std::vector<relweave::supervision::LabelMatrices> labels;
  double lambda_existence = 0.5, lambda_type = 0.5;
};

inline LossInstance random_instance(std::mt19937_64& rng, std::size_t hidden_size, std::size_t relation_types) {
  LossInstance inst;
  inst.options = 2 + relweave::uniform_index(rng, 3);
  inst.gold = relweave::uniform_index(rng, inst.options);
  inst.lambda_existence = relweave::uniform01(rng);
  inst.lambda_type = relweave::uniform01(rng);
  for (std::size_t o = 0; o < inst.options; ++o) {
    const std::size_t len = 3 + relweave::uniform_index(rng, 10);
    inst.hidden.push_back(random_matrix(len, hidden_size, rng));
    relweave::supervision::LabelMatrices lm;
    const std::size_t pairs = relweave::uniform_index(rng, 6);
    for (std::size_t p = 0; p < pairs; ++p) {
      const std::size_t i = relweave::uniform_index(rng, len), j = relweave::uniform_index(rng, len);
      const int y = relweave::uniform01(rng) < 0.4 ? 1 : 0;
      lm.existence.push_back({i, j, y});
      if (y && relweave::uniform01(rng) < 0.7)
        lm.type.push_back({i, j, static_cast<int>(relweave::uniform_index(rng, relation_types))});
    }
    inst.labels.push_back(std::move(lm));
  }
  return inst;
}

inline std::vector<std::tuple<int, int, int>> existence_tuples(const relweave::supervision::LabelMatrices& lm) {
  std::vector<std::tuple<int, int, int>> out;
  for (const auto& e : lm.existence) out.emplace_back(static_cast<int>(e.i), static_cast<int>(e.j), e.y);
  return out;
}

inline std::vector<std::tuple<int, int, int>> type_tuples(const relweave::supervision::LabelMatrices& lm) {
  std::vector<std::tuple<int, int, int>> out;
  for (const auto& t : lm.type) out.emplace_back(static_cast<int>(t.i), static_cast<int>(t.j), t.k);
  return out;
}

struct LossComparison {
  double answer_err = 0.0, existence_err = 0.0, type_err = 0.0, joint_err = 0.0;
  double max() const { return std::max(std::max(answer_err, existence_err), std::max(type_err, joint_err)); }
};

// Library losses against the scalar re-implementation on one instance.
inline LossComparison compare_losses(const LossInstance& inst, const relweave::model::ModelParams& params) {
  namespace m = relweave::model;
  LossComparison cmp;
  const auto h_flat = [&](std::size_t o) {
    const auto& t = inst.hidden[o];
    return oracle::to_matrix(t.values(), t.dim(0), t.dim(1));
  };
  const std::size_t H = params.hidden(), R = params.relation_types();
  const auto v = params.answer_vector.values();
  const auto w1 = oracle::to_matrix(params.existence_bilinear.values(), H, H);
  const auto w2 = oracle::to_matrix(params.type_hidden.values(), H, 2 * H);
  const auto w3 = oracle::to_matrix(params.type_output.values(), R, H);

  std::vector<double> z;
  std::vector<double> re_oracle, rt_oracle;
  std::vector<m::OptionForward> forwards;
  for (std::size_t o = 0; o < inst.options; ++o) {
    const auto h = h_flat(o);
    double logit = 0.0;
    for (std::size_t k = 0; k < H; ++k) logit += v[k] * h[0][k];
    z.push_back(logit);
    re_oracle.push_back(oracle::existence_loss(h, w1, existence_tuples(inst.labels[o])));
    rt_oracle.push_back(oracle::type_loss(h, w2, w3, type_tuples(inst.labels[o])));

    const double re = m::relation_existence_loss(inst.hidden[o], inst.labels[o].existence, params).item();
    const double rt = m::relation_type_loss(inst.hidden[o], inst.labels[o].type, params).item();
    cmp.existence_err = std::max(cmp.existence_err, std::abs(re - re_oracle.back()));
    cmp.type_err = std::max(cmp.type_err, std::abs(rt - rt_oracle.back()));
    forwards.push_back({inst.hidden[o], inst.labels[o]});
  }
  const double ap_oracle = oracle::answer_loss(z, inst.gold);
  const auto logits = Tensor::from({z.size()}, z);
  cmp.answer_err = std::abs(m::answer_loss(logits, inst.gold).item() - ap_oracle);

  const auto joint = m::joint_loss(forwards, inst.gold, params, {inst.lambda_existence, inst.lambda_type, false});
  const double joint_oracle =
      oracle::joint_loss(ap_oracle, re_oracle, rt_oracle, inst.lambda_existence, inst.lambda_type);
  cmp.joint_err = std::abs(joint.total.item() - joint_oracle);
  return cmp;
}

}  // namespace fixtures
