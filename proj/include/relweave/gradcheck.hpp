// Central finite-difference gradient verification.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "relweave/autodiff.hpp"
#include "relweave/knowledge_base.hpp"
#include "relweave/model.hpp"
#include "relweave/supervision.hpp"
#include "relweave/text.hpp"

namespace relweave::gradcheck {

inline constexpr double kStep = 1e-5;
inline constexpr double kTolerance = 1e-4;

// |a - b| / max(|a|, |b|, 1e-8)
double relative_error(double a, double b);

struct Mismatch {
  std::string parameter;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct Report {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  std::string worst;
  std::vector<Mismatch> failures;
  double seconds = 0.0;

  bool passed() const { return failures.empty(); }
};

// Rebuilds the graph through `loss` for every probe. Parameters must be
// leaves that require gradients.
Report check(const std::string& name, const std::function<ad::Tensor()>& loss,
             const std::vector<model::NamedTensor>& params, double step = kStep, double tolerance = kTolerance);

// One random-input check per differentiable op.
std::vector<Report> op_suite(std::uint64_t seed);

// A two-option example with typed, untyped and negative concept pairs, and a
// 2-layer H=16 encoder with R=5 relation types over 32 positions.
struct TinyScenario {
  text::Vocab vocab;
  kb::TripleIndex index;
  text::Example example;
  std::vector<text::PackedSequence> packed;
  std::vector<supervision::LabelMatrices> labels;
  model::ModelParams params;
  model::JointWeights weights;
};

TinyScenario tiny_scenario(std::uint64_t seed);
ad::Tensor scenario_loss(const TinyScenario& scenario);

// Every parameter of the joint objective on the tiny scenario.
Report check_full_model(std::uint64_t seed, double step = kStep, double tolerance = kTolerance);

}  // namespace relweave::gradcheck
