#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "fixtures.hpp"
#include "pipeline.hpp"
#include "relweave/training.hpp"

using namespace relweave;
using training::AblationMode;
using training::TrainConfig;

namespace {

double max_param_diff(const model::ModelParams& a, const model::ModelParams& b) {
  auto na = a.named(), nb = b.named();
  EXPECT_EQ(na.size(), nb.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < na.size(); ++i) {
    const auto va = na[i].tensor.values(), vb = nb[i].tensor.values();
    EXPECT_EQ(va.size(), vb.size()) << na[i].name;
    for (std::size_t k = 0; k < va.size(); ++k) worst = std::max(worst, std::abs(va[k] - vb[k]));
  }
  return worst;
}

const fixtures::Pipeline& shared() {
  static const auto p = fixtures::build_pipeline(fixtures::small_spec(400, 3), 200, "training");
  return p;
}

std::vector<text::Example> head(const std::vector<text::Example>& v, std::size_t n) {
  return {v.begin(), v.begin() + static_cast<std::ptrdiff_t>(std::min(n, v.size()))};
}

}  // namespace

TEST(Modes, NamesRoundTrip) {
  for (auto m : training::kAllModes) EXPECT_EQ(training::parse_mode(training::mode_name(m)), m);
  EXPECT_THROW(training::parse_mode("both"), std::invalid_argument);
}

TEST(Modes, WeightsFollowMode) {
  TrainConfig c;
  c.lambda_existence = 0.3;
  c.lambda_type = 0.7;
  const auto w = [&](AblationMode m) {
    c.mode = m;
    const auto j = c.weights();
    return std::pair{j.existence, j.type};
  };
  EXPECT_EQ(w(AblationMode::AnswerOnly), std::pair(0.0, 0.0));
  EXPECT_EQ(w(AblationMode::Existence), std::pair(0.3, 0.0));
  EXPECT_EQ(w(AblationMode::Type), std::pair(0.0, 0.7));
  EXPECT_EQ(w(AblationMode::ExistenceType), std::pair(0.3, 0.7));
  EXPECT_EQ(w(AblationMode::MergedNoRelation), std::pair(0.0, 0.7));
  EXPECT_EQ(c.modelled_relation_types(5), 6u);
  c.mode = AblationMode::ExistenceType;
  EXPECT_EQ(c.modelled_relation_types(5), 5u);
}

TEST(Config, ParseText) {
  const auto m = training::parse_config_text("# header\n\n  seed = 7  # trailing\nmode=re_rt\r\nlearning_rate = 2e-5\n");
  EXPECT_EQ(m.size(), 3u);
  EXPECT_EQ(m.at("seed"), "7");
  EXPECT_EQ(m.at("mode"), "re_rt");
  EXPECT_EQ(m.at("learning_rate"), "2e-5");
  EXPECT_THROW(training::parse_config_text("seed 7\n"), std::invalid_argument);
  EXPECT_THROW(training::parse_config_text(" = 3\n"), std::invalid_argument);
}

TEST(Config, ApplyAndRoundTrip) {
  TrainConfig c;
  c.apply(training::parse_config_text("seed = 9\nmode = merged\ngamma = 2.5\nresample_negatives = false\n"));
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.mode, AblationMode::MergedNoRelation);
  EXPECT_EQ(c.gamma, 2.5);
  EXPECT_FALSE(c.resample_negatives);

  TrainConfig back;
  back.apply(c.to_map());
  EXPECT_EQ(back.to_map(), c.to_map());
  EXPECT_EQ(back.hash(), c.hash());
  EXPECT_THROW(c.apply({{"no_such_key", "1"}}), std::invalid_argument);
  EXPECT_THROW(c.apply({{"epochs", "many"}}), std::invalid_argument);
}

TEST(Config, HashSeesEveryKey) {
  const TrainConfig base;
  for (const auto& [key, value] : base.to_map()) {
    TrainConfig c = base;
    std::string changed = value + "1";
    if (key == "mode") changed = "ap";
    else if (key == "resample_negatives") changed = "false";
    else if (key == "max_ngram" || key == "heads") changed = "1";
    else if (value.find_first_of(".e") != std::string::npos) changed = std::to_string(std::stod(value) * 0.5 + 0.125);
    c.apply({{key, changed}});
    EXPECT_NE(c.hash(), base.hash()) << key;
  }
}

TEST(Config, Validation) {
  const auto bad = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    return c;
  };
  EXPECT_NO_THROW(TrainConfig{}.validate());
  EXPECT_NO_THROW(TrainConfig::pretrained_preset().validate());
  EXPECT_THROW(bad([](TrainConfig& c) { c.lambda_type = -1; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](TrainConfig& c) { c.gamma = std::nan(""); }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](TrainConfig& c) { c.epochs = 0; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](TrainConfig& c) { c.batch_size = 0; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](TrainConfig& c) { c.learning_rate = 0; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](TrainConfig& c) { c.hidden = 15; }).validate(), std::invalid_argument);
}

TEST(Train, Deterministic) {
  const auto& p = shared();
  const auto data = head(p.data.train, 40);
  auto c = fixtures::tiny_config();
  const auto a = training::train(data, p.index, p.vocab, c);
  const auto b = training::train(data, p.index, p.vocab, c);
  EXPECT_EQ(max_param_diff(a.params, b.params), 0.0);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) EXPECT_EQ(a.history[i].joint, b.history[i].joint);
  c.seed = 2;
  EXPECT_GT(max_param_diff(a.params, training::train(data, p.index, p.vocab, c).params), 0.0);
}

TEST(Train, ZeroWeightsMatchAnswerOnly) {
  const auto& p = shared();
  const auto data = head(p.data.train, 40);
  auto joint = fixtures::tiny_config();
  joint.mode = AblationMode::ExistenceType;
  joint.lambda_existence = 0.0;
  joint.lambda_type = 0.0;
  auto ap = joint;
  ap.mode = AblationMode::AnswerOnly;
  const auto a = training::train(data, p.index, p.vocab, joint);
  const auto b = training::train(data, p.index, p.vocab, ap);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) EXPECT_NEAR(a.history[i].joint, b.history[i].joint, 1e-12) << i;
  EXPECT_LE(max_param_diff(a.params, b.params), 1e-12);
}

TEST(Train, HistoryShape) {
  const auto& p = shared();
  auto c = fixtures::tiny_config();
  c.batch_size = 3;
  c.epochs = 2;
  std::size_t calls = 0;
  const auto r = training::train(head(p.data.train, 10), p.index, p.vocab, c, [&](const auto&) { ++calls; });
  ASSERT_EQ(r.history.size(), 8u);  // ceil(10/3) per epoch
  EXPECT_EQ(calls, 8u);
  for (std::size_t i = 0; i < r.history.size(); ++i) {
    const auto& h = r.history[i];
    EXPECT_EQ(h.step, i);
    EXPECT_EQ(h.epoch, i / 4);
    EXPECT_NEAR(h.joint, h.answer + h.lambda_existence * h.existence + h.lambda_type * h.type, 1e-9);
  }
}

TEST(Train, LossFallsOnSmallSet) {
  const auto& p = shared();
  auto c = fixtures::tiny_config();
  c.batch_size = 2;
  c.epochs = 5;
  c.learning_rate = 3e-3;
  c.dropout = 0.0;
  const auto r = training::train(head(p.data.train, 20), p.index, p.vocab, c);
  ASSERT_EQ(r.history.size(), 50u);
  const auto window = [&](std::size_t from) {
    double s = 0.0;
    for (std::size_t i = from; i < from + 10; ++i) s += r.history[i].joint;
    return s / 10.0;
  };
  for (std::size_t w = 10; w < 50; w += 10) EXPECT_LT(window(w), window(w - 10)) << "window at step " << w;
}

TEST(Train, RejectsEmptyData) {
  const auto& p = shared();
  EXPECT_THROW(training::train({}, p.index, p.vocab, fixtures::tiny_config()), std::invalid_argument);
}

TEST(Evaluate, RandomModelNearChance) {
  const auto& p = shared();
  const auto c = fixtures::tiny_config();
  auto params = model::ModelParams::initialize(c.encoder(p.vocab.size()), p.index.relations().size(), 11, 0.3);
  std::mt19937_64 rng(5);
  fixtures::randomize(params.answer_vector, rng);
  auto data = p.data.train;
  data.insert(data.end(), p.data.dev.begin(), p.data.dev.end());
  data.resize(500);
  const auto report = training::evaluate(data, params, p.vocab, nullptr, c);
  EXPECT_EQ(report.examples, 500u);
  EXPECT_NEAR(report.accuracy, 0.5, 0.1);
}

TEST(Evaluate, AgreesWithPredictions) {
  const auto& p = shared();
  const auto c = fixtures::tiny_config();
  const auto trained = training::train(head(p.data.train, 20), p.index, p.vocab, c);
  auto data = head(p.data.dev, 60);
  const auto report = training::evaluate(data, trained.params, p.vocab, &p.index, c);
  ASSERT_EQ(report.per_example.size(), data.size());

  double answer = 0, existence = 0, type = 0, joint = 0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& s = report.per_example[i];
    EXPECT_EQ(s.correct, s.predicted == static_cast<std::size_t>(data[i].label));
    correct += s.correct;
    answer += s.answer;
    existence += s.existence;
    type += s.type;
    joint += s.joint;
  }
  const double n = static_cast<double>(data.size());
  EXPECT_DOUBLE_EQ(report.accuracy, static_cast<double>(correct) / n);
  EXPECT_NEAR(report.mean_answer, answer / n, 1e-12);
  EXPECT_NEAR(report.mean_existence, existence / n, 1e-12);
  EXPECT_NEAR(report.mean_type, type / n, 1e-12);
  EXPECT_NEAR(report.mean_joint, joint / n, 1e-12);
  EXPECT_EQ(report.config, c.to_map());

  // Relabel with the model's own choices and every answer becomes correct.
  for (std::size_t i = 0; i < data.size(); ++i) data[i].label = static_cast<int>(report.per_example[i].predicted);
  EXPECT_EQ(training::evaluate(data, trained.params, p.vocab, nullptr, c).accuracy, 1.0);

  const auto no_kb = training::evaluate(head(p.data.dev, 60), trained.params, p.vocab, nullptr, c);
  EXPECT_EQ(no_kb.mean_existence, 0.0);
  EXPECT_EQ(no_kb.mean_type, 0.0);
  EXPECT_EQ(no_kb.accuracy, report.accuracy);
}

TEST(Ablation, TableArithmetic) {
  const auto& p = shared();
  auto c = fixtures::tiny_config();
  const auto table =
      training::run_ablation(head(p.data.train, 16), head(p.data.dev, 20), p.index, p.vocab, c, {1, 2});
  ASSERT_EQ(table.rows.size(), 5u);
  const double base = table.row(AblationMode::AnswerOnly).mean;
  for (const auto& row : table.rows) {
    ASSERT_EQ(row.accuracies.size(), 2u);
    const double mean = (row.accuracies[0] + row.accuracies[1]) / 2.0;
    EXPECT_DOUBLE_EQ(row.mean, mean);
    EXPECT_NEAR(row.stdev, std::abs(row.accuracies[0] - row.accuracies[1]) / std::sqrt(2.0), 1e-12);
    EXPECT_NEAR(row.delta, row.mode == AblationMode::AnswerOnly ? 0.0 : 100.0 * (mean - base), 1e-12);
  }
  const auto text = training::format_ablation(table);
  EXPECT_NE(text.find("seeds: 1 2"), std::string::npos);
  EXPECT_THROW(training::run_ablation(head(p.data.train, 4), head(p.data.dev, 4), p.index, p.vocab, c, {}),
               std::invalid_argument);
}
