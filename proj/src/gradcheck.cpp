#include "relweave/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>

#include "relweave/rng.hpp"

namespace relweave::gradcheck {

double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

Report check(const std::string& name, const std::function<ad::Tensor()>& loss,
             const std::vector<model::NamedTensor>& params, double step, double tolerance) {
  const auto start = std::chrono::steady_clock::now();
  Report report;
  report.name = name;
  for (auto p : params) {
    if (!p.tensor.requires_grad()) throw std::invalid_argument("parameter " + p.name + " does not require gradients");
    p.tensor.zero_grad();
  }
  ad::backward(loss());

  for (auto p : params) {
    auto values = p.tensor.mutable_values();
    const std::vector<double> analytic(p.tensor.grad().begin(), p.tensor.grad().end());
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + step;
      const double plus = loss().item();
      values[i] = original - step;
      const double minus = loss().item();
      values[i] = original;
      const double numeric = (plus - minus) / (2.0 * step);
      const double err = relative_error(analytic[i], numeric);
      ++report.checked;
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst = p.name + "[" + std::to_string(i) + "]";
      }
      if (err > tolerance) report.failures.push_back({p.name, i, analytic[i], numeric, err});
    }
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

// ---- op suite --------------------------------------------------------------

namespace {

ad::Tensor random_leaf(std::mt19937_64& rng, ad::Shape shape, double lo = -1.0, double hi = 1.0) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(n);
  for (double& x : v) x = lo + (hi - lo) * uniform01(rng);
  return ad::Tensor::from(std::move(shape), std::move(v), true);
}

// Values bounded away from zero so kinks stay out of the probe radius.
ad::Tensor away_from_zero(std::mt19937_64& rng, ad::Shape shape) {
  auto t = random_leaf(rng, std::move(shape), 0.1, 1.0);
  for (double& x : t.mutable_values())
    if (uniform01(rng) < 0.5) x = -x;
  return t;
}

// Weighted sum so that every output element gets a distinct upstream gradient.
ad::Tensor project(const ad::Tensor& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<double> w(out.numel());
  for (double& x : w) x = -1.0 + 2.0 * uniform01(rng);
  return ad::sum(ad::mul(out, ad::Tensor::from(out.shape(), std::move(w))));
}

}  // namespace

std::vector<Report> op_suite(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Report> out;
  auto run = [&](const std::string& name, std::vector<model::NamedTensor> params,
                 std::function<ad::Tensor()> f) {
    const std::uint64_t pseed = rng();
    out.push_back(check(name, [&f, pseed] { return project(f(), pseed); }, params));
  };

  {
    auto a = random_leaf(rng, {3, 4}), b = random_leaf(rng, {4, 2});
    run("matmul", {{"a", a}, {"b", b}}, [=] { return ad::matmul(a, b); });
  }
  {
    auto a = random_leaf(rng, {3, 5});
    run("transpose", {{"a", a}}, [=] { return ad::transpose(a); });
    run("reshape", {{"a", a}}, [=] { return ad::reshape(a, {15}); });
    run("scale", {{"a", a}}, [=] { return ad::scale(a, -1.7); });
    run("add_scalar", {{"a", a}}, [=] { return ad::add_scalar(a, 0.3); });
    run("sigmoid", {{"a", a}}, [=] { return ad::sigmoid(ad::scale(a, 3.0)); });
    run("gelu", {{"a", a}}, [=] { return ad::gelu(ad::scale(a, 2.0)); });
    run("sum", {{"a", a}}, [=] { return ad::sum(a); });
    run("mean", {{"a", a}}, [=] { return ad::mean(a); });
    run("sum_rows", {{"a", a}}, [=] { return ad::sum_rows(a); });
    run("softmax_rows", {{"a", a}}, [=] { return ad::softmax(ad::scale(a, 2.0)); });
    run("slice_cols", {{"a", a}}, [=] { return ad::slice_cols(a, 1, 3); });
    const std::size_t rows[] = {2, 0, 2, 1};
    run("gather_rows", {{"a", a}}, [=] { return ad::gather_rows(a, rows); });
    const std::size_t flat[] = {0, 7, 7, 14};
    run("pick", {{"a", a}}, [=] { return ad::pick(a, flat); });
    const std::uint8_t mask[] = {1, 0, 1, 1, 0};
    run("masked_softmax", {{"a", a}}, [=] { return ad::masked_softmax(a, mask); });
    run("dropout", {{"a", a}}, [=] {
      std::mt19937_64 drop(7);
      return ad::dropout(a, 0.3, drop);
    });
  }
  {
    auto a = random_leaf(rng, {5});
    run("softmax", {{"a", a}}, [=] { return ad::softmax(ad::scale(a, 3.0)); });
  }
  {
    auto a = away_from_zero(rng, {4, 3});
    run("relu", {{"a", a}}, [=] { return ad::relu(a); });
  }
  {
    auto a = random_leaf(rng, {6}, 0.05, 2.0);
    run("log", {{"a", a}}, [=] { return ad::log(a); });
  }
  {
    auto a = random_leaf(rng, {2, 3}), b = random_leaf(rng, {2, 3}), bias = random_leaf(rng, {3});
    run("add", {{"a", a}, {"b", b}}, [=] { return ad::add(a, b); });
    run("sub", {{"a", a}, {"b", b}}, [=] { return ad::sub(a, b); });
    run("mul", {{"a", a}, {"b", b}}, [=] { return ad::mul(a, b); });
    run("add_bias", {{"a", a}, {"bias", bias}}, [=] { return ad::add_bias(a, bias); });
    run("concat_lastdim", {{"a", a}, {"b", b}}, [=] { return ad::concat_lastdim(a, b); });
    run("concat_cols", {{"a", a}, {"b", b}}, [=] { return ad::concat_cols({a, b, a}); });
    run("stack", {{"a", a}, {"b", b}}, [=] { return ad::stack({a, b}); });
    run("reuse", {{"a", a}}, [=] { return ad::mul(ad::add(a, a), a); });
  }
  {
    auto x = random_leaf(rng, {3, 6}), g = random_leaf(rng, {6}, 0.5, 1.5), b = random_leaf(rng, {6});
    run("layer_norm", {{"x", x}, {"gain", g}, {"bias", b}}, [=] { return ad::layer_norm(x, g, b); });
  }
  return out;
}

// ---- full model ------------------------------------------------------------

TinyScenario tiny_scenario(std::uint64_t seed) {
  TinyScenario s;
  s.example.id = "gradcheck";
  s.example.document = "I took the car to the lake and saw a kettle near the old tree.";
  s.example.question = "What did they do next?";
  s.example.options = {"went driving and made tea", "sat in the shade of a tree by the lake"};
  s.example.label = 1;
  s.vocab = text::train_bpe(text::corpus_of({s.example}), 40);

  s.index = kb::TripleIndex(kb::RelationVocab::first_n(5), true);
  auto add = [&](const char* subj, const char* rel, const char* obj) {
    const auto id = s.index.relations().find(rel);
    s.index.insert({subj, rel, id, obj, 1.0});
  };
  add("car", "UsedFor", "driving");
  add("kettle", "UsedFor", "tea");
  add("driving", "HasA", "lake");
  add("tree", "HasA", "shade");
  add("shade", "PartOf", "old tree");
  add("lake", "RelatedTo", "shade");
  add("kettle", "IsA", "tree");
  add("tea", "FormOf", "car");

  constexpr std::size_t kSeqLen = 32;
  for (std::size_t o = 0; o < s.example.options.size(); ++o) {
    s.packed.push_back(text::pack(s.example, o, s.vocab, kSeqLen));
    const auto mentions = supervision::find_mentions(s.packed.back(), s.index);
    s.labels.push_back(supervision::label_matrices(supervision::build_supervision(mentions, s.index, 4.0, seed + o)));
  }

  model::EncoderConfig cfg;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.hidden = 16;
  cfg.feed_forward = 32;
  cfg.vocab_size = s.vocab.size();
  cfg.max_positions = kSeqLen;
  cfg.dropout = 0.0;
  s.params = model::ModelParams::initialize(cfg, 5, seed, 0.3);
  // Zero-initialized heads would make upstream gradients vanish identically.
  std::mt19937_64 rng(derive_seed(seed, 99));
  for (auto* t : {&s.params.answer_vector, &s.params.type_output})
    for (double& x : t->mutable_values()) x = truncated_normal(rng, 0.3);
  for (auto& named : s.params.named())
    if (named.name.find("bias") != std::string::npos)
      for (double& x : named.tensor.mutable_values()) x = truncated_normal(rng, 0.1);
  s.weights = {0.5, 0.5, false};
  return s;
}

ad::Tensor scenario_loss(const TinyScenario& s) {
  std::vector<model::OptionForward> options;
  for (std::size_t o = 0; o < s.packed.size(); ++o)
    options.push_back({model::encode(s.packed[o], s.params), s.labels[o]});
  return model::joint_loss(options, static_cast<std::size_t>(s.example.label), s.params, s.weights).total;
}

Report check_full_model(std::uint64_t seed, double step, double tolerance) {
  const auto s = tiny_scenario(seed);
  return check("joint objective", [&s] { return scenario_loss(s); }, s.params.named(), step, tolerance);
}

}  // namespace relweave::gradcheck
