#include "relweave/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "relweave/rng.hpp"

namespace relweave::training {

// ---- modes -----------------------------------------------------------------

std::string mode_name(AblationMode mode) {
  switch (mode) {
    case AblationMode::AnswerOnly: return "ap";
    case AblationMode::Existence: return "re";
    case AblationMode::Type: return "rt";
    case AblationMode::ExistenceType: return "re_rt";
    case AblationMode::MergedNoRelation: return "merged";
  }
  return "?";
}

AblationMode parse_mode(const std::string& name) {
  for (auto m : kAllModes)
    if (mode_name(m) == name) return m;
  throw std::invalid_argument("unknown mode '" + name + "' (expected ap, re, rt, re_rt or merged)");
}

std::string mode_label(AblationMode mode) {
  switch (mode) {
    case AblationMode::AnswerOnly: return "Basic Model";
    case AblationMode::Existence: return "+ L_RE";
    case AblationMode::Type: return "+ L_RT";
    case AblationMode::ExistenceType: return "+ L_RE + L_RT";
    case AblationMode::MergedNoRelation: return "+ L_RT + \"No Relation\"";
  }
  return "?";
}

// ---- config ----------------------------------------------------------------

TrainConfig TrainConfig::pretrained_preset() {
  TrainConfig c;
  c.learning_rate = 2e-5;
  c.batch_size = 24;
  return c;
}

void TrainConfig::validate() const {
  if (!(lambda_existence >= 0.0) || !(lambda_type >= 0.0)) throw std::invalid_argument("task weights must be >= 0");
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw std::invalid_argument("gamma must be >= 0");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (max_seq_len < 4) throw std::invalid_argument("max_seq_len must be at least 4");
  if (bpe_merges < 0) throw std::invalid_argument("bpe_merges must be >= 0");
  encoder(1).validate();
}

model::JointWeights TrainConfig::weights() const {
  switch (mode) {
    case AblationMode::AnswerOnly: return {0.0, 0.0};
    case AblationMode::Existence: return {lambda_existence, 0.0};
    case AblationMode::Type: return {0.0, lambda_type};
    case AblationMode::ExistenceType: return {lambda_existence, lambda_type};
    case AblationMode::MergedNoRelation: return {0.0, lambda_type};
  }
  return {};
}

std::size_t TrainConfig::modelled_relation_types(std::size_t base) const {
  return mode == AblationMode::MergedNoRelation ? base + 1 : base;
}

model::EncoderConfig TrainConfig::encoder(std::size_t vocab_size) const {
  model::EncoderConfig e;
  e.layers = layers;
  e.heads = heads;
  e.hidden = hidden;
  e.feed_forward = feed_forward;
  e.vocab_size = vocab_size;
  e.max_positions = max_seq_len;
  e.dropout = dropout;
  return e;
}

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double d = 0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size()) throw std::invalid_argument("config key '" + key + "': not a number: " + v);
  return d;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  unsigned long long x = 0;
  try {
    if (!v.empty() && v[0] != '-') x = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size())
    throw std::invalid_argument("config key '" + key + "': not a non-negative integer: " + v);
  return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw std::invalid_argument("config key '" + key + "': not a boolean: " + v);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::map<std::string, std::string> TrainConfig::to_map() const {
  return {
      {"lambda_existence", fmt_double(lambda_existence)},
      {"lambda_type", fmt_double(lambda_type)},
      {"gamma", fmt_double(gamma)},
      {"learning_rate", fmt_double(learning_rate)},
      {"batch_size", std::to_string(batch_size)},
      {"epochs", std::to_string(epochs)},
      {"seed", std::to_string(seed)},
      {"mode", mode_name(mode)},
      {"clip_norm", fmt_double(clip_norm)},
      {"adam_beta1", fmt_double(adam_beta1)},
      {"adam_beta2", fmt_double(adam_beta2)},
      {"adam_epsilon", fmt_double(adam_epsilon)},
      {"resample_negatives", resample_negatives ? "true" : "false"},
      {"max_seq_len", std::to_string(max_seq_len)},
      {"max_ngram", std::to_string(max_ngram)},
      {"bpe_merges", std::to_string(bpe_merges)},
      {"layers", std::to_string(layers)},
      {"heads", std::to_string(heads)},
      {"hidden", std::to_string(hidden)},
      {"feed_forward", std::to_string(feed_forward)},
      {"dropout", fmt_double(dropout)},
      {"init_std", fmt_double(init_std)},
  };
}

void TrainConfig::apply(const std::map<std::string, std::string>& values) {
  for (const auto& [key, v] : values) {
    if (key == "lambda_existence") lambda_existence = parse_double(key, v);
    else if (key == "lambda_type") lambda_type = parse_double(key, v);
    else if (key == "gamma") gamma = parse_double(key, v);
    else if (key == "learning_rate") learning_rate = parse_double(key, v);
    else if (key == "batch_size") batch_size = parse_uint(key, v);
    else if (key == "epochs") epochs = parse_uint(key, v);
    else if (key == "seed") seed = parse_uint(key, v);
    else if (key == "mode") mode = parse_mode(v);
    else if (key == "clip_norm") clip_norm = parse_double(key, v);
    else if (key == "adam_beta1") adam_beta1 = parse_double(key, v);
    else if (key == "adam_beta2") adam_beta2 = parse_double(key, v);
    else if (key == "adam_epsilon") adam_epsilon = parse_double(key, v);
    else if (key == "resample_negatives") resample_negatives = parse_bool(key, v);
    else if (key == "max_seq_len") max_seq_len = parse_uint(key, v);
    else if (key == "max_ngram") max_ngram = parse_uint(key, v);
    else if (key == "bpe_merges") bpe_merges = static_cast<int>(parse_uint(key, v));
    else if (key == "layers") layers = parse_uint(key, v);
    else if (key == "heads") heads = parse_uint(key, v);
    else if (key == "hidden") hidden = parse_uint(key, v);
    else if (key == "feed_forward") feed_forward = parse_uint(key, v);
    else if (key == "dropout") dropout = parse_double(key, v);
    else if (key == "init_std") init_std = parse_double(key, v);
    else throw std::invalid_argument("unknown config key '" + key + "'");
  }
}

std::uint64_t TrainConfig::hash() const {
  std::string canonical;
  for (const auto& [k, v] : to_map()) canonical += k + "=" + v + "\n";
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : canonical) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::map<std::string, std::string> parse_config_text(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty()) throw std::invalid_argument("config line " + std::to_string(line_no) + ": empty key");
    out[key] = value;
  }
  return out;
}

std::map<std::string, std::string> load_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

// ---- preparation -----------------------------------------------------------

std::vector<PreparedExample> prepare(const std::vector<text::Example>& data, const text::Vocab& vocab,
                                     const kb::TripleIndex* index, std::size_t max_seq_len, std::size_t max_ngram) {
  std::vector<PreparedExample> out;
  out.reserve(data.size());
  for (std::size_t e = 0; e < data.size(); ++e) {
    const auto& ex = data[e];
    ex.validate();
    PreparedExample p{e, static_cast<std::size_t>(ex.label), {}};
    for (std::size_t o = 0; o < ex.options.size(); ++o) {
      PreparedOption opt;
      opt.packed = text::pack(ex, o, vocab, max_seq_len);
      if (index) opt.mentions = supervision::find_mentions(opt.packed, *index, max_ngram);
      const std::size_t n = opt.packed.content_length();
      opt.packed.token_ids.resize(n);
      opt.packed.segment_ids.resize(n);
      opt.packed.attention_mask.resize(n);
      p.options.push_back(std::move(opt));
    }
    out.push_back(std::move(p));
  }
  return out;
}

supervision::SupervisionSet option_supervision(const PreparedOption& option, const kb::TripleIndex& index,
                                               const TrainConfig& config, std::uint64_t seed) {
  auto set = supervision::build_supervision(option.mentions, index, config.gamma, seed);
  if (config.mode == AblationMode::MergedNoRelation)
    set = supervision::merge_no_relation(std::move(set), index.relations().size());
  return set;
}

namespace {

constexpr std::uint64_t kInitStream = 1, kOrderStream = 2, kSampleStream = 3, kDropoutStream = 4, kEvalStream = 5;

model::JointLoss forward_example(const PreparedExample& ex, const model::ModelParams& params,
                                 const kb::TripleIndex* index, const TrainConfig& config,
                                 const model::JointWeights& weights, std::uint64_t sample_seed_base,
                                 model::ForwardContext ctx) {
  std::vector<model::OptionForward> options;
  options.reserve(ex.options.size());
  const bool need_labels = index && (weights.existence > 0.0 || weights.type > 0.0 || weights.report_all);
  for (std::size_t o = 0; o < ex.options.size(); ++o) {
    model::OptionForward f;
    f.hidden = model::encode(ex.options[o].packed, params, ctx);
    if (need_labels)
      f.labels = supervision::label_matrices(
          option_supervision(ex.options[o], *index, config, derive_seed(sample_seed_base, ex.ordinal, o)));
    options.push_back(std::move(f));
  }
  return model::joint_loss(options, ex.label, params, weights);
}

class Adam {
 public:
  Adam(const model::ModelParams& params, const TrainConfig& config) : config_(config) {
    for (const auto& t : params.named()) {
      m_.emplace_back(t.tensor.numel(), 0.0);
      v_.emplace_back(t.tensor.numel(), 0.0);
    }
  }

  void step(model::ModelParams& params) {
    ++t_;
    const double b1 = config_.adam_beta1, b2 = config_.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    auto named = params.named();
    for (std::size_t p = 0; p < named.size(); ++p) {
      auto values = named[p].tensor.mutable_values();
      const auto grad = named[p].tensor.grad();
      auto& m = m_[p];
      auto& v = v_[p];
      for (std::size_t i = 0; i < values.size(); ++i) {
        m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
        v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
        values[i] -= config_.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.adam_epsilon);
      }
    }
  }

 private:
  const TrainConfig& config_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t t_ = 0;
};

void clip_gradients(model::ModelParams& params, double max_norm) {
  if (max_norm <= 0.0) return;
  auto named = params.named();
  double sq = 0.0;
  for (const auto& t : named)
    for (double g : t.tensor.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw TrainingDiverged("gradient norm is not finite");
  if (norm <= max_norm) return;
  const double s = max_norm / norm;
  for (auto& t : named)
    for (double& g : t.tensor.mutable_grad()) g *= s;
}

}  // namespace

// ---- train -----------------------------------------------------------------

TrainResult train(const std::vector<text::Example>& data, const kb::TripleIndex& index, const text::Vocab& vocab,
                  const TrainConfig& config, const StepCallback& on_step) {
  config.validate();
  if (data.empty()) throw std::invalid_argument("training set is empty");
  const auto prepared = prepare(data, vocab, &index, config.max_seq_len, config.max_ngram);
  const auto weights = config.weights();

  TrainResult result{model::ModelParams::initialize(config.encoder(vocab.size()),
                                                    config.modelled_relation_types(index.relations().size()),
                                                    derive_seed(config.seed, kInitStream), config.init_std),
                     {}};
  auto& params = result.params;
  Adam adam(params, config);

  std::vector<std::size_t> order(prepared.size());
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 order_rng(derive_seed(config.seed, kOrderStream, epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(order_rng, i)]);
    const std::uint64_t sample_base =
        derive_seed(config.seed, kSampleStream, config.resample_negatives ? epoch : 0);

    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      const double inv = 1.0 / static_cast<double>(end - begin);
      params.zero_grad();
      StepRecord rec{step, epoch, 0.0, 0.0, 0.0, 0.0, weights.existence, weights.type};
      std::mt19937_64 drop_rng(derive_seed(config.seed, kDropoutStream, step));
      for (std::size_t b = begin; b < end; ++b) {
        const auto& ex = prepared[order[b]];
        try {
          auto loss = forward_example(ex, params, &index, config, weights, sample_base, {true, &drop_rng});
          ad::backward(ad::scale(loss.total, inv));
          rec.joint += loss.total.item() * inv;
          rec.answer += loss.answer * inv;
          rec.existence += loss.existence * inv;
          rec.type += loss.type * inv;
        } catch (const ad::NonFiniteError& e) {
          throw TrainingDiverged("non-finite value at step " + std::to_string(step) + " (example " +
                                 data[ex.ordinal].id + "): " + e.what());
        }
      }
      clip_gradients(params, config.clip_norm);
      adam.step(params);
      result.history.push_back(rec);
      if (on_step) on_step(rec);
      ++step;
    }
  }
  return result;
}

// ---- evaluate --------------------------------------------------------------

EvalReport evaluate(const std::vector<text::Example>& data, const model::ModelParams& params,
                    const text::Vocab& vocab, const kb::TripleIndex* index, const TrainConfig& config) {
  const auto prepared = prepare(data, vocab, index, config.max_seq_len, config.max_ngram);
  auto weights = config.weights();
  weights.report_all = true;
  const std::uint64_t sample_base = derive_seed(config.seed, kEvalStream);

  EvalReport report;
  report.examples = data.size();
  report.config = config.to_map();
  std::size_t correct = 0;
  for (const auto& ex : prepared) {
    const auto loss = forward_example(ex, params, index, config, weights, sample_base, {});
    const auto logits = loss.logits.values();
    const auto pred = model::predict(logits);
    ExampleScore s{pred.index, pred.index == ex.label, loss.answer, loss.existence, loss.type, loss.total.item()};
    correct += s.correct ? 1 : 0;
    report.mean_answer += s.answer;
    report.mean_existence += s.existence;
    report.mean_type += s.type;
    report.mean_joint += s.joint;
    report.per_example.push_back(s);
  }
  if (!prepared.empty()) {
    const double n = static_cast<double>(prepared.size());
    report.accuracy = static_cast<double>(correct) / n;
    report.mean_answer /= n;
    report.mean_existence /= n;
    report.mean_type /= n;
    report.mean_joint /= n;
  }
  return report;
}

// ---- ablation --------------------------------------------------------------

const AblationRow& AblationTable::row(AblationMode mode) const {
  for (const auto& r : rows)
    if (r.mode == mode) return r;
  throw std::out_of_range("ablation table has no row for mode " + mode_name(mode));
}

AblationTable run_ablation(const std::vector<text::Example>& train_set, const std::vector<text::Example>& dev_set,
                           const kb::TripleIndex& index, const text::Vocab& vocab, const TrainConfig& config,
                           const std::vector<std::uint64_t>& seeds, const AblationProgress& progress) {
  if (seeds.empty()) throw std::invalid_argument("ablation needs at least one seed");
  AblationTable table;
  table.seeds = seeds;
  for (auto mode : kAllModes) table.rows.push_back({mode, {}, 0.0, 0.0, 0.0});
  for (auto seed : seeds) {
    for (auto& row : table.rows) {
      TrainConfig c = config;
      c.mode = row.mode;
      c.seed = seed;
      const auto trained = train(train_set, index, vocab, c);
      const double acc = evaluate(dev_set, trained.params, vocab, nullptr, c).accuracy;
      row.accuracies.push_back(acc);
      if (progress) progress(row.mode, seed, acc);
    }
  }
  for (auto& row : table.rows) {
    const double n = static_cast<double>(row.accuracies.size());
    row.mean = std::accumulate(row.accuracies.begin(), row.accuracies.end(), 0.0) / n;
    double ss = 0.0;
    for (double a : row.accuracies) ss += (a - row.mean) * (a - row.mean);
    row.stdev = row.accuracies.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  }
  const double base = table.row(AblationMode::AnswerOnly).mean;
  for (auto& row : table.rows) row.delta = row.mode == AblationMode::AnswerOnly ? 0.0 : 100.0 * (row.mean - base);
  return table;
}

std::string format_ablation(const AblationTable& table) {
  std::ostringstream os;
  os << std::left << std::setw(26) << "Model" << std::right << std::setw(18) << "ACC.(Dev)%" << std::setw(10)
     << "Delta" << '\n';
  os << std::string(54, '-') << '\n';
  for (const auto& row : table.rows) {
    std::ostringstream acc, delta;
    acc << std::fixed << std::setprecision(2) << 100.0 * row.mean << " +- " << 100.0 * row.stdev;
    if (row.mode == AblationMode::AnswerOnly) delta << "-";
    else delta << std::showpos << std::fixed << std::setprecision(2) << row.delta;
    os << std::left << std::setw(26) << mode_label(row.mode) << std::right << std::setw(18) << acc.str()
       << std::setw(10) << delta.str() << '\n';
  }
  os << "seeds:";
  for (auto s : table.seeds) os << ' ' << s;
  os << '\n';
  return os.str();
}

std::string ablation_json(const AblationTable& table) {
  nlohmann::json j;
  j["seeds"] = table.seeds;
  for (const auto& row : table.rows)
    j["rows"].push_back({{"mode", mode_name(row.mode)},
                         {"label", mode_label(row.mode)},
                         {"accuracies", row.accuracies},
                         {"mean", row.mean},
                         {"stdev", row.stdev},
                         {"delta_points", row.delta}});
  return j.dump(2);
}

}  // namespace relweave::training
