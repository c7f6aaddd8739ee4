#include "relweave/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "relweave/rng.hpp"

namespace relweave::model {

void EncoderConfig::validate() const {
  if (layers == 0 || heads == 0 || hidden == 0 || feed_forward == 0 || vocab_size == 0 || max_positions == 0)
    throw std::invalid_argument("encoder sizes must all be positive");
  if (hidden % heads != 0) throw std::invalid_argument("hidden size must be divisible by the head count");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout must be in [0, 1)");
}

// ---- parameters ------------------------------------------------------------

namespace {

Tensor random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double stddev) {
  std::vector<double> v(rows * cols);
  for (double& x : v) x = truncated_normal(rng, stddev);
  return Tensor::from({rows, cols}, std::move(v), true);
}

Tensor filled(std::size_t n, double value) { return Tensor::from({n}, std::vector<double>(n, value), true); }

Tensor copy_of(const Tensor& t) {
  auto values = t.values();
  return Tensor::from(t.shape(), {values.begin(), values.end()}, true);
}

}  // namespace

ModelParams ModelParams::initialize(const EncoderConfig& config, std::size_t relation_types, std::uint64_t seed,
                                    double init_std) {
  config.validate();
  if (relation_types == 0) throw std::invalid_argument("at least one relation type is required");
  std::mt19937_64 rng(seed);
  const std::size_t H = config.hidden, F = config.feed_forward;
  ModelParams p;
  p.config_ = config;
  p.relation_types_ = relation_types;
  p.token_embedding = random_matrix(rng, config.vocab_size, H, init_std);
  p.position_embedding = random_matrix(rng, config.max_positions, H, init_std);
  p.segment_embedding = random_matrix(rng, 2, H, init_std);
  p.embedding_norm_gain = filled(H, 1.0);
  p.embedding_norm_bias = filled(H, 0.0);
  for (std::size_t l = 0; l < config.layers; ++l) {
    LayerParams layer;
    layer.query = random_matrix(rng, H, H, init_std);
    layer.query_bias = filled(H, 0.0);
    layer.key = random_matrix(rng, H, H, init_std);
    layer.value = random_matrix(rng, H, H, init_std);
    layer.value_bias = filled(H, 0.0);
    layer.output = random_matrix(rng, H, H, init_std);
    layer.output_bias = filled(H, 0.0);
    layer.attention_norm_gain = filled(H, 1.0);
    layer.attention_norm_bias = filled(H, 0.0);
    layer.ff_in = random_matrix(rng, H, F, init_std);
    layer.ff_in_bias = filled(F, 0.0);
    layer.ff_out = random_matrix(rng, F, H, init_std);
    layer.ff_out_bias = filled(H, 0.0);
    layer.ff_norm_gain = filled(H, 1.0);
    layer.ff_norm_bias = filled(H, 0.0);
    p.layers.push_back(std::move(layer));
  }
  p.answer_vector = Tensor::zeros({H, 1}, true);
  p.existence_bilinear = random_matrix(rng, H, H, init_std);
  p.type_hidden = random_matrix(rng, H, 2 * H, init_std);
  p.type_output = Tensor::zeros({relation_types, H}, true);
  return p;
}

std::vector<NamedTensor> ModelParams::named() const {
  std::vector<NamedTensor> out = {
      {"embeddings.token", token_embedding},
      {"embeddings.position", position_embedding},
      {"embeddings.segment", segment_embedding},
      {"embeddings.norm.gain", embedding_norm_gain},
      {"embeddings.norm.bias", embedding_norm_bias},
  };
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& L = layers[l];
    const std::string pre = "layer" + std::to_string(l) + ".";
    out.push_back({pre + "attention.query", L.query});
    out.push_back({pre + "attention.query_bias", L.query_bias});
    out.push_back({pre + "attention.key", L.key});
    out.push_back({pre + "attention.value", L.value});
    out.push_back({pre + "attention.value_bias", L.value_bias});
    out.push_back({pre + "attention.output", L.output});
    out.push_back({pre + "attention.output_bias", L.output_bias});
    out.push_back({pre + "attention.norm.gain", L.attention_norm_gain});
    out.push_back({pre + "attention.norm.bias", L.attention_norm_bias});
    out.push_back({pre + "ff.in", L.ff_in});
    out.push_back({pre + "ff.in_bias", L.ff_in_bias});
    out.push_back({pre + "ff.out", L.ff_out});
    out.push_back({pre + "ff.out_bias", L.ff_out_bias});
    out.push_back({pre + "ff.norm.gain", L.ff_norm_gain});
    out.push_back({pre + "ff.norm.bias", L.ff_norm_bias});
  }
  out.push_back({"heads.answer.v", answer_vector});
  out.push_back({"heads.existence.w1", existence_bilinear});
  out.push_back({"heads.type.w2", type_hidden});
  out.push_back({"heads.type.w3", type_output});
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : named()) n += t.tensor.numel();
  return n;
}

void ModelParams::zero_grad() {
  for (auto& t : named()) t.tensor.zero_grad();
}

ModelParams ModelParams::clone() const {
  ModelParams p;
  p.config_ = config_;
  p.relation_types_ = relation_types_;
  p.token_embedding = copy_of(token_embedding);
  p.position_embedding = copy_of(position_embedding);
  p.segment_embedding = copy_of(segment_embedding);
  p.embedding_norm_gain = copy_of(embedding_norm_gain);
  p.embedding_norm_bias = copy_of(embedding_norm_bias);
  for (const auto& L : layers) {
    p.layers.push_back({copy_of(L.query), copy_of(L.query_bias), copy_of(L.key),
                        copy_of(L.value), copy_of(L.value_bias), copy_of(L.output), copy_of(L.output_bias),
                        copy_of(L.attention_norm_gain), copy_of(L.attention_norm_bias), copy_of(L.ff_in),
                        copy_of(L.ff_in_bias), copy_of(L.ff_out), copy_of(L.ff_out_bias),
                        copy_of(L.ff_norm_gain), copy_of(L.ff_norm_bias)});
  }
  p.answer_vector = copy_of(answer_vector);
  p.existence_bilinear = copy_of(existence_bilinear);
  p.type_hidden = copy_of(type_hidden);
  p.type_output = copy_of(type_output);
  return p;
}

// ---- encoder ---------------------------------------------------------------

namespace {

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return ad::add_bias(ad::matmul(x, w), b); }

Tensor maybe_dropout(const Tensor& x, const EncoderConfig& config, ForwardContext ctx) {
  if (!ctx.training || config.dropout <= 0.0) return x;
  if (ctx.rng == nullptr) throw std::invalid_argument("training forward pass needs a random generator");
  return ad::dropout(x, config.dropout, *ctx.rng);
}

}  // namespace

Tensor encode(const text::PackedSequence& packed, const ModelParams& params, ForwardContext ctx) {
  const auto& cfg = params.config();
  const std::size_t len = packed.length();
  if (len == 0) throw std::invalid_argument("cannot encode an empty sequence");
  if (len > cfg.max_positions)
    throw SequenceTooLong("sequence of " + std::to_string(len) + " positions exceeds the encoder maximum of " +
                          std::to_string(cfg.max_positions));
  if (packed.segment_ids.size() != len || packed.attention_mask.size() != len)
    throw std::invalid_argument("packed sequence fields have inconsistent lengths");

  std::vector<std::size_t> tokens(len), positions(len), segments(len);
  for (std::size_t i = 0; i < len; ++i) {
    if (packed.token_ids[i] < 0 || static_cast<std::size_t>(packed.token_ids[i]) >= cfg.vocab_size)
      throw std::out_of_range("token id " + std::to_string(packed.token_ids[i]) + " outside the vocabulary");
    tokens[i] = static_cast<std::size_t>(packed.token_ids[i]);
    positions[i] = i;
    segments[i] = packed.segment_ids[i] ? 1 : 0;
  }

  Tensor x = ad::add(ad::add(ad::gather_rows(params.token_embedding, tokens),
                             ad::gather_rows(params.position_embedding, positions)),
                     ad::gather_rows(params.segment_embedding, segments));
  x = ad::layer_norm(x, params.embedding_norm_gain, params.embedding_norm_bias);
  x = maybe_dropout(x, cfg, ctx);

  const std::size_t head_dim = cfg.hidden / cfg.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  for (const auto& layer : params.layers) {
    const Tensor q = linear(x, layer.query, layer.query_bias);
    // A key bias would shift every score of a query equally, so it is left out.
    const Tensor k = ad::matmul(x, layer.key);
    const Tensor v = linear(x, layer.value, layer.value_bias);
    std::vector<Tensor> heads;
    heads.reserve(cfg.heads);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const Tensor qh = ad::slice_cols(q, h * head_dim, head_dim);
      const Tensor kh = ad::slice_cols(k, h * head_dim, head_dim);
      const Tensor vh = ad::slice_cols(v, h * head_dim, head_dim);
      Tensor scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt);
      Tensor probs = ad::masked_softmax(scores, packed.attention_mask);
      probs = maybe_dropout(probs, cfg, ctx);
      heads.push_back(ad::matmul(probs, vh));
    }
    const Tensor context = cfg.heads == 1 ? heads.front() : ad::concat_cols(heads);
    const Tensor attended = maybe_dropout(linear(context, layer.output, layer.output_bias), cfg, ctx);
    x = ad::layer_norm(ad::add(x, attended), layer.attention_norm_gain, layer.attention_norm_bias);
    const Tensor ff = linear(ad::gelu(linear(x, layer.ff_in, layer.ff_in_bias)), layer.ff_out, layer.ff_out_bias);
    x = ad::layer_norm(ad::add(x, maybe_dropout(ff, cfg, ctx)), layer.ff_norm_gain, layer.ff_norm_bias);
  }
  return x;
}

// ---- heads -----------------------------------------------------------------

Tensor answer_logit(const Tensor& hidden, const ModelParams& params) {
  const std::size_t cls[] = {0};
  return ad::reshape(ad::matmul(ad::gather_rows(hidden, cls), params.answer_vector), {1});
}

Tensor answer_loss(const Tensor& logits, std::size_t gold) {
  if (logits.rank() != 1 || logits.numel() < 2) throw std::invalid_argument("answer loss needs at least two logits");
  if (gold >= logits.numel()) throw std::out_of_range("gold option index out of range");
  const std::size_t idx[] = {gold};
  return ad::scale(ad::log(ad::pick(ad::softmax(logits), idx)), -1.0);
}

namespace {

void check_positions(const Tensor& hidden, std::size_t i, std::size_t j) {
  if (i >= hidden.dim(0) || j >= hidden.dim(0))
    throw std::out_of_range("pair position outside the encoded sequence");
}

}  // namespace

Tensor relation_existence_loss(const Tensor& hidden, std::span<const supervision::ExistenceLabel> pairs,
                               const ModelParams& params) {
  if (pairs.empty()) return Tensor::scalar(0.0);
  std::vector<std::size_t> rows_i, rows_j;
  std::vector<double> y, not_y;
  for (const auto& p : pairs) {
    check_positions(hidden, p.i, p.j);
    rows_i.push_back(p.i);
    rows_j.push_back(p.j);
    y.push_back(p.y ? 1.0 : 0.0);
    not_y.push_back(p.y ? 0.0 : 1.0);
  }
  const std::size_t n = pairs.size();
  const Tensor hi = ad::gather_rows(hidden, rows_i);
  const Tensor hj = ad::gather_rows(hidden, rows_j);
  const Tensor score = ad::sum_rows(ad::mul(ad::matmul(hi, params.existence_bilinear), hj));
  const Tensor prob = ad::sigmoid(score);
  const Tensor log_p = ad::log(prob);
  const Tensor log_q = ad::log(ad::add_scalar(ad::scale(prob, -1.0), 1.0));
  const Tensor ll = ad::add(ad::mul(Tensor::from({n}, std::move(y)), log_p),
                            ad::mul(Tensor::from({n}, std::move(not_y)), log_q));
  return ad::scale(ad::mean(ll), -1.0);
}

Tensor relation_type_loss(const Tensor& hidden, std::span<const supervision::TypeLabel> pairs,
                          const ModelParams& params) {
  if (pairs.empty()) return Tensor::scalar(0.0);
  const std::size_t R = params.relation_types();
  std::vector<std::size_t> rows_i, rows_j, picks;
  for (std::size_t r = 0; r < pairs.size(); ++r) {
    const auto& p = pairs[r];
    check_positions(hidden, p.i, p.j);
    if (p.k < 0 || static_cast<std::size_t>(p.k) >= R)
      throw std::out_of_range("relation id " + std::to_string(p.k) + " outside the " + std::to_string(R) +
                              " modelled types");
    rows_i.push_back(p.i);
    rows_j.push_back(p.j);
    picks.push_back(r * R + static_cast<std::size_t>(p.k));
  }
  const Tensor pair_states = ad::concat_cols({ad::gather_rows(hidden, rows_i), ad::gather_rows(hidden, rows_j)});
  const Tensor inner = ad::relu(ad::matmul(pair_states, ad::transpose(params.type_hidden)));
  const Tensor probs = ad::softmax(ad::matmul(inner, ad::transpose(params.type_output)));
  return ad::scale(ad::mean(ad::log(ad::pick(probs, picks))), -1.0);
}

JointLoss joint_loss(std::span<const OptionForward> options, std::size_t gold, const ModelParams& params,
                     const JointWeights& weights) {
  if (weights.existence < 0.0 || weights.type < 0.0) throw std::invalid_argument("task weights must be non-negative");
  if (options.size() < 2) throw std::invalid_argument("joint loss needs at least two options");
  const double n = static_cast<double>(options.size());

  std::vector<Tensor> logits;
  for (const auto& o : options) logits.push_back(answer_logit(o.hidden, params));
  JointLoss out;
  out.logits = ad::stack(logits);
  const Tensor ap = answer_loss(out.logits, gold);
  out.answer = ap.item();

  const bool use_re = weights.existence > 0.0, use_rt = weights.type > 0.0;
  std::vector<Tensor> aux;
  for (const auto& o : options) {
    Tensor term;
    if (use_re || weights.report_all) {
      const Tensor re = relation_existence_loss(o.hidden, o.labels.existence, params);
      out.existence += re.item() / n;
      if (use_re) term = ad::scale(re, weights.existence);
    }
    if (use_rt || weights.report_all) {
      const Tensor rt = relation_type_loss(o.hidden, o.labels.type, params);
      out.type += rt.item() / n;
      if (use_rt) {
        const Tensor weighted = ad::scale(rt, weights.type);
        term = term.defined() ? ad::add(term, weighted) : weighted;
      }
    }
    if (term.defined()) aux.push_back(term);
  }
  out.total = aux.empty() ? ap : ad::add(ap, ad::scale(ad::sum(ad::stack(aux)), 1.0 / n));
  return out;
}

// ---- prediction ------------------------------------------------------------

Prediction predict(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("no logits to predict from");
  Prediction p;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) {
    p.probabilities.push_back(std::exp(l - mx));
    z += p.probabilities.back();
  }
  for (double& q : p.probabilities) q /= z;
  p.index = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  return p;
}

Prediction predict(const text::Example& example, const ModelParams& params, const text::Vocab& vocab,
                   std::size_t max_seq_len) {
  std::vector<double> logits;
  for (std::size_t o = 0; o < example.options.size(); ++o) {
    const auto packed = text::pack(example, o, vocab, max_seq_len);
    logits.push_back(answer_logit(encode(packed, params), params).item());
  }
  return predict(logits);
}

// ---- checkpoints -----------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'R', 'W', 'C', 'K', 'P', 'T', '0', '1'};

nlohmann::json config_json(const EncoderConfig& c) {
  return {{"layers", c.layers},         {"heads", c.heads},           {"hidden", c.hidden},
          {"feed_forward", c.feed_forward}, {"vocab_size", c.vocab_size}, {"max_positions", c.max_positions},
          {"dropout", c.dropout}};
}

EncoderConfig config_from(const nlohmann::json& j) {
  EncoderConfig c;
  c.layers = j.at("layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.feed_forward = j.at("feed_forward").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_positions = j.at("max_positions").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  return c;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& params, const text::Vocab& vocab,
                     const std::map<std::string, std::string>& metadata) {
  nlohmann::json header;
  header["version"] = 1;
  header["config"] = config_json(params.config());
  header["relation_types"] = params.relation_types();
  header["vocab"] = vocab.tokens();
  header["metadata"] = metadata;
  nlohmann::json tensors = nlohmann::json::array();
  const auto named = params.named();
  for (const auto& t : named) tensors.push_back({{"name", t.name}, {"shape", t.tensor.shape()}});
  header["tensors"] = tensors;
  const std::string header_text = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp);
    out.write(kMagic, sizeof kMagic);
    const std::uint64_t header_len = header_text.size();
    out.write(reinterpret_cast<const char*>(&header_len), sizeof header_len);
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (const auto& t : named) {
      const auto v = t.tensor.values();
      out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("write failed for checkpoint " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw std::runtime_error("cannot rename " + tmp);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path);
  char magic[sizeof kMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw std::runtime_error(path + " is not a checkpoint");
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof header_len);
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw std::runtime_error(path + ": truncated header");
  const auto header = nlohmann::json::parse(header_text);
  if (header.at("version").get<int>() != 1) throw std::runtime_error(path + ": unsupported checkpoint version");

  Checkpoint ck{ModelParams::initialize(config_from(header.at("config")),
                                        header.at("relation_types").get<std::size_t>(), 0),
                text::Vocab(header.at("vocab").get<std::vector<std::string>>()),
                header.at("metadata").get<std::map<std::string, std::string>>()};
  auto named = ck.params.named();
  const auto& tensors = header.at("tensors");
  if (tensors.size() != named.size()) throw std::runtime_error(path + ": tensor count mismatch");
  for (std::size_t i = 0; i < named.size(); ++i) {
    if (tensors[i].at("name").get<std::string>() != named[i].name ||
        tensors[i].at("shape").get<ad::Shape>() != named[i].tensor.shape())
      throw std::runtime_error(path + ": unexpected tensor " + tensors[i].at("name").get<std::string>());
    auto v = named[i].tensor.mutable_values();
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!in) throw std::runtime_error(path + ": truncated tensor data");
    for (double x : v)
      if (!std::isfinite(x)) throw std::runtime_error(path + ": non-finite parameter in " + named[i].name);
  }
  if (ck.vocab.size() != ck.params.config().vocab_size)
    throw std::runtime_error(path + ": vocabulary size does not match the encoder");
  return ck;
}

}  // namespace relweave::model
