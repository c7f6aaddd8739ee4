#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "relweave/gradcheck.hpp"
#include "relweave/knowledge_base.hpp"
#include "relweave/model.hpp"
#include "relweave/synth.hpp"
#include "relweave/text.hpp"
#include "relweave/training.hpp"

#ifndef RELWEAVE_VERSION
#define RELWEAVE_VERSION "0.1.0"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace relweave;

namespace {

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

void write_atomically(const fs::path& path, const std::string& body) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << body;
    if (!out.flush()) throw std::runtime_error("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

class RunManifest {
 public:
  explicit RunManifest(std::string command) : command_(std::move(command)), start_(std::chrono::steady_clock::now()) {}

  void config(const std::map<std::string, std::string>& values, std::uint64_t hash) {
    config_ = values;
    hash_ = hash;
  }
  void seed(std::uint64_t s) { seed_ = s; }
  void input(const std::string& role, const std::string& path) { inputs_[role] = path; }
  void output(const std::string& role, const std::string& path) { outputs_[role] = path; }

  void write(const fs::path& path) const {
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    json j{{"command", command_},
           {"config", config_},
           {"config_hash", hex64(hash_)},
           {"seed", seed_},
           {"inputs", inputs_},
           {"outputs", outputs_},
           {"wall_seconds", wall},
           {"version", RELWEAVE_VERSION}};
    write_atomically(path, j.dump(2) + "\n");
  }

 private:
  std::string command_;
  std::map<std::string, std::string> config_;
  std::uint64_t hash_ = 0;
  std::uint64_t seed_ = 0;
  std::map<std::string, std::string> inputs_, outputs_;
  std::chrono::steady_clock::time_point start_;
};

std::uint64_t env_seed(std::uint64_t fallback) {
  const char* v = std::getenv("RELWEAVE_SEED");
  if (v == nullptr || *v == '\0') return fallback;
  try {
    std::size_t used = 0;
    const auto s = std::stoull(v, &used);
    if (used != std::string(v).size()) throw std::invalid_argument(v);
    return s;
  } catch (const std::exception&) {
    throw UsageError(std::string("RELWEAVE_SEED is not an unsigned integer: ") + v);
  }
}

// Defaults, then the config file, then RELWEAVE_SEED if nothing set a seed,
// then explicit flags.
training::TrainConfig resolve_config(const std::string& config_path, const std::map<std::string, std::string>& flags) {
  training::TrainConfig cfg;
  std::map<std::string, std::string> file;
  if (!config_path.empty()) file = training::load_config_file(config_path);
  try {
    cfg.apply(file);
    if (!file.contains("seed") && !flags.contains("seed")) cfg.seed = env_seed(cfg.seed);
    cfg.apply(flags);
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return cfg;
}

// ---- ingest ----------------------------------------------------------------

struct IngestArgs {
  std::string triples, out, relations = "observed";
  bool keep_related = true;
};

int cmd_ingest(const IngestArgs& a) {
  RunManifest run("ingest");
  kb::RelationVocab vocab;
  if (a.relations == "observed") vocab = kb::RelationVocab::from_dump(a.triples);
  else vocab = kb::RelationVocab::conceptnet();
  const auto index = kb::ingest(a.triples, vocab, a.keep_related);
  index.save(a.out);
  const auto& s = index.stats();
  std::cout << "facts " << index.size() << "  relation types " << index.relations().size() << "\n"
            << "lines " << s.lines << "  kept " << s.kept << "  duplicates " << s.duplicates << "  malformed "
            << s.malformed << "  excluded " << s.excluded << "  unselected " << s.unselected << "\n";
  const std::map<std::string, std::string> cfg{{"relations", a.relations},
                                               {"keep_relatedto_existence", a.keep_related ? "true" : "false"}};
  std::string canonical;
  for (const auto& [k, v] : cfg) canonical += k + "=" + v + "\n";
  run.config(cfg, fnv1a(canonical));
  run.input("triples", a.triples);
  run.output("index", a.out);
  run.write(a.out + ".run.json");
  return 0;
}

// ---- gen -------------------------------------------------------------------

int cmd_gen(synth::SynthSpec spec, bool seed_given, const std::string& out) {
  RunManifest run("gen");
  if (!seed_given) spec.seed = env_seed(spec.seed);
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const auto artifacts = synth::generate(spec);
  const auto paths = synth::write_artifacts(artifacts, out);
  const auto report = synth::audit(artifacts.train, artifacts.triples, artifacts.manifest);
  const auto dev_report = synth::audit(artifacts.dev, artifacts.triples, artifacts.manifest);
  std::cout << "train " << artifacts.train.size() << "  dev " << artifacts.dev.size() << "  triples "
            << artifacts.triples.size() << "\n";
  std::map<std::string, std::string> cfg;
  const json spec_json = spec.to_json();
  for (const auto& [k, v] : spec_json.items()) cfg[k] = v.dump();
  const std::string canonical = spec_json.dump();
  run.config(cfg, fnv1a(canonical));
  run.seed(spec.seed);
  run.output("train", paths.train);
  run.output("dev", paths.dev);
  run.output("triples", paths.triples);
  run.output("manifest", paths.manifest);
  run.write(fs::path(out) / "run.json");
  if (!report.ok() || !dev_report.ok()) {
    for (const auto* r : {&report, &dev_report})
      for (const auto& d : r->discrepancies) std::cerr << "audit: " << d << "\n";
    return 1;
  }
  return 0;
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
  std::string data, kb, config, out;
  std::map<std::string, std::string> overrides;
};

int cmd_train(const TrainArgs& a) {
  RunManifest run("train");
  const auto cfg = resolve_config(a.config, a.overrides);
  const auto data = text::load_dataset(a.data);
  if (data.empty()) throw std::runtime_error("no examples in " + a.data);
  const auto index = kb::TripleIndex::load(a.kb);
  const auto vocab = text::train_bpe(text::corpus_of(data), cfg.bpe_merges);

  const fs::path out(a.out);
  fs::create_directories(out);
  std::ostringstream history;
  const auto result = training::train(data, index, vocab, cfg, [&](const training::StepRecord& r) {
    history << json{{"step", r.step},
                    {"epoch", r.epoch},
                    {"joint", r.joint},
                    {"answer", r.answer},
                    {"existence", r.existence},
                    {"type", r.type},
                    {"lambda_existence", r.lambda_existence},
                    {"lambda_type", r.lambda_type}}
                   .dump()
            << "\n";
  });

  auto metadata = cfg.to_map();
  metadata["config_hash"] = hex64(cfg.hash());
  metadata["relations"] = json(index.relations().names()).dump();
  const auto ckpt = (out / "model.ckpt").string();
  model::save_checkpoint(ckpt, result.params, vocab, metadata);
  vocab.save((out / "vocab.txt").string());
  write_atomically(out / "history.jsonl", history.str());

  const auto& last = result.history.back();
  std::printf("steps %zu  final joint %.6f  answer %.6f  existence %.6f  type %.6f\n", result.history.size(),
              last.joint, last.answer, last.existence, last.type);

  run.config(cfg.to_map(), cfg.hash());
  run.seed(cfg.seed);
  run.input("data", a.data);
  run.input("kb", a.kb);
  if (!a.config.empty()) run.input("config", a.config);
  run.output("checkpoint", ckpt);
  run.output("vocab", (out / "vocab.txt").string());
  run.output("history", (out / "history.jsonl").string());
  run.write(out / "manifest.json");
  return 0;
}

// ---- eval ------------------------------------------------------------------

struct EvalArgs {
  std::string data, checkpoint, kb, record;
};

int cmd_eval(const EvalArgs& a) {
  RunManifest run("eval");
  const auto ckpt = model::load_checkpoint(a.checkpoint);
  training::TrainConfig cfg;
  auto stored = ckpt.metadata;
  for (const char* extra : {"config_hash", "relations"}) stored.erase(extra);
  cfg.apply(stored);

  const auto data = text::load_dataset(a.data);
  std::optional<kb::TripleIndex> index;
  if (!a.kb.empty()) index = kb::TripleIndex::load(a.kb);
  const auto report = training::evaluate(data, ckpt.params, ckpt.vocab, index ? &*index : nullptr, cfg);

  std::printf("examples %zu\naccuracy %.4f\nanswer loss %.6f\nexistence loss %.6f\ntype loss %.6f\njoint loss %.6f\n",
              report.examples, report.accuracy, report.mean_answer, report.mean_existence, report.mean_type,
              report.mean_joint);

  json per = json::array();
  for (std::size_t i = 0; i < report.per_example.size(); ++i) {
    const auto& s = report.per_example[i];
    per.push_back({{"id", data[i].id},
                   {"predicted", s.predicted},
                   {"correct", s.correct},
                   {"answer", s.answer},
                   {"existence", s.existence},
                   {"type", s.type},
                   {"joint", s.joint}});
  }
  const json record{{"accuracy", report.accuracy},       {"examples", report.examples},
                    {"mean_answer", report.mean_answer}, {"mean_existence", report.mean_existence},
                    {"mean_type", report.mean_type},     {"mean_joint", report.mean_joint},
                    {"config", report.config},           {"per_example", per}};
  const std::string record_path =
      a.record.empty() ? (fs::path(a.checkpoint).parent_path() / "eval.json").string() : a.record;
  write_atomically(record_path, record.dump(1) + "\n");

  run.config(cfg.to_map(), cfg.hash());
  run.seed(cfg.seed);
  run.input("data", a.data);
  run.input("checkpoint", a.checkpoint);
  if (!a.kb.empty()) run.input("kb", a.kb);
  run.output("record", record_path);
  run.write(record_path + ".run.json");
  return 0;
}

// ---- ablate ----------------------------------------------------------------

struct AblateArgs {
  std::string train, dev, kb, config, out, seeds = "1,2,3,4,5";
  std::map<std::string, std::string> overrides;
};

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    try {
      out.push_back(std::stoull(item, &used));
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw UsageError("bad seed list: " + text);
  }
  if (out.empty()) throw UsageError("seed list is empty");
  return out;
}

int cmd_ablate(const AblateArgs& a) {
  RunManifest run("ablate");
  const auto seeds = parse_seeds(a.seeds);
  const auto cfg = resolve_config(a.config, a.overrides);
  const auto train_set = text::load_dataset(a.train);
  const auto dev_set = text::load_dataset(a.dev);
  const auto index = kb::TripleIndex::load(a.kb);
  const auto vocab = text::train_bpe(text::corpus_of(train_set), cfg.bpe_merges);

  const auto table = training::run_ablation(train_set, dev_set, index, vocab, cfg, seeds,
                                            [](training::AblationMode m, std::uint64_t seed, double acc) {
                                              std::fprintf(stderr, "%-7s seed %llu  accuracy %.4f\n",
                                                           training::mode_name(m).c_str(),
                                                           static_cast<unsigned long long>(seed), acc);
                                            });
  const std::string rendered = training::format_ablation(table);
  std::cout << rendered;

  auto cfg_map = cfg.to_map();
  cfg_map["seeds"] = a.seeds;
  run.config(cfg_map, fnv1a(std::to_string(cfg.hash()) + "|" + a.seeds));
  run.seed(cfg.seed);
  run.input("train", a.train);
  run.input("dev", a.dev);
  run.input("kb", a.kb);
  if (!a.config.empty()) run.input("config", a.config);
  if (!a.out.empty()) {
    const fs::path out(a.out);
    write_atomically(out / "ablation.txt", rendered);
    write_atomically(out / "ablation.json", training::ablation_json(table) + "\n");
    run.output("table", (out / "ablation.txt").string());
    run.output("json", (out / "ablation.json").string());
    run.write(out / "run.json");
  }
  return 0;
}

// ---- gradcheck -------------------------------------------------------------

int cmd_gradcheck(const std::string& config_path, std::optional<std::uint64_t> seed_flag, bool ops_only) {
  std::uint64_t seed = 1;
  double step = gradcheck::kStep;
  if (!config_path.empty()) {
    for (const auto& [k, v] : training::load_config_file(config_path)) {
      try {
        if (k == "seed") seed = std::stoull(v);
        else if (k == "step") step = std::stod(v);
        else throw UsageError("unknown gradcheck key: " + k);
      } catch (const std::logic_error& e) {
        if (dynamic_cast<const UsageError*>(&e)) throw;
        throw UsageError("bad value for " + k + ": " + v);
      }
    }
  } else {
    seed = env_seed(seed);
  }
  if (seed_flag) seed = *seed_flag;

  bool ok = true;
  auto show = [&ok](const gradcheck::Report& r) {
    std::printf("%-4s %-16s checked %6zu  max rel err %.3e  (%s)  %.2fs\n", r.passed() ? "ok" : "FAIL", r.name.c_str(),
                r.checked, r.max_rel_error, r.worst.c_str(), r.seconds);
    for (std::size_t i = 0; i < r.failures.size() && i < 5; ++i) {
      const auto& f = r.failures[i];
      std::printf("     %s[%zu] analytic %.10e numeric %.10e rel %.3e\n", f.parameter.c_str(), f.index, f.analytic,
                  f.numeric, f.rel_error);
    }
    ok = ok && r.passed();
  };
  for (const auto& r : gradcheck::op_suite(seed)) show(r);
  if (!ops_only) show(gradcheck::check_full_model(seed, step));
  return ok ? 0 : 1;
}

// CLI11 stores flag values as strings; collect only the ones that were given.
void collect(std::map<std::string, std::string>& into, CLI::App& app, const std::vector<std::string>& keys) {
  for (const auto& key : keys) {
    auto* opt = app.get_option("--" + std::string(key == "mode" ? "mode" : key));
    if (opt->count() > 0) {
      std::string k = key;
      std::replace(k.begin(), k.end(), '-', '_');
      into[k] = opt->as<std::string>();
    }
  }
}

void add_train_flags(CLI::App& app) {
  app.add_option("--mode", "ap | re | rt | re_rt | merged")->check(CLI::IsMember({"ap", "re", "rt", "re_rt", "merged"}));
  app.add_option("--seed", "random seed");
  app.add_option("--epochs", "training epochs");
  app.add_option("--learning-rate", "Adam step size");
  app.add_option("--batch-size", "examples per step");
  app.add_option("--gamma", "negatives per positive pair");
  app.add_option("--lambda-existence", "existence loss weight");
  app.add_option("--lambda-type", "type loss weight");
  app.add_option("--max-seq-len", "packed sequence length");
}

const std::vector<std::string> kTrainFlags = {"mode",  "seed",             "epochs",      "learning-rate", "batch-size",
                                              "gamma", "lambda-existence", "lambda-type", "max-seq-len"};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"relweave: multiple-choice reading with commonsense relation supervision"};
  app.set_version_flag("--version", RELWEAVE_VERSION);
  app.require_subcommand(1);

  IngestArgs ingest_args;
  auto* ingest = app.add_subcommand("ingest", "build a triple index from a tab-separated dump");
  ingest->add_option("--triples", ingest_args.triples, "triple dump")->required()->check(CLI::ExistingFile);
  ingest->add_option("--out", ingest_args.out, "index file")->required();
  ingest->add_flag("--keep-relatedto-existence,!--no-keep-relatedto-existence", ingest_args.keep_related,
                   "keep RelatedTo facts for the existence task (default on)");
  ingest->add_option("--relations", ingest_args.relations, "observed | conceptnet")
      ->check(CLI::IsMember({"observed", "conceptnet"}));

  synth::SynthSpec spec;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen", "generate a planted-relation dataset");
  gen->add_option("--vocabulary-size", spec.vocabulary_size);
  gen->add_option("--concepts", spec.concepts);
  gen->add_option("--relation-types", spec.relation_types);
  gen->add_option("--examples", spec.examples);
  gen->add_option("--dev-examples", spec.dev_examples);
  gen->add_option("--options", spec.options);
  gen->add_option("--gap-rate", spec.gap_rate);
  gen->add_option("--noise-rate", spec.noise_rate);
  gen->add_option("--phrase-fraction", spec.phrase_fraction);
  auto* gen_seed = gen->add_option("--seed", spec.seed);
  gen->add_option("--out", gen_out, "output directory")->required();

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--data", train_args.data, "training examples (jsonl)")->required()->check(CLI::ExistingFile);
  train->add_option("--kb", train_args.kb, "triple index from ingest")->required()->check(CLI::ExistingFile);
  train->add_option("--config", train_args.config, "key = value config file")->check(CLI::ExistingFile);
  train->add_option("--out", train_args.out, "output directory")->required();
  add_train_flags(*train);

  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "score a checkpoint");
  eval->add_option("--data", eval_args.data, "examples (jsonl)")->required()->check(CLI::ExistingFile);
  eval->add_option("--checkpoint", eval_args.checkpoint)->required()->check(CLI::ExistingFile);
  eval->add_option("--kb", eval_args.kb, "triple index; enables relation losses")->check(CLI::ExistingFile);
  eval->add_option("--record", eval_args.record, "record file (default: eval.json next to the checkpoint)");

  AblateArgs ablate_args;
  auto* ablate = app.add_subcommand("ablate", "train every task combination over several seeds");
  ablate->add_option("--train", ablate_args.train)->required()->check(CLI::ExistingFile);
  ablate->add_option("--dev", ablate_args.dev)->required()->check(CLI::ExistingFile);
  ablate->add_option("--kb", ablate_args.kb)->required()->check(CLI::ExistingFile);
  ablate->add_option("--config", ablate_args.config)->check(CLI::ExistingFile);
  ablate->add_option("--seeds", ablate_args.seeds, "comma-separated seeds");
  ablate->add_option("--out", ablate_args.out, "directory for ablation.txt and ablation.json");
  add_train_flags(*ablate);
  ablate->remove_option(ablate->get_option("--mode"));

  std::string gc_config;
  std::uint64_t gc_seed = 1;
  bool gc_ops = false;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gc->add_option("--config", gc_config, "key = value file (seed, step)")->check(CLI::ExistingFile);
  auto* gc_seed_opt = gc->add_option("--seed", gc_seed);
  gc->add_flag("--ops-only", gc_ops, "skip the full-model check");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    std::cerr << sub->help();
    return 2;
  }

  try {
    if (*ingest) return cmd_ingest(ingest_args);
    if (*gen) return cmd_gen(spec, gen_seed->count() > 0, gen_out);
    if (*train) {
      collect(train_args.overrides, *train, kTrainFlags);
      return cmd_train(train_args);
    }
    if (*eval) return cmd_eval(eval_args);
    if (*ablate) {
      collect(ablate_args.overrides, *ablate,
              std::vector<std::string>(kTrainFlags.begin() + 1, kTrainFlags.end()));
      return cmd_ablate(ablate_args);
    }
    if (*gc)
      return cmd_gradcheck(gc_config, gc_seed_opt->count() > 0 ? std::optional(gc_seed) : std::nullopt, gc_ops);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.get_subcommands().front()->help();
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
