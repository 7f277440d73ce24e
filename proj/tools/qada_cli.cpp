#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "qada/checkpoint.hpp"
#include "qada/dataset.hpp"
#include "qada/domain_generator.hpp"
#include "qada/errors.hpp"
#include "qada/neighborhood.hpp"
#include "qada/pipeline.hpp"
#include "qada/run_config.hpp"

namespace fs = std::filesystem;
using namespace qada;

namespace {

struct Subcommand {
  CLI::App* app = nullptr;
  std::string config_file;
  std::map<std::string, std::string> flags;
  std::map<std::string, CLI::Option*> options;
};

void add_config_flags(Subcommand& sc) {
  sc.app->add_option("--config", sc.config_file, "flat key = value config file");
  for (const auto& key : RunConfig::keys()) {
    std::string dashed = key;
    std::replace(dashed.begin(), dashed.end(), '_', '-');
    std::string names = "--" + dashed;
    if (dashed != key) names += ",--" + key;
    sc.options[key] = sc.app->add_option(names, sc.flags[key], "override config key " + key);
  }
}

RunConfig resolve(const Subcommand& sc) {
  RunConfig cfg;
  if (!sc.config_file.empty()) cfg.apply_file(sc.config_file);
  cfg.apply_env();
  for (const auto& [key, value] : sc.flags) {
    if (sc.options.at(key)->count() > 0) cfg.set(key, value);
  }
  cfg.validate();
  return cfg;
}

void announce(const RunConfig& cfg, const std::string& command) {
  std::cerr << "# qada " << command << " resolved config\n" << cfg.dump() << std::flush;
  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    std::ofstream(fs::path(cfg.out_dir) / "resolved_config.txt") << cfg.dump();
  }
}

const std::string& require_file(const std::string& key, const std::string& path) {
  if (path.empty()) throw ConfigError(key, "required for this command");
  if (!fs::is_regular_file(path)) throw ConfigError(key, "file not found: " + path);
  return path;
}

void require_out_dir(const RunConfig& cfg) {
  if (cfg.out_dir.empty()) throw ConfigError("out_dir", "required for this command");
}

std::vector<QaExample> load_or_empty(const std::string& path) {
  return path.empty() ? std::vector<QaExample>{} : load_dataset(path).examples;
}

std::vector<QaExample> load_labeled(const std::string& key, const std::string& path) {
  auto r = load_dataset(require_file(key, path));
  if (r.rejected) std::cerr << "warning: " << r.rejected << " record(s) rejected from " << path << "\n";
  return std::move(r.examples);
}

void append_jsonl(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::app);
  out << j.dump() << "\n";
}

nlohmann::json metrics_to_json(const Metrics& m) { return {{"em", m.em}, {"f1", m.f1}, {"count", m.count}}; }

int run_gen_data(const RunConfig& cfg) {
  require_out_dir(cfg);
  announce(cfg, "gen-data");
  Rng rng(cfg.adapt.seed);
  DomainPair pair = generate_domain_pair(cfg.gen, rng);
  Rng split_rng = rng.split(100);
  DevSplit src = split_dev(pair.source, cfg.dev_fraction, split_rng);
  const fs::path out(cfg.out_dir);
  save_dataset(out / "source_train.jsonl", src.train);
  save_dataset(out / "source_dev.jsonl", src.dev);
  save_dataset(out / "target.jsonl", pair.target);
  save_dataset(out / "target_unlabeled.jsonl", pair.target_unlabeled);
  save_lexicon(out / "lexicon.txt", pair.lexicon);
  std::cerr << "wrote " << src.train.size() << " source train, " << src.dev.size() << " source dev, "
            << pair.target.size() << " target examples to " << out << "\n";
  return 0;
}

int run_pretrain(const RunConfig& cfg) {
  require_out_dir(cfg);
  require_file("source", cfg.source);
  require_file("lexicon", cfg.lexicon);
  if (!cfg.target.empty()) require_file("target", cfg.target);
  if (!cfg.source_dev.empty()) require_file("source_dev", cfg.source_dev);
  announce(cfg, "pretrain");

  const auto source = load_labeled("source", cfg.source);
  const auto target = load_or_empty(cfg.target);
  const auto source_dev = load_or_empty(cfg.source_dev);
  const auto lexicon = load_lexicon(cfg.lexicon);
  const Vocab vocab = build_vocab({&source, &target}, lexicon, cfg.vocab_min_count);
  ModelConfig mc = cfg.model;
  mc.vocab_size = vocab.size();

  const fs::path out(cfg.out_dir);
  fs::remove(out / "metrics.jsonl");
  auto result = pretrain(QaModel(mc, cfg.adapt.seed), vocab, source, cfg.adapt,
                         source_dev.empty() ? nullptr : &source_dev, [&](const PretrainReport& r) {
                           append_jsonl(out / "metrics.jsonl", r.to_json());
                           std::cerr << r.to_json().dump() << "\n";
                         });
  const std::string rng_state = Rng(cfg.adapt.seed).state();
  const nlohmann::json meta = {{"phase", "pretrain"}, {"seed", cfg.adapt.seed}};
  save_checkpoint(out / "pretrained.ckpt.json", result.final_model, vocab, rng_state, meta);
  save_checkpoint(out / "pretrained_best.ckpt.json", result.best_model, vocab, rng_state, meta);
  return 0;
}

int run_adapt(const RunConfig& cfg) {
  require_out_dir(cfg);
  require_file("checkpoint", cfg.checkpoint);
  require_file("source", cfg.source);
  require_file("target", cfg.target);
  require_file("lexicon", cfg.lexicon);
  if (!cfg.source_dev.empty()) require_file("source_dev", cfg.source_dev);
  if (!cfg.target_dev.empty()) require_file("target_dev", cfg.target_dev);
  announce(cfg, "adapt");

  Checkpoint ck = load_checkpoint(cfg.checkpoint);
  const auto source = load_labeled("source", cfg.source);
  std::vector<QaExample> target;
  for (const auto& ex : load_dataset(cfg.target).examples) target.push_back(strip_label(ex));
  for (auto& ex : target) ex.domain = Domain::target;
  const auto source_dev = load_or_empty(cfg.source_dev);
  const auto target_dev = load_or_empty(cfg.target_dev);
  const auto hood = build_neighborhood(ck.vocab, load_lexicon(cfg.lexicon), 2, cfg.adapt.augment.alpha_original,
                                       cfg.adapt.augment.decay);
  if (hood.skipped_pairs) std::cerr << "warning: " << hood.skipped_pairs << " lexicon pair(s) out of vocabulary\n";

  const fs::path out(cfg.out_dir);
  fs::remove(out / "metrics.jsonl");
  std::optional<FeatureDump> dump;
  if (cfg.dump_features) {
    fs::remove(out / "features.jsonl");
    dump.emplace(out / "features.jsonl");
  }
  DevSets dev{source_dev.empty() ? nullptr : &source_dev, target_dev.empty() ? nullptr : &target_dev};
  auto result = adapt(std::move(ck.model), ck.vocab, hood.neighborhood, source, target, cfg.adapt, dev,
                      [&](const EpochReport& r) {
                        append_jsonl(out / "metrics.jsonl", r.to_json());
                        std::cerr << r.to_json().dump() << "\n";
                      },
                      dump ? &*dump : nullptr);
  if (result.pool_always_empty) std::cerr << "warning: pseudo-label pool was empty in every epoch\n";
  save_checkpoint(out / "adapted.ckpt.json", result.model, ck.vocab, Rng(cfg.adapt.seed).state(),
                  {{"phase", "adapt"}, {"seed", cfg.adapt.seed}});
  return 0;
}

int run_eval(const RunConfig& cfg) {
  require_file("checkpoint", cfg.checkpoint);
  require_file("data", cfg.data);
  announce(cfg, "eval");
  Checkpoint ck = load_checkpoint(cfg.checkpoint);
  const auto data = load_labeled("data", cfg.data);
  const Metrics m = evaluate(ck.model, ck.vocab, data, cfg.adapt.eval_batch);
  const nlohmann::json j = metrics_to_json(m);
  std::cout << j.dump() << std::endl;
  if (!cfg.out_dir.empty()) std::ofstream(fs::path(cfg.out_dir) / "eval.json") << j.dump() << "\n";
  return 0;
}

int run_inspect(const RunConfig& cfg) {
  require_file("checkpoint", cfg.checkpoint);
  require_file("data", cfg.data);
  require_file("lexicon", cfg.lexicon);
  announce(cfg, "inspect-augment");
  Checkpoint ck = load_checkpoint(cfg.checkpoint);
  const auto data = load_dataset(cfg.data).examples;
  if (data.empty()) throw DataError("no examples in " + cfg.data);
  const auto hood = build_neighborhood(ck.vocab, load_lexicon(cfg.lexicon), 2, cfg.adapt.augment.alpha_original,
                                       cfg.adapt.augment.decay);
  Rng rng(cfg.adapt.seed);
  Rng pick_rng = rng.split(1), aug_rng = rng.split(2), cut_rng = rng.split(3);

  std::vector<std::size_t> idx(data.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  pick_rng.shuffle(idx);
  idx.resize(std::min(cfg.inspect_examples, idx.size()));
  std::vector<const QaExample*> chosen;
  for (std::size_t i : idx) chosen.push_back(&data[i]);

  const EncodedBatch batch = encode_batch(chosen, ck.vocab, ck.model.config().max_len);
  const std::vector<bool> include(batch.batch, true);
  const auto overrides = augment_batch_questions(batch, ck.model, hood.neighborhood, cfg.adapt.augment, include, aug_rng);
  ForwardOptions fo;
  fo.overrides = &overrides;
  const std::size_t heads = ck.model.config().heads;
  fo.planner = [&](std::size_t layer, std::size_t b, const AttentionRecord& rec) {
    return plan_layer_cutoff(rec.example(layer, b), heads, batch.seq_len, batch.layout[b].context,
                             cfg.adapt.augment.phi_cut, cut_rng);
  };
  const EncodeResult enc = ck.model.encode(batch, fo);

  nlohmann::json out = nlohmann::json::array();
  for (std::size_t b = 0; b < batch.batch; ++b) {
    nlohmann::json ex;
    ex["id"] = chosen[b]->id;
    ex["question"] = chosen[b]->question;
    nlohmann::json ov = nlohmann::json::array();
    for (const auto& [pos, row] : overrides[b]) {
      ov.push_back({{"position", pos}, {"token", ck.vocab.token(batch.ids[batch.flat(b, pos)])}, {"row", row}});
    }
    ex["overrides"] = std::move(ov);
    nlohmann::json cuts = nlohmann::json::array();
    for (std::size_t l = 0; l < enc.applied.size(); ++l) {
      const auto& span = enc.applied[l][b];
      if (!span) {
        cuts.push_back({{"layer", l}, {"span", nullptr}});
        continue;
      }
      const std::size_t c0 = batch.layout[b].context.begin;
      cuts.push_back({{"layer", l}, {"span", {span->begin - c0, span->end - c0}}});
    }
    ex["context_tokens"] = batch.layout[b].context.size();
    ex["cutoff"] = std::move(cuts);
    out.push_back(std::move(ex));
  }
  std::cout << out.dump(2) << std::endl;
  if (!cfg.out_dir.empty()) std::ofstream(fs::path(cfg.out_dir) / "inspect_augment.json") << out.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"QADA domain adaptation for extractive QA"};
  app.require_subcommand(1);
  std::map<std::string, Subcommand> subs;
  const std::map<std::string, std::string> about = {
      {"gen-data", "write a synthetic source/target dataset pair"},
      {"pretrain", "train on the labelled source domain"},
      {"adapt", "adapt a pretrained checkpoint to the unlabelled target domain"},
      {"eval", "print EM/F1 of a checkpoint on a labelled dataset"},
      {"inspect-augment", "print question overrides and cutoff spans for sampled examples"}};
  for (const auto& [name, text] : about) {
    Subcommand& sc = subs[name];
    sc.app = app.add_subcommand(name, text);
    add_config_flags(sc);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 1;
  }

  try {
    for (auto& [name, sc] : subs) {
      if (!sc.app->parsed()) continue;
      const RunConfig cfg = resolve(sc);
      if (name == "gen-data") return run_gen_data(cfg);
      if (name == "pretrain") return run_pretrain(cfg);
      if (name == "adapt") return run_adapt(cfg);
      if (name == "eval") return run_eval(cfg);
      if (name == "inspect-augment") return run_inspect(cfg);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 1;
}
