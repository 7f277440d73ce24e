#include "qada/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "qada/errors.hpp"

namespace qada {

namespace {

constexpr const char* kFormat = "qada-checkpoint";
constexpr int kVersion = 1;

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"dim", c.dim},       {"layers", c.layers},
          {"heads", c.heads},           {"ff_dim", c.ff_dim}, {"max_len", c.max_len},
          {"max_answer_len", c.max_answer_len}, {"dropout", c.dropout}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.dim = j.at("dim").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.ff_dim = j.at("ff_dim").get<std::size_t>();
  c.max_len = j.at("max_len").get<std::size_t>();
  c.max_answer_len = j.at("max_answer_len").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  return c;
}

}  // namespace

std::string checkpoint_json(const QaModel& model, const Vocab& vocab, const std::string& rng_state,
                            const nlohmann::json& meta) {
  nlohmann::json j;
  j["format"] = kFormat;
  j["version"] = kVersion;
  j["config"] = config_to_json(model.config());
  j["vocab"] = vocab.tokens();
  auto params = nlohmann::json::array();
  for (const auto& p : model.parameters()) {
    const auto data = p.tensor.data();
    params.push_back({{"name", p.name},
                      {"shape", p.tensor.shape()},
                      {"values", std::vector<double>(data.begin(), data.end())}});
  }
  j["params"] = std::move(params);
  const auto& bn = model.norm_stats();
  j["batch_norm"] = {{"running_mean", bn.running_mean},
                     {"running_var", bn.running_var},
                     {"momentum", bn.momentum},
                     {"eps", bn.eps}};
  j["rng_state"] = rng_state;
  j["meta"] = meta;
  return j.dump();
}

void save_checkpoint(const std::filesystem::path& path, const QaModel& model, const Vocab& vocab,
                     const std::string& rng_state, const nlohmann::json& meta) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out << checkpoint_json(model, vocab, rng_state, meta);
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

Checkpoint parse_checkpoint(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("format") != kFormat) throw DataError("not a qada checkpoint");
    if (j.at("version").get<int>() != kVersion) throw DataError("unsupported checkpoint version");
    const ModelConfig config = config_from_json(j.at("config"));
    Vocab vocab = Vocab::from_tokens(j.at("vocab").get<std::vector<std::string>>());
    if (vocab.size() != config.vocab_size) throw DataError("checkpoint vocabulary size does not match config");
    QaModel model(config, 0);
    const auto& params = j.at("params");
    if (params.size() != model.parameters().size()) throw DataError("checkpoint parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = model.parameters()[i];
      if (params[i].at("name").get<std::string>() != p.name) {
        throw DataError("checkpoint parameter order mismatch at " + p.name);
      }
      if (params[i].at("shape").get<Shape>() != p.tensor.shape()) throw DataError("shape mismatch for " + p.name);
      const auto values = params[i].at("values").get<std::vector<double>>();
      auto dst = p.tensor.mutable_data();
      if (values.size() != dst.size()) throw DataError("value count mismatch for " + p.name);
      std::memcpy(dst.data(), values.data(), values.size() * sizeof(double));
    }
    auto& bn = model.norm_stats();
    const auto& jb = j.at("batch_norm");
    bn.running_mean = jb.at("running_mean").get<std::vector<double>>();
    bn.running_var = jb.at("running_var").get<std::vector<double>>();
    bn.momentum = jb.at("momentum").get<double>();
    bn.eps = jb.at("eps").get<double>();
    if (bn.running_mean.size() != config.dim || bn.running_var.size() != config.dim) {
      throw DataError("batch-norm statistics have the wrong size");
    }
    return Checkpoint{std::move(model), std::move(vocab), j.at("rng_state").get<std::string>(),
                      j.value("meta", nlohmann::json::object())};
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed checkpoint: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint config invalid: ") + e.what());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

}  // namespace qada
