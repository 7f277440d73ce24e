#include "qada/run_config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "qada/errors.hpp"

namespace qada {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key, "expected a number, got '" + v + "'");
  return out;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError(key, "expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key, "expected true or false, got '" + v + "'");
}

std::string fmt(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

std::string quote(const std::string& s) { return "\"" + s + "\""; }

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class Proj>
Field dbl(Proj proj) {
  return {[proj](RunConfig& c, const std::string& k, const std::string& v) { proj(c) = parse_double(k, v); },
          [proj](const RunConfig& c) { return fmt(proj(const_cast<RunConfig&>(c))); }};
}

template <class Proj>
Field uint(Proj proj) {
  return {[proj](RunConfig& c, const std::string& k, const std::string& v) {
            proj(c) = static_cast<std::remove_reference_t<decltype(proj(c))>>(parse_uint(k, v));
          },
          [proj](const RunConfig& c) { return std::to_string(proj(const_cast<RunConfig&>(c))); }};
}

template <class Proj>
Field str(Proj proj) {
  return {[proj](RunConfig& c, const std::string&, const std::string& v) { proj(c) = v; },
          [proj](const RunConfig& c) { return quote(proj(const_cast<RunConfig&>(c))); }};
}

#define QADA_PROJ(expr) [](RunConfig& c) -> auto& { return expr; }

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> f = {
      {"seed", uint(QADA_PROJ(c.adapt.seed))},
      {"dim", uint(QADA_PROJ(c.model.dim))},
      {"layers", uint(QADA_PROJ(c.model.layers))},
      {"heads", uint(QADA_PROJ(c.model.heads))},
      {"ff_dim", uint(QADA_PROJ(c.model.ff_dim))},
      {"max_len", uint(QADA_PROJ(c.model.max_len))},
      {"max_answer_len", uint(QADA_PROJ(c.model.max_answer_len))},
      {"dropout", dbl(QADA_PROJ(c.model.dropout))},
      {"tau", dbl(QADA_PROJ(c.adapt.tau))},
      {"lambda", dbl(QADA_PROJ(c.adapt.lambda))},
      {"epochs_pretrain", uint(QADA_PROJ(c.adapt.epochs_pretrain))},
      {"epochs_adapt", uint(QADA_PROJ(c.adapt.epochs_adapt))},
      {"n_source", uint(QADA_PROJ(c.adapt.n_source))},
      {"n_target", uint(QADA_PROJ(c.adapt.n_target))},
      {"lr_pretrain", dbl(QADA_PROJ(c.adapt.lr_pretrain))},
      {"lr_adapt", dbl(QADA_PROJ(c.adapt.lr_adapt))},
      {"warmup", dbl(QADA_PROJ(c.adapt.warmup))},
      {"weight_decay", dbl(QADA_PROJ(c.adapt.weight_decay))},
      {"grad_clip", dbl(QADA_PROJ(c.adapt.grad_clip))},
      {"eval_batch", uint(QADA_PROJ(c.adapt.eval_batch))},
      {"augment_domains",
       {[](RunConfig& c, const std::string&, const std::string& v) { c.adapt.augment_domains = augment_domains_from_string(v); },
        [](const RunConfig& c) { return quote(to_string(c.adapt.augment_domains)); }}},
      {"zeta", dbl(QADA_PROJ(c.adapt.augment.zeta))},
      {"phi_cut", dbl(QADA_PROJ(c.adapt.augment.phi_cut))},
      {"alpha_original", dbl(QADA_PROJ(c.adapt.augment.alpha_original))},
      {"decay", dbl(QADA_PROJ(c.adapt.augment.decay))},
      {"bandwidth_policy",
       {[](RunConfig& c, const std::string& k, const std::string& v) {
          if (v == "median") c.adapt.kernel.policy = BandwidthPolicy::median;
          else if (v == "fixed") c.adapt.kernel.policy = BandwidthPolicy::fixed;
          else throw ConfigError(k, "expected median or fixed, got '" + v + "'");
        },
        [](const RunConfig& c) {
          return quote(c.adapt.kernel.policy == BandwidthPolicy::median ? "median" : "fixed");
        }}},
      {"bandwidth", dbl(QADA_PROJ(c.adapt.kernel.bandwidth))},
      {"source_size", uint(QADA_PROJ(c.gen.source_size))},
      {"target_size", uint(QADA_PROJ(c.gen.target_size))},
      {"source_min_facts", uint(QADA_PROJ(c.gen.source_min_facts))},
      {"source_max_facts", uint(QADA_PROJ(c.gen.source_max_facts))},
      {"target_min_facts", uint(QADA_PROJ(c.gen.target_min_facts))},
      {"target_max_facts", uint(QADA_PROJ(c.gen.target_max_facts))},
      {"target_max_fillers", uint(QADA_PROJ(c.gen.target_max_fillers))},
      {"names_per_domain", uint(QADA_PROJ(c.gen.names_per_domain))},
      {"values_per_relation", uint(QADA_PROJ(c.gen.values_per_relation))},
      {"shared_value_fraction", dbl(QADA_PROJ(c.gen.shared_value_fraction))},
      {"shared_name_fraction", dbl(QADA_PROJ(c.gen.shared_name_fraction))},
      {"target_synonym_rate", dbl(QADA_PROJ(c.gen.target_synonym_rate))},
      {"dev_fraction", dbl(QADA_PROJ(c.dev_fraction))},
      {"vocab_min_count", uint(QADA_PROJ(c.vocab_min_count))},
      {"source", str(QADA_PROJ(c.source))},
      {"source_dev", str(QADA_PROJ(c.source_dev))},
      {"target", str(QADA_PROJ(c.target))},
      {"target_dev", str(QADA_PROJ(c.target_dev))},
      {"lexicon", str(QADA_PROJ(c.lexicon))},
      {"data", str(QADA_PROJ(c.data))},
      {"checkpoint", str(QADA_PROJ(c.checkpoint))},
      {"out_dir", str(QADA_PROJ(c.out_dir))},
      {"inspect_examples", uint(QADA_PROJ(c.inspect_examples))},
      {"dump_features",
       {[](RunConfig& c, const std::string& k, const std::string& v) { c.dump_features = parse_bool(k, v); },
        [](const RunConfig& c) { return std::string(c.dump_features ? "true" : "false"); }}},
  };
  return f;
}

#undef QADA_PROJ

const Field& field(const std::string& key) {
  for (const auto& [k, f] : fields()) {
    if (k == key) return f;
  }
  throw ConfigError(key, "unknown config key");
}

}  // namespace

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& [key, f] : fields()) out.push_back(key);
    return out;
  }();
  return k;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  std::string v = trim(value);
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') v = v.substr(1, v.size() - 2);
  field(key).set(*this, key, v);
}

std::string RunConfig::get(const std::string& key) const { return field(key).get(*this); }

void RunConfig::apply_text(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(n), "expected key = value");
    set(trim(t.substr(0, eq)), t.substr(eq + 1));
  }
}

void RunConfig::apply_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  apply_text(ss.str());
}

void RunConfig::apply_env() {
  if (const char* s = std::getenv("QADA_SEED"); s && *s) {
    adapt.seed = parse_uint("QADA_SEED", s);
  }
}

void RunConfig::validate() const {
  ModelConfig m = model;
  m.vocab_size = 5;
  m.validate();
  adapt.validate();
  gen.validate();
  if (!(dev_fraction >= 0.0 && dev_fraction < 1.0)) throw ConfigError("dev_fraction", "must lie in [0, 1)");
  if (vocab_min_count == 0) throw ConfigError("vocab_min_count", "must be at least 1");
}

std::string RunConfig::dump() const {
  std::string out;
  for (const auto& [k, f] : fields()) out += k + " = " + f.get(*this) + "\n";
  return out;
}

}  // namespace qada
