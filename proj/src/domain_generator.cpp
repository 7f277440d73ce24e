#include "qada/domain_generator.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "qada/errors.hpp"

namespace qada {

namespace {

struct Relation {
  std::string word;       // used in every context and in source questions
  std::string near, far;  // one and two lexicon hops away; target questions use these
  bool two_word = false;  // value followed by a suffix word
};

const std::vector<Relation>& relations() {
  static const std::vector<Relation> r = {
      {"city", "town", "village"},       {"job", "occupation", "profession"}, {"pet", "animal", "creature"},
      {"food", "dish", "meal"},          {"team", "club", "side", true},
  };
  return r;
}

// "{r}" relation word, "{n}" name, "{v}" value.
const std::vector<std::string> kSentences = {"the {r} of {n} is {v} .", "{n} 's {r} is {v} ."};
const std::vector<std::string> kQuestions = {"what is the {r} of {n} ?", "which {r} does {n} have ?"};

std::vector<std::pair<std::string, std::string>> synonym_pairs() {
  std::vector<std::pair<std::string, std::string>> p;
  for (const auto& r : relations()) {
    p.emplace_back(r.word, r.near);
    p.emplace_back(r.near, r.far);
  }
  return p;
}

const std::vector<std::string> kSourceSuffix = {"rovers", "united", "athletic"};
const std::vector<std::string> kTargetSuffix = {"wanderers", "rangers", "albion"};

const std::vector<std::string> kFillers = {
    "it rained heavily during the festival .", "the old bridge was finally repaired .",
    "many visitors arrived by train .",         "the market opens early on weekends .",
    "a quiet breeze crossed the valley .",      "the museum added a new wing ."};

// Pronounceable pseudo-words, unique across all pools.
std::vector<std::string> make_words(std::size_t count, Rng& rng, std::set<std::string>& used) {
  static const std::string cons = "bdfgklmnprstvz";
  static const std::string vow = "aeiou";
  std::vector<std::string> out;
  while (out.size() < count) {
    const std::size_t syllables = 2 + rng.uniform_index(2);
    std::string w;
    for (std::size_t s = 0; s < syllables; ++s) {
      w.push_back(cons[rng.uniform_index(cons.size())]);
      w.push_back(vow[rng.uniform_index(vow.size())]);
    }
    if (rng.uniform() < 0.3) w.push_back(cons[rng.uniform_index(cons.size())]);
    if (used.insert(w).second) out.push_back(w);
  }
  return out;
}

std::string fill(const std::string& tmpl, const std::string& rel, const std::string& name, const std::string& value,
                 std::size_t* value_pos) {
  std::string out;
  for (std::size_t i = 0; i < tmpl.size();) {
    if (tmpl.compare(i, 3, "{r}") == 0) {
      out += rel;
      i += 3;
    } else if (tmpl.compare(i, 3, "{n}") == 0) {
      out += name;
      i += 3;
    } else if (tmpl.compare(i, 3, "{v}") == 0) {
      if (value_pos) *value_pos = out.size();
      out += value;
      i += 3;
    } else {
      out.push_back(tmpl[i++]);
    }
  }
  return out;
}

struct Pools {
  std::vector<std::string> names;
  std::vector<std::vector<std::string>> values;  // per relation
};

template <class T>
const T& pick(const std::vector<T>& v, Rng& rng) {
  return v[rng.uniform_index(v.size())];
}

QaExample make_one(const std::string& id, Domain domain, const GenConfig& cfg, const Pools& own, const Pools& other,
                   Rng& rng) {
  const auto& rels = relations();
  const bool target = domain == Domain::target;
  const std::size_t lo = target ? cfg.target_min_facts : cfg.source_min_facts;
  const std::size_t hi = target ? cfg.target_max_facts : cfg.source_max_facts;
  const std::size_t facts = lo + rng.uniform_index(hi - lo + 1);

  std::vector<std::size_t> rel_order(rels.size());
  for (std::size_t i = 0; i < rel_order.size(); ++i) rel_order[i] = i;
  rng.shuffle(rel_order);
  rel_order.resize(facts);
  const bool shared_name = target && rng.uniform() < cfg.shared_name_fraction;
  const std::string& name = pick(shared_name ? other.names : own.names, rng);

  std::vector<std::string> values;
  for (std::size_t f = 0; f < facts; ++f) {
    const std::size_t r = rel_order[f];
    const bool shared = target && rng.uniform() < cfg.shared_value_fraction;
    std::string value = pick(shared ? other.values[r] : own.values[r], rng);
    if (rels[r].two_word) value += " " + pick(target ? kTargetSuffix : kSourceSuffix, rng);
    values.push_back(std::move(value));
  }
  const std::size_t asked = rng.uniform_index(facts);

  // Sentence order: facts, plus fillers for the target domain, shuffled.
  std::vector<long> order;
  for (std::size_t f = 0; f < facts; ++f) order.push_back(static_cast<long>(f));
  if (target && cfg.target_max_fillers > 0) {
    const std::size_t n_fill = 1 + rng.uniform_index(cfg.target_max_fillers);
    std::vector<std::size_t> fill_idx(kFillers.size());
    for (std::size_t i = 0; i < fill_idx.size(); ++i) fill_idx[i] = i;
    rng.shuffle(fill_idx);
    for (std::size_t i = 0; i < n_fill && i < fill_idx.size(); ++i) order.push_back(-1 - static_cast<long>(fill_idx[i]));
  }
  rng.shuffle(order);

  std::string context;
  std::size_t answer_start = 0;
  for (long o : order) {
    if (!context.empty()) context.push_back(' ');
    if (o < 0) {
      context += kFillers[static_cast<std::size_t>(-1 - o)];
      continue;
    }
    const auto f = static_cast<std::size_t>(o);
    std::size_t vpos = 0;
    const std::string sentence = fill(pick(kSentences, rng), rels[rel_order[f]].word, name, values[f], &vpos);
    if (f == asked) answer_start = context.size() + vpos;
    context += sentence;
  }
  const Relation& q = rels[rel_order[asked]];
  std::string qword = q.word;
  if (target && rng.uniform() < cfg.target_synonym_rate) qword = rng.uniform() < 0.5 ? q.near : q.far;
  const std::string question = fill(pick(kQuestions, rng), qword, name, "", nullptr);

  auto ex = make_example(id, context, question, {GoldAnswer{values[asked], answer_start}}, domain);
  if (!ex) throw std::logic_error("generator produced an unplaceable answer");
  return *ex;
}

}  // namespace

void GenConfig::validate() const {
  const std::size_t n_rel = relations().size();
  if (source_size == 0) throw ConfigError("source_size", "must be at least 1");
  if (target_size == 0) throw ConfigError("target_size", "must be at least 1");
  if (source_min_facts < 1 || source_min_facts > source_max_facts || source_max_facts > n_rel) {
    throw ConfigError("source_facts", "need 1 <= min <= max <= " + std::to_string(n_rel));
  }
  if (target_min_facts < 1 || target_min_facts > target_max_facts || target_max_facts > n_rel) {
    throw ConfigError("target_facts", "need 1 <= min <= max <= " + std::to_string(n_rel));
  }
  if (names_per_domain < 1) throw ConfigError("names_per_domain", "must be at least 1");
  if (values_per_relation < 1) throw ConfigError("values_per_relation", "must be at least 1");
  if (!(target_synonym_rate >= 0.0 && target_synonym_rate <= 1.0)) {
    throw ConfigError("target_synonym_rate", "must lie in [0, 1]");
  }
  if (!(shared_value_fraction >= 0.0 && shared_value_fraction <= 1.0)) {
    throw ConfigError("shared_value_fraction", "must lie in [0, 1]");
  }
  if (!(shared_name_fraction >= 0.0 && shared_name_fraction <= 1.0)) {
    throw ConfigError("shared_name_fraction", "must lie in [0, 1]");
  }
}

DomainPair generate_domain_pair(const GenConfig& config, Rng& rng) {
  config.validate();
  Rng word_rng = rng.split(1);
  Rng src_rng = rng.split(2);
  Rng tgt_rng = rng.split(3);

  std::set<std::string> used;
  for (const auto* group : {&kSentences, &kQuestions}) {
    for (const auto& t : *group) {
      for (const auto& w : split_words(t).tokens) used.insert(w);
    }
  }
  for (const auto& f : kFillers) {
    for (const auto& w : split_words(f).tokens) used.insert(w);
  }
  for (const auto* s : {&kSourceSuffix, &kTargetSuffix}) used.insert(s->begin(), s->end());
  for (const auto& [a, b] : synonym_pairs()) {
    used.insert(a);
    used.insert(b);
  }

  Pools src, tgt;
  src.names = make_words(config.names_per_domain, word_rng, used);
  tgt.names = make_words(config.names_per_domain, word_rng, used);
  for (std::size_t r = 0; r < relations().size(); ++r) {
    src.values.push_back(make_words(config.values_per_relation, word_rng, used));
    tgt.values.push_back(make_words(config.values_per_relation, word_rng, used));
  }

  DomainPair out;
  for (std::size_t i = 0; i < config.source_size; ++i) {
    out.source.push_back(make_one("src-" + std::to_string(i), Domain::source, config, src, src, src_rng));
  }
  for (std::size_t i = 0; i < config.target_size; ++i) {
    out.target.push_back(make_one("tgt-" + std::to_string(i), Domain::target, config, tgt, src, tgt_rng));
    out.target_unlabeled.push_back(strip_label(out.target.back()));
  }
  for (const auto& [a, b] : synonym_pairs()) {
    out.lexicon.emplace_back(a, b);
    out.lexicon.emplace_back(b, a);
  }
  return out;
}

DevSplit split_dev(const std::vector<QaExample>& examples, double fraction, Rng& rng) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw std::invalid_argument("split_dev: fraction must lie in [0, 1)");
  const auto n_dev = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(examples.size())));
  std::vector<std::size_t> idx(examples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  rng.shuffle(idx);
  std::vector<bool> is_dev(examples.size(), false);
  for (std::size_t i = 0; i < n_dev; ++i) is_dev[idx[i]] = true;
  DevSplit out;
  for (std::size_t i = 0; i < examples.size(); ++i) (is_dev[i] ? out.dev : out.train).push_back(examples[i]);
  return out;
}

}  // namespace qada
