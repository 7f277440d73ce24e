#include "qada/dataset.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "qada/errors.hpp"

namespace qada {

using nlohmann::json;

std::string to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

Domain domain_from_string(const std::string& s) {
  if (s == "source") return Domain::source;
  if (s == "target") return Domain::target;
  throw std::invalid_argument("unknown domain '" + s + "'");
}

std::string QaExample::span_text(AnswerSpan span) const {
  if (span.start > span.end || span.end >= context_offsets.size()) {
    throw std::out_of_range("span_text: span outside context");
  }
  const std::size_t b = context_offsets[span.start].begin;
  const std::size_t e = context_offsets[span.end].end;
  return context.substr(b, e - b);
}

void QaExample::validate() const {
  if (context_tokens.size() != context_offsets.size()) throw std::invalid_argument(id + ": offsets/tokens mismatch");
  if (answer && (answer->start > answer->end || answer->end >= context_tokens.size())) {
    throw std::invalid_argument(id + ": answer span outside context");
  }
  if (pseudo && !confidence) throw std::invalid_argument(id + ": pseudo label without confidence");
  if (confidence && !(*confidence >= 0.0 && *confidence <= 1.0)) {
    throw std::invalid_argument(id + ": confidence outside [0, 1]");
  }
}

std::optional<QaExample> make_example(std::string id, std::string context, std::string question,
                                      std::vector<GoldAnswer> gold, Domain domain) {
  QaExample ex;
  ex.id = std::move(id);
  ex.context = std::move(context);
  ex.question = std::move(question);
  ex.domain = domain;
  WordPieces ctx = split_words(ex.context);
  ex.context_tokens = std::move(ctx.tokens);
  ex.context_offsets = std::move(ctx.offsets);
  ex.question_tokens = split_words(ex.question).tokens;
  ex.gold = std::move(gold);
  if (ex.gold.empty()) return ex;

  const GoldAnswer& first = ex.gold.front();
  const std::size_t cb = first.char_start;
  const std::size_t ce = cb + first.text.size();
  if (ce > ex.context.size() || first.text.empty()) return std::nullopt;
  std::optional<std::size_t> start, end;
  for (std::size_t t = 0; t < ex.context_offsets.size(); ++t) {
    const CharSpan& o = ex.context_offsets[t];
    if (o.end > cb && o.begin < ce) {
      if (!start) start = t;
      end = t;
    }
  }
  if (!start) return std::nullopt;
  ex.answer = AnswerSpan{*start, *end};
  return ex;
}

QaExample strip_label(const QaExample& ex) {
  QaExample out = ex;
  out.answer.reset();
  out.gold.clear();
  out.pseudo = false;
  out.confidence.reset();
  return out;
}

namespace {

json to_json(const QaExample& ex) {
  json j;
  j["id"] = ex.id;
  j["context"] = ex.context;
  j["question"] = ex.question;
  json answers = json::array();
  for (const auto& g : ex.gold) answers.push_back({{"text", g.text}, {"answer_start", g.char_start}});
  j["answers"] = std::move(answers);
  j["domain"] = to_string(ex.domain);
  if (ex.pseudo) {
    j["pseudo"] = true;
    j["confidence"] = ex.confidence.value_or(0.0);
  }
  return j;
}

}  // namespace

LoadResult load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset " + path.string());
  LoadResult result;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(std::string("malformed JSON: ") + e.what(), lineno);
    }
    try {
      std::vector<GoldAnswer> gold;
      if (j.contains("answers") && !j["answers"].is_null()) {
        for (const auto& a : j.at("answers")) {
          gold.push_back({a.at("text").get<std::string>(), a.at("answer_start").get<std::size_t>()});
        }
      }
      const Domain domain = domain_from_string(j.value("domain", std::string("source")));
      auto ex = make_example(j.at("id").get<std::string>(), j.at("context").get<std::string>(),
                             j.at("question").get<std::string>(), std::move(gold), domain);
      if (!ex) {
        ++result.rejected;
        continue;
      }
      if (j.value("pseudo", false)) {
        ex->pseudo = true;
        ex->confidence = j.at("confidence").get<double>();
      }
      result.examples.push_back(std::move(*ex));
    } catch (const json::exception& e) {
      throw DataError(std::string("bad record: ") + e.what(), lineno);
    } catch (const std::invalid_argument& e) {
      throw DataError(std::string("bad record: ") + e.what(), lineno);
    }
  }
  return result;
}

void save_dataset(const std::filesystem::path& path, const std::vector<QaExample>& examples) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write dataset " + path.string());
  for (const auto& ex : examples) out << to_json(ex).dump() << '\n';
}

std::vector<std::pair<std::string, std::string>> load_lexicon(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open lexicon " + path.string());
  std::vector<std::pair<std::string, std::string>> pairs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream is(line);
    std::string a, b, extra;
    if (!(is >> a) || a.front() == '#') continue;
    if (!(is >> b) || (is >> extra)) throw DataError("lexicon line must hold exactly two tokens", lineno);
    auto lower = [](std::string s) {
      for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      return s;
    };
    pairs.emplace_back(lower(a), lower(b));
  }
  return pairs;
}

void save_lexicon(const std::filesystem::path& path, const std::vector<std::pair<std::string, std::string>>& pairs) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write lexicon " + path.string());
  out << "# synonym pairs: <word> <synonym>\n";
  for (const auto& [a, b] : pairs) out << a << ' ' << b << '\n';
}

Vocab build_vocab(const std::vector<const std::vector<QaExample>*>& datasets,
                  const std::vector<std::pair<std::string, std::string>>& lexicon, std::size_t min_count) {
  std::unordered_map<std::string, std::size_t> counts;
  std::vector<std::string> order;
  for (const auto* ds : datasets) {
    for (const auto& ex : *ds) {
      for (const auto* tokens : {&ex.question_tokens, &ex.context_tokens}) {
        for (const auto& t : *tokens) {
          if (counts[t]++ == 0) order.push_back(t);
        }
      }
    }
  }
  Vocab v;
  for (const auto& t : order) {
    if (counts[t] >= min_count) v.add(t);
  }
  for (const auto& [a, b] : lexicon) {
    v.add(a);
    v.add(b);
  }
  return v;
}

}  // namespace qada
