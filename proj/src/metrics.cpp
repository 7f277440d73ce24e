#include "qada/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <sstream>
#include <stdexcept>

namespace qada {

namespace {

std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::string> out;
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

}  // namespace

std::string normalize_answer(std::string_view text) {
  std::string lowered;
  lowered.reserve(text.size());
  for (char c : text) {
    const auto u = static_cast<unsigned char>(c);
    if (std::ispunct(u)) continue;
    lowered.push_back(static_cast<char>(std::tolower(u)));
  }
  std::string out;
  for (const auto& w : split_ws(lowered)) {
    if (w == "a" || w == "an" || w == "the") continue;
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

double token_f1(const std::vector<std::string>& prediction, const std::vector<std::string>& gold) {
  if (prediction.empty() || gold.empty()) return 0.0;
  std::map<std::string, int> counts;
  for (const auto& t : gold) ++counts[t];
  int common = 0;
  for (const auto& t : prediction) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  if (common == 0) return 0.0;
  const double precision = static_cast<double>(common) / static_cast<double>(prediction.size());
  const double recall = static_cast<double>(common) / static_cast<double>(gold.size());
  return 2.0 * precision * recall / (precision + recall);
}

double exact_match_score(std::string_view prediction, const std::vector<std::string>& golds) {
  if (golds.empty()) throw std::invalid_argument("exact_match_score: no gold answers");
  const std::string p = normalize_answer(prediction);
  for (const auto& g : golds) {
    if (p == normalize_answer(g)) return 1.0;
  }
  return 0.0;
}

double f1_score(std::string_view prediction, const std::vector<std::string>& golds) {
  if (golds.empty()) throw std::invalid_argument("f1_score: no gold answers");
  const auto p = split_ws(normalize_answer(prediction));
  double best = 0.0;
  for (const auto& g : golds) best = std::max(best, token_f1(p, split_ws(normalize_answer(g))));
  return best;
}

}  // namespace qada
