#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace qada {

/// SQuAD-style answer normalisation: lowercase, drop punctuation, drop the
/// articles a/an/the, collapse whitespace.
std::string normalize_answer(std::string_view text);

/// Overlap F1 between two token bags.
double token_f1(const std::vector<std::string>& prediction, const std::vector<std::string>& gold);

/// Max over gold answers; golds must be non-empty.
double exact_match_score(std::string_view prediction, const std::vector<std::string>& golds);
double f1_score(std::string_view prediction, const std::vector<std::string>& golds);

struct Metrics {
  double em = 0.0;  // percent
  double f1 = 0.0;  // percent
  std::size_t count = 0;
};

}  // namespace qada
