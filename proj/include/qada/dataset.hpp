#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "qada/text.hpp"

namespace qada {

enum class Domain { source, target };

std::string to_string(Domain d);
Domain domain_from_string(const std::string& s);

/// Inclusive token span into the context.
struct AnswerSpan {
  std::size_t start = 0;
  std::size_t end = 0;
  bool operator==(const AnswerSpan&) const = default;
};

struct GoldAnswer {
  std::string text;
  std::size_t char_start = 0;
  bool operator==(const GoldAnswer&) const = default;
};

struct QaExample {
  std::string id;
  std::string context;
  std::vector<std::string> context_tokens;
  std::vector<CharSpan> context_offsets;
  std::string question;
  std::vector<std::string> question_tokens;
  std::optional<AnswerSpan> answer;
  std::vector<GoldAnswer> gold;
  Domain domain = Domain::source;
  bool pseudo = false;
  std::optional<double> confidence;

  bool operator==(const QaExample&) const = default;

  /// Context text covered by an inclusive token span.
  std::string span_text(AnswerSpan span) const;
  /// Checks the QaExample invariants; throws std::invalid_argument.
  void validate() const;
};

/// Builds an example from raw text. The first gold answer (if any) fixes the
/// token span: its character range is snapped outward to the smallest
/// covering token window. Returns nullopt when the answer falls outside the
/// context or covers no token.
std::optional<QaExample> make_example(std::string id, std::string context, std::string question,
                                      std::vector<GoldAnswer> gold, Domain domain);

/// Copy with answer, gold answers and pseudo-label fields removed.
QaExample strip_label(const QaExample& ex);

struct LoadResult {
  std::vector<QaExample> examples;
  std::size_t rejected = 0;
};

/// Reads JSON Lines. Throws DataError (with line number) on malformed JSON or
/// missing fields; records whose span cannot be placed are counted in
/// `rejected` and dropped.
LoadResult load_dataset(const std::filesystem::path& path);
void save_dataset(const std::filesystem::path& path, const std::vector<QaExample>& examples);

/// Synonym pairs, one "a b" pair per line; '#' starts a comment line.
std::vector<std::pair<std::string, std::string>> load_lexicon(const std::filesystem::path& path);
void save_lexicon(const std::filesystem::path& path, const std::vector<std::pair<std::string, std::string>>& pairs);

/// Vocabulary over context and question tokens seen at least min_count times,
/// in first-seen order, followed by lexicon words (always kept).
Vocab build_vocab(const std::vector<const std::vector<QaExample>*>& datasets,
                  const std::vector<std::pair<std::string, std::string>>& lexicon = {}, std::size_t min_count = 1);

}  // namespace qada
