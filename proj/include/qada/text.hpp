#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace qada {

using TokenId = std::int64_t;

/// Character span [begin, end) into the original text.
struct CharSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  bool operator==(const CharSpan&) const = default;
};

/// Lowercased word pieces of a text: runs of letters/digits (any byte >= 0x80
/// counts as a letter) and single punctuation characters.
struct WordPieces {
  std::vector<std::string> tokens;
  std::vector<CharSpan> offsets;
};

WordPieces split_words(std::string_view text);

class Vocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kCls = 2;
  static constexpr TokenId kSep = 3;

  Vocab();

  /// Id of token, adding it if new.
  TokenId add(const std::string& token);
  /// Id of token, or kUnk.
  TokenId id(const std::string& token) const;
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  const std::string& token(TokenId id) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  static Vocab from_tokens(const std::vector<std::string>& tokens);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

struct Tokenized {
  std::vector<TokenId> ids;
  std::vector<CharSpan> offsets;
};

/// Word-level tokenisation; out-of-vocabulary words map to Vocab::kUnk.
Tokenized tokenize(std::string_view text, const Vocab& vocab);

}  // namespace qada
