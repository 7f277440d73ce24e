#include "qada/text.hpp"

#include <cctype>
#include <stdexcept>

namespace qada {

namespace {

bool is_word_byte(unsigned char c) { return std::isalnum(c) || c >= 0x80; }

}  // namespace

WordPieces split_words(std::string_view text) {
  WordPieces out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      ++i;
      continue;
    }
    std::size_t j = i + 1;
    if (is_word_byte(c)) {
      while (j < text.size() && is_word_byte(static_cast<unsigned char>(text[j]))) ++j;
    }
    std::string tok(text.substr(i, j - i));
    for (char& ch : tok) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    out.tokens.push_back(std::move(tok));
    out.offsets.push_back({i, j});
    i = j;
  }
  return out;
}

Vocab::Vocab() {
  for (const char* special : {"[PAD]", "[UNK]", "[CLS]", "[SEP]"}) add(special);
}

TokenId Vocab::add(const std::string& token) {
  auto [it, inserted] = index_.emplace(token, static_cast<TokenId>(tokens_.size()));
  if (inserted) tokens_.push_back(token);
  return it->second;
}

TokenId Vocab::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) throw std::out_of_range("Vocab::token: bad id");
  return tokens_[static_cast<std::size_t>(id)];
}

Vocab Vocab::from_tokens(const std::vector<std::string>& tokens) {
  Vocab v;
  if (tokens.size() < 4) throw std::invalid_argument("Vocab::from_tokens: reserved tokens missing");
  for (std::size_t i = 0; i < 4; ++i) {
    if (tokens[i] != v.tokens_[i]) throw std::invalid_argument("Vocab::from_tokens: reserved ids must be 0..3");
  }
  for (std::size_t i = 4; i < tokens.size(); ++i) {
    if (v.add(tokens[i]) != static_cast<TokenId>(i)) throw std::invalid_argument("Vocab::from_tokens: duplicate token");
  }
  return v;
}

Tokenized tokenize(std::string_view text, const Vocab& vocab) {
  WordPieces pieces = split_words(text);
  Tokenized out;
  out.ids.reserve(pieces.tokens.size());
  for (const auto& tok : pieces.tokens) out.ids.push_back(vocab.id(tok));
  out.offsets = std::move(pieces.offsets);
  return out;
}

}  // namespace qada
