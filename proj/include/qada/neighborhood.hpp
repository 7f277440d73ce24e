#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "qada/text.hpp"

namespace qada {

struct SynonymEntry {
  TokenId token = 0;
  int hop = 1;
  double alpha = 0.0;
  bool operator==(const SynonymEntry&) const = default;
};

/// Multi-hop synonyms of each vocabulary token with their Dirichlet
/// concentrations. Entries are ordered by hop, then by discovery order.
class Neighborhood {
 public:
  const std::vector<SynonymEntry>& of(TokenId token) const;
  bool has_synonyms(TokenId token) const { return !of(token).empty(); }
  void set(TokenId token, std::vector<SynonymEntry> entries);
  std::size_t size() const { return entries_.size(); }
  const std::unordered_map<TokenId, std::vector<SynonymEntry>>& entries() const { return entries_; }

 private:
  std::unordered_map<TokenId, std::vector<SynonymEntry>> entries_;
};

struct NeighborhoodBuild {
  Neighborhood neighborhood;
  std::size_t skipped_pairs = 0;  // pairs naming an out-of-vocabulary token
};

/// Breadth-first closure of the directed synonym graph up to max_hops. A
/// token reachable at several depths keeps only its smallest hop; a token is
/// never its own synonym. Hop h carries alpha_original * decay^h.
NeighborhoodBuild build_neighborhood(const Vocab& vocab,
                                     const std::vector<std::pair<std::string, std::string>>& lexicon,
                                     int max_hops = 2, double alpha_original = 1.0, double decay = 0.1);

}  // namespace qada
