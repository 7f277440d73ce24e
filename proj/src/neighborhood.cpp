#include "qada/neighborhood.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <unordered_set>

namespace qada {

const std::vector<SynonymEntry>& Neighborhood::of(TokenId token) const {
  static const std::vector<SynonymEntry> kNone;
  auto it = entries_.find(token);
  return it == entries_.end() ? kNone : it->second;
}

void Neighborhood::set(TokenId token, std::vector<SynonymEntry> entries) {
  if (entries.empty()) {
    entries_.erase(token);
  } else {
    entries_[token] = std::move(entries);
  }
}

NeighborhoodBuild build_neighborhood(const Vocab& vocab,
                                     const std::vector<std::pair<std::string, std::string>>& lexicon,
                                     int max_hops, double alpha_original, double decay) {
  if (max_hops < 1) throw std::invalid_argument("build_neighborhood: max_hops must be >= 1");
  if (!(decay > 0.0 && decay <= 1.0)) throw std::invalid_argument("build_neighborhood: decay must lie in (0, 1]");
  if (!(alpha_original > 0.0)) throw std::invalid_argument("build_neighborhood: alpha_original must be positive");

  NeighborhoodBuild out;
  // Ordered map keeps discovery deterministic regardless of hashing.
  std::map<TokenId, std::vector<TokenId>> edges;
  for (const auto& [a, b] : lexicon) {
    if (!vocab.contains(a) || !vocab.contains(b)) {
      ++out.skipped_pairs;
      continue;
    }
    const TokenId ia = vocab.id(a), ib = vocab.id(b);
    if (ia == ib) continue;
    auto& adj = edges[ia];
    if (std::find(adj.begin(), adj.end(), ib) == adj.end()) adj.push_back(ib);
  }

  for (const auto& [root, first] : edges) {
    std::vector<SynonymEntry> found;
    std::unordered_set<TokenId> seen{root};
    std::vector<TokenId> frontier{root};
    for (int hop = 1; hop <= max_hops && !frontier.empty(); ++hop) {
      const double alpha = alpha_original * std::pow(decay, hop);
      std::vector<TokenId> next;
      for (TokenId t : frontier) {
        auto it = edges.find(t);
        if (it == edges.end()) continue;
        for (TokenId s : it->second) {
          if (seen.insert(s).second) {
            found.push_back({s, hop, alpha});
            next.push_back(s);
          }
        }
      }
      frontier = std::move(next);
    }
    out.neighborhood.set(root, std::move(found));
  }
  return out;
}

}  // namespace qada
