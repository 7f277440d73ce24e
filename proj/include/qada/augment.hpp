#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "qada/model.hpp"
#include "qada/neighborhood.hpp"
#include "qada/rng.hpp"

namespace qada {

struct AugmentConfig {
  double zeta = 0.2;            // share of synonym-bearing question tokens replaced
  double phi_cut = 0.2;         // cutoff length as a share of the context length
  double alpha_original = 1.0;  // concentration of the original token
  double decay = 0.1;           // per-hop concentration decay for synonyms

  void validate() const;
};

using EmbeddingLookup = std::function<std::span<const double>(TokenId)>;

/// Dirichlet neighbourhood sampling for one question.
///
/// Picks ceil(zeta * Q) of the Q positions whose token has synonyms, uniformly
/// without replacement. Each picked token x is replaced by sum_j eta_j e(v_j)
/// over the vertices {x} + C_x, eta ~ Dirichlet(alpha_original, alpha(C_x)...).
/// Keys of the result are question_ids indices plus position_offset.
OverrideMap augment_question(std::span<const TokenId> question_ids, std::size_t position_offset,
                             const Neighborhood& neighborhood, const AugmentConfig& config,
                             const EmbeddingLookup& embedding, Rng& rng);

/// Override maps for every example of a batch; examples with
/// include[b] == false get an empty map.
std::vector<OverrideMap> augment_batch_questions(const EncodedBatch& batch, const QaModel& model,
                                                 const Neighborhood& neighborhood, const AugmentConfig& config,
                                                 const std::vector<bool>& include, Rng& rng);

/// Cutoff length for a context of the given size: round(phi_cut * size).
std::size_t cutoff_width(double phi_cut, std::size_t context_size);

/// Window of `width` positions centred on `midpoint`, shifted inward so it
/// stays inside `context` (never shortened when the context is long enough).
TokenRange centred_window(std::size_t midpoint, std::size_t width, TokenRange context);

/// Attentive cutoff span for one layer of one example: scores are the
/// attention each context token receives from context queries, averaged over
/// heads; a midpoint is drawn from their softmax over the context.
std::optional<TokenRange> plan_layer_cutoff(std::span<const double> example_weights, std::size_t heads,
                                            std::size_t seq_len, TokenRange context, double phi_cut, Rng& rng);

/// Spans for every non-final layer of every example in the record; the final
/// layer's entries are always empty.
CutoffPlan plan_cutoff(const AttentionRecord& attention, const std::vector<TokenRange>& contexts,
                       const AugmentConfig& config, Rng& rng);

}  // namespace qada
