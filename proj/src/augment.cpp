#include "qada/augment.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "qada/errors.hpp"

namespace qada {

void AugmentConfig::validate() const {
  if (!(zeta >= 0.0 && zeta <= 1.0)) throw ConfigError("zeta", "must lie in [0, 1]");
  if (!(phi_cut >= 0.0 && phi_cut < 1.0)) throw ConfigError("phi_cut", "must lie in [0, 1)");
  if (!(alpha_original > 0.0)) throw ConfigError("alpha_original", "must be positive");
  if (!(decay > 0.0 && decay <= 1.0)) throw ConfigError("decay", "must lie in (0, 1]");
}

OverrideMap augment_question(std::span<const TokenId> question_ids, std::size_t position_offset,
                             const Neighborhood& neighborhood, const AugmentConfig& config,
                             const EmbeddingLookup& embedding, Rng& rng) {
  OverrideMap out;
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < question_ids.size(); ++i) {
    if (neighborhood.has_synonyms(question_ids[i])) eligible.push_back(i);
  }
  if (eligible.empty() || config.zeta <= 0.0) return out;
  // The epsilon keeps ceil(0.3 * 10) at 3 despite rounding in the product.
  const auto picks = std::min(
      eligible.size(), static_cast<std::size_t>(std::ceil(config.zeta * static_cast<double>(eligible.size()) - 1e-9)));

  // Partial Fisher-Yates: the first `picks` slots are a uniform subset.
  for (std::size_t i = 0; i < picks; ++i) {
    std::swap(eligible[i], eligible[i + rng.uniform_index(eligible.size() - i)]);
  }
  std::sort(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(picks));

  for (std::size_t k = 0; k < picks; ++k) {
    const std::size_t i = eligible[k];
    const TokenId token = question_ids[i];
    const auto& synonyms = neighborhood.of(token);
    std::vector<TokenId> vertices{token};
    std::vector<double> alphas{config.alpha_original};
    for (const auto& s : synonyms) {
      vertices.push_back(s.token);
      alphas.push_back(s.alpha);
    }
    const std::vector<double> eta = dirichlet_sample(alphas, rng);
    std::vector<double> row;
    for (std::size_t j = 0; j < vertices.size(); ++j) {
      const auto e = embedding(vertices[j]);
      if (row.empty()) row.assign(e.size(), 0.0);
      for (std::size_t c = 0; c < e.size(); ++c) row[c] += eta[j] * e[c];
    }
    out.emplace(position_offset + i, std::move(row));
  }
  return out;
}

std::vector<OverrideMap> augment_batch_questions(const EncodedBatch& batch, const QaModel& model,
                                                 const Neighborhood& neighborhood, const AugmentConfig& config,
                                                 const std::vector<bool>& include, Rng& rng) {
  if (include.size() != batch.batch) throw std::invalid_argument("augment_batch_questions: include mask size");
  std::vector<OverrideMap> out(batch.batch);
  const EmbeddingLookup lookup = [&model](TokenId id) { return model.embedding_row(id); };
  for (std::size_t b = 0; b < batch.batch; ++b) {
    if (!include[b]) continue;
    const TokenRange q = batch.layout[b].question;
    std::span<const TokenId> ids(batch.ids.data() + batch.flat(b, q.begin), q.size());
    out[b] = augment_question(ids, q.begin, neighborhood, config, lookup, rng);
  }
  return out;
}

std::size_t cutoff_width(double phi_cut, std::size_t context_size) {
  return static_cast<std::size_t>(std::lround(phi_cut * static_cast<double>(context_size)));
}

TokenRange centred_window(std::size_t midpoint, std::size_t width, TokenRange context) {
  if (!context.contains(midpoint)) throw std::invalid_argument("centred_window: midpoint outside context");
  width = std::min(width, context.size());
  std::size_t begin = midpoint >= context.begin + width / 2 ? midpoint - width / 2 : context.begin;
  begin = std::min(begin, context.end - width);
  return {begin, begin + width};
}

std::optional<TokenRange> plan_layer_cutoff(std::span<const double> example_weights, std::size_t heads,
                                            std::size_t seq_len, TokenRange context, double phi_cut, Rng& rng) {
  if (context.empty()) throw std::invalid_argument("plan_layer_cutoff: empty context");
  const std::size_t width = cutoff_width(phi_cut, context.size());
  if (width == 0) return std::nullopt;
  const std::vector<double> received = attention_received(example_weights, heads, seq_len, context);
  std::vector<double> logits(context.size());
  std::vector<bool> mask(context.size(), true);
  for (std::size_t i = 0; i < context.size(); ++i) logits[i] = received[context.begin + i];
  const std::vector<double> p = masked_softmax(logits, mask);
  const std::size_t midpoint = context.begin + rng.categorical(p);
  return centred_window(midpoint, width, context);
}

CutoffPlan plan_cutoff(const AttentionRecord& attention, const std::vector<TokenRange>& contexts,
                       const AugmentConfig& config, Rng& rng) {
  if (attention.layers() == 0) throw ContractViolation("plan_cutoff: attention record is empty");
  if (contexts.size() != attention.batch()) throw std::invalid_argument("plan_cutoff: one context per example");
  CutoffPlan plan(attention.layers(), std::vector<std::optional<TokenRange>>(attention.batch()));
  for (std::size_t l = 0; l + 1 < attention.layers(); ++l) {
    for (std::size_t b = 0; b < attention.batch(); ++b) {
      plan[l][b] = plan_layer_cutoff(attention.example(l, b), attention.heads(), attention.seq_len(), contexts[b],
                                     config.phi_cut, rng);
    }
  }
  return plan;
}

}  // namespace qada
