#include "qada/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "qada/errors.hpp"

namespace qada {

void KernelConfig::validate() const {
  if (policy == BandwidthPolicy::fixed && !(bandwidth > 0.0)) {
    throw ConfigError("bandwidth", "fixed kernel bandwidth must be positive");
  }
}

std::vector<double> class_sampling_distribution(std::span<const double> example_weights, std::size_t heads,
                                                std::size_t seq_len, TokenRange queries,
                                                std::span<const std::uint8_t> class_mask) {
  if (class_mask.size() != seq_len) throw std::invalid_argument("class_sampling_distribution: mask length");
  const std::vector<double> scores = attention_received(example_weights, heads, seq_len, queries);
  std::vector<bool> mask(seq_len);
  for (std::size_t i = 0; i < seq_len; ++i) mask[i] = class_mask[i] != 0;
  return masked_softmax(scores, mask);
}

std::optional<SampledFeature> sample_class_feature(const Tensor& hidden, const AttentionRecord& attention,
                                                   const EncodedBatch& batch, std::size_t b,
                                                   std::span<const std::uint8_t> class_mask, Rng& rng) {
  if (std::none_of(class_mask.begin(), class_mask.end(), [](std::uint8_t m) { return m != 0; })) return std::nullopt;
  const std::size_t last = attention.layers() - 1;
  const TokenRange queries{0, batch.layout[b].length};
  const auto p = class_sampling_distribution(attention.example(last, b), attention.heads(), attention.seq_len(),
                                             queries, class_mask);
  const std::size_t pos = rng.categorical(p);
  const std::size_t row = batch.flat(b, pos);
  return SampledFeature{ops::gather_rows(hidden, std::span<const std::size_t>(&row, 1)), pos};
}

ClassFeatures collect_class_features(const QaOutput& out, const EncodedBatch& batch, Rng& rng) {
  ClassFeatures f;
  const std::size_t L = batch.seq_len;
  for (std::size_t b = 0; b < batch.batch; ++b) {
    if (!batch.targets[b]) continue;
    const bool source = batch.domains[b] == Domain::source;
    std::span<const std::uint8_t> answer(batch.answer_mask.data() + b * L, L);
    std::span<const std::uint8_t> other(batch.non_answer_mask.data() + b * L, L);
    if (auto s = sample_class_feature(out.hidden, out.attention, batch, b, answer, rng)) {
      (source ? f.source_answer : f.target_answer).push_back(s->feature);
      (source ? f.source_answer_pos : f.target_answer_pos).push_back(s->position);
    }
    if (auto s = sample_class_feature(out.hidden, out.attention, batch, b, other, rng)) {
      (source ? f.source_non_answer : f.target_non_answer).push_back(s->feature);
      (source ? f.source_non_answer_pos : f.target_non_answer_pos).push_back(s->position);
    }
  }
  return f;
}

double median_bandwidth(const std::vector<Tensor>& rows) {
  std::vector<double> dists;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = i + 1; j < rows.size(); ++j) {
      const auto a = rows[i].data(), b = rows[j].data();
      double s = 0.0;
      for (std::size_t c = 0; c < a.size(); ++c) s += (a[c] - b[c]) * (a[c] - b[c]);
      dists.push_back(std::sqrt(s));
    }
  }
  if (dists.empty()) return 1.0;
  const std::size_t mid = dists.size() / 2;
  std::nth_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(mid), dists.end());
  double median = dists[mid];
  if (dists.size() % 2 == 0) {
    median = 0.5 * (median + *std::max_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(mid)));
  }
  return median > 1e-12 ? median : 1.0;
}

Tensor mmd(const Tensor& a, const Tensor& b, double sigma) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) == 0 || b.dim(0) == 0) {
    throw std::invalid_argument("mmd: both feature sets must be non-empty [n, d] matrices");
  }
  if (!(sigma > 0.0)) throw std::invalid_argument("mmd: bandwidth must be positive");
  const double gamma = -1.0 / (2.0 * sigma * sigma);
  auto kernel_mean = [gamma](const Tensor& x, const Tensor& y) { return ops::mean(ops::exp(ops::scale(ops::sq_dist(x, y), gamma))); };
  Tensor value = ops::sub(ops::add(kernel_mean(a, a), kernel_mean(b, b)), ops::scale(kernel_mean(a, b), 2.0));
  return ops::clamp_min(value, 0.0);
}

Tensor mmd(const Tensor& a, const Tensor& b, const KernelConfig& kernel) {
  kernel.validate();
  if (kernel.policy == BandwidthPolicy::fixed) return mmd(a, b, kernel.bandwidth);
  std::vector<Tensor> rows;
  for (const Tensor* t : {&a, &b}) {
    const std::size_t d = t->dim(1);
    for (std::size_t i = 0; i < t->dim(0); ++i) {
      rows.push_back(Tensor::from({1, d}, std::vector<double>(t->data().begin() + i * d, t->data().begin() + (i + 1) * d)));
    }
  }
  return mmd(a, b, median_bandwidth(rows));
}

QadaLoss qada_loss(const ClassFeatures& features, const KernelConfig& kernel) {
  kernel.validate();
  QadaLoss result;
  std::vector<Tensor> pooled;
  for (const auto* set : {&features.source_answer, &features.target_answer, &features.source_non_answer,
                          &features.target_non_answer}) {
    pooled.insert(pooled.end(), set->begin(), set->end());
  }
  result.bandwidth = kernel.policy == BandwidthPolicy::fixed ? kernel.bandwidth : median_bandwidth(pooled);

  auto stack = [](const std::vector<Tensor>& a, const std::vector<Tensor>& b = {}) {
    std::vector<Tensor> all = a;
    all.insert(all.end(), b.begin(), b.end());
    return ops::concat_rows(all);
  };

  std::vector<Tensor> terms;
  if (!features.source_answer.empty() && !features.target_answer.empty()) {
    Tensor d = mmd(stack(features.source_answer), stack(features.target_answer), result.bandwidth);
    result.answer_discrepancy = d.item();
    terms.push_back(d);
  }
  if (!features.source_non_answer.empty() && !features.target_non_answer.empty()) {
    Tensor d = mmd(stack(features.source_non_answer), stack(features.target_non_answer), result.bandwidth);
    result.non_answer_discrepancy = d.item();
    terms.push_back(d);
  }
  const bool has_answer = !features.source_answer.empty() || !features.target_answer.empty();
  const bool has_other = !features.source_non_answer.empty() || !features.target_non_answer.empty();
  if (has_answer && has_other) {
    Tensor d = mmd(stack(features.source_answer, features.target_answer),
                   stack(features.source_non_answer, features.target_non_answer), result.bandwidth);
    result.extraction = d.item();
    terms.push_back(ops::scale(d, -1.0));
  }
  if (terms.empty()) {
    result.loss = Tensor::scalar(0.0);
    result.all_dropped = true;
    return result;
  }
  result.loss = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) result.loss = ops::add(result.loss, terms[i]);
  return result;
}

Tensor total_loss(const Tensor& ce, const Tensor& qada, double lambda) {
  if (!(lambda >= 0.0)) throw std::invalid_argument("total_loss: lambda must be non-negative");
  if (lambda == 0.0) return ce;
  return ops::add(ce, ops::scale(qada, lambda));
}

FeatureDump::FeatureDump(const std::filesystem::path& path) : out_(path, std::ios::app) {
  if (!out_) throw std::runtime_error("cannot open feature dump " + path.string());
}

void FeatureDump::write(std::size_t step, const ClassFeatures& features) {
  auto emit = [&](const std::vector<Tensor>& set, const char* domain, const char* cls) {
    for (const auto& t : set) {
      nlohmann::json j{{"step", step}, {"domain", domain}, {"class", cls},
                       {"vector", std::vector<double>(t.data().begin(), t.data().end())}};
      out_ << j.dump() << '\n';
    }
  };
  emit(features.source_answer, "source", "answer");
  emit(features.target_answer, "target", "answer");
  emit(features.source_non_answer, "source", "non_answer");
  emit(features.target_non_answer, "target", "non_answer");
}

}  // namespace qada
