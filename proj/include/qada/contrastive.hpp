#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qada/model.hpp"
#include "qada/rng.hpp"
#include "qada/tensor.hpp"

namespace qada {

enum class BandwidthPolicy { median, fixed };

struct KernelConfig {
  BandwidthPolicy policy = BandwidthPolicy::median;
  double bandwidth = 1.0;  // used when policy == fixed

  void validate() const;
};

/// Token-sampling distribution of one example: softmax, restricted to
/// class_mask, of the attention each position receives from `queries`
/// (averaged over heads).
std::vector<double> class_sampling_distribution(std::span<const double> example_weights, std::size_t heads,
                                                std::size_t seq_len, TokenRange queries,
                                                std::span<const std::uint8_t> class_mask);

struct SampledFeature {
  Tensor feature;  // [1, d], a row of the hidden states (gradient flows back)
  std::size_t position = 0;
};

/// Draws a position of example b with probability from
/// class_sampling_distribution over the final layer's attention and returns
/// that position's hidden state. Returns nullopt for an empty class mask.
std::optional<SampledFeature> sample_class_feature(const Tensor& hidden, const AttentionRecord& attention,
                                                   const EncodedBatch& batch, std::size_t b,
                                                   std::span<const std::uint8_t> class_mask, Rng& rng);

struct ClassFeatures {
  std::vector<Tensor> source_answer, target_answer, source_non_answer, target_non_answer;
  std::vector<std::size_t> source_answer_pos, target_answer_pos, source_non_answer_pos, target_non_answer_pos;
};

/// One answer and one non-answer feature per labelled example.
ClassFeatures collect_class_features(const QaOutput& out, const EncodedBatch& batch, Rng& rng);

/// Median of pairwise Euclidean distances of the rows (1.0 if degenerate).
double median_bandwidth(const std::vector<Tensor>& rows);

/// Biased (V-statistic) squared MMD with a Gaussian kernel of width sigma,
/// clamped at 0 from below. Throws std::invalid_argument on an empty set.
Tensor mmd(const Tensor& a, const Tensor& b, double sigma);
/// Bandwidth chosen by `kernel` over the pooled rows of a and b.
Tensor mmd(const Tensor& a, const Tensor& b, const KernelConfig& kernel);

struct QadaLoss {
  Tensor loss;  // scalar
  std::optional<double> answer_discrepancy;      // D(src answer, tgt answer)
  std::optional<double> non_answer_discrepancy;  // D(src non-answer, tgt non-answer)
  std::optional<double> extraction;              // D(all answer, all non-answer)
  double bandwidth = 0.0;
  bool all_dropped = false;
};

/// D(sa, ta) + D(sn, tn) - D(sa + ta, sn + tn). A term whose sets are empty
/// is dropped; when all three drop, the loss is 0 and all_dropped is set.
/// Under the median policy one bandwidth is computed from all pooled
/// features and held constant.
QadaLoss qada_loss(const ClassFeatures& features, const KernelConfig& kernel);

/// ce + lambda * qada; lambda must be non-negative.
Tensor total_loss(const Tensor& ce, const Tensor& qada, double lambda);

/// Appends sampled class features as JSON lines
/// {"step", "domain", "class", "vector"} for offline inspection.
class FeatureDump {
 public:
  explicit FeatureDump(const std::filesystem::path& path);
  void write(std::size_t step, const ClassFeatures& features);

 private:
  std::ofstream out_;
};

}  // namespace qada
