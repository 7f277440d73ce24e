#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qada/augment.hpp"
#include "qada/contrastive.hpp"
#include "qada/dataset.hpp"
#include "qada/metrics.hpp"
#include "qada/model.hpp"
#include "qada/neighborhood.hpp"

namespace qada {

enum class AugmentDomains { both, target_only };
std::string to_string(AugmentDomains d);
AugmentDomains augment_domains_from_string(const std::string& s);

struct AdaptConfig {
  double tau = 0.6;
  double lambda = 0.0005;
  std::size_t epochs_adapt = 4;
  std::size_t epochs_pretrain = 2;
  std::size_t n_source = 12;
  std::size_t n_target = 12;
  double lr_pretrain = 3e-5;
  double lr_adapt = 2e-5;
  double warmup = 0.1;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  std::size_t eval_batch = 32;
  std::uint64_t seed = 0;
  AugmentDomains augment_domains = AugmentDomains::both;
  AugmentConfig augment;
  KernelConfig kernel;

  /// Throws ConfigError naming the first bad field.
  void validate() const;
};

struct Prediction {
  AnswerSpan span;  // context token indices
  std::string text;
  double confidence = 0.0;
};

/// Eval-mode forward passes (running batch-norm statistics) and span decoding.
std::vector<Prediction> predict(QaModel& model, const Vocab& vocab, const std::vector<QaExample>& examples,
                                std::size_t batch_size = 32);

/// EM/F1 percentages. Throws std::invalid_argument for an example without gold.
Metrics evaluate(QaModel& model, const Vocab& vocab, const std::vector<QaExample>& labeled,
                 std::size_t batch_size = 32);

struct PseudoLabelResult {
  std::vector<QaExample> pool;
  std::size_t considered = 0;
  double mean_confidence = 0.0;  // over all considered examples
};

/// Keeps examples whose prediction confidence is >= tau, labelled with the
/// predicted span and marked pseudo.
PseudoLabelResult select_confident(const std::vector<QaExample>& unlabeled, const std::vector<Prediction>& predictions,
                                   double tau);
PseudoLabelResult pseudo_label(QaModel& model, const Vocab& vocab, const std::vector<QaExample>& unlabeled, double tau,
                               std::size_t batch_size = 32);

struct DevSets {
  const std::vector<QaExample>* source = nullptr;
  const std::vector<QaExample>* target = nullptr;
};

struct PretrainReport {
  std::size_t epoch = 0;
  double ce = 0.0;  // epoch mean
  std::optional<Metrics> source_dev;
  nlohmann::json to_json() const;
};

struct PretrainResult {
  QaModel final_model;
  QaModel best_model;  // best source-dev F1 (final when no dev set)
  std::vector<PretrainReport> reports;
};

/// Source-only cross-entropy training, linear warmup then decay over all steps.
PretrainResult pretrain(QaModel model, const Vocab& vocab, const std::vector<QaExample>& source,
                        const AdaptConfig& config, const std::vector<QaExample>* source_dev = nullptr,
                        const std::function<void(const PretrainReport&)>& on_epoch = {});

struct EpochReport {
  std::size_t epoch = 0;
  std::size_t pool_size = 0;
  double acceptance_rate = 0.0;
  double mean_confidence = 0.0;
  std::size_t steps = 0;
  std::size_t qada_steps = 0;
  double ce = 0.0;
  std::optional<double> answer_discrepancy, non_answer_discrepancy, extraction, qada;
  std::optional<Metrics> source_dev, target_dev;
  nlohmann::json to_json() const;
};

struct AdaptResult {
  QaModel model;
  std::vector<EpochReport> reports;
  bool pool_always_empty = false;
};

/// Per epoch: pseudo-label the target set, train on mixed batches of
/// n_source source and n_target pooled target examples with question
/// augmentation, attentive cutoff and ce + lambda * L_QADA, then evaluate.
AdaptResult adapt(QaModel model, const Vocab& vocab, const Neighborhood& neighborhood,
                  const std::vector<QaExample>& source, const std::vector<QaExample>& unlabeled_target,
                  const AdaptConfig& config, const DevSets& dev = {},
                  const std::function<void(const EpochReport&)>& on_epoch = {}, FeatureDump* dump = nullptr);

}  // namespace qada
