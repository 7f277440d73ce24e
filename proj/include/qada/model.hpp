#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qada/dataset.hpp"
#include "qada/rng.hpp"
#include "qada/tensor.hpp"
#include "qada/text.hpp"

namespace qada {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t dim = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ff_dim = 128;
  std::size_t max_len = 192;
  std::size_t max_answer_len = 12;
  double dropout = 0.0;  // hidden-state dropout in training mode

  /// Throws ConfigError naming the first bad field.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Token range [begin, end) of sequence positions.
struct TokenRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool contains(std::size_t p) const { return p >= begin && p < end; }
  bool empty() const { return end <= begin; }
  bool operator==(const TokenRange&) const = default;
};

/// Where each piece of an example sits in its packed row:
/// [CLS] question [SEP] context [SEP] [PAD]...
struct SegmentLayout {
  std::size_t cls = 0;
  TokenRange question;
  std::size_t sep_question = 0;
  TokenRange context;
  std::size_t sep_context = 0;
  std::size_t length = 0;  // real (non-pad) tokens
};

struct EncodedBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<TokenId> ids;                 // [B * L]
  std::vector<std::uint8_t> attention_mask;  // [B * L]
  std::vector<SegmentLayout> layout;
  // Absolute (start, end) positions of the labelled answer, if any survived truncation.
  std::vector<std::optional<std::pair<std::size_t, std::size_t>>> targets;
  std::vector<std::uint8_t> answer_mask;      // [B * L]
  std::vector<std::uint8_t> non_answer_mask;  // [B * L]
  std::vector<Domain> domains;

  std::size_t flat(std::size_t b, std::size_t pos) const { return b * seq_len + pos; }
};

/// Packs examples into a padded batch. Questions keep at most a third of
/// max_len; contexts are truncated to fit. Class masks are filled only for
/// examples whose answer survives truncation.
EncodedBatch encode_batch(const std::vector<const QaExample*>& examples, const Vocab& vocab, std::size_t max_len);

/// Per-layer attention probabilities captured during a forward pass.
class AttentionRecord {
 public:
  AttentionRecord() = default;
  AttentionRecord(std::size_t batch, std::size_t heads, std::size_t seq_len)
      : batch_(batch), heads_(heads), seq_len_(seq_len) {}

  void push_layer(std::vector<double> weights);  // [B, H, L, L]
  std::size_t layers() const { return layers_.size(); }
  std::size_t batch() const { return batch_; }
  std::size_t heads() const { return heads_; }
  std::size_t seq_len() const { return seq_len_; }

  double at(std::size_t layer, std::size_t b, std::size_t head, std::size_t query, std::size_t key) const {
    return layers_[layer][((b * heads_ + head) * seq_len_ + query) * seq_len_ + key];
  }
  /// Weights for one example of one layer: [H, L, L].
  std::span<const double> example(std::size_t layer, std::size_t b) const;

 private:
  std::size_t batch_ = 0, heads_ = 0, seq_len_ = 0;
  std::vector<std::vector<double>> layers_;
};

/// (1/H) * sum_heads sum_{query in queries} A[head, query, key] for every key.
std::vector<double> attention_received(std::span<const double> example_weights, std::size_t heads,
                                       std::size_t seq_len, TokenRange queries);

using OverrideMap = std::map<std::size_t, std::vector<double>>;  // position -> embedding row

/// cutoff[layer][example]: positions zeroed after that layer. Spans must lie
/// inside the context; a span entirely inside the padding is also accepted.
using CutoffPlan = std::vector<std::vector<std::optional<TokenRange>>>;

/// Called after each non-final layer with the attention captured so far;
/// returns the span to zero for that layer's output.
using CutoffPlanner =
    std::function<std::optional<TokenRange>(std::size_t layer, std::size_t example, const AttentionRecord& so_far)>;

struct ForwardOptions {
  bool training = false;
  bool update_running_stats = true;
  const std::vector<OverrideMap>* overrides = nullptr;
  const CutoffPlan* plan = nullptr;
  CutoffPlanner planner;
  Rng* dropout_rng = nullptr;  // required when training with dropout > 0
};

struct EncodeResult {
  Tensor hidden;  // [B * L, d]
  AttentionRecord attention;
  CutoffPlan applied;
};

struct QaOutput {
  Tensor start_logits;  // [B, L], -inf outside the context span
  Tensor end_logits;
  Tensor hidden;  // final encoder states [B * L, d] (before the output normalisation)
  AttentionRecord attention;
  CutoffPlan applied;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

class QaModel {
 public:
  QaModel(ModelConfig config, std::uint64_t init_seed);
  QaModel(QaModel&&) = default;
  QaModel& operator=(QaModel&&) = default;

  const ModelConfig& config() const { return config_; }
  std::vector<NamedTensor>& parameters() { return params_; }
  const std::vector<NamedTensor>& parameters() const { return params_; }
  std::vector<Tensor> parameter_tensors() const;
  ops::BatchNormStats& norm_stats() { return bn_; }
  const ops::BatchNormStats& norm_stats() const { return bn_; }

  std::span<const double> embedding_row(TokenId id) const;

  /// Token + position embeddings; overridden positions take the supplied row
  /// (plus the position term) as a constant.
  Tensor embed(const EncodedBatch& batch, const std::vector<OverrideMap>* overrides = nullptr) const;
  EncodeResult encode(const EncodedBatch& batch, const ForwardOptions& options) const;
  QaOutput qa_forward(const EncodedBatch& batch, const ForwardOptions& options);

  void zero_grad();
  QaModel clone() const;
  bool same_state(const QaModel& other) const;

 private:
  struct Layer {
    Tensor ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  // Copies share parameter storage; clone() is the public deep copy.
  QaModel(const QaModel&) = default;

  Tensor& param(const std::string& name);
  void bind();

  ModelConfig config_;
  std::vector<NamedTensor> params_;
  ops::BatchNormStats bn_;
  Tensor tok_emb_, pos_emb_, bn_g_, bn_b_, head_w_, head_b_;
  std::vector<Layer> layers_;
};

/// Mean over examples of (CE(start) + CE(end)) / 2 for examples with targets.
/// Throws std::invalid_argument if no example carries a target.
Tensor span_cross_entropy(const QaOutput& out, const EncodedBatch& batch);

struct SpanPrediction {
  std::size_t start = 0;
  std::size_t end = 0;
  double confidence = 0.0;
};

class DecodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Best (s, e) with s <= e, e - s < max_answer_len over finite logits,
/// maximising p_start(s) * p_end(e). Ties go to the lowest start, then the
/// shortest span. confidence = sqrt(p_start(s) * p_end(e)).
SpanPrediction decode_span(std::span<const double> start_logits, std::span<const double> end_logits,
                           std::size_t max_answer_len);

}  // namespace qada
