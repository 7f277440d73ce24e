#include "qada/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "qada/errors.hpp"

namespace qada {

void ModelConfig::validate() const {
  if (vocab_size < 5) throw ConfigError("vocab_size", "must cover the reserved tokens plus at least one word");
  if (dim == 0) throw ConfigError("dim", "must be positive");
  if (layers == 0) throw ConfigError("layers", "must be positive");
  if (heads == 0) throw ConfigError("heads", "must be positive");
  if (dim % heads != 0) throw ConfigError("heads", "must divide dim");
  if (ff_dim == 0) throw ConfigError("ff_dim", "must be positive");
  if (max_len < 8) throw ConfigError("max_len", "must be at least 8");
  if (max_answer_len == 0) throw ConfigError("max_answer_len", "must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout", "must lie in [0, 1)");
}

EncodedBatch encode_batch(const std::vector<const QaExample*>& examples, const Vocab& vocab, std::size_t max_len) {
  if (examples.empty()) throw std::invalid_argument("encode_batch: no examples");
  EncodedBatch batch;
  batch.batch = examples.size();

  std::vector<std::size_t> q_len(examples.size()), c_len(examples.size());
  for (std::size_t b = 0; b < examples.size(); ++b) {
    const QaExample& ex = *examples[b];
    q_len[b] = std::min(ex.question_tokens.size(), max_len / 3);
    c_len[b] = std::min(ex.context_tokens.size(), max_len - 3 - q_len[b]);
    if (c_len[b] == 0) throw std::invalid_argument("encode_batch: example " + ex.id + " has an empty context");
    batch.seq_len = std::max(batch.seq_len, q_len[b] + c_len[b] + 3);
  }
  const std::size_t L = batch.seq_len;
  batch.ids.assign(batch.batch * L, Vocab::kPad);
  batch.attention_mask.assign(batch.batch * L, 0);
  batch.answer_mask.assign(batch.batch * L, 0);
  batch.non_answer_mask.assign(batch.batch * L, 0);

  for (std::size_t b = 0; b < examples.size(); ++b) {
    const QaExample& ex = *examples[b];
    SegmentLayout lay;
    lay.cls = 0;
    lay.question = {1, 1 + q_len[b]};
    lay.sep_question = lay.question.end;
    lay.context = {lay.sep_question + 1, lay.sep_question + 1 + c_len[b]};
    lay.sep_context = lay.context.end;
    lay.length = lay.sep_context + 1;

    TokenId* row = batch.ids.data() + b * L;
    row[lay.cls] = Vocab::kCls;
    for (std::size_t i = 0; i < q_len[b]; ++i) row[lay.question.begin + i] = vocab.id(ex.question_tokens[i]);
    row[lay.sep_question] = Vocab::kSep;
    for (std::size_t i = 0; i < c_len[b]; ++i) row[lay.context.begin + i] = vocab.id(ex.context_tokens[i]);
    row[lay.sep_context] = Vocab::kSep;
    std::fill_n(batch.attention_mask.begin() + static_cast<std::ptrdiff_t>(b * L), lay.length, 1);

    std::optional<std::pair<std::size_t, std::size_t>> target;
    if (ex.answer && ex.answer->end < c_len[b]) {
      target = std::make_pair(lay.context.begin + ex.answer->start, lay.context.begin + ex.answer->end);
      for (std::size_t p = lay.question.begin; p < lay.question.end; ++p) batch.non_answer_mask[b * L + p] = 1;
      for (std::size_t p = lay.context.begin; p < lay.context.end; ++p) {
        const bool in_answer = p >= target->first && p <= target->second;
        (in_answer ? batch.answer_mask : batch.non_answer_mask)[b * L + p] = 1;
      }
    }
    batch.targets.push_back(target);
    batch.layout.push_back(lay);
    batch.domains.push_back(ex.domain);
  }
  return batch;
}

void AttentionRecord::push_layer(std::vector<double> weights) {
  if (weights.size() != batch_ * heads_ * seq_len_ * seq_len_) {
    throw std::invalid_argument("AttentionRecord: layer has the wrong size");
  }
  layers_.push_back(std::move(weights));
}

std::span<const double> AttentionRecord::example(std::size_t layer, std::size_t b) const {
  if (layer >= layers_.size() || b >= batch_) throw std::out_of_range("AttentionRecord: index out of range");
  const std::size_t stride = heads_ * seq_len_ * seq_len_;
  return std::span<const double>(layers_[layer]).subspan(b * stride, stride);
}

std::vector<double> attention_received(std::span<const double> example_weights, std::size_t heads,
                                       std::size_t seq_len, TokenRange queries) {
  if (example_weights.size() != heads * seq_len * seq_len) {
    throw std::invalid_argument("attention_received: weights are not [H, L, L]");
  }
  std::vector<double> score(seq_len, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t q = queries.begin; q < queries.end; ++q) {
      const double* row = example_weights.data() + (h * seq_len + q) * seq_len;
      for (std::size_t k = 0; k < seq_len; ++k) score[k] += row[k];
    }
  }
  for (double& s : score) s /= static_cast<double>(heads);
  return score;
}

// ---------------------------------------------------------------------------

QaModel::QaModel(ModelConfig config, std::uint64_t init_seed) : config_(config) {
  config_.validate();
  Rng rng(init_seed);
  const std::size_t d = config_.dim;
  auto normal = [&](Shape shape, double stddev) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = rng.normal() * stddev;
    return Tensor::from(std::move(shape), std::move(v), true);
  };
  auto constant = [](Shape shape, double value) { return Tensor::full(std::move(shape), value, true); };
  const double wd = 1.0 / std::sqrt(static_cast<double>(d));
  const double wf = 1.0 / std::sqrt(static_cast<double>(config_.ff_dim));

  params_.push_back({"tok_emb", normal({config_.vocab_size, d}, 0.1)});
  params_.push_back({"pos_emb", constant({config_.max_len, d}, 0.0)});
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    params_.push_back({p + "ln1_g", constant({d}, 1.0)});
    params_.push_back({p + "ln1_b", constant({d}, 0.0)});
    for (const char* w : {"wq", "wk", "wv", "wo"}) {
      params_.push_back({p + w, normal({d, d}, wd)});
      params_.push_back({p + "b" + std::string(w + 1), constant({d}, 0.0)});
    }
    params_.push_back({p + "ln2_g", constant({d}, 1.0)});
    params_.push_back({p + "ln2_b", constant({d}, 0.0)});
    params_.push_back({p + "w1", normal({d, config_.ff_dim}, wd)});
    params_.push_back({p + "b1", constant({config_.ff_dim}, 0.0)});
    params_.push_back({p + "w2", normal({config_.ff_dim, d}, wf)});
    params_.push_back({p + "b2", constant({d}, 0.0)});
  }
  params_.push_back({"bn_g", constant({d}, 1.0)});
  params_.push_back({"bn_b", constant({d}, 0.0)});
  params_.push_back({"head_w", normal({d, 2}, wd)});
  params_.push_back({"head_b", constant({2}, 0.0)});
  bn_.running_mean.assign(d, 0.0);
  bn_.running_var.assign(d, 1.0);
  bind();
}

Tensor& QaModel::param(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return p.tensor;
  }
  throw std::invalid_argument("unknown parameter " + name);
}

void QaModel::bind() {
  tok_emb_ = param("tok_emb");
  pos_emb_ = param("pos_emb");
  bn_g_ = param("bn_g");
  bn_b_ = param("bn_b");
  head_w_ = param("head_w");
  head_b_ = param("head_b");
  layers_.clear();
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    layers_.push_back({param(p + "ln1_g"), param(p + "ln1_b"), param(p + "wq"), param(p + "bq"), param(p + "wk"),
                       param(p + "bk"), param(p + "wv"), param(p + "bv"), param(p + "wo"), param(p + "bo"),
                       param(p + "ln2_g"), param(p + "ln2_b"), param(p + "w1"), param(p + "b1"), param(p + "w2"),
                       param(p + "b2")});
  }
}

std::vector<Tensor> QaModel::parameter_tensors() const {
  std::vector<Tensor> out;
  for (const auto& p : params_) out.push_back(p.tensor);
  return out;
}

std::span<const double> QaModel::embedding_row(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) throw std::out_of_range("embedding_row: bad id");
  return tok_emb_.data().subspan(static_cast<std::size_t>(id) * config_.dim, config_.dim);
}

Tensor QaModel::embed(const EncodedBatch& batch, const std::vector<OverrideMap>* overrides) const {
  const std::size_t L = batch.seq_len, d = config_.dim;
  if (L > config_.max_len) throw std::invalid_argument("embed: batch longer than max_len");
  std::vector<std::size_t> rows;
  std::vector<double> values;
  if (overrides) {
    if (overrides->size() != batch.batch) throw std::invalid_argument("embed: one override map per example expected");
    for (std::size_t b = 0; b < batch.batch; ++b) {
      for (const auto& [pos, row] : (*overrides)[b]) {
        if (!batch.layout[b].question.contains(pos)) {
          throw ContractViolation("embed: override at position " + std::to_string(pos) + " lies outside the question");
        }
        if (row.size() != d) throw std::invalid_argument("embed: override row has the wrong width");
        rows.push_back(batch.flat(b, pos));
        values.insert(values.end(), row.begin(), row.end());
      }
    }
  }
  Tensor tok = ops::embedding(tok_emb_, batch.ids, rows, values);
  std::vector<std::int64_t> positions(batch.batch * L);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::int64_t>(i % L);
  return ops::add(tok, ops::embedding(pos_emb_, positions));
}

EncodeResult QaModel::encode(const EncodedBatch& batch, const ForwardOptions& options) const {
  const std::size_t B = batch.batch, L = batch.seq_len, H = config_.heads, d = config_.dim, hd = d / H;
  const std::size_t n_layers = config_.layers;
  if (options.plan) {
    if (options.plan->size() > n_layers) throw ContractViolation("cutoff plan has more layers than the model");
    if (options.plan->size() == n_layers) {
      for (const auto& span : options.plan->back()) {
        if (span && !span->empty()) throw ContractViolation("cutoff on the final layer is not allowed");
      }
    }
  }

  std::vector<std::uint8_t> key_mask(B * H * L * L);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t q = 0; q < L; ++q) {
        std::memcpy(key_mask.data() + ((b * H + h) * L + q) * L, batch.attention_mask.data() + b * L, L);
      }
    }
  }
  auto split_heads = [&](const Tensor& t) {
    return ops::reshape(ops::permute(ops::reshape(t, {B, L, H, hd}), {0, 2, 1, 3}), {B * H, L, hd});
  };
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

  EncodeResult result;
  result.attention = AttentionRecord(B, H, L);
  result.applied.assign(n_layers, std::vector<std::optional<TokenRange>>(B));
  const bool drop = options.training && config_.dropout > 0.0;
  if (drop && !options.dropout_rng) throw ContractViolation("training with dropout needs a dropout rng");
  auto dropout = [&](const Tensor& t) {
    if (!drop) return t;
    const double keep = 1.0 - config_.dropout;
    std::vector<double> mask(t.numel());
    for (double& m : mask) m = options.dropout_rng->uniform() < keep ? 1.0 / keep : 0.0;
    return ops::mul(t, Tensor::from(t.shape(), std::move(mask)));
  };

  Tensor x = dropout(embed(batch, options.overrides));
  for (std::size_t l = 0; l < n_layers; ++l) {
    const Layer& P = layers_[l];
    Tensor h = ops::layer_norm(x, P.ln1_g, P.ln1_b);
    Tensor q = split_heads(ops::add(ops::matmul(h, P.wq), P.bq));
    Tensor k = split_heads(ops::add(ops::matmul(h, P.wk), P.bk));
    Tensor v = split_heads(ops::add(ops::matmul(h, P.wv), P.bv));
    Tensor att = ops::softmax(ops::scale(ops::bmm(q, k, true), inv_sqrt), key_mask);
    result.attention.push_layer(std::vector<double>(att.data().begin(), att.data().end()));
    Tensor ctx = ops::reshape(ops::permute(ops::reshape(ops::bmm(att, v), {B, H, L, hd}), {0, 2, 1, 3}), {B * L, d});
    x = ops::add(x, dropout(ops::add(ops::matmul(ctx, P.wo), P.bo)));
    Tensor h2 = ops::layer_norm(x, P.ln2_g, P.ln2_b);
    Tensor ff = ops::add(ops::matmul(ops::gelu(ops::add(ops::matmul(h2, P.w1), P.b1)), P.w2), P.b2);
    x = ops::add(x, dropout(ff));

    if (l + 1 == n_layers) break;
    std::vector<double> keep(B * L, 1.0);
    bool any = false;
    for (std::size_t b = 0; b < B; ++b) {
      std::optional<TokenRange> span;
      if (options.plan && l < options.plan->size()) {
        span = (*options.plan)[l][b];
      } else if (options.planner) {
        span = options.planner(l, b, result.attention);
      }
      if (!span || span->empty()) continue;
      const TokenRange& ctx_span = batch.layout[b].context;
      const bool in_context = span->begin >= ctx_span.begin && span->end <= ctx_span.end;
      const bool in_padding = span->begin >= batch.layout[b].length && span->end <= L;
      if (!in_context && !in_padding) throw ContractViolation("cutoff span lies outside the context");
      for (std::size_t p = span->begin; p < span->end; ++p) keep[b * L + p] = 0.0;
      result.applied[l][b] = span;
      any = true;
    }
    if (any) x = ops::scale_rows(x, keep);
  }
  result.hidden = x;
  return result;
}

QaOutput QaModel::qa_forward(const EncodedBatch& batch, const ForwardOptions& options) {
  EncodeResult enc = encode(batch, options);
  const std::size_t B = batch.batch, L = batch.seq_len;
  Tensor normed =
      ops::batch_norm(enc.hidden, bn_g_, bn_b_, batch.attention_mask, bn_, options.training, options.update_running_stats);
  Tensor logits = ops::add(ops::matmul(normed, head_w_), head_b_);  // [B * L, 2]

  std::vector<std::size_t> start_idx(B * L), end_idx(B * L);
  for (std::size_t i = 0; i < B * L; ++i) {
    start_idx[i] = 2 * i;
    end_idx[i] = 2 * i + 1;
  }
  std::vector<double> outside(B * L, -std::numeric_limits<double>::infinity());
  for (std::size_t b = 0; b < B; ++b) {
    const TokenRange& c = batch.layout[b].context;
    for (std::size_t p = c.begin; p < c.end; ++p) outside[b * L + p] = 0.0;
  }
  Tensor context_only = Tensor::from({B, L}, std::move(outside));

  QaOutput out;
  out.start_logits = ops::add(ops::reshape(ops::pick(logits, start_idx), {B, L}), context_only);
  out.end_logits = ops::add(ops::reshape(ops::pick(logits, end_idx), {B, L}), context_only);
  out.hidden = enc.hidden;
  out.attention = std::move(enc.attention);
  out.applied = std::move(enc.applied);
  return out;
}

void QaModel::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

QaModel QaModel::clone() const {
  QaModel copy = *this;
  for (auto& p : copy.params_) {
    p.tensor = Tensor::from(p.tensor.shape(), std::vector<double>(p.tensor.data().begin(), p.tensor.data().end()), true);
  }
  copy.bind();
  return copy;
}

bool QaModel::same_state(const QaModel& other) const {
  if (!(config_ == other.config_) || params_.size() != other.params_.size()) return false;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto a = params_[i].tensor.data();
    const auto b = other.params_[i].tensor.data();
    if (params_[i].name != other.params_[i].name || a.size() != b.size()) return false;
    if (std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) != 0) return false;
  }
  auto same = [](const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
  };
  return same(bn_.running_mean, other.bn_.running_mean) && same(bn_.running_var, other.bn_.running_var);
}

Tensor span_cross_entropy(const QaOutput& out, const EncodedBatch& batch) {
  const std::size_t B = batch.batch, L = batch.seq_len;
  std::vector<std::uint8_t> ctx(B * L, 0);
  for (std::size_t b = 0; b < B; ++b) {
    const TokenRange& c = batch.layout[b].context;
    for (std::size_t p = c.begin; p < c.end; ++p) ctx[b * L + p] = 1;
  }
  std::vector<std::size_t> starts, ends;
  for (std::size_t b = 0; b < B; ++b) {
    if (!batch.targets[b]) continue;
    starts.push_back(b * L + batch.targets[b]->first);
    ends.push_back(b * L + batch.targets[b]->second);
  }
  if (starts.empty()) throw std::invalid_argument("span_cross_entropy: no labelled example in batch");
  Tensor ls = ops::pick(ops::log_softmax(out.start_logits, ctx), starts);
  Tensor le = ops::pick(ops::log_softmax(out.end_logits, ctx), ends);
  return ops::scale(ops::add(ops::sum(ls), ops::sum(le)), -0.5 / static_cast<double>(starts.size()));
}

SpanPrediction decode_span(std::span<const double> start_logits, std::span<const double> end_logits,
                           std::size_t max_answer_len) {
  const std::size_t n = start_logits.size();
  if (end_logits.size() != n) throw std::invalid_argument("decode_span: logit lengths differ");
  std::vector<bool> valid(n);
  bool any = false;
  for (std::size_t i = 0; i < n; ++i) {
    valid[i] = std::isfinite(start_logits[i]) && std::isfinite(end_logits[i]);
    any = any || valid[i];
  }
  if (!any || max_answer_len == 0) throw DecodeError("decode_span: no valid (start, end) pair");
  const auto ps = masked_softmax(start_logits, valid);
  const auto pe = masked_softmax(end_logits, valid);

  SpanPrediction best;
  double best_score = -1.0;
  for (std::size_t s = 0; s < n; ++s) {
    if (!valid[s]) continue;
    for (std::size_t e = s; e < n && e - s < max_answer_len; ++e) {
      if (!valid[e]) continue;
      const double score = ps[s] * pe[e];
      if (score > best_score) {
        best_score = score;
        best.start = s;
        best.end = e;
      }
    }
  }
  best.confidence = std::sqrt(best_score);
  return best;
}

}  // namespace qada
