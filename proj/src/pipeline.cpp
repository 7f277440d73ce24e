#include "qada/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "qada/errors.hpp"
#include "qada/optimizer.hpp"

namespace qada {

std::string to_string(AugmentDomains d) { return d == AugmentDomains::both ? "both" : "target-only"; }

AugmentDomains augment_domains_from_string(const std::string& s) {
  if (s == "both") return AugmentDomains::both;
  if (s == "target-only") return AugmentDomains::target_only;
  throw ConfigError("augment_domains", "expected both or target-only, got '" + s + "'");
}

void AdaptConfig::validate() const {
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("tau", "must lie in [0, 1]");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda", "must be finite and >= 0");
  if (n_source < 1) throw ConfigError("n_source", "must be at least 1");
  if (n_target < 1) throw ConfigError("n_target", "must be at least 1");
  if (!(lr_pretrain > 0.0)) throw ConfigError("lr_pretrain", "must be > 0");
  if (!(lr_adapt > 0.0)) throw ConfigError("lr_adapt", "must be > 0");
  if (!(warmup >= 0.0 && warmup < 1.0)) throw ConfigError("warmup", "must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay", "must be >= 0");
  if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip", "must be >= 0 (0 disables clipping)");
  if (eval_batch < 1) throw ConfigError("eval_batch", "must be at least 1");
  augment.validate();
  kernel.validate();
}

namespace {

std::vector<const QaExample*> pointers(const std::vector<QaExample>& v, std::size_t begin, std::size_t end) {
  std::vector<const QaExample*> out;
  for (std::size_t i = begin; i < end; ++i) out.push_back(&v[i]);
  return out;
}

AdamW make_optimizer(const QaModel& model, const AdaptConfig& cfg) {
  AdamW::Options opt;
  opt.weight_decay = cfg.weight_decay;
  opt.clip_norm = cfg.grad_clip;
  return AdamW(model.parameter_tensors(), opt);
}

nlohmann::json metrics_json(const std::optional<Metrics>& m) {
  if (!m) return nullptr;
  return {{"em", m->em}, {"f1", m->f1}, {"count", m->count}};
}

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

struct RunningMean {
  double sum = 0.0;
  std::size_t n = 0;
  void add(double v) {
    sum += v;
    ++n;
  }
  std::optional<double> get() const { return n ? std::optional<double>(sum / static_cast<double>(n)) : std::nullopt; }
};

}  // namespace

std::vector<Prediction> predict(QaModel& model, const Vocab& vocab, const std::vector<QaExample>& examples,
                                std::size_t batch_size) {
  if (batch_size == 0) throw std::invalid_argument("predict: batch_size must be positive");
  std::vector<Prediction> out;
  out.reserve(examples.size());
  ForwardOptions fo;
  fo.training = false;
  for (std::size_t begin = 0; begin < examples.size(); begin += batch_size) {
    const std::size_t end = std::min(examples.size(), begin + batch_size);
    const EncodedBatch batch = encode_batch(pointers(examples, begin, end), vocab, model.config().max_len);
    const QaOutput o = model.qa_forward(batch, fo);
    const auto s = o.start_logits.data();
    const auto e = o.end_logits.data();
    for (std::size_t b = 0; b < batch.batch; ++b) {
      const std::size_t L = batch.seq_len;
      const SpanPrediction sp = decode_span(s.subspan(b * L, L), e.subspan(b * L, L), model.config().max_answer_len);
      const std::size_t c0 = batch.layout[b].context.begin;
      Prediction p;
      p.span = {sp.start - c0, sp.end - c0};
      p.text = examples[begin + b].span_text(p.span);
      p.confidence = sp.confidence;
      out.push_back(std::move(p));
    }
  }
  return out;
}

Metrics evaluate(QaModel& model, const Vocab& vocab, const std::vector<QaExample>& labeled, std::size_t batch_size) {
  for (const auto& ex : labeled) {
    if (ex.gold.empty()) throw std::invalid_argument("evaluate: example " + ex.id + " has no gold answer");
  }
  Metrics m;
  m.count = labeled.size();
  if (labeled.empty()) return m;
  const auto preds = predict(model, vocab, labeled, batch_size);
  double em = 0.0, f1 = 0.0;
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    std::vector<std::string> golds;
    for (const auto& g : labeled[i].gold) golds.push_back(g.text);
    em += exact_match_score(preds[i].text, golds);
    f1 += f1_score(preds[i].text, golds);
  }
  m.em = 100.0 * em / static_cast<double>(labeled.size());
  m.f1 = 100.0 * f1 / static_cast<double>(labeled.size());
  return m;
}

PseudoLabelResult select_confident(const std::vector<QaExample>& unlabeled, const std::vector<Prediction>& predictions,
                                   double tau) {
  if (unlabeled.size() != predictions.size()) throw std::invalid_argument("select_confident: size mismatch");
  PseudoLabelResult r;
  r.considered = unlabeled.size();
  double conf = 0.0;
  for (std::size_t i = 0; i < unlabeled.size(); ++i) {
    const Prediction& p = predictions[i];
    conf += p.confidence;
    if (!(p.confidence >= tau)) continue;
    QaExample ex = unlabeled[i];
    ex.answer = p.span;
    ex.gold = {GoldAnswer{p.text, ex.context_offsets.at(p.span.start).begin}};
    ex.pseudo = true;
    ex.confidence = p.confidence;
    r.pool.push_back(std::move(ex));
  }
  if (r.considered) r.mean_confidence = conf / static_cast<double>(r.considered);
  return r;
}

PseudoLabelResult pseudo_label(QaModel& model, const Vocab& vocab, const std::vector<QaExample>& unlabeled, double tau,
                               std::size_t batch_size) {
  return select_confident(unlabeled, predict(model, vocab, unlabeled, batch_size), tau);
}

nlohmann::json PretrainReport::to_json() const {
  return {{"phase", "pretrain"}, {"epoch", epoch}, {"ce", ce}, {"source_dev", metrics_json(source_dev)}};
}

PretrainResult pretrain(QaModel model, const Vocab& vocab, const std::vector<QaExample>& source,
                        const AdaptConfig& config, const std::vector<QaExample>* source_dev,
                        const std::function<void(const PretrainReport&)>& on_epoch) {
  config.validate();
  if (source.empty()) throw std::invalid_argument("pretrain: empty source dataset");
  for (const auto& ex : source) {
    if (!ex.answer) throw std::invalid_argument("pretrain: source example " + ex.id + " is unlabeled");
  }
  Rng order_rng = Rng(config.seed).split(1);
  const std::size_t steps_per_epoch = (source.size() + config.n_source - 1) / config.n_source;
  const LinearSchedule schedule(steps_per_epoch * config.epochs_pretrain, config.warmup, config.lr_pretrain);
  AdamW opt = make_optimizer(model, config);

  PretrainResult result{model.clone(), model.clone(), {}};
  double best_f1 = -1.0;
  std::size_t step = 0;
  std::vector<std::size_t> order(source.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng drop_rng = Rng(config.seed).split(2);
  ForwardOptions fo;
  fo.training = true;
  fo.dropout_rng = &drop_rng;
  for (std::size_t epoch = 0; epoch < config.epochs_pretrain; ++epoch) {
    order_rng.shuffle(order);
    RunningMean ce;
    for (std::size_t begin = 0; begin < order.size(); begin += config.n_source) {
      std::vector<const QaExample*> batch_ex;
      for (std::size_t i = begin; i < std::min(order.size(), begin + config.n_source); ++i) {
        batch_ex.push_back(&source[order[i]]);
      }
      const EncodedBatch batch = encode_batch(batch_ex, vocab, model.config().max_len);
      if (std::none_of(batch.targets.begin(), batch.targets.end(), [](const auto& t) { return t.has_value(); })) {
        ++step;
        continue;
      }
      const QaOutput out = model.qa_forward(batch, fo);
      Tensor loss = span_cross_entropy(out, batch);
      ce.add(loss.item());
      opt.zero_grad();
      loss.backward();
      opt.step(schedule.lr(step++));
    }
    PretrainReport report;
    report.epoch = epoch;
    report.ce = ce.get().value_or(0.0);
    if (source_dev && !source_dev->empty()) {
      report.source_dev = evaluate(model, vocab, *source_dev, config.eval_batch);
      if (report.source_dev->f1 > best_f1) {
        best_f1 = report.source_dev->f1;
        result.best_model = model.clone();
      }
    }
    result.reports.push_back(report);
    if (on_epoch) on_epoch(report);
  }
  if (best_f1 < 0.0) result.best_model = model.clone();
  result.final_model = std::move(model);
  return result;
}

nlohmann::json EpochReport::to_json() const {
  return {{"phase", "adapt"},
          {"epoch", epoch},
          {"pool_size", pool_size},
          {"acceptance_rate", acceptance_rate},
          {"mean_confidence", mean_confidence},
          {"steps", steps},
          {"qada_steps", qada_steps},
          {"ce", ce},
          {"answer_discrepancy", opt_json(answer_discrepancy)},
          {"non_answer_discrepancy", opt_json(non_answer_discrepancy)},
          {"extraction", opt_json(extraction)},
          {"qada", opt_json(qada)},
          {"source_dev", metrics_json(source_dev)},
          {"target_dev", metrics_json(target_dev)}};
}

AdaptResult adapt(QaModel model, const Vocab& vocab, const Neighborhood& neighborhood,
                  const std::vector<QaExample>& source, const std::vector<QaExample>& unlabeled_target,
                  const AdaptConfig& config, const DevSets& dev, const std::function<void(const EpochReport&)>& on_epoch,
                  FeatureDump* dump) {
  config.validate();
  if (source.empty()) throw std::invalid_argument("adapt: empty source dataset");
  const Rng root(config.seed);
  Rng order_rng = root.split(11);
  Rng aug_rng = root.split(12);
  Rng cut_rng = root.split(13);
  Rng feat_rng = root.split(14);
  Rng drop_rng = root.split(15);

  const std::size_t steps_per_epoch = (source.size() + config.n_source - 1) / config.n_source;
  const LinearSchedule schedule(steps_per_epoch, config.warmup, config.lr_adapt);
  AdamW opt = make_optimizer(model, config);
  const bool augment_questions = config.augment.zeta > 0.0;
  const bool cutoff = cutoff_width(config.augment.phi_cut, 1000000) > 0;

  AdaptResult result{model.clone(), {}, true};
  std::size_t global_step = 0;
  std::vector<std::size_t> src_order(source.size());
  std::iota(src_order.begin(), src_order.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < config.epochs_adapt; ++epoch) {
    const PseudoLabelResult labelled = pseudo_label(model, vocab, unlabeled_target, config.tau, config.eval_batch);
    const auto& pool = labelled.pool;
    if (!pool.empty()) result.pool_always_empty = false;

    std::vector<std::size_t> tgt_order(pool.size());
    std::iota(tgt_order.begin(), tgt_order.end(), std::size_t{0});
    order_rng.shuffle(src_order);
    order_rng.shuffle(tgt_order);
    std::size_t tgt_next = 0;

    EpochReport report;
    report.epoch = epoch;
    report.pool_size = pool.size();
    report.acceptance_rate =
        unlabeled_target.empty() ? 0.0 : static_cast<double>(pool.size()) / static_cast<double>(unlabeled_target.size());
    report.mean_confidence = labelled.mean_confidence;
    RunningMean ce_m, ans_m, non_m, ext_m, qada_m;

    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      std::vector<const QaExample*> batch_ex;
      const std::size_t begin = s * config.n_source;
      for (std::size_t i = begin; i < std::min(source.size(), begin + config.n_source); ++i) {
        batch_ex.push_back(&source[src_order[i]]);
      }
      if (!pool.empty()) {
        for (std::size_t k = 0; k < config.n_target; ++k) {
          const std::size_t idx = tgt_next < tgt_order.size() ? tgt_order[tgt_next++] : order_rng.uniform_index(pool.size());
          batch_ex.push_back(&pool[idx]);
        }
      }
      const EncodedBatch batch = encode_batch(batch_ex, vocab, model.config().max_len);
      std::vector<bool> include(batch.batch);
      for (std::size_t b = 0; b < batch.batch; ++b) {
        include[b] = config.augment_domains == AugmentDomains::both || batch.domains[b] == Domain::target;
      }

      std::vector<OverrideMap> overrides;
      ForwardOptions fo;
      fo.training = true;
      fo.dropout_rng = &drop_rng;
      if (augment_questions) {
        overrides = augment_batch_questions(batch, model, neighborhood, config.augment, include, aug_rng);
        fo.overrides = &overrides;
      }
      if (cutoff) {
        const std::size_t heads = model.config().heads;
        fo.planner = [&](std::size_t layer, std::size_t b, const AttentionRecord& rec) -> std::optional<TokenRange> {
          if (!include[b]) return std::nullopt;
          return plan_layer_cutoff(rec.example(layer, b), heads, batch.seq_len, batch.layout[b].context,
                                   config.augment.phi_cut, cut_rng);
        };
      }

      if (std::none_of(batch.targets.begin(), batch.targets.end(), [](const auto& t) { return t.has_value(); })) {
        ++global_step;
        continue;
      }
      const QaOutput out = model.qa_forward(batch, fo);
      Tensor ce = span_cross_entropy(out, batch);
      ce_m.add(ce.item());
      Tensor loss = ce;
      if (config.lambda > 0.0 && !pool.empty()) {
        const ClassFeatures features = collect_class_features(out, batch, feat_rng);
        if (dump) dump->write(global_step, features);
        const QadaLoss q = qada_loss(features, config.kernel);
        if (!q.all_dropped) {
          loss = total_loss(ce, q.loss, config.lambda);
          ++report.qada_steps;
          qada_m.add(q.loss.item());
          if (q.answer_discrepancy) ans_m.add(*q.answer_discrepancy);
          if (q.non_answer_discrepancy) non_m.add(*q.non_answer_discrepancy);
          if (q.extraction) ext_m.add(*q.extraction);
        }
      }
      opt.zero_grad();
      loss.backward();
      opt.step(schedule.lr(s));
      ++global_step;
      ++report.steps;
    }

    report.ce = ce_m.get().value_or(0.0);
    report.answer_discrepancy = ans_m.get();
    report.non_answer_discrepancy = non_m.get();
    report.extraction = ext_m.get();
    report.qada = qada_m.get();
    if (dev.source && !dev.source->empty()) report.source_dev = evaluate(model, vocab, *dev.source, config.eval_batch);
    if (dev.target && !dev.target->empty()) report.target_dev = evaluate(model, vocab, *dev.target, config.eval_batch);
    result.reports.push_back(report);
    if (on_epoch) on_epoch(report);
  }
  if (config.epochs_adapt == 0) result.pool_always_empty = false;
  result.model = std::move(model);
  return result;
}

}  // namespace qada
