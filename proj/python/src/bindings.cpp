#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "qada/checkpoint.hpp"
#include "qada/contrastive.hpp"
#include "qada/domain_generator.hpp"
#include "qada/errors.hpp"
#include "qada/metrics.hpp"
#include "qada/pipeline.hpp"
#include "qada/run_config.hpp"

namespace py = pybind11;
using namespace qada;

namespace {

using Rows = std::vector<std::vector<double>>;

Tensor to_tensor(const Rows& rows) {
  if (rows.empty()) throw std::invalid_argument("empty feature set");
  std::vector<double> v;
  for (const auto& r : rows) {
    if (r.size() != rows.front().size()) throw std::invalid_argument("ragged feature set");
    v.insert(v.end(), r.begin(), r.end());
  }
  return Tensor::from({rows.size(), rows.front().size()}, std::move(v));
}

py::dict example_dict(const QaExample& e) {
  py::dict d;
  d["id"] = e.id;
  d["context"] = e.context;
  d["question"] = e.question;
  d["domain"] = to_string(e.domain);
  py::list answers;
  for (const auto& g : e.gold) answers.append(py::make_tuple(g.text, g.char_start));
  d["answers"] = answers;
  return d;
}

py::list example_list(const std::vector<QaExample>& v) {
  py::list out;
  for (const auto& e : v) out.append(example_dict(e));
  return out;
}

py::dict metrics_dict(const Metrics& m) {
  py::dict d;
  d["em"] = m.em;
  d["f1"] = m.f1;
  d["count"] = m.count;
  return d;
}

py::dict generate(const RunConfig& cfg) {
  Rng rng(cfg.adapt.seed);
  const DomainPair pair = generate_domain_pair(cfg.gen, rng);
  py::dict d;
  d["source"] = example_list(pair.source);
  d["target"] = example_list(pair.target);
  d["lexicon"] = pair.lexicon;
  return d;
}

// Generate, pretrain and adapt with the given config; metrics on the
// source dev split and the labelled target set.
py::dict run(const RunConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.adapt.seed);
  const DomainPair pair = generate_domain_pair(cfg.gen, rng);
  Rng split_rng = rng.split(100);
  const DevSplit src = split_dev(pair.source, cfg.dev_fraction, split_rng);
  const Vocab vocab = build_vocab({&src.train, &pair.target}, pair.lexicon, cfg.vocab_min_count);
  ModelConfig mc = cfg.model;
  mc.vocab_size = vocab.size();
  const auto hood =
      build_neighborhood(vocab, pair.lexicon, 2, cfg.adapt.augment.alpha_original, cfg.adapt.augment.decay);

  py::gil_scoped_release release;
  PretrainResult pre = pretrain(QaModel(mc, cfg.adapt.seed), vocab, src.train, cfg.adapt, &src.dev);
  const Metrics source_dev = evaluate(pre.best_model, vocab, src.dev);
  const Metrics zero_shot = evaluate(pre.best_model, vocab, pair.target);
  AdaptResult adapted =
      adapt(pre.best_model.clone(), vocab, hood.neighborhood, src.train, pair.target_unlabeled, cfg.adapt);
  const Metrics target = evaluate(adapted.model, vocab, pair.target);
  std::vector<std::size_t> pools;
  for (const auto& r : adapted.reports) pools.push_back(r.pool_size);

  py::gil_scoped_acquire acquire;
  py::dict d;
  d["source_dev"] = metrics_dict(source_dev);
  d["zero_shot"] = metrics_dict(zero_shot);
  d["adapted"] = metrics_dict(target);
  d["pool_sizes"] = pools;
  return d;
}

py::dict evaluate_checkpoint(const std::filesystem::path& checkpoint, const std::filesystem::path& data) {
  Checkpoint ck = load_checkpoint(checkpoint);
  return metrics_dict(evaluate(ck.model, ck.vocab, load_dataset(data).examples));
}

}  // namespace

PYBIND11_MODULE(_qada, m) {
  m.doc() = "QADA question-answering domain adaptation";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);

  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def_static("keys", &RunConfig::keys)
      .def("set", &RunConfig::set, py::arg("key"), py::arg("value"))
      .def("get", &RunConfig::get, py::arg("key"))
      .def("apply_text", &RunConfig::apply_text)
      .def("apply_file", &RunConfig::apply_file)
      .def("apply_env", &RunConfig::apply_env)
      .def("validate", &RunConfig::validate)
      .def("dump", &RunConfig::dump)
      .def("__repr__", [](const RunConfig& c) { return "RunConfig(seed=" + c.get("seed") + ")"; });

  m.def("normalize_answer", &normalize_answer);
  m.def("exact_match", &exact_match_score, py::arg("prediction"), py::arg("golds"));
  m.def("f1", &f1_score, py::arg("prediction"), py::arg("golds"));

  m.def(
      "mmd", [](const Rows& a, const Rows& b, double sigma) { return mmd(to_tensor(a), to_tensor(b), sigma).item(); },
      py::arg("a"), py::arg("b"), py::arg("sigma"), "Biased Gaussian-kernel squared MMD.");
  m.def(
      "dirichlet", [](const std::vector<double>& alphas, std::uint64_t seed) {
        Rng rng(seed);
        return dirichlet_sample(alphas, rng);
      },
      py::arg("alphas"), py::arg("seed") = 0);
  m.def(
      "decode_span",
      [](const std::vector<double>& start, const std::vector<double>& end, std::size_t max_len) {
        const SpanPrediction p = decode_span(start, end, max_len);
        return py::make_tuple(p.start, p.end, p.confidence);
      },
      py::arg("start_logits"), py::arg("end_logits"), py::arg("max_answer_len"));

  m.def("generate", &generate, py::arg("config"), "Synthetic source/target example dicts and the lexicon.");
  m.def("run", &run, py::arg("config"), "Generate, pretrain and adapt; returns EM/F1 dictionaries.");
  m.def("evaluate_checkpoint", &evaluate_checkpoint, py::arg("checkpoint"), py::arg("data"));
}
