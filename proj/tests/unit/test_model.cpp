#include <doctest.h>

#include <cmath>
#include <limits>

#include "qada/errors.hpp"
#include "qada/gradcheck.hpp"
#include "qada/model.hpp"

using namespace qada;

namespace {

struct Fixture {
  Vocab vocab;
  std::vector<QaExample> examples;

  Fixture() {
    auto add = [&](const std::string& ctx, const std::string& q, const std::string& ans) {
      const auto pos = ctx.find(ans);
      examples.push_back(*make_example("e" + std::to_string(examples.size()), ctx, q, {GoldAnswer{ans, pos}},
                                       Domain::source));
    };
    add("the city of kato is berin . the pet of kato is molo .", "what is the pet of kato ?", "molo");
    add("zuli works as a baker in tamo .", "where does zuli work ?", "tamo");
    add("the food of rin is soup .", "which food does rin have ?", "soup");
    for (const auto& ex : examples) {
      for (const auto& t : ex.question_tokens) vocab.add(t);
      for (const auto& t : ex.context_tokens) vocab.add(t);
    }
  }

  ModelConfig config(std::size_t layers = 2) const {
    ModelConfig c;
    c.vocab_size = vocab.size();
    c.dim = 8;
    c.heads = 2;
    c.ff_dim = 12;
    c.layers = layers;
    c.max_len = 40;
    return c;
  }

  EncodedBatch batch(std::vector<std::size_t> which) const {
    std::vector<const QaExample*> ptrs;
    for (std::size_t i : which) ptrs.push_back(&examples[i]);
    return encode_batch(ptrs, vocab, 40);
  }
};

std::span<const double> param(const QaModel& m, const std::string& name) {
  for (const auto& p : m.parameters()) {
    if (p.name == name) return p.tensor.data();
  }
  throw std::invalid_argument(name);
}

std::vector<double> row_of(const Tensor& t, std::size_t row, std::size_t width) {
  const auto d = t.data();
  return {d.begin() + static_cast<std::ptrdiff_t>(row * width), d.begin() + static_cast<std::ptrdiff_t>((row + 1) * width)};
}

bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(a[i] == b[i]) && !(std::isinf(a[i]) && a[i] == b[i])) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("model config validation names the field") {
  ModelConfig c;
  c.vocab_size = 10;
  c.dim = 10;
  c.heads = 4;
  try {
    c.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "heads");
  }
  c.heads = 5;
  CHECK_NOTHROW(c.validate());
  c.dropout = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("encode_batch layout and class masks") {
  Fixture f;
  const auto b = f.batch({0, 2});
  REQUIRE(b.batch == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto& lay = b.layout[i];
    CHECK(b.ids[b.flat(i, lay.cls)] == Vocab::kCls);
    CHECK(b.ids[b.flat(i, lay.sep_question)] == Vocab::kSep);
    CHECK(b.ids[b.flat(i, lay.sep_context)] == Vocab::kSep);
    CHECK(lay.question.end <= lay.context.begin);
    for (std::size_t p = 0; p < b.seq_len; ++p) {
      const bool real = p < lay.length;
      CHECK(b.attention_mask[b.flat(i, p)] == (real ? 1 : 0));
      const bool a = b.answer_mask[b.flat(i, p)] != 0, n = b.non_answer_mask[b.flat(i, p)] != 0;
      CHECK_FALSE((a && n));
      if (a) CHECK(lay.context.contains(p));
      const bool content = lay.question.contains(p) || lay.context.contains(p);
      CHECK((a || n) == content);
    }
  }
  REQUIRE(b.targets[0]);
  CHECK(b.ids[b.flat(0, b.targets[0]->first)] == f.vocab.id("molo"));
}

TEST_CASE("embed is a plain lookup and honours overrides") {
  Fixture f;
  const QaModel m(f.config(), 3);
  const auto b = f.batch({0});
  const std::size_t d = m.config().dim;
  const auto tok = param(m, "tok_emb"), pos = param(m, "pos_emb");
  const Tensor plain = m.embed(b);
  for (std::size_t p = 0; p < b.seq_len; ++p) {
    const auto id = static_cast<std::size_t>(b.ids[p]);
    for (std::size_t c = 0; c < d; ++c) CHECK(plain.at(p * d + c) == tok[id * d + c] + pos[p * d + c]);
  }

  const std::size_t qpos = b.layout[0].question.begin + 1;
  const auto own = m.embedding_row(b.ids[qpos]);
  std::vector<OverrideMap> same{{{qpos, std::vector<double>(own.begin(), own.end())}}};
  CHECK(bitwise_equal(m.embed(b, &same).data(), plain.data()));

  const auto ea = m.embedding_row(f.vocab.id("city")), eb = m.embedding_row(f.vocab.id("pet"));
  std::vector<double> mix(d);
  for (std::size_t c = 0; c < d; ++c) mix[c] = 0.5 * ea[c] + 0.5 * eb[c];
  std::vector<OverrideMap> mixed{{{qpos, mix}}};
  const Tensor out = m.embed(b, &mixed);
  for (std::size_t c = 0; c < d; ++c) {
    CHECK(out.at(qpos * d + c) == doctest::Approx((ea[c] + eb[c]) / 2.0 + pos[qpos * d + c]).epsilon(1e-15));
  }

  std::vector<OverrideMap> outside{{{b.layout[0].context.begin, mix}}};
  CHECK_THROWS_AS(m.embed(b, &outside), ContractViolation);
}

TEST_CASE("embed override mixture on hand-written d=4 embeddings") {
  Vocab v;
  v.add("a");
  v.add("b");
  ModelConfig c;
  c.vocab_size = v.size();
  c.dim = 4;
  c.heads = 1;
  c.ff_dim = 4;
  c.max_len = 8;
  QaModel m(c, 1);
  for (auto& p : m.parameters()) {
    auto w = p.tensor.mutable_data();
    if (p.name == "tok_emb") {
      std::fill(w.begin(), w.end(), 0.0);
      const double a[4] = {1, 2, 3, 4}, bb[4] = {3, 0, -1, 8};
      for (int k = 0; k < 4; ++k) {
        w[4 * static_cast<std::size_t>(v.id("a")) + k] = a[k];
        w[4 * static_cast<std::size_t>(v.id("b")) + k] = bb[k];
      }
    }
    if (p.name == "pos_emb") {
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.5 * static_cast<double>(i % 4);
    }
  }
  QaExample ex = *make_example("x", "a b", "a", {}, Domain::source);
  const auto batch = encode_batch({&ex}, v, 8);
  // 0.5 * a + 0.5 * b
  std::vector<OverrideMap> o{{{1, {2.0, 1.0, 1.0, 6.0}}}};
  const Tensor out = m.embed(batch, &o);
  CHECK(out.at(4 + 0) == 2.0);
  CHECK(out.at(4 + 1) == 1.5);
  CHECK(out.at(4 + 2) == 2.0);
  CHECK(out.at(4 + 3) == 7.5);
}

TEST_CASE("forward without a plan matches the vanilla pass") {
  Fixture f;
  QaModel m(f.config(), 5);
  const auto b = f.batch({0, 1, 2});
  const QaOutput vanilla = m.qa_forward(b, {});
  ForwardOptions opt;
  opt.planner = [](std::size_t, std::size_t, const AttentionRecord&) { return std::optional<TokenRange>{}; };
  const QaOutput planned = m.qa_forward(b, opt);
  CHECK(bitwise_equal(vanilla.start_logits.data(), planned.start_logits.data()));
  CHECK(bitwise_equal(vanilla.hidden.data(), planned.hidden.data()));
}

TEST_CASE("logits are finite exactly on context positions") {
  Fixture f;
  QaModel m(f.config(), 6);
  const auto b = f.batch({0, 1, 2});
  const QaOutput out = m.qa_forward(b, {});
  for (std::size_t i = 0; i < b.batch; ++i) {
    for (std::size_t p = 0; p < b.seq_len; ++p) {
      const bool ctx = b.layout[i].context.contains(p);
      CHECK(std::isfinite(out.start_logits.at(b.flat(i, p))) == ctx);
      CHECK(std::isfinite(out.end_logits.at(b.flat(i, p))) == ctx);
    }
  }
}

TEST_CASE("attention rows are distributions over real keys") {
  Fixture f;
  QaModel m(f.config(3), 7);
  const auto b = f.batch({0, 2});
  const QaOutput out = m.qa_forward(b, {});
  REQUIRE(out.attention.layers() == 3);
  for (std::size_t l = 0; l < 3; ++l) {
    for (std::size_t i = 0; i < b.batch; ++i) {
      for (std::size_t h = 0; h < 2; ++h) {
        for (std::size_t q = 0; q < b.seq_len; ++q) {
          double s = 0.0;
          for (std::size_t k = 0; k < b.seq_len; ++k) {
            const double w = out.attention.at(l, i, h, q, k);
            CHECK(w >= 0.0);
            if (k >= b.layout[i].length) CHECK(w == 0.0);
            s += w;
          }
          CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
        }
      }
    }
  }
}

TEST_CASE("cutoff zeroes the planned rows exactly") {
  Fixture f;
  QaModel m(f.config(2), 8);
  const auto b = f.batch({0});
  const TokenRange ctx = b.layout[0].context;
  const TokenRange span{ctx.begin + 2, ctx.begin + 6};
  CutoffPlan plan{{span}, {std::nullopt}};
  ForwardOptions opt;
  opt.plan = &plan;
  const QaOutput cut = m.qa_forward(b, opt);
  const QaOutput vanilla = m.qa_forward(b, {});
  REQUIRE(cut.applied[0][0]);
  CHECK(*cut.applied[0][0] == span);
  CHECK_FALSE(cut.applied[1][0]);

  // Layer-0 attention is captured before the cutoff.
  CHECK(bitwise_equal(cut.attention.example(0, 0), vanilla.attention.example(0, 0)));
  // Zeroed rows give identical keys in the next layer, so every query splits
  // its weight evenly across them.
  for (std::size_t h = 0; h < 2; ++h) {
    for (std::size_t q = 0; q < b.layout[0].length; ++q) {
      const double w0 = cut.attention.at(1, 0, h, q, span.begin);
      for (std::size_t k = span.begin; k < span.end; ++k) CHECK(cut.attention.at(1, 0, h, q, k) == doctest::Approx(w0).epsilon(1e-12));
    }
  }
  CHECK_FALSE(bitwise_equal(cut.start_logits.data(), vanilla.start_logits.data()));
}

TEST_CASE("cutoff of an all-pad region leaves real positions unchanged") {
  Fixture f;
  QaModel m(f.config(3), 9);
  const auto b = f.batch({0, 2});
  const std::size_t short_len = b.layout[1].length;
  REQUIRE(short_len + 2 <= b.seq_len);
  CutoffPlan plan{{std::nullopt, TokenRange{short_len, b.seq_len}}, {std::nullopt, TokenRange{short_len, short_len + 2}}};
  ForwardOptions opt;
  opt.plan = &plan;
  const QaOutput cut = m.qa_forward(b, opt);
  const QaOutput vanilla = m.qa_forward(b, {});
  CHECK(bitwise_equal(cut.start_logits.data(), vanilla.start_logits.data()));
  CHECK(bitwise_equal(cut.end_logits.data(), vanilla.end_logits.data()));
}

TEST_CASE("cutoff contract violations") {
  Fixture f;
  QaModel m(f.config(2), 10);
  const auto b = f.batch({0});
  const TokenRange ctx = b.layout[0].context;
  CutoffPlan final_layer{{std::nullopt}, {TokenRange{ctx.begin, ctx.begin + 1}}};
  ForwardOptions opt;
  opt.plan = &final_layer;
  CHECK_THROWS_AS(m.qa_forward(b, opt), ContractViolation);

  CutoffPlan in_question{{TokenRange{b.layout[0].question.begin, b.layout[0].question.begin + 1}}};
  opt.plan = &in_question;
  CHECK_THROWS_AS(m.qa_forward(b, opt), ContractViolation);
}

TEST_CASE("evaluation mode is independent of batch composition") {
  Fixture f;
  QaModel m(f.config(), 11);
  const auto dup = f.batch({1, 1});
  const QaOutput out = m.qa_forward(dup, {});
  const std::size_t S = dup.seq_len;
  CHECK(bitwise_equal(out.start_logits.data().subspan(0, S), out.start_logits.data().subspan(S, S)));

  const auto ab = f.batch({0, 2});
  const auto ba = f.batch({2, 0});
  REQUIRE(ab.seq_len == ba.seq_len);
  const QaOutput o1 = m.qa_forward(ab, {});
  const QaOutput o2 = m.qa_forward(ba, {});
  const std::size_t T = ab.seq_len;
  CHECK(bitwise_equal(o1.start_logits.data().subspan(0, T), o2.start_logits.data().subspan(T, T)));
  CHECK(bitwise_equal(o1.end_logits.data().subspan(T, T), o2.end_logits.data().subspan(0, T)));
}

TEST_CASE("span cross-entropy gradient matches finite differences") {
  Fixture f;
  QaModel m(f.config(2), 12);
  const auto b = f.batch({0, 1, 2});
  const TokenRange ctx = b.layout[0].context;
  CutoffPlan plan{{TokenRange{ctx.begin + 1, ctx.begin + 3}, std::nullopt, std::nullopt}, {std::nullopt, std::nullopt, std::nullopt}};
  auto loss = [&]() {
    ForwardOptions opt;
    opt.training = true;
    opt.update_running_stats = false;
    opt.plan = &plan;
    return span_cross_entropy(m.qa_forward(b, opt), b);
  };
  const auto r = finite_diff_check(loss, m.parameter_tensors(), 1e-6);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("dropout needs an rng in training and is inert in evaluation") {
  Fixture f;
  ModelConfig c = f.config();
  c.dropout = 0.3;
  QaModel m(c, 13);
  QaModel plain(f.config(), 13);
  const auto b = f.batch({0});
  ForwardOptions train;
  train.training = true;
  train.update_running_stats = false;
  CHECK_THROWS_AS(m.qa_forward(b, train), ContractViolation);
  CHECK(bitwise_equal(m.qa_forward(b, {}).start_logits.data(), plain.qa_forward(b, {}).start_logits.data()));
  Rng r1(1), r2(1);
  train.dropout_rng = &r1;
  const auto a = m.qa_forward(b, train);
  train.dropout_rng = &r2;
  const auto again = m.qa_forward(b, train);
  CHECK(bitwise_equal(a.start_logits.data(), again.start_logits.data()));
}

TEST_CASE("clone is deep and same_state compares bitwise") {
  Fixture f;
  QaModel m(f.config(), 14);
  QaModel c = m.clone();
  CHECK(m.same_state(c));
  c.parameters()[0].tensor.mutable_data()[0] += 1e-12;
  CHECK_FALSE(m.same_state(c));
  CHECK(m.same_state(m.clone()));
}

TEST_CASE("decode_span examples") {
  const double ninf = -std::numeric_limits<double>::infinity();
  std::vector<double> s(10, -50.0), e(10, -50.0);
  s[3] = 50.0;
  e[5] = 50.0;
  auto p = decode_span(s, e, 12);
  CHECK(p.start == 3);
  CHECK(p.end == 5);
  CHECK(p.confidence == doctest::Approx(1.0).epsilon(1e-12));

  std::vector<double> flat(10, 0.0);
  p = decode_span(flat, flat, 10);
  CHECK(p.start == 0);
  CHECK(p.end == 0);
  CHECK(p.confidence == doctest::Approx(0.1).epsilon(1e-12));

  // End before start is never chosen; the best valid pair wins.
  std::vector<double> s2 = {ninf, 0.0, 5.0, 0.0, ninf}, e2 = {ninf, 5.0, 0.0, 1.0, ninf};
  p = decode_span(s2, e2, 4);
  CHECK(p.start == 2);
  CHECK(p.end == 3);

  // (1, 1), (2, 2) and (2, 3) tie: lowest start wins.
  e2[3] = 0.0;
  p = decode_span(s2, e2, 4);
  CHECK(p.start == 1);
  CHECK(p.end == 1);

  std::vector<double> none(4, ninf);
  CHECK_THROWS_AS(decode_span(none, none, 3), DecodeError);
  CHECK_THROWS_AS(decode_span(flat, flat, 0), DecodeError);
}

TEST_CASE("decode_span agrees with exhaustive enumeration") {
  Rng rng(99);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 12, lo = 2, hi = 10;
    const std::size_t max_len = 1 + rng.uniform_index(5);
    std::vector<double> s(n, -std::numeric_limits<double>::infinity()), e = s;
    for (std::size_t i = lo; i < hi; ++i) {
      s[i] = 3.0 * rng.normal();
      e[i] = 3.0 * rng.normal();
    }
    auto softmax = [&](const std::vector<double>& x) {
      double mx = -1e300, z = 0.0;
      for (std::size_t i = lo; i < hi; ++i) mx = std::max(mx, x[i]);
      std::vector<double> out(n, 0.0);
      for (std::size_t i = lo; i < hi; ++i) z += out[i] = std::exp(x[i] - mx);
      for (double& v : out) v /= z;
      return out;
    };
    const auto ps = softmax(s), pe = softmax(e);
    double best = -1.0;
    std::size_t bs = 0, be = 0;
    for (std::size_t a = lo; a < hi; ++a) {
      for (std::size_t b = a; b < hi && b - a < max_len; ++b) {
        if (ps[a] * pe[b] > best) {
          best = ps[a] * pe[b];
          bs = a;
          be = b;
        }
      }
    }
    const auto p = decode_span(s, e, max_len);
    CHECK(p.start == bs);
    CHECK(p.end == be);
    CHECK(p.confidence == doctest::Approx(std::sqrt(best)).epsilon(1e-12));
  }
}
