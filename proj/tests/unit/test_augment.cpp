#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <map>

#include "qada/augment.hpp"
#include "qada/errors.hpp"

using namespace qada;

namespace {

// Vocab a, b, c, plain with lexicon a->b, b->c: a sees b at hop 1, c at hop 2.
struct Hull {
  Vocab vocab;
  Neighborhood hood;
  std::map<TokenId, std::vector<double>> emb;
  EmbeddingLookup lookup;

  Hull() {
    for (const char* w : {"a", "b", "c", "plain"}) vocab.add(w);
    hood = build_neighborhood(vocab, {{"a", "b"}, {"b", "c"}}, 2, 1.0, 0.1).neighborhood;
    emb[vocab.id("a")] = {1.0, 0.0, 0.0};
    emb[vocab.id("b")] = {0.2, 1.0, 0.0};
    emb[vocab.id("c")] = {-0.5, 0.3, 2.0};
    emb[vocab.id("plain")] = {0.0, 0.0, 0.0};
    lookup = [this](TokenId id) { return std::span<const double>(emb.at(id)); };
  }
  TokenId id(const char* w) const { return vocab.id(w); }
};

std::vector<double> uniform_weights(std::size_t heads, std::size_t L, std::size_t real) {
  std::vector<double> w(heads * L * L, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t q = 0; q < L; ++q) {
      for (std::size_t k = 0; k < real; ++k) w[(h * L + q) * L + k] = 1.0 / static_cast<double>(real);
    }
  }
  return w;
}

}  // namespace

TEST_CASE("augment_question trivial cases") {
  Hull h;
  AugmentConfig cfg;
  cfg.zeta = 1.0;
  Rng rng(1);
  const std::vector<TokenId> only_plain{h.id("plain"), h.id("plain")};
  CHECK(augment_question(only_plain, 1, h.hood, cfg, h.lookup, rng).empty());

  cfg.zeta = 0.0;
  const std::vector<TokenId> q{h.id("a"), h.id("b")};
  CHECK(augment_question(q, 1, h.hood, cfg, h.lookup, rng).empty());

  cfg.zeta = 1.0;
  const auto all = augment_question(q, 5, h.hood, cfg, h.lookup, rng);
  REQUIRE(all.size() == 2);
  CHECK(all.count(5) == 1);
  CHECK(all.count(6) == 1);
  // c has no outgoing synonym, so it is never eligible.
  const std::vector<TokenId> c_only{h.id("c")};
  CHECK(augment_question(c_only, 1, h.hood, cfg, h.lookup, rng).empty());
}

TEST_CASE("augment_question mean row follows the Dirichlet mean") {
  Hull h;
  AugmentConfig cfg;
  cfg.zeta = 1.0;
  Rng rng(2024);
  const std::vector<TokenId> q{h.id("a")};
  std::vector<double> mean(3, 0.0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const auto o = augment_question(q, 1, h.hood, cfg, h.lookup, rng);
    for (std::size_t c = 0; c < 3; ++c) mean[c] += o.at(1)[c] / draws;
  }
  const double ta = 1.0 / 1.11, tb = 0.1 / 1.11, tc = 0.01 / 1.11;
  CHECK(ta == doctest::Approx(0.9009).epsilon(1e-4));
  CHECK(tb == doctest::Approx(0.0901).epsilon(1e-3));
  CHECK(tc == doctest::Approx(0.0090).epsilon(1e-2));
  const auto& ea = h.emb[h.id("a")];
  const auto& eb = h.emb[h.id("b")];
  const auto& ec = h.emb[h.id("c")];
  for (std::size_t c = 0; c < 3; ++c) {
    const double expected = ta * ea[c] + tb * eb[c] + tc * ec[c];
    const double norm = std::sqrt(ea[0] * ea[0] + ea[1] * ea[1] + ea[2] * ea[2]);
    CHECK(std::abs(mean[c] - expected) <= 0.02 * norm);
  }
}

TEST_CASE("augment_question rows are exact convex combinations") {
  Hull h;
  AugmentConfig cfg;
  cfg.zeta = 1.0;
  const std::vector<TokenId> q{h.id("a")};
  Eigen::Matrix3d E;
  for (int j = 0; j < 3; ++j) {
    const auto& e = h.emb[h.id(j == 0 ? "a" : j == 1 ? "b" : "c")];
    for (int c = 0; c < 3; ++c) E(c, j) = e[static_cast<std::size_t>(c)];
  }
  Rng rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    Rng replay = rng;
    (void)replay.uniform_index(1);
    const std::vector<double> alphas{1.0, 0.1, 0.01};
    const auto eta = dirichlet_sample(alphas, replay);

    const auto o = augment_question(q, 1, h.hood, cfg, h.lookup, rng);
    Eigen::Vector3d row(o.at(1)[0], o.at(1)[1], o.at(1)[2]);
    const Eigen::Vector3d solved = E.colPivHouseholderQr().solve(row);
    CHECK(solved.sum() == doctest::Approx(1.0).epsilon(1e-9));
    for (int j = 0; j < 3; ++j) {
      CHECK(solved(j) >= -1e-9);
      CHECK(std::abs(solved(j) - eta[static_cast<std::size_t>(j)]) < 1e-9);
    }
  }
}

TEST_CASE("augment_question selects ceil(zeta * Q) positions uniformly") {
  Hull h;
  AugmentConfig cfg;
  cfg.zeta = 0.3;
  std::vector<TokenId> q;
  for (int i = 0; i < 10; ++i) q.push_back(i % 2 ? h.id("a") : h.id("b"));
  q.push_back(h.id("plain"));
  Rng rng(5);
  std::vector<int> hits(q.size(), 0);
  const int draws = 20000;
  for (int i = 0; i < draws; ++i) {
    const auto o = augment_question(q, 0, h.hood, cfg, h.lookup, rng);
    CHECK(o.size() == 3);
    for (const auto& [pos, row] : o) ++hits[pos];
  }
  for (std::size_t p = 0; p < 10; ++p) CHECK(std::abs(hits[p] / static_cast<double>(draws) - 0.3) < 0.02);
  CHECK(hits[10] == 0);

  // Q = 3, zeta = 0.5 -> ceil(1.5) = 2 positions.
  cfg.zeta = 0.5;
  const std::vector<TokenId> three{h.id("a"), h.id("plain"), h.id("a"), h.id("b")};
  CHECK(augment_question(three, 0, h.hood, cfg, h.lookup, rng).size() == 2);
}

TEST_CASE("cutoff window arithmetic") {
  CHECK(cutoff_width(0.3, 10) == 3);
  CHECK(cutoff_width(0.0, 10) == 0);
  CHECK(cutoff_width(0.2, 12) == 2);
  const TokenRange ctx{0, 10};
  CHECK(centred_window(9, 3, ctx) == TokenRange{7, 10});
  CHECK(centred_window(0, 3, ctx) == TokenRange{0, 3});
  CHECK(centred_window(5, 3, ctx) == TokenRange{4, 7});
}

TEST_CASE("centred_window over every midpoint and width") {
  for (std::size_t begin : {0u, 4u}) {
    for (std::size_t n = 1; n <= 12; ++n) {
      const TokenRange ctx{begin, begin + n};
      for (std::size_t w = 1; w <= n; ++w) {
        for (std::size_t m = ctx.begin; m < ctx.end; ++m) {
          const TokenRange s = centred_window(m, w, ctx);
          CHECK(s.size() == w);
          CHECK(s.begin >= ctx.begin);
          CHECK(s.end <= ctx.end);
          // Oracle: the centred window, shifted the least amount to fit.
          const long want = static_cast<long>(m) - static_cast<long>(w / 2);
          const long lo = static_cast<long>(ctx.begin), hi = static_cast<long>(ctx.end - w);
          CHECK(static_cast<long>(s.begin) == std::clamp(want, lo, hi));
        }
      }
    }
  }
}

TEST_CASE("plan_cutoff with uniform attention samples uniform midpoints") {
  const std::size_t H = 2, L = 16, layers = 3;
  AttentionRecord rec(1, H, L);
  for (std::size_t l = 0; l < layers; ++l) rec.push_layer(uniform_weights(H, L, 14));
  const TokenRange ctx{4, 14};
  AugmentConfig cfg;
  cfg.phi_cut = 0.1;  // width 1: the span is the midpoint itself
  Rng rng(8);
  std::vector<int> counts(L, 0);
  const int draws = 20000;
  for (int i = 0; i < draws; ++i) {
    const CutoffPlan plan = plan_cutoff(rec, {ctx}, cfg, rng);
    REQUIRE(plan.size() == layers);
    CHECK_FALSE(plan.back()[0].has_value());
    for (std::size_t l = 0; l + 1 < layers; ++l) {
      REQUIRE(plan[l][0]);
      CHECK(plan[l][0]->size() == 1);
      ++counts[plan[l][0]->begin];
    }
  }
  for (std::size_t p = 0; p < L; ++p) {
    const double freq = counts[p] / (2.0 * draws);
    CHECK(std::abs(freq - (ctx.contains(p) ? 0.1 : 0.0)) < 0.01);
  }
}

TEST_CASE("plan_cutoff favours tokens that receive more attention") {
  const std::size_t H = 1, L = 8;
  std::vector<double> w(L * L, 0.0);
  for (std::size_t q = 0; q < L; ++q) {
    for (std::size_t k = 0; k < L; ++k) w[q * L + k] = k == 5 ? 0.93 : 0.01;
  }
  AttentionRecord rec(1, H, L);
  rec.push_layer(w);
  rec.push_layer(w);
  AugmentConfig cfg;
  cfg.phi_cut = 0.2;
  Rng rng(3);
  int hits = 0;
  for (int i = 0; i < 2000; ++i) hits += plan_cutoff(rec, {TokenRange{2, 8}}, cfg, rng)[0][0]->contains(5);
  // Token 5 receives 0.93 from each of the 6 context queries: softmax mass ~0.98.
  CHECK(hits > 1700);
}

TEST_CASE("plan_cutoff edge cases") {
  AttentionRecord empty(1, 2, 8);
  AugmentConfig cfg;
  Rng rng(1);
  CHECK_THROWS_AS(plan_cutoff(empty, {TokenRange{2, 6}}, cfg, rng), ContractViolation);

  AttentionRecord rec(1, 2, 8);
  rec.push_layer(uniform_weights(2, 8, 8));
  rec.push_layer(uniform_weights(2, 8, 8));
  cfg.phi_cut = 0.0;
  for (const auto& layer : plan_cutoff(rec, {TokenRange{2, 6}}, cfg, rng)) CHECK_FALSE(layer[0].has_value());
}

TEST_CASE("cutoff spans stay inside the context with the planned width") {
  Rng rng(12);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t L = 20, H = 2;
    const std::size_t begin = 1 + rng.uniform_index(5);
    const std::size_t end = begin + 1 + rng.uniform_index(L - begin - 1);
    std::vector<double> w(H * L * L);
    for (double& x : w) x = rng.uniform();
    AugmentConfig cfg;
    cfg.phi_cut = 0.1 * static_cast<double>(1 + rng.uniform_index(4));
    const auto span = plan_layer_cutoff(w, H, L, TokenRange{begin, end}, cfg.phi_cut, rng);
    const std::size_t width = cutoff_width(cfg.phi_cut, end - begin);
    if (width == 0) {
      CHECK_FALSE(span.has_value());
      continue;
    }
    REQUIRE(span);
    CHECK(span->begin >= begin);
    CHECK(span->end <= end);
    CHECK(span->size() == width);
  }
}

TEST_CASE("augment config validation") {
  AugmentConfig c;
  c.zeta = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.phi_cut = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.decay = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}
