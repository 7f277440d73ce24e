#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "qada/contrastive.hpp"
#include "qada/gradcheck.hpp"

using namespace qada;

namespace {

using Rows = std::vector<std::vector<double>>;

Tensor matrix(const Rows& rows) {
  std::vector<double> v;
  for (const auto& r : rows) v.insert(v.end(), r.begin(), r.end());
  return Tensor::from({rows.size(), rows.front().size()}, v);
}

std::vector<Tensor> singles(const Rows& rows) {
  std::vector<Tensor> out;
  for (const auto& r : rows) out.push_back(Tensor::from({1, r.size()}, r));
  return out;
}

Rows random_rows(Rng& rng, std::size_t n, std::size_t d, double shift = 0.0) {
  Rows r(n, std::vector<double>(d));
  for (auto& row : r) {
    for (double& x : row) x = rng.normal() + shift;
  }
  return r;
}

// Independent double loop over the Gaussian kernel.
double brute_mmd(const Rows& a, const Rows& b, double sigma) {
  auto k = [sigma](const std::vector<double>& x, const std::vector<double>& y) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
    return std::exp(-s / (2.0 * sigma * sigma));
  };
  double aa = 0.0, bb = 0.0, ab = 0.0;
  for (const auto& x : a) {
    for (const auto& y : a) aa += k(x, y);
  }
  for (const auto& x : b) {
    for (const auto& y : b) bb += k(x, y);
  }
  for (const auto& x : a) {
    for (const auto& y : b) ab += k(x, y);
  }
  const double n = static_cast<double>(a.size()), m = static_cast<double>(b.size());
  return std::max(0.0, aa / (n * n) + bb / (m * m) - 2.0 * ab / (n * m));
}

Rows concat(const Rows& a, const Rows& b) {
  Rows out = a;
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

KernelConfig fixed(double sigma) {
  KernelConfig k;
  k.policy = BandwidthPolicy::fixed;
  k.bandwidth = sigma;
  return k;
}

ClassFeatures features_of(const Rows& sa, const Rows& ta, const Rows& sn, const Rows& tn) {
  ClassFeatures f;
  f.source_answer = singles(sa);
  f.target_answer = singles(ta);
  f.source_non_answer = singles(sn);
  f.target_non_answer = singles(tn);
  return f;
}

// A one-example batch of `len` real positions, for feature sampling.
EncodedBatch flat_batch(std::size_t len) {
  EncodedBatch b;
  b.batch = 1;
  b.seq_len = len;
  b.ids.assign(len, 4);
  b.attention_mask.assign(len, 1);
  SegmentLayout lay;
  lay.length = len;
  b.layout.push_back(lay);
  return b;
}

}  // namespace

TEST_CASE("mmd examples") {
  const Rows a{{0.0, 0.0}}, b{{1.0, 0.0}};
  CHECK(mmd(matrix(a), matrix(b), 1.0).item() == doctest::Approx(2.0 - 2.0 * std::exp(-0.5)).epsilon(1e-14));
  CHECK(mmd(matrix(a), matrix(b), 1.0).item() == doctest::Approx(0.78694).epsilon(1e-5));

  Rng rng(3);
  const Rows x = random_rows(rng, 4, 3);
  CHECK(std::abs(mmd(matrix(x), matrix(x), 0.7).item()) < 1e-12);
  CHECK_THROWS_AS(mmd(Tensor::zeros({0, 3}), matrix(x), 1.0), std::invalid_argument);
  CHECK_THROWS_AS(mmd(matrix(x), matrix(x), 0.0), std::invalid_argument);
}

TEST_CASE("mmd matches a brute-force double loop") {
  Rng rng(17);
  for (int trial = 0; trial < 25; ++trial) {
    const Rows a = random_rows(rng, 5, 3), b = random_rows(rng, 5, 3, 0.5);
    const double sigma = 0.3 + 2.0 * rng.uniform();
    CHECK(std::abs(mmd(matrix(a), matrix(b), sigma).item() - brute_mmd(a, b, sigma)) < 1e-12);
  }
}

TEST_CASE("mmd properties") {
  Rng rng(23);
  for (int trial = 0; trial < 25; ++trial) {
    Rows a = random_rows(rng, 2 + rng.uniform_index(5), 4), b = random_rows(rng, 2 + rng.uniform_index(5), 4, 0.3);
    const double sigma = 0.5 + rng.uniform();
    const double ab = mmd(matrix(a), matrix(b), sigma).item();
    CHECK(ab >= 0.0);
    CHECK(ab == doctest::Approx(mmd(matrix(b), matrix(a), sigma).item()).epsilon(1e-12));
    rng.shuffle(a);
    rng.shuffle(b);
    CHECK(ab == doctest::Approx(mmd(matrix(a), matrix(b), sigma).item()).epsilon(1e-12));
    CHECK(mmd(matrix(a), matrix(b), 1e6).item() < 1e-10);
    CHECK(mmd(matrix(a), matrix(b), 1e3).item() < mmd(matrix(a), matrix(b), 1.0).item());
  }
}

TEST_CASE("median bandwidth") {
  // Points 0, 1, 3: distances 1, 3, 2.
  const auto rows = singles({{0.0}, {1.0}, {3.0}});
  CHECK(median_bandwidth(rows) == 2.0);
  // Four points at 0, 1, 2, 4: distances 1, 2, 4, 1, 3, 2 -> median (2 + 2) / 2.
  CHECK(median_bandwidth(singles({{0.0}, {1.0}, {2.0}, {4.0}})) == 2.0);
  CHECK(median_bandwidth(singles({{5.0}})) == 1.0);
  CHECK(median_bandwidth(singles({{5.0}, {5.0}})) == 1.0);

  KernelConfig k;
  const Rows a{{0.0}, {1.0}}, b{{3.0}};
  CHECK(mmd(matrix(a), matrix(b), k).item() == doctest::Approx(brute_mmd(a, b, 2.0)).epsilon(1e-14));
}

TEST_CASE("qada_loss examples") {
  const Rows one{{0.3, -0.2}};
  auto same = qada_loss(features_of(one, one, one, one), fixed(1.0));
  CHECK(same.loss.item() == 0.0);
  CHECK_FALSE(same.all_dropped);

  // Answers cluster near (5, 5); non-answers near the origin.
  Rng rng(1);
  Rows sa = random_rows(rng, 3, 2, 5.0), ta = random_rows(rng, 3, 2, 5.0);
  Rows sn = random_rows(rng, 3, 2), tn = random_rows(rng, 3, 2);
  for (auto* set : {&sa, &ta, &sn, &tn}) {
    for (auto& r : *set) {
      for (double& x : r) x = 0.05 * x + (set == &sa || set == &ta ? 5.0 : 0.0);
    }
  }
  const auto sep = qada_loss(features_of(sa, ta, sn, tn), KernelConfig{});
  CHECK(sep.loss.item() < -0.5);
  REQUIRE(sep.extraction);
  CHECK(*sep.extraction > 0.5);
}

TEST_CASE("qada_loss equals the composition of three brute-force discrepancies") {
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const Rows sa = random_rows(rng, 2, 3), ta = random_rows(rng, 2, 3, 0.4);
    const Rows sn = random_rows(rng, 2, 3, -0.2), tn = random_rows(rng, 2, 3, 0.9);
    const double sigma = 0.5 + rng.uniform();
    const double expected = brute_mmd(sa, ta, sigma) + brute_mmd(sn, tn, sigma) -
                            brute_mmd(concat(sa, ta), concat(sn, tn), sigma);
    const auto got = qada_loss(features_of(sa, ta, sn, tn), fixed(sigma));
    CHECK(std::abs(got.loss.item() - expected) < 1e-12);
    CHECK(std::abs(*got.answer_discrepancy - brute_mmd(sa, ta, sigma)) < 1e-12);

    // Median policy: one bandwidth over all eight pooled vectors.
    std::vector<double> dists;
    const Rows all = concat(concat(sa, ta), concat(sn, tn));
    for (std::size_t i = 0; i < all.size(); ++i) {
      for (std::size_t j = i + 1; j < all.size(); ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < 3; ++c) s += (all[i][c] - all[j][c]) * (all[i][c] - all[j][c]);
        dists.push_back(std::sqrt(s));
      }
    }
    std::sort(dists.begin(), dists.end());
    const double med = 0.5 * (dists[dists.size() / 2 - 1] + dists[dists.size() / 2]);
    const auto median = qada_loss(features_of(sa, ta, sn, tn), KernelConfig{});
    CHECK(median.bandwidth == doctest::Approx(med).epsilon(1e-14));
    const double expected_med = brute_mmd(sa, ta, med) + brute_mmd(sn, tn, med) -
                                brute_mmd(concat(sa, ta), concat(sn, tn), med);
    CHECK(std::abs(median.loss.item() - expected_med) < 1e-12);
  }
}

TEST_CASE("qada_loss drops terms with empty sets") {
  const Rows s{{1.0, 0.0}}, n{{0.0, 1.0}};
  const auto no_target = qada_loss(features_of(s, {}, n, {}), fixed(1.0));
  CHECK_FALSE(no_target.answer_discrepancy);
  CHECK_FALSE(no_target.non_answer_discrepancy);
  REQUIRE(no_target.extraction);
  CHECK(no_target.loss.item() == doctest::Approx(-brute_mmd(s, n, 1.0)).epsilon(1e-14));

  const auto none = qada_loss(ClassFeatures{}, fixed(1.0));
  CHECK(none.all_dropped);
  CHECK(none.loss.item() == 0.0);
}

TEST_CASE("qada_loss falls as target answers move toward source answers") {
  Rng rng(41);
  for (int trial = 0; trial < 10; ++trial) {
    const Rows sa = random_rows(rng, 3, 2), sn = random_rows(rng, 3, 2, 12.0), tn = random_rows(rng, 3, 2, 12.2);
    // Target answers are a rigid copy of the source answers, translated back along a fixed offset.
    const double dx = -6.0 + rng.normal(), dy = -6.0 + rng.normal();
    double previous = 1e300;
    for (double t : {0.0, 0.25, 0.5, 0.75, 1.0}) {
      Rows ta = sa;
      for (auto& r : ta) {
        r[0] += (1.0 - t) * dx;
        r[1] += (1.0 - t) * dy;
      }
      const double loss = qada_loss(features_of(sa, ta, sn, tn), fixed(1.5)).loss.item();
      CHECK(loss < previous);
      previous = loss;
    }
  }
}

TEST_CASE("qada_loss gradient with respect to every hidden vector") {
  Rng rng(53);
  const std::size_t d = 3;
  Tensor hidden = Tensor::from({8, d}, [&] {
    std::vector<double> v(8 * d);
    for (double& x : v) x = rng.normal();
    return v;
  }(), true);
  auto loss = [&]() {
    ClassFeatures f;
    auto row = [&](std::size_t i) { return ops::gather_rows(hidden, std::span<const std::size_t>(&i, 1)); };
    f.source_answer = {row(0), row(1)};
    f.target_answer = {row(2), row(3)};
    f.source_non_answer = {row(4), row(5)};
    f.target_non_answer = {row(6), row(7)};
    return qada_loss(f, fixed(1.3)).loss;
  };
  const auto r = finite_diff_check(loss, {hidden}, 1e-6);
  CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("total_loss") {
  const Tensor ce = Tensor::scalar(2.0), q = Tensor::scalar(-0.5);
  CHECK(total_loss(ce, q, 0.0).item() == 2.0);
  CHECK(total_loss(ce, q, 0.0005).item() == doctest::Approx(1.99975).epsilon(1e-15));
  CHECK_THROWS_AS(total_loss(ce, q, -1.0), std::invalid_argument);
}

TEST_CASE("total_loss gradient through the whole model") {
  Vocab vocab;
  std::vector<QaExample> ex;
  ex.push_back(*make_example("s", "the pet of kato is molo .", "what is the pet of kato ?", {GoldAnswer{"molo", 19}},
                             Domain::source));
  ex.push_back(*make_example("t", "rin has a club called vado .", "which club does rin have ?",
                             {GoldAnswer{"vado", 22}}, Domain::target));
  for (const auto& e : ex) {
    for (const auto& t : e.question_tokens) vocab.add(t);
    for (const auto& t : e.context_tokens) vocab.add(t);
  }
  ModelConfig c;
  c.vocab_size = vocab.size();
  c.dim = 6;
  c.heads = 2;
  c.ff_dim = 8;
  c.max_len = 32;
  QaModel m(c, 4);
  const auto batch = encode_batch({&ex[0], &ex[1]}, vocab, 32);
  auto f = [&]() {
    ForwardOptions opt;
    opt.training = true;
    opt.update_running_stats = false;
    const QaOutput out = m.qa_forward(batch, opt);
    Rng rng(9);
    const ClassFeatures feats = collect_class_features(out, batch, rng);
    return total_loss(span_cross_entropy(out, batch), qada_loss(feats, fixed(2.0)).loss, 0.5);
  };
  const auto r = finite_diff_check(f, m.parameter_tensors(), 1e-6);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("class feature sampling follows received attention") {
  const std::size_t L = 10, d = 2;
  const EncodedBatch b = flat_batch(L);
  std::vector<double> hv(L * d);
  for (std::size_t i = 0; i < hv.size(); ++i) hv[i] = static_cast<double>(i);
  const Tensor hidden = Tensor::from({L, d}, hv);

  auto record = [&](double boost) {
    std::vector<double> w(L * L);
    for (std::size_t q = 0; q < L; ++q) {
      double z = 0.0;
      for (std::size_t k = 0; k < L; ++k) z += w[q * L + k] = k == 7 ? boost : 1.0;
      for (std::size_t k = 0; k < L; ++k) w[q * L + k] /= z;
    }
    AttentionRecord rec(1, 1, L);
    rec.push_layer(w);
    return rec;
  };
  Rng rng(6);

  SUBCASE("single position mask") {
    std::vector<std::uint8_t> mask(L, 0);
    mask[4] = 1;
    for (int i = 0; i < 20; ++i) {
      const auto s = sample_class_feature(hidden, record(10.0), b, 0, mask, rng);
      REQUIRE(s);
      CHECK(s->position == 4);
      CHECK(s->feature.at(0) == 8.0);
      CHECK(s->feature.at(1) == 9.0);
    }
    std::vector<std::uint8_t> empty(L, 0);
    CHECK_FALSE(sample_class_feature(hidden, record(1.0), b, 0, empty, rng));
  }

  SUBCASE("uniform attention over four positions") {
    std::vector<std::uint8_t> mask(L, 0);
    for (std::size_t p : {1, 3, 5, 8}) mask[p] = 1;
    std::vector<int> counts(L, 0);
    const AttentionRecord rec = record(1.0);
    for (int i = 0; i < 10000; ++i) ++counts[sample_class_feature(hidden, rec, b, 0, mask, rng)->position];
    for (std::size_t p : {1, 3, 5, 8}) CHECK(std::abs(counts[p] / 10000.0 - 0.25) < 0.02);
  }

  SUBCASE("position 7 receives ten times the mass") {
    std::vector<std::uint8_t> mask(L, 0);
    for (std::size_t p : {2, 6, 7, 9}) mask[p] = 1;
    // Each of the 10 queries gives 10/19 to position 7 and 1/19 elsewhere.
    const double s7 = 10.0 * 10.0 / 19.0, s = 10.0 * 1.0 / 19.0;
    const double p7 = std::exp(s7) / (std::exp(s7) + 3.0 * std::exp(s));
    const AttentionRecord rec = record(10.0);
    const auto dist = class_sampling_distribution(rec.example(0, 0), 1, L, TokenRange{0, L}, mask);
    CHECK(dist[7] == doctest::Approx(p7).epsilon(1e-12));
    int hits = 0;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) hits += sample_class_feature(hidden, rec, b, 0, mask, rng)->position == 7;
    CHECK(std::abs(hits / static_cast<double>(draws) - p7) < 0.02);
  }
}

TEST_CASE("collect_class_features takes one answer and one non-answer per labelled example") {
  Vocab vocab;
  std::vector<QaExample> ex;
  ex.push_back(*make_example("s", "the pet of kato is molo .", "what pet ?", {GoldAnswer{"molo", 19}}, Domain::source));
  ex.push_back(*make_example("t", "the club of rin is vado .", "which club ?", {GoldAnswer{"vado", 19}}, Domain::target));
  ex.push_back(strip_label(ex[1]));
  for (const auto& e : ex) {
    for (const auto& t : e.question_tokens) vocab.add(t);
    for (const auto& t : e.context_tokens) vocab.add(t);
  }
  ModelConfig c;
  c.vocab_size = vocab.size();
  c.dim = 4;
  c.heads = 2;
  c.ff_dim = 4;
  c.max_len = 32;
  QaModel m(c, 2);
  const auto batch = encode_batch({&ex[0], &ex[1], &ex[2]}, vocab, 32);
  const QaOutput out = m.qa_forward(batch, {});
  Rng rng(1);
  const ClassFeatures f = collect_class_features(out, batch, rng);
  CHECK(f.source_answer.size() == 1);
  CHECK(f.target_answer.size() == 1);
  CHECK(f.source_non_answer.size() == 1);
  CHECK(f.target_non_answer.size() == 1);
  CHECK(f.source_answer_pos[0] == batch.targets[0]->first);
  CHECK(batch.non_answer_mask[batch.flat(1, f.target_non_answer_pos[0])] == 1);
}
