#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>

#include "support.hpp"

using namespace tinymoe;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

RowVec<double> row(std::initializer_list<double> v) {
  RowVec<double> r(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) r(i++) = x;
  return r;
}

const MoeParams& moe_of(const Model<double>& m, std::size_t layer = 0) {
  return std::get<MoeParams>(m.blocks()[layer].ffn);
}

Mat<double> random_tokens(Rng& rng, Eigen::Index n, Eigen::Index d, double scale = 1.0) {
  Mat<double> x(n, d);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = scale * rng.normal();
  return x;
}

// entropy of the seed-0 random router over 4000 seed-0 tokens
constexpr double kFrozenEntropySeed0 = 1.385723861779919;

// Sparse tiny model whose experts all equal expert 0.
Model<double> identical_experts(int n, int k) {
  Model<double> dense(support::tiny_config());
  Rng rng(21);
  support::randomize(dense, rng);
  return upcycle(dense, n, k);
}

}  // namespace

TEST_CASE("route", "[moe]") {
  SECTION("zero router is uniform") {
    const auto r = route(Mat<double>(Mat<double>::Zero(3, 4)), row({0.3, -1.0, 2.0}));
    for (int i = 0; i < 4; ++i) REQUIRE_THAT(r(i), WithinAbs(0.25, 1e-15));
  }
  SECTION("two experts with logits [1, 0]") {
    Mat<double> w(1, 2);
    w << 1.0, 0.0;
    const auto r = route(w, row({1.0}));
    // e / (e + 1)
    const double a = std::exp(1.0) / (std::exp(1.0) + 1.0);
    REQUIRE_THAT(r(0), WithinAbs(a, 1e-12));
    REQUIRE_THAT(r(0), WithinAbs(0.7311, 1e-4));
    REQUIRE_THAT(r(1), WithinAbs(0.2689, 1e-4));
  }
  SECTION("shift invariance") {
    // an extra input coordinate fixed at 1 adds the same constant to every logit
    Rng rng(3);
    Mat<double> w = random_tokens(rng, 3, 5);
    const auto x = row({0.4, -0.2, 1.0});
    const auto base = route(w, x);
    w.row(2).array() += 7.5;
    const auto shifted = route(w, x);
    for (int i = 0; i < 5; ++i) REQUIRE_THAT(shifted(i), WithinAbs(base(i), 1e-12));
  }
  SECTION("non-finite input") {
    try {
      route(Mat<double>(Mat<double>::Zero(2, 2)), row({std::nan(""), 0.0}));
      FAIL("no throw");
    } catch (const Error& e) {
      REQUIRE(e.code() == ErrorCode::NumericError);
    }
  }
  SECTION("width mismatch") { REQUIRE_THROWS_AS(route(Mat<double>(Mat<double>::Zero(2, 2)), row({1.0})), Error); }
}

TEST_CASE("top_k_select", "[moe]") {
  SECTION("keeps the two largest at their values") {
    const auto r = top_k_select(row({0.4, 0.3, 0.2, 0.1}), 2);
    REQUIRE(r == row({0.4, 0.3, 0.0, 0.0}));
  }
  SECTION("unsorted input against a sort-and-mask oracle") {
    Rng rng(8);
    for (int trial = 0; trial < 200; ++trial) {
      RowVec<double> r(6);
      for (int i = 0; i < 6; ++i) r(i) = rng.uniform();
      const int k = 1 + static_cast<int>(rng.below(6));
      std::vector<int> order(6);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return r(a) > r(b); });
      RowVec<double> want = RowVec<double>::Zero(6);
      for (int i = 0; i < k; ++i) want(order[i]) = r(order[i]);
      REQUIRE(top_k_select(r, k) == want);
    }
  }
  SECTION("k = N is the identity") {
    const auto r = row({0.1, 0.5, 0.15, 0.25});
    REQUIRE(top_k_select(r, 4) == r);
  }
  SECTION("ties go to the lowest index") {
    REQUIRE(top_k_select(row({0.25, 0.25, 0.25, 0.25}), 2) == row({0.25, 0.25, 0.0, 0.0}));
    REQUIRE(top_k_select(row({0.1, 0.3, 0.3, 0.3}), 2) == row({0.0, 0.3, 0.3, 0.0}));
  }
  SECTION("k out of range") {
    for (int k : {0, 5, -1}) {
      try {
        top_k_select(row({0.25, 0.25, 0.25, 0.25}), k);
        FAIL("no throw");
      } catch (const Error& e) {
        REQUIRE(e.code() == ErrorCode::InvalidK);
      }
    }
  }
}

TEST_CASE("moe_forward", "[moe]") {
  Rng rng(12);
  SECTION("identical experts with k = N collapse to the dense FFN") {
    auto m = identical_experts(4, 4);
    auto& ps = m.params();
    // non-zero router: the weights still sum to one
    ps[moe_of(m).router].value = random_tokens(rng, 4, 4);
    const auto x = random_tokens(rng, 5, 4);
    const auto f = nn::ffn_forward(ps, moe_of(m).experts[0], x, static_cast<nn::FfnCache<double>*>(nullptr));
    REQUIRE((moe_forward(ps, moe_of(m), x, static_cast<MoeCache<double>*>(nullptr)) - f).cwiseAbs().maxCoeff() <
            1e-12);
  }
  SECTION("identical experts with k = 2 of 4 scale by the kept weights") {
    auto m = identical_experts(4, 2);
    auto& ps = m.params();
    ps[moe_of(m).router].value = random_tokens(rng, 4, 4);
    const auto x = random_tokens(rng, 6, 4);
    const auto f = nn::ffn_forward(ps, moe_of(m).experts[0], x, static_cast<nn::FfnCache<double>*>(nullptr));
    const auto y = moe_forward(ps, moe_of(m), x, static_cast<MoeCache<double>*>(nullptr));
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
      const auto r = route<double>(ps[moe_of(m).router].value, x.row(t));
      const double kept = top_k_select(r, 2).sum();
      REQUIRE(kept < 1.0);
      REQUIRE((y.row(t) - kept * f.row(t)).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
  SECTION("saturated router with k = 1 picks one expert") {
    Model<double> m(support::tiny_config(), {4, 1});
    support::randomize(m, rng);
    auto& ps = m.params();
    const auto x = random_tokens(rng, 3, 4);
    // expert 2 gets a huge logit for every token
    auto& w = ps[moe_of(m).router].value;
    w.setZero();
    Mat<double> shifted = x;
    shifted.col(0).setConstant(1.0);
    w(0, 2) = 60.0;
    const auto y = moe_forward(ps, moe_of(m), shifted, static_cast<MoeCache<double>*>(nullptr));
    const auto e2 = nn::ffn_forward(ps, moe_of(m).experts[2], shifted, static_cast<nn::FfnCache<double>*>(nullptr));
    REQUIRE((y - e2).cwiseAbs().maxCoeff() < 1e-4);
  }
}

TEST_CASE("upcycle", "[moe]") {
  Model<double> dense(support::tiny_config());
  Rng rng(31);
  support::randomize(dense, rng);
  const auto px = random_tokens(rng, 2, 3);
  const std::vector<int> text = {1, 2, 3, 4};

  SECTION("k = N reproduces the dense logits") {
    const auto sparse = upcycle(dense, 4, 4);
    REQUIRE((sparse.logits(px, text) - dense.logits(px, text)).cwiseAbs().maxCoeff() < 1e-12);
  }
  SECTION("zero router with k < N scales the FFN output by k/N") {
    const auto sparse = upcycle(dense, 4, 1);
    const auto x = random_tokens(rng, 5, 4);
    const auto& sps = sparse.params();
    const auto f = nn::ffn_forward(sps, moe_of(sparse).experts[0], x, static_cast<nn::FfnCache<double>*>(nullptr));
    const auto y = moe_forward(sps, moe_of(sparse), x, static_cast<MoeCache<double>*>(nullptr));
    REQUIRE((y - 0.25 * f).cwiseAbs().maxCoeff() < 1e-14);
  }
  SECTION("non-FFN parameters are copied bit for bit, router is zero") {
    const auto sparse = upcycle(dense, 4, 2);
    for (const auto& p : dense.params()) {
      if (p.name.find(".ffn.") != std::string::npos) continue;
      REQUIRE(sparse.params()[sparse.params().id_of(p.name)].value == p.value);
    }
    for (int e = 0; e < 4; ++e) {
      for (const char* part : {"up.weight", "up.bias", "down.weight", "down.bias"}) {
        REQUIRE(sparse.params()[sparse.params().id_of("blocks.0.moe.experts." + std::to_string(e) + "." + part)].value ==
                dense.params()[dense.params().id_of(std::string("blocks.0.ffn.") + part)].value);
      }
    }
    REQUIRE(sparse.params()[moe_of(sparse).router].value.isZero(0.0));
  }
  SECTION("parameter count") {
    const int n = 4;
    const auto& c = dense.config();
    const auto sparse = upcycle(dense, n, 2);
    REQUIRE(sparse.params().total_numel() == dense.params().total_numel() +
                                                 (n - 1) * ffn_param_count(c) * c.n_layers +
                                                 static_cast<std::size_t>(c.d_model * n * c.n_layers));
  }
  SECTION("errors") {
    const auto sparse = upcycle(dense, 4, 2);
    try {
      upcycle(sparse, 4, 2);
      FAIL("no throw");
    } catch (const Error& e) {
      REQUIRE(e.code() == ErrorCode::AlreadySparse);
    }
    try {
      upcycle(dense, 4, 5);
      FAIL("no throw");
    } catch (const Error& e) {
      REQUIRE(e.code() == ErrorCode::InvalidK);
    }
  }
}

TEST_CASE("unselected experts receive no gradient", "[moe]") {
  Model<double> m(support::tiny_config(), {4, 2});
  Rng rng(41);
  support::randomize(m, rng);
  auto& ps = m.params();
  ps.set_all_trainable(true);
  for (int trial = 0; trial < 50; ++trial) {
    const auto x = random_tokens(rng, 1, 4);
    ps.zero_grad();
    MoeCache<double> cache;
    moe_forward(ps, moe_of(m), x, &cache);
    moe_backward(ps, moe_of(m), x, cache, random_tokens(rng, 1, 4));
    const auto& sel = cache.selected[0];
    for (int e = 0; e < 4; ++e) {
      const auto& f = moe_of(m).experts[static_cast<std::size_t>(e)];
      const bool chosen = std::find(sel.begin(), sel.end(), e) != sel.end();
      for (auto id : {f.up_w, f.up_b, f.down_w, f.down_b}) REQUIRE(ps[id].grad.isZero(0.0) == !chosen);
    }
  }
}

TEST_CASE("selection depends only on logit order", "[moe]") {
  Rng rng(5);
  const auto w = random_tokens(rng, 4, 4);
  for (int trial = 0; trial < 200; ++trial) {
    const RowVec<double> x = random_tokens(rng, 1, 4);
    const double s = 0.1 + 5.0 * rng.uniform();
    const RowVec<double> ra = route(w, x);
    const RowVec<double> rb = route<double>(w, x * s);
    const auto a = top_k_indices<double>(std::span<const double>(ra.data(), 4), 2);
    const auto b = top_k_indices<double>(std::span<const double>(rb.data(), 4), 2);
    REQUIRE(a == b);
  }
}

TEST_CASE("utilization statistics", "[moe]") {
  Model<double> m(support::tiny_config(), {4, 2});
  auto& ps = m.params();
  Rng rng(0);
  const auto x = random_tokens(rng, 4000, 4);

  SECTION("zero router: frequencies sum to k and ties pick the lowest experts") {
    ps[moe_of(m).router].value.setZero();
    MoeCache<double> c;
    moe_forward(ps, moe_of(m), x, &c);
    const auto recs = routing_records(c);
    const auto s = utilization_stats(recs, 4);
    REQUIRE_THAT(std::accumulate(s.frequency.begin(), s.frequency.end(), 0.0), WithinAbs(2.0, 1e-12));
    REQUIRE(s.frequency == std::vector<double>{1.0, 1.0, 0.0, 0.0});
    REQUIRE_THAT(s.entropy, WithinAbs(std::log(2.0), 1e-12));
  }
  SECTION("one-hot router with k = 1 has zero entropy") {
    Model<double> m1(support::tiny_config(), {4, 1});
    auto& p1 = m1.params();
    auto& w = p1[moe_of(m1).router].value;
    w.setZero();
    Mat<double> ones = x;
    ones.col(0).setConstant(1.0);
    w(0, 3) = 50.0;
    MoeCache<double> c;
    moe_forward(p1, moe_of(m1), ones, &c);
    const auto s = utilization_stats(routing_records(c), 4);
    REQUIRE(s.frequency == std::vector<double>{0.0, 0.0, 0.0, 1.0});
    REQUIRE(s.entropy == 0.0);
  }
  SECTION("random router spreads load") {
    Rng wr(0);
    ps[moe_of(m).router].value = random_tokens(wr, 4, 4);
    MoeCache<double> c;
    moe_forward(ps, moe_of(m), x, &c);
    const auto s = utilization_stats(routing_records(c), 4);
    REQUIRE(s.entropy >= 0.8 * std::log(4.0));
    REQUIRE(s.entropy <= std::log(4.0) + 1e-12);
    // frozen at seed 0
    REQUIRE_THAT(s.entropy, WithinAbs(kFrozenEntropySeed0, 1e-9));
  }
  SECTION("merge is order-insensitive") {
    Rng wr(1);
    ps[moe_of(m).router].value = random_tokens(wr, 4, 4);
    MoeCache<double> c;
    moe_forward(ps, moe_of(m), x, &c);
    const auto recs = routing_records(c);
    UtilizationAccumulator a(4), b(4), cc(4), whole(4);
    for (std::size_t i = 0; i < recs.size(); ++i) {
      (i % 3 == 0 ? a : i % 3 == 1 ? b : cc).add(recs[i]);
      whole.add(recs[i]);
    }
    UtilizationAccumulator left = a, right = cc;
    left.merge(b);
    left.merge(cc);
    right.merge(b);
    right.merge(a);
    REQUIRE(left.stats().frequency == whole.stats().frequency);
    REQUIRE(right.stats().frequency == whole.stats().frequency);
    REQUIRE(left.stats().entropy == right.stats().entropy);
    REQUIRE(left.tokens() == recs.size());
  }
  SECTION("empty batch") {
    try {
      utilization_stats({}, 4);
      FAIL("no throw");
    } catch (const Error& e) {
      REQUIRE(e.code() == ErrorCode::EmptyBatch);
    }
  }
}
