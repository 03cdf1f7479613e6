#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>

#include "tinymoe/rng.hpp"

using tinymoe::Rng;

TEST_CASE("same seed, same stream", "[rng]") {
  Rng a(42), b(42), c(43);
  std::vector<std::uint64_t> xa, xb, xc;
  for (int i = 0; i < 100; ++i) {
    xa.push_back(a.next_u64());
    xb.push_back(b.next_u64());
    xc.push_back(c.next_u64());
  }
  REQUIRE(xa == xb);
  REQUIRE(xa != xc);
}

TEST_CASE("derived streams are independent of draw order", "[rng]") {
  auto s3 = Rng::derived(7, 3);
  const auto first = s3.next_u64();
  for (int i = 0; i < 3; ++i) Rng::derived(7, static_cast<std::uint64_t>(i)).next_u64();
  REQUIRE(Rng::derived(7, 3).next_u64() == first);
  REQUIRE(Rng::derived(7, 4).next_u64() != first);
  REQUIRE(Rng::derived(8, 3).next_u64() != first);
}

TEST_CASE("uniform, below and normal stay in range", "[rng]") {
  Rng r(1);
  double sum = 0.0, sq = 0.0;
  std::vector<int> hist(5, 0);
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    const auto k = r.below(5);
    REQUIRE(k < 5);
    ++hist[k];
    const double z = r.normal();
    sum += z;
    sq += z * z;
  }
  for (int h : hist) REQUIRE(std::abs(h - n / 5) < 600);
  REQUIRE(std::abs(sum / n) < 0.02);
  REQUIRE(std::abs(sq / n - 1.0) < 0.02);
}

TEST_CASE("shuffle is a permutation", "[rng]") {
  Rng r(9);
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  auto w = v;
  r.shuffle(w);
  REQUIRE(w != v);
  std::sort(w.begin(), w.end());
  REQUIRE(w == v);
}
