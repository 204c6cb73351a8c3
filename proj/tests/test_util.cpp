#include <cmath>

#include "doctest.h"
#include "sgram/util.hpp"

using namespace sg;

TEST_CASE("log_add matches direct computation") {
  CHECK(log_add(std::log(0.25), std::log(0.75)) == doctest::Approx(0.0));
  CHECK(log_add(kNegInf, -1.5) == doctest::Approx(-1.5));
  CHECK(log_add(kNegInf, kNegInf) == kNegInf);
  double v = log_add(-1000.0, -1000.0);
  CHECK(v == doctest::Approx(-1000.0 + std::log(2.0)));
}

TEST_CASE("log_sum_exp handles empty and singleton") {
  std::vector<double> empty;
  CHECK(log_sum_exp(empty) == kNegInf);
  std::vector<double> one{-2.0};
  CHECK(log_sum_exp(one) == doctest::Approx(-2.0));
}

TEST_CASE("rng is deterministic and respects bounds") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(7);
  for (int i = 0; i < 1000; ++i) {
    double x = c.next_double();
    CHECK(x >= 0.0);
    CHECK(x < 1.0);
    CHECK(c.next_below(13) < 13);
  }
}

TEST_CASE("shuffle is a permutation and seed-stable") {
  std::vector<int> xs{0, 1, 2, 3, 4, 5, 6, 7};
  std::vector<int> ys = xs;
  Rng a(3), b(3);
  a.shuffle(xs);
  b.shuffle(ys);
  CHECK(xs == ys);
  std::sort(xs.begin(), xs.end());
  CHECK(xs == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7});
}

TEST_CASE("parallel_for covers all indices once") {
  std::vector<int> hits(257, 0);
  parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i] += 1; });
  for (int h : hits) CHECK(h == 1);
}

TEST_CASE("fnv1a64 stable value") {
  const char* s = "sgram";
  CHECK(fnv1a64(s, 5) == fnv1a64(s, 5));
  CHECK(fnv1a64("a", 1) != fnv1a64("b", 1));
}
