#include <doctest.h>

#include <cmath>

#include "compprobe/rng.hpp"
#include "compprobe/stats.hpp"
#include "oracles.hpp"

using namespace compprobe;
using namespace compprobe::stats;

namespace {
using V = std::vector<double>;
}

TEST_CASE("spearman examples") {
  CHECK(spearman(V{1, 2, 3}, V{10, 20, 30}) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(spearman(V{1, 2, 3}, V{3, 2, 1}) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK_THROWS_AS(spearman(V{1, 1, 1}, V{1, 2, 3}), UndefinedCorrelationError);
  CHECK_THROWS_AS(spearman(V{1, 2, 3}, V{4, 4, 4}), UndefinedCorrelationError);
  CHECK_THROWS_AS(spearman(V{1, 2}, V{1, 2}), ShapeError);
  CHECK_THROWS_AS(spearman(V{1, 2, 3}, V{1, 2}), ShapeError);
}

TEST_CASE("fractional ranks average ties") {
  CHECK(fractional_ranks(V{10, 20, 20, 5}) == V{2, 3.5, 3.5, 1});
  CHECK(fractional_ranks(V{7, 7, 7}) == V{2, 2, 2});
}

TEST_CASE("spearman agrees with the brute-force rank oracle on tied data") {
  Rng rng(17);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 3 + rng.below(60);
    V x(n), y(n);
    const auto levels = 2 + rng.below(8);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = static_cast<double>(rng.below(levels));
      y[i] = trial % 2 ? rng.normal() : static_cast<double>(rng.below(levels));
    }
    const bool constant_x = std::all_of(x.begin(), x.end(), [&](double v) { return v == x[0]; });
    const bool constant_y = std::all_of(y.begin(), y.end(), [&](double v) { return v == y[0]; });
    if (constant_x || constant_y) {
      CHECK_THROWS_AS(spearman(x, y), UndefinedCorrelationError);
      continue;
    }
    CHECK(fractional_ranks(x) == oracle::brute_ranks(x));
    CHECK(std::abs(spearman(x, y) - oracle::brute_spearman(x, y)) < 1e-12);
  }
}

TEST_CASE("spearman is invariant under increasing transforms") {
  Rng rng(18);
  for (int trial = 0; trial < 100; ++trial) {
    V x(50), y(50), x3(50);
    for (std::size_t i = 0; i < 50; ++i) {
      x[i] = 0.1 + rng.uniform();
      y[i] = x[i] + 0.5 * rng.normal();
      x3[i] = x[i] * x[i] * x[i];
    }
    const double r = spearman(x, y);
    CHECK(std::abs(spearman(x3, y) - r) < 1e-12);
    V ey(50);
    for (std::size_t i = 0; i < 50; ++i) ey[i] = std::exp(y[i]);
    CHECK(std::abs(spearman(x, ey) - r) < 1e-12);
    CHECK(r >= -1.0);
    CHECK(r <= 1.0);
  }
}

TEST_CASE("pearson and helpers") {
  CHECK(pearson(V{1, 2, 3, 4}, V{2, 4, 6, 8}) == doctest::Approx(1.0));
  CHECK(pearson(V{1, 2, 3}, V{1, 3, 2}) == doctest::Approx(oracle::brute_pearson({1, 2, 3}, {1, 3, 2})));
  CHECK(mean(V{1, 2, 3, 6}) == 3.0);
  CHECK(add_one_p(0, 999) == doctest::Approx(0.001));
  CHECK(add_one_p(999, 999) == 1.0);
}
