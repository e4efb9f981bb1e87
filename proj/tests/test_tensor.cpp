#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cst/tensor.hpp"

using namespace cst;

TEST_CASE("matrix storage is row major") {
  Matrix m(2, 3);
  m.at(0, 0) = 1;
  m.at(0, 2) = 2;
  m.at(1, 1) = 3;
  REQUIRE(m.data == Vec{1, 0, 2, 0, 3, 0});
  REQUIRE(m.row(1)[1] == 3.0);
}

TEST_CASE("matvec_acc matches hand computation") {
  Matrix m(2, 3);
  m.data = {1, 2, 3, 4, 5, 6};
  Vec x = {1, 0, -1};
  Vec y = {10, 20};
  matvec_acc(m, x, y);
  REQUIRE(y[0] == Catch::Approx(10 + (1 - 3)).margin(1e-15));
  REQUIRE(y[1] == Catch::Approx(20 + (4 - 6)).margin(1e-15));
}

TEST_CASE("matvec_t_acc matches hand computation") {
  Matrix m(2, 3);
  m.data = {1, 2, 3, 4, 5, 6};
  Vec x = {2, -1};
  Vec y(3, 0.0);
  matvec_t_acc(m, x, y);
  REQUIRE(y == Vec{2 * 1 - 4, 2 * 2 - 5, 2 * 3 - 6});
}

TEST_CASE("outer_acc accumulates a b^T") {
  Matrix m(2, 2);
  m.data = {1, 1, 1, 1};
  Vec a = {2, 3};
  Vec b = {5, 7};
  outer_acc(m, a, b);
  REQUIRE(m.data == Vec{11, 15, 16, 22});
}

TEST_CASE("axpy and dot") {
  Vec x = {1, 2, 3};
  Vec y = {1, 1, 1};
  axpy(2.0, x, y);
  REQUIRE(y == Vec{3, 5, 7});
  REQUIRE(dot(x, y) == Catch::Approx(3 + 10 + 21).margin(1e-15));
}

TEST_CASE("softmax_inplace normalizes and returns the log partition") {
  Vec v = {1.0, 2.0, 3.0};
  const Vec logits = v;
  const double lse = softmax_inplace(v);
  double sum = 0.0;
  for (double p : v) sum += p;
  REQUIRE(std::abs(sum - 1.0) <= 1e-12);
  for (size_t k = 0; k < v.size(); ++k)
    REQUIRE(std::log(v[k]) == Catch::Approx(logits[k] - lse).margin(1e-12));

  // Manual log-sum-exp cross-check.
  const double direct = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
  REQUIRE(lse == Catch::Approx(direct).margin(1e-12));
}

TEST_CASE("softmax_inplace survives large logits") {
  Vec v = {1000.0, 1000.0, 999.0};
  softmax_inplace(v);
  REQUIRE(all_finite(v));
  REQUIRE(v[0] == Catch::Approx(v[1]).margin(1e-15));
  REQUIRE(v[2] < v[0]);
}

TEST_CASE("uniform softmax from equal logits") {
  Vec v(7, 0.42);
  softmax_inplace(v);
  for (double p : v) REQUIRE(p == Catch::Approx(1.0 / 7.0).margin(1e-15));
}

TEST_CASE("sigmoid endpoints and symmetry") {
  REQUIRE(sigmoid(0.0) == 0.5);
  REQUIRE(sigmoid(50.0) == Catch::Approx(1.0).margin(1e-12));
  REQUIRE(sigmoid(-50.0) == Catch::Approx(0.0).margin(1e-12));
  REQUIRE(sigmoid(1.3) + sigmoid(-1.3) == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("all_finite flags bad values") {
  Vec ok = {1.0, -2.0};
  REQUIRE(all_finite(ok));
  Vec bad = {1.0, std::nan("")};
  REQUIRE_FALSE(all_finite(bad));
  Matrix m(1, 2);
  m.data = {1.0, std::numeric_limits<double>::infinity()};
  REQUIRE_FALSE(all_finite(m));
}

TEST_CASE("fill_uniform stays in bounds and is seed deterministic") {
  Matrix a(5, 5), b(5, 5);
  Rng r1(3), r2(3);
  a.fill_uniform(r1, -0.08, 0.08);
  b.fill_uniform(r2, -0.08, 0.08);
  REQUIRE(a.data == b.data);
  for (double v : a.data) {
    REQUIRE(v >= -0.08);
    REQUIRE(v < 0.08);
  }
}
