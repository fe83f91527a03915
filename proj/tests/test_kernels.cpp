#include "doctest.h"

#include <random>
#include <tuple>

#include "epiguide/kernels.hpp"

using namespace epiguide;

namespace {

Matrix random_matrix(std::mt19937_64& rng, int r, int c) {
  std::normal_distribution<double> nd;
  Matrix m(r, c);
  for (double& v : m.values()) v = nd(rng);
  return m;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  REQUIRE(a.rows() == b.rows());
  REQUIRE(a.cols() == b.cols());
  double d = 0.0;
  for (std::size_t i = 0; i < a.values().size(); ++i) d = std::max(d, std::abs(a.values()[i] - b.values()[i]));
  return d;
}

}  // namespace

TEST_CASE("parallel kernels match the serial reference") {
  std::mt19937_64 rng(17);
  const int saved = kernels::max_threads();
  // Shapes on both sides of the parallel threshold, odd sizes included.
  for (auto [n, k, m] : {std::tuple{3, 5, 2}, std::tuple{33, 17, 9}, std::tuple{100, 64, 100}, std::tuple{197, 48, 197}}) {
    const Matrix a = random_matrix(rng, n, k), b = random_matrix(rng, k, m), bt = random_matrix(rng, m, k);
    const Matrix c = random_matrix(rng, n, m);
    for (int threads : {1, 4}) {
      kernels::set_threads(threads);
      Matrix p, s;
      kernels::matmul(a, b, p);
      kernels::serial::matmul(a, b, s);
      CHECK(max_abs_diff(p, s) < 1e-12);

      kernels::matmul_nt(a, bt, p);
      kernels::serial::matmul_nt(a, bt, s);
      CHECK(max_abs_diff(p, s) < 1e-12);

      Matrix acc_p = random_matrix(rng, k, m), acc_s = acc_p;
      kernels::matmul_tn_acc(a, c, acc_p);
      kernels::serial::matmul_tn_acc(a, c, acc_s);
      CHECK(max_abs_diff(acc_p, acc_s) < 1e-12);

      kernels::softmax_rows(c, 0.7, p);
      kernels::serial::softmax_rows(c, 0.7, s);
      CHECK(max_abs_diff(p, s) < 1e-15);
    }
  }
  kernels::set_threads(saved);
}

TEST_CASE("parallel results do not depend on the thread count") {
  std::mt19937_64 rng(18);
  const Matrix a = random_matrix(rng, 197, 64), b = random_matrix(rng, 64, 197);
  const int saved = kernels::max_threads();
  Matrix one, four;
  kernels::set_threads(1);
  kernels::matmul(a, b, one);
  kernels::set_threads(4);
  kernels::matmul(a, b, four);
  kernels::set_threads(saved);
  CHECK(one == four);
}

TEST_CASE("softmax rows sum to one and survive large inputs") {
  Matrix in(2, 3);
  in(0, 0) = 1000.0;
  in(0, 1) = 999.0;
  in(0, 2) = -1000.0;
  Matrix out;
  kernels::softmax_rows(in, 1.0, out);
  CHECK(out(0, 0) + out(0, 1) + out(0, 2) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(out(1, 0) == doctest::Approx(1.0 / 3));
  CHECK(out(0, 2) == 0.0);
}
