#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "bclnet/svd.hpp"
#include "bclnet/tensor.hpp"

using namespace bclnet;

namespace {

double reconstruction_error(const std::vector<double>& a, const Svd& s) {
  double num = 0.0, den = 0.0;
  for (int i = 0; i < s.n; ++i)
    for (int j = 0; j < s.m; ++j) {
      double r = 0.0;
      for (int c = 0; c < s.m; ++c)
        r += s.u[static_cast<std::size_t>(i) * s.m + c] * s.sigma[static_cast<std::size_t>(c)] *
             s.v[static_cast<std::size_t>(j) * s.m + c];
      double e = a[static_cast<std::size_t>(i) * s.m + j] - r;
      num += e * e;
      den += a[static_cast<std::size_t>(i) * s.m + j] * a[static_cast<std::size_t>(i) * s.m + j];
    }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

double orthogonality_error(const std::vector<double>& q, int rows, int cols) {
  double worst = 0.0;
  for (int a = 0; a < cols; ++a)
    for (int b = 0; b < cols; ++b) {
      double dot = 0.0;
      for (int i = 0; i < rows; ++i)
        dot += q[static_cast<std::size_t>(i) * cols + a] * q[static_cast<std::size_t>(i) * cols + b];
      worst = std::max(worst, std::abs(dot - (a == b ? 1.0 : 0.0)));
    }
  return worst;
}

}  // namespace

TEST_CASE("SVD reconstructs random 3x3 and Nx9 matrices to 1e-10") {
  Rng rng(100);
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<double> a(9);
    for (double& v : a) v = rng.uniform(-2.0, 2.0);
    Svd s = jacobi_svd(a, 3, 3);
    CHECK(reconstruction_error(a, s) < 1e-10);
    CHECK(orthogonality_error(s.v, 3, 3) < 1e-12);
    CHECK(s.sigma[0] >= s.sigma[1]);
    CHECK(s.sigma[1] >= s.sigma[2]);
  }
  for (int rep = 0; rep < 50; ++rep) {
    int n = 9 + static_cast<int>(rng.index(60));
    std::vector<double> a(static_cast<std::size_t>(n) * 9);
    for (double& v : a) v = rng.uniform(-1.0, 1.0);
    Svd s = jacobi_svd(a, n, 9);
    CHECK(reconstruction_error(a, s) < 1e-10);
    CHECK(orthogonality_error(s.v, 9, 9) < 1e-12);
    CHECK(orthogonality_error(s.u, n, 9) < 1e-10);
  }
}

TEST_CASE("SVD handles rank deficiency") {
  // 8 x 9 has at least one exact null direction
  Rng rng(5);
  std::vector<double> a(72);
  for (double& v : a) v = rng.uniform(-1.0, 1.0);
  Svd s = jacobi_svd(a, 8, 9);
  CHECK(s.sigma[8] <= 1e-12 * s.sigma[0]);
  CHECK(reconstruction_error(a, s) < 1e-10);

  // duplicated column
  std::vector<double> b(static_cast<std::size_t>(12) * 3);
  for (int i = 0; i < 12; ++i) {
    b[static_cast<std::size_t>(i) * 3 + 0] = rng.uniform(-1.0, 1.0);
    b[static_cast<std::size_t>(i) * 3 + 1] = b[static_cast<std::size_t>(i) * 3 + 0];
    b[static_cast<std::size_t>(i) * 3 + 2] = rng.uniform(-1.0, 1.0);
  }
  Svd sb = jacobi_svd(b, 12, 3);
  CHECK(sb.sigma[2] <= 1e-12 * sb.sigma[0]);
  CHECK(reconstruction_error(b, sb) < 1e-10);
}

TEST_CASE("smallest_singular_vector matches the plain SVD and is unit length") {
  Rng rng(9);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor m = Tensor::uniform({14, 9}, rng, -1.0, 1.0);
    Tensor v = smallest_singular_vector(m);
    Svd s = jacobi_svd(m.values(), 14, 9);
    double norm = 0.0;
    for (int i = 0; i < 9; ++i) {
      CHECK(v[static_cast<std::size_t>(i)] ==
            doctest::Approx(s.v[static_cast<std::size_t>(i) * 9 + 8]).epsilon(1e-12));
      norm += v[static_cast<std::size_t>(i)] * v[static_cast<std::size_t>(i)];
    }
    CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-12));
    // residual ||M v|| equals the smallest singular value
    double res = 0.0;
    for (int i = 0; i < 14; ++i) {
      double r = 0.0;
      for (int j = 0; j < 9; ++j) r += m(i, j) * v[static_cast<std::size_t>(j)];
      res += r * r;
    }
    CHECK(std::sqrt(res) == doctest::Approx(s.sigma[8]).epsilon(1e-9));
  }
}

TEST_CASE("smallest_singular_vector gradient matches finite differences") {
  Rng rng(21);
  for (int rep = 0; rep < 5; ++rep) {
    double err = check_gradient_rejection(
        [](const std::vector<Tensor>& in) { return smallest_singular_vector(in[0]); }, {{12, 9}},
        rng, 1e-6);
    CHECK(err < 1e-5);
  }
}
