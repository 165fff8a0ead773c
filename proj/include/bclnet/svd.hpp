#pragma once

#include <vector>

namespace bclnet {

// Thin SVD A = U * diag(sigma) * V^T for an n x m matrix with m small
// (3 or 9 here). Singular values are sorted descending; each (u_j, v_j)
// pair is sign-fixed so the largest-magnitude entry of v_j is positive.
// Columns with sigma == 0 carry a zero u column.
struct Svd {
  int n = 0, m = 0;
  std::vector<double> u;      // n x m, row-major
  std::vector<double> sigma;  // m, descending
  std::vector<double> v;      // m x m, row-major; column j is v_j
};

// One-sided Jacobi orthogonalization. Handles n >= 2, m >= 2, including
// rank-deficient inputs (n < m leaves at least m - n zero singular values).
Svd jacobi_svd(const double* a, int n, int m);

inline Svd jacobi_svd(const std::vector<double>& a, int n, int m) {
  return jacobi_svd(a.data(), n, m);
}

}  // namespace bclnet
