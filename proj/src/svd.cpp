#include "bclnet/svd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bclnet/common.hpp"
#include "bclnet/tensor.hpp"

namespace bclnet {

Svd jacobi_svd(const double* a, int n, int m) {
  if (n < 1 || m < 2) throw ShapeError("jacobi_svd: need at least a 1 x 2 matrix");
  // column-major working copy of A; columns are rotated in place
  std::vector<double> col(static_cast<std::size_t>(n) * m);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) col[static_cast<std::size_t>(j) * n + i] = a[static_cast<std::size_t>(i) * m + j];
  // V starts as identity, accumulates the column rotations
  std::vector<double> v(static_cast<std::size_t>(m) * m, 0.0);
  for (int j = 0; j < m; ++j) v[static_cast<std::size_t>(j) * m + j] = 1.0;

  const double tol = 1e-15;
  const int max_sweeps = 60;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool converged = true;
    for (int p = 0; p < m - 1; ++p) {
      for (int q = p + 1; q < m; ++q) {
        double* cp = col.data() + static_cast<std::size_t>(p) * n;
        double* cq = col.data() + static_cast<std::size_t>(q) * n;
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (int i = 0; i < n; ++i) {
          alpha += cp[i] * cp[i];
          beta += cq[i] * cq[i];
          gamma += cp[i] * cq[i];
        }
        if (alpha == 0.0 || beta == 0.0) continue;
        if (std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        converged = false;
        double zeta = (beta - alpha) / (2.0 * gamma);
        double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        double c = 1.0 / std::sqrt(1.0 + t * t);
        double s = c * t;
        for (int i = 0; i < n; ++i) {
          double u = cp[i], w = cq[i];
          cp[i] = c * u - s * w;
          cq[i] = s * u + c * w;
        }
        for (int i = 0; i < m; ++i) {
          double u = v[static_cast<std::size_t>(p) * m + i], w = v[static_cast<std::size_t>(q) * m + i];
          v[static_cast<std::size_t>(p) * m + i] = c * u - s * w;
          v[static_cast<std::size_t>(q) * m + i] = s * u + c * w;
        }
      }
    }
    if (converged) break;
  }

  std::vector<double> sigma(m);
  for (int j = 0; j < m; ++j) {
    double s = 0.0;
    const double* cj = col.data() + static_cast<std::size_t>(j) * n;
    for (int i = 0; i < n; ++i) s += cj[i] * cj[i];
    sigma[j] = std::sqrt(s);
  }

  std::vector<int> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&sigma](int x, int y) { return sigma[x] > sigma[y]; });

  Svd out;
  out.n = n;
  out.m = m;
  out.u.assign(static_cast<std::size_t>(n) * m, 0.0);
  out.sigma.resize(m);
  out.v.assign(static_cast<std::size_t>(m) * m, 0.0);
  const double sigma_max = sigma[order[0]];
  std::vector<int> deficient;
  for (int jj = 0; jj < m; ++jj) {
    int j = order[jj];
    double sg = sigma[j];
    // sign convention: largest-magnitude entry of v_j positive
    double best = 0.0;
    double flip = 1.0;
    for (int i = 0; i < m; ++i) {
      double e = v[static_cast<std::size_t>(j) * m + i];
      if (std::abs(e) > std::abs(best)) best = e;
    }
    if (best < 0.0) flip = -1.0;
    out.sigma[jj] = sg;
    for (int i = 0; i < m; ++i)
      out.v[static_cast<std::size_t>(i) * m + jj] = flip * v[static_cast<std::size_t>(j) * m + i];
    if (sg > 1e-13 * sigma_max) {
      const double* cj = col.data() + static_cast<std::size_t>(j) * n;
      const double inv = flip / sg;
      for (int i = 0; i < n; ++i) out.u[static_cast<std::size_t>(i) * m + jj] = cj[i] * inv;
    } else {
      deficient.push_back(jj);
    }
  }

  // complete u columns of (near-)zero singular values to an orthonormal
  // basis, as far as n allows; extras stay zero
  int completed = m - static_cast<int>(deficient.size());
  for (int jj : deficient) {
    if (completed >= n) break;
    for (int seed = 0; seed < n; ++seed) {
      std::vector<double> cand(n, 0.0);
      cand[static_cast<std::size_t>(seed)] = 1.0;
      for (int c = 0; c < m; ++c) {
        double dot = 0.0;
        for (int i = 0; i < n; ++i) dot += cand[static_cast<std::size_t>(i)] * out.u[static_cast<std::size_t>(i) * m + c];
        for (int i = 0; i < n; ++i) cand[static_cast<std::size_t>(i)] -= dot * out.u[static_cast<std::size_t>(i) * m + c];
      }
      double norm = 0.0;
      for (double x : cand) norm += x * x;
      norm = std::sqrt(norm);
      if (norm > 0.5) {  // basis vector far enough from the current span
        for (int i = 0; i < n; ++i) out.u[static_cast<std::size_t>(i) * m + jj] = cand[static_cast<std::size_t>(i)] / norm;
        ++completed;
        break;
      }
    }
  }
  return out;
}

namespace detail {
void gemm_nn_acc(const double* A, const double* B, double* C, int m, int k, int n);
}

Tensor smallest_singular_vector(const Tensor& mat) {
  if (mat.rank() != 2) throw ShapeError("smallest_singular_vector: rank-2 tensor required");
  const int n = mat.rows(), m = mat.cols();
  if (n < m - 1) throw ShapeError("smallest_singular_vector: too few rows");
  Svd svd = jacobi_svd(mat.data(), n, m);

  Tensor out = Tensor::zeros({m}, grad_enabled() && mat.requires_grad());
  for (int i = 0; i < m; ++i) out.data()[i] = svd.v[static_cast<std::size_t>(i) * m + (m - 1)];

  if (kink::enabled && m >= 2) {
    double smin = svd.sigma[m - 1], snext = svd.sigma[m - 2];
    double scale = std::max(svd.sigma[0] * svd.sigma[0], 1e-30);
    double gap = (snext * snext - smin * smin) / scale;
    kink::note(gap / 1e-3);
  }

  auto sv = std::make_shared<Svd>(std::move(svd));
  attach_node(out, {mat}, [mat, sv, n, m](const std::vector<double>& gy, GradTable& gt) {
    // v_min of M solves the smallest eigenpair of M^T M; perturbation theory
    // gives dv = sum_{j != min} v_j (v_j^T d(M^T M) v_min) / (s_min^2 - s_j^2).
    const int last = m - 1;
    std::vector<double> w(m, 0.0);
    const double smin2 = sv->sigma[last] * sv->sigma[last];
    const double floor_gap = 1e-14 * std::max(sv->sigma[0] * sv->sigma[0], 1e-30);
    for (int j = 0; j < last; ++j) {
      double dot = 0.0;
      for (int i = 0; i < m; ++i) dot += sv->v[static_cast<std::size_t>(i) * m + j] * gy[i];
      double denom = smin2 - sv->sigma[j] * sv->sigma[j];
      if (std::abs(denom) < floor_gap) denom = denom < 0.0 ? -floor_gap : floor_gap;
      double cj = dot / denom;
      for (int i = 0; i < m; ++i) w[i] += cj * sv->v[static_cast<std::size_t>(i) * m + j];
    }
    // S = w v_min^T + v_min w^T, then gM += M * S
    std::vector<double> vmin(m);
    for (int i = 0; i < m; ++i) vmin[i] = sv->v[static_cast<std::size_t>(i) * m + last];
    std::vector<double> S(static_cast<std::size_t>(m) * m);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j)
        S[static_cast<std::size_t>(i) * m + j] = w[i] * vmin[j] + vmin[i] * w[j];
    detail::gemm_nn_acc(mat.data(), S.data(), gt.accumulate(mat).data(), n, m, m);
  });
  return out;
}

}  // namespace bclnet
