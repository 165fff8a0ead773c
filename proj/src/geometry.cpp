#include "bclnet/geometry.hpp"

#include <algorithm>
#include <cmath>

#include "bclnet/svd.hpp"

namespace bclnet {

namespace {

constexpr double kPi = 3.14159265358979323846;

using Mat3 = std::array<double, 9>;
using Vec3 = std::array<double, 3>;

Vec3 mat3_vec(const Mat3& a, const Vec3& x) {
  return {a[0] * x[0] + a[1] * x[1] + a[2] * x[2],
          a[3] * x[0] + a[4] * x[1] + a[5] * x[2],
          a[6] * x[0] + a[7] * x[1] + a[8] * x[2]};
}

Vec3 mat3t_vec(const Mat3& a, const Vec3& x) {
  return {a[0] * x[0] + a[3] * x[1] + a[6] * x[2],
          a[1] * x[0] + a[4] * x[1] + a[7] * x[2],
          a[2] * x[0] + a[5] * x[1] + a[8] * x[2]};
}

Mat3 mat3_mul(const Mat3& a, const Mat3& b) {
  Mat3 c{};
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) {
      double av = a[static_cast<std::size_t>(i) * 3 + k];
      for (int j = 0; j < 3; ++j) c[static_cast<std::size_t>(i) * 3 + j] += av * b[static_cast<std::size_t>(k) * 3 + j];
    }
  return c;
}

Mat3 mat3_transpose(const Mat3& a) {
  return {a[0], a[3], a[6], a[1], a[4], a[7], a[2], a[5], a[8]};
}

double det3(const Mat3& a) {
  return a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6]) +
         a[2] * (a[3] * a[7] - a[4] * a[6]);
}

double dot3(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

}  // namespace

void CorrespondenceSet::validate() const {
  if (!labels.empty() && labels.size() != items.size())
    throw DataError("correspondence set: label count differs from item count");
  if (!logits.empty() && logits.size() != items.size())
    throw DataError("correspondence set: logit count differs from item count");
  for (const Correspondence& c : items) {
    for (double v : {c.x, c.y, c.x2, c.y2}) {
      if (!std::isfinite(v) || std::abs(v) > 10.0)
        throw DataError("correspondence coordinates must be finite and within |v| <= 10");
    }
  }
}

double EssentialMatrix::frobenius() const {
  double s = 0.0;
  for (double v : m) s += v * v;
  return std::sqrt(s);
}

double epipolar_residual(const EssentialMatrix& e, const Correspondence& c) {
  const Vec3 p{c.x, c.y, 1.0};
  const Vec3 q{c.x2, c.y2, 1.0};
  const Vec3 ep = mat3_vec(e.m, p);
  const Vec3 etq = mat3t_vec(e.m, q);
  const double num = dot3(q, ep);
  const double denom = ep[0] * ep[0] + ep[1] * ep[1] + etq[0] * etq[0] + etq[1] * etq[1];
  if (denom < 1e-12) return std::numeric_limits<double>::infinity();
  return num * num / denom;
}

std::array<double, 9> design_row(const Correspondence& c) {
  return {c.x * c.x2, c.y * c.x2, c.x2, c.x * c.y2, c.y * c.y2, c.y2, c.x, c.y, 1.0};
}

EssentialMatrix project_to_essential(const EssentialMatrix& e) {
  Svd svd = jacobi_svd(e.m.data(), 3, 3);
  // U diag(1,1,0) V^T / sqrt(2)
  EssentialMatrix out;
  const double inv = 1.0 / std::sqrt(2.0);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 2; ++k)
        acc += svd.u[static_cast<std::size_t>(i) * 3 + k] * svd.v[static_cast<std::size_t>(j) * 3 + k];
      out.m[static_cast<std::size_t>(i) * 3 + j] = acc * inv;
    }
  return out;
}

EssentialMatrix weighted_eight_point(const CorrespondenceSet& cs, const std::vector<double>& w) {
  const std::size_t n = cs.size();
  if (w.size() != n) throw ShapeError("weighted_eight_point: weight count mismatch");
  std::size_t support = 0;
  for (double wi : w) {
    if (!std::isfinite(wi) || wi < 0.0)
      throw NumericError("weighted_eight_point: weights must be finite and nonnegative");
    if (wi > 0.0) ++support;
  }
  if (support < 8) throw NumericError("weighted_eight_point: fewer than 8 positive-weight correspondences");

  std::vector<double> design(n * 9);
  for (std::size_t i = 0; i < n; ++i) {
    std::array<double, 9> row = design_row(cs.items[i]);
    for (int j = 0; j < 9; ++j) design[i * 9 + j] = row[j] * w[i];
  }
  Svd svd = jacobi_svd(design.data(), static_cast<int>(n), 9);
  if (svd.sigma[7] <= 1e-10 * svd.sigma[0])
    throw NumericError("weighted_eight_point: degenerate configuration (rank-deficient system)");

  EssentialMatrix lin;
  for (int i = 0; i < 9; ++i) lin.m[i] = svd.v[static_cast<std::size_t>(i) * 9 + 8];
  const double norm = lin.frobenius();
  for (double& v : lin.m) v /= norm;
  return project_to_essential(lin);
}

EssentialMatrix essential_from_rt(const CameraPose& pose) {
  const Mat3 tx{0.0, -pose.t[2], pose.t[1], pose.t[2], 0.0, -pose.t[0], -pose.t[1], pose.t[0], 0.0};
  EssentialMatrix e;
  e.m = mat3_mul(tx, pose.r);
  const double norm = e.frobenius();
  if (norm == 0.0) throw NumericError("essential_from_rt: zero translation");
  for (double& v : e.m) v /= norm;
  return e;
}

EssentialMatrix sign_resolved(const EssentialMatrix& e) {
  double best = 0.0;
  for (double v : e.m)
    if (std::abs(v) > std::abs(best)) best = v;
  EssentialMatrix out = e;
  if (best < 0.0)
    for (double& v : out.m) v = -v;
  return out;
}

namespace {

// depth signs of the midpoint triangulation of (p1, p2) under (R, t);
// returns false when the rays are parallel (no vote).
bool positive_depths(const Mat3& r, const Vec3& t, const Correspondence& c) {
  const Vec3 p1{c.x, c.y, 1.0};
  const Vec3 p2{c.x2, c.y2, 1.0};
  const Vec3 a = mat3_vec(r, p1);
  const double aa = dot3(a, a), bb = dot3(p2, p2), ab = dot3(a, p2);
  const double at = dot3(a, t), bt = dot3(p2, t);
  const double det = ab * ab - aa * bb;
  if (std::abs(det) < 1e-18) return false;
  // aa*l1 - ab*l2 = -at ; ab*l1 - bb*l2 = -bt
  const double l1 = (at * bb - ab * bt) / det;
  const double l2 = (at * ab - aa * bt) / det;
  return l1 > 0.0 && l2 > 0.0;
}

}  // namespace

CameraPose decompose_essential(const EssentialMatrix& e, const CorrespondenceSet& support) {
  if (support.size() < 1) throw NumericError("decompose_essential: empty support set");
  Svd svd = jacobi_svd(e.m.data(), 3, 3);
  Mat3 u, v;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      u[static_cast<std::size_t>(i) * 3 + j] = svd.u[static_cast<std::size_t>(i) * 3 + j];
      v[static_cast<std::size_t>(i) * 3 + j] = svd.v[static_cast<std::size_t>(i) * 3 + j];
    }
  // flipping the null-space columns keeps U S V^T unchanged (sigma_3 = 0)
  if (det3(u) < 0.0)
    for (int i = 0; i < 3; ++i) u[static_cast<std::size_t>(i) * 3 + 2] = -u[static_cast<std::size_t>(i) * 3 + 2];
  if (det3(v) < 0.0)
    for (int i = 0; i < 3; ++i) v[static_cast<std::size_t>(i) * 3 + 2] = -v[static_cast<std::size_t>(i) * 3 + 2];

  const Mat3 w{0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0};
  const Mat3 vt = mat3_transpose(v);
  const Mat3 r1 = mat3_mul(mat3_mul(u, w), vt);
  const Mat3 r2 = mat3_mul(mat3_mul(u, mat3_transpose(w)), vt);
  const Vec3 tpos{u[2], u[5], u[8]};
  const Vec3 tneg{-u[2], -u[5], -u[8]};

  const std::array<std::pair<Mat3, Vec3>, 4> candidates{
      std::pair{r1, tpos}, std::pair{r1, tneg}, std::pair{r2, tpos}, std::pair{r2, tneg}};

  int best_count = 0, best_idx = -1;
  for (int ci = 0; ci < 4; ++ci) {
    int count = 0;
    for (const Correspondence& c : support.items)
      if (positive_depths(candidates[ci].first, candidates[ci].second, c)) ++count;
    if (count > best_count) {
      best_count = count;
      best_idx = ci;
    }
  }
  if (best_idx < 0) throw NumericError("decompose_essential: no candidate passes the depth test");

  CameraPose pose;
  pose.r = candidates[best_idx].first;
  const Vec3& t = candidates[best_idx].second;
  const double tn = std::sqrt(dot3(t, t));
  for (int i = 0; i < 3; ++i) pose.t[i] = t[i] / tn;
  return pose;
}

std::pair<double, double> angular_errors(const CameraPose& pred, const CameraPose& gt) {
  const Mat3 rel = mat3_mul(mat3_transpose(pred.r), gt.r);
  double tr = rel[0] + rel[4] + rel[8];
  double c = std::clamp((tr - 1.0) / 2.0, -1.0, 1.0);
  double rot = std::acos(c) * 180.0 / kPi;
  double dt = std::abs(pred.t[0] * gt.t[0] + pred.t[1] * gt.t[1] + pred.t[2] * gt.t[2]);
  double trans = std::acos(std::clamp(dt, 0.0, 1.0)) * 180.0 / kPi;
  return {rot, trans};
}

CorrespondenceSet virtual_correspondences(const EssentialMatrix& e, int m, std::uint64_t seed) {
  if (m < 1) throw ConfigError("virtual_correspondences: need at least one pair");
  Rng rng(seed);
  CorrespondenceSet out;
  out.items.reserve(m);
  for (int i = 0; i < m; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double px = rng.uniform(-1.0, 1.0), py = rng.uniform(-1.0, 1.0);
      const Vec3 line = mat3_vec(e.m, {px, py, 1.0});
      const double n2 = line[0] * line[0] + line[1] * line[1];
      if (n2 < 1e-12) continue;  // epipolar line at infinity, resample
      const double qx = rng.uniform(-1.0, 1.0), qy = rng.uniform(-1.0, 1.0);
      const double dist = (line[0] * qx + line[1] * qy + line[2]) / n2;
      out.items.push_back({px, py, qx - dist * line[0], qy - dist * line[1]});
      placed = true;
      break;
    }
    (void)placed;  // point skipped after 100 failed attempts
  }
  return out;
}

}  // namespace bclnet
