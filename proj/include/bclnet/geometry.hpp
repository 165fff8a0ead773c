#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "bclnet/common.hpp"

namespace bclnet {

// One putative match: camera-normalized coordinates in image 1 and image 2.
struct Correspondence {
  double x = 0, y = 0, x2 = 0, y2 = 0;
};

struct CorrespondenceSet {
  std::vector<Correspondence> items;
  std::vector<std::uint8_t> labels;  // optional inlier flags, empty or items.size()
  std::vector<double> logits;        // optional scores, empty or items.size()

  std::size_t size() const { return items.size(); }
  bool has_labels() const { return !labels.empty(); }
  void validate() const;
};

struct EssentialMatrix {
  std::array<double, 9> m{};  // row-major

  double operator()(int i, int j) const { return m[static_cast<std::size_t>(i) * 3 + j]; }
  double frobenius() const;
};

struct CameraPose {
  std::array<double, 9> r{};  // row-major rotation
  std::array<double, 3> t{};  // unit translation
};

// Symmetric epipolar distance of c under E with p = (x, y, 1), p' = (x2, y2, 1):
// (p'^T E p)^2 over the squared line gradients in both images. Returns +inf
// when the denominator falls below 1e-12.
double epipolar_residual(const EssentialMatrix& e, const Correspondence& c);

// Row of the linear epipolar system for vec(E) row-major.
std::array<double, 9> design_row(const Correspondence& c);

// Least-squares essential matrix from weighted correspondences: each design
// row is scaled by w[i], the smallest right singular vector is reshaped to
// 3x3, normalized, and projected onto the essential manifold.
EssentialMatrix weighted_eight_point(const CorrespondenceSet& cs, const std::vector<double>& w);

// Nearest matrix with singular values (1, 1, 0) / sqrt(2).
EssentialMatrix project_to_essential(const EssentialMatrix& e);

// E proportional to [t]x R, Frobenius-normalized.
EssentialMatrix essential_from_rt(const CameraPose& pose);

// Sign chosen so the largest-magnitude entry is positive (E is defined up to
// sign; used when comparing matrices).
EssentialMatrix sign_resolved(const EssentialMatrix& e);

// Picks among the four (R, t) candidates by positive-depth count under
// midpoint triangulation of the support correspondences.
CameraPose decompose_essential(const EssentialMatrix& e, const CorrespondenceSet& support);

// (rotation, translation) angular errors in degrees; translation is
// sign-invariant.
std::pair<double, double> angular_errors(const CameraPose& pred, const CameraPose& gt);

// m pairs satisfying the epipolar constraint of e exactly: p sampled in
// [-1,1]^2, p' projected onto the epipolar line of p. Deterministic per seed.
CorrespondenceSet virtual_correspondences(const EssentialMatrix& e, int m, std::uint64_t seed);

}  // namespace bclnet
