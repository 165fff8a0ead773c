#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bclnet/geometry.hpp"

namespace bclnet {

struct SyntheticScene {
  CorrespondenceSet correspondences;  // labels set by construction
  CameraPose gt_pose;
  EssentialMatrix gt_e;
  int n = 0;
  double outlier_rate = 0.0;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;
};

// Random relative pose (axis-angle rotation up to 30 degrees, unit
// translation), 3D points in a depth 4-8 frustum projected into both views.
// Inlier image-2 points get Gaussian noise; an outlier_rate fraction of
// image-2 points is replaced with uniform samples in [-1,1]^2.
SyntheticScene generate_scene(int n, double outlier_rate, double noise_sigma, std::uint64_t seed);

// Line-oriented text format, 17-significant-digit decimals; byte-exact round
// trip. Unknown versions and malformed lines raise DataError.
void write_scene(const SyntheticScene& scene, const std::string& path);
SyntheticScene read_scene(const std::string& path);

struct DatasetManifest {
  int scenes = 0;
  int n = 0;
  double outlier_rate = 0.0;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::string> train_files;  // relative to the dataset directory
  std::vector<std::string> test_files;
  std::string config_json;  // effective run configuration, echoed through
};

void write_manifest(const std::string& dir, const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::string& dir);

struct Dataset {
  std::vector<SyntheticScene> train, test;
  DatasetManifest manifest;
};

Dataset load_dataset(const std::string& dir);

}  // namespace bclnet
