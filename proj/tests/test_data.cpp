#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "bclnet/data.hpp"

using namespace bclnet;

TEST_CASE("generation is deterministic per seed") {
  SyntheticScene a = generate_scene(200, 0.4, 1e-3, 42);
  SyntheticScene b = generate_scene(200, 0.4, 1e-3, 42);
  for (int i = 0; i < 9; ++i) {
    CHECK(a.gt_pose.r[static_cast<std::size_t>(i)] == b.gt_pose.r[static_cast<std::size_t>(i)]);
    CHECK(a.gt_e.m[static_cast<std::size_t>(i)] == b.gt_e.m[static_cast<std::size_t>(i)]);
  }
  for (std::size_t i = 0; i < a.correspondences.size(); ++i) {
    CHECK(a.correspondences.items[i].x == b.correspondences.items[i].x);
    CHECK(a.correspondences.items[i].x2 == b.correspondences.items[i].x2);
    CHECK(a.correspondences.labels[i] == b.correspondences.labels[i]);
  }
  SyntheticScene c = generate_scene(200, 0.4, 1e-3, 43);
  CHECK(a.correspondences.items[0].x != c.correspondences.items[0].x);
}

TEST_CASE("noise-free scenes have vanishing inlier residuals") {
  SyntheticScene s = generate_scene(150, 0.0, 0.0, 7);
  for (const Correspondence& c : s.correspondences.items)
    CHECK(epipolar_residual(s.gt_e, c) < 1e-12);
}

TEST_CASE("outlier counts are exact") {
  SyntheticScene s = generate_scene(1000, 0.5, 0.0, 11);
  int inliers = 0;
  for (std::uint8_t l : s.correspondences.labels) inliers += l;
  CHECK(inliers == 500);

  SyntheticScene t = generate_scene(500, 0.6, 1e-3, 12);
  int in2 = 0;
  for (std::uint8_t l : t.correspondences.labels) in2 += l;
  CHECK(in2 == 200);
}

TEST_CASE("ground-truth matrix equals the normalized pose product") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SyntheticScene s = generate_scene(40, 0.3, 0.0, 100 + seed);
    EssentialMatrix rebuilt = essential_from_rt(s.gt_pose);
    for (int i = 0; i < 9; ++i)
      CHECK(std::abs(s.gt_e.m[static_cast<std::size_t>(i)] - rebuilt.m[static_cast<std::size_t>(i)]) < 1e-12);
    CHECK(std::abs(s.gt_e.frobenius() - 1.0) < 1e-12);
  }
}

TEST_CASE("few outliers slip under the verification threshold (Monte Carlo)") {
  // pooled outlier residual distribution across many scenes
  long outliers = 0, under = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    SyntheticScene s = generate_scene(1000, 0.5, 0.0, 9000 + seed);
    for (std::size_t i = 0; i < s.correspondences.size(); ++i) {
      if (s.correspondences.labels[i]) continue;
      ++outliers;
      if (epipolar_residual(s.gt_e, s.correspondences.items[i]) < 1e-4) ++under;
    }
  }
  REQUIRE(outliers >= 50000);
  double fraction = static_cast<double>(under) / static_cast<double>(outliers);
  INFO("outliers " << outliers << " under threshold " << under << " fraction " << fraction);
  CHECK(fraction <= 0.02);
}

TEST_CASE("thresholding residuals recovers construction labels at low noise") {
  long agree = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SyntheticScene s = generate_scene(500, 0.4, 1e-3, 300 + seed);
    for (std::size_t i = 0; i < s.correspondences.size(); ++i) {
      bool by_threshold = epipolar_residual(s.gt_e, s.correspondences.items[i]) < 1e-4;
      if (by_threshold == (s.correspondences.labels[i] != 0)) ++agree;
      ++total;
    }
  }
  CHECK(static_cast<double>(agree) / static_cast<double>(total) >= 0.99);
}

TEST_CASE("scene files round trip bit-exactly") {
  SyntheticScene s = generate_scene(64, 0.25, 1e-3, 77);
  const std::string path = "/tmp/bclnet_scene_roundtrip.txt";
  write_scene(s, path);
  SyntheticScene r = read_scene(path);
  CHECK(r.n == s.n);
  CHECK(r.outlier_rate == s.outlier_rate);
  CHECK(r.noise_sigma == s.noise_sigma);
  CHECK(r.seed == s.seed);
  for (int i = 0; i < 9; ++i) {
    CHECK(r.gt_pose.r[static_cast<std::size_t>(i)] == s.gt_pose.r[static_cast<std::size_t>(i)]);
    CHECK(r.gt_e.m[static_cast<std::size_t>(i)] == s.gt_e.m[static_cast<std::size_t>(i)]);
  }
  for (int i = 0; i < 3; ++i) CHECK(r.gt_pose.t[static_cast<std::size_t>(i)] == s.gt_pose.t[static_cast<std::size_t>(i)]);
  for (std::size_t i = 0; i < s.correspondences.size(); ++i) {
    CHECK(r.correspondences.items[i].x == s.correspondences.items[i].x);
    CHECK(r.correspondences.items[i].y == s.correspondences.items[i].y);
    CHECK(r.correspondences.items[i].x2 == s.correspondences.items[i].x2);
    CHECK(r.correspondences.items[i].y2 == s.correspondences.items[i].y2);
    CHECK(r.correspondences.labels[i] == s.correspondences.labels[i]);
  }

  // writing the parsed scene again reproduces the file byte for byte
  const std::string path2 = "/tmp/bclnet_scene_roundtrip2.txt";
  write_scene(r, path2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string c1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string c2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(c1 == c2);
}

TEST_CASE("malformed scene files raise parse errors, not crashes") {
  SyntheticScene s = generate_scene(16, 0.0, 0.0, 5);
  const std::string path = "/tmp/bclnet_scene_trunc.txt";
  write_scene(s, path);

  // truncate after a few lines
  std::ifstream in(path);
  std::string keep, line;
  for (int i = 0; i < 5 && std::getline(in, line); ++i) keep += line + "\n";
  in.close();
  std::ofstream out(path, std::ios::trunc);
  out << keep;
  out.close();
  CHECK_THROWS_AS(read_scene(path), DataError);

  std::ofstream bad("/tmp/bclnet_scene_badver.txt");
  bad << "bclnet-scene v9\n";
  bad.close();
  CHECK_THROWS_AS(read_scene("/tmp/bclnet_scene_badver.txt"), DataError);

  CHECK_THROWS_AS(read_scene("/tmp/bclnet_scene_does_not_exist.txt"), DataError);
}

TEST_CASE("17-significant-digit decimals reproduce doubles exactly") {
  Rng rng(123);
  for (int i = 0; i < 1000000; ++i) {
    double v;
    switch (i % 4) {
      case 0: v = rng.uniform(-1.0, 1.0); break;
      case 1: v = rng.normal() * 1e6; break;
      case 2: v = rng.normal() * 1e-6; break;
      default: v = rng.normal(); break;
    }
    double parsed = std::strtod(format_double(v).c_str(), nullptr);
    CHECK(parsed == v);
  }
}

TEST_CASE("manifest round trip") {
  namespace fs = std::filesystem;
  const std::string dir = "/tmp/bclnet_manifest_test";
  fs::create_directories(dir);
  DatasetManifest m;
  m.scenes = 3;
  m.n = 64;
  m.outlier_rate = 0.4;
  m.noise_sigma = 1e-3;
  m.seed = 17;
  m.train_files = {"scene_00000.txt", "scene_00001.txt"};
  m.test_files = {"scene_00002.txt"};
  m.config_json = "{\"d\":32}";
  write_manifest(dir, m);
  DatasetManifest r = read_manifest(dir);
  CHECK(r.scenes == 3);
  CHECK(r.n == 64);
  CHECK(r.outlier_rate == 0.4);
  CHECK(r.noise_sigma == 1e-3);
  CHECK(r.seed == 17);
  CHECK(r.train_files == m.train_files);
  CHECK(r.test_files == m.test_files);
  CHECK(r.config_json == "{\"d\":32}");

  for (std::uint64_t i = 0; i < 3; ++i)
    write_scene(generate_scene(64, 0.4, 1e-3, 17 + i), dir + "/scene_0000" + std::to_string(i) + ".txt");
  Dataset ds = load_dataset(dir);
  CHECK(ds.train.size() == 2);
  CHECK(ds.test.size() == 1);
  CHECK(ds.train[0].n == 64);
}

TEST_CASE("generator parameter validation") {
  CHECK_THROWS_AS(generate_scene(0, 0.0, 0.0, 1), ConfigError);
  CHECK_THROWS_AS(generate_scene(10, 1.0, 0.0, 1), ConfigError);
  CHECK_THROWS_AS(generate_scene(10, -0.1, 0.0, 1), ConfigError);
  CHECK_THROWS_AS(generate_scene(10, 0.0, -1.0, 1), ConfigError);
}
