#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "bclnet/data.hpp"
#include "bclnet/pipeline.hpp"

using namespace bclnet;

namespace {

PipelineConfig tiny_config() {
  PipelineConfig cfg;
  cfg.d = 8;
  cfg.k1 = 4;
  cfg.g1 = 2;
  cfg.k2 = 4;
  cfg.g2 = 2;
  cfg.clusters = 6;
  cfg.reduction = 4;
  return cfg;
}

StageLogitFn label_oracle() {
  return [](const CorrespondenceSet& c, int) {
    std::vector<double> logits(c.size());
    for (std::size_t i = 0; i < c.size(); ++i) logits[i] = c.labels[i] ? 10.0 : -10.0;
    return logits;
  };
}

}  // namespace

TEST_CASE("prune_select keeps the top half with index tie-breaks") {
  std::vector<double> logits{0.5, 0.1, 0.9, 0.5, -1.0};
  std::vector<int> kept = prune_select(logits, 0.5);  // ceil(2.5) = 3
  CHECK(kept == std::vector<int>{0, 2, 3});

  std::vector<double> equal(6, 1.0);
  CHECK(prune_select(equal, 0.5) == std::vector<int>{0, 1, 2});

  std::vector<double> seven(7, 0.0);
  CHECK(prune_select(seven, 0.5).size() == 4);  // ceil(3.5)
}

TEST_CASE("kept logits dominate dropped logits") {
  Rng rng(5);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> logits(40);
    for (double& v : logits) v = rng.uniform(-1, 1);
    std::vector<int> kept = prune_select(logits, 0.5);
    std::vector<bool> is_kept(40, false);
    for (int i : kept) is_kept[static_cast<std::size_t>(i)] = true;
    double min_kept = 1e300, max_dropped = -1e300;
    for (int i = 0; i < 40; ++i) {
      if (is_kept[static_cast<std::size_t>(i)])
        min_kept = std::min(min_kept, logits[static_cast<std::size_t>(i)]);
      else
        max_dropped = std::max(max_dropped, logits[static_cast<std::size_t>(i)]);
    }
    CHECK(min_kept >= max_dropped);
  }
}

TEST_CASE("cardinality chain: N -> ceil(N/2) -> ceil(N/4)") {
  for (int n : {32, 33, 100, 257}) {
    SyntheticScene s = generate_scene(n, 0.3, 1e-3, 50 + static_cast<std::uint64_t>(n));
    PipelineResult res = run_with_logits(s.correspondences, label_oracle(), 1e-4);
    CHECK(static_cast<int>(res.stage1.kept_indices.size()) == (n + 1) / 2);
    CHECK(static_cast<int>(res.stage2.kept_indices.size()) == ((n + 1) / 2 + 1) / 2);
    CHECK(res.final_probs.size() == static_cast<std::size_t>(n));
    CHECK(res.residuals.size() == static_cast<std::size_t>(n));
  }
  // same chain through the network path
  Model model = build_model(tiny_config(), 1);
  SyntheticScene s = generate_scene(200, 0.3, 1e-3, 51);
  PipelineResult res = run_bclnet(model, s.correspondences);
  CHECK(res.stage1.kept_indices.size() == 100);
  CHECK(res.stage2.kept_indices.size() == 50);
}

TEST_CASE("oracle logits on a clean scene recover the pose") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SyntheticScene s = generate_scene(128, 0.4, 0.0, 800 + seed);
    PipelineResult res = run_with_logits(s.correspondences, label_oracle(), 1e-4);
    auto [rot, trans] = angular_errors(res.pose, s.gt_pose);
    CHECK(rot < 0.1);
    CHECK(trans < 0.1);
    // every kept correspondence is a construction inlier
    for (int idx : res.stage2.kept_indices) CHECK(s.correspondences.labels[static_cast<std::size_t>(idx)] == 1);
  }
}

TEST_CASE("exact inliers classify as positive under the true matrix") {
  SyntheticScene s = generate_scene(64, 0.0, 0.0, 31);
  auto [probs, residuals] = full_size_verification(s.gt_e, s.correspondences, 1e-4);
  for (std::size_t i = 0; i < probs.size(); ++i) {
    CHECK(probs[i] == 1.0);
    CHECK(residuals[i] < 1e-12);
  }
}

TEST_CASE("verification classifies sentinel residuals as outliers") {
  EssentialMatrix degenerate;
  degenerate.m = {0, 0, 0, 0, 0, 0, 0, 0, 1};
  CorrespondenceSet c;
  c.items.push_back({0, 0, 0, 0});
  auto [probs, residuals] = full_size_verification(degenerate, c, 1e-4);
  CHECK(std::isinf(residuals[0]));
  CHECK(probs[0] == 0.0);
}

TEST_CASE("pipeline rejects undersized inputs") {
  Model model = build_model(tiny_config(), 2);
  SyntheticScene s = generate_scene(20, 0.0, 0.0, 3);
  CHECK_THROWS_AS(run_bclnet(model, s.correspondences), DataError);
}

TEST_CASE("pipeline is deterministic") {
  Model model = build_model(tiny_config(), 3);
  SyntheticScene s = generate_scene(120, 0.4, 1e-3, 60);
  PipelineResult a = run_bclnet(model, s.correspondences);
  PipelineResult b = run_bclnet(model, s.correspondences);
  CHECK(a.stage1.kept_indices == b.stage1.kept_indices);
  CHECK(a.stage2.kept_indices == b.stage2.kept_indices);
  for (int i = 0; i < 9; ++i) CHECK(a.e_hat.m[static_cast<std::size_t>(i)] == b.e_hat.m[static_cast<std::size_t>(i)]);
  for (std::size_t i = 0; i < a.final_probs.size(); ++i) {
    CHECK(a.final_probs[i] == b.final_probs[i]);
    CHECK(a.residuals[i] == b.residuals[i]);
  }
}

TEST_CASE("solver weight transform zeroes negative logits") {
  std::vector<double> w = solver_weights({-3.0, 0.0, 0.5, 2.0});
  CHECK(w[0] == 0.0);
  CHECK(w[1] == 0.0);
  CHECK(w[2] == doctest::Approx(std::tanh(0.5)));
  CHECK(w[3] == doctest::Approx(std::tanh(2.0)));
}

TEST_CASE("returned essential matrix lives on the manifold") {
  Model model = build_model(tiny_config(), 5);
  SyntheticScene s = generate_scene(200, 0.2, 1e-3, 70);
  PipelineResult res = run_bclnet(model, s.correspondences);
  CHECK(std::abs(res.e_hat.frobenius() - 1.0) < 1e-9);
  EssentialMatrix reproj = project_to_essential(res.e_hat);
  double diff = 0.0;
  for (int i = 0; i < 9; ++i)
    diff = std::max(diff, std::abs(std::abs(reproj.m[static_cast<std::size_t>(i)]) -
                                   std::abs(res.e_hat.m[static_cast<std::size_t>(i)])));
  CHECK(diff < 1e-9);
}

TEST_CASE("forward trace exposes differentiable stage logits") {
  Model model = build_model(tiny_config(), 5);
  SyntheticScene s = generate_scene(128, 0.3, 1e-3, 80);
  ForwardTrace tr = forward_trace(model, s.correspondences);
  CHECK(tr.logits1.shape() == std::vector<int>{128, 1});
  CHECK(tr.logits2.shape() == std::vector<int>{64, 1});
  CHECK(tr.logits2_kept.shape() == std::vector<int>{32, 1});
  CHECK(tr.keep2_orig.size() == 32);
  REQUIRE(tr.e_valid);
  CHECK(tr.e_lin.numel() == 9);
  double norm = 0.0;
  for (int i = 0; i < 9; ++i) norm += tr.e_lin[static_cast<std::size_t>(i)] * tr.e_lin[static_cast<std::size_t>(i)];
  CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("model save/load round trip preserves behaviour bit-exactly") {
  Model model = build_model(tiny_config(), 6);
  SyntheticScene s = generate_scene(80, 0.3, 1e-3, 90);
  PipelineResult before = run_bclnet(model, s.correspondences);
  const std::string path = "/tmp/bclnet_model_roundtrip.txt";
  save_model(model, path);
  Model loaded = load_model(path);
  PipelineResult after = run_bclnet(loaded, s.correspondences);
  for (int i = 0; i < 9; ++i) CHECK(before.e_hat.m[static_cast<std::size_t>(i)] == after.e_hat.m[static_cast<std::size_t>(i)]);
  CHECK(before.stage2.kept_indices == after.stage2.kept_indices);
}
