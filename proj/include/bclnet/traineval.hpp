#pragma once

#include "bclnet/data.hpp"
#include "bclnet/pipeline.hpp"

namespace bclnet {

struct LossBreakdown {
  double total = 0, cls = 0, ess = 0;
  double lambda = 0;
};

// One stage's inputs to the classification loss.
struct ClsStage {
  std::vector<double> logits;
  std::vector<std::uint8_t> labels;
  std::vector<double> residuals;  // under the ground-truth essential matrix
};

// Temperature-scaled, class-balanced binary cross entropy summed over stages.
// tau_i = clamp(1 - d_i / tau_v, 0.5, 1) for inliers, 1 for outliers; positive
// items are weighted by (#neg / #pos), falling back to 1 with no positives.
double classification_loss(const std::vector<ClsStage>& stages, double tau_v);

// Mean epipolar ratio of e_hat over virtual pairs drawn from e_gt; the
// denominator uses the ground-truth epipolar lines. Pairs with degenerate
// denominators are skipped; more than half skipped is an error.
double essential_loss(const EssentialMatrix& e_hat, const EssentialMatrix& e_gt, int m_virtual,
                      std::uint64_t seed);

// Full differentiable hybrid loss for one scene.
struct LossTensors {
  Tensor total;
  LossBreakdown values;
};
LossTensors build_loss(const Model& model, const SyntheticScene& scene, double lambda,
                       int m_virtual);

struct AdamState {
  std::vector<std::vector<double>> m, v;
  long step = 0;
  void init(const ModelWeights& w);
};

// Standard Adam update with bias correction; grads align with w.entries().
void adam_step(ModelWeights& w, const std::vector<std::vector<double>>& grads, AdamState& st,
               double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

struct TrainConfig {
  int iters = 3000;
  int batch = 8;
  double lr = 1e-3;
  double lambda_value = 0.5;        // weight of the essential term after the cutoff
  double lambda_cutoff_frac = 0.1;  // fraction of iterations trained with lambda = 0
  int m_virtual = 100;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;       // 0 disables checkpoints
  std::string checkpoint_path;    // written when checkpoint_every > 0
  std::string resume_from;        // optional checkpoint to resume
};

struct TrainResult {
  std::vector<LossBreakdown> curve;  // one entry per iteration (batch mean)
};

TrainResult train(Model& model, const std::vector<SyntheticScene>& scenes, const TrainConfig& tc);

void save_checkpoint(const std::string& path, const Model& model, const AdamState& adam,
                     const Rng& sampler, int iter);
// Restores weights/optimizer/sampler in place; returns the iteration to
// resume from.
int load_checkpoint(const std::string& path, Model& model, AdamState& adam, Rng& sampler);

struct SceneAngular {
  double rot_deg = 0, trans_deg = 0;
  int n_kept = 0;
};

struct EvalReport {
  double precision = 0, recall = 0, fscore = 0;
  double map5 = 0, map20 = 0;
  std::vector<SceneAngular> scenes;
};

// Micro-averaged P/R/F over all correspondences plus pose mAP; scenes whose
// pose estimation fails count as 180-degree errors.
EvalReport evaluate(const Model& model, const std::vector<SyntheticScene>& scenes);

// Same metrics over precomputed per-scene outcomes (used by the baseline).
struct SceneOutcome {
  std::vector<double> final_probs;
  std::vector<std::uint8_t> labels;
  double rot_deg = 180.0, trans_deg = 180.0;
  int n_kept = 0;
};
EvalReport report_from_outcomes(const std::vector<SceneOutcome>& outcomes);

void write_report(const std::string& path, const EvalReport& report, const std::string& config_json);

// Classic eight-point RANSAC with consensus re-fit; deterministic per seed.
PipelineResult ransac_baseline(const CorrespondenceSet& c, int iters, double threshold,
                               std::uint64_t seed);

}  // namespace bclnet
