#pragma once

#include <functional>

#include "bclnet/blocks.hpp"
#include "bclnet/geometry.hpp"

namespace bclnet {

struct PipelineConfig {
  int d = 128;
  int k1 = 9, g1 = 3;       // first pruning module
  int k2 = 6, g2 = 2;       // second pruning module
  int clusters = 150;
  int reduction = 4;
  double tau_v = 1e-4;      // full-size verification threshold
  bool disable_bcma = false;

  BlockConfig stage_config(int stage) const;
  void validate() const;
  std::string to_json() const;
  static PipelineConfig from_json(const std::string& json);
};

// One pruning module: feature lift, three resnet blocks, two bilateral
// consensus modules, logit head.
struct PruningModule {
  LinearLayer lift;
  ResnetBlock res0, res1, res2;
  BilateralModule bcl0, bcl1;
  LinearLayer head;
  Tensor forward(const Tensor& features) const;  // N x in -> N x 1 logits
};

struct Model {
  PipelineConfig cfg;
  ModelWeights weights;
  PruningModule m1, m2;
};

Model build_model(const PipelineConfig& cfg, std::uint64_t init_seed);
void save_model(const Model& model, const std::string& path);
Model load_model(const std::string& path);

// Top ceil(N * ratio) indices by logit, ties to the smaller index; returned
// ascending.
std::vector<int> prune_select(const std::vector<double>& logits, double ratio);

struct PruningModuleOutput {
  std::vector<double> logits;     // one per input correspondence
  std::vector<int> kept_indices;  // ascending, size ceil(N * ratio)
  CorrespondenceSet kept_set;
};

struct PipelineResult {
  EssentialMatrix e_hat;
  CameraPose pose;
  std::vector<double> final_probs;  // 0/1 per original correspondence
  std::vector<double> residuals;    // may hold +inf sentinels
  PruningModuleOutput stage1, stage2;
};

// Differentiable pass through both pruning modules and the weighted
// eight-point solve; used by the training loss.
struct ForwardTrace {
  Tensor logits1;       // N x 1
  Tensor logits2;       // N1 x 1
  Tensor logits2_kept;  // N2 x 1, restricted to the final candidate set
  std::vector<int> keep1;       // indices into the input set
  std::vector<int> keep2;       // indices into keep1's set
  std::vector<int> keep2_orig;  // same, mapped to input indices
  Tensor e_lin;     // unit-norm linear solution, shape {9}
  bool e_valid = false;  // false when fewer than 8 positive weights
};
ForwardTrace forward_trace(const Model& model, const CorrespondenceSet& c);

// Full pipeline: prune twice, solve with relu(tanh(logit)) weights, then
// classify all original correspondences against tau_v.
PipelineResult run_bclnet(const Model& model, const CorrespondenceSet& c);

// Same pruning/solve/verification machinery driven by externally supplied
// per-stage logits (e.g. label-derived oracle scores).
using StageLogitFn =
    std::function<std::vector<double>(const CorrespondenceSet& stage_input, int stage)>;
PipelineResult run_with_logits(const CorrespondenceSet& c, const StageLogitFn& logit_fn,
                               double tau_v);

std::pair<std::vector<double>, std::vector<double>> full_size_verification(
    const EssentialMatrix& e, const CorrespondenceSet& c, double tau_v);

// Logit-to-weight transform applied before the eight-point solve.
std::vector<double> solver_weights(const std::vector<double>& logits);

}  // namespace bclnet
