#pragma once

#include <vector>

#include "bclnet/tensor.hpp"

namespace bclnet {

// k nearest neighbors per anchor under Euclidean distance, self excluded,
// ties broken by smaller index. Rows sorted ascending by (distance, index).
struct KnnGraph {
  int n = 0, k = 0;
  std::vector<int> neighbor_index;    // n * k
  std::vector<double> neighbor_dist;  // n * k
};

KnnGraph knn_search(const Tensor& features, int k);

// Edge vectors [z_i, z_i - z_j] for every neighbor j of anchor i, stored as
// an (n*k) x 2d tensor with rows in anchor-major, nearest-first order.
struct EdgeFeatures {
  int n = 0, k = 0, d = 0;
  Tensor values;
};

EdgeFeatures edge_features(const Tensor& features, const KnnGraph& g);

struct AnnularWeights {
  Tensor w1, b1;  // {2d * k/g, d}, {1, d}
  Tensor w2, b2;  // {g * d, d},   {1, d}
};

// Splits the k (distance-ascending) neighbors into `groups` contiguous
// affinity groups, maps each group's stacked edge vectors through the first
// learnable layer (+ context norm + relu), then fuses the group outputs with
// the second layer. Returns an n x d tensor.
Tensor annular_aggregate(const EdgeFeatures& edges, int groups, const AnnularWeights& w);

// Freezes the data-dependent discrete choices of a forward pass (neighbor
// graphs, pruning selections) so repeated evaluations differentiate only the
// smooth compute paths: that is exactly the function the analytic gradient
// describes, since index selection itself carries no gradient. record()
// captures the choices of the next pass; replay() rewinds for a pass that
// reuses them in call order; off() restores normal behaviour. Thread-local.
struct DecisionFreeze {
  static void record();
  static void replay();
  static void off();
};

namespace freeze_detail {
// 0 = off, 1 = recording, 2 = replaying
int mode();
void push_graph(const KnnGraph& g);
const KnnGraph& next_graph();
void push_selection(const std::vector<int>& sel);
const std::vector<int>& next_selection();
}  // namespace freeze_detail

}  // namespace bclnet
