#pragma once

#include <string>
#include <utility>
#include <vector>

#include "bclnet/graph.hpp"
#include "bclnet/tensor.hpp"

namespace bclnet {

struct BlockConfig {
  int d = 128;        // channel width
  int k = 9;          // neighbor count
  int g_groups = 3;   // annular group count
  int clusters = 150; // differentiable pooling clusters
  int reduction = 4;  // channel bottleneck ratio

  void validate() const;
};

// Ordered parameter store; creation order is the serialization order and the
// optimizer order. Entries share buffers with the layers built over them.
class ModelWeights {
 public:
  Tensor& add(const std::string& path, std::vector<int> shape);
  Tensor& at(const std::string& path);
  const Tensor& at(const std::string& path) const;
  bool has(const std::string& path) const;
  std::size_t size() const { return entries_.size(); }
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

  // Copies values from another store with identical paths and shapes,
  // keeping this store's buffers (so bound layers see the new values).
  void assign_from(const ModelWeights& other);

  void save(const std::string& path, const std::string& config_json) const;
  static ModelWeights load(const std::string& path, std::string* config_json = nullptr);

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Builders either create freshly initialized parameters (when absent from the
// store) or bind to existing ones, verifying shapes. Initialization: weights
// uniform(-s, s) with s = 1/sqrt(fan_in), biases zero, affine scale one.

struct LinearLayer {
  Tensor w, b;
  Tensor forward(const Tensor& x) const { return shift_channels(matmul(x, w), b); }
};
LinearLayer make_linear(ModelWeights& mw, const std::string& prefix, int in, int out, Rng& init);

struct AffineLayer {
  Tensor scale, shift;
  Tensor forward(const Tensor& x) const { return shift_channels(scale_channels(x, scale), shift); }
};
AffineLayer make_affine(ModelWeights& mw, const std::string& prefix, int d);

AnnularWeights make_annular(ModelWeights& mw, const std::string& prefix, int d, int k, int groups,
                            Rng& init);

// x + f(x) with f = [linear, context_norm, affine, relu] applied twice.
struct ResnetBlock {
  LinearLayer fc1, fc2;
  AffineLayer aff1, aff2;
  Tensor forward(const Tensor& x) const;
};
ResnetBlock make_resnet(ModelWeights& mw, const std::string& prefix, int d, Rng& init);

// Channel attention over locally aggregated Q/K/V: the similarity map is
// d x d, so cost is linear in the number of correspondences.
struct BcmaBlock {
  int knn_k = 0, groups = 0;
  AffineLayer ln1, ln2;
  LinearLayer q, k, v, wp;
  AnnularWeights agg_q, agg_k, agg_v;
  Tensor alpha;  // learnable similarity scale, shape {1}
  ResnetBlock res;
  Tensor forward(const Tensor& x) const;
};
BcmaBlock make_bcma(ModelWeights& mw, const std::string& prefix, int d, int knn_k, int groups,
                    Rng& init);

// Differentiable pooling to `clusters` rows, two resnet blocks across the
// cluster axis, unpooling with the same assignment.
struct OaBlock {
  int clusters = 0;
  LinearLayer assign;
  ResnetBlock res0, res1;
  LinearLayer out;
  Tensor forward(const Tensor& x) const;
};
OaBlock make_oa(ModelWeights& mw, const std::string& prefix, int d, int clusters, Rng& init);

// Sigmoid gate from a global bottleneck vector plus a local KNN-aggregated
// map, followed by three resnet blocks.
struct BcrBlock {
  int knn_k = 0, groups = 0;
  LinearLayer down, up;
  AffineLayer mid;
  AnnularWeights agg;
  ResnetBlock res0, res1, res2;
  Tensor forward(const Tensor& x) const;
};
BcrBlock make_bcr(ModelWeights& mw, const std::string& prefix, int d, int knn_k, int groups,
                  int reduction, Rng& init);

// concat(BCMA(x), OA(x)) -> linear fuse -> BCR. With the BCMA branch
// disabled the concat half is zero, leaving a function of the OA branch.
struct BilateralModule {
  bool disable_bcma = false;
  BcmaBlock bcma;
  OaBlock oa;
  LinearLayer fuse;
  BcrBlock bcr;
  Tensor forward(const Tensor& x) const;
};
BilateralModule make_bilateral(ModelWeights& mw, const std::string& prefix, const BlockConfig& cfg,
                               bool disable_bcma, Rng& init);

}  // namespace bclnet
