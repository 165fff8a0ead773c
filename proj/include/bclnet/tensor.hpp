#pragma once

#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "bclnet/common.hpp"

namespace bclnet {

class Tensor;

// Gradients live outside the tensors, keyed by the tensor's data buffer.
// Each backward pass owns its own table, so concurrent passes over shared
// (read-only) weights never touch each other.
class GradTable {
 public:
  std::vector<double>& accumulate(const Tensor& t);
  const std::vector<double>* find(const Tensor& t) const;
  const std::vector<double>* find_key(const void* key) const;

 private:
  std::unordered_map<const void*, std::vector<double>> grads_;
};

struct Node {
  const void* out_key = nullptr;
  std::size_t out_numel = 0;
  std::vector<Tensor> parents;
  // Receives the output gradient and accumulates into the parents' entries.
  std::function<void(const std::vector<double>& gy, GradTable& gt)> backward;
};

// Dense row-major array of doubles with an optional autodiff node. Values are
// immutable once built by an operation; copies share the underlying buffer.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor from(std::vector<int> shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double v);
  static Tensor uniform(std::vector<int> shape, Rng& rng, double lo, double hi,
                        bool requires_grad = false);

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  int rows() const { return shape_.at(0); }
  int cols() const { return shape_.at(1); }
  std::size_t numel() const { return data_ ? data_->size() : 0; }
  bool defined() const { return static_cast<bool>(data_); }

  double* data() { return data_->data(); }
  const double* data() const { return data_->data(); }
  std::vector<double>& values() { return *data_; }
  const std::vector<double>& values() const { return *data_; }

  double operator()(int i, int j) const { return (*data_)[static_cast<std::size_t>(i) * cols() + j]; }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double item() const;

  bool requires_grad() const { return requires_grad_; }
  const void* key() const { return data_.get(); }

  // Same buffer under a new shape; gradient flows through unchanged.
  Tensor reshaped(std::vector<int> shape) const;

  std::shared_ptr<Node> node;

 private:
  std::vector<int> shape_;
  std::shared_ptr<std::vector<double>> data_;
  bool requires_grad_ = false;
};

// Thread-local switch; when false, operations skip node construction.
bool grad_enabled();
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();

 private:
  bool prev_;
};

// Seeds d(root)/d(root) = 1 and propagates in reverse topological order.
// The root must be scalar.
void backward(const Tensor& root, GradTable& table);

// Attaches a custom backward to a freshly built tensor (no-op unless the
// tensor requires grad). Used by operations defined outside this module.
void attach_node(Tensor& out, std::vector<Tensor> parents,
                 std::function<void(const std::vector<double>&, GradTable&)> fn);

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double s);
Tensor relu(const Tensor& x);
Tensor tanh_op(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// out = x * s[0] with a learnable scalar s (shape {1}).
Tensor scale_scalar(const Tensor& x, const Tensor& s);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// ---- shape / gather ----
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor gather_rows(const Tensor& x, const std::vector<int>& index);
// out[i, :] = x[i, :] * w[i] for w of shape {n, 1}; gradient flows to both.
Tensor scale_rows(const Tensor& x, const Tensor& w);

// ---- reductions / broadcasts ----
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor mean_rows(const Tensor& x);             // {n,d} -> {1,d}
Tensor broadcast_rows(const Tensor& v, int n); // {1,d} -> {n,d}

// ---- normalization / attention ----
Tensor softmax(const Tensor& x, int axis);
// Per-channel standardization across rows (the set dimension), eps = 1e-5.
Tensor context_norm(const Tensor& x);
// Per-row standardization across channels, eps = 1e-5 (affine applied via
// scale_channels/shift_channels).
Tensor layer_norm_core(const Tensor& x);
Tensor scale_channels(const Tensor& x, const Tensor& gamma); // gamma {1,d}
Tensor shift_channels(const Tensor& x, const Tensor& beta);  // beta {1,d}

// Mean over items of weight[i] * BCE(sigmoid(z[i]), y[i]); y and weight are
// plain buffers (no gradient).
Tensor bce_with_logits_mean(const Tensor& z, const std::vector<double>& y,
                            const std::vector<double>& weight);

// Right singular vector of the smallest singular value of an n x m matrix
// (n >= m), sign-fixed so the largest-magnitude entry is positive. Backward
// uses the full singular system of the input.
Tensor smallest_singular_vector(const Tensor& m);

// ---- gradient checking ----
// Builds a scalar probe dot(f(inputs), r) with a fixed random projection r,
// then compares analytic gradients of every entry of every input against
// central finite differences. Returns the max relative error
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
double check_gradient(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                      std::vector<Tensor> inputs, double step,
                      std::uint64_t probe_seed = 12345);

// Single-input convenience matching the differentiation-contract harness.
double check_gradient(const std::function<Tensor(const Tensor&)>& op,
                      const Tensor& point, double step);

// Draws random inputs from rng until a forward pass of f keeps a safe margin
// from every non-differentiable boundary, then runs check_gradient.
double check_gradient_rejection(
    const std::function<Tensor(const std::vector<Tensor>&)>& f,
    const std::vector<std::vector<int>>& shapes, Rng& rng, double step,
    double lo = -1.0, double hi = 1.0);

}  // namespace bclnet
