#include "bclnet/tensor.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <unordered_set>

namespace bclnet {

// ---------------------------------------------------------------------------
// common.hpp definitions
// ---------------------------------------------------------------------------

namespace flops {
thread_local bool enabled = false;
thread_local std::uint64_t count = 0;
}  // namespace flops

namespace kink {
thread_local bool enabled = false;
thread_local double min_margin = std::numeric_limits<double>::infinity();
}  // namespace kink

static thread_local int g_serial_depth = 0;

SerialScope::SerialScope() { ++g_serial_depth; }
SerialScope::~SerialScope() { --g_serial_depth; }

int max_threads() {
  static const int cached = [] {
    if (const char* env = std::getenv("BILATERAL_PRUNE_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return v;
    }
    unsigned hc = std::thread::hardware_concurrency();
    return hc > 0 ? static_cast<int>(hc) : 1;
  }();
  return cached;
}

void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn,
                  std::size_t grain) {
  std::size_t threads = (g_serial_depth > 0) ? 1 : static_cast<std::size_t>(max_threads());
  if (grain < 1) grain = 1;
  std::size_t chunks = std::min(threads, (n + grain - 1) / grain);
  if (chunks <= 1 || n == 0) {
    if (n > 0) fn(0, n);
    return;
  }
  std::size_t per = (n + chunks - 1) / chunks;
  std::vector<std::thread> pool;
  pool.reserve(chunks - 1);
  for (std::size_t c = 1; c < chunks; ++c) {
    std::size_t b = c * per, e = std::min(n, b + per);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] {
      SerialScope scope;
      fn(b, e);
    });
  }
  {
    SerialScope scope;
    fn(0, std::min(per, n));
  }
  for (auto& t : pool) t.join();
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Tensor basics
// ---------------------------------------------------------------------------

static thread_local bool g_grad_enabled = true;

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

static std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("tensor extents must be positive");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::make_shared<std::vector<double>>(shape_numel(t.shape_), 0.0);
  t.requires_grad_ = requires_grad && g_grad_enabled;
  return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) throw ShapeError("value count does not match shape");
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::make_shared<std::vector<double>>(std::move(values));
  t.requires_grad_ = requires_grad && g_grad_enabled;
  return t;
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

Tensor Tensor::uniform(std::vector<int> shape, Rng& rng, double lo, double hi, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() requires a scalar tensor");
  return (*data_)[0];
}

Tensor Tensor::reshaped(std::vector<int> shape) const {
  if (shape_numel(shape) != numel()) throw ShapeError("reshape changes element count");
  Tensor t = *this;
  t.shape_ = std::move(shape);
  return t;
}

std::vector<double>& GradTable::accumulate(const Tensor& t) {
  auto it = grads_.find(t.key());
  if (it == grads_.end()) it = grads_.emplace(t.key(), std::vector<double>(t.numel(), 0.0)).first;
  return it->second;
}

const std::vector<double>* GradTable::find(const Tensor& t) const {
  auto it = grads_.find(t.key());
  return it == grads_.end() ? nullptr : &it->second;
}

const std::vector<double>* GradTable::find_key(const void* key) const {
  auto it = grads_.find(key);
  return it == grads_.end() ? nullptr : &it->second;
}

static void attach(Tensor& out, std::vector<Tensor> parents,
                   std::function<void(const std::vector<double>&, GradTable&)> fn) {
  if (!out.requires_grad()) return;
  out.node = std::make_shared<Node>();
  out.node->out_key = out.key();
  out.node->out_numel = out.numel();
  out.node->parents = std::move(parents);
  out.node->backward = std::move(fn);
}

void attach_node(Tensor& out, std::vector<Tensor> parents,
                 std::function<void(const std::vector<double>&, GradTable&)> fn) {
  attach(out, std::move(parents), std::move(fn));
}

static bool any_grad(const Tensor& a) { return g_grad_enabled && a.requires_grad(); }
static bool any_grad(const Tensor& a, const Tensor& b) {
  return g_grad_enabled && (a.requires_grad() || b.requires_grad());
}

void backward(const Tensor& root, GradTable& table) {
  if (root.numel() != 1) throw ShapeError("backward root must be scalar");
  table.accumulate(root)[0] += 1.0;
  if (!root.node) return;

  // reverse post-order over the node DAG = consumers before producers
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  struct Frame {
    Node* n;
    std::size_t next;
  };
  std::vector<Frame> stack{{root.node.get(), 0}};
  visited.insert(root.node.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      Node* p = f.n->parents[f.next++].node.get();
      if (p && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    const std::vector<double>* gy = table.find_key(n->out_key);
    if (!gy) continue;
    n->backward(*gy, table);
  }
}

// ---------------------------------------------------------------------------
// kernels
// ---------------------------------------------------------------------------

namespace detail {

// C (m x n) += A (m x k) * B (k x n)
void gemm_nn_acc(const double* A, const double* B, double* C, int m, int k, int n) {
  flops::add(2ull * m * n * k);
  for (int i = 0; i < m; ++i) {
    const double* arow = A + static_cast<std::size_t>(i) * k;
    double* crow = C + static_cast<std::size_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      double a = arow[l];
      if (a == 0.0) continue;
      const double* brow = B + static_cast<std::size_t>(l) * n;
      for (int j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

// C (k x n) += A^T (A is m x k) * B (m x n)
void gemm_tn_acc(const double* A, const double* B, double* C, int m, int k, int n) {
  flops::add(2ull * m * n * k);
  for (int i = 0; i < m; ++i) {
    const double* arow = A + static_cast<std::size_t>(i) * k;
    const double* brow = B + static_cast<std::size_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      double a = arow[l];
      if (a == 0.0) continue;
      double* crow = C + static_cast<std::size_t>(l) * n;
      for (int j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

void transpose_raw(const double* src, double* dst, int m, int n) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) dst[static_cast<std::size_t>(j) * m + i] = src[static_cast<std::size_t>(i) * n + j];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

static void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) throw ShapeError(std::string(op) + ": shape mismatch");
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape(), any_grad(a, b));
  const std::size_t n = out.numel();
  flops::add(n);
  const double *pa = a.data(), *pb = b.data();
  double* po = out.data();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  attach(out, {a, b}, [a, b](const std::vector<double>& gy, GradTable& gt) {
    if (a.requires_grad()) {
      auto& ga = gt.accumulate(a);
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
    }
    if (b.requires_grad()) {
      auto& gb = gt.accumulate(b);
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i];
    }
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape(), any_grad(a, b));
  const std::size_t n = out.numel();
  flops::add(n);
  const double *pa = a.data(), *pb = b.data();
  double* po = out.data();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  attach(out, {a, b}, [a, b](const std::vector<double>& gy, GradTable& gt) {
    if (a.requires_grad()) {
      auto& ga = gt.accumulate(a);
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
    }
    if (b.requires_grad()) {
      auto& gb = gt.accumulate(b);
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] -= gy[i];
    }
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape(), any_grad(a, b));
  const std::size_t n = out.numel();
  flops::add(n);
  const double *pa = a.data(), *pb = b.data();
  double* po = out.data();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  attach(out, {a, b}, [a, b](const std::vector<double>& gy, GradTable& gt) {
    if (a.requires_grad()) {
      auto& ga = gt.accumulate(a);
      const double* pb2 = b.data();
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * pb2[i];
    }
    if (b.requires_grad()) {
      auto& gb = gt.accumulate(b);
      const double* pa2 = a.data();
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * pa2[i];
    }
  });
  return out;
}

Tensor scalar_mul(const Tensor& a, double s) {
  Tensor out = Tensor::zeros(a.shape(), any_grad(a));
  const std::size_t n = out.numel();
  flops::add(n);
  const double* pa = a.data();
  double* po = out.data();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * s;
  attach(out, {a}, [a, s](const std::vector<double>& gy, GradTable& gt) {
    auto& ga = gt.accumulate(a);
    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * s;
  });
  return out;
}

Tensor scale_scalar(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw ShapeError("scale_scalar: scale must be a single value");
  const double sv = s[0];
  Tensor out = Tensor::zeros(x.shape(), any_grad(x, s));
  const std::size_t n = out.numel();
  flops::add(n);
  const double* px = x.data();
  double* po = out.data();
  for (std::size_t i = 0; i < n; ++i) po[i] = px[i] * sv;
  attach(out, {x, s}, [x, s, sv](const std::vector<double>& gy, GradTable& gt) {
    if (x.requires_grad()) {
      auto& gx = gt.accumulate(x);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * sv;
    }
    if (s.requires_grad()) {
      auto& gs = gt.accumulate(s);
      const double* px2 = x.data();
      double acc = 0.0;
      for (std::size_t i = 0; i < gy.size(); ++i) acc += gy[i] * px2[i];
      gs[0] += acc;
    }
  });
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape(), any_grad(x));
  const std::size_t n = out.numel();
  flops::add(n);
  const double* px = x.data();
  double* po = out.data();
  for (std::size_t i = 0; i < n; ++i) po[i] = px[i] > 0.0 ? px[i] : 0.0;
  if (kink::enabled) {
    double m = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) m = std::min(m, std::abs(px[i]));
    kink::note(m / 2e-5);
  }
  attach(out, {x}, [x](const std::vector<double>& gy, GradTable& gt) {
    auto& gx = gt.accumulate(x);
    const double* px2 = x.data();
    for (std::size_t i = 0; i < gy.size(); ++i)
      if (px2[i] > 0.0) gx[i] += gy[i];
  });
  return out;
}

Tensor tanh_op(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape(), any_grad(x));
  const std::size_t n = out.numel();
  flops::add(4 * n);
  const double* px = x.data();
  double* po = out.data();
  for (std::size_t i = 0; i < n; ++i) po[i] = std::tanh(px[i]);
  attach(out, {x, out}, [x, out](const std::vector<double>& gy, GradTable& gt) {
    auto& gx = gt.accumulate(x);
    const double* py = out.data();
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * (1.0 - py[i] * py[i]);
  });
  return out;
}

static double sigmoid_scalar(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  double e = std::exp(v);
  return e / (1.0 + e);
}

Tensor sigmoid(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape(), any_grad(x));
  const std::size_t n = out.numel();
  flops::add(4 * n);
  const double* px = x.data();
  double* po = out.data();
  for (std::size_t i = 0; i < n; ++i) po[i] = sigmoid_scalar(px[i]);
  attach(out, {x, out}, [x, out](const std::vector<double>& gy, GradTable& gt) {
    auto& gx = gt.accumulate(x);
    const double* py = out.data();
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * py[i] * (1.0 - py[i]);
  });
  return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul: rank-2 tensors required");
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner extents disagree");
  const int m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = Tensor::zeros({m, n}, any_grad(a, b));
  detail::gemm_nn_acc(a.data(), b.data(), out.data(), m, k, n);
  attach(out, {a, b}, [a, b, m, k, n](const std::vector<double>& gy, GradTable& gt) {
    if (a.requires_grad()) {
      std::vector<double> bt(static_cast<std::size_t>(k) * n);
      detail::transpose_raw(b.data(), bt.data(), k, n);
      detail::gemm_nn_acc(gy.data(), bt.data(), gt.accumulate(a).data(), m, n, k);
    }
    if (b.requires_grad()) {
      detail::gemm_tn_acc(a.data(), gy.data(), gt.accumulate(b).data(), m, k, n);
    }
  });
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: rank-2 tensor required");
  const int m = a.rows(), n = a.cols();
  Tensor out = Tensor::zeros({n, m}, any_grad(a));
  detail::transpose_raw(a.data(), out.data(), m, n);
  attach(out, {a}, [a, m, n](const std::vector<double>& gy, GradTable& gt) {
    auto& ga = gt.accumulate(a);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) ga[static_cast<std::size_t>(j) * n + i] += gy[static_cast<std::size_t>(i) * m + j];
  });
  return out;
}

// ---------------------------------------------------------------------------
// shape / gather
// ---------------------------------------------------------------------------

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows())
    throw ShapeError("concat_cols: row counts disagree");
  const int n = a.rows(), p = a.cols(), q = b.cols();
  Tensor out = Tensor::zeros({n, p + q}, any_grad(a, b));
  double* po = out.data();
  const double *pa = a.data(), *pb = b.data();
  for (int i = 0; i < n; ++i) {
    std::memcpy(po + static_cast<std::size_t>(i) * (p + q), pa + static_cast<std::size_t>(i) * p,
                sizeof(double) * p);
    std::memcpy(po + static_cast<std::size_t>(i) * (p + q) + p, pb + static_cast<std::size_t>(i) * q,
                sizeof(double) * q);
  }
  attach(out, {a, b}, [a, b, n, p, q](const std::vector<double>& gy, GradTable& gt) {
    if (a.requires_grad()) {
      auto& ga = gt.accumulate(a);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < p; ++j)
          ga[static_cast<std::size_t>(i) * p + j] += gy[static_cast<std::size_t>(i) * (p + q) + j];
    }
    if (b.requires_grad()) {
      auto& gb = gt.accumulate(b);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < q; ++j)
          gb[static_cast<std::size_t>(i) * q + j] += gy[static_cast<std::size_t>(i) * (p + q) + p + j];
    }
  });
  return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& index) {
  if (x.rank() != 2) throw ShapeError("gather_rows: rank-2 tensor required");
  const int n = x.rows(), d = x.cols();
  for (int idx : index)
    if (idx < 0 || idx >= n) throw ShapeError("gather_rows: row index out of range");
  const int m = static_cast<int>(index.size());
  Tensor out = Tensor::zeros({m, d}, any_grad(x));
  flops::add(out.numel());
  const double* px = x.data();
  double* po = out.data();
  for (int r = 0; r < m; ++r)
    std::memcpy(po + static_cast<std::size_t>(r) * d, px + static_cast<std::size_t>(index[r]) * d,
                sizeof(double) * d);
  attach(out, {x}, [x, index, d](const std::vector<double>& gy, GradTable& gt) {
    auto& gx = gt.accumulate(x);
    for (std::size_t r = 0; r < index.size(); ++r) {
      double* dst = gx.data() + static_cast<std::size_t>(index[r]) * d;
      const double* src = gy.data() + r * d;
      for (int j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
  return out;
}

Tensor scale_rows(const Tensor& x, const Tensor& w) {
  if (x.rank() != 2 || w.rank() != 2 || w.cols() != 1 || w.rows() != x.rows())
    throw ShapeError("scale_rows: weight must be {rows,1}");
  const int n = x.rows(), d = x.cols();
  Tensor out = Tensor::zeros({n, d}, any_grad(x, w));
  flops::add(out.numel());
  const double *px = x.data(), *pw = w.data();
  double* po = out.data();
  for (int i = 0; i < n; ++i) {
    const double wi = pw[i];
    for (int j = 0; j < d; ++j) po[static_cast<std::size_t>(i) * d + j] = px[static_cast<std::size_t>(i) * d + j] * wi;
  }
  attach(out, {x, w}, [x, w, n, d](const std::vector<double>& gy, GradTable& gt) {
    if (x.requires_grad()) {
      auto& gx = gt.accumulate(x);
      const double* pw2 = w.data();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
          gx[static_cast<std::size_t>(i) * d + j] += gy[static_cast<std::size_t>(i) * d + j] * pw2[i];
    }
    if (w.requires_grad()) {
      auto& gw = gt.accumulate(w);
      const double* px2 = x.data();
      for (int i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int j = 0; j < d; ++j)
          acc += gy[static_cast<std::size_t>(i) * d + j] * px2[static_cast<std::size_t>(i) * d + j];
        gw[i] += acc;
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// reductions / broadcasts
// ---------------------------------------------------------------------------

Tensor sum_all(const Tensor& x) {
  Tensor out = Tensor::zeros({1}, any_grad(x));
  flops::add(x.numel());
  double acc = 0.0;
  const double* px = x.data();
  for (std::size_t i = 0; i < x.numel(); ++i) acc += px[i];
  out.data()[0] = acc;
  attach(out, {x}, [x](const std::vector<double>& gy, GradTable& gt) {
    auto& gx = gt.accumulate(x);
    for (double& g : gx) g += gy[0];
  });
  return out;
}

Tensor mean_all(const Tensor& x) {
  const double inv = 1.0 / static_cast<double>(x.numel());
  Tensor out = Tensor::zeros({1}, any_grad(x));
  flops::add(x.numel());
  double acc = 0.0;
  const double* px = x.data();
  for (std::size_t i = 0; i < x.numel(); ++i) acc += px[i];
  out.data()[0] = acc * inv;
  attach(out, {x}, [x, inv](const std::vector<double>& gy, GradTable& gt) {
    auto& gx = gt.accumulate(x);
    for (double& g : gx) g += gy[0] * inv;
  });
  return out;
}

Tensor mean_rows(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("mean_rows: rank-2 tensor required");
  const int n = x.rows(), d = x.cols();
  const double inv = 1.0 / n;
  Tensor out = Tensor::zeros({1, d}, any_grad(x));
  flops::add(x.numel());
  const double* px = x.data();
  double* po = out.data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) po[j] += px[static_cast<std::size_t>(i) * d + j];
  for (int j = 0; j < d; ++j) po[j] *= inv;
  attach(out, {x}, [x, n, d, inv](const std::vector<double>& gy, GradTable& gt) {
    auto& gx = gt.accumulate(x);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) gx[static_cast<std::size_t>(i) * d + j] += gy[j] * inv;
  });
  return out;
}

Tensor broadcast_rows(const Tensor& v, int n) {
  if (v.rank() != 2 || v.rows() != 1) throw ShapeError("broadcast_rows: {1,d} tensor required");
  const int d = v.cols();
  Tensor out = Tensor::zeros({n, d}, any_grad(v));
  flops::add(out.numel());
  const double* pv = v.data();
  double* po = out.data();
  for (int i = 0; i < n; ++i) std::memcpy(po + static_cast<std::size_t>(i) * d, pv, sizeof(double) * d);
  attach(out, {v}, [v, n, d](const std::vector<double>& gy, GradTable& gt) {
    auto& gv = gt.accumulate(v);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) gv[j] += gy[static_cast<std::size_t>(i) * d + j];
  });
  return out;
}

// ---------------------------------------------------------------------------
// normalization / attention
// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
  std::vector<int> shape = x.shape();
  int rows, cols;
  if (x.rank() == 1) {
    rows = 1;
    cols = x.dim(0);
    axis = 1;
  } else if (x.rank() == 2) {
    rows = x.rows();
    cols = x.cols();
  } else {
    throw ShapeError("softmax: rank-1 or rank-2 tensor required");
  }
  if (axis != 0 && axis != 1) throw ShapeError("softmax: axis out of range");
  Tensor out = Tensor::zeros(shape, any_grad(x));
  flops::add(5 * x.numel());
  const double* px = x.data();
  double* po = out.data();
  const int nvec = axis == 1 ? rows : cols;
  const int len = axis == 1 ? cols : rows;
  const int vstride = axis == 1 ? cols : 1;
  const int estride = axis == 1 ? 1 : cols;
  for (int v = 0; v < nvec; ++v) {
    const double* src = px + static_cast<std::size_t>(v) * vstride;
    double* dst = po + static_cast<std::size_t>(v) * vstride;
    double mx = -std::numeric_limits<double>::infinity();
    for (int e = 0; e < len; ++e) mx = std::max(mx, src[static_cast<std::size_t>(e) * estride]);
    double sum = 0.0;
    for (int e = 0; e < len; ++e) {
      double ev = std::exp(src[static_cast<std::size_t>(e) * estride] - mx);
      dst[static_cast<std::size_t>(e) * estride] = ev;
      sum += ev;
    }
    double inv = 1.0 / sum;
    for (int e = 0; e < len; ++e) dst[static_cast<std::size_t>(e) * estride] *= inv;
  }
  attach(out, {x, out}, [x, out, nvec, len, vstride, estride](const std::vector<double>& gy, GradTable& gt) {
    auto& gx = gt.accumulate(x);
    const double* py = out.data();
    for (int v = 0; v < nvec; ++v) {
      const std::size_t base = static_cast<std::size_t>(v) * vstride;
      double dot = 0.0;
      for (int e = 0; e < len; ++e) {
        std::size_t idx = base + static_cast<std::size_t>(e) * estride;
        dot += gy[idx] * py[idx];
      }
      for (int e = 0; e < len; ++e) {
        std::size_t idx = base + static_cast<std::size_t>(e) * estride;
        gx[idx] += py[idx] * (gy[idx] - dot);
      }
    }
  });
  return out;
}

static constexpr double kNormEps = 1e-5;

Tensor context_norm(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("context_norm: rank-2 tensor required");
  const int n = x.rows(), d = x.cols();
  if (n < 2) throw ShapeError("context_norm: at least two rows required");
  Tensor out = Tensor::zeros({n, d}, any_grad(x));
  flops::add(8 * x.numel());
  const double* px = x.data();
  double* po = out.data();
  std::vector<double> mean(d, 0.0), var(d, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) mean[j] += px[static_cast<std::size_t>(i) * d + j];
  for (int j = 0; j < d; ++j) mean[j] /= n;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) {
      double c = px[static_cast<std::size_t>(i) * d + j] - mean[j];
      var[j] += c * c;
    }
  auto invstd = std::make_shared<std::vector<double>>(d);
  for (int j = 0; j < d; ++j) (*invstd)[j] = 1.0 / std::sqrt(var[j] / n + kNormEps);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      po[static_cast<std::size_t>(i) * d + j] = (px[static_cast<std::size_t>(i) * d + j] - mean[j]) * (*invstd)[j];
  attach(out, {x, out}, [x, out, invstd, n, d](const std::vector<double>& gy, GradTable& gt) {
    auto& gx = gt.accumulate(x);
    const double* py = out.data();
    std::vector<double> gmean(d, 0.0), gydot(d, 0.0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) {
        std::size_t idx = static_cast<std::size_t>(i) * d + j;
        gmean[j] += gy[idx];
        gydot[j] += gy[idx] * py[idx];
      }
    for (int j = 0; j < d; ++j) {
      gmean[j] /= n;
      gydot[j] /= n;
    }
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) {
        std::size_t idx = static_cast<std::size_t>(i) * d + j;
        gx[idx] += (*invstd)[j] * (gy[idx] - gmean[j] - py[idx] * gydot[j]);
      }
  });
  return out;
}

Tensor layer_norm_core(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("layer_norm: rank-2 tensor required");
  const int n = x.rows(), d = x.cols();
  if (d < 2) throw ShapeError("layer_norm: at least two channels required");
  Tensor out = Tensor::zeros({n, d}, any_grad(x));
  flops::add(8 * x.numel());
  const double* px = x.data();
  double* po = out.data();
  auto invstd = std::make_shared<std::vector<double>>(n);
  for (int i = 0; i < n; ++i) {
    const double* row = px + static_cast<std::size_t>(i) * d;
    double* orow = po + static_cast<std::size_t>(i) * d;
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += row[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      double c = row[j] - mean;
      var += c * c;
    }
    double is = 1.0 / std::sqrt(var / d + kNormEps);
    (*invstd)[i] = is;
    for (int j = 0; j < d; ++j) orow[j] = (row[j] - mean) * is;
  }
  attach(out, {x, out}, [x, out, invstd, n, d](const std::vector<double>& gy, GradTable& gt) {
    auto& gx = gt.accumulate(x);
    const double* py = out.data();
    for (int i = 0; i < n; ++i) {
      const std::size_t base = static_cast<std::size_t>(i) * d;
      double gmean = 0.0, gydot = 0.0;
      for (int j = 0; j < d; ++j) {
        gmean += gy[base + j];
        gydot += gy[base + j] * py[base + j];
      }
      gmean /= d;
      gydot /= d;
      const double is = (*invstd)[i];
      for (int j = 0; j < d; ++j) gx[base + j] += is * (gy[base + j] - gmean - py[base + j] * gydot);
    }
  });
  return out;
}

Tensor scale_channels(const Tensor& x, const Tensor& gamma) {
  if (x.rank() != 2 || gamma.rank() != 2 || gamma.rows() != 1 || gamma.cols() != x.cols())
    throw ShapeError("scale_channels: gamma must be {1,d}");
  const int n = x.rows(), d = x.cols();
  Tensor out = Tensor::zeros({n, d}, any_grad(x, gamma));
  flops::add(out.numel());
  const double *px = x.data(), *pg = gamma.data();
  double* po = out.data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      po[static_cast<std::size_t>(i) * d + j] = px[static_cast<std::size_t>(i) * d + j] * pg[j];
  attach(out, {x, gamma}, [x, gamma, n, d](const std::vector<double>& gy, GradTable& gt) {
    if (x.requires_grad()) {
      auto& gx = gt.accumulate(x);
      const double* pg2 = gamma.data();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
          gx[static_cast<std::size_t>(i) * d + j] += gy[static_cast<std::size_t>(i) * d + j] * pg2[j];
    }
    if (gamma.requires_grad()) {
      auto& gg = gt.accumulate(gamma);
      const double* px2 = x.data();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
          gg[j] += gy[static_cast<std::size_t>(i) * d + j] * px2[static_cast<std::size_t>(i) * d + j];
    }
  });
  return out;
}

Tensor shift_channels(const Tensor& x, const Tensor& beta) {
  if (x.rank() != 2 || beta.rank() != 2 || beta.rows() != 1 || beta.cols() != x.cols())
    throw ShapeError("shift_channels: beta must be {1,d}");
  const int n = x.rows(), d = x.cols();
  Tensor out = Tensor::zeros({n, d}, any_grad(x, beta));
  flops::add(out.numel());
  const double *px = x.data(), *pb = beta.data();
  double* po = out.data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      po[static_cast<std::size_t>(i) * d + j] = px[static_cast<std::size_t>(i) * d + j] + pb[j];
  attach(out, {x, beta}, [x, beta, n, d](const std::vector<double>& gy, GradTable& gt) {
    if (x.requires_grad()) {
      auto& gx = gt.accumulate(x);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    }
    if (beta.requires_grad()) {
      auto& gb = gt.accumulate(beta);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) gb[j] += gy[static_cast<std::size_t>(i) * d + j];
    }
  });
  return out;
}

Tensor bce_with_logits_mean(const Tensor& z, const std::vector<double>& y,
                            const std::vector<double>& weight) {
  const std::size_t m = z.numel();
  if (y.size() != m || weight.size() != m)
    throw ShapeError("bce_with_logits_mean: label/weight count mismatch");
  Tensor out = Tensor::zeros({1}, any_grad(z));
  flops::add(8 * m);
  const double* pz = z.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    double v = pz[i];
    // max(v,0) - v*y + log(1 + exp(-|v|))
    double loss = std::max(v, 0.0) - v * y[i] + std::log1p(std::exp(-std::abs(v)));
    acc += weight[i] * loss;
  }
  out.data()[0] = acc / static_cast<double>(m);
  attach(out, {z}, [z, y, weight, m](const std::vector<double>& gy, GradTable& gt) {
    auto& gz = gt.accumulate(z);
    const double* pz2 = z.data();
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      gz[i] += gy[0] * weight[i] * (sigmoid_scalar(pz2[i]) - y[i]) * inv;
  });
  return out;
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

double check_gradient(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                      std::vector<Tensor> inputs, double step, std::uint64_t probe_seed) {
  // rebuild the inputs as differentiable leaves
  std::vector<Tensor> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& t : inputs) leaves.push_back(Tensor::from(t.shape(), t.values(), true));

  Tensor first = [&] {
    NoGradGuard ng;
    return f(leaves);
  }();
  Rng prng(probe_seed);
  Tensor probe = Tensor::uniform(first.shape(), prng, -1.0, 1.0);

  Tensor loss = sum_all(mul(f(leaves), probe));
  GradTable table;
  backward(loss, table);

  double max_rel = 0.0;
  for (Tensor& leaf : leaves) {
    const std::vector<double>* g = table.find(leaf);
    for (std::size_t c = 0; c < leaf.numel(); ++c) {
      double saved = leaf.data()[c];
      double fp, fm;
      {
        NoGradGuard ng;
        leaf.data()[c] = saved + step;
        fp = sum_all(mul(f(leaves), probe)).item();
        leaf.data()[c] = saved - step;
        fm = sum_all(mul(f(leaves), probe)).item();
        leaf.data()[c] = saved;
      }
      double numeric = (fp - fm) / (2.0 * step);
      double analytic = g ? (*g)[c] : 0.0;
      double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      max_rel = std::max(max_rel, std::abs(analytic - numeric) / denom);
    }
  }
  return max_rel;
}

double check_gradient(const std::function<Tensor(const Tensor&)>& op, const Tensor& point,
                      double step) {
  return check_gradient(
      [&op](const std::vector<Tensor>& ins) { return op(ins[0]); }, {point}, step);
}

double check_gradient_rejection(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                                const std::vector<std::vector<int>>& shapes, Rng& rng,
                                double step, double lo, double hi) {
  for (int attempt = 0; attempt < 64; ++attempt) {
    std::vector<Tensor> inputs;
    inputs.reserve(shapes.size());
    for (const auto& s : shapes) inputs.push_back(Tensor::uniform(s, rng, lo, hi));
    double margin;
    {
      NoGradGuard ng;
      KinkMeterScope meter;
      (void)f(inputs);
      margin = meter.min_margin();
    }
    if (margin < 1.0) continue;  // too close to a non-differentiable boundary
    return check_gradient(f, inputs, step);
  }
  throw NumericError("check_gradient_rejection: no smooth sample point found");
}

}  // namespace bclnet
