#include "bclnet/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace bclnet {

namespace {

struct Candidate {
  double dist2;
  int index;
};

inline bool better(const Candidate& a, const Candidate& b) {
  return a.dist2 < b.dist2 || (a.dist2 == b.dist2 && a.index < b.index);
}

thread_local int g_freeze_mode = 0;
thread_local std::vector<KnnGraph> g_frozen_graphs;
thread_local std::size_t g_graph_cursor = 0;
thread_local std::vector<std::vector<int>> g_frozen_selections;
thread_local std::size_t g_selection_cursor = 0;

}  // namespace

void DecisionFreeze::record() {
  g_freeze_mode = 1;
  g_frozen_graphs.clear();
  g_frozen_selections.clear();
  g_graph_cursor = 0;
  g_selection_cursor = 0;
}

void DecisionFreeze::replay() {
  g_freeze_mode = 2;
  g_graph_cursor = 0;
  g_selection_cursor = 0;
}

void DecisionFreeze::off() {
  g_freeze_mode = 0;
  g_frozen_graphs.clear();
  g_frozen_selections.clear();
}

namespace freeze_detail {

int mode() { return g_freeze_mode; }

void push_graph(const KnnGraph& g) { g_frozen_graphs.push_back(g); }

const KnnGraph& next_graph() {
  if (g_graph_cursor >= g_frozen_graphs.size())
    throw NumericError("decision replay: more neighbor searches than recorded");
  return g_frozen_graphs[g_graph_cursor++];
}

void push_selection(const std::vector<int>& sel) { g_frozen_selections.push_back(sel); }

const std::vector<int>& next_selection() {
  if (g_selection_cursor >= g_frozen_selections.size())
    throw NumericError("decision replay: more pruning selections than recorded");
  return g_frozen_selections[g_selection_cursor++];
}

}  // namespace freeze_detail

KnnGraph knn_search(const Tensor& features, int k) {
  if (freeze_detail::mode() == 2) return freeze_detail::next_graph();
  if (features.rank() != 2) throw ShapeError("knn_search: rank-2 feature tensor required");
  const int n = features.rows(), d = features.cols();
  if (k < 1 || k >= n) throw ConfigError("knn_search: need 1 <= k < N");

  KnnGraph g;
  g.n = n;
  g.k = k;
  g.neighbor_index.resize(static_cast<std::size_t>(n) * k);
  g.neighbor_dist.resize(static_cast<std::size_t>(n) * k);

  const double* x = features.data();
  std::vector<double> norms(n);
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    const double* row = x + static_cast<std::size_t>(i) * d;
    for (int l = 0; l < d; ++l) s += row[l] * row[l];
    norms[i] = s;
  }
  // column-major copy so the gram tiles stream contiguously
  std::vector<double> xt(static_cast<std::size_t>(d) * n);
  for (int i = 0; i < n; ++i)
    for (int l = 0; l < d; ++l) xt[static_cast<std::size_t>(l) * n + i] = x[static_cast<std::size_t>(i) * d + l];

  flops::add(2ull * n * n * d + 4ull * n * n);

  const bool meter = kink::enabled;
  std::vector<double> margins(meter ? n : 0, std::numeric_limits<double>::infinity());

  const int tile = 256;
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t i0, std::size_t i1) {
    std::vector<Candidate> cand(static_cast<std::size_t>(k));
    std::vector<double> acc(tile);
    for (std::size_t i = i0; i < i1; ++i) {
      int filled = 0;
      Candidate runner_up{std::numeric_limits<double>::infinity(), -1};
      const double* row = x + i * d;
      for (int j0 = 0; j0 < n; j0 += tile) {
        const int bj = std::min(tile, n - j0);
        std::fill(acc.begin(), acc.begin() + bj, 0.0);
        for (int l = 0; l < d; ++l) {
          const double a = row[l];
          const double* trow = xt.data() + static_cast<std::size_t>(l) * n + j0;
          for (int jj = 0; jj < bj; ++jj) acc[jj] += a * trow[jj];
        }
        for (int jj = 0; jj < bj; ++jj) {
          const int j = j0 + jj;
          if (j == static_cast<int>(i)) continue;
          Candidate c{std::max(0.0, norms[i] + norms[j] - 2.0 * acc[jj]), j};
          if (filled == k && !better(c, cand[static_cast<std::size_t>(k) - 1])) {
            if (better(c, runner_up)) runner_up = c;
            continue;
          }
          // insert into the sorted candidate array
          int pos = filled < k ? filled : k - 1;
          if (filled == k) {
            if (better(cand[static_cast<std::size_t>(k) - 1], runner_up)) runner_up = cand[static_cast<std::size_t>(k) - 1];
          } else {
            ++filled;
          }
          while (pos > 0 && better(c, cand[static_cast<std::size_t>(pos) - 1])) {
            cand[static_cast<std::size_t>(pos)] = cand[static_cast<std::size_t>(pos) - 1];
            --pos;
          }
          cand[static_cast<std::size_t>(pos)] = c;
        }
      }
      for (int j = 0; j < k; ++j) {
        g.neighbor_index[i * k + j] = cand[static_cast<std::size_t>(j)].index;
        g.neighbor_dist[i * k + j] = std::sqrt(cand[static_cast<std::size_t>(j)].dist2);
      }
      if (meter) {
        double m = runner_up.dist2 - cand[static_cast<std::size_t>(k) - 1].dist2;
        for (int j = 1; j < k; ++j)
          m = std::min(m, cand[static_cast<std::size_t>(j)].dist2 - cand[static_cast<std::size_t>(j) - 1].dist2);
        margins[i] = m;
      }
    }
  }, 64);

  if (meter) {
    double m = std::numeric_limits<double>::infinity();
    for (double v : margins) m = std::min(m, v);
    kink::note(m / 1e-3);
  }
  if (freeze_detail::mode() == 1) freeze_detail::push_graph(g);
  return g;
}

EdgeFeatures edge_features(const Tensor& features, const KnnGraph& g) {
  if (features.rank() != 2) throw ShapeError("edge_features: rank-2 feature tensor required");
  const int n = features.rows(), d = features.cols(), k = g.k;
  if (g.n != n) throw ShapeError("edge_features: graph size does not match features");
  for (int idx : g.neighbor_index)
    if (idx < 0 || idx >= n) throw ShapeError("edge_features: neighbor index out of range");

  EdgeFeatures out;
  out.n = n;
  out.k = k;
  out.d = d;
  out.values = Tensor::zeros({n * k, 2 * d}, grad_enabled() && features.requires_grad());
  flops::add(out.values.numel());
  const double* z = features.data();
  double* o = out.values.data();
  const auto& nbr = g.neighbor_index;
  for (int i = 0; i < n; ++i) {
    const double* zi = z + static_cast<std::size_t>(i) * d;
    for (int j = 0; j < k; ++j) {
      const double* zj = z + static_cast<std::size_t>(nbr[static_cast<std::size_t>(i) * k + j]) * d;
      double* row = o + (static_cast<std::size_t>(i) * k + j) * 2 * d;
      std::memcpy(row, zi, sizeof(double) * d);
      for (int l = 0; l < d; ++l) row[d + l] = zi[l] - zj[l];
    }
  }
  Tensor features_copy = features;
  std::vector<int> nbr_copy = g.neighbor_index;
  attach_node(out.values, {features}, [features_copy, nbr_copy, n, d, k](
                                          const std::vector<double>& gy, GradTable& gt) {
    auto& gz = gt.accumulate(features_copy);
    for (int i = 0; i < n; ++i) {
      double* gi = gz.data() + static_cast<std::size_t>(i) * d;
      for (int j = 0; j < k; ++j) {
        const double* grow = gy.data() + (static_cast<std::size_t>(i) * k + j) * 2 * d;
        double* gj = gz.data() + static_cast<std::size_t>(nbr_copy[static_cast<std::size_t>(i) * k + j]) * d;
        for (int l = 0; l < d; ++l) {
          gi[l] += grow[l] + grow[d + l];
          gj[l] -= grow[d + l];
        }
      }
    }
  });
  return out;
}

Tensor annular_aggregate(const EdgeFeatures& edges, int groups, const AnnularWeights& w) {
  const int n = edges.n, k = edges.k, d = edges.d;
  if (groups < 1 || k % groups != 0)
    throw ConfigError("annular_aggregate: group count must divide k");
  const int per_group = k / groups;
  const int in1 = 2 * d * per_group;
  if (w.w1.rank() != 2 || w.w1.rows() != in1 || w.w1.cols() != d)
    throw ShapeError("annular_aggregate: stage-1 weight shape mismatch");
  if (w.w2.rank() != 2 || w.w2.rows() != groups * d || w.w2.cols() != d)
    throw ShapeError("annular_aggregate: stage-2 weight shape mismatch");

  // (n*k) x 2d rows are contiguous, so each group's stacked edges reshape
  // to one row of length 2d * k/g without copying.
  Tensor grouped = edges.values.reshaped({n * groups, in1});
  Tensor h = relu(context_norm(shift_channels(matmul(grouped, w.w1), w.b1)));
  Tensor fused = h.reshaped({n, groups * d});
  return shift_channels(matmul(fused, w.w2), w.b2);
}

}  // namespace bclnet
