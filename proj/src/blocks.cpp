#include "bclnet/blocks.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace bclnet {

void BlockConfig::validate() const {
  if (d < 4 || d % 2 != 0) throw ConfigError("block config: d must be even and at least 4");
  if (k < 1) throw ConfigError("block config: k must be positive");
  if (g_groups < 1 || k % g_groups != 0) throw ConfigError("block config: group count must divide k");
  if (clusters < 2) throw ConfigError("block config: at least 2 clusters required");
  if (reduction < 1 || d % reduction != 0)
    throw ConfigError("block config: reduction ratio must divide d");
}

// ---------------------------------------------------------------------------
// parameter store
// ---------------------------------------------------------------------------

Tensor& ModelWeights::add(const std::string& path, std::vector<int> shape) {
  if (index_.count(path)) throw ConfigError("duplicate parameter path: " + path);
  index_.emplace(path, entries_.size());
  entries_.emplace_back(path, Tensor::zeros(std::move(shape), true));
  return entries_.back().second;
}

Tensor& ModelWeights::at(const std::string& path) {
  auto it = index_.find(path);
  if (it == index_.end()) throw ConfigError("unknown parameter path: " + path);
  return entries_[it->second].second;
}

const Tensor& ModelWeights::at(const std::string& path) const {
  auto it = index_.find(path);
  if (it == index_.end()) throw ConfigError("unknown parameter path: " + path);
  return entries_[it->second].second;
}

bool ModelWeights::has(const std::string& path) const { return index_.count(path) > 0; }

void ModelWeights::assign_from(const ModelWeights& other) {
  if (other.entries_.size() != entries_.size())
    throw DataError("weights: parameter count mismatch");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& [path, src] = other.entries_[i];
    auto& [dst_path, dst] = entries_[i];
    if (path != dst_path) throw DataError("weights: parameter order mismatch at " + path);
    if (src.shape() != dst.shape()) throw DataError("weights: shape mismatch at " + path);
    dst.values() = src.values();
  }
}

void ModelWeights::save(const std::string& path, const std::string& config_json) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for writing: " + path);
  out << "bclnet-weights v1\n";
  out << "config " << (config_json.empty() ? "{}" : config_json) << "\n";
  out << "params " << entries_.size() << "\n";
  for (const auto& [name, t] : entries_) {
    out << "param " << name << " " << t.rank();
    for (int d : t.shape()) out << " " << d;
    out << "\n";
    const double* v = t.data();
    for (std::size_t i = 0; i < t.numel(); ++i) {
      if (i) out << " ";
      out << format_double(v[i]);
    }
    out << "\n";
  }
  if (!out) throw DataError("write failed: " + path);
}

ModelWeights ModelWeights::load(const std::string& path, std::string* config_json) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + path);
  std::string line;
  int lineno = 0;
  auto next_line = [&](const char* what) {
    if (!std::getline(in, line))
      throw DataError(path + ":" + std::to_string(lineno + 1) + ": unexpected end of file, expected " +
                      what);
    ++lineno;
  };
  next_line("header");
  if (line != "bclnet-weights v1")
    throw DataError(path + ":1: unknown weights file version: '" + line + "'");
  next_line("config");
  if (line.rfind("config ", 0) != 0) throw DataError(path + ":2: expected config line");
  if (config_json) *config_json = line.substr(7);
  next_line("params");
  std::size_t count = 0;
  {
    std::istringstream is(line);
    std::string key;
    if (!(is >> key >> count) || key != "params")
      throw DataError(path + ":" + std::to_string(lineno) + ": expected parameter count");
  }
  ModelWeights mw;
  for (std::size_t p = 0; p < count; ++p) {
    next_line("param header");
    std::istringstream is(line);
    std::string key, name;
    int rank = 0;
    if (!(is >> key >> name >> rank) || key != "param" || rank < 1 || rank > 8)
      throw DataError(path + ":" + std::to_string(lineno) + ": malformed param header");
    std::vector<int> shape(rank);
    for (int i = 0; i < rank; ++i)
      if (!(is >> shape[i]) || shape[i] < 1)
        throw DataError(path + ":" + std::to_string(lineno) + ": malformed param shape");
    Tensor& t = mw.add(name, shape);
    next_line("param values");
    std::istringstream vs(line);
    for (std::size_t i = 0; i < t.numel(); ++i)
      if (!(vs >> t.data()[i]))
        throw DataError(path + ":" + std::to_string(lineno) + ": expected " +
                        std::to_string(t.numel()) + " values for " + name);
    double extra;
    if (vs >> extra)
      throw DataError(path + ":" + std::to_string(lineno) + ": trailing values for " + name);
  }
  return mw;
}

// ---------------------------------------------------------------------------
// layer builders
// ---------------------------------------------------------------------------

namespace {

Tensor& param(ModelWeights& mw, const std::string& path, std::vector<int> shape,
              const std::function<void(Tensor&)>& init) {
  if (mw.has(path)) {
    Tensor& t = mw.at(path);
    if (t.shape() != shape) throw ConfigError("parameter shape mismatch at " + path);
    return t;
  }
  Tensor& t = mw.add(path, std::move(shape));
  init(t);
  return t;
}

void init_zero(Tensor&) {}
void init_one(Tensor& t) {
  for (double& v : t.values()) v = 1.0;
}

}  // namespace

LinearLayer make_linear(ModelWeights& mw, const std::string& prefix, int in, int out, Rng& init) {
  const double s = 1.0 / std::sqrt(static_cast<double>(in));
  LinearLayer l;
  l.w = param(mw, prefix + ".w", {in, out}, [&](Tensor& t) {
    for (double& v : t.values()) v = init.uniform(-s, s);
  });
  l.b = param(mw, prefix + ".b", {1, out}, init_zero);
  return l;
}

AffineLayer make_affine(ModelWeights& mw, const std::string& prefix, int d) {
  AffineLayer a;
  a.scale = param(mw, prefix + ".scale", {1, d}, init_one);
  a.shift = param(mw, prefix + ".shift", {1, d}, init_zero);
  return a;
}

AnnularWeights make_annular(ModelWeights& mw, const std::string& prefix, int d, int k, int groups,
                            Rng& init) {
  if (groups < 1 || k % groups != 0) throw ConfigError("annular weights: group count must divide k");
  const int in1 = 2 * d * (k / groups);
  const int in2 = groups * d;
  AnnularWeights w;
  const double s1 = 1.0 / std::sqrt(static_cast<double>(in1));
  w.w1 = param(mw, prefix + ".w1", {in1, d}, [&](Tensor& t) {
    for (double& v : t.values()) v = init.uniform(-s1, s1);
  });
  w.b1 = param(mw, prefix + ".b1", {1, d}, init_zero);
  const double s2 = 1.0 / std::sqrt(static_cast<double>(in2));
  w.w2 = param(mw, prefix + ".w2", {in2, d}, [&](Tensor& t) {
    for (double& v : t.values()) v = init.uniform(-s2, s2);
  });
  w.b2 = param(mw, prefix + ".b2", {1, d}, init_zero);
  return w;
}

// ---------------------------------------------------------------------------
// blocks
// ---------------------------------------------------------------------------

Tensor ResnetBlock::forward(const Tensor& x) const {
  Tensor h = relu(aff1.forward(context_norm(fc1.forward(x))));
  h = relu(aff2.forward(context_norm(fc2.forward(h))));
  return add(x, h);
}

ResnetBlock make_resnet(ModelWeights& mw, const std::string& prefix, int d, Rng& init) {
  ResnetBlock r;
  r.fc1 = make_linear(mw, prefix + ".fc1", d, d, init);
  r.aff1 = make_affine(mw, prefix + ".aff1", d);
  r.fc2 = make_linear(mw, prefix + ".fc2", d, d, init);
  r.aff2 = make_affine(mw, prefix + ".aff2", d);
  return r;
}

Tensor BcmaBlock::forward(const Tensor& x) const {
  if (x.rows() <= knn_k) throw ConfigError("bcma: need more correspondences than neighbors");
  Tensor xn = ln1.forward(layer_norm_core(x));
  Tensor qf = q.forward(xn);
  Tensor kf = k.forward(xn);
  Tensor vf = v.forward(xn);

  auto local = [&](const Tensor& f, const AnnularWeights& w) {
    KnnGraph graph = knn_search(f, knn_k);
    return annular_aggregate(edge_features(f, graph), groups, w);
  };
  Tensor q_local = local(qf, agg_q);
  Tensor k_local = local(kf, agg_k);
  Tensor v_local = local(vf, agg_v);

  // similarity across channels: d x d, never N x N
  Tensor sim = softmax(scale_scalar(matmul(transpose(q_local), k_local), alpha), 1);
  Tensor attended = wp.forward(matmul(v_local, sim));
  Tensor out = ln2.forward(layer_norm_core(add(x, attended)));
  return res.forward(out);
}

BcmaBlock make_bcma(ModelWeights& mw, const std::string& prefix, int d, int knn_k, int groups,
                    Rng& init) {
  BcmaBlock b;
  b.knn_k = knn_k;
  b.groups = groups;
  b.ln1 = make_affine(mw, prefix + ".ln1", d);
  b.q = make_linear(mw, prefix + ".q", d, d, init);
  b.k = make_linear(mw, prefix + ".k", d, d, init);
  b.v = make_linear(mw, prefix + ".v", d, d, init);
  b.agg_q = make_annular(mw, prefix + ".agg_q", d, knn_k, groups, init);
  b.agg_k = make_annular(mw, prefix + ".agg_k", d, knn_k, groups, init);
  b.agg_v = make_annular(mw, prefix + ".agg_v", d, knn_k, groups, init);
  b.alpha = param(mw, prefix + ".alpha", {1}, init_one);
  b.wp = make_linear(mw, prefix + ".wp", d, d, init);
  b.ln2 = make_affine(mw, prefix + ".ln2", d);
  b.res = make_resnet(mw, prefix + ".res", d, init);
  return b;
}

Tensor OaBlock::forward(const Tensor& x) const {
  Tensor s = softmax(assign.forward(x), 1);  // N x clusters
  Tensor pooled = matmul(transpose(s), x);   // clusters x d
  pooled = res1.forward(res0.forward(pooled));
  Tensor unpooled = matmul(s, pooled);  // N x d
  return add(x, out.forward(unpooled));
}

OaBlock make_oa(ModelWeights& mw, const std::string& prefix, int d, int clusters, Rng& init) {
  if (clusters < 2) throw ConfigError("oa block: at least 2 clusters required");
  OaBlock b;
  b.clusters = clusters;
  b.assign = make_linear(mw, prefix + ".assign", d, clusters, init);
  b.res0 = make_resnet(mw, prefix + ".res0", d, init);
  b.res1 = make_resnet(mw, prefix + ".res1", d, init);
  b.out = make_linear(mw, prefix + ".out", d, d, init);
  return b;
}

Tensor BcrBlock::forward(const Tensor& x) const {
  if (x.rows() <= knn_k) throw ConfigError("bcr: need more correspondences than neighbors");
  Tensor x_global = up.forward(relu(mid.forward(down.forward(mean_rows(x)))));
  KnnGraph graph = knn_search(x, knn_k);
  Tensor x_local = annular_aggregate(edge_features(x, graph), groups, agg);
  Tensor gate = sigmoid(add(x_local, broadcast_rows(x_global, x.rows())));
  Tensor gated = mul(gate, x);
  return res2.forward(res1.forward(res0.forward(gated)));
}

BcrBlock make_bcr(ModelWeights& mw, const std::string& prefix, int d, int knn_k, int groups,
                  int reduction, Rng& init) {
  if (reduction < 1 || d % reduction != 0)
    throw ConfigError("bcr block: reduction ratio must divide d");
  BcrBlock b;
  b.knn_k = knn_k;
  b.groups = groups;
  b.down = make_linear(mw, prefix + ".down", d, d / reduction, init);
  b.mid = make_affine(mw, prefix + ".mid", d / reduction);
  b.up = make_linear(mw, prefix + ".up", d / reduction, d, init);
  b.agg = make_annular(mw, prefix + ".agg", d, knn_k, groups, init);
  b.res0 = make_resnet(mw, prefix + ".res0", d, init);
  b.res1 = make_resnet(mw, prefix + ".res1", d, init);
  b.res2 = make_resnet(mw, prefix + ".res2", d, init);
  return b;
}

Tensor BilateralModule::forward(const Tensor& x) const {
  Tensor global_branch =
      disable_bcma ? Tensor::zeros({x.rows(), x.cols()}) : bcma.forward(x);
  Tensor local_branch = oa.forward(x);
  Tensor fusedv = fuse.forward(concat_cols(global_branch, local_branch));
  return bcr.forward(fusedv);
}

BilateralModule make_bilateral(ModelWeights& mw, const std::string& prefix, const BlockConfig& cfg,
                               bool disable_bcma, Rng& init) {
  cfg.validate();
  BilateralModule m;
  m.disable_bcma = disable_bcma;
  m.bcma = make_bcma(mw, prefix + ".bcma", cfg.d, cfg.k, cfg.g_groups, init);
  m.oa = make_oa(mw, prefix + ".oa", cfg.d, cfg.clusters, init);
  m.fuse = make_linear(mw, prefix + ".fuse", 2 * cfg.d, cfg.d, init);
  m.bcr = make_bcr(mw, prefix + ".bcr", cfg.d, cfg.k, cfg.g_groups, cfg.reduction, init);
  return m;
}

}  // namespace bclnet
