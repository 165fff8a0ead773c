#include "bclnet/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

namespace bclnet {

BlockConfig PipelineConfig::stage_config(int stage) const {
  BlockConfig b;
  b.d = d;
  b.k = stage == 1 ? k1 : k2;
  b.g_groups = stage == 1 ? g1 : g2;
  b.clusters = clusters;
  b.reduction = reduction;
  return b;
}

void PipelineConfig::validate() const {
  stage_config(1).validate();
  stage_config(2).validate();
  if (!(tau_v > 0.0)) throw ConfigError("pipeline config: tau_v must be positive");
}

std::string PipelineConfig::to_json() const {
  nlohmann::json j;
  j["d"] = d;
  j["k1"] = k1;
  j["g1"] = g1;
  j["k2"] = k2;
  j["g2"] = g2;
  j["clusters"] = clusters;
  j["reduction"] = reduction;
  j["tau_v"] = tau_v;
  j["disable_bcma"] = disable_bcma;
  return j.dump();
}

PipelineConfig PipelineConfig::from_json(const std::string& json) {
  PipelineConfig c;
  try {
    nlohmann::json j = nlohmann::json::parse(json);
    c.d = j.at("d").get<int>();
    c.k1 = j.at("k1").get<int>();
    c.g1 = j.at("g1").get<int>();
    c.k2 = j.at("k2").get<int>();
    c.g2 = j.at("g2").get<int>();
    c.clusters = j.at("clusters").get<int>();
    c.reduction = j.at("reduction").get<int>();
    c.tau_v = j.at("tau_v").get<double>();
    c.disable_bcma = j.value("disable_bcma", false);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("pipeline config: ") + e.what());
  }
  c.validate();
  return c;
}

Tensor PruningModule::forward(const Tensor& features) const {
  Tensor h = lift.forward(features);
  h = res2.forward(res1.forward(res0.forward(h)));
  h = bcl1.forward(bcl0.forward(h));
  return head.forward(h);
}

namespace {

PruningModule make_pruning_module(ModelWeights& mw, const std::string& prefix, int in_channels,
                                  const BlockConfig& cfg, bool disable_bcma, Rng& init) {
  PruningModule m;
  m.lift = make_linear(mw, prefix + ".lift", in_channels, cfg.d, init);
  m.res0 = make_resnet(mw, prefix + ".res0", cfg.d, init);
  m.res1 = make_resnet(mw, prefix + ".res1", cfg.d, init);
  m.res2 = make_resnet(mw, prefix + ".res2", cfg.d, init);
  m.bcl0 = make_bilateral(mw, prefix + ".bcl0", cfg, disable_bcma, init);
  m.bcl1 = make_bilateral(mw, prefix + ".bcl1", cfg, disable_bcma, init);
  m.head = make_linear(mw, prefix + ".head", cfg.d, 1, init);
  return m;
}

Model bind_model(PipelineConfig cfg, ModelWeights weights, std::uint64_t init_seed) {
  cfg.validate();
  Model model;
  model.cfg = cfg;
  model.weights = std::move(weights);
  Rng init(init_seed);
  model.m1 = make_pruning_module(model.weights, "m1", 4, cfg.stage_config(1), cfg.disable_bcma, init);
  model.m2 = make_pruning_module(model.weights, "m2", 5, cfg.stage_config(2), cfg.disable_bcma, init);
  return model;
}

}  // namespace

Model build_model(const PipelineConfig& cfg, std::uint64_t init_seed) {
  return bind_model(cfg, ModelWeights{}, init_seed);
}

void save_model(const Model& model, const std::string& path) {
  model.weights.save(path, model.cfg.to_json());
}

Model load_model(const std::string& path) {
  std::string config_json;
  ModelWeights mw = ModelWeights::load(path, &config_json);
  PipelineConfig cfg = PipelineConfig::from_json(config_json);
  return bind_model(cfg, std::move(mw), 0);
}

std::vector<int> prune_select(const std::vector<double>& logits, double ratio) {
  const std::size_t n = logits.size();
  if (n == 0) throw DataError("prune_select: empty logit vector");
  if (freeze_detail::mode() == 2) return freeze_detail::next_selection();
  const std::size_t keep = static_cast<std::size_t>(std::ceil(static_cast<double>(n) * ratio));
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&logits](int a, int b) {
    if (logits[static_cast<std::size_t>(a)] != logits[static_cast<std::size_t>(b)])
      return logits[static_cast<std::size_t>(a)] > logits[static_cast<std::size_t>(b)];
    return a < b;
  });
  if (kink::enabled && keep < n) {
    double gap = logits[static_cast<std::size_t>(order[keep - 1])] -
                 logits[static_cast<std::size_t>(order[keep])];
    kink::note(gap / 1e-3);
  }
  std::vector<int> kept(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep));
  std::sort(kept.begin(), kept.end());
  if (freeze_detail::mode() == 1) freeze_detail::push_selection(kept);
  return kept;
}

std::vector<double> solver_weights(const std::vector<double>& logits) {
  std::vector<double> w(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) w[i] = std::max(0.0, std::tanh(logits[i]));
  return w;
}

namespace {

Tensor coords_tensor(const CorrespondenceSet& c) {
  Tensor t = Tensor::zeros({static_cast<int>(c.size()), 4});
  double* p = t.data();
  for (std::size_t i = 0; i < c.size(); ++i) {
    p[i * 4 + 0] = c.items[i].x;
    p[i * 4 + 1] = c.items[i].y;
    p[i * 4 + 2] = c.items[i].x2;
    p[i * 4 + 3] = c.items[i].y2;
  }
  return t;
}

CorrespondenceSet subset(const CorrespondenceSet& c, const std::vector<int>& idx) {
  CorrespondenceSet out;
  out.items.reserve(idx.size());
  for (int i : idx) out.items.push_back(c.items[static_cast<std::size_t>(i)]);
  if (c.has_labels()) {
    out.labels.reserve(idx.size());
    for (int i : idx) out.labels.push_back(c.labels[static_cast<std::size_t>(i)]);
  }
  return out;
}

void check_pipeline_input(const Model& model, const CorrespondenceSet& c) {
  if (c.size() < 32) throw DataError("pipeline: need at least 32 correspondences");
  const std::size_t n1 = (c.size() + 1) / 2;
  if (c.size() <= 2 * static_cast<std::size_t>(model.cfg.k1) ||
      n1 <= 2 * static_cast<std::size_t>(model.cfg.k2))
    throw DataError("pipeline: too few correspondences for the configured neighbor counts");
}

}  // namespace

ForwardTrace forward_trace(const Model& model, const CorrespondenceSet& c) {
  check_pipeline_input(model, c);
  ForwardTrace tr;

  Tensor coords = coords_tensor(c);
  tr.logits1 = model.m1.forward(coords);
  tr.keep1 = prune_select(tr.logits1.values(), 0.5);

  CorrespondenceSet c1 = subset(c, tr.keep1);
  Tensor feats2 = concat_cols(coords_tensor(c1), gather_rows(tr.logits1, tr.keep1));
  tr.logits2 = model.m2.forward(feats2);
  tr.keep2 = prune_select(tr.logits2.values(), 0.5);
  tr.keep2_orig.reserve(tr.keep2.size());
  for (int i : tr.keep2) tr.keep2_orig.push_back(tr.keep1[static_cast<std::size_t>(i)]);
  tr.logits2_kept = gather_rows(tr.logits2, tr.keep2);

  std::vector<double> w = solver_weights(tr.logits2_kept.values());
  std::size_t positive = 0;
  for (double v : w)
    if (v > 0.0) ++positive;
  tr.e_valid = positive >= 8;
  if (tr.e_valid) {
    CorrespondenceSet c2 = subset(c1, tr.keep2);
    Tensor design = Tensor::zeros({static_cast<int>(c2.size()), 9});
    for (std::size_t i = 0; i < c2.size(); ++i) {
      std::array<double, 9> row = design_row(c2.items[i]);
      std::copy(row.begin(), row.end(), design.data() + i * 9);
    }
    Tensor wts = relu(tanh_op(tr.logits2_kept));
    tr.e_lin = smallest_singular_vector(scale_rows(design, wts));
  }
  return tr;
}

std::pair<std::vector<double>, std::vector<double>> full_size_verification(
    const EssentialMatrix& e, const CorrespondenceSet& c, double tau_v) {
  std::vector<double> probs(c.size()), residuals(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    residuals[i] = epipolar_residual(e, c.items[i]);
    probs[i] = residuals[i] < tau_v ? 1.0 : 0.0;
  }
  return {std::move(probs), std::move(residuals)};
}

namespace {

PipelineResult finish_pipeline(const CorrespondenceSet& c, PruningModuleOutput stage1,
                               PruningModuleOutput stage2,
                               const std::vector<double>& kept2_logits, double tau_v) {
  PipelineResult res;
  res.stage1 = std::move(stage1);
  res.stage2 = std::move(stage2);
  res.e_hat = weighted_eight_point(res.stage2.kept_set, solver_weights(kept2_logits));
  res.pose = decompose_essential(res.e_hat, res.stage2.kept_set);
  auto [probs, residuals] = full_size_verification(res.e_hat, c, tau_v);
  res.final_probs = std::move(probs);
  res.residuals = std::move(residuals);
  return res;
}

}  // namespace

PipelineResult run_bclnet(const Model& model, const CorrespondenceSet& c) {
  NoGradGuard ng;
  ForwardTrace tr = forward_trace(model, c);

  PruningModuleOutput s1;
  s1.logits = tr.logits1.values();
  s1.kept_indices = tr.keep1;
  s1.kept_set = subset(c, tr.keep1);

  PruningModuleOutput s2;
  s2.logits = tr.logits2.values();
  s2.kept_indices = tr.keep2_orig;
  s2.kept_set = subset(c, tr.keep2_orig);

  return finish_pipeline(c, std::move(s1), std::move(s2), tr.logits2_kept.values(), model.cfg.tau_v);
}

PipelineResult run_with_logits(const CorrespondenceSet& c, const StageLogitFn& logit_fn,
                               double tau_v) {
  if (c.size() < 32) throw DataError("pipeline: need at least 32 correspondences");
  PruningModuleOutput s1;
  s1.logits = logit_fn(c, 1);
  if (s1.logits.size() != c.size()) throw ShapeError("stage-1 logit count mismatch");
  s1.kept_indices = prune_select(s1.logits, 0.5);
  s1.kept_set = subset(c, s1.kept_indices);

  PruningModuleOutput s2;
  s2.logits = logit_fn(s1.kept_set, 2);
  if (s2.logits.size() != s1.kept_set.size()) throw ShapeError("stage-2 logit count mismatch");
  std::vector<int> keep2 = prune_select(s2.logits, 0.5);
  s2.kept_indices.reserve(keep2.size());
  for (int i : keep2) s2.kept_indices.push_back(s1.kept_indices[static_cast<std::size_t>(i)]);
  s2.kept_set = subset(c, s2.kept_indices);

  std::vector<double> kept2_logits;
  kept2_logits.reserve(keep2.size());
  for (int i : keep2) kept2_logits.push_back(s2.logits[static_cast<std::size_t>(i)]);

  return finish_pipeline(c, std::move(s1), std::move(s2), kept2_logits, tau_v);
}

}  // namespace bclnet
