#include "bclnet/traineval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace bclnet {

namespace {

struct BceTerm {
  std::vector<double> taus, labels, weights;
};

BceTerm make_bce_term(const std::vector<std::uint8_t>& labels, const std::vector<double>& residuals,
                      double tau_v) {
  if (labels.size() != residuals.size())
    throw ShapeError("classification loss: label/residual count mismatch");
  BceTerm t;
  const std::size_t n = labels.size();
  t.taus.resize(n);
  t.labels.resize(n);
  t.weights.resize(n);
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (labels[i]) ++pos;
  const std::size_t neg = n - pos;
  const double pos_weight = pos > 0 ? static_cast<double>(neg) / static_cast<double>(pos) : 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i]) {
      t.taus[i] = std::clamp(1.0 - residuals[i] / tau_v, 0.5, 1.0);
      t.labels[i] = 1.0;
      t.weights[i] = pos_weight;
    } else {
      t.taus[i] = 1.0;
      t.labels[i] = 0.0;
      t.weights[i] = 1.0;
    }
  }
  return t;
}

double bce_term_value(const std::vector<double>& logits, const BceTerm& t) {
  double acc = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i] * t.taus[i];
    acc += t.weights[i] * (std::max(z, 0.0) - z * t.labels[i] + std::log1p(std::exp(-std::abs(z))));
  }
  return acc / static_cast<double>(logits.size());
}

std::vector<double> residuals_under(const EssentialMatrix& e, const CorrespondenceSet& c) {
  std::vector<double> r(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) r[i] = epipolar_residual(e, c.items[i]);
  return r;
}

std::uint64_t virtual_seed(std::uint64_t scene_seed) { return scene_seed ^ 0xE55E11A7C0FFEEull; }

// columns vec(p' p^T) / sqrt(denom) for every usable virtual pair, so that
// (e . col)^2 is one term of the epipolar ratio
struct VirtualSystem {
  std::vector<double> proj;  // 9 x kept, row-major
  int requested = 0, kept = 0;
};

VirtualSystem virtual_system(const EssentialMatrix& e_gt, int m, std::uint64_t seed) {
  CorrespondenceSet pairs = virtual_correspondences(e_gt, m, seed);
  VirtualSystem vs;
  vs.requested = m;
  std::vector<std::array<double, 9>> cols;
  cols.reserve(pairs.size());
  for (const Correspondence& c : pairs.items) {
    const double p[3] = {c.x, c.y, 1.0};
    const double q[3] = {c.x2, c.y2, 1.0};
    double lx = e_gt(0, 0) * p[0] + e_gt(0, 1) * p[1] + e_gt(0, 2);
    double ly = e_gt(1, 0) * p[0] + e_gt(1, 1) * p[1] + e_gt(1, 2);
    double lpx = e_gt(0, 0) * q[0] + e_gt(1, 0) * q[1] + e_gt(2, 0);
    double lpy = e_gt(0, 1) * q[0] + e_gt(1, 1) * q[1] + e_gt(2, 1);
    const double denom = lx * lx + ly * ly + lpx * lpx + lpy * lpy;
    if (denom < 1e-12) continue;
    const double inv = 1.0 / std::sqrt(denom);
    std::array<double, 9> col;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) col[static_cast<std::size_t>(i) * 3 + j] = q[i] * p[j] * inv;
    cols.push_back(col);
  }
  vs.kept = static_cast<int>(cols.size());
  if (vs.kept * 2 < vs.requested)
    throw NumericError("essential loss: more than half of the virtual pairs are degenerate");
  vs.proj.resize(9 * cols.size());
  for (std::size_t c = 0; c < cols.size(); ++c)
    for (int r = 0; r < 9; ++r) vs.proj[static_cast<std::size_t>(r) * cols.size() + c] = cols[c][r];
  return vs;
}

}  // namespace

double classification_loss(const std::vector<ClsStage>& stages, double tau_v) {
  if (!(tau_v > 0.0)) throw ConfigError("classification loss: tau_v must be positive");
  double total = 0.0;
  for (const ClsStage& s : stages) {
    if (s.logits.size() != s.labels.size())
      throw ShapeError("classification loss: logit/label count mismatch");
    total += bce_term_value(s.logits, make_bce_term(s.labels, s.residuals, tau_v));
  }
  return total;
}

double essential_loss(const EssentialMatrix& e_hat, const EssentialMatrix& e_gt, int m_virtual,
                      std::uint64_t seed) {
  VirtualSystem vs = virtual_system(e_gt, m_virtual, seed);
  double acc = 0.0;
  for (int c = 0; c < vs.kept; ++c) {
    double z = 0.0;
    for (int r = 0; r < 9; ++r) z += e_hat.m[static_cast<std::size_t>(r)] * vs.proj[static_cast<std::size_t>(r) * vs.kept + c];
    acc += z * z;
  }
  return acc / static_cast<double>(vs.kept);
}

LossTensors build_loss(const Model& model, const SyntheticScene& scene, double lambda,
                       int m_virtual) {
  const CorrespondenceSet& c = scene.correspondences;
  if (!c.has_labels()) throw DataError("training requires labeled correspondences");
  ForwardTrace tr = forward_trace(model, c);

  auto gather_labels = [&](const std::vector<int>& idx) {
    std::vector<std::uint8_t> out;
    out.reserve(idx.size());
    for (int i : idx) out.push_back(c.labels[static_cast<std::size_t>(i)]);
    return out;
  };
  auto gather_items = [&](const std::vector<int>& idx) {
    CorrespondenceSet out;
    out.items.reserve(idx.size());
    for (int i : idx) out.items.push_back(c.items[static_cast<std::size_t>(i)]);
    return out;
  };

  // stage terms: full set, first pruned set, final candidate set
  std::vector<double> res_all = residuals_under(scene.gt_e, c);
  auto pick = [&](const std::vector<int>& idx) {
    std::vector<double> out;
    out.reserve(idx.size());
    for (int i : idx) out.push_back(res_all[static_cast<std::size_t>(i)]);
    return out;
  };

  const double tau_v = model.cfg.tau_v;
  BceTerm t1 = make_bce_term(c.labels, res_all, tau_v);
  BceTerm t2 = make_bce_term(gather_labels(tr.keep1), pick(tr.keep1), tau_v);
  BceTerm t3 = make_bce_term(gather_labels(tr.keep2_orig), pick(tr.keep2_orig), tau_v);
  (void)gather_items;

  auto term_tensor = [](const Tensor& logits, const BceTerm& t) {
    Tensor flat = logits.reshaped({static_cast<int>(logits.numel())});
    Tensor scaled = mul(flat, Tensor::from({static_cast<int>(t.taus.size())}, t.taus));
    return bce_with_logits_mean(scaled, t.labels, t.weights);
  };
  Tensor cls = add(add(term_tensor(tr.logits1, t1), term_tensor(tr.logits2, t2)),
                   term_tensor(tr.logits2_kept, t3));

  LossTensors out;
  out.values.lambda = lambda;
  out.values.cls = cls.item();

  Tensor total = cls;
  double ess_value = 0.0;
  if (tr.e_valid) {
    VirtualSystem vs = virtual_system(scene.gt_e, m_virtual, virtual_seed(scene.seed));
    Tensor proj = Tensor::from({9, vs.kept}, vs.proj);
    if (lambda > 0.0) {
      Tensor z = matmul(tr.e_lin.reshaped({1, 9}), proj);
      Tensor ess = mean_all(mul(z, z));
      ess_value = ess.item();
      total = add(cls, scalar_mul(ess, lambda));
    } else {
      // value only, no gradient needed while the schedule gates the term
      for (int col = 0; col < vs.kept; ++col) {
        double z = 0.0;
        for (int r = 0; r < 9; ++r)
          z += tr.e_lin[static_cast<std::size_t>(r)] * vs.proj[static_cast<std::size_t>(r) * vs.kept + col];
        ess_value += z * z;
      }
      ess_value /= static_cast<double>(vs.kept);
    }
  }
  out.values.ess = ess_value;
  out.values.total = total.item();
  out.total = total;
  return out;
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

void AdamState::init(const ModelWeights& w) {
  m.clear();
  v.clear();
  m.reserve(w.size());
  v.reserve(w.size());
  for (const auto& [path, t] : w.entries()) {
    m.emplace_back(t.numel(), 0.0);
    v.emplace_back(t.numel(), 0.0);
  }
  step = 0;
}

void adam_step(ModelWeights& w, const std::vector<std::vector<double>>& grads, AdamState& st,
               double lr, double beta1, double beta2, double eps) {
  if (grads.size() != w.size() || st.m.size() != w.size())
    throw ShapeError("adam_step: gradient/state size mismatch");
  ++st.step;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(st.step));
  for (std::size_t p = 0; p < w.size(); ++p) {
    Tensor& t = const_cast<Tensor&>(w.entries()[p].second);
    const std::vector<double>& g = grads[p];
    if (g.size() != t.numel()) throw ShapeError("adam_step: gradient shape mismatch");
    std::vector<double>& mp = st.m[p];
    std::vector<double>& vp = st.v[p];
    double* theta = t.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      mp[i] = beta1 * mp[i] + (1.0 - beta1) * g[i];
      vp[i] = beta2 * vp[i] + (1.0 - beta2) * g[i] * g[i];
      const double mhat = mp[i] / bc1;
      const double vhat = vp[i] / bc2;
      theta[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

TrainResult train(Model& model, const std::vector<SyntheticScene>& scenes, const TrainConfig& tc) {
  if (scenes.empty()) throw DataError("train: empty dataset");
  if (tc.iters < 1 || tc.batch < 1) throw ConfigError("train: iters and batch must be positive");

  Rng sampler(tc.seed ^ 0x9E3779B97F4A7C15ull);
  AdamState adam;
  adam.init(model.weights);
  int start_iter = 0;
  if (!tc.resume_from.empty()) start_iter = load_checkpoint(tc.resume_from, model, adam, sampler);

  const int cutoff = static_cast<int>(std::ceil(tc.lambda_cutoff_frac * tc.iters));
  const std::size_t n_params = model.weights.size();

  TrainResult result;
  result.curve.reserve(static_cast<std::size_t>(tc.iters - start_iter));

  // per-slot gradient buffers, reused across iterations
  std::vector<std::vector<std::vector<double>>> slot_grads(static_cast<std::size_t>(tc.batch));
  std::vector<LossBreakdown> slot_losses(static_cast<std::size_t>(tc.batch));
  for (auto& sg : slot_grads) {
    sg.resize(n_params);
    for (std::size_t p = 0; p < n_params; ++p) sg[p].assign(model.weights.entries()[p].second.numel(), 0.0);
  }
  std::vector<std::vector<double>> grads(n_params);
  for (std::size_t p = 0; p < n_params; ++p) grads[p].assign(model.weights.entries()[p].second.numel(), 0.0);

  for (int iter = start_iter; iter < tc.iters; ++iter) {
    const double lambda = iter < cutoff ? 0.0 : tc.lambda_value;
    std::vector<std::size_t> batch_idx(static_cast<std::size_t>(tc.batch));
    for (auto& b : batch_idx) b = sampler.index(scenes.size());

    parallel_for(static_cast<std::size_t>(tc.batch), [&](std::size_t b0, std::size_t b1) {
      for (std::size_t b = b0; b < b1; ++b) {
        LossTensors lt = build_loss(model, scenes[batch_idx[b]], lambda, tc.m_virtual);
        slot_losses[b] = lt.values;
        GradTable table;
        backward(lt.total, table);
        for (std::size_t p = 0; p < n_params; ++p) {
          const std::vector<double>* g = table.find(model.weights.entries()[p].second);
          std::vector<double>& dst = slot_grads[b][p];
          if (g)
            std::copy(g->begin(), g->end(), dst.begin());
          else
            std::fill(dst.begin(), dst.end(), 0.0);
        }
      }
    });

    LossBreakdown mean{};
    mean.lambda = lambda;
    const double inv_batch = 1.0 / tc.batch;
    for (int b = 0; b < tc.batch; ++b) {
      mean.total += slot_losses[static_cast<std::size_t>(b)].total;
      mean.cls += slot_losses[static_cast<std::size_t>(b)].cls;
      mean.ess += slot_losses[static_cast<std::size_t>(b)].ess;
    }
    mean.total *= inv_batch;
    mean.cls *= inv_batch;
    mean.ess *= inv_batch;
    if (!std::isfinite(mean.total)) throw NumericError("train: loss diverged (non-finite value)");

    for (std::size_t p = 0; p < n_params; ++p) {
      std::vector<double>& dst = grads[p];
      std::fill(dst.begin(), dst.end(), 0.0);
      for (int b = 0; b < tc.batch; ++b) {
        const std::vector<double>& src = slot_grads[static_cast<std::size_t>(b)][p];
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      }
      for (double& v : dst) v *= inv_batch;
    }
    adam_step(model.weights, grads, adam, tc.lr);
    result.curve.push_back(mean);

    if (tc.checkpoint_every > 0 && !tc.checkpoint_path.empty() &&
        (iter + 1) % tc.checkpoint_every == 0)
      save_checkpoint(tc.checkpoint_path, model, adam, sampler, iter + 1);
  }
  return result;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& path, const Model& model, const AdamState& adam,
                     const Rng& sampler, int iter) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for writing: " + path);
  out << "bclnet-checkpoint v1\n";
  out << "iter " << iter << "\n";
  out << "adam_step " << adam.step << "\n";
  out << "rng " << sampler.save_state() << "\n";
  out << "config " << model.cfg.to_json() << "\n";
  out << "params " << model.weights.size() << "\n";
  const auto& entries = model.weights.entries();
  for (std::size_t p = 0; p < entries.size(); ++p) {
    const auto& [name, t] = entries[p];
    out << "param " << name << " " << t.rank();
    for (int dd : t.shape()) out << " " << dd;
    out << "\n";
    auto dump = [&out](const double* v, std::size_t n) {
      for (std::size_t i = 0; i < n; ++i) {
        if (i) out << " ";
        out << format_double(v[i]);
      }
      out << "\n";
    };
    dump(t.data(), t.numel());
    dump(adam.m[p].data(), adam.m[p].size());
    dump(adam.v[p].data(), adam.v[p].size());
  }
  if (!out) throw DataError("write failed: " + path);
}

int load_checkpoint(const std::string& path, Model& model, AdamState& adam, Rng& sampler) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + path);
  std::string line;
  auto next = [&](const char* what) {
    if (!std::getline(in, line)) throw DataError(path + ": unexpected end of file, expected " + std::string(what));
  };
  next("header");
  if (line != "bclnet-checkpoint v1") throw DataError(path + ": unknown checkpoint version");
  int iter = 0;
  next("iter");
  if (std::sscanf(line.c_str(), "iter %d", &iter) != 1) throw DataError(path + ": malformed iter line");
  next("adam_step");
  long step = 0;
  if (std::sscanf(line.c_str(), "adam_step %ld", &step) != 1)
    throw DataError(path + ": malformed adam_step line");
  next("rng");
  if (line.rfind("rng ", 0) != 0) throw DataError(path + ": malformed rng line");
  sampler.load_state(line.substr(4));
  next("config");
  if (line.rfind("config ", 0) != 0) throw DataError(path + ": malformed config line");
  next("params");
  std::size_t count = 0;
  {
    std::istringstream is(line);
    std::string key;
    if (!(is >> key >> count) || key != "params" || count != model.weights.size())
      throw DataError(path + ": parameter count mismatch");
  }
  adam.init(model.weights);
  adam.step = step;
  for (std::size_t p = 0; p < count; ++p) {
    next("param header");
    std::istringstream is(line);
    std::string key, name;
    if (!(is >> key >> name) || key != "param") throw DataError(path + ": malformed param header");
    Tensor& t = const_cast<Tensor&>(model.weights.entries()[p].second);
    if (name != model.weights.entries()[p].first) throw DataError(path + ": parameter order mismatch");
    auto read_line = [&](double* dst, std::size_t n) {
      next("values");
      std::istringstream vs(line);
      for (std::size_t i = 0; i < n; ++i)
        if (!(vs >> dst[i])) throw DataError(path + ": malformed value line for " + name);
    };
    read_line(t.data(), t.numel());
    read_line(adam.m[p].data(), adam.m[p].size());
    read_line(adam.v[p].data(), adam.v[p].size());
  }
  return iter;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

EvalReport report_from_outcomes(const std::vector<SceneOutcome>& outcomes) {
  EvalReport rep;
  long tp = 0, fp = 0, fn = 0;
  for (const SceneOutcome& o : outcomes) {
    if (o.final_probs.size() != o.labels.size())
      throw ShapeError("evaluate: probability/label count mismatch");
    for (std::size_t i = 0; i < o.labels.size(); ++i) {
      const bool pred = o.final_probs[i] >= 0.5;
      if (pred && o.labels[i]) ++tp;
      else if (pred && !o.labels[i]) ++fp;
      else if (!pred && o.labels[i]) ++fn;
    }
    rep.scenes.push_back({o.rot_deg, o.trans_deg, o.n_kept});
  }
  rep.precision = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  rep.recall = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  rep.fscore = rep.precision + rep.recall > 0.0
                   ? 2.0 * rep.precision * rep.recall / (rep.precision + rep.recall)
                   : 0.0;
  auto map_at = [&rep](double max_thr) {
    if (rep.scenes.empty()) return 0.0;
    double acc = 0.0;
    int steps = 0;
    for (double thr = 5.0; thr <= max_thr + 1e-9; thr += 5.0) {
      int below = 0;
      for (const SceneAngular& s : rep.scenes)
        if (std::max(s.rot_deg, s.trans_deg) < thr) ++below;
      acc += static_cast<double>(below) / static_cast<double>(rep.scenes.size());
      ++steps;
    }
    return acc / steps;
  };
  rep.map5 = map_at(5.0);
  rep.map20 = map_at(20.0);
  return rep;
}

EvalReport evaluate(const Model& model, const std::vector<SyntheticScene>& scenes) {
  if (scenes.empty()) throw DataError("evaluate: empty dataset");
  std::vector<SceneOutcome> outcomes(scenes.size());
  parallel_for(scenes.size(), [&](std::size_t s0, std::size_t s1) {
    NoGradGuard ng;
    for (std::size_t s = s0; s < s1; ++s) {
      const SyntheticScene& scene = scenes[s];
      if (!scene.correspondences.has_labels()) throw DataError("evaluate: unlabeled scene");
      SceneOutcome& o = outcomes[s];
      o.labels = scene.correspondences.labels;
      try {
        PipelineResult res = run_bclnet(model, scene.correspondences);
        auto [rot, trans] = angular_errors(res.pose, scene.gt_pose);
        o.final_probs = res.final_probs;
        o.rot_deg = rot;
        o.trans_deg = trans;
        o.n_kept = static_cast<int>(res.stage2.kept_set.size());
      } catch (const NumericError&) {
        o.final_probs.assign(scene.correspondences.size(), 0.0);
        o.rot_deg = o.trans_deg = 180.0;
        o.n_kept = 0;
      }
    }
  });
  return report_from_outcomes(outcomes);
}

void write_report(const std::string& path, const EvalReport& report, const std::string& config_json) {
  nlohmann::json j;
  j["precision"] = report.precision;
  j["recall"] = report.recall;
  j["fscore"] = report.fscore;
  j["map5"] = report.map5;
  j["map20"] = report.map20;
  j["scenes"] = nlohmann::json::array();
  for (const SceneAngular& s : report.scenes)
    j["scenes"].push_back({{"rot_deg", s.rot_deg}, {"trans_deg", s.trans_deg}, {"n_kept", s.n_kept}});
  if (!config_json.empty()) j["config"] = nlohmann::json::parse(config_json);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for writing: " + path);
  out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// RANSAC baseline
// ---------------------------------------------------------------------------

PipelineResult ransac_baseline(const CorrespondenceSet& c, int iters, double threshold,
                               std::uint64_t seed) {
  const std::size_t n = c.size();
  if (n < 8) throw NumericError("ransac: need at least 8 correspondences");
  if (iters < 1) throw ConfigError("ransac: need at least one iteration");
  Rng rng(seed);

  std::vector<double> sample_w(n, 0.0);
  long best_count = -1;
  std::vector<std::uint8_t> best_mask(n, 0);
  for (int it = 0; it < iters; ++it) {
    // 8 distinct indices
    std::array<std::size_t, 8> pick{};
    int filled = 0;
    while (filled < 8) {
      std::size_t idx = rng.index(n);
      bool dup = false;
      for (int j = 0; j < filled; ++j)
        if (pick[static_cast<std::size_t>(j)] == idx) dup = true;
      if (!dup) pick[static_cast<std::size_t>(filled++)] = idx;
    }
    std::fill(sample_w.begin(), sample_w.end(), 0.0);
    for (std::size_t idx : pick) sample_w[idx] = 1.0;
    EssentialMatrix e;
    try {
      e = weighted_eight_point(c, sample_w);
    } catch (const NumericError&) {
      continue;  // degenerate sample
    }
    long count = 0;
    std::vector<std::uint8_t> mask(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
      if (epipolar_residual(e, c.items[i]) < threshold) {
        mask[i] = 1;
        ++count;
      }
    }
    if (count > best_count) {
      best_count = count;
      best_mask = std::move(mask);
    }
  }
  if (best_count < 8) throw NumericError("ransac: no model with at least 8 inliers");

  // final re-fit on the consensus set
  std::vector<double> refit_w(n, 0.0);
  std::vector<int> consensus;
  for (std::size_t i = 0; i < n; ++i)
    if (best_mask[i]) {
      refit_w[i] = 1.0;
      consensus.push_back(static_cast<int>(i));
    }
  PipelineResult res;
  res.e_hat = weighted_eight_point(c, refit_w);
  CorrespondenceSet support;
  for (int i : consensus) support.items.push_back(c.items[static_cast<std::size_t>(i)]);
  res.pose = decompose_essential(res.e_hat, support);
  auto [probs, residuals] = full_size_verification(res.e_hat, c, threshold);
  res.final_probs = std::move(probs);
  res.residuals = std::move(residuals);
  res.stage2.kept_indices = consensus;
  res.stage2.kept_set = std::move(support);
  return res;
}

}  // namespace bclnet
