#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "bclnet/data.hpp"
#include "bclnet/traineval.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunConfig {
  int n_corr = 2000;
  int d = 128;
  int k1 = 9, k2 = 6;
  int g1 = 3, g2 = 2;
  int clusters = 150;
  int reduction = 4;
  double tau_v = 1e-4;
  double lr = 1e-3;
  int batch = 8;
  int iters = 3000;
  std::uint64_t seed = 0;
  bool disable_bcma = false;

  bclnet::PipelineConfig pipeline() const {
    bclnet::PipelineConfig p;
    p.d = d;
    p.k1 = k1;
    p.g1 = g1;
    p.k2 = k2;
    p.g2 = g2;
    p.clusters = clusters;
    p.reduction = reduction;
    p.tau_v = tau_v;
    p.disable_bcma = disable_bcma;
    return p;
  }

  json to_json() const {
    json j;
    j["n_corr"] = n_corr;
    j["d"] = d;
    j["k1"] = k1;
    j["k2"] = k2;
    j["g1"] = g1;
    j["g2"] = g2;
    j["clusters"] = clusters;
    j["reduction"] = reduction;
    j["tau_v"] = tau_v;
    j["lr"] = lr;
    j["batch"] = batch;
    j["iters"] = iters;
    j["seed"] = seed;
    j["disable_bcma"] = disable_bcma;
    return j;
  }

  void load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw bclnet::ConfigError("cannot open config file: " + path);
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw bclnet::ConfigError(path + ": " + e.what());
    }
    n_corr = j.value("n_corr", n_corr);
    d = j.value("d", d);
    k1 = j.value("k1", k1);
    k2 = j.value("k2", k2);
    g1 = j.value("g1", g1);
    g2 = j.value("g2", g2);
    clusters = j.value("clusters", clusters);
    reduction = j.value("reduction", reduction);
    tau_v = j.value("tau_v", tau_v);
    lr = j.value("lr", lr);
    batch = j.value("batch", batch);
    iters = j.value("iters", iters);
    seed = j.value("seed", seed);
    disable_bcma = j.value("disable_bcma", disable_bcma);
  }
};

void add_model_flags(CLI::App* cmd, RunConfig& rc) {
  cmd->add_option("--d", rc.d, "channel width");
  cmd->add_option("--k1", rc.k1, "stage-1 neighbor count");
  cmd->add_option("--k2", rc.k2, "stage-2 neighbor count");
  cmd->add_option("--g1", rc.g1, "stage-1 group count");
  cmd->add_option("--g2", rc.g2, "stage-2 group count");
  cmd->add_option("--clusters", rc.clusters, "pooling cluster count");
  cmd->add_option("--reduction", rc.reduction, "channel bottleneck ratio");
  cmd->add_option("--tau-v", rc.tau_v, "verification residual threshold");
  cmd->add_flag("--disable-bcma", rc.disable_bcma, "zero the BCMA branch (ablation)");
}

std::vector<const bclnet::SyntheticScene*> pick_split(const bclnet::Dataset& ds,
                                                      const std::string& split) {
  std::vector<const bclnet::SyntheticScene*> out;
  auto push = [&out](const std::vector<bclnet::SyntheticScene>& v) {
    for (const auto& s : v) out.push_back(&s);
  };
  if (split == "train") push(ds.train);
  else if (split == "test") push(ds.test);
  else if (split == "all") {
    push(ds.train);
    push(ds.test);
  } else {
    throw bclnet::ConfigError("unknown split: " + split + " (use train|test|all)");
  }
  if (out.empty()) throw bclnet::DataError("split '" + split + "' holds no scenes");
  return out;
}

std::vector<bclnet::SyntheticScene> deref(const std::vector<const bclnet::SyntheticScene*>& v) {
  std::vector<bclnet::SyntheticScene> out;
  out.reserve(v.size());
  for (auto* p : v) out.push_back(*p);
  return out;
}

json pose_json(const bclnet::CameraPose& pose) {
  return {{"r", std::vector<double>(pose.r.begin(), pose.r.end())},
          {"t", std::vector<double>(pose.t.begin(), pose.t.end())}};
}

int run_gen(const RunConfig& rc, int scenes, int train_count, double outlier_rate, double noise,
            const std::string& out_dir) {
  if (scenes < 1) throw bclnet::ConfigError("gen: need at least one scene");
  if (train_count < 0 || train_count > scenes)
    throw bclnet::ConfigError("gen: train count must lie in [0, scenes]");
  fs::create_directories(out_dir);
  std::vector<std::string> names(static_cast<std::size_t>(scenes));
  bclnet::parallel_for(static_cast<std::size_t>(scenes), [&](std::size_t s0, std::size_t s1) {
    for (std::size_t s = s0; s < s1; ++s) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "scene_%05zu.txt", s);
      names[s] = buf;
      bclnet::SyntheticScene scene =
          bclnet::generate_scene(rc.n_corr, outlier_rate, noise, rc.seed + s);
      bclnet::write_scene(scene, out_dir + "/" + names[s]);
    }
  });
  bclnet::DatasetManifest m;
  m.scenes = scenes;
  m.n = rc.n_corr;
  m.outlier_rate = outlier_rate;
  m.noise_sigma = noise;
  m.seed = rc.seed;
  m.train_files.assign(names.begin(), names.begin() + train_count);
  m.test_files.assign(names.begin() + train_count, names.end());
  json cfg = rc.to_json();
  cfg["scenes"] = scenes;
  cfg["train"] = train_count;
  cfg["outlier_rate"] = outlier_rate;
  cfg["noise_sigma"] = noise;
  m.config_json = cfg.dump();
  bclnet::write_manifest(out_dir, m);
  std::cout << "wrote " << scenes << " scenes to " << out_dir << "\n";
  return 0;
}

int run_train(const RunConfig& rc, const std::string& data_dir, const std::string& out_weights,
              const std::string& curve_path, int checkpoint_every,
              const std::string& checkpoint_path, const std::string& resume,
              double lambda_value, double lambda_cutoff) {
  bclnet::Dataset ds = bclnet::load_dataset(data_dir);
  if (ds.train.empty()) throw bclnet::DataError("train: dataset has no training split");
  bclnet::Model model = bclnet::build_model(rc.pipeline(), rc.seed);

  bclnet::TrainConfig tc;
  tc.iters = rc.iters;
  tc.batch = rc.batch;
  tc.lr = rc.lr;
  tc.lambda_value = lambda_value;
  tc.lambda_cutoff_frac = lambda_cutoff;
  tc.seed = rc.seed;
  tc.checkpoint_every = checkpoint_every;
  tc.checkpoint_path = checkpoint_path;
  tc.resume_from = resume;
  bclnet::TrainResult result = bclnet::train(model, ds.train, tc);

  bclnet::save_model(model, out_weights);
  if (!curve_path.empty()) {
    std::ofstream curve(curve_path, std::ios::binary);
    if (!curve) throw bclnet::DataError("cannot open for writing: " + curve_path);
    curve << "# config: " << rc.to_json().dump() << "\n";
    curve << "iter,total,cls,ess,lambda\n";
    int iter0 = rc.iters - static_cast<int>(result.curve.size());
    for (std::size_t i = 0; i < result.curve.size(); ++i) {
      const auto& l = result.curve[i];
      curve << (iter0 + static_cast<int>(i)) << "," << bclnet::format_double(l.total) << ","
            << bclnet::format_double(l.cls) << "," << bclnet::format_double(l.ess) << ","
            << bclnet::format_double(l.lambda) << "\n";
    }
  }
  double final_total = result.curve.empty() ? 0.0 : result.curve.back().total;
  std::cout << "trained " << rc.iters << " iterations, final loss " << final_total << ", weights in "
            << out_weights << "\n";
  return 0;
}

int run_eval(const RunConfig& rc, const std::string& data_dir, const std::string& weights,
             const std::string& split, const std::string& out_path) {
  bclnet::Dataset ds = bclnet::load_dataset(data_dir);
  bclnet::Model model = bclnet::load_model(weights);
  std::vector<bclnet::SyntheticScene> scenes = deref(pick_split(ds, split));
  bclnet::EvalReport rep = bclnet::evaluate(model, scenes);
  json cfg = rc.to_json();
  cfg["split"] = split;
  cfg["model"] = json::parse(model.cfg.to_json());
  bclnet::write_report(out_path, rep, cfg.dump());
  std::cout << "precision " << rep.precision << " recall " << rep.recall << " fscore " << rep.fscore
            << " map5 " << rep.map5 << " map20 " << rep.map20 << "\n";
  return 0;
}

int run_prune(const RunConfig& rc, const std::string& scene_path, const std::string& weights,
              bool oracle, const std::string& out_path) {
  bclnet::SyntheticScene scene = bclnet::read_scene(scene_path);
  bclnet::PipelineResult res;
  json model_cfg;
  if (oracle) {
    if (!scene.correspondences.has_labels())
      throw bclnet::DataError("prune --oracle needs labeled correspondences");
    auto logit_fn = [](const bclnet::CorrespondenceSet& c, int) {
      std::vector<double> logits(c.size());
      for (std::size_t i = 0; i < c.size(); ++i) logits[i] = c.labels[i] ? 10.0 : -10.0;
      return logits;
    };
    res = bclnet::run_with_logits(scene.correspondences, logit_fn, rc.tau_v);
    model_cfg = {{"oracle", true}, {"tau_v", rc.tau_v}};
  } else {
    if (weights.empty()) throw bclnet::ConfigError("prune: --weights or --oracle required");
    bclnet::Model model = bclnet::load_model(weights);
    res = bclnet::run_bclnet(model, scene.correspondences);
    model_cfg = json::parse(model.cfg.to_json());
  }
  json j;
  json cfg = rc.to_json();
  cfg["model"] = model_cfg;
  j["config"] = cfg;
  j["kept_indices"] = res.stage2.kept_indices;
  j["n_kept"] = res.stage2.kept_indices.size();
  j["pose"] = pose_json(res.pose);
  j["e_hat"] = std::vector<double>(res.e_hat.m.begin(), res.e_hat.m.end());
  std::vector<double> bounded = res.residuals;
  for (double& v : bounded)
    if (!std::isfinite(v)) v = -1.0;  // JSON has no infinity; sentinel for degenerate rows
  j["residuals"] = bounded;
  j["probs"] = res.final_probs;
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw bclnet::DataError("cannot open for writing: " + out_path);
  out << j.dump(2) << "\n";
  std::cout << "kept " << res.stage2.kept_indices.size() << " of " << scene.correspondences.size()
            << " correspondences\n";
  return 0;
}

int run_baseline(const RunConfig& rc, const std::string& data_dir, const std::string& split,
                 int iters, double threshold, const std::string& out_path) {
  bclnet::Dataset ds = bclnet::load_dataset(data_dir);
  std::vector<bclnet::SyntheticScene> scenes = deref(pick_split(ds, split));
  std::vector<bclnet::SceneOutcome> outcomes(scenes.size());
  bclnet::parallel_for(scenes.size(), [&](std::size_t s0, std::size_t s1) {
    for (std::size_t s = s0; s < s1; ++s) {
      const bclnet::SyntheticScene& scene = scenes[s];
      bclnet::SceneOutcome& o = outcomes[s];
      o.labels = scene.correspondences.labels;
      try {
        bclnet::PipelineResult res =
            bclnet::ransac_baseline(scene.correspondences, iters, threshold, rc.seed + s);
        auto [rot, trans] = bclnet::angular_errors(res.pose, scene.gt_pose);
        o.final_probs = res.final_probs;
        o.rot_deg = rot;
        o.trans_deg = trans;
        o.n_kept = static_cast<int>(res.stage2.kept_indices.size());
      } catch (const bclnet::NumericError&) {
        o.final_probs.assign(scene.correspondences.size(), 0.0);
        o.rot_deg = o.trans_deg = 180.0;
        o.n_kept = 0;
      }
    }
  });
  bclnet::EvalReport rep = bclnet::report_from_outcomes(outcomes);
  json cfg = rc.to_json();
  cfg["split"] = split;
  cfg["ransac_iters"] = iters;
  cfg["ransac_threshold"] = threshold;
  bclnet::write_report(out_path, rep, cfg.dump());
  std::cout << "baseline precision " << rep.precision << " recall " << rep.recall << " fscore "
            << rep.fscore << " map5 " << rep.map5 << " map20 " << rep.map20 << "\n";
  return 0;
}

int run_bench(const RunConfig& rc, const std::string& sizes_csv, int repeats,
              const std::string& out_path) {
  std::vector<int> sizes;
  {
    std::stringstream ss(sizes_csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) sizes.push_back(std::stoi(tok));
  }
  if (sizes.empty()) throw bclnet::ConfigError("bench: no sizes given");

  bclnet::ModelWeights mw;
  bclnet::Rng init(rc.seed);
  bclnet::BcmaBlock block = bclnet::make_bcma(mw, "bench", rc.d, rc.k1, rc.g1, init);

  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw bclnet::DataError("cannot open for writing: " + out_path);
  out << "# config: " << rc.to_json().dump() << "\n";
  out << "n,ms\n";
  double prev = -1.0;
  for (int n : sizes) {
    bclnet::Rng data_rng(rc.seed + static_cast<std::uint64_t>(n));
    bclnet::Tensor x = bclnet::Tensor::uniform({n, rc.d}, data_rng, -1.0, 1.0);
    bclnet::NoGradGuard ng;
    (void)block.forward(x);  // warm up
    double best = std::numeric_limits<double>::infinity();
    for (int r = 0; r < repeats; ++r) {
      auto t0 = std::chrono::steady_clock::now();
      (void)block.forward(x);
      auto t1 = std::chrono::steady_clock::now();
      best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    out << n << "," << bclnet::format_double(best) << "\n";
    std::cout << "n=" << n << " best " << best << " ms";
    if (prev > 0.0) std::cout << " (x" << best / prev << " vs previous size)";
    std::cout << "\n";
    prev = best;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bilateral consensus correspondence pruning"};
  app.require_subcommand(1);

  RunConfig rc;
  // the config file seeds the defaults; explicit flags override it
  for (int i = 1; i + 1 < argc; ++i) {
    if (std::string(argv[i]) == "--config") {
      try {
        rc.load_file(argv[i + 1]);
      } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
      }
    }
  }
  std::string config_path;
  app.add_option("--config", config_path, "JSON config file (flags override)");

  // gen
  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  int gen_scenes = 50;
  int gen_train = -1;
  double gen_outlier = 0.6, gen_noise = 1e-3;
  std::string gen_out = "data";
  gen->add_option("--scenes", gen_scenes, "number of scenes");
  gen->add_option("--train", gen_train, "scenes assigned to the train split (default: all)");
  gen->add_option("--n", rc.n_corr, "correspondences per scene");
  gen->add_option("--outlier-rate", gen_outlier, "outlier fraction");
  gen->add_option("--noise", gen_noise, "image-2 noise sigma");
  gen->add_option("--seed", rc.seed, "base seed");
  gen->add_option("--out", gen_out, "output directory")->required();

  // train
  auto* tr = app.add_subcommand("train", "train a model");
  std::string tr_data, tr_out = "weights.txt", tr_curve = "", tr_ckpt = "", tr_resume = "";
  int tr_ckpt_every = 0;
  double tr_lambda = 0.5, tr_cutoff = 0.1;
  tr->add_option("--data", tr_data, "dataset directory")->required();
  tr->add_option("--out", tr_out, "weights output file");
  tr->add_option("--curve", tr_curve, "loss curve CSV output");
  tr->add_option("--iters", rc.iters, "training iterations");
  tr->add_option("--batch", rc.batch, "batch size");
  tr->add_option("--lr", rc.lr, "learning rate");
  tr->add_option("--lambda", tr_lambda, "essential-loss weight after the cutoff");
  tr->add_option("--lambda-cutoff", tr_cutoff, "fraction of iterations with lambda = 0");
  tr->add_option("--seed", rc.seed, "seed");
  tr->add_option("--checkpoint-every", tr_ckpt_every, "checkpoint interval (0 = off)");
  tr->add_option("--checkpoint", tr_ckpt, "checkpoint file path");
  tr->add_option("--resume", tr_resume, "resume from checkpoint");
  add_model_flags(tr, rc);

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a model");
  std::string ev_data, ev_weights, ev_split = "test", ev_out = "report.json";
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--weights", ev_weights, "weights file")->required();
  ev->add_option("--split", ev_split, "train|test|all");
  ev->add_option("--out", ev_out, "report JSON output");
  ev->add_option("--seed", rc.seed, "seed (echoed into the report)");

  // prune
  auto* pr = app.add_subcommand("prune", "prune one correspondence file");
  std::string pr_scene, pr_weights = "", pr_out = "prune.json";
  bool pr_oracle = false;
  pr->add_option("--scene", pr_scene, "scene file")->required();
  pr->add_option("--weights", pr_weights, "weights file");
  pr->add_flag("--oracle", pr_oracle, "use label-derived logits instead of a model");
  pr->add_option("--out", pr_out, "result JSON output");
  pr->add_option("--tau-v", rc.tau_v, "verification residual threshold");

  // baseline
  auto* bl = app.add_subcommand("baseline", "RANSAC baseline over a dataset");
  std::string bl_data, bl_split = "test", bl_out = "baseline.json";
  int bl_iters = 1000;
  double bl_threshold = 1e-4;
  bl->add_option("--data", bl_data, "dataset directory")->required();
  bl->add_option("--split", bl_split, "train|test|all");
  bl->add_option("--iters", bl_iters, "RANSAC iterations");
  bl->add_option("--threshold", bl_threshold, "inlier residual threshold");
  bl->add_option("--seed", rc.seed, "seed");
  bl->add_option("--out", bl_out, "report JSON output");

  // bench
  auto* bn = app.add_subcommand("bench", "time the attention block across sizes");
  std::string bn_sizes = "500,1000,2000", bn_out = "bench.csv";
  int bn_repeats = 5;
  bn->add_option("--sizes", bn_sizes, "comma-separated correspondence counts");
  bn->add_option("--repeats", bn_repeats, "repetitions per size (best kept)");
  bn->add_option("--d", rc.d, "channel width");
  bn->add_option("--seed", rc.seed, "seed");
  bn->add_option("--out", bn_out, "CSV output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (gen->parsed()) {
      int train_count = gen_train < 0 ? gen_scenes : gen_train;
      return run_gen(rc, gen_scenes, train_count, gen_outlier, gen_noise, gen_out);
    }
    if (tr->parsed())
      return run_train(rc, tr_data, tr_out, tr_curve, tr_ckpt_every, tr_ckpt, tr_resume, tr_lambda,
                       tr_cutoff);
    if (ev->parsed()) return run_eval(rc, ev_data, ev_weights, ev_split, ev_out);
    if (pr->parsed()) return run_prune(rc, pr_scene, pr_weights, pr_oracle, pr_out);
    if (bl->parsed()) return run_baseline(rc, bl_data, bl_split, bl_iters, bl_threshold, bl_out);
    if (bn->parsed()) return run_bench(rc, bn_sizes, bn_repeats, bn_out);
  } catch (const bclnet::ConfigError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const bclnet::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const bclnet::NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
