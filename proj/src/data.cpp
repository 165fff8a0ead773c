#include "bclnet/data.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace bclnet {

namespace {

std::array<double, 9> axis_angle_rotation(const std::array<double, 3>& axis, double angle) {
  const double c = std::cos(angle), s = std::sin(angle), t = 1.0 - c;
  const double x = axis[0], y = axis[1], z = axis[2];
  return {t * x * x + c,     t * x * y - s * z, t * x * z + s * y,
          t * x * y + s * z, t * y * y + c,     t * y * z - s * x,
          t * x * z - s * y, t * y * z + s * x, t * z * z + c};
}

std::array<double, 3> random_unit_vector(Rng& rng) {
  for (;;) {
    std::array<double, 3> v{rng.normal(), rng.normal(), rng.normal()};
    double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    if (n > 1e-6) return {v[0] / n, v[1] / n, v[2] / n};
  }
}

}  // namespace

SyntheticScene generate_scene(int n, double outlier_rate, double noise_sigma, std::uint64_t seed) {
  if (n < 1) throw ConfigError("generate_scene: n must be positive");
  if (outlier_rate < 0.0 || outlier_rate >= 1.0)
    throw ConfigError("generate_scene: outlier_rate must lie in [0, 1)");
  if (noise_sigma < 0.0) throw ConfigError("generate_scene: noise_sigma must be nonnegative");

  Rng rng(seed);
  SyntheticScene scene;
  scene.n = n;
  scene.outlier_rate = outlier_rate;
  scene.noise_sigma = noise_sigma;
  scene.seed = seed;

  const double max_angle = 30.0 * 3.14159265358979323846 / 180.0;
  scene.gt_pose.r = axis_angle_rotation(random_unit_vector(rng), rng.uniform(0.0, max_angle));
  scene.gt_pose.t = random_unit_vector(rng);
  scene.gt_e = essential_from_rt(scene.gt_pose);

  const int n_out = static_cast<int>(std::llround(n * outlier_rate));
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<std::uint8_t> is_outlier(n, 0);
  for (int i = 0; i < n_out; ++i) is_outlier[order[i]] = 1;

  scene.correspondences.items.resize(n);
  scene.correspondences.labels.resize(n);
  const auto& r = scene.gt_pose.r;
  const auto& t = scene.gt_pose.t;
  for (int i = 0; i < n; ++i) {
    double u = 0, v = 0, qx = 0, qy = 0;
    for (int attempt = 0;; ++attempt) {
      if (attempt >= 10000) throw NumericError("generate_scene: could not place a visible point");
      u = rng.uniform(-1.0, 1.0);
      v = rng.uniform(-1.0, 1.0);
      const double z = rng.uniform(4.0, 8.0);
      const double X = u * z, Y = v * z;
      const double x2c = r[0] * X + r[1] * Y + r[2] * z + t[0];
      const double y2c = r[3] * X + r[4] * Y + r[5] * z + t[1];
      const double z2c = r[6] * X + r[7] * Y + r[8] * z + t[2];
      if (z2c < 1.0) continue;  // behind or grazing the second camera
      qx = x2c / z2c;
      qy = y2c / z2c;
      if (std::abs(qx) > 3.0 || std::abs(qy) > 3.0) continue;
      break;
    }
    Correspondence c;
    c.x = u;
    c.y = v;
    if (is_outlier[i]) {
      c.x2 = rng.uniform(-1.0, 1.0);
      c.y2 = rng.uniform(-1.0, 1.0);
    } else {
      c.x2 = qx + (noise_sigma > 0.0 ? rng.normal(0.0, noise_sigma) : 0.0);
      c.y2 = qy + (noise_sigma > 0.0 ? rng.normal(0.0, noise_sigma) : 0.0);
    }
    scene.correspondences.items[i] = c;
    scene.correspondences.labels[i] = is_outlier[i] ? 0 : 1;
  }
  return scene;
}

// ---------------------------------------------------------------------------
// scene files
// ---------------------------------------------------------------------------

void write_scene(const SyntheticScene& scene, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for writing: " + path);
  out << "bclnet-scene v1\n";
  out << "n " << scene.n << "\n";
  out << "outlier_rate " << format_double(scene.outlier_rate) << "\n";
  out << "noise_sigma " << format_double(scene.noise_sigma) << "\n";
  out << "seed " << scene.seed << "\n";
  out << "pose_r";
  for (double v : scene.gt_pose.r) out << " " << format_double(v);
  out << "\npose_t";
  for (double v : scene.gt_pose.t) out << " " << format_double(v);
  out << "\ne";
  for (double v : scene.gt_e.m) out << " " << format_double(v);
  out << "\n";
  for (int i = 0; i < scene.n; ++i) {
    const Correspondence& c = scene.correspondences.items[i];
    out << format_double(c.x) << " " << format_double(c.y) << " " << format_double(c.x2) << " "
        << format_double(c.y2) << " " << int(scene.correspondences.labels[i]) << "\n";
  }
  if (!out) throw DataError("write failed: " + path);
}

namespace {

[[noreturn]] void parse_fail(const std::string& path, int line, const std::string& what) {
  throw DataError(path + ":" + std::to_string(line) + ": " + what);
}

}  // namespace

SyntheticScene read_scene(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + path);
  std::string line;
  int lineno = 0;
  auto next_line = [&](const char* what) {
    if (!std::getline(in, line)) parse_fail(path, lineno + 1, std::string("unexpected end of file, expected ") + what);
    ++lineno;
  };

  next_line("header");
  if (line != "bclnet-scene v1") parse_fail(path, lineno, "unknown scene file version: '" + line + "'");

  SyntheticScene scene;
  auto parse_kv = [&](const char* key) -> std::string {
    next_line(key);
    std::istringstream is(line);
    std::string k;
    is >> k;
    if (k != key) parse_fail(path, lineno, std::string("expected '") + key + "', got '" + k + "'");
    std::string rest;
    std::getline(is, rest);
    return rest;
  };

  try {
    scene.n = std::stoi(parse_kv("n"));
    scene.outlier_rate = std::stod(parse_kv("outlier_rate"));
    scene.noise_sigma = std::stod(parse_kv("noise_sigma"));
    scene.seed = std::stoull(parse_kv("seed"));
  } catch (const std::logic_error&) {
    parse_fail(path, lineno, "malformed header value");
  }
  if (scene.n < 1) parse_fail(path, lineno, "scene has no correspondences");

  auto parse_vec = [&](const char* key, double* dst, int count) {
    next_line(key);
    std::istringstream is(line);
    std::string k;
    is >> k;
    if (k != key) parse_fail(path, lineno, std::string("expected '") + key + "'");
    for (int i = 0; i < count; ++i)
      if (!(is >> dst[i])) parse_fail(path, lineno, "malformed numeric field");
  };
  parse_vec("pose_r", scene.gt_pose.r.data(), 9);
  parse_vec("pose_t", scene.gt_pose.t.data(), 3);
  parse_vec("e", scene.gt_e.m.data(), 9);

  scene.correspondences.items.resize(scene.n);
  scene.correspondences.labels.resize(scene.n);
  for (int i = 0; i < scene.n; ++i) {
    next_line("correspondence");
    std::istringstream is(line);
    Correspondence& c = scene.correspondences.items[i];
    int label = 0;
    if (!(is >> c.x >> c.y >> c.x2 >> c.y2 >> label))
      parse_fail(path, lineno, "malformed correspondence line");
    if (label != 0 && label != 1) parse_fail(path, lineno, "label must be 0 or 1");
    scene.correspondences.labels[i] = static_cast<std::uint8_t>(label);
  }
  scene.correspondences.validate();
  return scene;
}

// ---------------------------------------------------------------------------
// dataset manifest
// ---------------------------------------------------------------------------

void write_manifest(const std::string& dir, const DatasetManifest& m) {
  nlohmann::json j;
  j["scenes"] = m.scenes;
  j["n"] = m.n;
  j["outlier_rate"] = m.outlier_rate;
  j["noise_sigma"] = m.noise_sigma;
  j["seed"] = m.seed;
  j["split"] = {{"train", m.train_files}, {"test", m.test_files}};
  if (!m.config_json.empty()) j["config"] = nlohmann::json::parse(m.config_json);
  std::ofstream out(dir + "/manifest.json", std::ios::binary);
  if (!out) throw DataError("cannot open for writing: " + dir + "/manifest.json");
  out << j.dump(2) << "\n";
}

DatasetManifest read_manifest(const std::string& dir) {
  std::ifstream in(dir + "/manifest.json", std::ios::binary);
  if (!in) throw DataError("cannot open: " + dir + "/manifest.json");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(dir + "/manifest.json: " + e.what());
  }
  DatasetManifest m;
  try {
    m.scenes = j.at("scenes").get<int>();
    m.n = j.at("n").get<int>();
    m.outlier_rate = j.at("outlier_rate").get<double>();
    m.noise_sigma = j.at("noise_sigma").get<double>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.train_files = j.at("split").at("train").get<std::vector<std::string>>();
    m.test_files = j.at("split").at("test").get<std::vector<std::string>>();
    if (j.contains("config")) m.config_json = j["config"].dump();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(dir + "/manifest.json: " + e.what());
  }
  return m;
}

Dataset load_dataset(const std::string& dir) {
  Dataset ds;
  ds.manifest = read_manifest(dir);
  ds.train.reserve(ds.manifest.train_files.size());
  for (const std::string& f : ds.manifest.train_files) ds.train.push_back(read_scene(dir + "/" + f));
  ds.test.reserve(ds.manifest.test_files.size());
  for (const std::string& f : ds.manifest.test_files) ds.test.push_back(read_scene(dir + "/" + f));
  return ds;
}

}  // namespace bclnet
