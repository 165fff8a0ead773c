#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <numeric>

#include "bclnet/blocks.hpp"

using namespace bclnet;

namespace {

void zero_param(Tensor& t) {
  for (double& v : t.values()) v = 0.0;
}

Tensor random_input(int n, int d, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor::uniform({n, d}, rng, -1.0, 1.0);
}

// max |a - pi(b)| after permuting rows of the base output
double equivariance_gap(const Tensor& base, const Tensor& permuted, const std::vector<int>& perm) {
  double worst = 0.0;
  for (int i = 0; i < permuted.rows(); ++i)
    for (int j = 0; j < permuted.cols(); ++j)
      worst = std::max(worst, std::abs(permuted(i, j) - base(perm[static_cast<std::size_t>(i)], j)));
  return worst;
}

std::vector<int> random_perm(int n, std::uint64_t seed) {
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed);
  rng.shuffle(perm);
  return perm;
}

// check d(loss)/d(x) for a block forward against central differences
double block_gradient_error(const std::function<Tensor(const Tensor&)>& fwd, int n, int d,
                            std::uint64_t seed) {
  Rng rng(seed);
  for (int attempt = 0; attempt < 32; ++attempt) {
    Tensor x = Tensor::uniform({n, d}, rng, -1.0, 1.0);
    double margin;
    {
      NoGradGuard ng;
      KinkMeterScope meter;
      (void)fwd(x);
      margin = meter.min_margin();
    }
    if (margin < 1.0) continue;
    return check_gradient(fwd, x, 1e-6);
  }
  throw NumericError("no smooth point found for block gradient check");
}

}  // namespace

TEST_CASE("resnet block: zero weights give the identity map") {
  ModelWeights mw;
  Rng init(1);
  ResnetBlock res = make_resnet(mw, "res", 8, init);
  zero_param(res.fc1.w);
  zero_param(res.fc1.b);
  zero_param(res.fc2.w);
  zero_param(res.fc2.b);
  Tensor x = random_input(12, 8, 3);
  Tensor y = res.forward(x);
  REQUIRE(y.shape() == x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("resnet block: shape preserved and gradient contract") {
  ModelWeights mw;
  Rng init(2);
  ResnetBlock res = make_resnet(mw, "res", 6, init);
  Tensor x = random_input(20, 6, 4);
  CHECK(res.forward(x).shape() == std::vector<int>{20, 6});
  double err = block_gradient_error([&res](const Tensor& in) { return res.forward(in); }, 10, 6, 5);
  CHECK(err < 1e-4);
}

TEST_CASE("bcma: zero output projection reduces to norm + resnet of x") {
  ModelWeights mw;
  Rng init(3);
  BcmaBlock bcma = make_bcma(mw, "bcma", 8, 4, 2, init);
  zero_param(bcma.wp.w);
  zero_param(bcma.wp.b);
  Tensor x = random_input(16, 8, 6);
  Tensor got = bcma.forward(x);
  Tensor want = bcma.res.forward(bcma.ln2.forward(layer_norm_core(x)));
  REQUIRE(got.shape() == want.shape());
  for (std::size_t i = 0; i < got.numel(); ++i)
    CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
}

TEST_CASE("bcma: shape, and error on too-small sets") {
  ModelWeights mw;
  Rng init(4);
  BcmaBlock bcma = make_bcma(mw, "bcma", 8, 6, 3, init);
  Tensor x = random_input(30, 8, 7);
  Tensor y = bcma.forward(x);
  CHECK(y.shape() == std::vector<int>{30, 8});
  CHECK_THROWS_AS(bcma.forward(random_input(6, 8, 8)), ConfigError);
}

TEST_CASE("bcma gradient contract") {
  ModelWeights mw;
  Rng init(5);
  BcmaBlock bcma = make_bcma(mw, "bcma", 6, 4, 2, init);
  double err =
      block_gradient_error([&bcma](const Tensor& in) { return bcma.forward(in); }, 12, 6, 9);
  CHECK(err < 1e-4);
}

TEST_CASE("bcma flop count scales sub-quadratically when doubling N") {
  ModelWeights mw;
  Rng init(6);
  BcmaBlock bcma = make_bcma(mw, "bcma", 128, 9, 3, init);
  NoGradGuard ng;
  auto count_at = [&bcma](int n) {
    Tensor x = random_input(n, 128, 1000 + static_cast<std::uint64_t>(n));
    FlopCounterScope counter;
    (void)bcma.forward(x);
    return static_cast<double>(counter.total());
  };
  double f256 = count_at(256);
  double f512 = count_at(512);
  double ratio = f512 / f256;
  INFO("flops 256 -> " << f256 << ", 512 -> " << f512 << ", ratio " << ratio);
  CHECK(ratio <= 2.2);
}

TEST_CASE("bcr: neutral gate halves the input; trailing resnets zeroed") {
  ModelWeights mw;
  Rng init(7);
  BcrBlock bcr = make_bcr(mw, "bcr", 8, 4, 2, 4, init);
  // zero everything feeding the gate so its pre-activation is exactly 0
  zero_param(bcr.down.w);
  zero_param(bcr.down.b);
  zero_param(bcr.up.w);
  zero_param(bcr.up.b);
  zero_param(bcr.agg.w1);
  zero_param(bcr.agg.b1);
  zero_param(bcr.agg.w2);
  zero_param(bcr.agg.b2);
  for (ResnetBlock* r : {&bcr.res0, &bcr.res1, &bcr.res2}) {
    zero_param(r->fc1.w);
    zero_param(r->fc1.b);
    zero_param(r->fc2.w);
    zero_param(r->fc2.b);
  }
  Tensor x = random_input(14, 8, 11);
  Tensor y = bcr.forward(x);
  for (std::size_t i = 0; i < x.numel(); ++i)
    CHECK(y[i] == doctest::Approx(0.5 * x[i]).epsilon(1e-15));
}

TEST_CASE("bcr gate is non-expansive elementwise") {
  ModelWeights mw;
  Rng init(8);
  BcrBlock bcr = make_bcr(mw, "bcr", 8, 4, 2, 2, init);
  // zero only the trailing resnets so the gated map is observable
  for (ResnetBlock* r : {&bcr.res0, &bcr.res1, &bcr.res2}) {
    zero_param(r->fc1.w);
    zero_param(r->fc1.b);
    zero_param(r->fc2.w);
    zero_param(r->fc2.b);
  }
  Tensor x = random_input(25, 8, 12);
  Tensor y = bcr.forward(x);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    CHECK(std::abs(y[i]) <= std::abs(x[i]));
    if (x[i] != 0.0) CHECK(std::abs(y[i]) > 0.0);  // gate strictly inside (0,1)
  }
}

TEST_CASE("bcr gradient contract") {
  ModelWeights mw;
  Rng init(9);
  BcrBlock bcr = make_bcr(mw, "bcr", 8, 4, 2, 4, init);
  double err = block_gradient_error([&bcr](const Tensor& in) { return bcr.forward(in); }, 12, 8, 13);
  CHECK(err < 1e-4);
}

TEST_CASE("bcr shape errors") {
  ModelWeights mw;
  Rng init(10);
  CHECK_THROWS_AS(make_bcr(mw, "bad", 8, 4, 2, 3, init), ConfigError);  // 3 does not divide 8
}

TEST_CASE("oa: uniform assignments make the unpooled contribution row-constant") {
  ModelWeights mw;
  Rng init(11);
  OaBlock oa = make_oa(mw, "oa", 6, 5, init);
  zero_param(oa.assign.w);
  zero_param(oa.assign.b);
  Tensor x = random_input(18, 6, 14);
  Tensor y = oa.forward(x);
  REQUIRE(y.shape() == x.shape());
  // y - x = out(unpooled) with identical rows
  for (int i = 1; i < 18; ++i)
    for (int j = 0; j < 6; ++j)
      CHECK(y(i, j) - x(i, j) == doctest::Approx(y(0, j) - x(0, j)).epsilon(1e-12));
}

TEST_CASE("oa: output shape for various cluster counts and gradient") {
  ModelWeights mw;
  Rng init(12);
  for (int m : {2, 7, 40}) {
    OaBlock oa = make_oa(mw, "oa" + std::to_string(m), 6, m, init);
    CHECK(oa.forward(random_input(15, 6, 20 + static_cast<std::uint64_t>(m))).shape() ==
          std::vector<int>{15, 6});
  }
  OaBlock oa = make_oa(mw, "oagrad", 6, 4, init);
  double err = block_gradient_error([&oa](const Tensor& in) { return oa.forward(in); }, 10, 6, 15);
  CHECK(err < 1e-4);
}

TEST_CASE("bilateral module: shape, ablation equivalence, OA-only dependence") {
  BlockConfig cfg;
  cfg.d = 8;
  cfg.k = 4;
  cfg.g_groups = 2;
  cfg.clusters = 5;
  cfg.reduction = 4;

  ModelWeights mw;
  Rng init(13);
  BilateralModule full = make_bilateral(mw, "bcl", cfg, false, init);
  Tensor x = random_input(20, 8, 16);
  CHECK(full.forward(x).shape() == std::vector<int>{20, 8});

  // zero the BCMA branch output: post-attention norm affine and resnet
  zero_param(full.bcma.ln2.scale);
  zero_param(full.bcma.ln2.shift);
  zero_param(full.bcma.res.fc1.w);
  zero_param(full.bcma.res.fc1.b);
  zero_param(full.bcma.res.fc2.w);
  zero_param(full.bcma.res.fc2.b);
  Tensor zeroed = full.forward(x);

  ModelWeights mw2;
  Rng init2(13);  // same init stream -> same OA/fuse/BCR weights
  BilateralModule ablated = make_bilateral(mw2, "bcl", cfg, true, init2);
  Tensor disabled = ablated.forward(x);
  REQUIRE(zeroed.numel() == disabled.numel());
  for (std::size_t i = 0; i < zeroed.numel(); ++i)
    CHECK(zeroed[i] == doctest::Approx(disabled[i]).epsilon(1e-12));

  // with the branch zeroed, q/k/v weights cannot influence the output
  for (double& v : full.bcma.q.w.values()) v += 0.37;
  Tensor perturbed = full.forward(x);
  for (std::size_t i = 0; i < zeroed.numel(); ++i) CHECK(perturbed[i] == zeroed[i]);
}

TEST_CASE("bilateral module gradient contract") {
  BlockConfig cfg;
  cfg.d = 6;
  cfg.k = 4;
  cfg.g_groups = 2;
  cfg.clusters = 4;
  cfg.reduction = 2;
  ModelWeights mw;
  Rng init(14);
  BilateralModule m = make_bilateral(mw, "bcl", cfg, false, init);
  double err = block_gradient_error([&m](const Tensor& in) { return m.forward(in); }, 12, 6, 17);
  CHECK(err < 1e-4);
}

TEST_CASE("every block is permutation-equivariant along the set axis") {
  BlockConfig cfg;
  cfg.d = 8;
  cfg.k = 4;
  cfg.g_groups = 2;
  cfg.clusters = 6;
  cfg.reduction = 4;
  ModelWeights mw;
  Rng init(15);
  ResnetBlock res = make_resnet(mw, "res", cfg.d, init);
  BcmaBlock bcma = make_bcma(mw, "bcma", cfg.d, cfg.k, cfg.g_groups, init);
  OaBlock oa = make_oa(mw, "oa", cfg.d, cfg.clusters, init);
  BcrBlock bcr = make_bcr(mw, "bcr", cfg.d, cfg.k, cfg.g_groups, cfg.reduction, init);
  BilateralModule bcl = make_bilateral(mw, "bcl", cfg, false, init);

  const int n = 24;
  Tensor x = random_input(n, cfg.d, 18);
  std::vector<int> perm = random_perm(n, 19);
  Tensor xp = gather_rows(x, perm);

  auto check_block = [&](const char* name, const std::function<Tensor(const Tensor&)>& fwd) {
    double gap = equivariance_gap(fwd(x), fwd(xp), perm);
    INFO(name);
    CHECK(gap <= 1e-9);
  };
  check_block("resnet", [&](const Tensor& in) { return res.forward(in); });
  check_block("bcma", [&](const Tensor& in) { return bcma.forward(in); });
  check_block("oa", [&](const Tensor& in) { return oa.forward(in); });
  check_block("bcr", [&](const Tensor& in) { return bcr.forward(in); });
  check_block("bilateral", [&](const Tensor& in) { return bcl.forward(in); });
}

TEST_CASE("bcma similarity rows sum to one") {
  // reproduce the attention internals on a small instance
  ModelWeights mw;
  Rng init(16);
  const int d = 6, k = 4, groups = 2, n = 15;
  BcmaBlock bcma = make_bcma(mw, "bcma", d, k, groups, init);
  Tensor x = random_input(n, d, 22);
  Tensor xn = bcma.ln1.forward(layer_norm_core(x));
  auto local = [&](const LinearLayer& lin, const AnnularWeights& w) {
    Tensor f = lin.forward(xn);
    return annular_aggregate(edge_features(f, knn_search(f, k)), groups, w);
  };
  Tensor sim = softmax(
      scale_scalar(matmul(transpose(local(bcma.q, bcma.agg_q)), local(bcma.k, bcma.agg_k)),
                   bcma.alpha),
      1);
  REQUIRE(sim.shape() == std::vector<int>{d, d});
  for (int i = 0; i < d; ++i) {
    double sum = 0.0;
    for (int j = 0; j < d; ++j) sum += sim(i, j);
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
}

TEST_CASE("weights store: save/load round trip is bit exact") {
  BlockConfig cfg;
  cfg.d = 8;
  cfg.k = 4;
  cfg.g_groups = 2;
  cfg.clusters = 4;
  cfg.reduction = 4;
  ModelWeights mw;
  Rng init(20);
  (void)make_bilateral(mw, "bcl", cfg, false, init);

  const std::string path = "/tmp/bclnet_test_weights.txt";
  mw.save(path, "{\"d\":8}");
  std::string cfg_json;
  ModelWeights loaded = ModelWeights::load(path, &cfg_json);
  CHECK(cfg_json == "{\"d\":8}");
  REQUIRE(loaded.size() == mw.size());
  for (std::size_t p = 0; p < mw.size(); ++p) {
    const auto& [name, t] = mw.entries()[p];
    const auto& [lname, lt] = loaded.entries()[p];
    CHECK(name == lname);
    REQUIRE(t.shape() == lt.shape());
    for (std::size_t i = 0; i < t.numel(); ++i) CHECK(t[i] == lt[i]);
  }
}

TEST_CASE("weights store rejects malformed files") {
  const std::string path = "/tmp/bclnet_bad_weights.txt";
  {
    std::FILE* f = std::fopen(path.c_str(), "w");
    std::fputs("bclnet-weights v99\n", f);
    std::fclose(f);
  }
  CHECK_THROWS_AS(ModelWeights::load(path), DataError);
}

TEST_CASE("block config validation") {
  BlockConfig bad;
  bad.d = 7;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = BlockConfig{};
  bad.g_groups = 4;  // does not divide 9
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = BlockConfig{};
  bad.clusters = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = BlockConfig{};
  bad.reduction = 5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}
