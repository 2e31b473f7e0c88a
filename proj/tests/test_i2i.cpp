#include <cmath>
#include <filesystem>
#include <vector>

#include "doctest.h"
#include "modaseg/i2i.hpp"
#include "modaseg/rng.hpp"

using namespace modaseg;
namespace fs = std::filesystem;

namespace {

std::vector<double> random_unit_rows(int n, int dim, Rng& rng) {
  std::vector<double> v(std::size_t(n) * dim);
  for (int r = 0; r < n; ++r) {
    double norm = 0;
    for (int c = 0; c < dim; ++c) {
      v[std::size_t(r) * dim + c] = rng.gauss();
      norm += v[std::size_t(r) * dim + c] * v[std::size_t(r) * dim + c];
    }
    norm = std::sqrt(norm);
    for (int c = 0; c < dim; ++c) v[std::size_t(r) * dim + c] /= norm;
  }
  return v;
}

Slice2D random_slice(int nx, int ny, uint64_t seed) {
  Slice2D s;
  s.nx = nx;
  s.ny = ny;
  s.data.resize(std::size_t(nx) * ny);
  Rng rng(seed);
  for (auto& v : s.data) v = float(rng.uniform());
  return s;
}

// bright vs dark disks: the classic toy pools for unpaired translation
std::vector<Slice2D> disk_pool(int n, float fg, float bg, uint64_t seed) {
  std::vector<Slice2D> pool;
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    Slice2D s;
    s.nx = s.ny = 16;
    s.data.assign(256, bg);
    double cx = rng.uniform(5, 11), cy = rng.uniform(5, 11), r = rng.uniform(3, 5);
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x)
        if ((x - cx) * (x - cx) + (y - cy) * (y - cy) < r * r) s.at(x, y) = fg;
    pool.push_back(std::move(s));
  }
  return pool;
}

I2ITrainConfig tiny_cfg() {
  I2ITrainConfig cfg;
  cfg.epochs = 1;
  cfg.iters_per_epoch = 200;
  cfg.ngf = 8;
  cfg.ndf = 8;
  cfg.n_res_blocks = 2;
  cfg.embed_dim = 16;
  cfg.patches_per_image = 32;
  return cfg;
}

double slice_mean(const Slice2D& s) {
  double m = 0;
  for (float v : s.data) m += v;
  return m / double(s.data.size());
}

}  // namespace

TEST_CASE("patch NCE loss: worked example, uniform case, symmetry") {
  // q rows = e1, e2; k rows = e1, e2: q.k+ = 1, q.k- = 0, tau = 0.07, N = 2
  std::vector<double> q2 = {1, 0, 0, 1};
  std::vector<double> k = {1, 0, 0, 1};
  NceResult r = patch_nce_loss(q2, k, 2, 2, 0.07);
  double s = 1.0 / 0.07;
  double want = -std::log(std::exp(s) / (std::exp(s) + 1.0));
  CHECK(r.value == doctest::Approx(want).epsilon(1e-9));
  CHECK(r.value == doctest::Approx(6.2e-7).epsilon(0.02));

  // all similarities equal -> log N
  std::vector<double> same = {1, 0, 1, 0, 1, 0};
  CHECK(patch_nce_loss(same, same, 3, 2, 0.07).value ==
        doctest::Approx(std::log(3.0)).epsilon(1e-9));

  // permuting the negatives leaves each query's loss unchanged: with the
  // positive on the diagonal, swapping two negative key rows only permutes
  // the softmax denominator terms of other queries
  Rng rng(3);
  std::vector<double> qq = random_unit_rows(5, 8, rng);
  std::vector<double> kk = qq;
  double base = patch_nce_loss(qq, kk, 5, 8, 0.07).value;
  // swap feature rows 1<->3 in both q and k: relabeling pairs, same mean
  for (int c = 0; c < 8; ++c) {
    std::swap(qq[1 * 8 + c], qq[3 * 8 + c]);
    std::swap(kk[1 * 8 + c], kk[3 * 8 + c]);
  }
  CHECK(patch_nce_loss(qq, kk, 5, 8, 0.07).value ==
        doctest::Approx(base).epsilon(1e-12));

  CHECK_THROWS(patch_nce_loss({1, 0}, {1, 0}, 1, 2, 0.07));  // N < 2
}

TEST_CASE("patch NCE loss decreases as positive similarity rises") {
  // raise q0.k0, negatives fixed
  double prev = 1e9;
  for (double a : {0.0, 0.3, 0.6, 0.9}) {
    std::vector<double> q = {a, std::sqrt(1 - a * a), 0, 1};
    std::vector<double> k = {1, 0, 0, 1};
    double v = patch_nce_loss(q, k, 2, 2, 0.07).value;
    CHECK(v < prev);
    prev = v;
  }
}

TEST_CASE("patch NCE gradients match finite differences") {
  Rng rng(17);
  for (int iter = 0; iter < 6; ++iter) {
    int n = 2 + int(rng.below(7));   // <= 8
    int dim = 2 + int(rng.below(15));  // <= 16
    std::vector<double> q = random_unit_rows(n, dim, rng);
    std::vector<double> k = random_unit_rows(n, dim, rng);
    NceResult base = patch_nce_loss(q, k, n, dim, 0.07);
    double h = 1e-5;
    for (std::size_t i = 0; i < q.size(); ++i) {
      double keep = q[i];
      q[i] = keep + h;
      double up = patch_nce_loss(q, k, n, dim, 0.07).value;
      q[i] = keep - h;
      double dn = patch_nce_loss(q, k, n, dim, 0.07).value;
      q[i] = keep;
      double fd = (up - dn) / (2 * h);
      double denom = std::max({std::fabs(fd), std::fabs(base.dq[i]), 1e-8});
      CHECK(std::fabs(fd - base.dq[i]) / denom <= 1e-4);
    }
    for (std::size_t i = 0; i < k.size(); ++i) {
      double keep = k[i];
      k[i] = keep + h;
      double up = patch_nce_loss(q, k, n, dim, 0.07).value;
      k[i] = keep - h;
      double dn = patch_nce_loss(q, k, n, dim, 0.07).value;
      k[i] = keep;
      double fd = (up - dn) / (2 * h);
      double denom = std::max({std::fabs(fd), std::fabs(base.dk[i]), 1e-8});
      CHECK(std::fabs(fd - base.dk[i]) / denom <= 1e-4);
    }
  }
}

TEST_CASE("identity generator mode is the identity on slices and volumes") {
  TranslationNets nets = TranslationNets::identity_mode();
  CHECK(nets.is_identity());
  Slice2D s = random_slice(16, 12, 5);
  Slice2D t = nets.translate_slice(s);
  CHECK(t.data == s.data);

  Volume v({16, 12, 4}, {0.8, 0.8, 1.0});
  Rng rng(6);
  for (auto& x : v.data) x = float(rng.uniform());
  Volume tv = translate_volume(v, nets);
  CHECK(tv.shape == v.shape);
  CHECK(tv.spacing == v.spacing);
  CHECK(tv.data == v.data);
}

TEST_CASE("translate_volume preserves geometry and is deterministic") {
  I2ITrainConfig cfg = tiny_cfg();
  TranslationNets nets = TranslationNets::create(cfg, 42);
  Volume v({16, 16, 3}, {0.7, 0.7, 1.2}, {1, 2, 3});
  Rng rng(7);
  for (auto& x : v.data) x = float(rng.uniform());
  Volume a = translate_volume(v, nets);
  Volume b = translate_volume(v, nets);
  CHECK(a.shape == v.shape);
  CHECK(a.spacing == v.spacing);
  CHECK(a.origin == v.origin);
  CHECK(a.data == b.data);
  for (float x : a.data) {
    CHECK(x >= 0.0f);
    CHECK(x <= 1.0f);
  }

  Volume bad({10, 10, 2}, {1, 1, 1});  // not divisible by 4
  for (auto& x : bad.data) x = 0.5f;
  CHECK_THROWS(translate_volume(bad, nets));
}

TEST_CASE("one step with all lambdas zero leaves the generators unchanged") {
  I2ITrainConfig cfg = tiny_cfg();
  cfg.iters_per_epoch = 1;
  cfg.lambda_gan = cfg.lambda_nce = cfg.lambda_idt = 0.0;
  auto src = disk_pool(4, 0.9f, 0.1f, 1);
  auto tgt = disk_pool(4, 0.2f, 0.7f, 2);

  TranslationNets before = TranslationNets::create(cfg, 99);
  Slice2D probe = random_slice(16, 16, 11);
  Slice2D out_before = before.translate_slice(probe);

  TranslationNets after = train_translation(src, tgt, cfg, 99);
  Slice2D out_after = after.translate_slice(probe);
  CHECK(out_after.data == out_before.data);  // bitwise: zero objective
}

TEST_CASE("toy training reduces generator loss and shifts intensities toward the target") {
  // bright disks on dark bg -> dim disks on brighter bg
  int improved = 0, shifted = 0;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    auto src = disk_pool(8, 0.9f, 0.1f, seed * 10 + 1);
    auto tgt = disk_pool(8, 0.25f, 0.65f, seed * 10 + 2);
    I2ITrainStats stats;
    TranslationNets nets = train_translation(src, tgt, tiny_cfg(), seed, &stats);
    REQUIRE(stats.gen_loss_per_step.size() == 200);
    double head = 0, tail = 0;
    for (int i = 0; i < 20; ++i) {
      head += stats.gen_loss_per_step[i] / 20.0;
      tail += stats.gen_loss_per_step[180 + i] / 20.0;
    }
    if (tail < head) ++improved;

    double tgt_mean = 0;
    for (const auto& s : tgt) tgt_mean += slice_mean(s) / double(tgt.size());
    const Slice2D& probe = src[0];
    double before = std::fabs(slice_mean(probe) - tgt_mean);
    double after = std::fabs(slice_mean(nets.translate_slice(probe)) - tgt_mean);
    if (after < before) ++shifted;
  }
  CHECK(improved >= 4);
  CHECK(shifted >= 4);
}

TEST_CASE("checkpoint round trip reproduces the mapping exactly") {
  fs::path d = fs::temp_directory_path() / "modaseg_test_i2i";
  fs::create_directories(d);
  I2ITrainConfig cfg = tiny_cfg();
  TranslationNets nets = TranslationNets::create(cfg, 7);
  std::string p = (d / "nets.bin").string();
  nets.save(p);
  TranslationNets loaded = TranslationNets::load(p);
  Slice2D s = random_slice(16, 16, 1);
  CHECK(loaded.translate_slice(s).data == nets.translate_slice(s).data);

  CHECK_THROWS(TranslationNets::load((d / "missing.bin").string()));
}

TEST_CASE("training rejects degenerate inputs") {
  I2ITrainConfig cfg = tiny_cfg();
  auto pool = disk_pool(3, 0.9f, 0.1f, 1);
  CHECK_THROWS(train_translation({}, pool, cfg, 1));
  CHECK_THROWS(train_translation(pool, {}, cfg, 1));
  auto other = disk_pool(3, 0.2f, 0.7f, 2);
  other[0].nx = 8;
  other[0].ny = 32;
  other[0].data.resize(256);
  CHECK_THROWS(train_translation(pool, other, cfg, 1));

  I2ITrainConfig bad = tiny_cfg();
  bad.epochs = 0;
  CHECK_THROWS(train_translation(pool, other, bad, 1));
}
