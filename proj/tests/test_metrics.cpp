#include <cmath>
#include <optional>
#include <vector>

#include "doctest.h"
#include "modaseg/metrics.hpp"
#include "modaseg/rng.hpp"
#include "nlohmann/json.hpp"

using namespace modaseg;

namespace {

std::vector<uint8_t> random_mask(std::size_t n, double p, Rng& rng) {
  std::vector<uint8_t> m(n);
  for (auto& v : m) v = rng.uniform() < p ? 1 : 0;
  return m;
}

// quadratic-time reference: mean over both surfaces of each surface voxel's
// distance to the nearest voxel of the other surface
std::optional<double> assd_oracle(const std::vector<uint8_t>& a,
                                  const std::vector<uint8_t>& b,
                                  const Shape3& sh, const Vec3& sp) {
  auto surface = [&](const std::vector<uint8_t>& m) {
    std::vector<std::array<int, 3>> s;
    for (int z = 0; z < sh[2]; ++z)
      for (int y = 0; y < sh[1]; ++y)
        for (int x = 0; x < sh[0]; ++x) {
          std::size_t i = std::size_t(x) + sh[0] * (y + std::size_t(sh[1]) * z);
          if (!m[i]) continue;
          bool edge = false;
          const int d[6][3] = {{1, 0, 0},  {-1, 0, 0}, {0, 1, 0},
                               {0, -1, 0}, {0, 0, 1},  {0, 0, -1}};
          for (auto& dd : d) {
            int nx = x + dd[0], ny = y + dd[1], nz = z + dd[2];
            if (nx < 0 || ny < 0 || nz < 0 || nx >= sh[0] || ny >= sh[1] ||
                nz >= sh[2]) {
              edge = true;
            } else if (!m[std::size_t(nx) + sh[0] * (ny + std::size_t(sh[1]) * nz)]) {
              edge = true;
            }
          }
          if (edge) s.push_back({x, y, z});
        }
    return s;
  };
  auto sa = surface(a), sb = surface(b);
  if (sa.empty() || sb.empty()) return std::nullopt;
  auto one_way = [&](const std::vector<std::array<int, 3>>& from,
                     const std::vector<std::array<int, 3>>& to, double& sum) {
    for (const auto& p : from) {
      double best = 1e300;
      for (const auto& q : to) {
        double dx = (p[0] - q[0]) * sp[0], dy = (p[1] - q[1]) * sp[1],
               dz = (p[2] - q[2]) * sp[2];
        best = std::min(best, std::sqrt(dx * dx + dy * dy + dz * dz));
      }
      sum += best;
    }
  };
  double sum = 0;
  one_way(sa, sb, sum);
  one_way(sb, sa, sum);
  return sum / double(sa.size() + sb.size());
}

LabelMap make_labels(const Shape3& sh, const Vec3& sp,
                     const std::vector<uint8_t>& data) {
  LabelMap l(sh, sp);
  l.data = data;
  return l;
}

}  // namespace

TEST_CASE("DSC worked examples and degenerate cases") {
  // |P|=4, |G|=6, |P∩G|=3 -> 2*3/10 = 0.6
  std::vector<uint8_t> p = {1, 1, 1, 1, 0, 0, 0, 0, 0, 0};
  std::vector<uint8_t> g = {1, 1, 1, 0, 1, 1, 1, 0, 0, 0};
  CHECK(dsc(p, g) == doctest::Approx(0.6).epsilon(1e-12));

  CHECK(dsc(p, p) == 1.0);
  std::vector<uint8_t> zero(10, 0);
  CHECK(dsc(zero, zero) == 1.0);  // both empty
  CHECK(dsc(p, zero) == 0.0);     // exactly one empty
  CHECK(dsc(zero, g) == 0.0);
  std::vector<uint8_t> q = {0, 0, 0, 0, 1, 1, 1, 1, 1, 1};
  CHECK(dsc({1, 1, 1, 1, 0, 0, 0, 0, 0, 0}, q) == 0.0);  // disjoint

  CHECK_THROWS(dsc(p, std::vector<uint8_t>(4, 0)));  // size mismatch
}

TEST_CASE("DSC agrees with a direct set-count oracle on random masks") {
  Rng rng(5);
  for (int iter = 0; iter < 200; ++iter) {
    auto a = random_mask(512, rng.uniform(0.05, 0.6), rng);
    auto b = random_mask(512, rng.uniform(0.05, 0.6), rng);
    long inter = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      inter += a[i] && b[i];
      na += a[i];
      nb += b[i];
    }
    double want = (na + nb) == 0 ? 1.0 : 2.0 * inter / double(na + nb);
    CHECK(dsc(a, b) == doctest::Approx(want).epsilon(1e-12));
    CHECK(dsc(a, b) == dsc(b, a));  // symmetric
  }
}

TEST_CASE("ASSD worked example: single voxels three steps apart") {
  // voxels at x=1 and x=4 with spacing (0.4,0.4,0.5): distance 3*0.4 = 1.2 mm
  Shape3 sh{6, 3, 3};
  Vec3 sp{0.4, 0.4, 0.5};
  std::vector<uint8_t> a(6 * 3 * 3, 0), b(6 * 3 * 3, 0);
  auto at = [&](int x, int y, int z) {
    return std::size_t(x) + 6 * (y + std::size_t(3) * z);
  };
  a[at(1, 1, 1)] = 1;
  b[at(4, 1, 1)] = 1;
  auto d = assd(a, b, sh, sp);
  REQUIRE(d.has_value());
  CHECK(*d == doctest::Approx(1.2).epsilon(1e-12));

  CHECK(*assd(a, a, sh, sp) == 0.0);       // identical masks
  std::vector<uint8_t> zero(6 * 3 * 3, 0);
  CHECK(!assd(a, zero, sh, sp).has_value());  // empty -> undefined
  CHECK(!assd(zero, zero, sh, sp).has_value());
}

TEST_CASE("ASSD matches the all-pairs oracle on random masks") {
  Rng rng(11);
  Shape3 sh{8, 8, 8};
  for (int iter = 0; iter < 50; ++iter) {
    Vec3 sp{rng.uniform(0.3, 1.2), rng.uniform(0.3, 1.2), rng.uniform(0.3, 1.2)};
    auto a = random_mask(512, rng.uniform(0.05, 0.5), rng);
    auto b = random_mask(512, rng.uniform(0.05, 0.5), rng);
    auto got = assd(a, b, sh, sp);
    auto want = assd_oracle(a, b, sh, sp);
    REQUIRE(got.has_value() == want.has_value());
    if (want) {
      CHECK(*got == doctest::Approx(*want).epsilon(1e-9));
      CHECK(*assd(b, a, sh, sp) == doctest::Approx(*got).epsilon(1e-12));
    }
  }
}

TEST_CASE("macro-averaged MAE worked example and properties") {
  // truth (1,1,4), pred (2,1,4): grade 1 err (1+0)/2 = 0.5, grade 4 err 0
  // macro average over present grades {1,4}: (0.5+0)/2 = 0.25
  CHECK(ma_mae({2, 1, 4}, {1, 1, 4}) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(ma_mae({1, 2, 3, 4}, {1, 2, 3, 4}) == 0.0);
  CHECK(ma_mae({4, 4}, {1, 1}) == 3.0);

  // reordering cases jointly leaves the value unchanged
  CHECK(ma_mae({4, 1, 2}, {4, 1, 1}) == doctest::Approx(0.25).epsilon(1e-12));

  CHECK_THROWS(ma_mae({1, 2}, {1}));       // length mismatch
  CHECK_THROWS(ma_mae({}, {}));            // empty
  CHECK_THROWS(ma_mae({0, 1}, {1, 1}));    // grade outside 1..4
  CHECK_THROWS(ma_mae({1, 1}, {5, 1}));
}

TEST_CASE("case evaluation: perfect predictions, aggregates, missing cases") {
  Shape3 sh{8, 8, 4};
  Vec3 sp{0.8, 0.8, 1.0};
  std::vector<uint8_t> d1(8 * 8 * 4, 0), d2(8 * 8 * 4, 0);
  for (int i = 10; i < 18; ++i) d1[i] = 1;
  for (int i = 40; i < 44; ++i) d1[i] = 2;
  for (int i = 12; i < 20; ++i) d2[i] = 1;
  for (int i = 40; i < 42; ++i) d2[i] = 2;
  LabelMap g1 = make_labels(sh, sp, d1), g2 = make_labels(sh, sp, d2);

  // predictions identical to ground truth
  MetricsReport perfect = evaluate_cases({"a", "b"}, {&g1, &g2}, {&g1, &g2});
  CHECK(perfect.n_failed == 0);
  CHECK(!perfect.warning);
  CHECK(perfect.vs.mean_dsc == 1.0);
  CHECK(perfect.cochlea.mean_dsc == 1.0);
  REQUIRE(perfect.vs.mean_assd.has_value());
  CHECK(*perfect.vs.mean_assd == 0.0);

  // cross predictions: aggregates equal the recomputed per-case means
  MetricsReport r = evaluate_cases({"a", "b"}, {&g2, &g1}, {&g1, &g2});
  REQUIRE(r.cases.size() == 2);
  double mean = 0;
  for (const auto& c : r.cases) mean += c.dsc_vs / 2.0;
  CHECK(r.vs.mean_dsc == doctest::Approx(mean).epsilon(1e-12));
  double var = 0;
  for (const auto& c : r.cases) var += (c.dsc_vs - mean) * (c.dsc_vs - mean) / 2.0;
  CHECK(r.vs.std_dsc == doctest::Approx(std::sqrt(var)).epsilon(1e-12));

  // a missing prediction is flagged and excluded from the aggregates
  MetricsReport miss = evaluate_cases({"a", "b"}, {nullptr, &g2}, {&g1, &g2});
  CHECK(miss.n_failed == 1);
  CHECK(miss.warning);
  CHECK(miss.cases[0].failed);
  CHECK(miss.vs.mean_dsc == 1.0);  // only case b contributes, and it is exact

  CHECK_THROWS(evaluate_cases({"a"}, {&g1, &g2}, {&g1, &g2}));
}

TEST_CASE("report serializes to JSON with undefined distances marked") {
  Shape3 sh{4, 4, 4};
  Vec3 sp{1, 1, 1};
  std::vector<uint8_t> vs_only(64, 0);
  vs_only[5] = 1;  // VS present, cochlea absent -> cochlea ASSD undefined
  LabelMap g = make_labels(sh, sp, vs_only);
  MetricsReport r = evaluate_cases({"x"}, {&g}, {&g});
  CHECK(!r.cochlea.mean_assd.has_value());

  nlohmann::json j = nlohmann::json::parse(r.to_json());
  CHECK(j.at("cases").size() == 1);
  CHECK(j.at("aggregate").at("cochlea").at("mean_assd") == "undefined");
  CHECK(j.at("aggregate").at("vs").at("mean_dsc").get<double>() == 1.0);
  CHECK(j.at("ma_mae").is_null());  // no grade predictions supplied
}
