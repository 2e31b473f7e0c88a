#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "modaseg/nifti_io.hpp"
#include "modaseg/rng.hpp"
#include "modaseg/volume.hpp"

using namespace modaseg;
namespace fs = std::filesystem;

namespace {

fs::path tmp_dir() {
  fs::path d = fs::temp_directory_path() / "modaseg_test_volume";
  fs::create_directories(d);
  return d;
}

Volume random_volume(Shape3 sh, Vec3 sp, uint64_t seed) {
  Volume v(sh, sp);
  Rng rng(seed);
  for (auto& x : v.data) x = float(rng.uniform(0, 500));
  return v;
}

// independent shape-formula oracle: round half away from zero
int extent_oracle(int n, double s, double t) {
  double e = double(n) * s / t;
  int r = int(std::floor(e + 0.5));
  return r < 1 ? 1 : r;
}

// Hand-built NIfTI-1 header written by field offset, independent of the
// reader's struct layout.
std::vector<char> raw_header(int16_t ndim, const int16_t dims[7], int16_t datatype,
                             int16_t bitpix, const float pixdim[3]) {
  std::vector<char> h(348, 0);
  auto put = [&](std::size_t off, const void* p, std::size_t n) {
    std::memcpy(h.data() + off, p, n);
  };
  int32_t sz = 348;
  put(0, &sz, 4);
  put(40, &ndim, 2);
  for (int d = 0; d < 7; ++d) put(42 + 2 * d, &dims[d], 2);
  put(70, &datatype, 2);
  put(72, &bitpix, 2);
  float one = 1.0f;
  put(76, &one, 4);
  for (int d = 0; d < 3; ++d) put(80 + 4 * d, &pixdim[d], 4);
  float vox_offset = 352.0f, slope = 1.0f, inter = 0.0f;
  put(108, &vox_offset, 4);
  put(112, &slope, 4);
  put(116, &inter, 4);
  put(344, "n+1", 4);
  return h;
}

void write_raw_nifti(const fs::path& p, const std::vector<char>& header,
                     const void* payload, std::size_t nbytes) {
  std::ofstream f(p, std::ios::binary);
  f.write(header.data(), std::streamsize(header.size()));
  const char pad[4] = {0, 0, 0, 0};
  f.write(pad, 4);
  f.write(static_cast<const char*>(payload), std::streamsize(nbytes));
}

}  // namespace

TEST_CASE("resampled extent matches the round-half-away oracle") {
  CHECK(resampled_extent(100, 0.8, 0.4) == 200);
  CHECK(resampled_extent(50, 1.0, 0.5) == 100);
  CHECK(resampled_extent(1, 0.1, 10.0) == 1);  // floor at 1
  Rng rng(7);
  for (int i = 0; i < 500; ++i) {
    int n = 1 + int(rng.below(200));
    double s = rng.uniform(0.1, 3.0), t = rng.uniform(0.1, 3.0);
    CHECK(resampled_extent(n, s, t) == extent_oracle(n, s, t));
  }
}

TEST_CASE("resample shape: (100,100,50)@(0.8,0.8,1.0) -> (0.4,0.4,0.5) gives (200,200,100)") {
  Volume v = random_volume({100, 100, 50}, {0.8, 0.8, 1.0}, 1);
  Volume r = resample(v, {0.4, 0.4, 0.5});
  CHECK(r.shape == Shape3{200, 200, 100});
  CHECK(r.spacing == Vec3{0.4, 0.4, 0.5});
  CHECK(r.origin == v.origin);
}

TEST_CASE("resample at the current spacing is the identity") {
  Volume v = random_volume({13, 9, 7}, {0.7, 1.1, 0.9}, 2);
  Volume r = resample(v, v.spacing);
  REQUIRE(r.shape == v.shape);
  for (std::size_t i = 0; i < v.size(); ++i)
    CHECK(std::fabs(r.data[i] - v.data[i]) <= 1e-6);

  LabelMap l({13, 9, 7}, {0.7, 1.1, 0.9});
  Rng rng(3);
  for (auto& x : l.data) x = uint8_t(rng.below(3));
  LabelMap rl = resample(l, l.spacing);
  CHECK(rl.data == l.data);  // bit-identical for nearest
}

TEST_CASE("resampling a constant volume stays constant") {
  Volume v({10, 11, 6}, {0.8, 0.8, 1.0});
  for (auto& x : v.data) x = 42.5f;
  for (Vec3 t : {Vec3{0.4, 0.4, 0.5}, Vec3{1.3, 0.9, 2.0}}) {
    Volume r = resample(v, t);
    for (float x : r.data) CHECK(x == doctest::Approx(42.5f).epsilon(1e-6));
  }
}

TEST_CASE("trilinear resampling reproduces a linear ramp in the interior") {
  // f(p) = 2x + 3y - z in physical mm; trilinear interpolation is exact on
  // affine functions away from clamped borders
  Volume v({20, 20, 20}, {1.0, 1.0, 1.0});
  for (int z = 0; z < 20; ++z)
    for (int y = 0; y < 20; ++y)
      for (int x = 0; x < 20; ++x)
        v.at(x, y, z) = float(2.0 * x + 3.0 * y - z);
  Volume r = resample(v, {0.5, 0.5, 0.5});
  for (int z = 4; z < r.shape[2] - 4; ++z)
    for (int y = 4; y < r.shape[1] - 4; ++y)
      for (int x = 4; x < r.shape[0] - 4; ++x) {
        // physical coordinate of the output voxel center, in input voxels
        double ix = (x + 0.5) * 0.5 - 0.5;
        double iy = (y + 0.5) * 0.5 - 0.5;
        double iz = (z + 0.5) * 0.5 - 0.5;
        double want = 2.0 * ix + 3.0 * iy - iz;
        CHECK(r.at(x, y, z) == doctest::Approx(want).epsilon(1e-4));
      }
}

TEST_CASE("resample is idempotent at a fixed target spacing") {
  Volume v = random_volume({17, 13, 9}, {0.8, 0.8, 1.0}, 4);
  Volume once = resample(v, {0.5, 0.7, 0.6});
  Volume twice = resample(once, {0.5, 0.7, 0.6});
  REQUIRE(once.shape == twice.shape);
  for (std::size_t i = 0; i < once.size(); ++i)
    CHECK(std::fabs(once.data[i] - twice.data[i]) <= 1e-5);
}

TEST_CASE("label resampling never invents labels") {
  LabelMap l({12, 12, 8}, {0.8, 0.8, 1.0});
  Rng rng(5);
  for (auto& x : l.data) x = rng.uniform() < 0.7 ? 0 : 2;  // no VS present
  LabelMap r = resample(l, {0.3, 0.5, 0.4});
  for (auto x : r.data) CHECK((x == 0 || x == 2));
}

TEST_CASE("normalize: clip bounds and rescaling") {
  PreprocessConfig cfg;  // 26 / 486
  Volume v({5, 1, 1}, {1, 1, 1});
  v.data = {486.0f, 26.0f, 1000.0f, 256.0f, -50.0f};
  Volume n = normalize(v, cfg);
  CHECK(n.data[0] == doctest::Approx(1.0));
  CHECK(n.data[1] == doctest::Approx(0.0));
  CHECK(n.data[2] == doctest::Approx(1.0));  // clipped
  CHECK(n.data[3] == doctest::Approx((256.0 - 26.0) / 460.0));  // = 0.5
  CHECK(n.data[3] == doctest::Approx(0.5));
  CHECK(n.data[4] == doctest::Approx(0.0));
}

TEST_CASE("normalize is monotone and stays in [0,1]") {
  PreprocessConfig cfg;
  Volume v = random_volume({8, 8, 8}, {1, 1, 1}, 6);
  Volume n = normalize(v, cfg);
  for (std::size_t i = 0; i < v.size(); ++i) {
    CHECK(n.data[i] >= 0.0f);
    CHECK(n.data[i] <= 1.0f);
    for (std::size_t j = 0; j < v.size(); ++j)
      if (v.data[i] < v.data[j]) CHECK(n.data[i] <= n.data[j]);
  }
  PreprocessConfig bad;
  bad.clip_lo = 10;
  bad.clip_hi = 10;
  CHECK_THROWS(normalize(v, bad));
}

TEST_CASE("axial slices: count, content, and round trip") {
  Volume v = random_volume({8, 8, 4}, {0.8, 0.8, 1.0}, 7);
  auto slices = extract_axial_slices(v);
  REQUIRE(slices.size() == 4);
  for (const auto& s : slices) {
    CHECK(s.nx == 8);
    CHECK(s.ny == 8);
  }
  int k = 2;
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) CHECK(slices[k].at(x, y) == v.at(x, y, k));

  Volume back = stack_slices(slices, v.spacing, v.origin);
  CHECK(back.shape == v.shape);
  CHECK(back.data == v.data);  // bit-identical

  slices[1].nx = 4;
  slices[1].data.resize(4 * 8);
  CHECK_THROWS(stack_slices(slices, v.spacing, v.origin));
  CHECK_THROWS(stack_slices({}, v.spacing, v.origin));
}

TEST_CASE("NIfTI round trip preserves data and geometry") {
  fs::path d = tmp_dir();
  Volume v = random_volume({9, 7, 5}, {0.4, 0.4, 0.5}, 8);
  v.origin = {1.5, -2.0, 3.25};
  for (std::string name : {"rt.nii.gz", "rt.nii"}) {
    std::string p = (d / name).string();
    save_volume(v, p);
    Volume r = load_volume(p);
    CHECK(r.shape == v.shape);
    CHECK(r.spacing[0] == doctest::Approx(v.spacing[0]));
    CHECK(r.spacing[2] == doctest::Approx(v.spacing[2]));
    CHECK(r.origin[0] == doctest::Approx(1.5));
    CHECK(r.data == v.data);
  }

  LabelMap l({6, 5, 4}, {0.8, 0.8, 1.0});
  Rng rng(9);
  for (auto& x : l.data) x = uint8_t(rng.below(3));
  std::string p = (d / "lab.nii.gz").string();
  save_labelmap(l, p);
  LabelMap rl = load_labelmap(p);
  CHECK(rl.data == l.data);
  CHECK(rl.shape == l.shape);
}

TEST_CASE("gzip output is byte-stable across writes") {
  fs::path d = tmp_dir();
  Volume v = random_volume({9, 7, 5}, {0.4, 0.4, 0.5}, 10);
  save_volume(v, (d / "a.nii.gz").string());
  save_volume(v, (d / "b.nii.gz").string());
  std::ifstream fa(d / "a.nii.gz", std::ios::binary), fb(d / "b.nii.gz", std::ios::binary);
  std::string a((std::istreambuf_iterator<char>(fa)), {});
  std::string b((std::istreambuf_iterator<char>(fb)), {});
  CHECK(a == b);
}

TEST_CASE("NIfTI reader rejects 4-D images") {
  fs::path p = tmp_dir() / "vol4d.nii";
  int16_t dims[7] = {4, 4, 2, 3, 1, 1, 1};
  float pix[3] = {1, 1, 1};
  std::vector<float> payload(4 * 4 * 2 * 3, 0.0f);
  write_raw_nifti(p, raw_header(4, dims, 16, 32, pix), payload.data(),
                  payload.size() * sizeof(float));
  CHECK_THROWS_WITH_AS(load_volume(p.string()),
                       doctest::Contains("expected 3 spatial dimensions"),
                       std::runtime_error);

  // but a trailing singleton 4th dim is fine
  int16_t dims1[7] = {4, 4, 2, 1, 1, 1, 1};
  std::vector<float> pay1(4 * 4 * 2, 1.0f);
  fs::path p1 = tmp_dir() / "vol3d1.nii";
  write_raw_nifti(p1, raw_header(4, dims1, 16, 32, pix), pay1.data(),
                  pay1.size() * sizeof(float));
  CHECK(load_volume(p1.string()).shape == Shape3{4, 4, 2});
}

TEST_CASE("NIfTI reader handles int16 and uint8 payloads") {
  fs::path d = tmp_dir();
  int16_t dims[7] = {3, 2, 2, 1, 1, 1, 1};
  float pix[3] = {0.5f, 0.5f, 2.0f};

  int16_t i16[12];
  for (int i = 0; i < 12; ++i) i16[i] = int16_t(i * 100 - 300);
  fs::path pi = d / "i16.nii";
  write_raw_nifti(pi, raw_header(3, dims, 4, 16, pix), i16, sizeof(i16));
  Volume vi = load_volume(pi.string());
  CHECK(vi.data[0] == -300.0f);
  CHECK(vi.data[11] == 800.0f);
  CHECK(vi.spacing[2] == doctest::Approx(2.0));

  uint8_t u8[12];
  for (int i = 0; i < 12; ++i) u8[i] = uint8_t(i);
  fs::path pu = d / "u8.nii";
  write_raw_nifti(pu, raw_header(3, dims, 2, 8, pix), u8, sizeof(u8));
  CHECK(load_volume(pu.string()).data[7] == 7.0f);

  // unsupported datatype (float64 = 64)
  fs::path pf = d / "f64.nii";
  std::vector<double> f64(12, 0.0);
  write_raw_nifti(pf, raw_header(3, dims, 64, 64, pix), f64.data(),
                  f64.size() * sizeof(double));
  CHECK_THROWS_WITH_AS(load_volume(pf.string()),
                       doctest::Contains("unsupported NIfTI datatype"),
                       std::runtime_error);
}

TEST_CASE("scl_slope and scl_inter are applied") {
  fs::path p = tmp_dir() / "scl.nii";
  int16_t dims[7] = {2, 2, 1, 1, 1, 1, 1};
  float pix[3] = {1, 1, 1};
  auto h = raw_header(3, dims, 4, 16, pix);
  float slope = 2.0f, inter = 10.0f;
  std::memcpy(h.data() + 112, &slope, 4);
  std::memcpy(h.data() + 116, &inter, 4);
  int16_t raw[4] = {0, 1, 2, 3};
  write_raw_nifti(p, h, raw, sizeof(raw));
  Volume v = load_volume(p.string());
  CHECK(v.data[0] == 10.0f);
  CHECK(v.data[3] == 16.0f);
}

TEST_CASE("label file with an out-of-range value names the offender") {
  fs::path p = tmp_dir() / "bad_label.nii";
  int16_t dims[7] = {2, 2, 1, 1, 1, 1, 1};
  float pix[3] = {1, 1, 1};
  uint8_t raw[4] = {0, 1, 3, 2};
  write_raw_nifti(p, raw_header(3, dims, 2, 8, pix), raw, sizeof(raw));
  CHECK_THROWS_WITH_AS(load_labelmap(p.string()), doctest::Contains("3"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(load_labelmap(p.string()), doctest::Contains("outside {0,1,2}"),
                       std::runtime_error);
}

TEST_CASE("corrupt header is rejected") {
  fs::path p = tmp_dir() / "corrupt.nii";
  std::ofstream f(p, std::ios::binary);
  std::vector<char> junk(400, 0x5a);
  f.write(junk.data(), std::streamsize(junk.size()));
  f.close();
  CHECK_THROWS_AS(load_volume(p.string()), std::runtime_error);
}

TEST_CASE("volume and label validation") {
  Volume v({2, 2, 2}, {1, 1, 1});
  v.data[3] = std::nanf("");
  CHECK_THROWS(v.validate());
  CHECK_THROWS(Volume({2, 2, 2}, {1, 0, 1}));
  LabelMap l({2, 2, 2}, {1, 1, 1});
  l.data[0] = 3;
  CHECK_THROWS(l.validate());
}
