#include "modaseg/volume.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace modaseg {

namespace {

std::size_t checked_size(const Shape3& sh) {
  if (sh[0] <= 0 || sh[1] <= 0 || sh[2] <= 0)
    throw std::invalid_argument("volume shape must be positive in every axis");
  return static_cast<std::size_t>(sh[0]) * sh[1] * sh[2];
}

void check_spacing(const Vec3& sp) {
  for (double s : sp)
    if (!(s > 0.0)) throw std::invalid_argument("voxel spacing must be > 0");
}

}  // namespace

Volume::Volume(Shape3 sh, Vec3 sp, Vec3 org)
    : shape(sh), spacing(sp), origin(org), data(checked_size(sh), 0.0f) {
  check_spacing(sp);
}

void Volume::validate() const {
  check_spacing(spacing);
  if (data.size() != checked_size(shape))
    throw std::invalid_argument("volume data size does not match shape");
  for (float v : data)
    if (!std::isfinite(v))
      throw std::invalid_argument("volume contains non-finite intensity");
}

LabelMap::LabelMap(Shape3 sh, Vec3 sp, Vec3 org)
    : shape(sh), spacing(sp), origin(org), data(checked_size(sh), 0) {
  check_spacing(sp);
}

void LabelMap::validate() const {
  check_spacing(spacing);
  if (data.size() != checked_size(shape))
    throw std::invalid_argument("label data size does not match shape");
  for (uint8_t v : data)
    if (v > 2)
      throw std::invalid_argument("label value " + std::to_string(int(v)) +
                                  " outside {0,1,2}");
}

bool LabelMap::geometry_equals(const Volume& v) const {
  return shape == v.shape && spacing == v.spacing && origin == v.origin;
}

void PreprocessConfig::validate() const {
  if (!(clip_lo < clip_hi))
    throw std::invalid_argument("clip_lo must be < clip_hi");
  check_spacing(target_spacing);
}

int resampled_extent(int n, double spacing, double target) {
  double exact = n * spacing / target;
  // round half away from zero; extents are positive here
  int out = static_cast<int>(std::floor(exact + 0.5));
  return std::max(out, 1);
}

namespace {

Shape3 resampled_shape(const Shape3& sh, const Vec3& sp, const Vec3& tsp) {
  return {resampled_extent(sh[0], sp[0], tsp[0]),
          resampled_extent(sh[1], sp[1], tsp[1]),
          resampled_extent(sh[2], sp[2], tsp[2])};
}

// Physical position of output voxel center j maps to continuous input voxel
// coordinate u. Both grids share the origin at the corner of voxel 0.
inline double input_coord(int j, double target, double spacing) {
  return ((j + 0.5) * target) / spacing - 0.5;
}

}  // namespace

Volume resample(const Volume& v, const Vec3& target_spacing) {
  check_spacing(target_spacing);
  checked_size(v.shape);
  Shape3 out_shape = resampled_shape(v.shape, v.spacing, target_spacing);
  Volume out(out_shape, target_spacing, v.origin);

  const int nx = v.shape[0], ny = v.shape[1], nz = v.shape[2];
  for (int z = 0; z < out_shape[2]; ++z) {
    double uz = input_coord(z, target_spacing[2], v.spacing[2]);
    uz = std::clamp(uz, 0.0, double(nz - 1));
    int z0 = std::min(int(uz), nz - 1), z1 = std::min(z0 + 1, nz - 1);
    double fz = uz - z0;
    for (int y = 0; y < out_shape[1]; ++y) {
      double uy = input_coord(y, target_spacing[1], v.spacing[1]);
      uy = std::clamp(uy, 0.0, double(ny - 1));
      int y0 = std::min(int(uy), ny - 1), y1 = std::min(y0 + 1, ny - 1);
      double fy = uy - y0;
      for (int x = 0; x < out_shape[0]; ++x) {
        double ux = input_coord(x, target_spacing[0], v.spacing[0]);
        ux = std::clamp(ux, 0.0, double(nx - 1));
        int x0 = std::min(int(ux), nx - 1), x1 = std::min(x0 + 1, nx - 1);
        double fx = ux - x0;
        double c00 = v.at(x0, y0, z0) * (1 - fx) + v.at(x1, y0, z0) * fx;
        double c10 = v.at(x0, y1, z0) * (1 - fx) + v.at(x1, y1, z0) * fx;
        double c01 = v.at(x0, y0, z1) * (1 - fx) + v.at(x1, y0, z1) * fx;
        double c11 = v.at(x0, y1, z1) * (1 - fx) + v.at(x1, y1, z1) * fx;
        double c0 = c00 * (1 - fy) + c10 * fy;
        double c1 = c01 * (1 - fy) + c11 * fy;
        out.at(x, y, z) = static_cast<float>(c0 * (1 - fz) + c1 * fz);
      }
    }
  }
  return out;
}

LabelMap resample(const LabelMap& l, const Vec3& target_spacing) {
  check_spacing(target_spacing);
  checked_size(l.shape);
  Shape3 out_shape = resampled_shape(l.shape, l.spacing, target_spacing);
  LabelMap out(out_shape, target_spacing, l.origin);

  for (int z = 0; z < out_shape[2]; ++z) {
    double uz = input_coord(z, target_spacing[2], l.spacing[2]);
    int zi = std::clamp(int(std::lround(uz)), 0, l.shape[2] - 1);
    for (int y = 0; y < out_shape[1]; ++y) {
      double uy = input_coord(y, target_spacing[1], l.spacing[1]);
      int yi = std::clamp(int(std::lround(uy)), 0, l.shape[1] - 1);
      for (int x = 0; x < out_shape[0]; ++x) {
        double ux = input_coord(x, target_spacing[0], l.spacing[0]);
        int xi = std::clamp(int(std::lround(ux)), 0, l.shape[0] - 1);
        out.at(x, y, z) = l.at(xi, yi, zi);
      }
    }
  }
  return out;
}

Volume normalize(const Volume& v, const PreprocessConfig& cfg) {
  cfg.validate();
  Volume out = v;
  const double lo = cfg.clip_lo, hi = cfg.clip_hi, range = hi - lo;
  for (float& x : out.data) {
    double c = std::clamp(double(x), lo, hi);
    x = static_cast<float>((c - lo) / range);
  }
  return out;
}

std::vector<Slice2D> extract_axial_slices(const Volume& v) {
  std::vector<Slice2D> slices(v.shape[2]);
  const std::size_t plane = std::size_t(v.shape[0]) * v.shape[1];
  for (int z = 0; z < v.shape[2]; ++z) {
    slices[z].nx = v.shape[0];
    slices[z].ny = v.shape[1];
    slices[z].data.assign(v.data.begin() + z * plane,
                          v.data.begin() + (z + 1) * plane);
  }
  return slices;
}

Volume stack_slices(const std::vector<Slice2D>& slices, const Vec3& spacing,
                    const Vec3& origin) {
  if (slices.empty()) throw std::invalid_argument("stack_slices: no slices");
  const int nx = slices[0].nx, ny = slices[0].ny;
  for (const auto& s : slices)
    if (s.nx != nx || s.ny != ny)
      throw std::invalid_argument("stack_slices: slice shape mismatch");
  Volume out({nx, ny, int(slices.size())}, spacing, origin);
  const std::size_t plane = std::size_t(nx) * ny;
  for (std::size_t z = 0; z < slices.size(); ++z)
    std::copy(slices[z].data.begin(), slices[z].data.end(),
              out.data.begin() + z * plane);
  return out;
}

}  // namespace modaseg
