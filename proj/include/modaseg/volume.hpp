#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace modaseg {

using Vec3 = std::array<double, 3>;
using Shape3 = std::array<int, 3>;

/// 3D scalar grid with physical voxel spacing (mm) and origin.
/// Data is stored x-fastest: index = x + nx*(y + ny*z).
struct Volume {
  Shape3 shape{0, 0, 0};
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};
  std::vector<float> data;

  Volume() = default;
  Volume(Shape3 sh, Vec3 sp, Vec3 org = {0, 0, 0});

  std::size_t size() const { return data.size(); }
  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(shape[0]) *
               (static_cast<std::size_t>(y) +
                static_cast<std::size_t>(shape[1]) * static_cast<std::size_t>(z));
  }
  float& at(int x, int y, int z) { return data[index(x, y, z)]; }
  float at(int x, int y, int z) const { return data[index(x, y, z)]; }

  /// Throws if spacing is non-positive, data holds NaN/Inf, or sizes disagree.
  void validate() const;
};

/// Integer label grid over {0 background, 1 VS, 2 cochlea}, geometry-aligned
/// with a companion Volume.
struct LabelMap {
  static constexpr uint8_t kBackground = 0;
  static constexpr uint8_t kVS = 1;
  static constexpr uint8_t kCochlea = 2;
  static constexpr int kNumClasses = 3;

  Shape3 shape{0, 0, 0};
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};
  std::vector<uint8_t> data;

  LabelMap() = default;
  LabelMap(Shape3 sh, Vec3 sp, Vec3 org = {0, 0, 0});

  std::size_t size() const { return data.size(); }
  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(shape[0]) *
               (static_cast<std::size_t>(y) +
                static_cast<std::size_t>(shape[1]) * static_cast<std::size_t>(z));
  }
  uint8_t& at(int x, int y, int z) { return data[index(x, y, z)]; }
  uint8_t at(int x, int y, int z) const { return data[index(x, y, z)]; }

  void validate() const;
  bool geometry_equals(const Volume& v) const;
};

struct PreprocessConfig {
  Vec3 target_spacing{0.4, 0.4, 0.5};
  double clip_lo = 26.0;
  double clip_hi = 486.0;

  void validate() const;
};

/// Resampled grid extent along one axis: round-half-away-from-zero of
/// n * spacing / target, floored at 1.
int resampled_extent(int n, double spacing, double target);

/// Trilinear resampling onto the given voxel spacing; origin preserved.
Volume resample(const Volume& v, const Vec3& target_spacing);

/// Nearest-neighbor resampling; never introduces labels absent from the input.
LabelMap resample(const LabelMap& l, const Vec3& target_spacing);

/// Clip to [clip_lo, clip_hi] then rescale linearly to [0, 1].
Volume normalize(const Volume& v, const PreprocessConfig& cfg);

/// A single axial (z = const) slice, x-fastest, shape (nx, ny).
struct Slice2D {
  int nx = 0, ny = 0;
  std::vector<float> data;
  float& at(int x, int y) { return data[x + static_cast<std::size_t>(nx) * y]; }
  float at(int x, int y) const { return data[x + static_cast<std::size_t>(nx) * y]; }
};

std::vector<Slice2D> extract_axial_slices(const Volume& v);

/// Inverse of extract_axial_slices. All slices must share one shape.
Volume stack_slices(const std::vector<Slice2D>& slices, const Vec3& spacing,
                    const Vec3& origin);

}  // namespace modaseg
