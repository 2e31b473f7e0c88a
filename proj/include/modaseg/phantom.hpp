#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "modaseg/volume.hpp"

namespace modaseg {

enum class Domain { Source, Target };

std::string domain_name(Domain d);
Domain parse_domain(const std::string& s);

/// Synthetic head phantom: ellipsoidal head, one VS blob whose size grows
/// with the Koos grade, two cochlea spheres. Source and target domains share
/// anatomy for equal seeds and differ only in intensity rendering.
struct PhantomSpec {
  Shape3 shape{64, 64, 32};
  Vec3 spacing{0.8, 0.8, 1.0};
  uint64_t seed = 0;
  Domain domain = Domain::Source;
  int koos_grade = 1;        // 1..4
  double target_noise_sigma = 0.03;  // fraction of rendered dynamic range
};

struct PhantomCase {
  Volume volume;
  LabelMap labels;
  int koos_grade = 0;
};

PhantomCase generate_case(const PhantomSpec& spec);

struct DatasetEntry {
  std::string id;
  Domain domain;
  int grade;
  std::string volume_path;
  std::string label_path;
};

struct DatasetManifest {
  std::vector<DatasetEntry> entries;

  void save(const std::string& path) const;
  static DatasetManifest load(const std::string& path);
};

/// Writes n cases as NIfTI pairs under out_dir plus manifest.json.
/// grade_distribution: 4 non-negative weights for grades 1..4; cases are
/// assigned grades by largest-remainder apportionment, so a uniform
/// distribution with n divisible by 4 gives an exact partition.
DatasetManifest generate_dataset(int n, uint64_t base_seed, Domain domain,
                                 const std::array<double, 4>& grade_distribution,
                                 const std::string& out_dir,
                                 const PhantomSpec& proto = PhantomSpec{});

}  // namespace modaseg
