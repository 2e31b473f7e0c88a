#include "modaseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "modaseg/nifti_io.hpp"
#include "modaseg/rng.hpp"
#include "nlohmann/json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace modaseg {

std::string domain_name(Domain d) {
  return d == Domain::Source ? "source" : "target";
}

Domain parse_domain(const std::string& s) {
  if (s == "source") return Domain::Source;
  if (s == "target") return Domain::Target;
  throw std::invalid_argument("unknown domain: " + s);
}

namespace {

struct Ellipsoid {
  Vec3 center;  // mm
  Vec3 radii;   // mm
  bool contains(double x, double y, double z) const {
    double dx = (x - center[0]) / radii[0];
    double dy = (y - center[1]) / radii[1];
    double dz = (z - center[2]) / radii[2];
    return dx * dx + dy * dy + dz * dz <= 1.0;
  }
};

// Anatomy shared by both domains of one seed.
struct Anatomy {
  Ellipsoid head;
  Ellipsoid vs;
  Ellipsoid cochlea_left, cochlea_right;
};

constexpr double kVsBaseRadiusMm[4] = {2.2, 3.2, 4.3, 5.4};

Anatomy build_anatomy(const PhantomSpec& spec) {
  Rng rng(mix_seed(spec.seed, 0x414e41));  // anatomy stream

  const double ex = spec.shape[0] * spec.spacing[0];
  const double ey = spec.shape[1] * spec.spacing[1];
  const double ez = spec.shape[2] * spec.spacing[2];
  Vec3 mid{ex / 2, ey / 2, ez / 2};

  Anatomy a;
  a.head.center = mid;
  a.head.radii = {0.44 * ex * rng.uniform(0.95, 1.0),
                  0.44 * ey * rng.uniform(0.95, 1.0),
                  0.46 * ez * rng.uniform(0.95, 1.0)};

  if (spec.koos_grade < 1 || spec.koos_grade > 4)
    throw std::invalid_argument("koos_grade must be in 1..4");
  double r = kVsBaseRadiusMm[spec.koos_grade - 1] * rng.uniform(0.92, 1.08);
  // higher grades sit closer to the midline (brainstem contact proxy)
  double lateral = (0.55 - 0.11 * spec.koos_grade) * a.head.radii[0];
  double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
  a.vs.center = {mid[0] + side * lateral + rng.uniform(-1.0, 1.0),
                 mid[1] + rng.uniform(-0.1, 0.1) * a.head.radii[1],
                 mid[2] + rng.uniform(-0.15, 0.15) * a.head.radii[2]};
  a.vs.radii = {r * rng.uniform(0.95, 1.05), r * rng.uniform(0.95, 1.05),
                r * rng.uniform(0.95, 1.05)};

  const double cochlea_r = 1.3;
  double cx = 0.62 * a.head.radii[0];
  double cy = mid[1] - 0.18 * a.head.radii[1];
  a.cochlea_left.center = {mid[0] - cx, cy, mid[2]};
  a.cochlea_left.radii = {cochlea_r, cochlea_r, cochlea_r};
  a.cochlea_right.center = {mid[0] + cx, cy, mid[2]};
  a.cochlea_right.radii = {cochlea_r, cochlea_r, cochlea_r};

  // the largest tumor plus both cochleae must fit inside the head
  double vs_max = *std::max_element(a.vs.radii.begin(), a.vs.radii.end());
  if (a.head.radii[0] < lateral + vs_max + 1.0 || a.head.radii[2] < vs_max + 1.0 ||
      a.head.radii[0] < cx + cochlea_r + 0.5)
    throw std::invalid_argument("phantom shape too small to place structures");
  return a;
}

struct Palette {
  float background, head, vs, cochlea;
};

// Scanner-unit palettes straddling the default 26/486 clip window.
// The target scanner flips the background bright and compresses every
// tissue far from its source value, inverting edge polarity throughout
// the volume: a model fit on the source domain transfers at chance level,
// while the translation remains a consistent pixelwise remap.
constexpr Palette kSourcePalette{30.0f, 200.0f, 450.0f, 330.0f};
constexpr Palette kTargetPalette{400.0f, 100.0f, 280.0f, 170.0f};

}  // namespace

PhantomCase generate_case(const PhantomSpec& spec) {
  if (spec.shape[0] < 16 || spec.shape[1] < 16 || spec.shape[2] < 8)
    throw std::invalid_argument("phantom shape too small to place structures");

  Anatomy a = build_anatomy(spec);
  PhantomCase out;
  out.koos_grade = spec.koos_grade;
  out.volume = Volume(spec.shape, spec.spacing);
  out.labels = LabelMap(spec.shape, spec.spacing);

  const Palette& pal =
      spec.domain == Domain::Source ? kSourcePalette : kTargetPalette;
  Rng rng(mix_seed(spec.seed, spec.domain == Domain::Source ? 0x535243 : 0x544754));

  // low-order multiplicative bias field (source only)
  double bx = rng.uniform(-0.08, 0.08), by = rng.uniform(-0.08, 0.08);
  double bz = rng.uniform(-0.08, 0.08), bxy = rng.uniform(-0.05, 0.05);
  const double dynamic_range = 450.0;
  const double noise_sigma = spec.domain == Domain::Target
                                 ? spec.target_noise_sigma * dynamic_range
                                 : 2.0;

  for (int z = 0; z < spec.shape[2]; ++z) {
    double pz = (z + 0.5) * spec.spacing[2];
    double tz = pz / (spec.shape[2] * spec.spacing[2]) - 0.5;
    for (int y = 0; y < spec.shape[1]; ++y) {
      double py = (y + 0.5) * spec.spacing[1];
      double ty = py / (spec.shape[1] * spec.spacing[1]) - 0.5;
      for (int x = 0; x < spec.shape[0]; ++x) {
        double px = (x + 0.5) * spec.spacing[0];
        double tx = px / (spec.shape[0] * spec.spacing[0]) - 0.5;

        uint8_t label = LabelMap::kBackground;
        float base = pal.background;
        if (a.head.contains(px, py, pz)) {
          base = pal.head;
          if (a.vs.contains(px, py, pz)) {
            base = pal.vs;
            label = LabelMap::kVS;
          } else if (a.cochlea_left.contains(px, py, pz) ||
                     a.cochlea_right.contains(px, py, pz)) {
            base = pal.cochlea;
            label = LabelMap::kCochlea;
          }
        }
        double v = base;
        if (spec.domain == Domain::Source)
          v *= 1.0 + bx * tx + by * ty + bz * tz + bxy * tx * ty;
        v += noise_sigma * rng.gauss();
        out.volume.at(x, y, z) = static_cast<float>(std::max(v, 0.0));
        out.labels.at(x, y, z) = label;
      }
    }
  }
  return out;
}

void DatasetManifest::save(const std::string& path) const {
  json j = json::array();
  for (const auto& e : entries)
    j.push_back({{"id", e.id},
                 {"domain", domain_name(e.domain)},
                 {"grade", e.grade},
                 {"volume_path", e.volume_path},
                 {"label_path", e.label_path}});
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write manifest " + path);
  f << j.dump(2) << "\n";
}

DatasetManifest DatasetManifest::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read manifest " + path);
  json j = json::parse(f);
  DatasetManifest m;
  for (const auto& e : j)
    m.entries.push_back({e.at("id").get<std::string>(),
                         parse_domain(e.at("domain").get<std::string>()),
                         e.at("grade").get<int>(),
                         e.at("volume_path").get<std::string>(),
                         e.at("label_path").get<std::string>()});
  return m;
}

DatasetManifest generate_dataset(int n, uint64_t base_seed, Domain domain,
                                 const std::array<double, 4>& grade_distribution,
                                 const std::string& out_dir,
                                 const PhantomSpec& proto) {
  if (n < 1) throw std::invalid_argument("dataset size must be >= 1");
  double wsum = 0;
  for (double w : grade_distribution) {
    if (w < 0) throw std::invalid_argument("grade distribution weights must be >= 0");
    wsum += w;
  }
  if (wsum <= 0) throw std::invalid_argument("grade distribution must have positive mass");

  // largest-remainder apportionment of n cases over the 4 grades
  std::array<int, 4> counts{};
  std::array<double, 4> remainder{};
  int assigned = 0;
  for (int g = 0; g < 4; ++g) {
    double exact = n * grade_distribution[g] / wsum;
    counts[g] = int(exact);
    remainder[g] = exact - counts[g];
    assigned += counts[g];
  }
  while (assigned < n) {
    int best = int(std::max_element(remainder.begin(), remainder.end()) -
                   remainder.begin());
    counts[best]++;
    remainder[best] = -1;
    assigned++;
  }

  fs::create_directories(out_dir);
  DatasetManifest manifest;
  int case_idx = 0;
  for (int g = 0; g < 4; ++g) {
    for (int k = 0; k < counts[g]; ++k, ++case_idx) {
      PhantomSpec spec = proto;
      spec.seed = mix_seed(base_seed, case_idx);
      spec.domain = domain;
      spec.koos_grade = g + 1;
      PhantomCase c = generate_case(spec);

      char id[32];
      std::snprintf(id, sizeof(id), "%s_%03d", domain_name(domain).c_str(),
                    case_idx);
      std::string vol_path = (fs::path(out_dir) / (std::string(id) + "_vol.nii.gz")).string();
      std::string lab_path = (fs::path(out_dir) / (std::string(id) + "_lab.nii.gz")).string();
      save_volume(c.volume, vol_path);
      save_labelmap(c.labels, lab_path);
      manifest.entries.push_back({id, domain, c.koos_grade, vol_path, lab_path});
    }
  }
  manifest.save((fs::path(out_dir) / "manifest.json").string());
  return manifest;
}

}  // namespace modaseg
