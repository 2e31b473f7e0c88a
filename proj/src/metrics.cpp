#include "modaseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>

#include "modaseg/nifti_io.hpp"
#include "nlohmann/json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace modaseg {

double dsc(const std::vector<uint8_t>& pred_mask,
           const std::vector<uint8_t>& gt_mask) {
  if (pred_mask.size() != gt_mask.size())
    throw std::invalid_argument("dsc: shape mismatch");
  std::size_t inter = 0, p = 0, g = 0;
  for (std::size_t i = 0; i < pred_mask.size(); ++i) {
    bool a = pred_mask[i] != 0, b = gt_mask[i] != 0;
    inter += (a && b);
    p += a;
    g += b;
  }
  if (p == 0 && g == 0) return 1.0;
  if (p == 0 || g == 0) return 0.0;
  return 2.0 * double(inter) / double(p + g);
}

namespace {

struct SurfacePoint {
  double x, y, z;  // physical voxel center, mm
};

// foreground voxels with at least one background 6-neighbor
std::vector<SurfacePoint> surface_voxels(const std::vector<uint8_t>& mask,
                                         const Shape3& sh, const Vec3& sp) {
  std::vector<SurfacePoint> out;
  auto at = [&](int x, int y, int z) -> bool {
    if (x < 0 || y < 0 || z < 0 || x >= sh[0] || y >= sh[1] || z >= sh[2])
      return false;  // out of bounds counts as background
    return mask[std::size_t(x) + std::size_t(sh[0]) * (y + std::size_t(sh[1]) * z)] != 0;
  };
  for (int z = 0; z < sh[2]; ++z)
    for (int y = 0; y < sh[1]; ++y)
      for (int x = 0; x < sh[0]; ++x) {
        if (!at(x, y, z)) continue;
        if (!at(x - 1, y, z) || !at(x + 1, y, z) || !at(x, y - 1, z) ||
            !at(x, y + 1, z) || !at(x, y, z - 1) || !at(x, y, z + 1))
          out.push_back({(x + 0.5) * sp[0], (y + 0.5) * sp[1], (z + 0.5) * sp[2]});
      }
  return out;
}

// sum over points in A of the distance to the nearest point of B,
// accelerated with a z-sorted sweep
double sum_min_distances(const std::vector<SurfacePoint>& a,
                         std::vector<SurfacePoint> b) {
  std::sort(b.begin(), b.end(),
            [](const SurfacePoint& p, const SurfacePoint& q) { return p.z < q.z; });
  double total = 0;
  for (const auto& p : a) {
    // start from the nearest z and expand outward; prune once the z gap
    // alone exceeds the best distance found
    auto it = std::lower_bound(
        b.begin(), b.end(), p.z,
        [](const SurfacePoint& q, double z) { return q.z < z; });
    std::size_t lo = it - b.begin();
    double best = std::numeric_limits<double>::infinity();
    std::size_t i = lo, j = lo;
    bool more = true;
    while (more) {
      more = false;
      if (i < b.size()) {
        double dz = b[i].z - p.z;
        if (dz * dz < best) {
          double dx = b[i].x - p.x, dy = b[i].y - p.y;
          best = std::min(best, dx * dx + dy * dy + dz * dz);
          ++i;
          more = true;
        }
      }
      if (j > 0) {
        double dz = b[j - 1].z - p.z;
        if (dz * dz < best) {
          double dx = b[j - 1].x - p.x, dy = b[j - 1].y - p.y;
          best = std::min(best, dx * dx + dy * dy + dz * dz);
          --j;
          more = true;
        }
      }
    }
    total += std::sqrt(best);
  }
  return total;
}

}  // namespace

std::optional<double> assd(const std::vector<uint8_t>& pred_mask,
                           const std::vector<uint8_t>& gt_mask,
                           const Shape3& shape, const Vec3& spacing) {
  std::size_t n = std::size_t(shape[0]) * shape[1] * shape[2];
  if (pred_mask.size() != n || gt_mask.size() != n)
    throw std::invalid_argument("assd: shape mismatch");
  auto sp = surface_voxels(pred_mask, shape, spacing);
  auto sg = surface_voxels(gt_mask, shape, spacing);
  if (sp.empty() || sg.empty()) return std::nullopt;
  double total = sum_min_distances(sp, sg) + sum_min_distances(sg, sp);
  return total / double(sp.size() + sg.size());
}

double ma_mae(const std::vector<int>& pred_grades,
              const std::vector<int>& true_grades) {
  if (pred_grades.empty() || pred_grades.size() != true_grades.size())
    throw std::invalid_argument("ma_mae: empty or mismatched grade lists");
  for (std::size_t i = 0; i < pred_grades.size(); ++i)
    if (pred_grades[i] < 1 || pred_grades[i] > 4 || true_grades[i] < 1 ||
        true_grades[i] > 4)
      throw std::invalid_argument("ma_mae: grade outside 1..4");

  double macro = 0;
  int present = 0;
  for (int g = 1; g <= 4; ++g) {
    double sum = 0;
    int count = 0;
    for (std::size_t i = 0; i < true_grades.size(); ++i)
      if (true_grades[i] == g) {
        sum += std::abs(pred_grades[i] - true_grades[i]);
        ++count;
      }
    if (count > 0) {
      macro += sum / count;
      ++present;
    }
  }
  return macro / present;
}

namespace {

std::vector<uint8_t> class_mask(const LabelMap& l, uint8_t cls) {
  std::vector<uint8_t> m(l.data.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = l.data[i] == cls;
  return m;
}

void aggregate(const std::vector<double>& dscs,
               const std::vector<double>& assds, int n_assd,
               ClassAggregate& out) {
  auto mean_std = [](const std::vector<double>& v) {
    double m = 0;
    for (double x : v) m += x;
    m /= v.size();
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return std::pair<double, double>{m, v.size() > 1 ? std::sqrt(s / (v.size() - 1)) : 0.0};
  };
  if (!dscs.empty()) std::tie(out.mean_dsc, out.std_dsc) = mean_std(dscs);
  out.n_assd_defined = n_assd;
  if (!assds.empty()) {
    auto [m, s] = mean_std(assds);
    out.mean_assd = m;
    out.std_assd = s;
  }
}

json case_to_json(const CaseMetrics& c) {
  json j{{"id", c.id}, {"failed", c.failed}};
  if (!c.failed) {
    j["dsc_vs"] = c.dsc_vs;
    j["dsc_cochlea"] = c.dsc_cochlea;
    j["assd_vs"] = c.assd_vs ? json(*c.assd_vs) : json("undefined");
    j["assd_cochlea"] = c.assd_cochlea ? json(*c.assd_cochlea) : json("undefined");
  }
  return j;
}

json agg_to_json(const ClassAggregate& a) {
  json j{{"mean_dsc", a.mean_dsc}, {"std_dsc", a.std_dsc},
         {"n_assd_defined", a.n_assd_defined}};
  j["mean_assd"] = a.mean_assd ? json(*a.mean_assd) : json("undefined");
  j["std_assd"] = a.std_assd ? json(*a.std_assd) : json("undefined");
  return j;
}

}  // namespace

std::string MetricsReport::to_json() const {
  json j;
  j["schema"] = "modaseg-metrics-v1";
  j["cases"] = json::array();
  for (const auto& c : cases) j["cases"].push_back(case_to_json(c));
  j["aggregate"] = {{"vs", agg_to_json(vs)}, {"cochlea", agg_to_json(cochlea)}};
  j["ma_mae"] = ma_mae_grades ? json(*ma_mae_grades) : json(nullptr);
  j["n_failed"] = n_failed;
  j["warning"] = warning;
  return j.dump(2) + "\n";
}

void MetricsReport::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write report " + path);
  f << to_json();
}

MetricsReport evaluate_cases(const std::vector<std::string>& ids,
                             const std::vector<const LabelMap*>& preds,
                             const std::vector<const LabelMap*>& gts) {
  if (ids.size() != preds.size() || ids.size() != gts.size())
    throw std::invalid_argument("evaluate_cases: size mismatch");
  MetricsReport report;
  std::vector<double> dsc_vs, dsc_co, assd_vs, assd_co;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    CaseMetrics cm;
    cm.id = ids[i];
    if (!preds[i]) {
      cm.failed = true;
      report.n_failed++;
      report.warning = true;
      report.cases.push_back(cm);
      continue;
    }
    const LabelMap& p = *preds[i];
    const LabelMap& g = *gts[i];
    if (p.shape != g.shape)
      throw std::invalid_argument("prediction/ground-truth shape mismatch for " + ids[i]);
    cm.dsc_vs = dsc(class_mask(p, LabelMap::kVS), class_mask(g, LabelMap::kVS));
    cm.dsc_cochlea =
        dsc(class_mask(p, LabelMap::kCochlea), class_mask(g, LabelMap::kCochlea));
    cm.assd_vs = assd(class_mask(p, LabelMap::kVS), class_mask(g, LabelMap::kVS),
                      g.shape, g.spacing);
    cm.assd_cochlea = assd(class_mask(p, LabelMap::kCochlea),
                           class_mask(g, LabelMap::kCochlea), g.shape, g.spacing);
    dsc_vs.push_back(cm.dsc_vs);
    dsc_co.push_back(cm.dsc_cochlea);
    if (cm.assd_vs) assd_vs.push_back(*cm.assd_vs);
    if (cm.assd_cochlea) assd_co.push_back(*cm.assd_cochlea);
    report.cases.push_back(cm);
  }
  aggregate(dsc_vs, assd_vs, int(assd_vs.size()), report.vs);
  aggregate(dsc_co, assd_co, int(assd_co.size()), report.cochlea);
  return report;
}

MetricsReport evaluate_dataset(const std::string& pred_dir,
                               const DatasetManifest& gt_manifest,
                               const std::string& grades_json_path) {
  std::vector<std::string> ids;
  std::vector<LabelMap> pred_store, gt_store;
  pred_store.reserve(gt_manifest.entries.size());
  gt_store.reserve(gt_manifest.entries.size());
  std::vector<bool> have;
  for (const auto& e : gt_manifest.entries) {
    ids.push_back(e.id);
    gt_store.push_back(load_labelmap(e.label_path));
    fs::path p = fs::path(pred_dir) / (e.id + "_pred.nii.gz");
    if (fs::exists(p)) {
      pred_store.push_back(load_labelmap(p.string()));
      have.push_back(true);
    } else {
      pred_store.emplace_back();
      have.push_back(false);
    }
  }
  std::vector<const LabelMap*> preds, gts;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    preds.push_back(have[i] ? &pred_store[i] : nullptr);
    gts.push_back(&gt_store[i]);
  }
  MetricsReport report = evaluate_cases(ids, preds, gts);

  if (!grades_json_path.empty()) {
    std::ifstream f(grades_json_path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read grades " + grades_json_path);
    json j = json::parse(f);
    std::vector<int> pred_grades, true_grades;
    for (const auto& e : gt_manifest.entries) {
      if (!j.contains(e.id)) continue;
      pred_grades.push_back(j.at(e.id).get<int>());
      true_grades.push_back(e.grade);
    }
    if (!pred_grades.empty())
      report.ma_mae_grades = ma_mae(pred_grades, true_grades);
  }
  return report;
}

}  // namespace modaseg
