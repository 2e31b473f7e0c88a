#pragma once

#include <optional>
#include <string>
#include <vector>

#include "modaseg/phantom.hpp"
#include "modaseg/volume.hpp"

namespace modaseg {

/// 2|P∩G| / (|P|+|G|); both masks empty -> 1.0, exactly one empty -> 0.0.
double dsc(const std::vector<uint8_t>& pred_mask,
           const std::vector<uint8_t>& gt_mask);

/// Average symmetric surface distance in mm. Surfaces use 6-connectivity
/// with out-of-bounds treated as background; distances between physical
/// voxel centers. Empty masks have no surface: nullopt.
std::optional<double> assd(const std::vector<uint8_t>& pred_mask,
                           const std::vector<uint8_t>& gt_mask,
                           const Shape3& shape, const Vec3& spacing);

/// Macro-averaged MAE over the grades present in the truth.
double ma_mae(const std::vector<int>& pred_grades,
              const std::vector<int>& true_grades);

struct CaseMetrics {
  std::string id;
  bool failed = false;  // prediction missing
  double dsc_vs = 0, dsc_cochlea = 0;
  std::optional<double> assd_vs, assd_cochlea;
};

struct ClassAggregate {
  double mean_dsc = 0, std_dsc = 0;
  std::optional<double> mean_assd, std_assd;  // over defined cases only
  int n_assd_defined = 0;
};

struct MetricsReport {
  std::vector<CaseMetrics> cases;
  ClassAggregate vs, cochlea;
  std::optional<double> ma_mae_grades;
  int n_failed = 0;
  bool warning = false;  // set when cases were skipped

  std::string to_json() const;
  void save(const std::string& path) const;
};

/// pred_dir must hold <case id>_pred.nii.gz label maps; grade predictions
/// (optional) come as a JSON object {case id: grade}.
MetricsReport evaluate_dataset(const std::string& pred_dir,
                               const DatasetManifest& gt_manifest,
                               const std::string& grades_json_path = "");

MetricsReport evaluate_cases(const std::vector<std::string>& ids,
                             const std::vector<const LabelMap*>& preds,
                             const std::vector<const LabelMap*>& gts);

}  // namespace modaseg
