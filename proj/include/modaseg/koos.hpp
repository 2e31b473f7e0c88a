#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "modaseg/volume.hpp"

namespace modaseg {

/// Geometric VS features in physical units: [volume mm^3, bbox extent x,
/// y, z mm]. Empty VS yields all zeros.
struct KoosFeatures {
  double vs_volume = 0;
  double extent_x = 0, extent_y = 0, extent_z = 0;

  std::array<double, 4> as_array() const {
    return {vs_volume, extent_x, extent_y, extent_z};
  }
};

KoosFeatures extract_features(const LabelMap& l);

/// One-vs-rest linear SVM over grades 1..4 with per-feature
/// standardization baked into the model.
struct LinearSvmModel {
  std::array<std::array<double, 4>, 4> weights{};  // [grade-1][feature]
  std::array<double, 4> biases{};
  std::array<double, 4> feat_mean{};
  std::array<double, 4> feat_std{};  // zero-variance features get std 1
  double C = 1.0;
  uint64_t seed = 0;

  std::array<double, 4> scores(const KoosFeatures& f) const;
  void save(const std::string& path) const;
  static LinearSvmModel load(const std::string& path);
};

/// L2-regularized hinge loss, objective 0.5*||w||^2 + C * sum_i hinge_i per
/// class, minimized by deterministic full-batch subgradient descent over
/// averaged iterates. Samples are canonically ordered first, so the model
/// is invariant to input permutation.
LinearSvmModel train_svm(const std::vector<KoosFeatures>& features,
                         const std::vector<int>& grades, double C = 1.0,
                         uint64_t seed = 0, int iterations = 2000);

/// argmax of the one-vs-rest scores; ties resolve to the lower grade.
int predict_grade(const LinearSvmModel& m, const KoosFeatures& f);

/// Objective value of the one-vs-rest problem for a given class, used by
/// the trainer and exposed for tests.
double svm_objective(const std::array<double, 4>& w, double b,
                     const std::vector<std::array<double, 4>>& x,
                     const std::vector<int>& sign, double C);

}  // namespace modaseg
