#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace modaseg {

/// Per-class probability grids are flattened channel-major: C blocks of
/// nvox voxels. Targets are one-hot in the same layout. Foreground classes
/// are 1..C-1; background never enters the Dice-style means.
struct LossResult {
  double value = 0.0;
  std::vector<double> grad;  // d value / d pred, same layout as pred
};

constexpr double kDiceEps = 1e-5;
constexpr double kCosineFloor = 1e-8;

LossResult soft_dice_loss(const std::vector<double>& pred,
                          const std::vector<double>& target, int num_classes,
                          double eps = kDiceEps);

LossResult cross_entropy_loss(const std::vector<double>& pred,
                              const std::vector<double>& target,
                              int num_classes);

/// soft_dice_loss + cross_entropy_loss, weighted 1:1.
LossResult dice_ce_loss(const std::vector<double>& pred,
                        const std::vector<double>& target, int num_classes);

/// phi_kappa(cos) = (1 + cos) / (1 + kappa (1 - cos)) - 1.
/// Strictly increasing in cos; kappa = 0 reduces to cos itself.
double tvmf_similarity(double cos, double kappa);
double tvmf_similarity_dcos(double cos, double kappa);

/// Per-epoch adaptive concentration: kappa_c = lambda * validation DSC_c.
struct KappaState {
  double lambda = 256.0;
  std::vector<double> kappa_per_class;   // foreground classes, initial 0
  std::vector<double> last_val_dsc;

  explicit KappaState(int num_foreground = 2, double lam = 256.0)
      : lambda(lam),
        kappa_per_class(num_foreground, 0.0),
        last_val_dsc(num_foreground, 0.0) {}
};

KappaState update_kappa(const KappaState& state,
                        const std::vector<double>& val_dsc_per_class);

/// Mean over present foreground classes of (1 - phi_kappa_c(cos_c))^2 with
/// cos_c the cosine between flattened pred and target grids of class c.
/// Classes with an empty ground truth are skipped.
LossResult tvmf_dice_loss(const std::vector<double>& pred,
                          const std::vector<double>& target, int num_classes,
                          const KappaState& kappa);

struct DeepSupervisionWeights {
  std::array<double, 3> w{4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0};  // full-res first

  void validate() const;
};

double aggregate_deep_supervision(const std::vector<double>& level_losses,
                                  const DeepSupervisionWeights& w);

/// One-hot encoding of integer labels, channel-major.
std::vector<double> one_hot(const std::vector<uint8_t>& labels, int num_classes);

}  // namespace modaseg
