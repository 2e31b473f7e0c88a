#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "modaseg/losses.hpp"
#include "modaseg/rng.hpp"
#include "modaseg/volume.hpp"

namespace modaseg {

struct SegNetConfig {
  int in_channels = 1;
  int num_classes = 3;
  int depth = 4;        // encoder levels
  int base_width = 16;  // 32 at full scale
  int ds_heads = 3;
  Shape3 patch_size{32, 32, 32};  // (96,96,96) at full scale

  void validate() const;  // ds_heads == 3, patch divisible by 2^(depth-1)
};

enum class LossChoice { AdaptiveTvmf, DiceCe };

struct SegTrainConfig {
  double lr0 = 1e-3;  // Adam, cosine annealing
  int epochs = 40;    // 300 at full scale
  int patches_per_volume = 4;
  std::array<double, 3> sampling_ratio{1, 1, 1};  // VS : cochlea : negative
  double jitter_frac = 0.25;  // centered-patch jitter, fraction of patch size
  double intensity_shift = 0.05;
  int folds = 5;
  double lambda = 256.0;  // adaptive t-vMF concentration multiplier
  DeepSupervisionWeights ds_weights;

  void validate() const;
};

struct SegCase {
  Volume volume;  // preprocessed: resampled + normalized to [0,1]
  LabelMap labels;
};

enum class PatchCategory { VS = 0, Cochlea = 1, Negative = 2 };

struct Patch {
  Shape3 size;
  std::vector<float> image;
  std::vector<uint8_t> labels;
  PatchCategory category;
};

/// Category draw honoring the sampling ratio; mass of classes absent from
/// the volume is reassigned to the negative category.
PatchCategory sample_category(bool has_vs, bool has_cochlea,
                              const std::array<double, 3>& ratio, Rng& rng);

std::vector<Patch> sample_patches(const Volume& v, const LabelMap& l,
                                  const SegNetConfig& net_cfg,
                                  const SegTrainConfig& cfg, int count,
                                  Rng& rng);

/// Single whole-patch intensity shift, drawn once per patch, clamped to [0,1].
void augment_intensity(std::vector<float>& patch, double magnitude, Rng& rng);

/// Per-class likelihood grids over a whole volume, channel-major.
struct Likelihoods {
  Shape3 shape;
  Vec3 spacing;
  Vec3 origin;
  int num_classes = 0;
  std::vector<float> probs;  // [C][nx*ny*nz]
};

LabelMap argmax_labels(const Likelihoods& lk);  // ties -> lowest class

class SegModel {
 public:
  struct Impl;

  SegModel() = default;
  static SegModel build(const SegNetConfig& cfg, uint64_t seed);
  bool valid() const { return impl_ != nullptr; }

  const SegNetConfig& config() const;
  int fold_id() const;
  void set_fold_id(int id);

  /// Forward pass on one patch (flattened [D,H,W], values in [0,1]).
  /// Returns softmax logits: main output plus exactly ds_heads supervision
  /// outputs, all [num_classes, D, H, W]; the main output is the full-res
  /// supervision head.
  struct Forward {
    std::vector<float> main_logits;
    std::vector<std::vector<float>> ds_logits;  // size 3, full-res first
  };
  Forward forward(const std::vector<float>& patch, const Shape3& size) const;

  void save(const std::string& path) const;
  static SegModel load(const std::string& path);

  std::shared_ptr<Impl> impl_;
};

struct SegTrainStats {
  std::vector<double> train_loss_per_step;
  std::vector<double> val_loss_per_epoch;
  std::vector<double> lr_per_epoch;
  std::vector<std::array<double, 2>> val_dsc_per_epoch;  // VS, cochlea
  int selected_epoch = -1;
};

SegModel train_segmentation(const std::vector<SegCase>& train_cases,
                            const std::vector<SegCase>& val_cases,
                            const SegNetConfig& net_cfg,
                            const SegTrainConfig& train_cfg,
                            LossChoice loss_choice, uint64_t seed,
                            SegTrainStats* stats = nullptr,
                            bool verbose = false);

/// Overlapping-window tiling with uniform averaging of per-window softmax
/// likelihoods; volumes smaller than the patch are edge-padded and cropped.
Likelihoods sliding_window_infer(const Volume& v, const SegModel& m,
                                 double overlap = 0.5);

/// Mean of per-model likelihoods, then per-voxel argmax.
Likelihoods ensemble_likelihoods(const Volume& v,
                                 const std::vector<SegModel>& models,
                                 double overlap = 0.5);
LabelMap ensemble_infer(const Volume& v, const std::vector<SegModel>& models,
                        double overlap = 0.5);

}  // namespace modaseg
