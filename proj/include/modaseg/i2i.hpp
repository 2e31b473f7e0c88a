#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "modaseg/volume.hpp"

namespace modaseg {

/// Dual contrastive unpaired translation: two resnet generators (G source
/// to target, F target to source), two least-squares patch discriminators,
/// and per-layer projection heads over the generator encoder taps for the
/// bidirectional PatchNCE losses.
struct I2ITrainConfig {
  double lr = 2e-4;            // cosine-annealed to 0
  int epochs = 20;             // paper-scale preset uses 200
  double beta1 = 0.5, beta2 = 0.999;
  double tau = 0.07;
  int patches_per_image = 256;
  std::vector<int> nce_layers = {0, 1, 2};  // encoder tap indices
  double lambda_gan = 1.0, lambda_nce = 2.0, lambda_idt = 1.0;

  // architecture
  int ngf = 16, ndf = 16;
  int n_res_blocks = 6;        // 9 at full scale
  int embed_dim = 32;

  int iters_per_epoch = 0;     // 0: one pass over the smaller slice pool
  int crop_size = 0;           // >0: random square crop per step (divisible
                               // by 4); cheaper steps, more variety

  void validate() const;
};

class TranslationNets {
 public:
  struct Impl;

  TranslationNets() = default;
  static TranslationNets create(const I2ITrainConfig& cfg, uint64_t seed);
  /// Test-only pass-through generator so volume plumbing is checkable
  /// without training.
  static TranslationNets identity_mode();

  bool valid() const { return impl_ != nullptr; }
  bool is_identity() const;

  /// Apply G to one slice; output clamped to [0,1]. Slice extents must be
  /// divisible by 4 (two stride-2 encoder stages).
  Slice2D translate_slice(const Slice2D& s) const;

  void save(const std::string& path) const;
  static TranslationNets load(const std::string& path);

  std::shared_ptr<Impl> impl_;
};

/// Mean over queries of -log( exp(q_i.k_i/tau) / sum_j exp(q_i.k_j/tau) ),
/// keys of the other patches acting as negatives. Embeddings are assumed
/// unit-norm. Gradients w.r.t. both inputs, layout row-major [n, dim].
struct NceResult {
  double value = 0.0;
  std::vector<double> dq, dk;
};
NceResult patch_nce_loss(const std::vector<double>& q,
                         const std::vector<double>& k, int n, int dim,
                         double tau);

struct I2ITrainStats {
  std::vector<double> gen_loss_per_step;  // total generator objective
};

TranslationNets train_translation(const std::vector<Slice2D>& src_slices,
                                  const std::vector<Slice2D>& tgt_slices,
                                  const I2ITrainConfig& cfg, uint64_t seed,
                                  I2ITrainStats* stats = nullptr,
                                  bool verbose = false);

/// Slice-wise G over a [0,1]-normalized volume, restacked with the input
/// geometry; deterministic for fixed nets.
Volume translate_volume(const Volume& v, const TranslationNets& nets);

}  // namespace modaseg
