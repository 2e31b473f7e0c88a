#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "modaseg/i2i.hpp"
#include "modaseg/koos.hpp"
#include "modaseg/metrics.hpp"
#include "modaseg/phantom.hpp"
#include "modaseg/segnet.hpp"
#include "modaseg/volume.hpp"

namespace modaseg {

/// Single JSON document driving every command; the scale preset fills the
/// defaults and any explicitly given key overrides them.
struct ExperimentConfig {
  std::string scale = "desk";  // or "paper"
  uint64_t seed = 1234;
  std::string output_root = "out";

  // phantom
  int n_source = 12;
  int n_target = 8;
  std::array<double, 4> grade_distribution{1, 1, 1, 1};
  PhantomSpec phantom;  // shape/spacing/noise proto

  PreprocessConfig preprocess;
  I2ITrainConfig i2i;
  int slice_pool_size = 0;  // 0: use every axial slice

  SegNetConfig segnet;
  SegTrainConfig segtrain;
  LossChoice seg_loss = LossChoice::AdaptiveTvmf;
  double infer_overlap = 0.25;

  double svm_c = 10.0;
  int svm_iterations = 2000;

  static ExperimentConfig preset(const std::string& scale);
  static ExperimentConfig load(const std::string& path);
  void save(const std::string& path) const;
  std::string to_json() const;

  void validate() const;

  // artifact directories under output_root
  std::string dir_phantom_source() const;
  std::string dir_phantom_target() const;
  std::string dir_i2i() const;
  std::string dir_translated() const;
  std::string dir_seg() const;
  std::string dir_predictions() const;
  std::string dir_koos() const;
  std::string dir_grades() const;
  std::string dir_report() const;
};

/// Seeded 5-fold (train, val) split over case ids; validation sets are
/// disjoint and cover every case.
struct FoldPlan {
  std::vector<std::vector<std::string>> val_ids;  // one list per fold

  std::vector<std::string> train_ids(int fold) const;
  void save(const std::string& path) const;
  static FoldPlan load(const std::string& path);
};

FoldPlan make_fold_plan(std::vector<std::string> case_ids, int folds,
                        uint64_t seed);

/// 64-bit FNV-1a over the canonical config serialization.
uint64_t config_hash(const ExperimentConfig& cfg);

/// provenance.json written into every artifact directory.
void write_provenance(const std::string& dir, const ExperimentConfig& cfg,
                      const std::vector<std::string>& input_files);
/// True when dir holds a provenance file matching cfg and the hashes of the
/// listed inputs.
bool provenance_current(const std::string& dir, const ExperimentConfig& cfg,
                        const std::vector<std::string>& input_files);

struct PipelineOptions {
  bool allow_partial = false;
  bool deterministic = false;
  bool dry_run = false;
  int fold = -1;  // train-seg: -1 trains every fold
  bool verbose = false;
};

void cmd_phantom(const ExperimentConfig& cfg, const PipelineOptions& opt);
void cmd_train_i2i(const ExperimentConfig& cfg, const PipelineOptions& opt);
void cmd_translate(const ExperimentConfig& cfg, const PipelineOptions& opt);
void cmd_train_seg(const ExperimentConfig& cfg, const PipelineOptions& opt);
void cmd_infer(const ExperimentConfig& cfg, const PipelineOptions& opt);
void cmd_train_koos(const ExperimentConfig& cfg, const PipelineOptions& opt);
void cmd_predict_koos(const ExperimentConfig& cfg, const PipelineOptions& opt);
MetricsReport cmd_evaluate(const ExperimentConfig& cfg,
                           const PipelineOptions& opt);
/// All phases in order; a phase is skipped when its provenance still
/// matches, so an interrupted run resumes where it stopped.
MetricsReport cmd_run_all(const ExperimentConfig& cfg,
                          const PipelineOptions& opt);

/// Manifest cases resampled to the configured spacing; raw datasets are
/// also clip-normalized, already-translated ones are stored normalized.
std::vector<SegCase> load_cases(const DatasetManifest& m,
                                const PreprocessConfig& pre, bool raw);

}  // namespace modaseg
