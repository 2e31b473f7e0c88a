#include "modaseg/pipeline.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <stdexcept>

#include "modaseg/nifti_io.hpp"
#include "nlohmann/json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace modaseg {

namespace {

constexpr const char* kConfigSchema = "modaseg-config-v1";
constexpr const char* kProvenanceSchema = "modaseg-provenance-v1";
constexpr const char* kCodeVersion = "modaseg 0.1.0";

std::string loss_name(LossChoice c) {
  return c == LossChoice::AdaptiveTvmf ? "adaptive_tvmf" : "dice_ce";
}

LossChoice parse_loss(const std::string& s) {
  if (s == "adaptive_tvmf") return LossChoice::AdaptiveTvmf;
  if (s == "dice_ce") return LossChoice::DiceCe;
  throw std::invalid_argument("unknown loss '" + s + "'");
}

}  // namespace

ExperimentConfig ExperimentConfig::preset(const std::string& scale) {
  if (scale != "desk" && scale != "paper")
    throw std::invalid_argument("scale must be 'desk' or 'paper'");
  ExperimentConfig c;
  c.scale = scale;
  if (scale == "desk") {
    c.n_source = 12;
    c.n_target = 8;
    c.phantom.shape = {64, 64, 32};
    c.phantom.spacing = {0.8, 0.8, 1.0};
    c.preprocess.target_spacing = {0.8, 0.8, 1.0};
    c.i2i.epochs = 20;
    c.i2i.iters_per_epoch = 24;
    c.i2i.patches_per_image = 128;
    c.i2i.crop_size = 32;
    c.i2i.n_res_blocks = 6;
    c.slice_pool_size = 64;
    c.segnet.base_width = 16;
    c.segnet.patch_size = {32, 32, 32};
    c.segtrain.epochs = 12;
    c.segtrain.patches_per_volume = 2;
  } else {
    c.n_source = 105;  // crossMoDA2022-sized cohorts
    c.n_target = 105;
    c.phantom.shape = {128, 128, 64};
    c.phantom.spacing = {0.8, 0.8, 1.0};
    c.preprocess.target_spacing = {0.4, 0.4, 0.5};
    c.i2i.epochs = 200;
    c.i2i.iters_per_epoch = 0;
    c.i2i.patches_per_image = 256;
    c.i2i.n_res_blocks = 9;
    c.slice_pool_size = 0;
    c.segnet.base_width = 32;
    c.segnet.patch_size = {96, 96, 96};
    c.segtrain.epochs = 300;
    c.segtrain.patches_per_volume = 4;
  }
  return c;
}

void ExperimentConfig::validate() const {
  if (scale != "desk" && scale != "paper")
    throw std::invalid_argument("scale must be 'desk' or 'paper'");
  if (n_source < 1 || n_target < 1)
    throw std::invalid_argument("dataset sizes must be >= 1");
  if (output_root.empty()) throw std::invalid_argument("output_root is empty");
  double mass = 0;
  for (double w : grade_distribution) {
    if (w < 0) throw std::invalid_argument("grade distribution weights must be >= 0");
    mass += w;
  }
  if (mass <= 0) throw std::invalid_argument("grade distribution has no mass");
  if (infer_overlap < 0 || infer_overlap > 0.9)
    throw std::invalid_argument("infer_overlap must be in [0, 0.9]");
  if (svm_c <= 0 || svm_iterations < 1)
    throw std::invalid_argument("invalid classifier config");
  if (slice_pool_size < 0)
    throw std::invalid_argument("slice_pool_size must be >= 0");
  preprocess.validate();
  i2i.validate();
  segnet.validate();
  segtrain.validate();
}

std::string ExperimentConfig::to_json() const {
  json j;
  j["schema"] = kConfigSchema;
  j["scale"] = scale;
  j["seed"] = seed;
  j["output_root"] = output_root;
  j["phantom"] = {{"n_source", n_source},
                  {"n_target", n_target},
                  {"grade_distribution", grade_distribution},
                  {"shape", phantom.shape},
                  {"spacing", phantom.spacing},
                  {"target_noise_sigma", phantom.target_noise_sigma}};
  j["preprocess"] = {{"target_spacing", preprocess.target_spacing},
                     {"clip_lo", preprocess.clip_lo},
                     {"clip_hi", preprocess.clip_hi}};
  j["i2i"] = {{"lr", i2i.lr},
              {"epochs", i2i.epochs},
              {"tau", i2i.tau},
              {"patches_per_image", i2i.patches_per_image},
              {"lambda_gan", i2i.lambda_gan},
              {"lambda_nce", i2i.lambda_nce},
              {"lambda_idt", i2i.lambda_idt},
              {"ngf", i2i.ngf},
              {"ndf", i2i.ndf},
              {"n_res_blocks", i2i.n_res_blocks},
              {"embed_dim", i2i.embed_dim},
              {"iters_per_epoch", i2i.iters_per_epoch},
              {"crop_size", i2i.crop_size},
              {"slice_pool_size", slice_pool_size}};
  j["seg"] = {{"depth", segnet.depth},
              {"base_width", segnet.base_width},
              {"patch_size", segnet.patch_size},
              {"lr0", segtrain.lr0},
              {"epochs", segtrain.epochs},
              {"patches_per_volume", segtrain.patches_per_volume},
              {"sampling_ratio", segtrain.sampling_ratio},
              {"jitter_frac", segtrain.jitter_frac},
              {"intensity_shift", segtrain.intensity_shift},
              {"folds", segtrain.folds},
              {"lambda", segtrain.lambda},
              {"loss", loss_name(seg_loss)},
              {"infer_overlap", infer_overlap}};
  j["koos"] = {{"c", svm_c}, {"iterations", svm_iterations}};
  return j.dump(2) + "\n";
}

void ExperimentConfig::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write config " + path);
  f << to_json();
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read config " + path);
  json j = json::parse(f);
  if (j.value("schema", "") != kConfigSchema)
    throw std::runtime_error(path + ": unknown config schema");

  ExperimentConfig c = preset(j.value("scale", std::string("desk")));
  c.seed = j.value("seed", c.seed);
  c.output_root = j.value("output_root", c.output_root);
  if (j.contains("phantom")) {
    const json& p = j["phantom"];
    c.n_source = p.value("n_source", c.n_source);
    c.n_target = p.value("n_target", c.n_target);
    c.grade_distribution = p.value("grade_distribution", c.grade_distribution);
    c.phantom.shape = p.value("shape", c.phantom.shape);
    c.phantom.spacing = p.value("spacing", c.phantom.spacing);
    c.phantom.target_noise_sigma =
        p.value("target_noise_sigma", c.phantom.target_noise_sigma);
  }
  if (j.contains("preprocess")) {
    const json& p = j["preprocess"];
    c.preprocess.target_spacing =
        p.value("target_spacing", c.preprocess.target_spacing);
    c.preprocess.clip_lo = p.value("clip_lo", c.preprocess.clip_lo);
    c.preprocess.clip_hi = p.value("clip_hi", c.preprocess.clip_hi);
  }
  if (j.contains("i2i")) {
    const json& p = j["i2i"];
    c.i2i.lr = p.value("lr", c.i2i.lr);
    c.i2i.epochs = p.value("epochs", c.i2i.epochs);
    c.i2i.tau = p.value("tau", c.i2i.tau);
    c.i2i.patches_per_image = p.value("patches_per_image", c.i2i.patches_per_image);
    c.i2i.lambda_gan = p.value("lambda_gan", c.i2i.lambda_gan);
    c.i2i.lambda_nce = p.value("lambda_nce", c.i2i.lambda_nce);
    c.i2i.lambda_idt = p.value("lambda_idt", c.i2i.lambda_idt);
    c.i2i.ngf = p.value("ngf", c.i2i.ngf);
    c.i2i.ndf = p.value("ndf", c.i2i.ndf);
    c.i2i.n_res_blocks = p.value("n_res_blocks", c.i2i.n_res_blocks);
    c.i2i.embed_dim = p.value("embed_dim", c.i2i.embed_dim);
    c.i2i.iters_per_epoch = p.value("iters_per_epoch", c.i2i.iters_per_epoch);
    c.i2i.crop_size = p.value("crop_size", c.i2i.crop_size);
    c.slice_pool_size = p.value("slice_pool_size", c.slice_pool_size);
  }
  if (j.contains("seg")) {
    const json& p = j["seg"];
    c.segnet.depth = p.value("depth", c.segnet.depth);
    c.segnet.base_width = p.value("base_width", c.segnet.base_width);
    c.segnet.patch_size = p.value("patch_size", c.segnet.patch_size);
    c.segtrain.lr0 = p.value("lr0", c.segtrain.lr0);
    c.segtrain.epochs = p.value("epochs", c.segtrain.epochs);
    c.segtrain.patches_per_volume =
        p.value("patches_per_volume", c.segtrain.patches_per_volume);
    c.segtrain.sampling_ratio = p.value("sampling_ratio", c.segtrain.sampling_ratio);
    c.segtrain.jitter_frac = p.value("jitter_frac", c.segtrain.jitter_frac);
    c.segtrain.intensity_shift = p.value("intensity_shift", c.segtrain.intensity_shift);
    c.segtrain.folds = p.value("folds", c.segtrain.folds);
    c.segtrain.lambda = p.value("lambda", c.segtrain.lambda);
    if (p.contains("loss")) c.seg_loss = parse_loss(p["loss"].get<std::string>());
    c.infer_overlap = p.value("infer_overlap", c.infer_overlap);
  }
  if (j.contains("koos")) {
    const json& p = j["koos"];
    c.svm_c = p.value("c", c.svm_c);
    c.svm_iterations = p.value("iterations", c.svm_iterations);
  }
  c.validate();
  return c;
}

std::string ExperimentConfig::dir_phantom_source() const {
  return (fs::path(output_root) / "phantom" / "source").string();
}
std::string ExperimentConfig::dir_phantom_target() const {
  return (fs::path(output_root) / "phantom" / "target").string();
}
std::string ExperimentConfig::dir_i2i() const {
  return (fs::path(output_root) / "i2i").string();
}
std::string ExperimentConfig::dir_translated() const {
  return (fs::path(output_root) / "translated").string();
}
std::string ExperimentConfig::dir_seg() const {
  return (fs::path(output_root) / "seg").string();
}
std::string ExperimentConfig::dir_predictions() const {
  return (fs::path(output_root) / "predictions").string();
}
std::string ExperimentConfig::dir_koos() const {
  return (fs::path(output_root) / "koos").string();
}
std::string ExperimentConfig::dir_grades() const {
  return (fs::path(output_root) / "grades").string();
}
std::string ExperimentConfig::dir_report() const {
  return (fs::path(output_root) / "report").string();
}

// ---------------- folds ----------------

FoldPlan make_fold_plan(std::vector<std::string> case_ids, int folds,
                        uint64_t seed) {
  if (folds < 1) throw std::invalid_argument("folds must be >= 1");
  if (int(case_ids.size()) < folds)
    throw std::invalid_argument("need at least one case per fold");
  std::sort(case_ids.begin(), case_ids.end());
  Rng rng(mix_seed(seed, 0x464f4c44));  // "FOLD"
  rng.shuffle(case_ids);
  FoldPlan plan;
  plan.val_ids.resize(folds);
  for (std::size_t i = 0; i < case_ids.size(); ++i)
    plan.val_ids[i % folds].push_back(case_ids[i]);
  for (auto& fold : plan.val_ids) std::sort(fold.begin(), fold.end());
  return plan;
}

std::vector<std::string> FoldPlan::train_ids(int fold) const {
  if (fold < 0 || fold >= int(val_ids.size()))
    throw std::invalid_argument("fold index out of range");
  std::vector<std::string> out;
  for (int f = 0; f < int(val_ids.size()); ++f)
    if (f != fold) out.insert(out.end(), val_ids[f].begin(), val_ids[f].end());
  std::sort(out.begin(), out.end());
  return out;
}

void FoldPlan::save(const std::string& path) const {
  json j = {{"schema", "modaseg-folds-v1"}, {"val_ids", val_ids}};
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write fold plan " + path);
  f << j.dump(2) << "\n";
}

FoldPlan FoldPlan::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read fold plan " + path);
  json j = json::parse(f);
  FoldPlan plan;
  plan.val_ids = j.at("val_ids").get<std::vector<std::vector<std::string>>>();
  return plan;
}

// ---------------- provenance ----------------

namespace {

uint64_t fnv1a(const void* data, std::size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

uint64_t file_hash(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot hash missing file " + path);
  uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 16];
  while (f) {
    f.read(buf, sizeof(buf));
    h = fnv1a(buf, std::size_t(f.gcount()), h);
  }
  return h;
}

json provenance_json(const ExperimentConfig& cfg,
                     const std::vector<std::string>& input_files) {
  json inputs = json::object();
  for (const auto& p : input_files) inputs[p] = hex64(file_hash(p));
  return json{{"schema", kProvenanceSchema},
              {"config_hash", hex64(config_hash(cfg))},
              {"seed", cfg.seed},
              {"code_version", kCodeVersion},
              {"inputs", inputs}};
}

}  // namespace

uint64_t config_hash(const ExperimentConfig& cfg) {
  std::string s = cfg.to_json();
  return fnv1a(s.data(), s.size());
}

void write_provenance(const std::string& dir, const ExperimentConfig& cfg,
                      const std::vector<std::string>& input_files) {
  fs::create_directories(dir);
  std::ofstream f(fs::path(dir) / "provenance.json", std::ios::binary);
  if (!f) throw std::runtime_error("cannot write provenance in " + dir);
  f << provenance_json(cfg, input_files).dump(2) << "\n";
}

bool provenance_current(const std::string& dir, const ExperimentConfig& cfg,
                        const std::vector<std::string>& input_files) {
  fs::path p = fs::path(dir) / "provenance.json";
  if (!fs::exists(p)) return false;
  for (const auto& in : input_files)
    if (!fs::exists(in)) return false;
  std::ifstream f(p, std::ios::binary);
  json have = json::parse(f, nullptr, false);
  if (have.is_discarded()) return false;
  return have == provenance_json(cfg, input_files);
}

// ---------------- shared loading ----------------

std::vector<SegCase> load_cases(const DatasetManifest& m,
                                const PreprocessConfig& pre, bool raw) {
  std::vector<SegCase> cases;
  cases.reserve(m.entries.size());
  for (const auto& e : m.entries) {
    SegCase c;
    Volume v = load_volume(e.volume_path);
    v = resample(v, pre.target_spacing);
    c.volume = raw ? normalize(v, pre) : std::move(v);
    c.labels = resample(load_labelmap(e.label_path), pre.target_spacing);
    cases.push_back(std::move(c));
  }
  return cases;
}

// ---------------- commands ----------------

namespace {

std::string manifest_path(const std::string& dir) {
  return (fs::path(dir) / "manifest.json").string();
}

void require_manifest(const std::string& dir, const std::string& what) {
  if (!fs::exists(manifest_path(dir)))
    throw std::runtime_error("missing " + what + " manifest; run the producing command first (" +
                             manifest_path(dir) + ")");
}

std::string fold_ckpt(const ExperimentConfig& cfg, int fold) {
  return (fs::path(cfg.dir_seg()) / ("fold_" + std::to_string(fold) + ".bin")).string();
}

std::string fold_plan_path(const ExperimentConfig& cfg) {
  return (fs::path(cfg.dir_seg()) / "folds.json").string();
}

std::string translator_path(const ExperimentConfig& cfg) {
  return (fs::path(cfg.dir_i2i()) / "translator.bin").string();
}

std::string svm_path(const ExperimentConfig& cfg) {
  return (fs::path(cfg.dir_koos()) / "svm.json").string();
}

std::string grades_path(const ExperimentConfig& cfg) {
  return (fs::path(cfg.dir_grades()) / "predicted_grades.json").string();
}

bool announce_dry(const PipelineOptions& opt, const std::string& what) {
  if (opt.dry_run) std::cout << "[dry-run] would " << what << "\n";
  return opt.dry_run;
}

/// Axial slice pool over every case of a dataset, optionally subsampled to
/// a fixed size with a seeded shuffle.
std::vector<Slice2D> slice_pool(const std::vector<SegCase>& cases,
                                int pool_size, uint64_t seed) {
  std::vector<Slice2D> pool;
  for (const auto& c : cases) {
    auto slices = extract_axial_slices(c.volume);
    pool.insert(pool.end(), slices.begin(), slices.end());
  }
  if (pool_size > 0 && int(pool.size()) > pool_size) {
    Rng rng(mix_seed(seed, 0x504f4f4c));  // "POOL"
    rng.shuffle(pool);
    pool.resize(pool_size);
  }
  return pool;
}

}  // namespace

void cmd_phantom(const ExperimentConfig& cfg, const PipelineOptions& opt) {
  cfg.validate();
  if (announce_dry(opt, "generate " + std::to_string(cfg.n_source) + " source and " +
                            std::to_string(cfg.n_target) + " target phantom cases"))
    return;
  PhantomSpec proto = cfg.phantom;
  generate_dataset(cfg.n_source, mix_seed(cfg.seed, 0x535243), Domain::Source,
                   cfg.grade_distribution, cfg.dir_phantom_source(), proto);
  generate_dataset(cfg.n_target, mix_seed(cfg.seed, 0x544754), Domain::Target,
                   cfg.grade_distribution, cfg.dir_phantom_target(), proto);
  write_provenance(cfg.dir_phantom_source(), cfg, {});
  write_provenance(cfg.dir_phantom_target(), cfg, {});
}

void cmd_train_i2i(const ExperimentConfig& cfg, const PipelineOptions& opt) {
  cfg.validate();
  if (announce_dry(opt, "train the translator for " + std::to_string(cfg.i2i.epochs) +
                            " epochs"))
    return;
  require_manifest(cfg.dir_phantom_source(), "source");
  require_manifest(cfg.dir_phantom_target(), "target");
  auto src = load_cases(DatasetManifest::load(manifest_path(cfg.dir_phantom_source())),
                        cfg.preprocess, true);
  auto tgt = load_cases(DatasetManifest::load(manifest_path(cfg.dir_phantom_target())),
                        cfg.preprocess, true);
  auto src_slices = slice_pool(src, cfg.slice_pool_size, mix_seed(cfg.seed, 1));
  auto tgt_slices = slice_pool(tgt, cfg.slice_pool_size, mix_seed(cfg.seed, 2));
  TranslationNets nets =
      train_translation(src_slices, tgt_slices, cfg.i2i,
                        mix_seed(cfg.seed, 0x493249), nullptr, opt.verbose);
  fs::create_directories(cfg.dir_i2i());
  nets.save(translator_path(cfg));
  write_provenance(cfg.dir_i2i(), cfg,
                   {manifest_path(cfg.dir_phantom_source()),
                    manifest_path(cfg.dir_phantom_target())});
}

void cmd_translate(const ExperimentConfig& cfg, const PipelineOptions& opt) {
  cfg.validate();
  if (announce_dry(opt, "translate every source case to target appearance")) return;
  require_manifest(cfg.dir_phantom_source(), "source");
  if (!fs::exists(translator_path(cfg)))
    throw std::runtime_error("missing translator checkpoint; run train-i2i first");

  TranslationNets nets = TranslationNets::load(translator_path(cfg));
  DatasetManifest src = DatasetManifest::load(manifest_path(cfg.dir_phantom_source()));
  fs::create_directories(cfg.dir_translated());

  DatasetManifest out;
  for (const auto& e : src.entries) {
    Volume v = normalize(resample(load_volume(e.volume_path), cfg.preprocess.target_spacing),
                         cfg.preprocess);
    Volume t = translate_volume(v, nets);
    LabelMap l = resample(load_labelmap(e.label_path), cfg.preprocess.target_spacing);
    std::string vol_path = (fs::path(cfg.dir_translated()) / (e.id + "_vol.nii.gz")).string();
    std::string lab_path = (fs::path(cfg.dir_translated()) / (e.id + "_lab.nii.gz")).string();
    save_volume(t, vol_path);
    save_labelmap(l, lab_path);
    out.entries.push_back({e.id, Domain::Target, e.grade, vol_path, lab_path});
  }
  out.save(manifest_path(cfg.dir_translated()));
  write_provenance(cfg.dir_translated(), cfg,
                   {manifest_path(cfg.dir_phantom_source()), translator_path(cfg)});
}

void cmd_train_seg(const ExperimentConfig& cfg, const PipelineOptions& opt) {
  cfg.validate();
  std::string what = opt.fold >= 0 ? "train segmentation fold " + std::to_string(opt.fold)
                                   : "train all " + std::to_string(cfg.segtrain.folds) +
                                         " segmentation folds";
  if (announce_dry(opt, what)) return;
  require_manifest(cfg.dir_translated(), "translated");
  if (opt.fold >= cfg.segtrain.folds)
    throw std::invalid_argument("fold index out of range");

  DatasetManifest m = DatasetManifest::load(manifest_path(cfg.dir_translated()));
  std::vector<std::string> ids;
  for (const auto& e : m.entries) ids.push_back(e.id);
  FoldPlan plan = make_fold_plan(ids, cfg.segtrain.folds, cfg.seed);
  fs::create_directories(cfg.dir_seg());
  plan.save(fold_plan_path(cfg));

  std::vector<SegCase> cases = load_cases(m, cfg.preprocess, false);
  auto case_of = [&](const std::string& id) -> const SegCase& {
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (m.entries[i].id == id) return cases[i];
    throw std::logic_error("fold id not in manifest: " + id);
  };

  int first = opt.fold >= 0 ? opt.fold : 0;
  int last = opt.fold >= 0 ? opt.fold + 1 : cfg.segtrain.folds;
  for (int fold = first; fold < last; ++fold) {
    std::vector<SegCase> train, val;
    for (const auto& id : plan.train_ids(fold)) train.push_back(case_of(id));
    for (const auto& id : plan.val_ids[fold]) val.push_back(case_of(id));
    SegModel model =
        train_segmentation(train, val, cfg.segnet, cfg.segtrain, cfg.seg_loss,
                           mix_seed(cfg.seed, 0x464c4400 + uint64_t(fold)),
                           nullptr, opt.verbose);
    model.set_fold_id(fold);
    model.save(fold_ckpt(cfg, fold));
  }
  write_provenance(cfg.dir_seg(), cfg, {manifest_path(cfg.dir_translated())});
}

void cmd_infer(const ExperimentConfig& cfg, const PipelineOptions& opt) {
  cfg.validate();
  if (announce_dry(opt, "run ensemble inference on every target case")) return;
  require_manifest(cfg.dir_phantom_target(), "target");

  std::vector<SegModel> models;
  std::vector<std::string> ckpts;
  std::vector<int> missing;
  for (int fold = 0; fold < cfg.segtrain.folds; ++fold) {
    std::string p = fold_ckpt(cfg, fold);
    if (fs::exists(p)) {
      models.push_back(SegModel::load(p));
      ckpts.push_back(p);
    } else {
      missing.push_back(fold);
    }
  }
  if (!missing.empty()) {
    std::string list;
    for (int f : missing) list += (list.empty() ? "" : ", ") + std::to_string(f);
    if (!opt.allow_partial)
      throw std::runtime_error("missing checkpoints for folds " + list +
                               "; train them or pass --allow-partial");
    std::cerr << "warning: ensembling without folds " << list << " ("
              << models.size() << "/" << cfg.segtrain.folds << " models)\n";
  }
  if (models.empty())
    throw std::runtime_error("no segmentation checkpoints found in " + cfg.dir_seg());

  DatasetManifest tgt = DatasetManifest::load(manifest_path(cfg.dir_phantom_target()));
  fs::create_directories(cfg.dir_predictions());
  for (const auto& e : tgt.entries) {
    Volume raw = load_volume(e.volume_path);
    Volume v = normalize(resample(raw, cfg.preprocess.target_spacing), cfg.preprocess);
    LabelMap pred = ensemble_infer(v, models, cfg.infer_overlap);
    // back to the native grid so predictions align with the ground truth
    pred = resample(pred, raw.spacing);
    save_labelmap(pred, (fs::path(cfg.dir_predictions()) / (e.id + "_pred.nii.gz")).string());
  }
  std::vector<std::string> inputs = {manifest_path(cfg.dir_phantom_target())};
  inputs.insert(inputs.end(), ckpts.begin(), ckpts.end());
  write_provenance(cfg.dir_predictions(), cfg, inputs);
}

void cmd_train_koos(const ExperimentConfig& cfg, const PipelineOptions& opt) {
  cfg.validate();
  if (announce_dry(opt, "fit the grade classifier on source ground truth")) return;
  require_manifest(cfg.dir_phantom_source(), "source");

  DatasetManifest src = DatasetManifest::load(manifest_path(cfg.dir_phantom_source()));
  std::vector<KoosFeatures> feats;
  std::vector<int> grades;
  for (const auto& e : src.entries) {
    feats.push_back(extract_features(load_labelmap(e.label_path)));
    grades.push_back(e.grade);
  }
  LinearSvmModel svm = train_svm(feats, grades, cfg.svm_c,
                                 mix_seed(cfg.seed, 0x53564d), cfg.svm_iterations);
  fs::create_directories(cfg.dir_koos());
  svm.save(svm_path(cfg));
  write_provenance(cfg.dir_koos(), cfg, {manifest_path(cfg.dir_phantom_source())});
}

void cmd_predict_koos(const ExperimentConfig& cfg, const PipelineOptions& opt) {
  cfg.validate();
  if (announce_dry(opt, "predict grades from predicted segmentations")) return;
  require_manifest(cfg.dir_phantom_target(), "target");
  if (!fs::exists(svm_path(cfg)))
    throw std::runtime_error("missing classifier model; run train-koos first");

  LinearSvmModel svm = LinearSvmModel::load(svm_path(cfg));
  DatasetManifest tgt = DatasetManifest::load(manifest_path(cfg.dir_phantom_target()));
  json grades = json::object();
  for (const auto& e : tgt.entries) {
    fs::path p = fs::path(cfg.dir_predictions()) / (e.id + "_pred.nii.gz");
    if (!fs::exists(p)) {
      if (!opt.allow_partial)
        throw std::runtime_error("missing prediction for case " + e.id +
                                 "; run infer first or pass --allow-partial");
      std::cerr << "warning: skipping case " << e.id << " without a prediction\n";
      continue;
    }
    grades[e.id] = predict_grade(svm, extract_features(load_labelmap(p.string())));
  }
  fs::create_directories(cfg.dir_grades());
  std::ofstream f(grades_path(cfg), std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + grades_path(cfg));
  f << grades.dump(2) << "\n";
  write_provenance(cfg.dir_grades(), cfg,
                   {manifest_path(cfg.dir_phantom_target()), svm_path(cfg)});
}

MetricsReport cmd_evaluate(const ExperimentConfig& cfg, const PipelineOptions& opt) {
  cfg.validate();
  if (announce_dry(opt, "evaluate predictions against target ground truth"))
    return MetricsReport{};
  require_manifest(cfg.dir_phantom_target(), "target");

  DatasetManifest tgt = DatasetManifest::load(manifest_path(cfg.dir_phantom_target()));
  std::string grades = fs::exists(grades_path(cfg)) ? grades_path(cfg) : "";
  MetricsReport report = evaluate_dataset(cfg.dir_predictions(), tgt, grades);
  fs::create_directories(cfg.dir_report());
  report.save((fs::path(cfg.dir_report()) / "metrics.json").string());
  std::vector<std::string> inputs = {manifest_path(cfg.dir_phantom_target())};
  if (!grades.empty()) inputs.push_back(grades);
  write_provenance(cfg.dir_report(), cfg, inputs);
  return report;
}

MetricsReport cmd_run_all(const ExperimentConfig& cfg, const PipelineOptions& opt) {
  cfg.validate();
  struct Phase {
    std::string name;
    std::string dir;
    std::vector<std::string> inputs;   // hashed into provenance
    std::vector<std::string> outputs;  // must exist to skip
    std::function<void()> run;
  };

  std::vector<Phase> phases = {
      {"phantom",
       cfg.dir_phantom_target(),
       {},
       {manifest_path(cfg.dir_phantom_source()), manifest_path(cfg.dir_phantom_target())},
       [&] { cmd_phantom(cfg, opt); }},
      {"train-i2i",
       cfg.dir_i2i(),
       {manifest_path(cfg.dir_phantom_source()), manifest_path(cfg.dir_phantom_target())},
       {translator_path(cfg)},
       [&] { cmd_train_i2i(cfg, opt); }},
      {"translate",
       cfg.dir_translated(),
       {manifest_path(cfg.dir_phantom_source()), translator_path(cfg)},
       {manifest_path(cfg.dir_translated())},
       [&] { cmd_translate(cfg, opt); }},
      {"train-seg",
       cfg.dir_seg(),
       {manifest_path(cfg.dir_translated())},
       {},
       [&] {
         PipelineOptions o = opt;
         o.fold = -1;
         cmd_train_seg(cfg, o);
       }},
      {"infer",
       cfg.dir_predictions(),
       {manifest_path(cfg.dir_phantom_target())},
       {},
       [&] { cmd_infer(cfg, opt); }},
      {"train-koos",
       cfg.dir_koos(),
       {manifest_path(cfg.dir_phantom_source())},
       {svm_path(cfg)},
       [&] { cmd_train_koos(cfg, opt); }},
      {"predict-koos",
       cfg.dir_grades(),
       {manifest_path(cfg.dir_phantom_target()), svm_path(cfg)},
       {grades_path(cfg)},
       [&] { cmd_predict_koos(cfg, opt); }},
  };
  for (int fold = 0; fold < cfg.segtrain.folds; ++fold) {
    phases[3].outputs.push_back(fold_ckpt(cfg, fold));
    phases[4].inputs.push_back(fold_ckpt(cfg, fold));
  }
  for (auto& phase : phases) {
    bool outputs_ok = true;
    for (const auto& out : phase.outputs)
      if (!fs::exists(out)) outputs_ok = false;
    // inputs can only be hashed once the producing phase ran, so provenance
    // checks are skipped for phases whose inputs are still missing
    bool inputs_ok = true;
    for (const auto& in : phase.inputs)
      if (!fs::exists(in)) inputs_ok = false;
    if (outputs_ok && inputs_ok && provenance_current(phase.dir, cfg, phase.inputs)) {
      std::cout << "[run-all] " << phase.name << ": up to date, skipping\n";
      continue;
    }
    if (opt.dry_run) {
      std::cout << "[run-all] " << phase.name << ": would run\n";
      continue;
    }
    std::cout << "[run-all] " << phase.name << "\n";
    phase.run();
  }

  if (opt.dry_run) {
    std::cout << "[run-all] evaluate: would run\n";
    return MetricsReport{};
  }
  std::cout << "[run-all] evaluate\n";
  return cmd_evaluate(cfg, opt);
}

}  // namespace modaseg
