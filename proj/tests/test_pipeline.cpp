#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "modaseg/nifti_io.hpp"
#include "modaseg/pipeline.hpp"

using namespace modaseg;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& tag) {
  fs::path d = fs::temp_directory_path() / ("modaseg_test_pipeline_" + tag);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// small enough that every stage runs in seconds
ExperimentConfig micro_config(const fs::path& root) {
  ExperimentConfig cfg = ExperimentConfig::preset("desk");
  cfg.output_root = (root / "out").string();
  cfg.n_source = 5;
  cfg.n_target = 2;
  cfg.phantom.shape = {32, 32, 16};
  cfg.phantom.spacing = {0.8, 0.8, 1.0};
  cfg.preprocess.target_spacing = {0.8, 0.8, 1.0};
  cfg.i2i.epochs = 1;
  cfg.i2i.iters_per_epoch = 2;
  cfg.i2i.patches_per_image = 16;
  cfg.i2i.ngf = cfg.i2i.ndf = 4;
  cfg.i2i.n_res_blocks = 1;
  cfg.i2i.embed_dim = 8;
  cfg.slice_pool_size = 8;
  cfg.segnet.base_width = 2;
  cfg.segnet.patch_size = {8, 8, 8};
  cfg.segtrain.epochs = 1;
  cfg.segtrain.patches_per_volume = 1;
  cfg.segtrain.folds = 2;
  cfg.svm_iterations = 200;
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return std::string(std::istreambuf_iterator<char>(f), {});
}

}  // namespace

TEST_CASE("scale presets pin the published defaults") {
  ExperimentConfig desk = ExperimentConfig::preset("desk");
  CHECK(desk.scale == "desk");
  CHECK(desk.segnet.base_width == 16);
  CHECK(desk.segnet.patch_size == Shape3{32, 32, 32});
  CHECK(desk.segtrain.folds == 5);
  CHECK(desk.segtrain.lambda == 256.0);
  CHECK(desk.preprocess.clip_lo == 26.0);
  CHECK(desk.preprocess.clip_hi == 486.0);
  CHECK(desk.i2i.lr == 2e-4);
  CHECK(desk.segtrain.lr0 == 1e-3);

  ExperimentConfig paper = ExperimentConfig::preset("paper");
  CHECK(paper.preprocess.target_spacing == Vec3{0.4, 0.4, 0.5});
  CHECK(paper.segnet.patch_size == Shape3{96, 96, 96});
  CHECK(paper.segnet.base_width == 32);
  CHECK(paper.segtrain.epochs == 300);
  CHECK(paper.i2i.epochs == 200);
  CHECK(paper.i2i.n_res_blocks == 9);

  CHECK_THROWS(ExperimentConfig::preset("cloud"));
}

TEST_CASE("config round trips through JSON and partial files override the preset") {
  fs::path d = fresh_dir("cfg");
  ExperimentConfig cfg = micro_config(d);
  cfg.seed = 77;
  std::string p = (d / "config.json").string();
  cfg.save(p);
  ExperimentConfig back = ExperimentConfig::load(p);
  CHECK(back.to_json() == cfg.to_json());
  CHECK(back.seed == 77);
  CHECK(back.n_source == 5);
  CHECK(back.segnet.patch_size == Shape3{8, 8, 8});

  // a file holding only a few keys keeps preset defaults elsewhere
  std::ofstream f(d / "partial.json");
  f << R"({"schema": "modaseg-config-v1", "scale": "desk", "seed": 9, "phantom": {"n_source": 3}})";
  f.close();
  ExperimentConfig part = ExperimentConfig::load((d / "partial.json").string());
  CHECK(part.seed == 9);
  CHECK(part.n_source == 3);
  CHECK(part.segnet.base_width == 16);          // untouched preset value
  CHECK(part.segtrain.lambda == 256.0);

  CHECK_THROWS(ExperimentConfig::load((d / "absent.json").string()));
}

TEST_CASE("fold plans are deterministic, disjoint, and covering") {
  std::vector<std::string> ids;
  for (int i = 0; i < 13; ++i) ids.push_back("case_" + std::to_string(i));
  FoldPlan plan = make_fold_plan(ids, 5, 42);
  REQUIRE(plan.val_ids.size() == 5);

  std::set<std::string> seen;
  for (const auto& fold : plan.val_ids) {
    CHECK(!fold.empty());
    for (const auto& id : fold) CHECK(seen.insert(id).second);  // disjoint
  }
  CHECK(seen.size() == ids.size());  // covering

  // train ids are exactly the complement of the fold's validation ids
  for (int f = 0; f < 5; ++f) {
    auto tr = plan.train_ids(f);
    CHECK(tr.size() + plan.val_ids[f].size() == ids.size());
    for (const auto& id : tr)
      CHECK(std::find(plan.val_ids[f].begin(), plan.val_ids[f].end(), id) ==
            plan.val_ids[f].end());
  }

  // same inputs, same plan; shuffled input order does not matter
  std::vector<std::string> shuffled(ids.rbegin(), ids.rend());
  FoldPlan plan2 = make_fold_plan(shuffled, 5, 42);
  CHECK(plan2.val_ids == plan.val_ids);
  FoldPlan other = make_fold_plan(ids, 5, 43);
  CHECK(other.val_ids != plan.val_ids);

  CHECK_THROWS(make_fold_plan({"a", "b"}, 5, 1));  // fewer cases than folds

  fs::path d = fresh_dir("folds");
  plan.save((d / "folds.json").string());
  FoldPlan loaded = FoldPlan::load((d / "folds.json").string());
  CHECK(loaded.val_ids == plan.val_ids);
}

TEST_CASE("config hash changes with any field and provenance detects staleness") {
  fs::path d = fresh_dir("prov");
  ExperimentConfig cfg = micro_config(d);
  uint64_t h = config_hash(cfg);
  ExperimentConfig cfg2 = cfg;
  cfg2.seed += 1;
  CHECK(config_hash(cfg2) != h);
  ExperimentConfig cfg3 = cfg;
  cfg3.segtrain.lr0 *= 2;
  CHECK(config_hash(cfg3) != h);

  fs::path art = d / "artifact";
  fs::create_directories(art);
  fs::path input = d / "input.txt";
  std::ofstream(input) << "payload";
  write_provenance(art.string(), cfg, {input.string()});
  CHECK(provenance_current(art.string(), cfg, {input.string()}));
  CHECK(!provenance_current(art.string(), cfg2, {input.string()}));  // config drift
  std::ofstream(input) << "different payload";
  CHECK(!provenance_current(art.string(), cfg, {input.string()}));  // input drift
  CHECK(!provenance_current((d / "nowhere").string(), cfg, {}));
}

TEST_CASE("phantom stage writes both domains reproducibly and honors counts") {
  fs::path d = fresh_dir("phantom");
  ExperimentConfig cfg = micro_config(d);
  PipelineOptions opt;
  cmd_phantom(cfg, opt);

  DatasetManifest src = DatasetManifest::load(cfg.dir_phantom_source() + "/manifest.json");
  DatasetManifest tgt = DatasetManifest::load(cfg.dir_phantom_target() + "/manifest.json");
  CHECK(src.entries.size() == 5);
  CHECK(tgt.entries.size() == 2);
  for (const auto& e : src.entries) {
    CHECK(fs::exists(e.volume_path));
    CHECK(fs::exists(e.label_path));
  }

  // second run into a fresh root produces byte-identical volumes
  ExperimentConfig cfg2 = cfg;
  cfg2.output_root = (d / "out2").string();
  cmd_phantom(cfg2, opt);
  DatasetManifest src2 = DatasetManifest::load(cfg2.dir_phantom_source() + "/manifest.json");
  for (std::size_t i = 0; i < src.entries.size(); ++i) {
    CHECK(slurp(src.entries[i].volume_path) == slurp(src2.entries[i].volume_path));
    CHECK(slurp(src.entries[i].label_path) == slurp(src2.entries[i].label_path));
  }

  ExperimentConfig bad = cfg;
  bad.grade_distribution = {0, 0, 0, 0};
  CHECK_THROWS(bad.validate());
}

TEST_CASE("dry runs describe work without touching the filesystem") {
  fs::path d = fresh_dir("dry");
  ExperimentConfig cfg = micro_config(d);
  PipelineOptions opt;
  opt.dry_run = true;
  cmd_phantom(cfg, opt);
  cmd_train_i2i(cfg, opt);
  cmd_run_all(cfg, opt);
  CHECK(!fs::exists(cfg.output_root));
}

TEST_CASE("identity translator reproduces the preprocessed source volumes") {
  fs::path d = fresh_dir("translate");
  ExperimentConfig cfg = micro_config(d);
  PipelineOptions opt;
  cmd_phantom(cfg, opt);

  fs::create_directories(cfg.dir_i2i());
  TranslationNets::identity_mode().save(cfg.dir_i2i() + "/translator.bin");
  cmd_translate(cfg, opt);

  DatasetManifest src = DatasetManifest::load(cfg.dir_phantom_source() + "/manifest.json");
  DatasetManifest tr = DatasetManifest::load(cfg.dir_translated() + "/manifest.json");
  REQUIRE(tr.entries.size() == src.entries.size());

  auto pre_cases = load_cases(src, cfg.preprocess, /*raw=*/true);
  for (std::size_t i = 0; i < tr.entries.size(); ++i) {
    CHECK(tr.entries[i].id == src.entries[i].id);
    CHECK(tr.entries[i].grade == src.entries[i].grade);
    Volume v = load_volume(tr.entries[i].volume_path);
    CHECK(v.shape == pre_cases[i].volume.shape);
    for (int a = 0; a < 3; ++a)  // pixdim is float32 on disk
      CHECK(v.spacing[a] ==
            doctest::Approx(pre_cases[i].volume.spacing[a]).epsilon(1e-6));
    for (std::size_t k = 0; k < v.data.size(); k += 17)
      CHECK(v.data[k] == doctest::Approx(pre_cases[i].volume.data[k]).epsilon(1e-6));
  }
}

TEST_CASE("inference requires checkpoints unless partial results are allowed") {
  fs::path d = fresh_dir("infer");
  ExperimentConfig cfg = micro_config(d);
  PipelineOptions opt;
  cmd_phantom(cfg, opt);

  // no checkpoints at all: hard failure even with --allow-partial
  CHECK_THROWS(cmd_infer(cfg, opt));
  PipelineOptions lax = opt;
  lax.allow_partial = true;
  CHECK_THROWS(cmd_infer(cfg, lax));

  // a single (untrained) fold checkpoint: strict mode refuses, partial runs
  fs::create_directories(cfg.dir_seg());
  SegModel m = SegModel::build(cfg.segnet, 1);
  m.set_fold_id(0);
  m.save(cfg.dir_seg() + "/fold_0.bin");
  CHECK_THROWS(cmd_infer(cfg, opt));
  cmd_infer(cfg, lax);
  DatasetManifest tgt = DatasetManifest::load(cfg.dir_phantom_target() + "/manifest.json");
  for (const auto& e : tgt.entries) {
    fs::path pred = fs::path(cfg.dir_predictions()) / (e.id + "_pred.nii.gz");
    CHECK(fs::exists(pred));
    LabelMap pl = load_labelmap(pred.string());
    LabelMap gt = load_labelmap(e.label_path);
    CHECK(pl.shape == gt.shape);  // predictions live on the native grid
  }
}

TEST_CASE("commands fail with a clear error when upstream artifacts are missing") {
  fs::path d = fresh_dir("missing");
  ExperimentConfig cfg = micro_config(d);
  PipelineOptions opt;
  CHECK_THROWS(cmd_train_i2i(cfg, opt));    // no phantom data yet
  CHECK_THROWS(cmd_translate(cfg, opt));    // no translator yet
  CHECK_THROWS(cmd_train_seg(cfg, opt));    // no translated data yet
  CHECK_THROWS(cmd_train_koos(cfg, opt));   // no translated data yet
  CHECK_THROWS(cmd_predict_koos(cfg, opt)); // no SVM/predictions yet
  CHECK_THROWS(cmd_evaluate(cfg, opt));     // nothing to evaluate
}

TEST_CASE("evaluating ground truth as its own prediction yields perfect scores") {
  fs::path d = fresh_dir("eval");
  ExperimentConfig cfg = micro_config(d);
  PipelineOptions opt;
  cmd_phantom(cfg, opt);

  DatasetManifest tgt = DatasetManifest::load(cfg.dir_phantom_target() + "/manifest.json");
  fs::create_directories(cfg.dir_predictions());
  for (const auto& e : tgt.entries) {
    LabelMap gt = load_labelmap(e.label_path);
    save_labelmap(gt, cfg.dir_predictions() + "/" + e.id + "_pred.nii.gz");
  }
  MetricsReport r = cmd_evaluate(cfg, opt);
  CHECK(r.n_failed == 0);
  CHECK(r.vs.mean_dsc == 1.0);
  CHECK(r.cochlea.mean_dsc == 1.0);
  REQUIRE(r.vs.mean_assd.has_value());
  CHECK(*r.vs.mean_assd == 0.0);
}

TEST_CASE("an interrupted pipeline resumes and matches an uninterrupted run") {
  fs::path d = fresh_dir("resume");

  // full run in root A
  ExperimentConfig a = micro_config(d);
  a.output_root = (d / "full").string();
  PipelineOptions opt;
  opt.deterministic = true;
  MetricsReport ra = cmd_run_all(a, opt);

  // root B: run the first phases, then "crash", then resume with run-all
  ExperimentConfig b = a;
  b.output_root = (d / "resumed").string();
  cmd_phantom(b, opt);
  cmd_train_i2i(b, opt);
  MetricsReport rb = cmd_run_all(b, opt);

  CHECK(ra.to_json() == rb.to_json());

  // a second run-all over finished outputs is a pure no-op with equal report
  MetricsReport rb2 = cmd_run_all(b, opt);
  CHECK(rb2.to_json() == rb.to_json());

  // the report file exists and parses
  CHECK(fs::exists(fs::path(a.dir_report()) / "metrics.json"));
}
