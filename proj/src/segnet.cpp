#include "modaseg/segnet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <stdexcept>

#include "modaseg/tensor.hpp"
#include "nlohmann/json.hpp"

using json = nlohmann::ordered_json;

namespace modaseg {

using namespace nn;

void SegNetConfig::validate() const {
  if (in_channels != 1) throw std::invalid_argument("in_channels must be 1");
  if (num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
  if (ds_heads != 3) throw std::invalid_argument("deep supervision uses exactly 3 heads");
  if (depth < 4) throw std::invalid_argument("encoder depth must be >= 4 for 3 supervision levels");
  if (base_width < 1) throw std::invalid_argument("base_width must be >= 1");
  int div = 1 << (depth - 1);
  for (int d : patch_size)
    if (d <= 0 || d % div != 0)
      throw std::invalid_argument("patch_size must be divisible by 2^(depth-1)");
}

void SegTrainConfig::validate() const {
  if (lr0 <= 0 || epochs < 1 || patches_per_volume < 1 || folds < 1 || lambda < 0)
    throw std::invalid_argument("invalid segmentation training config");
  for (double r : sampling_ratio)
    if (r < 0) throw std::invalid_argument("sampling ratio components must be >= 0");
  if (sampling_ratio[0] + sampling_ratio[1] + sampling_ratio[2] <= 0)
    throw std::invalid_argument("sampling ratio must have positive mass");
  if (jitter_frac < 0 || jitter_frac > 1)
    throw std::invalid_argument("jitter_frac must be in [0,1]");
  if (intensity_shift < 0 || intensity_shift >= 1)
    throw std::invalid_argument("intensity shift magnitude must be in [0,1)");
  ds_weights.validate();
}

namespace {

std::vector<float> gauss_init(std::size_t n, Rng& rng, float std_dev) {
  std::vector<float> v(n);
  for (auto& x : v) x = float(rng.gauss()) * std_dev;
  return v;
}

struct Conv3 {
  Var w, b;
  int stride = 1, pad = 1;

  Conv3() = default;
  Conv3(int cin, int cout, int k, int stride_, int pad_, Rng& rng,
        std::vector<Var>& params) : stride(stride_), pad(pad_) {
    // He-style scale for k^3 receptive fields
    float std_dev = std::sqrt(2.0f / float(cin * k * k * k));
    w = make_param({cout, cin, k, k, k},
                   gauss_init(std::size_t(cout) * cin * k * k * k, rng, std_dev));
    b = make_param({cout}, std::vector<float>(cout, 0.0f));
    params.push_back(w);
    params.push_back(b);
  }
  Var operator()(const Var& x) const { return conv3d(x, w, b, stride, pad); }
};

struct Norm3 {
  Var gamma, beta;

  Norm3() = default;
  Norm3(int c, std::vector<Var>& params) {
    gamma = make_param({c}, std::vector<float>(c, 1.0f));
    beta = make_param({c}, std::vector<float>(c, 0.0f));
    params.push_back(gamma);
    params.push_back(beta);
  }
  Var operator()(const Var& x) const { return instance_norm(x, gamma, beta); }
};

struct ResBlock {
  Conv3 c1, c2, proj;
  Norm3 n1, n2;
  bool has_proj = false;

  ResBlock() = default;
  ResBlock(int cin, int cout, Rng& rng, std::vector<Var>& params) {
    c1 = Conv3(cin, cout, 3, 1, 1, rng, params);
    n1 = Norm3(cout, params);
    c2 = Conv3(cout, cout, 3, 1, 1, rng, params);
    n2 = Norm3(cout, params);
    if (cin != cout) {
      proj = Conv3(cin, cout, 1, 1, 0, rng, params);
      has_proj = true;
    }
  }
  Var operator()(const Var& x) const {
    Var h = n2(c2(relu(n1(c1(x)))));
    Var skip = has_proj ? proj(x) : x;
    return relu(add(h, skip));
  }
};

}  // namespace

struct SegModel::Impl {
  SegNetConfig cfg;
  int fold_id = -1;

  ResBlock enc0;
  struct Down {
    Conv3 down;
    Norm3 dn;
    ResBlock block;
  };
  std::vector<Down> encoder;  // levels 1..depth-1
  struct Up {
    Conv3 up;
    Norm3 un;
    ResBlock block;
  };
  std::vector<Up> decoder;    // levels depth-2..0 (stored in that order)
  std::vector<Conv3> heads;   // 1x1x1 per supervised decoder level 0..2
  std::vector<Var> params;

  void build(const SegNetConfig& c, uint64_t seed) {
    cfg = c;
    Rng rng(mix_seed(seed, 0x534547));
    int w0 = c.base_width;
    enc0 = ResBlock(c.in_channels, w0, rng, params);
    for (int i = 1; i < c.depth; ++i) {
      Down d;
      d.down = Conv3(w0 << (i - 1), w0 << i, 3, 2, 1, rng, params);
      d.dn = Norm3(w0 << i, params);
      d.block = ResBlock(w0 << i, w0 << i, rng, params);
      encoder.push_back(std::move(d));
    }
    for (int i = c.depth - 2; i >= 0; --i) {
      Up u;
      u.up = Conv3(w0 << (i + 1), w0 << i, 3, 1, 1, rng, params);
      u.un = Norm3(w0 << i, params);
      u.block = ResBlock(w0 << i, w0 << i, rng, params);
      decoder.push_back(std::move(u));
    }
    for (int d = 0; d < c.ds_heads; ++d)
      heads.push_back(Conv3(w0 << d, c.num_classes, 1, 1, 0, rng, params));
  }

  /// Supervision logits, full-res head first; heads on coarser decoder
  /// levels are trilinearly upsampled to patch resolution. The full-res
  /// head doubles as the main output.
  std::vector<Var> forward_vars(const Var& x) const {
    std::vector<Var> skips;  // encoder features per level
    Var h = enc0(x);
    skips.push_back(h);
    for (const auto& d : encoder) {
      h = d.block(relu(d.dn(d.down(h))));
      skips.push_back(h);
    }
    // decoder with additive skips; keep features of levels 0..2 for heads
    std::vector<Var> dec_feats(cfg.depth - 1);
    for (std::size_t k = 0; k < decoder.size(); ++k) {
      int level = cfg.depth - 2 - int(k);
      const auto& u = decoder[k];
      h = relu(u.un(u.up(upsample3d_nearest(h, 2))));
      h = u.block(add(h, skips[level]));
      dec_feats[level] = h;
    }
    std::vector<Var> out;
    for (int d = 0; d < cfg.ds_heads; ++d) {
      Var logits = heads[d](dec_feats[d]);
      if (d > 0) logits = upsample3d_trilinear(logits, 1 << d);
      out.push_back(logits);
    }
    return out;
  }

  json fingerprint() const {
    return json{{"in_channels", cfg.in_channels},
                {"num_classes", cfg.num_classes},
                {"depth", cfg.depth},
                {"base_width", cfg.base_width},
                {"ds_heads", cfg.ds_heads},
                {"patch_size", cfg.patch_size},
                {"fold_id", fold_id}};
  }
};

SegModel SegModel::build(const SegNetConfig& cfg, uint64_t seed) {
  cfg.validate();
  SegModel m;
  m.impl_ = std::make_shared<Impl>();
  m.impl_->build(cfg, seed);
  return m;
}

const SegNetConfig& SegModel::config() const {
  if (!impl_) throw std::logic_error("segmentation model not initialized");
  return impl_->cfg;
}

int SegModel::fold_id() const { return impl_ ? impl_->fold_id : -1; }
void SegModel::set_fold_id(int id) {
  if (!impl_) throw std::logic_error("segmentation model not initialized");
  impl_->fold_id = id;
}

SegModel::Forward SegModel::forward(const std::vector<float>& patch,
                                    const Shape3& size) const {
  if (!impl_) throw std::logic_error("segmentation model not initialized");
  if (patch.size() != std::size_t(size[0]) * size[1] * size[2])
    throw std::invalid_argument("patch data does not match given size");
  Var x = make_var({1, size[2], size[1], size[0]}, patch);
  auto vars = impl_->forward_vars(x);
  Forward f;
  for (const auto& v : vars) f.ds_logits.push_back(v->value);
  f.main_logits = f.ds_logits[0];
  return f;
}

void SegModel::save(const std::string& path) const {
  if (!impl_) throw std::logic_error("segmentation model not initialized");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write checkpoint " + path);
  const char magic[8] = {'M', 'S', 'G', 'S', 'E', 'G', '0', '1'};
  std::string hdr = impl_->fingerprint().dump();
  uint32_t len = uint32_t(hdr.size());
  f.write(magic, 8);
  f.write(reinterpret_cast<const char*>(&len), 4);
  f.write(hdr.data(), len);
  write_params(f, impl_->params);
}

SegModel SegModel::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read checkpoint " + path);
  char magic[8];
  f.read(magic, 8);
  if (std::string(magic, 8) != "MSGSEG01")
    throw std::runtime_error(path + ": not a segmentation checkpoint");
  uint32_t len = 0;
  f.read(reinterpret_cast<char*>(&len), 4);
  std::string hdr(len, '\0');
  f.read(hdr.data(), len);
  json j = json::parse(hdr);
  SegNetConfig cfg;
  cfg.in_channels = j.at("in_channels").get<int>();
  cfg.num_classes = j.at("num_classes").get<int>();
  cfg.depth = j.at("depth").get<int>();
  cfg.base_width = j.at("base_width").get<int>();
  cfg.ds_heads = j.at("ds_heads").get<int>();
  cfg.patch_size = j.at("patch_size").get<Shape3>();
  SegModel m = build(cfg, 0);
  m.impl_->fold_id = j.at("fold_id").get<int>();
  read_params(f, m.impl_->params);
  return m;
}

// ---------------- patch sampling ----------------

PatchCategory sample_category(bool has_vs, bool has_cochlea,
                              const std::array<double, 3>& ratio, Rng& rng) {
  std::array<double, 3> w = ratio;
  if (!has_vs) {
    w[2] += w[0];
    w[0] = 0;
  }
  if (!has_cochlea) {
    w[2] += w[1];
    w[1] = 0;
  }
  double total = w[0] + w[1] + w[2];
  double u = rng.uniform() * total;
  if (u < w[0]) return PatchCategory::VS;
  if (u < w[0] + w[1]) return PatchCategory::Cochlea;
  return PatchCategory::Negative;
}

namespace {

struct ClassVoxels {
  std::vector<std::size_t> vs, cochlea;
};

ClassVoxels collect_class_voxels(const LabelMap& l) {
  ClassVoxels cv;
  for (std::size_t i = 0; i < l.data.size(); ++i) {
    if (l.data[i] == LabelMap::kVS) cv.vs.push_back(i);
    else if (l.data[i] == LabelMap::kCochlea) cv.cochlea.push_back(i);
  }
  return cv;
}

Shape3 unflatten(std::size_t idx, const Shape3& sh) {
  int x = int(idx % sh[0]);
  int y = int((idx / sh[0]) % sh[1]);
  int z = int(idx / (std::size_t(sh[0]) * sh[1]));
  return {x, y, z};
}

// window start per axis: centered, clamped so the window stays in bounds
// when the volume is large enough; edge-padding handles the rest
int window_start(int center, int patch, int extent) {
  int start = center - patch / 2;
  if (extent >= patch) return std::clamp(start, 0, extent - patch);
  return start;  // volume smaller than patch: allow out-of-bounds, pad
}

Patch extract_patch(const Volume& v, const LabelMap& l, Shape3 center,
                    const Shape3& psize, PatchCategory cat) {
  Patch p;
  p.size = psize;
  p.category = cat;
  p.image.resize(std::size_t(psize[0]) * psize[1] * psize[2]);
  p.labels.resize(p.image.size());
  int sx = window_start(center[0], psize[0], v.shape[0]);
  int sy = window_start(center[1], psize[1], v.shape[1]);
  int sz = window_start(center[2], psize[2], v.shape[2]);
  std::size_t k = 0;
  for (int z = 0; z < psize[2]; ++z) {
    int vz = std::clamp(sz + z, 0, v.shape[2] - 1);
    for (int y = 0; y < psize[1]; ++y) {
      int vy = std::clamp(sy + y, 0, v.shape[1] - 1);
      for (int x = 0; x < psize[0]; ++x, ++k) {
        int vx = std::clamp(sx + x, 0, v.shape[0] - 1);
        p.image[k] = v.at(vx, vy, vz);
        p.labels[k] = l.at(vx, vy, vz);
      }
    }
  }
  return p;
}

Shape3 jittered_center(Shape3 c, const Shape3& psize, const Shape3& extent,
                       double jitter_frac, Rng& rng) {
  for (int a = 0; a < 3; ++a) {
    int j = int(psize[a] * jitter_frac);
    c[a] += int(rng.below(2 * j + 1)) - j;
    c[a] = std::clamp(c[a], 0, extent[a] - 1);
  }
  return c;
}

}  // namespace

std::vector<Patch> sample_patches(const Volume& v, const LabelMap& l,
                                  const SegNetConfig& net_cfg,
                                  const SegTrainConfig& cfg, int count,
                                  Rng& rng) {
  if (!l.geometry_equals(v))
    throw std::invalid_argument("volume and labels are not aligned");
  ClassVoxels cv = collect_class_voxels(l);
  std::vector<Patch> out;
  out.reserve(count);
  const Shape3& ps = net_cfg.patch_size;
  for (int i = 0; i < count; ++i) {
    PatchCategory cat = sample_category(!cv.vs.empty(), !cv.cochlea.empty(),
                                        cfg.sampling_ratio, rng);
    Shape3 center;
    if (cat == PatchCategory::VS)
      center = jittered_center(unflatten(cv.vs[rng.below(cv.vs.size())], v.shape),
                               ps, v.shape, cfg.jitter_frac, rng);
    else if (cat == PatchCategory::Cochlea)
      center = jittered_center(
          unflatten(cv.cochlea[rng.below(cv.cochlea.size())], v.shape), ps,
          v.shape, cfg.jitter_frac, rng);
    else
      center = {int(rng.below(v.shape[0])), int(rng.below(v.shape[1])),
                int(rng.below(v.shape[2]))};
    out.push_back(extract_patch(v, l, center, ps, cat));
  }
  return out;
}

void augment_intensity(std::vector<float>& patch, double magnitude, Rng& rng) {
  float delta = float(rng.uniform(-magnitude, magnitude));
  for (float& v : patch) v = std::clamp(v + delta, 0.0f, 1.0f);
}

// ---------------- training ----------------

namespace {

struct LossEval {
  LossChoice choice;
  int num_classes;
  const KappaState* kappa;

  std::pair<double, std::vector<double>> operator()(
      const std::vector<double>& probs, const std::vector<double>& onehot) const {
    LossResult r = choice == LossChoice::AdaptiveTvmf
                       ? tvmf_dice_loss(probs, onehot, num_classes, *kappa)
                       : dice_ce_loss(probs, onehot, num_classes);
    return {r.value, std::move(r.grad)};
  }
};

Var patch_loss(SegModel::Impl& net, const Patch& patch, const LossEval& eval,
               const DeepSupervisionWeights& w) {
  Var x = make_var({1, patch.size[2], patch.size[1], patch.size[0]}, patch.image);
  auto heads = net.forward_vars(x);
  std::vector<double> onehot = one_hot(patch.labels, eval.num_classes);
  std::vector<Var> level_losses;
  for (const auto& h : heads) {
    SoftmaxLossSpec spec;
    spec.loss_fn = [&eval, &onehot](const std::vector<double>& probs) {
      return eval(probs, onehot);
    };
    level_losses.push_back(softmax_loss(h, spec));
  }
  return wsum(level_losses, {w.w[0], w.w[1], w.w[2]});
}

// deterministic validation patches: one per structure centroid plus the
// volume center
std::vector<Patch> validation_patches(const SegCase& c, const Shape3& psize) {
  ClassVoxels cv = collect_class_voxels(c.labels);
  std::vector<Patch> out;
  auto centroid = [&](const std::vector<std::size_t>& idxs) {
    long sx = 0, sy = 0, sz = 0;
    for (auto i : idxs) {
      Shape3 p = unflatten(i, c.labels.shape);
      sx += p[0];
      sy += p[1];
      sz += p[2];
    }
    return Shape3{int(sx / long(idxs.size())), int(sy / long(idxs.size())),
                  int(sz / long(idxs.size()))};
  };
  if (!cv.vs.empty())
    out.push_back(extract_patch(c.volume, c.labels, centroid(cv.vs), psize,
                                PatchCategory::VS));
  if (!cv.cochlea.empty())
    out.push_back(extract_patch(c.volume, c.labels, centroid(cv.cochlea), psize,
                                PatchCategory::Cochlea));
  out.push_back(extract_patch(
      c.volume, c.labels,
      {c.volume.shape[0] / 2, c.volume.shape[1] / 2, c.volume.shape[2] / 2},
      psize, PatchCategory::Negative));
  return out;
}

}  // namespace

SegModel train_segmentation(const std::vector<SegCase>& train_cases,
                            const std::vector<SegCase>& val_cases,
                            const SegNetConfig& net_cfg,
                            const SegTrainConfig& train_cfg,
                            LossChoice loss_choice, uint64_t seed,
                            SegTrainStats* stats, bool verbose) {
  net_cfg.validate();
  train_cfg.validate();
  if (train_cases.empty() || val_cases.empty())
    throw std::invalid_argument("training and validation case lists must be non-empty");

  SegModel model = SegModel::build(net_cfg, seed);
  auto& net = *model.impl_;
  Adam opt(net.params, train_cfg.lr0);
  Rng rng(mix_seed(seed, 0x545247));

  KappaState kappa(net_cfg.num_classes - 1, train_cfg.lambda);
  LossEval eval{loss_choice, net_cfg.num_classes, &kappa};
  // kappa adaptation rescales the loss between epochs, so the validation
  // loss used for model selection is evaluated with kappa frozen at zero
  // to keep the per-epoch values comparable
  KappaState kappa_zero(net_cfg.num_classes - 1, train_cfg.lambda);
  LossEval val_eval{loss_choice, net_cfg.num_classes, &kappa_zero};

  std::vector<std::vector<Patch>> val_patches;
  for (const auto& c : val_cases)
    val_patches.push_back(validation_patches(c, net_cfg.patch_size));

  double best_val = std::numeric_limits<double>::infinity();
  std::vector<std::vector<float>> best_params;
  int best_epoch = -1;

  for (int epoch = 0; epoch < train_cfg.epochs; ++epoch) {
    double lr = cosine_lr(train_cfg.lr0, epoch, train_cfg.epochs);
    opt.set_lr(lr);
    if (stats) stats->lr_per_epoch.push_back(lr);

    double epoch_loss = 0;
    int steps = 0;
    for (const auto& c : train_cases) {
      auto patches = sample_patches(c.volume, c.labels, net_cfg, train_cfg,
                                    train_cfg.patches_per_volume, rng);
      for (auto& p : patches) {
        augment_intensity(p.image, train_cfg.intensity_shift, rng);
        Var loss = patch_loss(net, p, eval, train_cfg.ds_weights);
        if (!std::isfinite(loss->value[0]))
          throw std::runtime_error(
              "NaN training loss at epoch " + std::to_string(epoch) + ", step " +
              std::to_string(steps) + "; aborting");
        opt.zero_grad();
        backward(loss);
        opt.step();
        epoch_loss += loss->value[0];
        ++steps;
        if (stats) stats->train_loss_per_step.push_back(loss->value[0]);
      }
    }

    // validation loss + hard per-class DSC for the kappa update
    double val_loss = 0;
    int val_steps = 0;
    double inter[2] = {0, 0}, psum[2] = {0, 0}, ysum[2] = {0, 0};
    for (const auto& patches : val_patches)
      for (const auto& p : patches) {
        Var x = make_var({1, p.size[2], p.size[1], p.size[0]}, p.image);
        auto heads = net.forward_vars(x);
        std::vector<double> onehot = one_hot(p.labels, net_cfg.num_classes);
        std::vector<double> level(3);
        const std::size_t nvox = p.image.size();
        for (int d = 0; d < 3; ++d) {
          auto probs_f = softmax_channels(heads[d]->value, net_cfg.num_classes);
          std::vector<double> probs(probs_f.begin(), probs_f.end());
          level[d] = val_eval(probs, onehot).first;
          if (d == 0) {
            for (std::size_t i = 0; i < nvox; ++i) {
              int arg = 0;
              for (int cc = 1; cc < net_cfg.num_classes; ++cc)
                if (probs[cc * nvox + i] > probs[arg * nvox + i]) arg = cc;
              for (int fc = 0; fc < 2; ++fc) {
                bool pr = arg == fc + 1, gt = p.labels[i] == fc + 1;
                inter[fc] += pr && gt;
                psum[fc] += pr;
                ysum[fc] += gt;
              }
            }
          }
        }
        val_loss += aggregate_deep_supervision(level, train_cfg.ds_weights);
        ++val_steps;
      }
    val_loss /= val_steps;

    std::array<double, 2> val_dsc;
    for (int fc = 0; fc < 2; ++fc)
      val_dsc[fc] = (psum[fc] + ysum[fc]) > 0
                        ? 2.0 * inter[fc] / (psum[fc] + ysum[fc])
                        : 1.0;
    if (stats) {
      stats->val_loss_per_epoch.push_back(val_loss);
      stats->val_dsc_per_epoch.push_back(val_dsc);
    }
    if (verbose)
      std::cout << "[seg] epoch " << epoch + 1 << "/" << train_cfg.epochs
                << " lr=" << lr << " train=" << epoch_loss / std::max(steps, 1)
                << " val=" << val_loss << " dsc=(" << val_dsc[0] << ","
                << val_dsc[1] << ")\n";

    if (val_loss < best_val) {
      best_val = val_loss;
      best_epoch = epoch;
      best_params.clear();
      for (const auto& p : net.params) best_params.push_back(p->value);
    }
    if (loss_choice == LossChoice::AdaptiveTvmf)
      kappa = update_kappa(kappa, {val_dsc[0], val_dsc[1]});
  }

  // lowest validation loss selects the final model
  for (std::size_t i = 0; i < net.params.size(); ++i)
    net.params[i]->value = best_params[i];
  if (stats) stats->selected_epoch = best_epoch;
  return model;
}

// ---------------- inference ----------------

namespace {

std::vector<int> window_positions(int extent, int patch, int step) {
  std::vector<int> pos;
  if (extent <= patch) return {0};
  for (int p = 0; p + patch < extent; p += step) pos.push_back(p);
  pos.push_back(extent - patch);
  return pos;
}

}  // namespace

Likelihoods sliding_window_infer(const Volume& v, const SegModel& m,
                                 double overlap) {
  if (overlap < 0.0 || overlap > 0.9)
    throw std::invalid_argument("overlap must be in [0, 0.9]");
  const SegNetConfig& cfg = m.config();
  const Shape3& ps = cfg.patch_size;
  const int C = cfg.num_classes;

  Likelihoods lk;
  lk.shape = v.shape;
  lk.spacing = v.spacing;
  lk.origin = v.origin;
  lk.num_classes = C;
  const std::size_t nvox = v.size();
  lk.probs.assign(std::size_t(C) * nvox, 0.0f);
  std::vector<float> counts(nvox, 0.0f);

  Shape3 step;
  for (int a = 0; a < 3; ++a)
    step[a] = std::max(1, int(std::lround(ps[a] * (1.0 - overlap))));
  auto xs = window_positions(v.shape[0], ps[0], step[0]);
  auto ys = window_positions(v.shape[1], ps[1], step[1]);
  auto zs = window_positions(v.shape[2], ps[2], step[2]);

  const std::size_t patch_vox = std::size_t(ps[0]) * ps[1] * ps[2];
  std::vector<float> patch(patch_vox);
  for (int pz : zs)
    for (int py : ys)
      for (int px : xs) {
        std::size_t k = 0;
        for (int z = 0; z < ps[2]; ++z) {
          int vz = std::clamp(pz + z, 0, v.shape[2] - 1);
          for (int y = 0; y < ps[1]; ++y) {
            int vy = std::clamp(py + y, 0, v.shape[1] - 1);
            for (int x = 0; x < ps[0]; ++x, ++k)
              patch[k] = v.at(std::clamp(px + x, 0, v.shape[0] - 1), vy, vz);
          }
        }
        auto fwd = m.forward(patch, ps);
        auto probs = softmax_channels(fwd.main_logits, C);
        k = 0;
        for (int z = 0; z < ps[2]; ++z) {
          int vz = pz + z;
          for (int y = 0; y < ps[1]; ++y) {
            int vy = py + y;
            for (int x = 0; x < ps[0]; ++x, ++k) {
              int vx = px + x;
              if (vx >= v.shape[0] || vy >= v.shape[1] || vz >= v.shape[2])
                continue;  // padded region, cropped back
              std::size_t vi = v.index(vx, vy, vz);
              for (int c = 0; c < C; ++c)
                lk.probs[std::size_t(c) * nvox + vi] += probs[std::size_t(c) * patch_vox + k];
              counts[vi] += 1.0f;
            }
          }
        }
      }

  for (std::size_t i = 0; i < nvox; ++i)
    for (int c = 0; c < C; ++c) lk.probs[std::size_t(c) * nvox + i] /= counts[i];
  return lk;
}

LabelMap argmax_labels(const Likelihoods& lk) {
  LabelMap out(lk.shape, lk.spacing, lk.origin);
  const std::size_t nvox = out.size();
  for (std::size_t i = 0; i < nvox; ++i) {
    int arg = 0;
    for (int c = 1; c < lk.num_classes; ++c)
      if (lk.probs[std::size_t(c) * nvox + i] > lk.probs[std::size_t(arg) * nvox + i])
        arg = c;  // strict: ties resolve to the lowest class index
    out.data[i] = uint8_t(arg);
  }
  return out;
}

Likelihoods ensemble_likelihoods(const Volume& v,
                                 const std::vector<SegModel>& models,
                                 double overlap) {
  if (models.empty()) throw std::invalid_argument("ensemble needs >= 1 model");
  const int C = models[0].config().num_classes;
  for (const auto& m : models)
    if (m.config().num_classes != C)
      throw std::invalid_argument("ensemble members disagree on class count");

  Likelihoods acc = sliding_window_infer(v, models[0], overlap);
  for (std::size_t i = 1; i < models.size(); ++i) {
    Likelihoods lk = sliding_window_infer(v, models[i], overlap);
    for (std::size_t k = 0; k < acc.probs.size(); ++k) acc.probs[k] += lk.probs[k];
  }
  const float inv = 1.0f / float(models.size());
  for (auto& p : acc.probs) p *= inv;
  return acc;
}

LabelMap ensemble_infer(const Volume& v, const std::vector<SegModel>& models,
                        double overlap) {
  return argmax_labels(ensemble_likelihoods(v, models, overlap));
}

}  // namespace modaseg
