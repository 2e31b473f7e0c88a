#include "modaseg/i2i.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <stdexcept>

#include "modaseg/rng.hpp"
#include "modaseg/tensor.hpp"
#include "nlohmann/json.hpp"

using json = nlohmann::ordered_json;

namespace modaseg {

using namespace nn;

void I2ITrainConfig::validate() const {
  if (lr <= 0 || epochs < 1 || tau <= 0 || patches_per_image < 2 ||
      ngf < 1 || ndf < 1 || n_res_blocks < 1 || embed_dim < 1 ||
      lambda_gan < 0 || lambda_nce < 0 || lambda_idt < 0)
    throw std::invalid_argument("invalid translation training config");
  if (nce_layers.empty())
    throw std::invalid_argument("at least one NCE tap layer required");
  if (crop_size < 0 || crop_size % 4 != 0)
    throw std::invalid_argument("crop_size must be a non-negative multiple of 4");
  for (int l : nce_layers)
    if (l < 0 || l > 3) throw std::invalid_argument("nce layer index outside 0..3");
}

namespace {

std::vector<float> gauss_init(std::size_t n, Rng& rng, float std_dev = 0.02f) {
  std::vector<float> v(n);
  for (auto& x : v) x = float(rng.gauss()) * std_dev;
  return v;
}

float kaiming_std(int cin, int k) { return std::sqrt(2.0f / (float(cin) * k * k)); }

struct Conv {
  Var w, b;
  int stride = 1, pad = 0;

  Conv() = default;
  Conv(int cin, int cout, int k, int stride_, int pad_, Rng& rng,
       std::vector<Var>& params, float init_std = 0.02f)
      : stride(stride_), pad(pad_) {
    w = make_param({cout, cin, k, k},
                   gauss_init(std::size_t(cout) * cin * k * k, rng, init_std));
    b = make_param({cout}, std::vector<float>(cout, 0.0f));
    params.push_back(w);
    params.push_back(b);
  }
  Var operator()(const Var& x) const { return conv2d(x, w, b, stride, pad); }
};

struct Norm {
  Var gamma, beta;

  Norm() = default;
  Norm(int c, std::vector<Var>& params) {
    gamma = make_param({c}, std::vector<float>(c, 1.0f));
    beta = make_param({c}, std::vector<float>(c, 0.0f));
    params.push_back(gamma);
    params.push_back(beta);
  }
  Var operator()(const Var& x) const { return instance_norm(x, gamma, beta); }
};

// c7s1-ngf, d2x downsampling, residual trunk, nearest-upsample decoder,
// residual tanh head over the input. No normalization layers: the absolute
// intensity level is the main cue separating the two domains, and instance
// norm would erase it (and turn flat regions into amplified noise), so the
// convs carry the raw scale with fan-in-matched init instead.
// Encoder taps: e0, e1, e2, trunk output.
struct Generator {
  Conv c_in;
  Conv down1, down2;
  struct Res {
    Conv a, b;
  };
  std::vector<Res> blocks;
  Conv up1, up2;
  Conv c_out;
  std::vector<Var> params;

  Generator() = default;
  Generator(int ngf, int n_res, Rng& rng) {
    c_in = Conv(1, ngf, 7, 1, 3, rng, params, kaiming_std(1, 7));
    down1 = Conv(ngf, ngf * 2, 3, 2, 1, rng, params, kaiming_std(ngf, 3));
    down2 = Conv(ngf * 2, ngf * 4, 3, 2, 1, rng, params, kaiming_std(ngf * 2, 3));
    blocks.resize(n_res);
    for (auto& r : blocks) {
      r.a = Conv(ngf * 4, ngf * 4, 3, 1, 1, rng, params, kaiming_std(ngf * 4, 3));
      r.b = Conv(ngf * 4, ngf * 4, 3, 1, 1, rng, params, kaiming_std(ngf * 4, 3));
    }
    up1 = Conv(ngf * 4, ngf * 2, 3, 1, 1, rng, params, kaiming_std(ngf * 4, 3));
    up2 = Conv(ngf * 2, ngf, 3, 1, 1, rng, params, kaiming_std(ngf * 2, 3));
    c_out = Conv(ngf, 1, 7, 1, 3, rng, params);  // near-zero init: starts at identity
  }

  Var encode(const Var& x, std::vector<Var>* taps) const {
    Var e0 = relu(c_in(x));
    Var e1 = relu(down1(e0));
    Var e2 = relu(down2(e1));
    Var h = e2;
    for (const auto& r : blocks)
      h = add(h, r.b(relu(r.a(h))));
    if (taps) *taps = {e0, e1, e2, h};
    return h;
  }

  Var forward(const Var& x, std::vector<Var>* taps = nullptr) const {
    Var h = encode(x, taps);
    h = relu(up1(upsample2d_nearest(h, 2)));
    h = relu(up2(upsample2d_nearest(h, 2)));
    // global residual over the input: the net only learns the shift; the
    // head is linear because a bounded (tanh) shift saturates and strands
    // the generator once the adversary pushes it to a rail
    return add(x, c_out(h));
  }
};

struct Discriminator {
  Conv c1, c2, c3, c4;
  std::vector<Var> params;

  Discriminator() = default;
  Discriminator(int ndf, Rng& rng) {
    c1 = Conv(1, ndf, 4, 2, 1, rng, params);
    c2 = Conv(ndf, ndf * 2, 4, 2, 1, rng, params);
    c3 = Conv(ndf * 2, ndf * 4, 4, 1, 1, rng, params);
    c4 = Conv(ndf * 4, 1, 4, 1, 1, rng, params);
  }

  // no normalization layers: the absolute intensity level is the main
  // cue separating the two domains, and instance norm would erase it
  Var operator()(const Var& x) const {
    Var h = leaky_relu(c1(x), 0.2f);
    h = leaky_relu(c2(h), 0.2f);
    h = leaky_relu(c3(h), 0.2f);
    return c4(h);
  }
};

// Two-layer projection head per tapped encoder layer; outputs unit-norm rows.
struct ProjectionHead {
  Var w1, b1, w2, b2;

  ProjectionHead() = default;
  ProjectionHead(int cin, int embed, Rng& rng, std::vector<Var>& params) {
    int hidden = embed * 2;
    w1 = make_param({hidden, cin}, gauss_init(std::size_t(hidden) * cin, rng));
    b1 = make_param({hidden}, std::vector<float>(hidden, 0.0f));
    w2 = make_param({embed, hidden}, gauss_init(std::size_t(embed) * hidden, rng));
    b2 = make_param({embed}, std::vector<float>(embed, 0.0f));
    params.insert(params.end(), {w1, b1, w2, b2});
  }

  Var operator()(const Var& feats) const {
    return l2_normalize_rows(linear(relu(linear(feats, w1, b1)), w2, b2));
  }
};

Var slice_to_var(const Slice2D& s) {
  return make_var({1, s.ny, s.nx}, s.data);
}

Slice2D var_to_slice(const Var& v, int nx, int ny) {
  Slice2D out;
  out.nx = nx;
  out.ny = ny;
  out.data.resize(v->size());
  for (std::size_t i = 0; i < v->size(); ++i)
    out.data[i] = std::clamp(v->value[i], 0.0f, 1.0f);
  return out;
}

}  // namespace

struct TranslationNets::Impl {
  bool identity = false;
  I2ITrainConfig cfg;
  Generator G, F;
  Discriminator D_tgt, D_src;
  std::vector<ProjectionHead> H_src, H_tgt;
  std::vector<Var> gen_params;   // G, F, both head sets
  std::vector<Var> disc_params;  // D_tgt, D_src

  std::vector<Var> all_params() const {
    std::vector<Var> all = gen_params;
    all.insert(all.end(), disc_params.begin(), disc_params.end());
    return all;
  }

  json fingerprint() const {
    return json{{"identity", identity},
                {"ngf", cfg.ngf},
                {"ndf", cfg.ndf},
                {"n_res_blocks", cfg.n_res_blocks},
                {"embed_dim", cfg.embed_dim},
                {"nce_layers", cfg.nce_layers}};
  }
};

TranslationNets TranslationNets::create(const I2ITrainConfig& cfg, uint64_t seed) {
  cfg.validate();
  auto impl = std::make_shared<Impl>();
  impl->cfg = cfg;
  Rng rng(mix_seed(seed, 0x493249));
  impl->G = Generator(cfg.ngf, cfg.n_res_blocks, rng);
  impl->F = Generator(cfg.ngf, cfg.n_res_blocks, rng);
  impl->D_tgt = Discriminator(cfg.ndf, rng);
  impl->D_src = Discriminator(cfg.ndf, rng);

  const int tap_ch[4] = {cfg.ngf, cfg.ngf * 2, cfg.ngf * 4, cfg.ngf * 4};
  impl->gen_params = impl->G.params;
  impl->gen_params.insert(impl->gen_params.end(), impl->F.params.begin(),
                          impl->F.params.end());
  for (int l : cfg.nce_layers) {
    impl->H_src.emplace_back(tap_ch[l], cfg.embed_dim, rng, impl->gen_params);
    impl->H_tgt.emplace_back(tap_ch[l], cfg.embed_dim, rng, impl->gen_params);
  }
  impl->disc_params = impl->D_tgt.params;
  impl->disc_params.insert(impl->disc_params.end(), impl->D_src.params.begin(),
                           impl->D_src.params.end());

  TranslationNets nets;
  nets.impl_ = impl;
  return nets;
}

TranslationNets TranslationNets::identity_mode() {
  auto impl = std::make_shared<Impl>();
  impl->identity = true;
  TranslationNets nets;
  nets.impl_ = impl;
  return nets;
}

bool TranslationNets::is_identity() const {
  return impl_ && impl_->identity;
}

Slice2D TranslationNets::translate_slice(const Slice2D& s) const {
  if (!impl_) throw std::logic_error("translation nets not initialized");
  if (impl_->identity) return s;
  if (s.nx % 4 != 0 || s.ny % 4 != 0)
    throw std::invalid_argument("slice shape incompatible with generator (extents must be divisible by 4)");
  Var y = impl_->G.forward(slice_to_var(s));
  return var_to_slice(y, s.nx, s.ny);
}

Volume translate_volume(const Volume& v, const TranslationNets& nets) {
  auto slices = extract_axial_slices(v);
  for (auto& s : slices) s = nets.translate_slice(s);
  return stack_slices(slices, v.spacing, v.origin);
}

NceResult patch_nce_loss(const std::vector<double>& q,
                         const std::vector<double>& k, int n, int dim,
                         double tau) {
  if (n < 2) throw std::invalid_argument("patch_nce_loss needs >= 2 pairs");
  if (tau <= 0) throw std::invalid_argument("temperature must be > 0");
  if (q.size() != std::size_t(n) * dim || k.size() != q.size())
    throw std::invalid_argument("embedding shape mismatch");

  NceResult r;
  r.dq.assign(q.size(), 0.0);
  r.dk.assign(k.size(), 0.0);

  std::vector<double> logits(n), probs(n);
  for (int i = 0; i < n; ++i) {
    const double* qi = q.data() + std::size_t(i) * dim;
    double mx = -1e300;
    for (int j = 0; j < n; ++j) {
      const double* kj = k.data() + std::size_t(j) * dim;
      double dot = 0;
      for (int d = 0; d < dim; ++d) dot += qi[d] * kj[d];
      logits[j] = dot / tau;
      mx = std::max(mx, logits[j]);
    }
    double lse = 0;
    for (int j = 0; j < n; ++j) lse += std::exp(logits[j] - mx);
    lse = mx + std::log(lse);
    r.value += (lse - logits[i]) / n;

    for (int j = 0; j < n; ++j) probs[j] = std::exp(logits[j] - lse);
    for (int j = 0; j < n; ++j) {
      double dl = (probs[j] - (j == i ? 1.0 : 0.0)) / (n * tau);
      const double* kj = k.data() + std::size_t(j) * dim;
      double* dkj = r.dk.data() + std::size_t(j) * dim;
      double* dqi = r.dq.data() + std::size_t(i) * dim;
      for (int d = 0; d < dim; ++d) {
        dqi[d] += dl * kj[d];
        dkj[d] += dl * qi[d];
      }
    }
  }
  return r;
}

namespace {

Var nce_node(const Var& q, const Var& k, double tau) {
  const int n = q->shape[0], dim = q->shape[1];
  std::vector<double> qd(q->value.begin(), q->value.end());
  std::vector<double> kd(k->value.begin(), k->value.end());
  NceResult r = patch_nce_loss(qd, kd, n, dim, tau);
  auto node = make_var({1}, {float(r.value)});
  node->parents = {q, k};
  node->backward_fn = [dq = std::move(r.dq), dk = std::move(r.dk)](Node& self) {
    float g = self.grad[0];
    Node &pq = *self.parents[0], &pk = *self.parents[1];
    for (std::size_t i = 0; i < dq.size(); ++i) pq.grad[i] += g * float(dq[i]);
    for (std::size_t i = 0; i < dk.size(); ++i) pk.grad[i] += g * float(dk[i]);
  };
  return node;
}

}  // namespace

TranslationNets train_translation(const std::vector<Slice2D>& src_slices,
                                  const std::vector<Slice2D>& tgt_slices,
                                  const I2ITrainConfig& cfg, uint64_t seed,
                                  I2ITrainStats* stats, bool verbose) {
  cfg.validate();
  if (src_slices.empty() || tgt_slices.empty())
    throw std::invalid_argument("both slice pools must be non-empty");
  const int nx = src_slices[0].nx, ny = src_slices[0].ny;
  for (const auto* pool : {&src_slices, &tgt_slices})
    for (const auto& s : *pool)
      if (s.nx != nx || s.ny != ny)
        throw std::invalid_argument("slice pools must share one 2D shape");
  if (nx % 4 != 0 || ny % 4 != 0)
    throw std::invalid_argument("slice extents must be divisible by 4");
  const int cx = cfg.crop_size > 0 ? std::min(cfg.crop_size, nx) : nx;
  const int cy = cfg.crop_size > 0 ? std::min(cfg.crop_size, ny) : ny;

  TranslationNets nets = TranslationNets::create(cfg, seed);
  auto& impl = *nets.impl_;
  Adam opt_g(impl.gen_params, cfg.lr, cfg.beta1, cfg.beta2);
  Adam opt_d(impl.disc_params, cfg.lr, cfg.beta1, cfg.beta2);
  Rng rng(mix_seed(seed, 0x545249));

  const int iters = cfg.iters_per_epoch > 0
                        ? cfg.iters_per_epoch
                        : int(std::min(src_slices.size(), tgt_slices.size()));
  // tap spatial sizes: full res, /2, /4, /4
  const int tap_div[4] = {1, 2, 4, 4};

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
    opt_g.set_lr(lr);
    opt_d.set_lr(lr);
    double epoch_loss = 0;
    for (int it = 0; it < iters; ++it) {
      Slice2D xs = src_slices[rng.below(src_slices.size())];
      Slice2D ys = tgt_slices[rng.below(tgt_slices.size())];
      if (cx < nx || cy < ny) {
        auto crop = [&](const Slice2D& s) {
          int ox = int(rng.below(std::size_t(nx - cx + 1)));
          int oy = int(rng.below(std::size_t(ny - cy + 1)));
          Slice2D out;
          out.nx = cx;
          out.ny = cy;
          out.data.resize(std::size_t(cx) * cy);
          for (int yy = 0; yy < cy; ++yy)
            for (int xx = 0; xx < cx; ++xx)
              out.data[std::size_t(yy) * cx + xx] =
                  s.data[std::size_t(yy + oy) * nx + (xx + ox)];
          return out;
        };
        xs = crop(xs);
        ys = crop(ys);
      }
      Var x = slice_to_var(xs), y = slice_to_var(ys);

      std::vector<Var> taps_x, taps_y;
      Var fake_y = impl.G.forward(x, &taps_x);
      Var fake_x = impl.F.forward(y, &taps_y);

      // discriminators on detached fakes
      Var d_loss = wsum(
          {mse_to(impl.D_tgt(y), 1.0f), mse_to(impl.D_tgt(detach(fake_y)), 0.0f),
           mse_to(impl.D_src(x), 1.0f), mse_to(impl.D_src(detach(fake_x)), 0.0f)},
          {0.5 * cfg.lambda_gan, 0.5 * cfg.lambda_gan, 0.5 * cfg.lambda_gan,
           0.5 * cfg.lambda_gan});
      opt_d.zero_grad();
      backward(d_loss);
      opt_d.step();

      // generator objective
      Var gan = wsum({mse_to(impl.D_tgt(fake_y), 1.0f),
                      mse_to(impl.D_src(fake_x), 1.0f)},
                     {1.0, 1.0});

      std::vector<Var> taps_fake_y, taps_fake_x;
      impl.F.encode(fake_y, &taps_fake_y);
      impl.G.encode(fake_x, &taps_fake_x);

      std::vector<Var> nce_terms;
      for (std::size_t li = 0; li < cfg.nce_layers.size(); ++li) {
        int l = cfg.nce_layers[li];
        int S = (cy / tap_div[l]) * (cx / tap_div[l]);
        int npatch = std::min(cfg.patches_per_image, S);
        std::vector<int> locs(npatch);
        for (auto& p : locs) p = int(rng.below(S));
        // source -> target direction: queries from the translated slice
        Var qx = impl.H_tgt[li](gather_spatial(taps_fake_y[l], locs));
        Var kx = impl.H_src[li](gather_spatial(taps_x[l], locs));
        nce_terms.push_back(nce_node(qx, kx, cfg.tau));
        // target -> source direction
        for (auto& p : locs) p = int(rng.below(S));
        Var qy = impl.H_src[li](gather_spatial(taps_fake_x[l], locs));
        Var ky = impl.H_tgt[li](gather_spatial(taps_y[l], locs));
        nce_terms.push_back(nce_node(qy, ky, cfg.tau));
      }
      Var nce = wsum(nce_terms,
                     std::vector<double>(nce_terms.size(),
                                         1.0 / double(nce_terms.size())));

      Var idt = wsum({l1_diff(impl.G.forward(y), y), l1_diff(impl.F.forward(x), x)},
                     {0.5, 0.5});

      Var total = wsum({gan, nce, idt},
                       {cfg.lambda_gan, cfg.lambda_nce, cfg.lambda_idt});
      opt_g.zero_grad();
      backward(total);
      opt_g.step();

      epoch_loss += total->value[0];
      if (stats) stats->gen_loss_per_step.push_back(total->value[0]);
    }
    if (verbose)
      std::cout << "[i2i] epoch " << epoch + 1 << "/" << cfg.epochs
                << " lr=" << lr << " gen_loss=" << epoch_loss / iters << "\n";
  }
  // the model at the last epoch is the final model
  return nets;
}

void TranslationNets::save(const std::string& path) const {
  if (!impl_) throw std::logic_error("translation nets not initialized");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write checkpoint " + path);
  std::string hdr = impl_->fingerprint().dump();
  const char magic[8] = {'M', 'S', 'G', 'I', '2', 'I', '0', '1'};
  f.write(magic, 8);
  uint32_t len = uint32_t(hdr.size());
  f.write(reinterpret_cast<const char*>(&len), 4);
  f.write(hdr.data(), len);
  if (!impl_->identity) write_params(f, impl_->all_params());
}

TranslationNets TranslationNets::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read checkpoint " + path);
  char magic[8];
  f.read(magic, 8);
  if (std::string(magic, 8) != "MSGI2I01")
    throw std::runtime_error(path + ": not a translation checkpoint");
  uint32_t len = 0;
  f.read(reinterpret_cast<char*>(&len), 4);
  std::string hdr(len, '\0');
  f.read(hdr.data(), len);
  json j = json::parse(hdr);
  if (j.at("identity").get<bool>()) return identity_mode();
  I2ITrainConfig cfg;
  cfg.ngf = j.at("ngf").get<int>();
  cfg.ndf = j.at("ndf").get<int>();
  cfg.n_res_blocks = j.at("n_res_blocks").get<int>();
  cfg.embed_dim = j.at("embed_dim").get<int>();
  cfg.nce_layers = j.at("nce_layers").get<std::vector<int>>();
  TranslationNets nets = create(cfg, 0);
  read_params(f, nets.impl_->all_params());
  return nets;
}

}  // namespace modaseg
