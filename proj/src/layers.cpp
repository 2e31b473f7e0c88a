#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

#include "modaseg/tensor.hpp"

namespace modaseg::nn {

namespace {

using RowMat =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using CMapRM = Eigen::Map<const RowMat>;

int conv_out(int n, int k, int stride, int pad) {
  int o = (n + 2 * pad - k) / stride + 1;
  if (o <= 0) throw std::invalid_argument("convolution output would be empty");
  return o;
}

// ---- 2D im2col ----
void im2col2d(const float* x, int C, int H, int W, int k, int stride, int pad,
              int Ho, int Wo, float* cols /* [C*k*k, Ho*Wo] row-major */) {
  const int N = Ho * Wo;
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        float* row = cols + (std::size_t(c) * k * k + ky * k + kx) * N;
        for (int oy = 0; oy < Ho; ++oy) {
          int iy = oy * stride - pad + ky;
          float* dst = row + std::size_t(oy) * Wo;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + Wo, 0.0f);
            continue;
          }
          const float* src = x + (std::size_t(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            int ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < W) ? src[ix] : 0.0f;
          }
        }
      }
}

void col2im2d(const float* cols, int C, int H, int W, int k, int stride, int pad,
              int Ho, int Wo, float* dx /* accumulated */) {
  const int N = Ho * Wo;
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const float* row = cols + (std::size_t(c) * k * k + ky * k + kx) * N;
        for (int oy = 0; oy < Ho; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          float* dst = dx + (std::size_t(c) * H + iy) * W;
          const float* src = row + std::size_t(oy) * Wo;
          for (int ox = 0; ox < Wo; ++ox) {
            int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
        }
      }
}

// ---- 3D im2col ----
void im2col3d(const float* x, int C, int D, int H, int W, int k, int stride,
              int pad, int Do, int Ho, int Wo, float* cols) {
  const std::size_t N = std::size_t(Do) * Ho * Wo;
  for (int c = 0; c < C; ++c)
    for (int kz = 0; kz < k; ++kz)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          float* row = cols + ((std::size_t(c) * k + kz) * k + ky) * k * N +
                       std::size_t(kx) * N;
          for (int oz = 0; oz < Do; ++oz) {
            int iz = oz * stride - pad + kz;
            for (int oy = 0; oy < Ho; ++oy) {
              int iy = oy * stride - pad + ky;
              float* dst = row + (std::size_t(oz) * Ho + oy) * Wo;
              if (iz < 0 || iz >= D || iy < 0 || iy >= H) {
                std::fill(dst, dst + Wo, 0.0f);
                continue;
              }
              const float* src = x + ((std::size_t(c) * D + iz) * H + iy) * W;
              for (int ox = 0; ox < Wo; ++ox) {
                int ix = ox * stride - pad + kx;
                dst[ox] = (ix >= 0 && ix < W) ? src[ix] : 0.0f;
              }
            }
          }
        }
}

void col2im3d(const float* cols, int C, int D, int H, int W, int k, int stride,
              int pad, int Do, int Ho, int Wo, float* dx) {
  const std::size_t N = std::size_t(Do) * Ho * Wo;
  for (int c = 0; c < C; ++c)
    for (int kz = 0; kz < k; ++kz)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const float* row = cols + ((std::size_t(c) * k + kz) * k + ky) * k * N +
                             std::size_t(kx) * N;
          for (int oz = 0; oz < Do; ++oz) {
            int iz = oz * stride - pad + kz;
            if (iz < 0 || iz >= D) continue;
            for (int oy = 0; oy < Ho; ++oy) {
              int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= H) continue;
              float* dst = dx + ((std::size_t(c) * D + iz) * H + iy) * W;
              const float* src = row + (std::size_t(oz) * Ho + oy) * Wo;
              for (int ox = 0; ox < Wo; ++ox) {
                int ix = ox * stride - pad + kx;
                if (ix >= 0 && ix < W) dst[ix] += src[ox];
              }
            }
          }
        }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  if (x->shape.size() != 3 || w->shape.size() != 4)
    throw std::invalid_argument("conv2d: expected x [C,H,W], w [Co,Ci,k,k]");
  const int Ci = x->shape[0], H = x->shape[1], W = x->shape[2];
  const int Co = w->shape[0], k = w->shape[2];
  if (w->shape[1] != Ci || w->shape[3] != k || b->size() != std::size_t(Co))
    throw std::invalid_argument("conv2d: weight/bias shape mismatch");
  const int Ho = conv_out(H, k, stride, pad), Wo = conv_out(W, k, stride, pad);
  const int K = Ci * k * k, N = Ho * Wo;

  std::vector<float> cols(std::size_t(K) * N);
  im2col2d(x->value.data(), Ci, H, W, k, stride, pad, Ho, Wo, cols.data());

  std::vector<float> out(std::size_t(Co) * N);
  {
    CMapRM Wm(w->value.data(), Co, K);
    CMapRM Cm(cols.data(), K, N);
    MapRM Om(out.data(), Co, N);
    Om.noalias() = Wm * Cm;
    for (int c = 0; c < Co; ++c) Om.row(c).array() += b->value[c];
  }

  auto node = make_var({Co, Ho, Wo}, std::move(out));
  node->parents = {x, w, b};
  node->backward_fn = [=](Node& self) {
    Node &px = *self.parents[0], &pw = *self.parents[1], &pb = *self.parents[2];
    std::vector<float> cols2(std::size_t(K) * N);
    im2col2d(px.value.data(), Ci, H, W, k, stride, pad, Ho, Wo, cols2.data());
    CMapRM Gm(self.grad.data(), Co, N);
    CMapRM Cm(cols2.data(), K, N);
    MapRM dW(pw.grad.data(), Co, K);
    dW.noalias() += Gm * Cm.transpose();
    for (int c = 0; c < Co; ++c) pb.grad[c] += Gm.row(c).sum();
    std::vector<float> dcols(std::size_t(K) * N);
    MapRM Dm(dcols.data(), K, N);
    CMapRM Wm(pw.value.data(), Co, K);
    Dm.noalias() = Wm.transpose() * Gm;
    col2im2d(dcols.data(), Ci, H, W, k, stride, pad, Ho, Wo, px.grad.data());
  };
  return node;
}

Var conv3d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  if (x->shape.size() != 4 || w->shape.size() != 5)
    throw std::invalid_argument("conv3d: expected x [C,D,H,W], w [Co,Ci,k,k,k]");
  const int Ci = x->shape[0], D = x->shape[1], H = x->shape[2], W = x->shape[3];
  const int Co = w->shape[0], k = w->shape[2];
  if (w->shape[1] != Ci || w->shape[3] != k || w->shape[4] != k ||
      b->size() != std::size_t(Co))
    throw std::invalid_argument("conv3d: weight/bias shape mismatch");
  const int Do = conv_out(D, k, stride, pad), Ho = conv_out(H, k, stride, pad),
            Wo = conv_out(W, k, stride, pad);
  const int K = Ci * k * k * k;
  const std::size_t N = std::size_t(Do) * Ho * Wo;

  std::vector<float> cols(std::size_t(K) * N);
  im2col3d(x->value.data(), Ci, D, H, W, k, stride, pad, Do, Ho, Wo, cols.data());

  std::vector<float> out(std::size_t(Co) * N);
  {
    CMapRM Wm(w->value.data(), Co, K);
    CMapRM Cm(cols.data(), K, Eigen::Index(N));
    MapRM Om(out.data(), Co, Eigen::Index(N));
    Om.noalias() = Wm * Cm;
    for (int c = 0; c < Co; ++c) Om.row(c).array() += b->value[c];
  }

  auto node = make_var({Co, Do, Ho, Wo}, std::move(out));
  node->parents = {x, w, b};
  node->backward_fn = [=](Node& self) {
    Node &px = *self.parents[0], &pw = *self.parents[1], &pb = *self.parents[2];
    std::vector<float> cols2(std::size_t(K) * N);
    im2col3d(px.value.data(), Ci, D, H, W, k, stride, pad, Do, Ho, Wo,
             cols2.data());
    CMapRM Gm(self.grad.data(), Co, Eigen::Index(N));
    CMapRM Cm(cols2.data(), K, Eigen::Index(N));
    MapRM dW(pw.grad.data(), Co, K);
    dW.noalias() += Gm * Cm.transpose();
    for (int c = 0; c < Co; ++c) pb.grad[c] += Gm.row(c).sum();
    std::vector<float> dcols(std::size_t(K) * N);
    MapRM Dm(dcols.data(), K, Eigen::Index(N));
    CMapRM Wm(pw.value.data(), Co, K);
    Dm.noalias() = Wm.transpose() * Gm;
    col2im3d(dcols.data(), Ci, D, H, W, k, stride, pad, Do, Ho, Wo,
             px.grad.data());
  };
  return node;
}

Var upsample2d_nearest(const Var& x, int factor) {
  if (x->shape.size() != 3) throw std::invalid_argument("upsample2d: rank");
  const int C = x->shape[0], H = x->shape[1], W = x->shape[2];
  const int Ho = H * factor, Wo = W * factor;
  std::vector<float> out(std::size_t(C) * Ho * Wo);
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < Ho; ++y)
      for (int xx = 0; xx < Wo; ++xx)
        out[(std::size_t(c) * Ho + y) * Wo + xx] =
            x->value[(std::size_t(c) * H + y / factor) * W + xx / factor];
  auto node = make_var({C, Ho, Wo}, std::move(out));
  node->parents = {x};
  node->backward_fn = [=](Node& self) {
    Node& p = *self.parents[0];
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < Ho; ++y)
        for (int xx = 0; xx < Wo; ++xx)
          p.grad[(std::size_t(c) * H + y / factor) * W + xx / factor] +=
              self.grad[(std::size_t(c) * Ho + y) * Wo + xx];
  };
  return node;
}

Var upsample3d_nearest(const Var& x, int factor) {
  if (x->shape.size() != 4) throw std::invalid_argument("upsample3d: rank");
  const int C = x->shape[0], D = x->shape[1], H = x->shape[2], W = x->shape[3];
  const int Do = D * factor, Ho = H * factor, Wo = W * factor;
  std::vector<float> out(std::size_t(C) * Do * Ho * Wo);
  for (int c = 0; c < C; ++c)
    for (int z = 0; z < Do; ++z)
      for (int y = 0; y < Ho; ++y)
        for (int xx = 0; xx < Wo; ++xx)
          out[((std::size_t(c) * Do + z) * Ho + y) * Wo + xx] =
              x->value[((std::size_t(c) * D + z / factor) * H + y / factor) * W +
                       xx / factor];
  auto node = make_var({C, Do, Ho, Wo}, std::move(out));
  node->parents = {x};
  node->backward_fn = [=](Node& self) {
    Node& p = *self.parents[0];
    for (int c = 0; c < C; ++c)
      for (int z = 0; z < Do; ++z)
        for (int y = 0; y < Ho; ++y)
          for (int xx = 0; xx < Wo; ++xx)
            p.grad[((std::size_t(c) * D + z / factor) * H + y / factor) * W +
                   xx / factor] +=
                self.grad[((std::size_t(c) * Do + z) * Ho + y) * Wo + xx];
  };
  return node;
}

namespace {

struct LinTap {
  int i0, i1;
  float f;
};

std::vector<LinTap> linear_taps(int n_out, int n_in, int factor) {
  std::vector<LinTap> taps(n_out);
  for (int j = 0; j < n_out; ++j) {
    double u = (j + 0.5) / factor - 0.5;
    u = std::clamp(u, 0.0, double(n_in - 1));
    int i0 = std::min(int(u), n_in - 1);
    taps[j] = {i0, std::min(i0 + 1, n_in - 1), float(u - i0)};
  }
  return taps;
}

}  // namespace

Var upsample3d_trilinear(const Var& x, int factor) {
  if (x->shape.size() != 4) throw std::invalid_argument("upsample3d: rank");
  const int C = x->shape[0], D = x->shape[1], H = x->shape[2], W = x->shape[3];
  const int Do = D * factor, Ho = H * factor, Wo = W * factor;
  auto tz = linear_taps(Do, D, factor);
  auto ty = linear_taps(Ho, H, factor);
  auto tx = linear_taps(Wo, W, factor);

  std::vector<float> out(std::size_t(C) * Do * Ho * Wo);
  for (int c = 0; c < C; ++c) {
    const float* xc = x->value.data() + std::size_t(c) * D * H * W;
    float* oc = out.data() + std::size_t(c) * Do * Ho * Wo;
    for (int z = 0; z < Do; ++z)
      for (int y = 0; y < Ho; ++y)
        for (int xx = 0; xx < Wo; ++xx) {
          const auto &az = tz[z], &ay = ty[y], &ax = tx[xx];
          auto v = [&](int zi, int yi, int xi) {
            return xc[(std::size_t(zi) * H + yi) * W + xi];
          };
          float c00 = v(az.i0, ay.i0, ax.i0) * (1 - ax.f) + v(az.i0, ay.i0, ax.i1) * ax.f;
          float c10 = v(az.i0, ay.i1, ax.i0) * (1 - ax.f) + v(az.i0, ay.i1, ax.i1) * ax.f;
          float c01 = v(az.i1, ay.i0, ax.i0) * (1 - ax.f) + v(az.i1, ay.i0, ax.i1) * ax.f;
          float c11 = v(az.i1, ay.i1, ax.i0) * (1 - ax.f) + v(az.i1, ay.i1, ax.i1) * ax.f;
          float c0 = c00 * (1 - ay.f) + c10 * ay.f;
          float c1 = c01 * (1 - ay.f) + c11 * ay.f;
          oc[(std::size_t(z) * Ho + y) * Wo + xx] = c0 * (1 - az.f) + c1 * az.f;
        }
  }
  auto node = make_var({C, Do, Ho, Wo}, std::move(out));
  node->parents = {x};
  node->backward_fn = [=](Node& self) {
    Node& p = *self.parents[0];
    for (int c = 0; c < C; ++c) {
      float* gc = p.grad.data() + std::size_t(c) * D * H * W;
      const float* sg = self.grad.data() + std::size_t(c) * Do * Ho * Wo;
      for (int z = 0; z < Do; ++z)
        for (int y = 0; y < Ho; ++y)
          for (int xx = 0; xx < Wo; ++xx) {
            const auto &az = tz[z], &ay = ty[y], &ax = tx[xx];
            float g = sg[(std::size_t(z) * Ho + y) * Wo + xx];
            auto acc = [&](int zi, int yi, int xi, float w) {
              gc[(std::size_t(zi) * H + yi) * W + xi] += g * w;
            };
            acc(az.i0, ay.i0, ax.i0, (1 - az.f) * (1 - ay.f) * (1 - ax.f));
            acc(az.i0, ay.i0, ax.i1, (1 - az.f) * (1 - ay.f) * ax.f);
            acc(az.i0, ay.i1, ax.i0, (1 - az.f) * ay.f * (1 - ax.f));
            acc(az.i0, ay.i1, ax.i1, (1 - az.f) * ay.f * ax.f);
            acc(az.i1, ay.i0, ax.i0, az.f * (1 - ay.f) * (1 - ax.f));
            acc(az.i1, ay.i0, ax.i1, az.f * (1 - ay.f) * ax.f);
            acc(az.i1, ay.i1, ax.i0, az.f * ay.f * (1 - ax.f));
            acc(az.i1, ay.i1, ax.i1, az.f * ay.f * ax.f);
          }
    }
  };
  return node;
}

Var instance_norm(const Var& x, const Var& gamma, const Var& beta, float eps) {
  if (x->shape.empty()) throw std::invalid_argument("instance_norm: rank");
  const int C = x->shape[0];
  const std::size_t S = x->size() / C;
  if (gamma->size() != std::size_t(C) || beta->size() != std::size_t(C))
    throw std::invalid_argument("instance_norm: gain/bias size mismatch");

  std::vector<float> out(x->size());
  std::vector<float> inv_std(C), mean(C);
  for (int c = 0; c < C; ++c) {
    const float* xc = x->value.data() + std::size_t(c) * S;
    double m = 0;
    for (std::size_t i = 0; i < S; ++i) m += xc[i];
    m /= double(S);
    double var = 0;
    for (std::size_t i = 0; i < S; ++i) var += (xc[i] - m) * (xc[i] - m);
    var /= double(S);
    mean[c] = float(m);
    inv_std[c] = float(1.0 / std::sqrt(var + eps));
    float g = gamma->value[c], b = beta->value[c];
    float* oc = out.data() + std::size_t(c) * S;
    for (std::size_t i = 0; i < S; ++i)
      oc[i] = g * (xc[i] - mean[c]) * inv_std[c] + b;
  }

  auto node = make_var(x->shape, std::move(out));
  node->parents = {x, gamma, beta};
  node->backward_fn = [C, S, mean, inv_std](Node& self) {
    Node &px = *self.parents[0], &pg = *self.parents[1], &pb = *self.parents[2];
    for (int c = 0; c < C; ++c) {
      const float* xc = px.value.data() + std::size_t(c) * S;
      const float* gc = self.grad.data() + std::size_t(c) * S;
      float g = pg.value[c];
      double sum_dy = 0, sum_dy_xhat = 0;
      for (std::size_t i = 0; i < S; ++i) {
        float xhat = (xc[i] - mean[c]) * inv_std[c];
        sum_dy += gc[i];
        sum_dy_xhat += double(gc[i]) * xhat;
      }
      pg.grad[c] += float(sum_dy_xhat);
      pb.grad[c] += float(sum_dy);
      const float m_dy = float(sum_dy / double(S));
      const float m_dyx = float(sum_dy_xhat / double(S));
      float* dxc = px.grad.data() + std::size_t(c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        float xhat = (xc[i] - mean[c]) * inv_std[c];
        dxc[i] += g * inv_std[c] * (gc[i] - m_dy - xhat * m_dyx);
      }
    }
  };
  return node;
}

Var concat_ch(const Var& a, const Var& b) {
  if (a->shape.size() != b->shape.size() || a->shape.empty())
    throw std::invalid_argument("concat: rank mismatch");
  for (std::size_t d = 1; d < a->shape.size(); ++d)
    if (a->shape[d] != b->shape[d])
      throw std::invalid_argument("concat: spatial shape mismatch");
  std::vector<int> shape = a->shape;
  shape[0] += b->shape[0];
  std::vector<float> out;
  out.reserve(a->size() + b->size());
  out.insert(out.end(), a->value.begin(), a->value.end());
  out.insert(out.end(), b->value.begin(), b->value.end());
  auto node = make_var(std::move(shape), std::move(out));
  node->parents = {a, b};
  node->backward_fn = [](Node& self) {
    Node &pa = *self.parents[0], &pb = *self.parents[1];
    for (std::size_t i = 0; i < pa.size(); ++i) pa.grad[i] += self.grad[i];
    for (std::size_t i = 0; i < pb.size(); ++i)
      pb.grad[i] += self.grad[pa.size() + i];
  };
  return node;
}

Var linear(const Var& x, const Var& w, const Var& b) {
  if (x->shape.size() != 2 || w->shape.size() != 2)
    throw std::invalid_argument("linear: expected x [N,Di], w [Do,Di]");
  const int N = x->shape[0], Di = x->shape[1], Do = w->shape[0];
  if (w->shape[1] != Di || b->size() != std::size_t(Do))
    throw std::invalid_argument("linear: shape mismatch");

  std::vector<float> out(std::size_t(N) * Do);
  {
    CMapRM Xm(x->value.data(), N, Di);
    CMapRM Wm(w->value.data(), Do, Di);
    MapRM Om(out.data(), N, Do);
    Om.noalias() = Xm * Wm.transpose();
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < Do; ++j) out[std::size_t(i) * Do + j] += b->value[j];
  }
  auto node = make_var({N, Do}, std::move(out));
  node->parents = {x, w, b};
  node->backward_fn = [N, Di, Do](Node& self) {
    Node &px = *self.parents[0], &pw = *self.parents[1], &pb = *self.parents[2];
    CMapRM Gm(self.grad.data(), N, Do);
    CMapRM Xm(px.value.data(), N, Di);
    CMapRM Wm(pw.value.data(), Do, Di);
    MapRM dX(px.grad.data(), N, Di);
    MapRM dW(pw.grad.data(), Do, Di);
    dX.noalias() += Gm * Wm;
    dW.noalias() += Gm.transpose() * Xm;
    for (int j = 0; j < Do; ++j) pb.grad[j] += Gm.col(j).sum();
  };
  return node;
}

Var l2_normalize_rows(const Var& x, float eps) {
  if (x->shape.size() != 2) throw std::invalid_argument("l2_normalize: rank");
  const int N = x->shape[0], D = x->shape[1];
  std::vector<float> out(x->size());
  std::vector<float> norms(N);
  for (int i = 0; i < N; ++i) {
    const float* xi = x->value.data() + std::size_t(i) * D;
    double s = 0;
    for (int j = 0; j < D; ++j) s += double(xi[j]) * xi[j];
    norms[i] = std::max(float(std::sqrt(s)), eps);
    for (int j = 0; j < D; ++j) out[std::size_t(i) * D + j] = xi[j] / norms[i];
  }
  auto node = make_var(x->shape, std::move(out));
  node->parents = {x};
  node->backward_fn = [N, D, norms](Node& self) {
    Node& p = *self.parents[0];
    for (int i = 0; i < N; ++i) {
      const float* yi = self.value.data() + std::size_t(i) * D;
      const float* gi = self.grad.data() + std::size_t(i) * D;
      double dot = 0;
      for (int j = 0; j < D; ++j) dot += double(yi[j]) * gi[j];
      float* dxi = p.grad.data() + std::size_t(i) * D;
      for (int j = 0; j < D; ++j)
        dxi[j] += (gi[j] - float(dot) * yi[j]) / norms[i];
    }
  };
  return node;
}

Var gather_spatial(const Var& x, const std::vector<int>& locations) {
  if (x->shape.empty()) throw std::invalid_argument("gather: rank");
  const int C = x->shape[0];
  const std::size_t S = x->size() / C;
  const int N = int(locations.size());
  for (int loc : locations)
    if (loc < 0 || std::size_t(loc) >= S)
      throw std::invalid_argument("gather: location out of range");
  std::vector<float> out(std::size_t(N) * C);
  for (int i = 0; i < N; ++i)
    for (int c = 0; c < C; ++c)
      out[std::size_t(i) * C + c] = x->value[std::size_t(c) * S + locations[i]];
  auto node = make_var({N, C}, std::move(out));
  node->parents = {x};
  node->backward_fn = [C, S, locations, N](Node& self) {
    Node& p = *self.parents[0];
    for (int i = 0; i < N; ++i)
      for (int c = 0; c < C; ++c)
        p.grad[std::size_t(c) * S + locations[i]] +=
            self.grad[std::size_t(i) * C + c];
  };
  return node;
}

}  // namespace modaseg::nn
