#include "modaseg/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace modaseg {

namespace {

std::size_t check_shapes(const std::vector<double>& pred,
                         const std::vector<double>& target, int num_classes) {
  if (num_classes < 2) throw std::invalid_argument("need >= 2 classes");
  if (pred.size() != target.size() || pred.empty() ||
      pred.size() % num_classes != 0)
    throw std::invalid_argument("pred/target shape mismatch");
  return pred.size() / num_classes;
}

}  // namespace

LossResult soft_dice_loss(const std::vector<double>& pred,
                          const std::vector<double>& target, int num_classes,
                          double eps) {
  const std::size_t n = check_shapes(pred, target, num_classes);
  LossResult r;
  r.grad.assign(pred.size(), 0.0);

  int present = 0;
  double loss = 0.0;
  std::vector<int> classes;
  std::vector<double> inter_c, psum_c, ysum_c;
  for (int c = 1; c < num_classes; ++c) {
    const double* p = pred.data() + std::size_t(c) * n;
    const double* y = target.data() + std::size_t(c) * n;
    double inter = 0, psum = 0, ysum = 0;
    for (std::size_t i = 0; i < n; ++i) {
      inter += p[i] * y[i];
      psum += p[i];
      ysum += y[i];
    }
    if (ysum == 0.0) continue;  // class absent from ground truth
    present++;
    classes.push_back(c);
    inter_c.push_back(inter);
    psum_c.push_back(psum);
    ysum_c.push_back(ysum);
    loss += 1.0 - (2.0 * inter + eps) / (psum + ysum + eps);
  }
  if (present == 0) return r;  // no foreground anywhere: loss 0, zero grad
  r.value = loss / present;

  for (int k = 0; k < present; ++k) {
    int c = classes[k];
    double num = 2.0 * inter_c[k] + eps;
    double den = psum_c[k] + ysum_c[k] + eps;
    const double* y = target.data() + std::size_t(c) * n;
    double* g = r.grad.data() + std::size_t(c) * n;
    // d/dp_i [ -(num/den) ] = -(2 y_i den - num) / den^2, averaged over classes
    for (std::size_t i = 0; i < n; ++i)
      g[i] = -(2.0 * y[i] * den - num) / (den * den) / present;
  }
  return r;
}

LossResult cross_entropy_loss(const std::vector<double>& pred,
                              const std::vector<double>& target,
                              int num_classes) {
  const std::size_t n = check_shapes(pred, target, num_classes);
  constexpr double kFloor = 1e-7;
  LossResult r;
  r.grad.assign(pred.size(), 0.0);
  double loss = 0.0;
  for (int c = 0; c < num_classes; ++c) {
    const double* p = pred.data() + std::size_t(c) * n;
    const double* y = target.data() + std::size_t(c) * n;
    double* g = r.grad.data() + std::size_t(c) * n;
    for (std::size_t i = 0; i < n; ++i) {
      if (y[i] == 0.0) continue;
      double pc = std::max(p[i], kFloor);
      loss -= y[i] * std::log(pc);
      if (p[i] > kFloor) g[i] = -y[i] / pc / double(n);
    }
  }
  r.value = loss / double(n);
  return r;
}

LossResult dice_ce_loss(const std::vector<double>& pred,
                        const std::vector<double>& target, int num_classes) {
  LossResult d = soft_dice_loss(pred, target, num_classes);
  LossResult c = cross_entropy_loss(pred, target, num_classes);
  LossResult r;
  r.value = d.value + c.value;
  r.grad.resize(d.grad.size());
  for (std::size_t i = 0; i < d.grad.size(); ++i) r.grad[i] = d.grad[i] + c.grad[i];
  return r;
}

double tvmf_similarity(double cos, double kappa) {
  if (cos < -1.0 || cos > 1.0) throw std::invalid_argument("cos outside [-1,1]");
  if (kappa < 0.0) throw std::invalid_argument("kappa must be >= 0");
  return (1.0 + cos) / (1.0 + kappa * (1.0 - cos)) - 1.0;
}

double tvmf_similarity_dcos(double cos, double kappa) {
  double den = 1.0 + kappa * (1.0 - cos);
  return (1.0 + 2.0 * kappa) / (den * den);
}

KappaState update_kappa(const KappaState& state,
                        const std::vector<double>& val_dsc_per_class) {
  if (val_dsc_per_class.size() != state.kappa_per_class.size())
    throw std::invalid_argument("DSC vector size mismatch");
  KappaState out = state;
  for (std::size_t c = 0; c < val_dsc_per_class.size(); ++c) {
    double d = val_dsc_per_class[c];
    if (d < 0.0 || d > 1.0) throw std::invalid_argument("DSC outside [0,1]");
    out.kappa_per_class[c] = state.lambda * d;
    out.last_val_dsc[c] = d;
  }
  return out;
}

LossResult tvmf_dice_loss(const std::vector<double>& pred,
                          const std::vector<double>& target, int num_classes,
                          const KappaState& kappa) {
  const std::size_t n = check_shapes(pred, target, num_classes);
  if (int(kappa.kappa_per_class.size()) != num_classes - 1)
    throw std::invalid_argument("kappa state does not cover foreground classes");

  LossResult r;
  r.grad.assign(pred.size(), 0.0);

  struct ClassTerm {
    int c;
    double pnorm, ynorm, dot, cos, kap;
  };
  std::vector<ClassTerm> terms;
  for (int c = 1; c < num_classes; ++c) {
    const double* p = pred.data() + std::size_t(c) * n;
    const double* y = target.data() + std::size_t(c) * n;
    double dot = 0, pp = 0, yy = 0;
    for (std::size_t i = 0; i < n; ++i) {
      dot += p[i] * y[i];
      pp += p[i] * p[i];
      yy += y[i] * y[i];
    }
    if (yy == 0.0) continue;
    double pnorm = std::max(std::sqrt(pp), kCosineFloor);
    double ynorm = std::sqrt(yy);
    double cos = std::min(dot / (pnorm * ynorm), 1.0);
    terms.push_back({c, pnorm, ynorm, dot, cos, kappa.kappa_per_class[c - 1]});
  }
  if (terms.empty()) return r;

  double loss = 0.0;
  for (const auto& t : terms) {
    double phi = tvmf_similarity(t.cos, t.kap);
    loss += (1.0 - phi) * (1.0 - phi);

    double dl_dcos =
        -2.0 * (1.0 - phi) * tvmf_similarity_dcos(t.cos, t.kap) / terms.size();
    const double* p = pred.data() + std::size_t(t.c) * n;
    const double* y = target.data() + std::size_t(t.c) * n;
    double* g = r.grad.data() + std::size_t(t.c) * n;
    double inv = 1.0 / (t.pnorm * t.ynorm);
    double self = t.dot / (t.pnorm * t.pnorm);
    for (std::size_t i = 0; i < n; ++i)
      g[i] = dl_dcos * (y[i] * inv - self * inv * p[i]);
  }
  r.value = loss / terms.size();
  return r;
}

void DeepSupervisionWeights::validate() const {
  double sum = 0;
  for (double wi : w) {
    if (!(wi > 0)) throw std::invalid_argument("deep-supervision weights must be > 0");
    sum += wi;
  }
  if (std::fabs(sum - 1.0) > 1e-9)
    throw std::invalid_argument("deep-supervision weights must sum to 1");
}

double aggregate_deep_supervision(const std::vector<double>& level_losses,
                                  const DeepSupervisionWeights& w) {
  if (level_losses.size() != 3)
    throw std::invalid_argument("deep supervision expects exactly 3 level losses");
  w.validate();
  double out = 0;
  for (int i = 0; i < 3; ++i) out += w.w[i] * level_losses[i];
  return out;
}

std::vector<double> one_hot(const std::vector<uint8_t>& labels, int num_classes) {
  std::vector<double> out(labels.size() * num_classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes)
      throw std::invalid_argument("label outside class range");
    out[std::size_t(labels[i]) * labels.size() + i] = 1.0;
  }
  return out;
}

}  // namespace modaseg
