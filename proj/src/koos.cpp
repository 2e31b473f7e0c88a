#include "modaseg/koos.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "nlohmann/json.hpp"

using json = nlohmann::ordered_json;

namespace modaseg {

KoosFeatures extract_features(const LabelMap& l) {
  int min_i[3] = {l.shape[0], l.shape[1], l.shape[2]};
  int max_i[3] = {-1, -1, -1};
  std::size_t count = 0;
  for (int z = 0; z < l.shape[2]; ++z)
    for (int y = 0; y < l.shape[1]; ++y)
      for (int x = 0; x < l.shape[0]; ++x) {
        if (l.at(x, y, z) != LabelMap::kVS) continue;
        ++count;
        int idx[3] = {x, y, z};
        for (int a = 0; a < 3; ++a) {
          min_i[a] = std::min(min_i[a], idx[a]);
          max_i[a] = std::max(max_i[a], idx[a]);
        }
      }
  KoosFeatures f;
  if (count == 0) return f;
  f.vs_volume = double(count) * l.spacing[0] * l.spacing[1] * l.spacing[2];
  f.extent_x = (max_i[0] - min_i[0] + 1) * l.spacing[0];
  f.extent_y = (max_i[1] - min_i[1] + 1) * l.spacing[1];
  f.extent_z = (max_i[2] - min_i[2] + 1) * l.spacing[2];
  return f;
}

std::array<double, 4> LinearSvmModel::scores(const KoosFeatures& f) const {
  auto raw = f.as_array();
  std::array<double, 4> x;
  for (int i = 0; i < 4; ++i) x[i] = (raw[i] - feat_mean[i]) / feat_std[i];
  std::array<double, 4> s;
  for (int g = 0; g < 4; ++g) {
    s[g] = biases[g];
    for (int i = 0; i < 4; ++i) s[g] += weights[g][i] * x[i];
  }
  return s;
}

int predict_grade(const LinearSvmModel& m, const KoosFeatures& f) {
  auto s = m.scores(f);
  int best = 0;
  for (int g = 1; g < 4; ++g)
    if (s[g] > s[best]) best = g;  // strict: ties keep the lower grade
  return best + 1;
}

double svm_objective(const std::array<double, 4>& w, double b,
                     const std::vector<std::array<double, 4>>& x,
                     const std::vector<int>& sign, double C) {
  double reg = 0;
  for (double wi : w) reg += wi * wi;
  double hinge = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double m = b;
    for (int d = 0; d < 4; ++d) m += w[d] * x[i][d];
    hinge += std::max(0.0, 1.0 - sign[i] * m);
  }
  return 0.5 * reg + C * hinge;
}

LinearSvmModel train_svm(const std::vector<KoosFeatures>& features,
                         const std::vector<int>& grades, double C,
                         uint64_t seed, int iterations) {
  if (features.size() != grades.size() || features.empty())
    throw std::invalid_argument("train_svm: empty or mismatched inputs");
  for (int g : grades)
    if (g < 1 || g > 4) throw std::invalid_argument("grade outside 1..4");
  {
    int first = grades[0];
    bool distinct = false;
    for (int g : grades) distinct |= (g != first);
    if (!distinct) throw std::invalid_argument("train_svm: single-class input");
  }
  for (const auto& f : features)
    for (double v : f.as_array())
      if (!std::isfinite(v)) throw std::invalid_argument("train_svm: non-finite feature");

  LinearSvmModel model;
  model.C = C;
  model.seed = seed;

  const std::size_t n = features.size();
  // canonical sample order first: every following accumulation (mean,
  // variance, subgradients) then sums in one fixed order, making the whole
  // fit invariant to input permutation
  std::vector<std::array<double, 4>> raw(n);
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    raw[i] = features[i].as_array();
    y[i] = grades[i];
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (y[a] != y[b]) return y[a] < y[b];
    return raw[a] < raw[b];
  });

  for (int d = 0; d < 4; ++d) {
    double m = 0;
    for (std::size_t i : order) m += raw[i][d];
    m /= double(n);
    double var = 0;
    for (std::size_t i : order) {
      double dv = raw[i][d] - m;
      var += dv * dv;
    }
    var /= double(n);
    model.feat_mean[d] = m;
    model.feat_std[d] = var > 0 ? std::sqrt(var) : 1.0;
  }

  std::vector<std::array<double, 4>> xs(n);
  std::vector<int> ys(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (int d = 0; d < 4; ++d)
      xs[i][d] = (raw[order[i]][d] - model.feat_mean[d]) / model.feat_std[d];
    ys[i] = y[order[i]];
  }

  for (int grade = 1; grade <= 4; ++grade) {
    std::vector<int> sign(n);
    for (std::size_t i = 0; i < n; ++i) sign[i] = ys[i] == grade ? +1 : -1;

    std::array<double, 4> w{};
    double b = 0;
    std::array<double, 4> w_avg{};
    double b_avg = 0;
    std::array<double, 4> w_best{};
    double b_best = 0;
    double f_best = svm_objective(w, b, xs, sign, C);

    for (int t = 1; t <= iterations; ++t) {
      std::array<double, 4> gw = w;  // regularizer subgradient
      double gb = 0;
      for (std::size_t i = 0; i < n; ++i) {
        double m = b;
        for (int d = 0; d < 4; ++d) m += w[d] * xs[i][d];
        if (sign[i] * m < 1.0) {
          for (int d = 0; d < 4; ++d) gw[d] -= C * sign[i] * xs[i][d];
          gb -= C * sign[i];
        }
      }
      double eta = 1.0 / (1.0 + C * double(n)) * 2.0 / std::sqrt(double(t));
      for (int d = 0; d < 4; ++d) w[d] -= eta * gw[d];
      b -= eta * gb;

      double a = 1.0 / t;
      for (int d = 0; d < 4; ++d) w_avg[d] = (1 - a) * w_avg[d] + a * w[d];
      b_avg = (1 - a) * b_avg + a * b;
      double f = svm_objective(w_avg, b_avg, xs, sign, C);
      if (f < f_best) {
        f_best = f;
        w_best = w_avg;
        b_best = b_avg;
      }
    }
    model.weights[grade - 1] = w_best;
    model.biases[grade - 1] = b_best;
  }
  return model;
}

void LinearSvmModel::save(const std::string& path) const {
  json j;
  j["schema"] = "modaseg-svm-v1";
  j["C"] = C;
  j["seed"] = seed;
  j["feat_mean"] = feat_mean;
  j["feat_std"] = feat_std;
  j["weights"] = weights;
  j["biases"] = biases;
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write SVM model " + path);
  f << j.dump(2) << "\n";
}

LinearSvmModel LinearSvmModel::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read SVM model " + path);
  json j = json::parse(f);
  LinearSvmModel m;
  m.C = j.at("C").get<double>();
  m.seed = j.at("seed").get<uint64_t>();
  m.feat_mean = j.at("feat_mean").get<std::array<double, 4>>();
  m.feat_std = j.at("feat_std").get<std::array<double, 4>>();
  m.weights = j.at("weights").get<std::array<std::array<double, 4>, 4>>();
  m.biases = j.at("biases").get<std::array<double, 4>>();
  return m;
}

}  // namespace modaseg
