#include "modaseg/tensor.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <unordered_set>

namespace modaseg::nn {

void Node::ensure_grad() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0f);
}

void Node::zero_grad() { grad.assign(value.size(), 0.0f); }

namespace {

std::size_t shape_size(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("non-positive tensor dimension");
    n *= std::size_t(d);
  }
  return n;
}

void check_same_shape(const Var& a, const Var& b) {
  if (a->shape != b->shape) throw std::invalid_argument("tensor shape mismatch");
}

}  // namespace

Var make_var(std::vector<int> shape, std::vector<float> value,
             bool requires_grad) {
  if (value.size() != shape_size(shape))
    throw std::invalid_argument("value size does not match shape");
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

Var make_param(std::vector<int> shape, std::vector<float> value) {
  return make_var(std::move(shape), std::move(value), true);
}

void backward(const Var& root) {
  if (root->size() != 1) throw std::invalid_argument("backward needs a scalar root");
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad[0] = 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) {
      n->ensure_grad();
      for (auto& p : n->parents) p->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

Var detach(const Var& a) { return make_var(a->shape, a->value, false); }

namespace {

Var unary_op(const Var& a, std::vector<float> out,
             std::function<void(Node&)> bwd) {
  auto n = make_var(a->shape, std::move(out));
  n->parents = {a};
  n->backward_fn = std::move(bwd);
  return n;
}

}  // namespace

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b);
  std::vector<float> out(a->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + b->value[i];
  auto n = make_var(a->shape, std::move(out));
  n->parents = {a, b};
  n->backward_fn = [](Node& self) {
    for (std::size_t i = 0; i < self.size(); ++i) {
      self.parents[0]->grad[i] += self.grad[i];
      self.parents[1]->grad[i] += self.grad[i];
    }
  };
  return n;
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b);
  std::vector<float> out(a->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] - b->value[i];
  auto n = make_var(a->shape, std::move(out));
  n->parents = {a, b};
  n->backward_fn = [](Node& self) {
    for (std::size_t i = 0; i < self.size(); ++i) {
      self.parents[0]->grad[i] += self.grad[i];
      self.parents[1]->grad[i] -= self.grad[i];
    }
  };
  return n;
}

Var scale(const Var& a, float s) {
  std::vector<float> out(a->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * s;
  return unary_op(a, std::move(out), [s](Node& self) {
    for (std::size_t i = 0; i < self.size(); ++i)
      self.parents[0]->grad[i] += s * self.grad[i];
  });
}

Var affine(const Var& a, float s, float c) {
  std::vector<float> out(a->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * a->value[i] + c;
  return unary_op(a, std::move(out), [s](Node& self) {
    for (std::size_t i = 0; i < self.size(); ++i)
      self.parents[0]->grad[i] += s * self.grad[i];
  });
}

Var relu(const Var& a) {
  std::vector<float> out(a->size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a->value[i] > 0 ? a->value[i] : 0.0f;
  return unary_op(a, std::move(out), [](Node& self) {
    const auto& x = self.parents[0]->value;
    for (std::size_t i = 0; i < self.size(); ++i)
      if (x[i] > 0) self.parents[0]->grad[i] += self.grad[i];
  });
}

Var leaky_relu(const Var& a, float slope) {
  std::vector<float> out(a->size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a->value[i] > 0 ? a->value[i] : slope * a->value[i];
  return unary_op(a, std::move(out), [slope](Node& self) {
    const auto& x = self.parents[0]->value;
    for (std::size_t i = 0; i < self.size(); ++i)
      self.parents[0]->grad[i] += (x[i] > 0 ? 1.0f : slope) * self.grad[i];
  });
}

Var tanh_v(const Var& a) {
  std::vector<float> out(a->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a->value[i]);
  return unary_op(a, std::move(out), [](Node& self) {
    for (std::size_t i = 0; i < self.size(); ++i) {
      float t = self.value[i];
      self.parents[0]->grad[i] += (1.0f - t * t) * self.grad[i];
    }
  });
}

Var mse_to(const Var& x, float target) {
  double acc = 0;
  for (float v : x->value) acc += double(v - target) * (v - target);
  auto n = make_var({1}, {float(acc / x->size())});
  n->parents = {x};
  n->backward_fn = [target](Node& self) {
    Node& p = *self.parents[0];
    float g = self.grad[0] * 2.0f / float(p.size());
    for (std::size_t i = 0; i < p.size(); ++i)
      p.grad[i] += g * (p.value[i] - target);
  };
  return n;
}

Var l1_diff(const Var& a, const Var& b) {
  check_same_shape(a, b);
  double acc = 0;
  for (std::size_t i = 0; i < a->size(); ++i)
    acc += std::fabs(double(a->value[i]) - b->value[i]);
  auto n = make_var({1}, {float(acc / a->size())});
  n->parents = {a, b};
  n->backward_fn = [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    float g = self.grad[0] / float(pa.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
      float s = (pa.value[i] > pb.value[i]) ? 1.0f
                : (pa.value[i] < pb.value[i]) ? -1.0f
                                              : 0.0f;
      pa.grad[i] += g * s;
      pb.grad[i] -= g * s;
    }
  };
  return n;
}

Var wsum(const std::vector<Var>& scalars, const std::vector<double>& weights) {
  if (scalars.empty() || scalars.size() != weights.size())
    throw std::invalid_argument("wsum: size mismatch");
  double acc = 0;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (scalars[i]->size() != 1) throw std::invalid_argument("wsum: non-scalar term");
    acc += weights[i] * scalars[i]->value[0];
  }
  auto n = make_var({1}, {float(acc)});
  n->parents = scalars;
  n->backward_fn = [weights](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i)
      self.parents[i]->grad[0] += float(weights[i]) * self.grad[0];
  };
  return n;
}

std::vector<float> softmax_channels(const std::vector<float>& logits,
                                    int num_classes) {
  const std::size_t n = logits.size() / num_classes;
  std::vector<float> probs(logits.size());
  for (std::size_t i = 0; i < n; ++i) {
    float mx = logits[i];
    for (int c = 1; c < num_classes; ++c)
      mx = std::max(mx, logits[c * n + i]);
    double sum = 0;
    for (int c = 0; c < num_classes; ++c) {
      double e = std::exp(double(logits[c * n + i]) - mx);
      probs[c * n + i] = float(e);
      sum += e;
    }
    for (int c = 0; c < num_classes; ++c)
      probs[c * n + i] = float(probs[c * n + i] / sum);
  }
  return probs;
}

Var softmax_loss(const Var& logits, const SoftmaxLossSpec& spec) {
  if (logits->shape.empty()) throw std::invalid_argument("softmax_loss: no shape");
  const int C = logits->shape[0];
  const std::size_t n = logits->size() / C;

  std::vector<float> probs_f = softmax_channels(logits->value, C);
  std::vector<double> probs(probs_f.begin(), probs_f.end());
  auto [value, dprobs] = spec.loss_fn(probs);
  if (dprobs.size() != probs.size())
    throw std::invalid_argument("softmax_loss: gradient size mismatch");

  auto node = make_var({1}, {float(value)});
  node->parents = {logits};
  node->backward_fn = [C, n, probs = std::move(probs),
                       dprobs = std::move(dprobs)](Node& self) {
    Node& p = *self.parents[0];
    float g0 = self.grad[0];
    // d loss / d logit_c = p_c * (dL/dp_c - sum_j p_j dL/dp_j), per voxel
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0;
      for (int c = 0; c < C; ++c)
        dot += probs[std::size_t(c) * n + i] * dprobs[std::size_t(c) * n + i];
      for (int c = 0; c < C; ++c) {
        std::size_t k = std::size_t(c) * n + i;
        p.grad[k] += g0 * float(probs[k] * (dprobs[k] - dot));
      }
    }
  };
  return node;
}

Adam::Adam(std::vector<Var> params, double lr, double beta1, double beta2,
           double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(params_[i]->size(), 0.0f);
    v_[i].assign(params_[i]->size(), 0.0f);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, t_);
  const double bc2 = 1.0 - std::pow(beta2_, t_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Node& p = *params_[i];
    p.ensure_grad();
    for (std::size_t k = 0; k < p.size(); ++k) {
      double g = p.grad[k];
      m_[i][k] = float(beta1_ * m_[i][k] + (1 - beta1_) * g);
      v_[i][k] = float(beta2_ * v_[i][k] + (1 - beta2_) * g * g);
      double mhat = m_[i][k] / bc1;
      double vhat = v_[i][k] / bc2;
      p.value[k] -= float(lr_ * mhat / (std::sqrt(vhat) + eps_));
    }
  }
}

double cosine_lr(double lr0, int epoch, int total_epochs) {
  if (total_epochs <= 0) throw std::invalid_argument("total_epochs must be > 0");
  return lr0 * 0.5 * (1.0 + std::cos(M_PI * double(epoch) / double(total_epochs)));
}

void write_params(std::ostream& os, const std::vector<Var>& params) {
  uint64_t count = params.size();
  os.write(reinterpret_cast<const char*>(&count), sizeof(count));
  for (const auto& p : params) {
    uint64_t n = p->size();
    os.write(reinterpret_cast<const char*>(&n), sizeof(n));
    os.write(reinterpret_cast<const char*>(p->value.data()), n * sizeof(float));
  }
}

void read_params(std::istream& is, const std::vector<Var>& params) {
  uint64_t count = 0;
  is.read(reinterpret_cast<char*>(&count), sizeof(count));
  if (count != params.size())
    throw std::runtime_error("checkpoint parameter count mismatch");
  for (const auto& p : params) {
    uint64_t n = 0;
    is.read(reinterpret_cast<char*>(&n), sizeof(n));
    if (n != p->size()) throw std::runtime_error("checkpoint tensor size mismatch");
    is.read(reinterpret_cast<char*>(p->value.data()), n * sizeof(float));
  }
  if (!is) throw std::runtime_error("truncated checkpoint");
}

}  // namespace modaseg::nn
