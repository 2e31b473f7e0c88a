#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace modaseg::nn {

/// Reverse-mode autograd over dense float tensors. Graphs are built
/// dynamically per forward pass; parameter nodes persist across passes and
/// accumulate gradients until zeroed by the optimizer.
class Node;
using Var = std::shared_ptr<Node>;

class Node {
 public:
  std::vector<int> shape;
  std::vector<float> value;
  std::vector<float> grad;   // allocated lazily, same size as value
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;  // scatters node.grad to parents

  std::size_t size() const { return value.size(); }
  void ensure_grad();
  void zero_grad();
};

Var make_var(std::vector<int> shape, std::vector<float> value,
             bool requires_grad = false);
Var make_param(std::vector<int> shape, std::vector<float> value);

/// Topological backward from a scalar root (seed gradient 1).
void backward(const Var& root);

/// Value copy that blocks gradient flow.
Var detach(const Var& a);

// ---- elementwise / arithmetic ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var scale(const Var& a, float s);
Var affine(const Var& a, float s, float c);  // s*a + c
Var relu(const Var& a);
Var leaky_relu(const Var& a, float slope);
Var tanh_v(const Var& a);

// ---- shape ----
Var concat_ch(const Var& a, const Var& b);  // along dim 0 (channels)

// ---- convolution (no batch dim; layout [C, spatial...]) ----
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var conv3d(const Var& x, const Var& w, const Var& b, int stride, int pad);

Var upsample2d_nearest(const Var& x, int factor);
Var upsample3d_nearest(const Var& x, int factor);
Var upsample3d_trilinear(const Var& x, int factor);

/// Per-channel normalization over all spatial positions (instance norm),
/// with learned per-channel gain/bias.
Var instance_norm(const Var& x, const Var& gamma, const Var& beta,
                  float eps = 1e-5f);

// ---- dense (rows are samples: x [N, Din], w [Dout, Din], b [Dout]) ----
Var linear(const Var& x, const Var& w, const Var& b);
Var l2_normalize_rows(const Var& x, float eps = 1e-8f);

/// Reads the channel vector at each given flat spatial location: x [C, ...]
/// -> [N, C] matrix.
Var gather_spatial(const Var& x, const std::vector<int>& locations);

// ---- scalar losses ----
Var mse_to(const Var& x, float target);          // mean (x - t)^2
Var l1_diff(const Var& a, const Var& b);         // mean |a - b|
Var wsum(const std::vector<Var>& scalars, const std::vector<double>& weights);

/// Softmax over channel axis 0 followed by an arbitrary double-precision
/// loss on the probabilities; loss_fn returns value and d(loss)/d(probs).
struct SoftmaxLossSpec {
  std::function<std::pair<double, std::vector<double>>(
      const std::vector<double>& probs)>
      loss_fn;
};
Var softmax_loss(const Var& logits, const SoftmaxLossSpec& spec);

/// Channel softmax as a value-only op (inference path).
std::vector<float> softmax_channels(const std::vector<float>& logits,
                                    int num_classes);

// ---- optimizer ----
class Adam {
 public:
  Adam(std::vector<Var> params, double lr, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8);

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  void zero_grad();
  void step();

 private:
  std::vector<Var> params_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

/// Cosine annealing to zero: lr0 * 0.5 * (1 + cos(pi * e / E)).
double cosine_lr(double lr0, int epoch, int total_epochs);

// ---- parameter (de)serialization ----
void write_params(std::ostream& os, const std::vector<Var>& params);
void read_params(std::istream& is, const std::vector<Var>& params);

}  // namespace modaseg::nn
