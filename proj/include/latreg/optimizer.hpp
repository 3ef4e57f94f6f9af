#pragma once

#include <map>
#include <string>

#include "latreg/autodiff.hpp"
#include "latreg/network.hpp"

namespace latreg {

/// Adam with bias correction, betas (0.9, 0.999). State is keyed by parameter
/// name and reset at stage boundaries.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(double learning_rate)
      : learning_rate_(learning_rate) {}

  void step(ParamSet& params, const ad::GradientMap& grads);
  void reset();

  double learning_rate() const { return learning_rate_; }
  void set_learning_rate(double lr) { learning_rate_ = lr; }
  // Euclidean norm of the full gradient from the most recent step.
  double last_grad_norm() const { return last_grad_norm_; }

 private:
  double learning_rate_;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  std::int64_t t_ = 0;
  std::map<std::string, Tensor> m_;
  std::map<std::string, Tensor> v_;
  double last_grad_norm_ = 0.0;
};

}  // namespace latreg
