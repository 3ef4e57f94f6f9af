#include "latreg/optimizer.hpp"

#include <cmath>

#include "latreg/errors.hpp"

namespace latreg {

void AdamOptimizer::step(ParamSet& params, const ad::GradientMap& grads) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  double norm_sq = 0.0;
  for (auto& [name, p] : params.items()) {
    auto it = grads.find(name);
    if (it == grads.end()) continue;
    const Tensor& g = it->second;
    if (!g.same_shape(p)) {
      throw ShapeError("optimizer: gradient shape " + shape_to_string(g.shape()) +
                       " does not match parameter '" + name + "' " +
                       shape_to_string(p.shape()));
    }
    Tensor& m = m_.try_emplace(name, Tensor(p.shape())).first->second;
    Tensor& v = v_.try_emplace(name, Tensor(p.shape())).first->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      norm_sq += gi * gi;
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      p[i] -= learning_rate_ * m_hat / (std::sqrt(v_hat) + eps_);
    }
  }
  last_grad_norm_ = std::sqrt(norm_sq);
}

void AdamOptimizer::reset() {
  t_ = 0;
  m_.clear();
  v_.clear();
  last_grad_norm_ = 0.0;
}

}  // namespace latreg
