#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "latreg/fields.hpp"
#include "latreg/tensor.hpp"

namespace latreg::ad {

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid for the tape's lifetime.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
};

using GradientMap = std::map<std::string, Tensor>;

/// Define-by-run gradient tape. A tape records one forward pass; backward()
/// walks the nodes once in reverse creation order (a topological order) and
/// accumulates gradients additively into every named leaf. Tapes are
/// rebuilt per training step and are not reusable after backward().
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Named parameter leaf; repeated calls with the same name return the same
  // node so multiple uses accumulate.
  Var leaf(const std::string& name, const Tensor& value);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var add_scalar(Var a, double s);
  Var mul_scalar(Var a, double s);
  Var exp(Var a);
  Var log(Var a);
  Var tanh(Var a);
  Var square(Var a);
  Var neg(Var a) { return mul_scalar(a, -1.0); }
  // Hard-clip subgradient: 1 strictly inside (lo, hi), 0 outside.
  Var clip(Var a, double lo, double hi);
  Var leaky_relu(Var a, double slope);
  Var sum(Var a);
  Var mean(Var a);
  Var conv3d(Var x, Var kernel, int stride, int padding);
  Var add_channel_bias(Var x, Var bias);
  Var upsample_trilinear(Var a, int factor);
  Var concat_channels(Var a, Var b);
  // Extracts channel c of a (C, D, H, W) node as a (1, D, H, W) node.
  Var slice_channel(Var a, int channel);
  Var axis_forward_diff(Var a, int axis);
  Var reshape(Var a, Shape shape);
  // Trilinear warp of a (D,H,W) or (C,D,H,W) node by a (3,D,H,W) field node;
  // differentiable in both arguments.
  Var warp(Var vol, Var field);
  // Same value, gradient flow blocked.
  Var detach(Var a);

  // Requires a scalar loss. Returns gradients for every leaf registered on
  // this tape; leaves unreachable from the loss map to zeros.
  GradientMap backward(Var loss);

  const Tensor& value(Var v) const;
  // Gradient accumulated at a node during the last backward (zeros if none).
  Tensor grad(Var v) const;

  int node_count() const { return static_cast<int>(nodes_.size()); }
  std::size_t value_bytes() const;

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
    std::string leaf_name;  // non-empty marks a parameter leaf
    std::function<void(const Tensor& g)> back;
  };

  Var push(Tensor value, bool requires_grad,
           std::function<void(const Tensor&)> back = nullptr);
  void accumulate(int id, const Tensor& g);
  void accumulate(int id, Tensor&& g);
  bool wants_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  const Tensor& val(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  void check_owned(Var v, const char* op) const;

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::map<std::string, int> leaves_;
  bool backward_done_ = false;
};

}  // namespace latreg::ad
