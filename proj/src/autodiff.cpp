#include "latreg/autodiff.hpp"

#include <cmath>

#include "latreg/errors.hpp"

namespace latreg::ad {

const Tensor& Var::value() const {
  if (!valid()) throw ShapeError("autodiff: use of an empty Var");
  return tape->value(*this);
}

const Tensor& Tape::value(Var v) const {
  check_owned(v, "value");
  return nodes_[static_cast<std::size_t>(v.id)].value;
}

Tensor Tape::grad(Var v) const {
  check_owned(v, "grad");
  const Tensor& g = grads_[static_cast<std::size_t>(v.id)];
  if (g.empty()) return Tensor(nodes_[static_cast<std::size_t>(v.id)].value.shape());
  return g;
}

void Tape::check_owned(Var v, const char* op) const {
  if (v.tape != this || v.id < 0 ||
      v.id >= static_cast<int>(nodes_.size())) {
    throw ShapeError(std::string("autodiff: ") + op +
                     " got a Var from another tape");
  }
}

std::size_t Tape::value_bytes() const {
  std::size_t total = 0;
  for (const Node& n : nodes_) total += n.value.size() * sizeof(double);
  return total;
}

Var Tape::push(Tensor value, bool requires_grad,
               std::function<void(const Tensor&)> back) {
  if (backward_done_) {
    throw ShapeError("autodiff: tape already consumed by backward()");
  }
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.back = requires_grad ? std::move(back) : nullptr;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(Tensor value) { return push(std::move(value), false); }

Var Tape::leaf(const std::string& name, const Tensor& value) {
  auto it = leaves_.find(name);
  if (it != leaves_.end()) {
    const Tensor& existing = nodes_[static_cast<std::size_t>(it->second)].value;
    if (!existing.same_shape(value)) {
      throw ShapeError("autodiff: leaf '" + name + "' re-registered with shape " +
                       shape_to_string(value.shape()) + " after " +
                       shape_to_string(existing.shape()));
    }
    return Var{this, it->second};
  }
  Var v = push(value, true);
  nodes_[static_cast<std::size_t>(v.id)].leaf_name = name;
  leaves_[name] = v.id;
  return v;
}

void Tape::accumulate(int id, const Tensor& g) {
  Tensor copy = g;
  accumulate(id, std::move(copy));
}

void Tape::accumulate(int id, Tensor&& g) {
  if (!wants_grad(id)) return;
  Tensor& slot = grads_[static_cast<std::size_t>(id)];
  if (slot.empty()) {
    slot = std::move(g);
    return;
  }
  double* a = slot.data();
  const double* b = g.data();
  for (std::size_t i = 0; i < slot.size(); ++i) a[i] += b[i];
}

// --- arithmetic ops -------------------------------------------------------

Var Tape::add(Var a, Var b) {
  check_owned(a, "add");
  check_owned(b, "add");
  require_same_shape(val(a.id), val(b.id), "add");
  const bool rg = wants_grad(a.id) || wants_grad(b.id);
  const int pa = a.id, pb = b.id;
  return push(elementwise(EwOp::Add, val(a.id), val(b.id)), rg,
              [this, pa, pb](const Tensor& g) {
                accumulate(pa, g);
                accumulate(pb, g);
              });
}

Var Tape::sub(Var a, Var b) {
  check_owned(a, "sub");
  check_owned(b, "sub");
  require_same_shape(val(a.id), val(b.id), "sub");
  const bool rg = wants_grad(a.id) || wants_grad(b.id);
  const int pa = a.id, pb = b.id;
  return push(elementwise(EwOp::Sub, val(a.id), val(b.id)), rg,
              [this, pa, pb](const Tensor& g) {
                accumulate(pa, g);
                accumulate(pb, elementwise(EwOp::Mul, g, -1.0));
              });
}

Var Tape::mul(Var a, Var b) {
  check_owned(a, "mul");
  check_owned(b, "mul");
  require_same_shape(val(a.id), val(b.id), "mul");
  const bool rg = wants_grad(a.id) || wants_grad(b.id);
  const int pa = a.id, pb = b.id;
  return push(elementwise(EwOp::Mul, val(a.id), val(b.id)), rg,
              [this, pa, pb](const Tensor& g) {
                accumulate(pa, elementwise(EwOp::Mul, g, val(pb)));
                accumulate(pb, elementwise(EwOp::Mul, g, val(pa)));
              });
}

Var Tape::div(Var a, Var b) {
  check_owned(a, "div");
  check_owned(b, "div");
  require_same_shape(val(a.id), val(b.id), "div");
  const bool rg = wants_grad(a.id) || wants_grad(b.id);
  const int pa = a.id, pb = b.id;
  return push(elementwise(EwOp::Div, val(a.id), val(b.id)), rg,
              [this, pa, pb](const Tensor& g) {
                const Tensor& bv = val(pb);
                accumulate(pa, elementwise(EwOp::Div, g, bv));
                // -g * a / b^2
                Tensor gb = elementwise(EwOp::Mul, g, val(pa));
                gb = elementwise(EwOp::Div, gb, elementwise(EwOp::Square, bv));
                accumulate(pb, elementwise(EwOp::Mul, gb, -1.0));
              });
}

Var Tape::add_scalar(Var a, double s) {
  check_owned(a, "add_scalar");
  const int pa = a.id;
  return push(elementwise(EwOp::Add, val(a.id), s), wants_grad(a.id),
              [this, pa](const Tensor& g) { accumulate(pa, g); });
}

Var Tape::mul_scalar(Var a, double s) {
  check_owned(a, "mul_scalar");
  const int pa = a.id;
  return push(elementwise(EwOp::Mul, val(a.id), s), wants_grad(a.id),
              [this, pa, s](const Tensor& g) {
                accumulate(pa, elementwise(EwOp::Mul, g, s));
              });
}

Var Tape::exp(Var a) {
  check_owned(a, "exp");
  const int pa = a.id;
  Var out = push(elementwise(EwOp::Exp, val(a.id)), wants_grad(a.id), nullptr);
  const int self = out.id;
  nodes_[static_cast<std::size_t>(self)].back = [this, pa, self](const Tensor& g) {
    accumulate(pa, elementwise(EwOp::Mul, g, val(self)));
  };
  if (!wants_grad(pa)) nodes_[static_cast<std::size_t>(self)].back = nullptr;
  return out;
}

Var Tape::log(Var a) {
  check_owned(a, "log");
  const int pa = a.id;
  return push(elementwise(EwOp::Log, val(a.id)), wants_grad(a.id),
              [this, pa](const Tensor& g) {
                accumulate(pa, elementwise(EwOp::Div, g, val(pa)));
              });
}

Var Tape::tanh(Var a) {
  check_owned(a, "tanh");
  const int pa = a.id;
  Var out = push(elementwise(EwOp::Tanh, val(a.id)), wants_grad(a.id), nullptr);
  const int self = out.id;
  if (wants_grad(pa)) {
    nodes_[static_cast<std::size_t>(self)].back = [this, pa, self](const Tensor& g) {
      const Tensor& y = val(self);
      Tensor gy(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) {
        gy[i] = g[i] * (1.0 - y[i] * y[i]);
      }
      accumulate(pa, std::move(gy));
    };
  }
  return out;
}

Var Tape::square(Var a) {
  check_owned(a, "square");
  const int pa = a.id;
  return push(elementwise(EwOp::Square, val(a.id)), wants_grad(a.id),
              [this, pa](const Tensor& g) {
                Tensor ga = elementwise(EwOp::Mul, g, val(pa));
                accumulate(pa, elementwise(EwOp::Mul, ga, 2.0));
              });
}

Var Tape::clip(Var a, double lo, double hi) {
  check_owned(a, "clip");
  if (!(lo < hi)) throw ShapeError("clip: lo must be < hi");
  const int pa = a.id;
  return push(latreg::clip(val(a.id), lo, hi), wants_grad(a.id),
              [this, pa, lo, hi](const Tensor& g) {
                const Tensor& x = val(pa);
                Tensor ga(g.shape());
                for (std::size_t i = 0; i < g.size(); ++i) {
                  ga[i] = (x[i] > lo && x[i] < hi) ? g[i] : 0.0;
                }
                accumulate(pa, std::move(ga));
              });
}

Var Tape::leaky_relu(Var a, double slope) {
  check_owned(a, "leaky_relu");
  const int pa = a.id;
  const Tensor& x = val(a.id);
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = x[i] > 0.0 ? x[i] : slope * x[i];
  }
  return push(std::move(y), wants_grad(a.id),
              [this, pa, slope](const Tensor& g) {
                const Tensor& xv = val(pa);
                Tensor ga(g.shape());
                for (std::size_t i = 0; i < g.size(); ++i) {
                  ga[i] = xv[i] > 0.0 ? g[i] : slope * g[i];
                }
                accumulate(pa, std::move(ga));
              });
}

Var Tape::sum(Var a) {
  check_owned(a, "sum");
  const int pa = a.id;
  return push(Tensor::scalar(sum_all(val(a.id))), wants_grad(a.id),
              [this, pa](const Tensor& g) {
                accumulate(pa, Tensor::full(val(pa).shape(), g[0]));
              });
}

Var Tape::mean(Var a) {
  check_owned(a, "mean");
  const int pa = a.id;
  const double inv = 1.0 / static_cast<double>(val(a.id).size());
  return push(Tensor::scalar(mean_all(val(a.id))), wants_grad(a.id),
              [this, pa, inv](const Tensor& g) {
                accumulate(pa, Tensor::full(val(pa).shape(), g[0] * inv));
              });
}

// --- structured ops -------------------------------------------------------

Var Tape::conv3d(Var x, Var kernel, int stride, int padding) {
  check_owned(x, "conv3d");
  check_owned(kernel, "conv3d");
  const bool rg = wants_grad(x.id) || wants_grad(kernel.id);
  const int px = x.id, pk = kernel.id;
  return push(latreg::conv3d(val(x.id), val(kernel.id), stride, padding), rg,
              [this, px, pk, stride, padding](const Tensor& g) {
                if (wants_grad(px)) {
                  accumulate(px, conv3d_grad_input(g, val(pk), val(px).shape(),
                                                   stride, padding));
                }
                if (wants_grad(pk)) {
                  accumulate(pk, conv3d_grad_kernel(g, val(px), val(pk).shape(),
                                                    stride, padding));
                }
              });
}

Var Tape::add_channel_bias(Var x, Var bias) {
  check_owned(x, "add_channel_bias");
  check_owned(bias, "add_channel_bias");
  const bool rg = wants_grad(x.id) || wants_grad(bias.id);
  const int px = x.id, pb = bias.id;
  return push(latreg::add_channel_bias(val(x.id), val(bias.id)), rg,
              [this, px, pb](const Tensor& g) {
                accumulate(px, g);
                if (wants_grad(pb)) accumulate(pb, channel_bias_grad(g));
              });
}

Var Tape::upsample_trilinear(Var a, int factor) {
  check_owned(a, "upsample_trilinear");
  const int pa = a.id;
  return push(latreg::upsample_trilinear(val(a.id), factor), wants_grad(a.id),
              [this, pa, factor](const Tensor& g) {
                accumulate(pa,
                           upsample_trilinear_grad(g, val(pa).shape(), factor));
              });
}

Var Tape::concat_channels(Var a, Var b) {
  check_owned(a, "concat_channels");
  check_owned(b, "concat_channels");
  const bool rg = wants_grad(a.id) || wants_grad(b.id);
  const int pa = a.id, pb = b.id;
  return push(latreg::concat_channels(val(a.id), val(b.id)), rg,
              [this, pa, pb](const Tensor& g) {
                const Tensor& av = val(pa);
                const Tensor& bv = val(pb);
                Tensor ga(av.shape());
                Tensor gb(bv.shape());
                std::copy(g.data(), g.data() + av.size(), ga.data());
                std::copy(g.data() + av.size(), g.data() + g.size(), gb.data());
                accumulate(pa, std::move(ga));
                accumulate(pb, std::move(gb));
              });
}

Var Tape::slice_channel(Var a, int channel) {
  check_owned(a, "slice_channel");
  const Tensor& x = val(a.id);
  if (x.rank() != 4 || channel < 0 || channel >= x.extent(0)) {
    throw ShapeError("slice_channel: channel " + std::to_string(channel) +
                     " invalid for shape " + shape_to_string(x.shape()));
  }
  const std::size_t voxels = x.size() / static_cast<std::size_t>(x.extent(0));
  Tensor out({1, x.extent(1), x.extent(2), x.extent(3)});
  std::copy(x.data() + static_cast<std::size_t>(channel) * voxels,
            x.data() + static_cast<std::size_t>(channel + 1) * voxels,
            out.data());
  const int pa = a.id;
  return push(std::move(out), wants_grad(a.id),
              [this, pa, channel, voxels](const Tensor& g) {
                Tensor ga(val(pa).shape());
                std::copy(g.data(), g.data() + voxels,
                          ga.data() + static_cast<std::size_t>(channel) * voxels);
                accumulate(pa, std::move(ga));
              });
}

Var Tape::axis_forward_diff(Var a, int axis) {
  check_owned(a, "axis_forward_diff");
  const int pa = a.id;
  return push(latreg::axis_forward_diff(val(a.id), axis), wants_grad(a.id),
              [this, pa, axis](const Tensor& g) {
                accumulate(pa,
                           axis_forward_diff_grad(g, val(pa).shape(), axis));
              });
}

Var Tape::reshape(Var a, Shape shape) {
  check_owned(a, "reshape");
  const int pa = a.id;
  return push(val(a.id).reshaped(shape), wants_grad(a.id),
              [this, pa](const Tensor& g) {
                accumulate(pa, g.reshaped(val(pa).shape()));
              });
}

Var Tape::warp(Var vol, Var field) {
  check_owned(vol, "warp");
  check_owned(field, "warp");
  const DisplacementField u(val(field.id));
  const bool rg = wants_grad(vol.id) || wants_grad(field.id);
  const int pv = vol.id, pf = field.id;
  return push(warp_volume(val(vol.id), u, WarpMode::Trilinear), rg,
              [this, pv, pf](const Tensor& g) {
                const DisplacementField uf(val(pf));
                if (wants_grad(pv)) {
                  accumulate(pv, warp_grad_volume(g, val(pv).shape(), uf));
                }
                if (wants_grad(pf)) {
                  accumulate(pf, warp_grad_field(g, val(pv), uf));
                }
              });
}

Var Tape::detach(Var a) {
  check_owned(a, "detach");
  return push(val(a.id), false);
}

// --- backward ---------------------------------------------------------------

GradientMap Tape::backward(Var loss) {
  check_owned(loss, "backward");
  if (backward_done_) {
    throw ShapeError("autodiff: backward() already ran on this tape");
  }
  const Tensor& lv = val(loss.id);
  if (lv.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " +
                     shape_to_string(lv.shape()));
  }
  backward_done_ = true;
  grads_.assign(nodes_.size(), Tensor());
  grads_[static_cast<std::size_t>(loss.id)] = Tensor::scalar(1.0);

  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    const Tensor& g = grads_[static_cast<std::size_t>(id)];
    if (g.empty() || !n.requires_grad || !n.back) continue;
    n.back(g);
  }

  GradientMap out;
  for (const auto& [name, id] : leaves_) {
    const Tensor& g = grads_[static_cast<std::size_t>(id)];
    if (g.empty()) {
      out.emplace(name, Tensor(nodes_[static_cast<std::size_t>(id)].value.shape()));
    } else {
      out.emplace(name, g);
    }
  }
  return out;
}

}  // namespace latreg::ad
