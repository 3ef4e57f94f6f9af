#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

namespace latreg {

using Shape = std::vector<int>;

std::string shape_to_string(const Shape& s);
std::size_t shape_numel(const Shape& s);

/// Dense row-major multi-dimensional array of 64-bit floats, up to rank 5.
/// Flat index of (c, d, h, w) is ((c*D + d)*H + h)*W + w. Values are
/// immutable once handed to another component; kernels never alias inputs
/// with outputs.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value) { return full({1}, value); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int extent(int axis) const { return shape_[static_cast<std::size_t>(axis)]; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::size_t flat_index(std::initializer_list<int> idx) const;
  double at(std::initializer_list<int> idx) const { return data_[flat_index(idx)]; }
  double& at(std::initializer_list<int> idx) { return data_[flat_index(idx)]; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  Tensor reshaped(Shape new_shape) const;

  double item() const;  // value of a single-element tensor

 private:
  Shape shape_;
  std::vector<double> data_;
};

void require_same_shape(const Tensor& a, const Tensor& b, const char* op);

// --- elementwise kernels -----------------------------------------------
// Division by zero follows IEEE-754 (inf/nan propagate, nothing traps).

enum class EwOp { Add, Sub, Mul, Div, Exp, Log, Tanh, Square };

Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b);
Tensor elementwise(EwOp op, const Tensor& a, double b);
Tensor elementwise(EwOp op, const Tensor& a);
Tensor clip(const Tensor& a, double lo, double hi);

// --- reductions ---------------------------------------------------------

enum class ReduceOp { Sum, Mean, Max, Argmax };

// Reduces over `axes`; reduced extents are removed unless keep_dims. An empty
// axis list returns an identity copy. Argmax supports a single axis and
// yields flat indices along it.
Tensor reduce(ReduceOp op, const Tensor& a, const std::vector<int>& axes,
              bool keep_dims = false);

double sum_all(const Tensor& a);
double mean_all(const Tensor& a);

// --- spatial kernels ----------------------------------------------------

// Direct 3D cross-correlation (no kernel flip; this repo's fixed
// convention). input (C_in, D, H, W), kernel (C_out, C_in, k, k, k),
// stride in {1, 2}. Output extent = floor((in + 2*pad - k)/stride) + 1.
Tensor conv3d(const Tensor& input, const Tensor& kernel, int stride,
              int padding);
Tensor conv3d_grad_input(const Tensor& grad_out, const Tensor& kernel,
                         const Shape& input_shape, int stride, int padding);
Tensor conv3d_grad_kernel(const Tensor& grad_out, const Tensor& input,
                          const Shape& kernel_shape, int stride, int padding);

// Per-channel bias add over a (C, D, H, W) tensor; bias has shape (C).
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);
Tensor channel_bias_grad(const Tensor& grad_out);

// Trilinear upsampling by an integer factor >= 2, align-corners-false:
// source coordinate = (dst + 0.5)/factor - 0.5, clamped to borders.
Tensor upsample_trilinear(const Tensor& input, int factor);
Tensor upsample_trilinear_grad(const Tensor& grad_out, const Shape& input_shape,
                               int factor);

Tensor concat_channels(const Tensor& a, const Tensor& b);

// Forward differences along a spatial axis (1..3) of a (C, D, H, W) tensor;
// the differenced extent shrinks by one.
Tensor axis_forward_diff(const Tensor& a, int axis);
Tensor axis_forward_diff_grad(const Tensor& grad_out, const Shape& input_shape,
                              int axis);

// Runs fn(begin, end) over [0, n) split across worker threads when the work
// is large enough; ranges are disjoint so results do not depend on the split.
void parallel_for(int n, std::size_t work_per_item,
                  const std::function<void(int, int)>& fn);

}  // namespace latreg
