#pragma once

#include "latreg/labelmap.hpp"
#include "latreg/tensor.hpp"

namespace latreg {

/// Dense per-voxel displacements in voxel units, shape (3, D, H, W) with
/// component order (delta-d, delta-h, delta-w). The all-zero field is the
/// identity transform. Warping samples the source at index + displacement
/// with border-clamped coordinates.
class DisplacementField {
 public:
  DisplacementField() = default;
  explicit DisplacementField(Tensor u);
  static DisplacementField zeros(int d, int h, int w);

  const Tensor& tensor() const { return u_; }
  Tensor& tensor() { return u_; }
  int depth() const { return u_.extent(1); }
  int height() const { return u_.extent(2); }
  int width() const { return u_.extent(3); }
  bool empty() const { return u_.empty(); }

  double component(int c, int d, int h, int w) const {
    return u_.data()[((static_cast<std::size_t>(c) * depth() + d) * height() + h) *
                         width() +
                     w];
  }

 private:
  Tensor u_;
};

enum class WarpMode { Trilinear, Nearest };

// Warps a (D, H, W) volume or a (C, D, H, W) stack. Trilinear is the
// differentiable mode; nearest is evaluation-only.
Tensor warp_volume(const Tensor& vol, const DisplacementField& u, WarpMode mode);

// Nearest-neighbor warping of integer labels.
LabelMap warp_labels(const LabelMap& labels, const DisplacementField& u);

// Left-to-right composition: the result applied to the original image equals
// applying prev then step. u_total(x) = u_step(x) + u_prev(x + u_step(x)).
DisplacementField compose(const DisplacementField& prev,
                          const DisplacementField& step);

// det(I + grad u) per voxel with forward differences; the trailing boundary
// replicates the last interior difference. Requires extents >= 2.
Tensor jacobian_determinant(const DisplacementField& u);

// Percentage of voxels with negative Jacobian determinant.
double njd_percent(const DisplacementField& u);

// Backward kernels for the differentiable trilinear warp.
Tensor warp_grad_volume(const Tensor& grad_out, const Shape& vol_shape,
                        const DisplacementField& u);
Tensor warp_grad_field(const Tensor& grad_out, const Tensor& vol,
                       const DisplacementField& u);

}  // namespace latreg
