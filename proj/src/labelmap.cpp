#include "latreg/labelmap.hpp"

#include "latreg/errors.hpp"

namespace latreg {

LabelMap::LabelMap(int d, int h, int w, int num_classes)
    : d_(d), h_(h), w_(w), k_(num_classes) {
  if (d < 1 || h < 1 || w < 1) {
    throw ShapeError("label map extents must be >= 1");
  }
  if (num_classes < 1) {
    throw ShapeError("label map needs at least one foreground class");
  }
  labels_.assign(static_cast<std::size_t>(d) * h * w, 0);
}

Tensor LabelMap::one_hot() const {
  Tensor out({k_, d_, h_, w_});
  const std::size_t voxels = labels_.size();
  double* p = out.data();
  for (std::size_t i = 0; i < voxels; ++i) {
    const int lab = labels_[i];
    if (lab >= 1 && lab <= k_) {
      p[static_cast<std::size_t>(lab - 1) * voxels + i] = 1.0;
    }
  }
  return out;
}

}  // namespace latreg
