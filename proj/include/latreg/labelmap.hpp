#pragma once

#include <cstdint>
#include <vector>

#include "latreg/tensor.hpp"

namespace latreg {

/// Per-voxel integer class labels on a (D, H, W) grid. 0 is background;
/// foreground classes are 1..K. Stored as u16 to match the on-disk format.
class LabelMap {
 public:
  LabelMap() = default;
  LabelMap(int d, int h, int w, int num_classes);

  int depth() const { return d_; }
  int height() const { return h_; }
  int width() const { return w_; }
  int num_classes() const { return k_; }
  std::size_t size() const { return labels_.size(); }

  std::uint16_t at(int d, int h, int w) const {
    return labels_[flat(d, h, w)];
  }
  void set(int d, int h, int w, std::uint16_t v) { labels_[flat(d, h, w)] = v; }

  const std::uint16_t* data() const { return labels_.data(); }
  std::uint16_t* data() { return labels_.data(); }

  bool same_grid(const LabelMap& o) const {
    return d_ == o.d_ && h_ == o.h_ && w_ == o.w_;
  }
  bool operator==(const LabelMap& o) const {
    return same_grid(o) && k_ == o.k_ && labels_ == o.labels_;
  }

  // One channel per foreground class, shape (K, D, H, W).
  Tensor one_hot() const;

 private:
  std::size_t flat(int d, int h, int w) const {
    return (static_cast<std::size_t>(d) * h_ + static_cast<std::size_t>(h)) * w_ +
           static_cast<std::size_t>(w);
  }
  std::vector<std::uint16_t> labels_;
  int d_ = 0, h_ = 0, w_ = 0;
  int k_ = 0;
};

}  // namespace latreg
