#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "latreg/fields.hpp"
#include "latreg/labelmap.hpp"
#include "latreg/tensor.hpp"

namespace latreg::synth {

struct Ellipsoid {
  std::array<double, 3> center;     // voxel coordinates (d, h, w)
  std::array<double, 3> semi_axes;  // voxels
  int label = 1;
  double intensity = 0.5;
};

/// Recipe for one synthetic labeled pair. The moving scene is rendered from
/// ellipsoids with smooth intensity modulation and noise; the fixed image is
/// the moving image warped by a sum of Gaussian displacement bumps, so the
/// ground-truth field is known. Everything is a pure function of the seed.
struct SceneSpec {
  std::array<int, 3> extents = {16, 16, 16};
  int classes = 3;
  std::vector<Ellipsoid> shapes;  // empty selects the default layout
  double background_intensity = 0.05;
  double modulation_amplitude = 0.08;
  double noise_std = 0.02;
  int bump_count = 2;
  double bump_amplitude = 2.0;  // voxels; must stay <= bump_sigma
  double bump_sigma = 4.0;      // voxels
  double center_jitter = 0.75;  // per-pair ellipsoid jitter, voxels
  std::uint64_t seed = 0;

  void validate() const;
  std::vector<Ellipsoid> resolved_shapes() const;
};

struct GeneratedPair {
  Tensor moving;
  Tensor fixed;
  LabelMap moving_labels;
  LabelMap fixed_labels;
  DisplacementField true_field;
};

GeneratedPair generate_pair(const SceneSpec& spec);

// --- binary volume container ("MSV1") -----------------------------------------
// magic "MSV1", kind u8 (0 intensity f64, 1 labels u16, 2 field f64x3),
// rank u8, extents u32 little-endian, payload row-major little-endian.
// Fields are stored rank-4 with leading extent 3.

void write_volume(const std::filesystem::path& path, const Tensor& volume);
void write_labels(const std::filesystem::path& path, const LabelMap& labels);
void write_field(const std::filesystem::path& path, const DisplacementField& u);

Tensor read_volume(const std::filesystem::path& path);
// num_classes 0 derives K from the largest stored label.
LabelMap read_labels(const std::filesystem::path& path, int num_classes = 0);
DisplacementField read_field(const std::filesystem::path& path);

}  // namespace latreg::synth
