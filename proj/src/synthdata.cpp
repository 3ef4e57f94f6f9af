#include "latreg/synthdata.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "latreg/errors.hpp"
#include "latreg/rng.hpp"

namespace latreg::synth {

namespace {

constexpr double kShapeMargin = 2.0;

}  // namespace

void SceneSpec::validate() const {
  for (int e : extents) {
    if (e < 8) throw ConfigError("scene extents must be >= 8");
  }
  if (classes < 1) throw ConfigError("scene needs at least one class");
  if (!(noise_std >= 0.0)) throw ConfigError("noise_std must be >= 0");
  if (!(modulation_amplitude >= 0.0)) {
    throw ConfigError("modulation_amplitude must be >= 0");
  }
  if (bump_count < 0) throw ConfigError("bump_count must be >= 0");
  if (bump_count > 0) {
    if (!(bump_sigma > 0.0)) throw ConfigError("bump_sigma must be > 0");
    if (!(bump_amplitude >= 0.0)) throw ConfigError("bump_amplitude must be >= 0");
    if (bump_amplitude > bump_sigma) {
      throw ConfigError("bump_amplitude must be <= bump_sigma to keep the "
                        "generated field fold-free");
    }
  }
  for (const Ellipsoid& s : resolved_shapes()) {
    if (s.label < 1 || s.label > classes) {
      throw ConfigError("ellipsoid label " + std::to_string(s.label) +
                        " outside 1.." + std::to_string(classes));
    }
    for (int ax = 0; ax < 3; ++ax) {
      const auto uax = static_cast<std::size_t>(ax);
      if (!(s.semi_axes[uax] > 0.5)) {
        throw ConfigError("ellipsoid semi-axes must exceed half a voxel");
      }
      // 1.08 covers the generator's multiplicative semi-axis jitter.
      const double reach = s.semi_axes[uax] * 1.08 + center_jitter;
      const double lo = s.center[uax] - reach;
      const double hi = s.center[uax] + reach;
      if (lo < kShapeMargin ||
          hi > static_cast<double>(extents[uax]) - 1.0 - kShapeMargin) {
        throw ConfigError(
            "ellipsoid (label " + std::to_string(s.label) +
            ") does not fit inside the grid with a 2-voxel margin");
      }
    }
  }
}

std::vector<Ellipsoid> SceneSpec::resolved_shapes() const {
  if (!shapes.empty()) return shapes;
  // One large central structure; the remaining classes carve smaller
  // sub-regions out of it on an interior ring. All sizes derive from the
  // span left over after the margin and the per-pair jitter.
  std::array<double, 3> center{}, avail{};
  for (int ax = 0; ax < 3; ++ax) {
    const auto uax = static_cast<std::size_t>(ax);
    const double lo = kShapeMargin;
    const double hi = static_cast<double>(extents[uax]) - 1.0 - kShapeMargin;
    center[uax] = 0.5 * (lo + hi);
    avail[uax] = 0.5 * (hi - lo) - center_jitter;
    if (avail[uax] <= 0.6) {
      throw ConfigError("grid too small for the default scene layout; "
                        "provide explicit shapes or reduce center_jitter");
    }
  }
  const std::array<double, 3> aniso = {1.0, 0.92, 0.84};
  std::vector<Ellipsoid> out;
  for (int k = 1; k <= classes; ++k) {
    Ellipsoid e;
    e.label = k;
    e.intensity = 0.30 + 0.55 * static_cast<double>(k) / classes;
    if (k == 1) {
      e.center = center;
      for (int ax = 0; ax < 3; ++ax) {
        const auto uax = static_cast<std::size_t>(ax);
        e.semi_axes[uax] = 0.82 * aniso[uax] * avail[uax] / 1.08;
      }
    } else {
      const double angle = 2.0 * std::numbers::pi *
                           static_cast<double>(k - 2) /
                           std::max(1, classes - 1);
      std::array<double, 3> semi{}, budget{};
      for (int ax = 0; ax < 3; ++ax) {
        const auto uax = static_cast<std::size_t>(ax);
        semi[uax] = std::max(0.551, 0.34 * aniso[uax] * avail[uax] / 1.08);
        budget[uax] = std::max(0.0, avail[uax] - semi[uax] * 1.08);
      }
      e.semi_axes = semi;
      e.center = {center[0],
                  center[1] + 0.8 * budget[1] * std::cos(angle),
                  center[2] + 0.8 * budget[2] * std::sin(angle)};
    }
    out.push_back(e);
  }
  return out;
}

namespace {

DisplacementField synthesize_bumps(const SceneSpec& spec, Rng& rng) {
  const int d = spec.extents[0], h = spec.extents[1], w = spec.extents[2];
  Tensor u({3, d, h, w});
  if (spec.bump_count == 0 || spec.bump_amplitude == 0.0) {
    return DisplacementField(std::move(u));
  }
  struct Bump {
    double c[3];
    double a[3];
  };
  std::vector<Bump> bumps;
  for (int b = 0; b < spec.bump_count; ++b) {
    Bump bump;
    bump.c[0] = rng.uniform(0.25 * d, 0.75 * d);
    bump.c[1] = rng.uniform(0.25 * h, 0.75 * h);
    bump.c[2] = rng.uniform(0.25 * w, 0.75 * w);
    // Random direction, magnitude in [0.6, 1] of the configured amplitude.
    double dir[3] = {rng.normal(), rng.normal(), rng.normal()};
    const double norm = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] +
                                  dir[2] * dir[2]) + 1e-12;
    const double mag = spec.bump_amplitude * rng.uniform(0.6, 1.0);
    for (int ax = 0; ax < 3; ++ax) bump.a[ax] = mag * dir[ax] / norm;
    bumps.push_back(bump);
  }
  const double inv_two_sigma2 = 1.0 / (2.0 * spec.bump_sigma * spec.bump_sigma);
  const std::size_t voxels = static_cast<std::size_t>(d) * h * w;
  for (int z = 0; z < d; ++z) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const std::size_t i = (static_cast<std::size_t>(z) * h + y) * w + x;
        for (const Bump& b : bumps) {
          const double dz = z - b.c[0], dy = y - b.c[1], dx = x - b.c[2];
          const double g =
              std::exp(-(dz * dz + dy * dy + dx * dx) * inv_two_sigma2);
          u.data()[i] += b.a[0] * g;
          u.data()[voxels + i] += b.a[1] * g;
          u.data()[2 * voxels + i] += b.a[2] * g;
        }
      }
    }
  }
  return DisplacementField(std::move(u));
}

}  // namespace

GeneratedPair generate_pair(const SceneSpec& spec) {
  spec.validate();
  const int d = spec.extents[0], h = spec.extents[1], w = spec.extents[2];
  Rng rng(mix_seed(spec.seed, 0xA11CE));

  // Per-pair ellipsoid jitter keeps train and test scenes distinct.
  std::vector<Ellipsoid> shapes = spec.resolved_shapes();
  for (Ellipsoid& s : shapes) {
    for (int ax = 0; ax < 3; ++ax) {
      const auto uax = static_cast<std::size_t>(ax);
      s.center[uax] += rng.uniform(-spec.center_jitter, spec.center_jitter);
      s.semi_axes[uax] *= rng.uniform(0.92, 1.08);
    }
  }

  GeneratedPair out;
  out.moving = Tensor({d, h, w});
  out.moving_labels = LabelMap(d, h, w, spec.classes);
  std::fill(out.moving.data(), out.moving.data() + out.moving.size(),
            spec.background_intensity);
  for (const Ellipsoid& s : shapes) {  // later shapes overwrite earlier ones
    for (int z = 0; z < d; ++z) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const double fz = (z - s.center[0]) / s.semi_axes[0];
          const double fy = (y - s.center[1]) / s.semi_axes[1];
          const double fx = (x - s.center[2]) / s.semi_axes[2];
          if (fz * fz + fy * fy + fx * fx <= 1.0) {
            out.moving.at({z, y, x}) = s.intensity;
            out.moving_labels.set(z, y, x, static_cast<std::uint16_t>(s.label));
          }
        }
      }
    }
  }

  // Smooth low-frequency intensity modulation: a few random cosine waves.
  if (spec.modulation_amplitude > 0.0) {
    struct Wave {
      double k[3];
      double phase;
    };
    std::array<Wave, 3> waves;
    for (Wave& wave : waves) {
      for (int ax = 0; ax < 3; ++ax) {
        wave.k[ax] = rng.uniform(0.5, 1.5) * 2.0 * std::numbers::pi /
                     static_cast<double>(spec.extents[static_cast<std::size_t>(ax)]);
        if (rng.uniform() < 0.5) wave.k[ax] = -wave.k[ax];
      }
      wave.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
    for (int z = 0; z < d; ++z) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          double m = 0.0;
          for (const Wave& wave : waves) {
            m += std::cos(wave.k[0] * z + wave.k[1] * y + wave.k[2] * x +
                          wave.phase);
          }
          out.moving.at({z, y, x}) += spec.modulation_amplitude * m / 3.0;
        }
      }
    }
  }
  if (spec.noise_std > 0.0) {
    for (std::size_t i = 0; i < out.moving.size(); ++i) {
      out.moving[i] += spec.noise_std * rng.normal();
    }
  }
  for (std::size_t i = 0; i < out.moving.size(); ++i) {
    out.moving[i] = std::min(std::max(out.moving[i], 0.0), 1.0);
  }

  // Draw deformation bumps; overlapping bumps can still fold in rare draws,
  // so redraw deterministically until the field verifies fold-free.
  for (int attempt = 0;; ++attempt) {
    if (attempt >= 100) {
      throw ConfigError("generate_pair: could not synthesize a fold-free field; "
                        "lower bump_amplitude or raise bump_sigma");
    }
    Rng bump_rng(mix_seed(spec.seed, 0xB0B5, static_cast<std::uint64_t>(attempt)));
    DisplacementField candidate = synthesize_bumps(spec, bump_rng);
    if (njd_percent(candidate) == 0.0) {
      out.true_field = std::move(candidate);
      break;
    }
  }

  out.fixed = warp_volume(out.moving, out.true_field, WarpMode::Trilinear);
  out.fixed_labels = warp_labels(out.moving_labels, out.true_field);
  return out;
}

// --- MSV1 io -------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'M', 'S', 'V', '1'};

static_assert(std::endian::native == std::endian::little,
              "volume io assumes a little-endian host");

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path)
      : path_(path.string()), is_(path, std::ios::binary) {
    if (!is_) throw DataError("cannot open " + path_);
  }

  template <class T>
  T pod(const char* what) {
    T v{};
    is_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is_) {
      throw DataError(path_ + ": truncated " + what + " at offset " +
                      std::to_string(offset_));
    }
    offset_ += sizeof(T);
    return v;
  }

  void bytes(char* dst, std::size_t n, const char* what) {
    is_.read(dst, static_cast<std::streamsize>(n));
    if (!is_) {
      throw DataError(path_ + ": truncated " + what + " at offset " +
                      std::to_string(offset_));
    }
    offset_ += n;
  }

  std::size_t offset() const { return offset_; }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ifstream is_;
  std::size_t offset_ = 0;
};

struct Header {
  std::uint8_t kind = 0;
  Shape shape;
};

Header read_header(Reader& r, std::uint8_t expected_kind, const char* kind_name) {
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw DataError(r.path() + ": bad magic at offset 0");
  }
  Header h;
  h.kind = r.pod<std::uint8_t>("kind");
  if (h.kind != expected_kind) {
    throw DataError(r.path() + ": kind mismatch at offset 4, stored kind " +
                    std::to_string(h.kind) + " is not " + kind_name);
  }
  const auto rank = r.pod<std::uint8_t>("rank");
  if (rank < 1 || rank > 5) {
    throw DataError(r.path() + ": invalid rank " + std::to_string(rank) +
                    " at offset 5");
  }
  for (std::uint8_t ax = 0; ax < rank; ++ax) {
    const std::size_t off = r.offset();
    const auto e = r.pod<std::uint32_t>("extent");
    if (e == 0 || e > (1u << 24)) {
      throw DataError(r.path() + ": extent overflow at offset " +
                      std::to_string(off));
    }
    h.shape.push_back(static_cast<int>(e));
  }
  return h;
}

void write_header(std::ofstream& os, std::uint8_t kind, const Shape& shape) {
  os.write(kMagic, 4);
  os.write(reinterpret_cast<const char*>(&kind), 1);
  const auto rank = static_cast<std::uint8_t>(shape.size());
  os.write(reinterpret_cast<const char*>(&rank), 1);
  for (int e : shape) {
    const auto ext = static_cast<std::uint32_t>(e);
    os.write(reinterpret_cast<const char*>(&ext), 4);
  }
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  return os;
}

}  // namespace

void write_volume(const std::filesystem::path& path, const Tensor& volume) {
  if (volume.rank() != 3) {
    throw ShapeError("write_volume expects a rank-3 intensity volume, got " +
                     shape_to_string(volume.shape()));
  }
  std::ofstream os = open_out(path);
  write_header(os, 0, volume.shape());
  os.write(reinterpret_cast<const char*>(volume.data()),
           static_cast<std::streamsize>(volume.size() * sizeof(double)));
  if (!os) throw DataError("write failed for " + path.string());
}

void write_labels(const std::filesystem::path& path, const LabelMap& labels) {
  std::ofstream os = open_out(path);
  write_header(os, 1, {labels.depth(), labels.height(), labels.width()});
  os.write(reinterpret_cast<const char*>(labels.data()),
           static_cast<std::streamsize>(labels.size() * sizeof(std::uint16_t)));
  if (!os) throw DataError("write failed for " + path.string());
}

void write_field(const std::filesystem::path& path, const DisplacementField& u) {
  std::ofstream os = open_out(path);
  write_header(os, 2, u.tensor().shape());
  os.write(reinterpret_cast<const char*>(u.tensor().data()),
           static_cast<std::streamsize>(u.tensor().size() * sizeof(double)));
  if (!os) throw DataError("write failed for " + path.string());
}

Tensor read_volume(const std::filesystem::path& path) {
  Reader r(path);
  Header h = read_header(r, 0, "intensity (0)");
  if (h.shape.size() != 3) {
    throw DataError(r.path() + ": intensity volume must be rank 3");
  }
  Tensor t(h.shape);
  r.bytes(reinterpret_cast<char*>(t.data()), t.size() * sizeof(double),
          "payload");
  return t;
}

LabelMap read_labels(const std::filesystem::path& path, int num_classes) {
  Reader r(path);
  Header h = read_header(r, 1, "labels (1)");
  if (h.shape.size() != 3) {
    throw DataError(r.path() + ": label map must be rank 3");
  }
  std::vector<std::uint16_t> raw(shape_numel(h.shape));
  r.bytes(reinterpret_cast<char*>(raw.data()), raw.size() * sizeof(std::uint16_t),
          "payload");
  int k = num_classes;
  if (k == 0) {
    for (std::uint16_t v : raw) k = std::max(k, static_cast<int>(v));
    k = std::max(k, 1);
  }
  LabelMap out(h.shape[0], h.shape[1], h.shape[2], k);
  std::copy(raw.begin(), raw.end(), out.data());
  return out;
}

DisplacementField read_field(const std::filesystem::path& path) {
  Reader r(path);
  Header h = read_header(r, 2, "field (2)");
  if (h.shape.size() != 4 || h.shape[0] != 3) {
    throw DataError(r.path() + ": displacement field must be rank 4 with "
                    "leading extent 3");
  }
  Tensor t(h.shape);
  r.bytes(reinterpret_cast<char*>(t.data()), t.size() * sizeof(double),
          "payload");
  return DisplacementField(std::move(t));
}

}  // namespace latreg::synth
