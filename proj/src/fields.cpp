#include "latreg/fields.hpp"

#include <algorithm>
#include <cmath>

#include "latreg/errors.hpp"

namespace latreg {

DisplacementField::DisplacementField(Tensor u) : u_(std::move(u)) {
  if (u_.rank() != 4 || u_.extent(0) != 3) {
    throw ShapeError("displacement field must be (3, D, H, W), got " +
                     shape_to_string(u_.shape()));
  }
}

DisplacementField DisplacementField::zeros(int d, int h, int w) {
  return DisplacementField(Tensor({3, d, h, w}));
}

namespace {

struct Grid {
  int d, h, w;
  std::size_t voxels;
};

Grid grid_of(const DisplacementField& u) {
  return {u.depth(), u.height(), u.width(),
          static_cast<std::size_t>(u.depth()) * u.height() * u.width()};
}

void require_spatial_match(const Shape& vol, const DisplacementField& u,
                           const char* op) {
  const int off = static_cast<int>(vol.size()) - 3;  // rank-3 or rank-4 volume
  if (off < 0 || off > 1 || vol[static_cast<std::size_t>(off)] != u.depth() ||
      vol[static_cast<std::size_t>(off + 1)] != u.height() ||
      vol[static_cast<std::size_t>(off + 2)] != u.width()) {
    throw ShapeError(std::string(op) + ": volume " + shape_to_string(vol) +
                     " does not match field spatial extents (" +
                     std::to_string(u.depth()) + ", " + std::to_string(u.height()) +
                     ", " + std::to_string(u.width()) + ")");
  }
}

inline double clampd(double v, double lo, double hi) {
  return std::min(std::max(v, lo), hi);
}

struct Tap3 {
  int d0, d1, h0, h1, w0, w1;
  double fd, fh, fw;       // fractional parts after clamping
  bool live_d, live_h, live_w;  // coordinate not clamped (gradient passes)
};

inline Tap3 make_tap(double pd, double ph, double pw, const Grid& g) {
  Tap3 t;
  t.live_d = pd > 0.0 && pd < static_cast<double>(g.d - 1);
  t.live_h = ph > 0.0 && ph < static_cast<double>(g.h - 1);
  t.live_w = pw > 0.0 && pw < static_cast<double>(g.w - 1);
  pd = clampd(pd, 0.0, static_cast<double>(g.d - 1));
  ph = clampd(ph, 0.0, static_cast<double>(g.h - 1));
  pw = clampd(pw, 0.0, static_cast<double>(g.w - 1));
  t.d0 = static_cast<int>(std::floor(pd));
  t.h0 = static_cast<int>(std::floor(ph));
  t.w0 = static_cast<int>(std::floor(pw));
  t.fd = pd - static_cast<double>(t.d0);
  t.fh = ph - static_cast<double>(t.h0);
  t.fw = pw - static_cast<double>(t.w0);
  t.d1 = std::min(t.d0 + 1, g.d - 1);
  t.h1 = std::min(t.h0 + 1, g.h - 1);
  t.w1 = std::min(t.w0 + 1, g.w - 1);
  return t;
}

inline double sample_trilinear(const double* v, const Grid& g, const Tap3& t) {
  const auto idx = [&](int d, int h, int w) {
    return (static_cast<std::size_t>(d) * g.h + static_cast<std::size_t>(h)) * g.w +
           static_cast<std::size_t>(w);
  };
  const double c000 = v[idx(t.d0, t.h0, t.w0)];
  const double c001 = v[idx(t.d0, t.h0, t.w1)];
  const double c010 = v[idx(t.d0, t.h1, t.w0)];
  const double c011 = v[idx(t.d0, t.h1, t.w1)];
  const double c100 = v[idx(t.d1, t.h0, t.w0)];
  const double c101 = v[idx(t.d1, t.h0, t.w1)];
  const double c110 = v[idx(t.d1, t.h1, t.w0)];
  const double c111 = v[idx(t.d1, t.h1, t.w1)];
  const double c00 = c000 * (1.0 - t.fw) + c001 * t.fw;
  const double c01 = c010 * (1.0 - t.fw) + c011 * t.fw;
  const double c10 = c100 * (1.0 - t.fw) + c101 * t.fw;
  const double c11 = c110 * (1.0 - t.fw) + c111 * t.fw;
  const double c0 = c00 * (1.0 - t.fh) + c01 * t.fh;
  const double c1 = c10 * (1.0 - t.fh) + c11 * t.fh;
  return c0 * (1.0 - t.fd) + c1 * t.fd;
}

}  // namespace

Tensor warp_volume(const Tensor& vol, const DisplacementField& u, WarpMode mode) {
  require_spatial_match(vol.shape(), u, "warp_volume");
  const Grid g = grid_of(u);
  const int channels = vol.rank() == 4 ? vol.extent(0) : 1;
  Tensor out(vol.shape());
  const double* ud = u.tensor().data();
  const double* uh = ud + g.voxels;
  const double* uw = uh + g.voxels;

  parallel_for(g.d, static_cast<std::size_t>(g.h) * g.w * channels * 8,
               [&](int d_begin, int d_end) {
    for (int d = d_begin; d < d_end; ++d) {
      for (int h = 0; h < g.h; ++h) {
        for (int w = 0; w < g.w; ++w) {
          const std::size_t i =
              (static_cast<std::size_t>(d) * g.h + h) * g.w + w;
          const double pd = static_cast<double>(d) + ud[i];
          const double ph = static_cast<double>(h) + uh[i];
          const double pw = static_cast<double>(w) + uw[i];
          if (mode == WarpMode::Trilinear) {
            const Tap3 t = make_tap(pd, ph, pw, g);
            for (int c = 0; c < channels; ++c) {
              const double* src = vol.data() + static_cast<std::size_t>(c) * g.voxels;
              out.data()[static_cast<std::size_t>(c) * g.voxels + i] =
                  sample_trilinear(src, g, t);
            }
          } else {
            const int nd = static_cast<int>(
                clampd(std::floor(pd + 0.5), 0.0, static_cast<double>(g.d - 1)));
            const int nh = static_cast<int>(
                clampd(std::floor(ph + 0.5), 0.0, static_cast<double>(g.h - 1)));
            const int nw = static_cast<int>(
                clampd(std::floor(pw + 0.5), 0.0, static_cast<double>(g.w - 1)));
            const std::size_t j =
                (static_cast<std::size_t>(nd) * g.h + nh) * g.w + nw;
            for (int c = 0; c < channels; ++c) {
              out.data()[static_cast<std::size_t>(c) * g.voxels + i] =
                  vol.data()[static_cast<std::size_t>(c) * g.voxels + j];
            }
          }
        }
      }
    }
  });
  return out;
}

LabelMap warp_labels(const LabelMap& labels, const DisplacementField& u) {
  if (labels.depth() != u.depth() || labels.height() != u.height() ||
      labels.width() != u.width()) {
    throw ShapeError("warp_labels: label grid does not match field extents");
  }
  const Grid g = grid_of(u);
  LabelMap out(labels.depth(), labels.height(), labels.width(),
               labels.num_classes());
  const double* ud = u.tensor().data();
  const double* uh = ud + g.voxels;
  const double* uw = uh + g.voxels;
  for (int d = 0; d < g.d; ++d) {
    for (int h = 0; h < g.h; ++h) {
      for (int w = 0; w < g.w; ++w) {
        const std::size_t i = (static_cast<std::size_t>(d) * g.h + h) * g.w + w;
        const int nd = static_cast<int>(clampd(
            std::floor(static_cast<double>(d) + ud[i] + 0.5), 0.0,
            static_cast<double>(g.d - 1)));
        const int nh = static_cast<int>(clampd(
            std::floor(static_cast<double>(h) + uh[i] + 0.5), 0.0,
            static_cast<double>(g.h - 1)));
        const int nw = static_cast<int>(clampd(
            std::floor(static_cast<double>(w) + uw[i] + 0.5), 0.0,
            static_cast<double>(g.w - 1)));
        out.set(d, h, w, labels.at(nd, nh, nw));
      }
    }
  }
  return out;
}

DisplacementField compose(const DisplacementField& prev,
                          const DisplacementField& step) {
  if (prev.depth() != step.depth() || prev.height() != step.height() ||
      prev.width() != step.width()) {
    throw ShapeError("compose: field extents differ");
  }
  Tensor sampled = warp_volume(prev.tensor(), step, WarpMode::Trilinear);
  Tensor total = elementwise(EwOp::Add, step.tensor(), sampled);
  return DisplacementField(std::move(total));
}

Tensor jacobian_determinant(const DisplacementField& u) {
  const Grid g = grid_of(u);
  if (g.d < 2 || g.h < 2 || g.w < 2) {
    throw ShapeError("jacobian_determinant: spatial extents must be >= 2, got (" +
                     std::to_string(g.d) + ", " + std::to_string(g.h) + ", " +
                     std::to_string(g.w) + ")");
  }
  Tensor det({g.d, g.h, g.w});
  const double* base = u.tensor().data();
  const double* comp[3] = {base, base + g.voxels, base + 2 * g.voxels};
  const auto idx = [&](int d, int h, int w) {
    return (static_cast<std::size_t>(d) * g.h + static_cast<std::size_t>(h)) * g.w +
           static_cast<std::size_t>(w);
  };
  for (int d = 0; d < g.d; ++d) {
    // Forward difference; at the trailing face reuse the previous one.
    const int dd = d < g.d - 1 ? d : d - 1;
    for (int h = 0; h < g.h; ++h) {
      const int hh = h < g.h - 1 ? h : h - 1;
      for (int w = 0; w < g.w; ++w) {
        const int ww = w < g.w - 1 ? w : w - 1;
        double m[3][3];
        for (int c = 0; c < 3; ++c) {
          const double* uc = comp[c];
          m[c][0] = uc[idx(dd + 1, h, w)] - uc[idx(dd, h, w)];
          m[c][1] = uc[idx(d, hh + 1, w)] - uc[idx(d, hh, w)];
          m[c][2] = uc[idx(d, h, ww + 1)] - uc[idx(d, h, ww)];
        }
        m[0][0] += 1.0;
        m[1][1] += 1.0;
        m[2][2] += 1.0;
        det.data()[idx(d, h, w)] =
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
            m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
            m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
      }
    }
  }
  return det;
}

double njd_percent(const DisplacementField& u) {
  Tensor det = jacobian_determinant(u);
  std::size_t negative = 0;
  for (std::size_t i = 0; i < det.size(); ++i) {
    if (det[i] < 0.0) ++negative;
  }
  return 100.0 * static_cast<double>(negative) / static_cast<double>(det.size());
}

Tensor warp_grad_volume(const Tensor& grad_out, const Shape& vol_shape,
                        const DisplacementField& u) {
  Tensor grad(vol_shape);
  const Grid g = grid_of(u);
  const int channels = vol_shape.size() == 4 ? vol_shape[0] : 1;
  const double* ud = u.tensor().data();
  const double* uh = ud + g.voxels;
  const double* uw = uh + g.voxels;
  const auto idx = [&](int d, int h, int w) {
    return (static_cast<std::size_t>(d) * g.h + static_cast<std::size_t>(h)) * g.w +
           static_cast<std::size_t>(w);
  };
  for (int d = 0; d < g.d; ++d) {
    for (int h = 0; h < g.h; ++h) {
      for (int w = 0; w < g.w; ++w) {
        const std::size_t i = idx(d, h, w);
        const Tap3 t = make_tap(static_cast<double>(d) + ud[i],
                                static_cast<double>(h) + uh[i],
                                static_cast<double>(w) + uw[i], g);
        const double wd0 = 1.0 - t.fd, wd1 = t.fd;
        const double wh0 = 1.0 - t.fh, wh1 = t.fh;
        const double ww0 = 1.0 - t.fw, ww1 = t.fw;
        for (int c = 0; c < channels; ++c) {
          const double gout =
              grad_out.data()[static_cast<std::size_t>(c) * g.voxels + i];
          if (gout == 0.0) continue;
          double* gc = grad.data() + static_cast<std::size_t>(c) * g.voxels;
          gc[idx(t.d0, t.h0, t.w0)] += gout * wd0 * wh0 * ww0;
          gc[idx(t.d0, t.h0, t.w1)] += gout * wd0 * wh0 * ww1;
          gc[idx(t.d0, t.h1, t.w0)] += gout * wd0 * wh1 * ww0;
          gc[idx(t.d0, t.h1, t.w1)] += gout * wd0 * wh1 * ww1;
          gc[idx(t.d1, t.h0, t.w0)] += gout * wd1 * wh0 * ww0;
          gc[idx(t.d1, t.h0, t.w1)] += gout * wd1 * wh0 * ww1;
          gc[idx(t.d1, t.h1, t.w0)] += gout * wd1 * wh1 * ww0;
          gc[idx(t.d1, t.h1, t.w1)] += gout * wd1 * wh1 * ww1;
        }
      }
    }
  }
  return grad;
}

Tensor warp_grad_field(const Tensor& grad_out, const Tensor& vol,
                       const DisplacementField& u) {
  Tensor grad(u.tensor().shape());
  const Grid g = grid_of(u);
  const int channels = vol.rank() == 4 ? vol.extent(0) : 1;
  const double* ud = u.tensor().data();
  const double* uh = ud + g.voxels;
  const double* uw = uh + g.voxels;
  double* gd = grad.data();
  double* gh = gd + g.voxels;
  double* gw = gh + g.voxels;
  const auto idx = [&](int d, int h, int w) {
    return (static_cast<std::size_t>(d) * g.h + static_cast<std::size_t>(h)) * g.w +
           static_cast<std::size_t>(w);
  };
  for (int d = 0; d < g.d; ++d) {
    for (int h = 0; h < g.h; ++h) {
      for (int w = 0; w < g.w; ++w) {
        const std::size_t i = idx(d, h, w);
        const Tap3 t = make_tap(static_cast<double>(d) + ud[i],
                                static_cast<double>(h) + uh[i],
                                static_cast<double>(w) + uw[i], g);
        const double wd0 = 1.0 - t.fd, wd1 = t.fd;
        const double wh0 = 1.0 - t.fh, wh1 = t.fh;
        const double ww0 = 1.0 - t.fw, ww1 = t.fw;
        double acc_d = 0.0, acc_h = 0.0, acc_w = 0.0;
        for (int c = 0; c < channels; ++c) {
          const double gout =
              grad_out.data()[static_cast<std::size_t>(c) * g.voxels + i];
          if (gout == 0.0) continue;
          const double* v = vol.data() + static_cast<std::size_t>(c) * g.voxels;
          const double c000 = v[idx(t.d0, t.h0, t.w0)];
          const double c001 = v[idx(t.d0, t.h0, t.w1)];
          const double c010 = v[idx(t.d0, t.h1, t.w0)];
          const double c011 = v[idx(t.d0, t.h1, t.w1)];
          const double c100 = v[idx(t.d1, t.h0, t.w0)];
          const double c101 = v[idx(t.d1, t.h0, t.w1)];
          const double c110 = v[idx(t.d1, t.h1, t.w0)];
          const double c111 = v[idx(t.d1, t.h1, t.w1)];
          // d/d(fd), d/d(fh), d/d(fw) of the trilinear blend.
          acc_d += gout * ((c100 - c000) * wh0 * ww0 + (c101 - c001) * wh0 * ww1 +
                           (c110 - c010) * wh1 * ww0 + (c111 - c011) * wh1 * ww1);
          acc_h += gout * ((c010 - c000) * wd0 * ww0 + (c011 - c001) * wd0 * ww1 +
                           (c110 - c100) * wd1 * ww0 + (c111 - c101) * wd1 * ww1);
          acc_w += gout * ((c001 - c000) * wd0 * wh0 + (c011 - c010) * wd0 * wh1 +
                           (c101 - c100) * wd1 * wh0 + (c111 - c110) * wd1 * wh1);
        }
        gd[i] = t.live_d ? acc_d : 0.0;
        gh[i] = t.live_h ? acc_h : 0.0;
        gw[i] = t.live_w ? acc_w : 0.0;
      }
    }
  }
  return grad;
}

}  // namespace latreg
