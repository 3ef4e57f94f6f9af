#include "latreg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

#include "latreg/errors.hpp"

namespace latreg {

std::string shape_to_string(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ")";
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int e : s) n *= static_cast<std::size_t>(e);
  return n;
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  for (int e : shape_) {
    if (e < 1) {
      throw ShapeError("tensor extents must all be >= 1, got " +
                       shape_to_string(shape_));
    }
  }
  if (shape_.size() > 5) {
    throw ShapeError("tensor rank limited to 5, got " + shape_to_string(shape_));
  }
  data_.assign(shape_numel(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : Tensor(std::move(shape)) {
  if (data.size() != data_.size()) {
    throw ShapeError("data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_to_string(shape_));
  }
  data_ = std::move(data);
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

std::size_t Tensor::flat_index(std::initializer_list<int> idx) const {
  if (idx.size() != shape_.size()) {
    throw ShapeError("index rank " + std::to_string(idx.size()) +
                     " does not match tensor shape " + shape_to_string(shape_));
  }
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (int i : idx) {
    const int e = shape_[axis];
    if (i < 0 || i >= e) {
      throw ShapeError("index out of range for shape " + shape_to_string(shape_));
    }
    flat = flat * static_cast<std::size_t>(e) + static_cast<std::size_t>(i);
    ++axis;
  }
  return flat;
}

Tensor Tensor::reshaped(Shape new_shape) const {
  if (shape_numel(new_shape) != data_.size()) {
    throw ShapeError("reshape " + shape_to_string(shape_) + " -> " +
                     shape_to_string(new_shape) + " changes element count");
  }
  return Tensor(std::move(new_shape), data_);
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ShapeError("item() requires a single-element tensor, got " +
                     shape_to_string(shape_));
  }
  return data_[0];
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
}

// --- elementwise ---------------------------------------------------------

namespace {

template <class F>
Tensor map_binary(const Tensor& a, const Tensor& b, F f) {
  require_same_shape(a, b, "elementwise");
  Tensor out(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) po[i] = f(pa[i], pb[i]);
  return out;
}

template <class F>
Tensor map_unary(const Tensor& a, F f) {
  Tensor out(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) po[i] = f(pa[i]);
  return out;
}

[[noreturn]] void bad_arity(const char* what) {
  throw ShapeError(std::string("elementwise: op is not ") + what);
}

}  // namespace

Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b) {
  switch (op) {
    case EwOp::Add: return map_binary(a, b, [](double x, double y) { return x + y; });
    case EwOp::Sub: return map_binary(a, b, [](double x, double y) { return x - y; });
    case EwOp::Mul: return map_binary(a, b, [](double x, double y) { return x * y; });
    case EwOp::Div: return map_binary(a, b, [](double x, double y) { return x / y; });
    default: bad_arity("binary");
  }
}

Tensor elementwise(EwOp op, const Tensor& a, double b) {
  switch (op) {
    case EwOp::Add: return map_unary(a, [b](double x) { return x + b; });
    case EwOp::Sub: return map_unary(a, [b](double x) { return x - b; });
    case EwOp::Mul: return map_unary(a, [b](double x) { return x * b; });
    case EwOp::Div: return map_unary(a, [b](double x) { return x / b; });
    default: bad_arity("binary");
  }
}

Tensor elementwise(EwOp op, const Tensor& a) {
  switch (op) {
    case EwOp::Exp: return map_unary(a, [](double x) { return std::exp(x); });
    case EwOp::Log: return map_unary(a, [](double x) { return std::log(x); });
    case EwOp::Tanh: return map_unary(a, [](double x) { return std::tanh(x); });
    case EwOp::Square: return map_unary(a, [](double x) { return x * x; });
    default: bad_arity("unary");
  }
}

Tensor clip(const Tensor& a, double lo, double hi) {
  if (!(lo < hi)) {
    throw ShapeError("clip: lo must be < hi");
  }
  return map_unary(a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); });
}

// --- reductions ----------------------------------------------------------

double sum_all(const Tensor& a) {
  const double* p = a.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += p[i];
  return acc;
}

double mean_all(const Tensor& a) {
  return sum_all(a) / static_cast<double>(a.size());
}

namespace {

// Iterates the output index space of a reduction and folds the reduced axes.
template <class Init, class Fold, class Finish>
Tensor fold_reduce(const Tensor& a, const std::vector<bool>& reduced,
                   bool keep_dims, Init init, Fold fold, Finish finish) {
  const Shape& in = a.shape();
  const int rank = a.rank();
  Shape out_shape;
  for (int ax = 0; ax < rank; ++ax) {
    if (!reduced[static_cast<std::size_t>(ax)]) {
      out_shape.push_back(in[static_cast<std::size_t>(ax)]);
    } else if (keep_dims) {
      out_shape.push_back(1);
    }
  }
  if (out_shape.empty()) out_shape = {1};
  Tensor out(out_shape);

  std::vector<int> idx(static_cast<std::size_t>(rank), 0);
  const double* pa = a.data();
  const std::size_t total = a.size();
  std::vector<double> acc(out.size());
  std::vector<std::size_t> count(out.size(), 0);
  for (std::size_t i = 0; i < out.size(); ++i) acc[i] = init();

  // Odometer walk over the input; non-reduced coordinates form the output
  // flat index because they keep their relative order.
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::size_t out_flat = 0;
    std::size_t reduced_coord = 0;
    for (int ax = 0; ax < rank; ++ax) {
      const auto uax = static_cast<std::size_t>(ax);
      if (!reduced[uax]) {
        out_flat = out_flat * static_cast<std::size_t>(in[uax]) +
                   static_cast<std::size_t>(idx[uax]);
      } else {
        reduced_coord = static_cast<std::size_t>(idx[uax]);
      }
    }
    fold(acc[out_flat], count[out_flat], pa[flat], reduced_coord);
    for (int ax = rank - 1; ax >= 0; --ax) {
      const auto uax = static_cast<std::size_t>(ax);
      if (++idx[uax] < in[uax]) break;
      idx[uax] = 0;
    }
  }

  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = finish(acc[i], count[i]);
  }
  return out;
}

}  // namespace

Tensor reduce(ReduceOp op, const Tensor& a, const std::vector<int>& axes,
              bool keep_dims) {
  if (axes.empty()) return a;
  const int rank = a.rank();
  std::vector<bool> reduced(static_cast<std::size_t>(rank), false);
  for (int ax : axes) {
    if (ax < 0 || ax >= rank) {
      throw ShapeError("reduce: axis " + std::to_string(ax) +
                       " invalid for shape " + shape_to_string(a.shape()));
    }
    reduced[static_cast<std::size_t>(ax)] = true;
  }
  switch (op) {
    case ReduceOp::Sum:
      return fold_reduce(
          a, reduced, keep_dims, [] { return 0.0; },
          [](double& acc, std::size_t& n, double v, std::size_t) {
            acc += v;
            ++n;
          },
          [](double acc, std::size_t) { return acc; });
    case ReduceOp::Mean:
      return fold_reduce(
          a, reduced, keep_dims, [] { return 0.0; },
          [](double& acc, std::size_t& n, double v, std::size_t) {
            acc += v;
            ++n;
          },
          [](double acc, std::size_t n) { return acc / static_cast<double>(n); });
    case ReduceOp::Max:
      return fold_reduce(
          a, reduced, keep_dims,
          [] { return -std::numeric_limits<double>::infinity(); },
          [](double& acc, std::size_t& n, double v, std::size_t) {
            if (v > acc) acc = v;
            ++n;
          },
          [](double acc, std::size_t) { return acc; });
    case ReduceOp::Argmax: {
      if (axes.size() != 1) {
        throw ShapeError("reduce: argmax supports exactly one axis");
      }
      // First matching occurrence of the axis maximum wins.
      const int ax = axes[0];
      Tensor max_vals = reduce(ReduceOp::Max, a, axes, keep_dims);
      Tensor out(max_vals.shape());
      std::vector<bool> found(out.size(), false);
      std::vector<int> idx(static_cast<std::size_t>(rank), 0);
      const double* pa = a.data();
      const Shape& in = a.shape();
      for (std::size_t flat = 0; flat < a.size(); ++flat) {
        std::size_t out_flat = 0;
        std::size_t coord = 0;
        for (int i = 0; i < rank; ++i) {
          const auto ui = static_cast<std::size_t>(i);
          if (i != ax) {
            out_flat = out_flat * static_cast<std::size_t>(in[ui]) +
                       static_cast<std::size_t>(idx[ui]);
          } else {
            coord = static_cast<std::size_t>(idx[ui]);
          }
        }
        if (!found[out_flat] && pa[flat] == max_vals[out_flat]) {
          out[out_flat] = static_cast<double>(coord);
          found[out_flat] = true;
        }
        for (int i = rank - 1; i >= 0; --i) {
          const auto ui = static_cast<std::size_t>(i);
          if (++idx[ui] < in[ui]) break;
          idx[ui] = 0;
        }
      }
      return out;
    }
  }
  throw ShapeError("reduce: unknown op");
}

// --- threading -----------------------------------------------------------

namespace {

// Persistent worker pool. Ranges are fixed per call, so results never depend
// on scheduling; the pool only removes per-call thread spawn cost.
class WorkerPool {
 public:
  WorkerPool() {
    const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    const int extra = static_cast<int>(hw) - 1;
    for (int i = 0; i < extra; ++i) {
      threads_.emplace_back([this, i] { worker_loop(i); });
    }
  }

  ~WorkerPool() {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      stop_ = true;
    }
    start_cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  int lanes() const { return static_cast<int>(threads_.size()) + 1; }

  // Runs fn(lane) on every lane, lane 0 on the caller.
  void run(const std::function<void(int)>& fn) {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      job_ = &fn;
      ++generation_;
      pending_ = static_cast<int>(threads_.size());
    }
    start_cv_.notify_all();
    fn(0);
    std::unique_lock<std::mutex> lock(mutex_);
    done_cv_.wait(lock, [this] { return pending_ == 0; });
    job_ = nullptr;
  }

 private:
  void worker_loop(int index) {
    std::uint64_t seen = 0;
    for (;;) {
      const std::function<void(int)>* job = nullptr;
      {
        std::unique_lock<std::mutex> lock(mutex_);
        start_cv_.wait(lock, [&] { return stop_ || generation_ != seen; });
        if (stop_) return;
        seen = generation_;
        job = job_;
      }
      (*job)(index + 1);
      {
        std::lock_guard<std::mutex> lock(mutex_);
        if (--pending_ == 0) done_cv_.notify_all();
      }
    }
  }

  std::vector<std::thread> threads_;
  std::mutex mutex_;
  std::condition_variable start_cv_;
  std::condition_variable done_cv_;
  const std::function<void(int)>* job_ = nullptr;
  std::uint64_t generation_ = 0;
  int pending_ = 0;
  bool stop_ = false;
};

WorkerPool& pool() {
  static WorkerPool instance;
  return instance;
}

thread_local bool inside_pool_job = false;

}  // namespace

void parallel_for(int n, std::size_t work_per_item,
                  const std::function<void(int, int)>& fn) {
  WorkerPool& p = pool();
  const int lanes = p.lanes();
  const std::size_t total_work = static_cast<std::size_t>(n) * work_per_item;
  // Small jobs are cheaper inline than a pool handoff; nested calls run
  // inline because the pool is not reentrant.
  if (inside_pool_job || lanes < 2 || n < 2 || total_work < 100000) {
    fn(0, n);
    return;
  }
  const int workers = std::min(lanes, n);
  const int chunk = (n + workers - 1) / workers;
  p.run([&](int lane) {
    inside_pool_job = true;
    const int b = lane * chunk;
    const int e = std::min(n, b + chunk);
    if (b < e) fn(b, e);
    inside_pool_job = false;
  });
}

// --- conv3d --------------------------------------------------------------

namespace {

void check_conv_args(const Tensor& input, const Tensor& kernel, int stride,
                     int padding) {
  if (input.rank() != 4) {
    throw ShapeError("conv3d: input must be (C, D, H, W), got " +
                     shape_to_string(input.shape()));
  }
  if (kernel.rank() != 5) {
    throw ShapeError("conv3d: kernel must be (Co, Ci, k, k, k), got " +
                     shape_to_string(kernel.shape()));
  }
  if (kernel.extent(2) != kernel.extent(3) || kernel.extent(2) != kernel.extent(4)) {
    throw ShapeError("conv3d: kernel must be cubic, got " +
                     shape_to_string(kernel.shape()));
  }
  if (input.extent(0) != kernel.extent(1)) {
    throw ShapeError("conv3d: channel mismatch, input " +
                     shape_to_string(input.shape()) + " vs kernel " +
                     shape_to_string(kernel.shape()));
  }
  if (stride != 1 && stride != 2) {
    throw ShapeError("conv3d: stride must be 1 or 2");
  }
  if (padding < 0) {
    throw ShapeError("conv3d: padding must be >= 0");
  }
}

int conv_out_extent(int in, int k, int stride, int padding) {
  const int n = in + 2 * padding - k;
  if (n < 0) {
    throw ShapeError("conv3d: kernel larger than padded input");
  }
  return n / stride + 1;
}

}  // namespace

Tensor conv3d(const Tensor& input, const Tensor& kernel, int stride,
              int padding) {
  check_conv_args(input, kernel, stride, padding);
  const int ci_n = input.extent(0), d = input.extent(1), h = input.extent(2),
            w = input.extent(3);
  const int co_n = kernel.extent(0), k = kernel.extent(2);
  const int od_n = conv_out_extent(d, k, stride, padding);
  const int oh_n = conv_out_extent(h, k, stride, padding);
  const int ow_n = conv_out_extent(w, k, stride, padding);

  Tensor out({co_n, od_n, oh_n, ow_n});
  const double* in_p = input.data();
  const double* k_p = kernel.data();
  double* out_p = out.data();
  const std::size_t in_ch = static_cast<std::size_t>(d) * h * w;
  const std::size_t out_ch = static_cast<std::size_t>(od_n) * oh_n * ow_n;
  const std::size_t work =
      out_ch * static_cast<std::size_t>(ci_n) * static_cast<std::size_t>(k * k * k);

  parallel_for(co_n, work, [&](int co_begin, int co_end) {
    for (int co = co_begin; co < co_end; ++co) {
      double* out_c = out_p + static_cast<std::size_t>(co) * out_ch;
      for (int ci = 0; ci < ci_n; ++ci) {
        const double* in_c = in_p + static_cast<std::size_t>(ci) * in_ch;
        const double* k_c =
            k_p + (static_cast<std::size_t>(co) * ci_n + ci) *
                      static_cast<std::size_t>(k * k * k);
        for (int kd = 0; kd < k; ++kd) {
          for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
              const double wv = k_c[(kd * k + kh) * k + kw];
              if (wv == 0.0) continue;
              // Valid output ranges where the tap stays in bounds.
              for (int od = 0; od < od_n; ++od) {
                const int id = od * stride - padding + kd;
                if (id < 0 || id >= d) continue;
                for (int oh = 0; oh < oh_n; ++oh) {
                  const int ih = oh * stride - padding + kh;
                  if (ih < 0 || ih >= h) continue;
                  double* orow = out_c + (static_cast<std::size_t>(od) * oh_n + oh) * ow_n;
                  const double* irow =
                      in_c + (static_cast<std::size_t>(id) * h + ih) * w;
                  for (int ow = 0; ow < ow_n; ++ow) {
                    const int iw = ow * stride - padding + kw;
                    if (iw < 0 || iw >= w) continue;
                    orow[ow] += wv * irow[iw];
                  }
                }
              }
            }
          }
        }
      }
    }
  });
  return out;
}

Tensor conv3d_grad_input(const Tensor& grad_out, const Tensor& kernel,
                         const Shape& input_shape, int stride, int padding) {
  Tensor grad_in(input_shape);
  const int ci_n = input_shape[0], d = input_shape[1], h = input_shape[2],
            w = input_shape[3];
  const int co_n = kernel.extent(0), k = kernel.extent(2);
  const int od_n = grad_out.extent(1), oh_n = grad_out.extent(2),
            ow_n = grad_out.extent(3);
  const double* go_p = grad_out.data();
  const double* k_p = kernel.data();
  double* gi_p = grad_in.data();
  const std::size_t in_ch = static_cast<std::size_t>(d) * h * w;
  const std::size_t out_ch = static_cast<std::size_t>(od_n) * oh_n * ow_n;
  const std::size_t work =
      out_ch * static_cast<std::size_t>(co_n) * static_cast<std::size_t>(k * k * k);

  parallel_for(ci_n, work, [&](int ci_begin, int ci_end) {
    for (int ci = ci_begin; ci < ci_end; ++ci) {
      double* gi_c = gi_p + static_cast<std::size_t>(ci) * in_ch;
      for (int co = 0; co < co_n; ++co) {
        const double* go_c = go_p + static_cast<std::size_t>(co) * out_ch;
        const double* k_c =
            k_p + (static_cast<std::size_t>(co) * ci_n + ci) *
                      static_cast<std::size_t>(k * k * k);
        for (int kd = 0; kd < k; ++kd) {
          for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
              const double wv = k_c[(kd * k + kh) * k + kw];
              if (wv == 0.0) continue;
              for (int od = 0; od < od_n; ++od) {
                const int id = od * stride - padding + kd;
                if (id < 0 || id >= d) continue;
                for (int oh = 0; oh < oh_n; ++oh) {
                  const int ih = oh * stride - padding + kh;
                  if (ih < 0 || ih >= h) continue;
                  const double* grow =
                      go_c + (static_cast<std::size_t>(od) * oh_n + oh) * ow_n;
                  double* irow = gi_c + (static_cast<std::size_t>(id) * h + ih) * w;
                  for (int ow = 0; ow < ow_n; ++ow) {
                    const int iw = ow * stride - padding + kw;
                    if (iw < 0 || iw >= w) continue;
                    irow[iw] += wv * grow[ow];
                  }
                }
              }
            }
          }
        }
      }
    }
  });
  return grad_in;
}

Tensor conv3d_grad_kernel(const Tensor& grad_out, const Tensor& input,
                          const Shape& kernel_shape, int stride, int padding) {
  Tensor grad_k(kernel_shape);
  const int ci_n = input.extent(0), d = input.extent(1), h = input.extent(2),
            w = input.extent(3);
  const int co_n = kernel_shape[0], k = kernel_shape[2];
  const int od_n = grad_out.extent(1), oh_n = grad_out.extent(2),
            ow_n = grad_out.extent(3);
  const double* go_p = grad_out.data();
  const double* in_p = input.data();
  double* gk_p = grad_k.data();
  const std::size_t in_ch = static_cast<std::size_t>(d) * h * w;
  const std::size_t out_ch = static_cast<std::size_t>(od_n) * oh_n * ow_n;
  const std::size_t work =
      out_ch * static_cast<std::size_t>(ci_n) * static_cast<std::size_t>(k * k * k);

  parallel_for(co_n, work, [&](int co_begin, int co_end) {
    for (int co = co_begin; co < co_end; ++co) {
      const double* go_c = go_p + static_cast<std::size_t>(co) * out_ch;
      for (int ci = 0; ci < ci_n; ++ci) {
        const double* in_c = in_p + static_cast<std::size_t>(ci) * in_ch;
        double* gk_c = gk_p + (static_cast<std::size_t>(co) * ci_n + ci) *
                                  static_cast<std::size_t>(k * k * k);
        for (int kd = 0; kd < k; ++kd) {
          for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
              double acc = 0.0;
              for (int od = 0; od < od_n; ++od) {
                const int id = od * stride - padding + kd;
                if (id < 0 || id >= d) continue;
                for (int oh = 0; oh < oh_n; ++oh) {
                  const int ih = oh * stride - padding + kh;
                  if (ih < 0 || ih >= h) continue;
                  const double* grow =
                      go_c + (static_cast<std::size_t>(od) * oh_n + oh) * ow_n;
                  const double* irow =
                      in_c + (static_cast<std::size_t>(id) * h + ih) * w;
                  for (int ow = 0; ow < ow_n; ++ow) {
                    const int iw = ow * stride - padding + kw;
                    if (iw < 0 || iw >= w) continue;
                    acc += grow[ow] * irow[iw];
                  }
                }
              }
              gk_c[(kd * k + kh) * k + kw] = acc;
            }
          }
        }
      }
    }
  });
  return grad_k;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 4 || bias.rank() != 1 || bias.extent(0) != x.extent(0)) {
    throw ShapeError("add_channel_bias: x " + shape_to_string(x.shape()) +
                     " vs bias " + shape_to_string(bias.shape()));
  }
  Tensor out = x;
  const std::size_t ch = x.size() / static_cast<std::size_t>(x.extent(0));
  double* p = out.data();
  for (int c = 0; c < x.extent(0); ++c) {
    const double b = bias[static_cast<std::size_t>(c)];
    double* pc = p + static_cast<std::size_t>(c) * ch;
    for (std::size_t i = 0; i < ch; ++i) pc[i] += b;
  }
  return out;
}

Tensor channel_bias_grad(const Tensor& grad_out) {
  Tensor g({grad_out.extent(0)});
  const std::size_t ch = grad_out.size() / static_cast<std::size_t>(grad_out.extent(0));
  const double* p = grad_out.data();
  for (int c = 0; c < grad_out.extent(0); ++c) {
    double acc = 0.0;
    const double* pc = p + static_cast<std::size_t>(c) * ch;
    for (std::size_t i = 0; i < ch; ++i) acc += pc[i];
    g[static_cast<std::size_t>(c)] = acc;
  }
  return g;
}

// --- trilinear upsampling --------------------------------------------------

namespace {

struct LinearTap {
  int i0, i1;
  double w0, w1;
};

// align-corners-false source location, coordinate clamped to the borders
// before the floor so endpoints reproduce border values exactly.
LinearTap upsample_tap(int dst, int factor, int in_extent) {
  double src = (static_cast<double>(dst) + 0.5) / static_cast<double>(factor) - 0.5;
  src = std::min(std::max(src, 0.0), static_cast<double>(in_extent - 1));
  const int i0 = static_cast<int>(std::floor(src));
  const double frac = src - static_cast<double>(i0);
  LinearTap t;
  t.i0 = i0;
  t.i1 = std::min(i0 + 1, in_extent - 1);
  t.w0 = 1.0 - frac;
  t.w1 = frac;
  return t;
}

void check_spatial4(const Tensor& t, const char* op) {
  if (t.rank() != 4) {
    throw ShapeError(std::string(op) + ": expected (C, D, H, W), got " +
                     shape_to_string(t.shape()));
  }
}

}  // namespace

Tensor upsample_trilinear(const Tensor& input, int factor) {
  check_spatial4(input, "upsample_trilinear");
  if (factor < 2) {
    throw ShapeError("upsample_trilinear: factor must be >= 2");
  }
  const int c_n = input.extent(0), d = input.extent(1), h = input.extent(2),
            w = input.extent(3);
  const int od_n = d * factor, oh_n = h * factor, ow_n = w * factor;
  Tensor out({c_n, od_n, oh_n, ow_n});

  std::vector<LinearTap> td(static_cast<std::size_t>(od_n));
  std::vector<LinearTap> th(static_cast<std::size_t>(oh_n));
  std::vector<LinearTap> tw(static_cast<std::size_t>(ow_n));
  for (int i = 0; i < od_n; ++i) td[static_cast<std::size_t>(i)] = upsample_tap(i, factor, d);
  for (int i = 0; i < oh_n; ++i) th[static_cast<std::size_t>(i)] = upsample_tap(i, factor, h);
  for (int i = 0; i < ow_n; ++i) tw[static_cast<std::size_t>(i)] = upsample_tap(i, factor, w);

  const double* in_p = input.data();
  double* out_p = out.data();
  const std::size_t in_ch = static_cast<std::size_t>(d) * h * w;
  const std::size_t out_ch = static_cast<std::size_t>(od_n) * oh_n * ow_n;
  parallel_for(c_n, out_ch * 8, [&](int c_begin, int c_end) {
    for (int c = c_begin; c < c_end; ++c) {
      const double* in_c = in_p + static_cast<std::size_t>(c) * in_ch;
      double* out_c = out_p + static_cast<std::size_t>(c) * out_ch;
      for (int od = 0; od < od_n; ++od) {
        const LinearTap& a = td[static_cast<std::size_t>(od)];
        for (int oh = 0; oh < oh_n; ++oh) {
          const LinearTap& b = th[static_cast<std::size_t>(oh)];
          double* orow = out_c + (static_cast<std::size_t>(od) * oh_n + oh) * ow_n;
          const double* r00 = in_c + (static_cast<std::size_t>(a.i0) * h + b.i0) * w;
          const double* r01 = in_c + (static_cast<std::size_t>(a.i0) * h + b.i1) * w;
          const double* r10 = in_c + (static_cast<std::size_t>(a.i1) * h + b.i0) * w;
          const double* r11 = in_c + (static_cast<std::size_t>(a.i1) * h + b.i1) * w;
          for (int ow = 0; ow < ow_n; ++ow) {
            const LinearTap& cc = tw[static_cast<std::size_t>(ow)];
            const double v00 = r00[cc.i0] * cc.w0 + r00[cc.i1] * cc.w1;
            const double v01 = r01[cc.i0] * cc.w0 + r01[cc.i1] * cc.w1;
            const double v10 = r10[cc.i0] * cc.w0 + r10[cc.i1] * cc.w1;
            const double v11 = r11[cc.i0] * cc.w0 + r11[cc.i1] * cc.w1;
            orow[ow] = (v00 * b.w0 + v01 * b.w1) * a.w0 +
                       (v10 * b.w0 + v11 * b.w1) * a.w1;
          }
        }
      }
    }
  });
  return out;
}

Tensor upsample_trilinear_grad(const Tensor& grad_out, const Shape& input_shape,
                               int factor) {
  Tensor grad_in(input_shape);
  const int c_n = input_shape[0], d = input_shape[1], h = input_shape[2],
            w = input_shape[3];
  const int od_n = grad_out.extent(1), oh_n = grad_out.extent(2),
            ow_n = grad_out.extent(3);
  std::vector<LinearTap> td(static_cast<std::size_t>(od_n));
  std::vector<LinearTap> th(static_cast<std::size_t>(oh_n));
  std::vector<LinearTap> tw(static_cast<std::size_t>(ow_n));
  for (int i = 0; i < od_n; ++i) td[static_cast<std::size_t>(i)] = upsample_tap(i, factor, d);
  for (int i = 0; i < oh_n; ++i) th[static_cast<std::size_t>(i)] = upsample_tap(i, factor, h);
  for (int i = 0; i < ow_n; ++i) tw[static_cast<std::size_t>(i)] = upsample_tap(i, factor, w);

  const double* go_p = grad_out.data();
  double* gi_p = grad_in.data();
  const std::size_t in_ch = static_cast<std::size_t>(d) * h * w;
  const std::size_t out_ch = static_cast<std::size_t>(od_n) * oh_n * ow_n;
  parallel_for(c_n, out_ch * 8, [&](int c_begin, int c_end) {
    for (int c = c_begin; c < c_end; ++c) {
      const double* go_c = go_p + static_cast<std::size_t>(c) * out_ch;
      double* gi_c = gi_p + static_cast<std::size_t>(c) * in_ch;
      for (int od = 0; od < od_n; ++od) {
        const LinearTap& a = td[static_cast<std::size_t>(od)];
        for (int oh = 0; oh < oh_n; ++oh) {
          const LinearTap& b = th[static_cast<std::size_t>(oh)];
          const double* grow = go_c + (static_cast<std::size_t>(od) * oh_n + oh) * ow_n;
          for (int ow = 0; ow < ow_n; ++ow) {
            const LinearTap& cc = tw[static_cast<std::size_t>(ow)];
            const double g = grow[ow];
            if (g == 0.0) continue;
            gi_c[(static_cast<std::size_t>(a.i0) * h + b.i0) * w + cc.i0] += g * a.w0 * b.w0 * cc.w0;
            gi_c[(static_cast<std::size_t>(a.i0) * h + b.i0) * w + cc.i1] += g * a.w0 * b.w0 * cc.w1;
            gi_c[(static_cast<std::size_t>(a.i0) * h + b.i1) * w + cc.i0] += g * a.w0 * b.w1 * cc.w0;
            gi_c[(static_cast<std::size_t>(a.i0) * h + b.i1) * w + cc.i1] += g * a.w0 * b.w1 * cc.w1;
            gi_c[(static_cast<std::size_t>(a.i1) * h + b.i0) * w + cc.i0] += g * a.w1 * b.w0 * cc.w0;
            gi_c[(static_cast<std::size_t>(a.i1) * h + b.i0) * w + cc.i1] += g * a.w1 * b.w0 * cc.w1;
            gi_c[(static_cast<std::size_t>(a.i1) * h + b.i1) * w + cc.i0] += g * a.w1 * b.w1 * cc.w0;
            gi_c[(static_cast<std::size_t>(a.i1) * h + b.i1) * w + cc.i1] += g * a.w1 * b.w1 * cc.w1;
          }
        }
      }
    }
  });
  return grad_in;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  check_spatial4(a, "concat_channels");
  check_spatial4(b, "concat_channels");
  for (int ax = 1; ax < 4; ++ax) {
    if (a.extent(ax) != b.extent(ax)) {
      throw ShapeError("concat_channels: spatial mismatch " +
                       shape_to_string(a.shape()) + " vs " +
                       shape_to_string(b.shape()));
    }
  }
  Tensor out({a.extent(0) + b.extent(0), a.extent(1), a.extent(2), a.extent(3)});
  std::copy(a.data(), a.data() + a.size(), out.data());
  std::copy(b.data(), b.data() + b.size(), out.data() + a.size());
  return out;
}

Tensor axis_forward_diff(const Tensor& a, int axis) {
  check_spatial4(a, "axis_forward_diff");
  if (axis < 1 || axis > 3) {
    throw ShapeError("axis_forward_diff: axis must be 1..3");
  }
  if (a.extent(axis) < 2) {
    throw ShapeError("axis_forward_diff: extent < 2 along axis " +
                     std::to_string(axis) + " in " + shape_to_string(a.shape()));
  }
  Shape os = a.shape();
  os[static_cast<std::size_t>(axis)] -= 1;
  Tensor out(os);
  const int c_n = a.extent(0), d = a.extent(1), h = a.extent(2), w = a.extent(3);
  const double* p = a.data();
  double* q = out.data();
  std::size_t step = 1;  // flat stride of the differenced axis
  if (axis == 1) step = static_cast<std::size_t>(h) * w;
  if (axis == 2) step = static_cast<std::size_t>(w);
  const int od = os[1], oh = os[2], ow = os[3];
  for (int c = 0; c < c_n; ++c) {
    for (int z = 0; z < od; ++z) {
      for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
          const std::size_t src =
              ((static_cast<std::size_t>(c) * d + z) * h + y) * w + x;
          const std::size_t dst =
              ((static_cast<std::size_t>(c) * od + z) * oh + y) * ow + x;
          q[dst] = p[src + step] - p[src];
        }
      }
    }
  }
  return out;
}

Tensor axis_forward_diff_grad(const Tensor& grad_out, const Shape& input_shape,
                              int axis) {
  Tensor grad_in(input_shape);
  const int c_n = input_shape[0], d = input_shape[1], h = input_shape[2],
            w = input_shape[3];
  const int od = grad_out.extent(1), oh = grad_out.extent(2),
            ow = grad_out.extent(3);
  std::size_t step = 1;
  if (axis == 1) step = static_cast<std::size_t>(h) * w;
  if (axis == 2) step = static_cast<std::size_t>(w);
  const double* g = grad_out.data();
  double* q = grad_in.data();
  for (int c = 0; c < c_n; ++c) {
    for (int z = 0; z < od; ++z) {
      for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
          const std::size_t src =
              ((static_cast<std::size_t>(c) * d + z) * h + y) * w + x;
          const std::size_t dst =
              ((static_cast<std::size_t>(c) * od + z) * oh + y) * ow + x;
          q[src + step] += g[dst];
          q[src] -= g[dst];
        }
      }
    }
  }
  return grad_in;
}

}  // namespace latreg
