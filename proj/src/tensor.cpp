#include "axinv/tensor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace axinv {

namespace {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

thread_local Tape* g_active_tape = nullptr;

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
constexpr double kLayerNormEps = 1e-5;

int64_t checked_axis(const Shape& shape, int64_t axis, const char* op) {
  int64_t rank = static_cast<int64_t>(shape.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw ShapeError(std::string(op) + ": axis out of range for shape " +
                     shape_str(shape));
  }
  return axis;
}

// Decomposes iteration around one axis: out[outer][len][inner].
struct AxisSpan {
  int64_t outer;
  int64_t len;
  int64_t inner;
};

AxisSpan axis_span(const Shape& shape, int64_t axis) {
  AxisSpan s{1, shape[axis], 1};
  for (int64_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

std::vector<int64_t> row_major_strides(const Shape& shape) {
  std::vector<int64_t> strides(shape.size(), 1);
  for (int64_t i = static_cast<int64_t>(shape.size()) - 2; i >= 0; --i) {
    strides[i] = strides[i + 1] * shape[i + 1];
  }
  return strides;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

bool should_record(const Tensor& out) {
  return Tape::active() != nullptr && out.requires_grad();
}

}  // namespace

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

// ---- Tensor ----

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  for (int64_t e : shape) {
    if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
  auto data = std::make_shared<detail::TensorData>();
  data->values.assign(static_cast<size_t>(shape_numel(shape)), value);
  data->shape = std::move(shape);
  data->requires_grad = requires_grad;
  return Tensor(std::move(data));
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values,
                           bool requires_grad) {
  for (int64_t e : shape) {
    if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw ShapeError("value count " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  }
  auto data = std::make_shared<detail::TensorData>();
  data->shape = std::move(shape);
  data->values = std::move(values);
  data->requires_grad = requires_grad;
  return Tensor(std::move(data));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_values({1}, {value}, requires_grad);
}

int64_t Tensor::extent(int64_t axis) const {
  return shape()[checked_axis(shape(), axis, "extent")];
}

std::span<double> Tensor::grad() {
  detail::ensure_grad(*data_);
  return data_->grad;
}

void Tensor::zero_grad() {
  std::fill(data_->grad.begin(), data_->grad.end(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  }
  return data_->values[0];
}

bool Tensor::all_finite() const {
  for (double v : data_->values) {
    if (!std::isfinite(v)) return false;
  }
  for (double v : data_->grad) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor make_op_output(Shape shape, std::vector<double> values,
                      bool requires_grad) {
  Tensor t = Tensor::from_values(std::move(shape), std::move(values), requires_grad);
  return t;
}

// ---- Tape ----

Tape::Tape() {
  previous_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() noexcept { return g_active_tape; }

void Tape::record(const Tensor& output, std::function<void()> backward_fn) {
  auto data = output.unsafe_data();
  data->creator = this;
  nodes_.push_back(Node{std::move(data), std::move(backward_fn)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be a single element, got " +
                     shape_str(loss.shape()));
  }
  if (loss.unsafe_data()->creator != this) {
    throw ValueError("backward: loss was not recorded on this tape");
  }
  detail::ensure_grad(*loss.unsafe_data())[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output->grad.empty()) it->backward_fn();
  }
}

void Tape::clear() { nodes_.clear(); }

namespace detail {

std::vector<double>& ensure_grad(TensorData& t) {
  if (t.grad.empty()) t.grad.assign(t.values.size(), 0.0);
  return t.grad;
}

void accumulate_grad(TensorData& t, const double* src, int64_t n) {
  auto& g = ensure_grad(t);
  for (int64_t i = 0; i < n; ++i) g[i] += src[i];
}

}  // namespace detail

// ---- elementwise ----

namespace {

template <typename Fwd, typename Bwd>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd,
                 Bwd bwd) {
  check_same_shape(a, b, name);
  int64_t n = a.numel();
  std::vector<double> out(n);
  auto av = a.values();
  auto bv = b.values();
  for (int64_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i]);
  Tensor result = make_op_output(a.shape(), std::move(out),
                                 a.requires_grad() || b.requires_grad());
  if (should_record(result)) {
    auto ad = a.unsafe_data();
    auto bd = b.unsafe_data();
    auto rd = result.unsafe_data();
    Tape::active()->record(result, [ad, bd, rd, bwd, n]() {
      const auto& g = rd->grad;
      if (ad->requires_grad) {
        auto& ga = detail::ensure_grad(*ad);
        for (int64_t i = 0; i < n; ++i) {
          ga[i] += g[i] * bwd(/*wrt_a=*/true, ad->values[i], bd->values[i]);
        }
      }
      if (bd->requires_grad) {
        auto& gb = detail::ensure_grad(*bd);
        for (int64_t i = 0; i < n; ++i) {
          gb[i] += g[i] * bwd(/*wrt_a=*/false, ad->values[i], bd->values[i]);
        }
      }
    });
  }
  return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; },
      [](bool, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](bool wrt_a, double, double) { return wrt_a ? 1.0 : -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](bool wrt_a, double x, double y) { return wrt_a ? y : x; });
}

Tensor scale(const Tensor& a, double s) {
  int64_t n = a.numel();
  std::vector<double> out(n);
  auto av = a.values();
  for (int64_t i = 0; i < n; ++i) out[i] = av[i] * s;
  Tensor result = make_op_output(a.shape(), std::move(out), a.requires_grad());
  if (should_record(result)) {
    auto ad = a.unsafe_data();
    auto rd = result.unsafe_data();
    Tape::active()->record(result, [ad, rd, s, n]() {
      auto& ga = detail::ensure_grad(*ad);
      for (int64_t i = 0; i < n; ++i) ga[i] += rd->grad[i] * s;
    });
  }
  return result;
}

Tensor add_scalar(const Tensor& a, double s) {
  int64_t n = a.numel();
  std::vector<double> out(n);
  auto av = a.values();
  for (int64_t i = 0; i < n; ++i) out[i] = av[i] + s;
  Tensor result = make_op_output(a.shape(), std::move(out), a.requires_grad());
  if (should_record(result)) {
    auto ad = a.unsafe_data();
    auto rd = result.unsafe_data();
    Tape::active()->record(result, [ad, rd, n]() {
      detail::accumulate_grad(*ad, rd->grad.data(), n);
    });
  }
  return result;
}

Tensor gelu(const Tensor& x) {
  int64_t n = x.numel();
  std::vector<double> out(n);
  auto xv = x.values();
  for (int64_t i = 0; i < n; ++i) {
    double cdf = 0.5 * (1.0 + std::erf(xv[i] * kInvSqrt2));
    out[i] = xv[i] * cdf;
  }
  Tensor result = make_op_output(x.shape(), std::move(out), x.requires_grad());
  if (should_record(result)) {
    auto xd = x.unsafe_data();
    auto rd = result.unsafe_data();
    Tape::active()->record(result, [xd, rd, n]() {
      auto& gx = detail::ensure_grad(*xd);
      for (int64_t i = 0; i < n; ++i) {
        double v = xd->values[i];
        double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        gx[i] += rd->grad[i] * (cdf + v * pdf);
      }
    });
  }
  return result;
}

Tensor softmax(const Tensor& x, int64_t axis) {
  axis = checked_axis(x.shape(), axis, "softmax");
  AxisSpan s = axis_span(x.shape(), axis);
  std::vector<double> out(x.numel());
  auto xv = x.values();
  for (int64_t o = 0; o < s.outer; ++o) {
    for (int64_t j = 0; j < s.inner; ++j) {
      int64_t base = o * s.len * s.inner + j;
      double mx = xv[base];
      for (int64_t i = 1; i < s.len; ++i) {
        mx = std::max(mx, xv[base + i * s.inner]);
      }
      double total = 0.0;
      for (int64_t i = 0; i < s.len; ++i) {
        double e = std::exp(xv[base + i * s.inner] - mx);
        out[base + i * s.inner] = e;
        total += e;
      }
      double inv = 1.0 / total;
      for (int64_t i = 0; i < s.len; ++i) out[base + i * s.inner] *= inv;
    }
  }
  Tensor result = make_op_output(x.shape(), std::move(out), x.requires_grad());
  if (should_record(result)) {
    auto xd = x.unsafe_data();
    auto rd = result.unsafe_data();
    Tape::active()->record(result, [xd, rd, s]() {
      auto& gx = detail::ensure_grad(*xd);
      const auto& y = rd->values;
      const auto& gy = rd->grad;
      for (int64_t o = 0; o < s.outer; ++o) {
        for (int64_t j = 0; j < s.inner; ++j) {
          int64_t base = o * s.len * s.inner + j;
          double dot = 0.0;
          for (int64_t i = 0; i < s.len; ++i) {
            int64_t k = base + i * s.inner;
            dot += gy[k] * y[k];
          }
          for (int64_t i = 0; i < s.len; ++i) {
            int64_t k = base + i * s.inner;
            gx[k] += (gy[k] - dot) * y[k];
          }
        }
      }
    });
  }
  return result;
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  Tensor result = make_op_output({1}, {total}, x.requires_grad());
  if (should_record(result)) {
    auto xd = x.unsafe_data();
    auto rd = result.unsafe_data();
    Tape::active()->record(result, [xd, rd]() {
      double g = rd->grad[0];
      auto& gx = detail::ensure_grad(*xd);
      for (double& v : gx) v += g;
    });
  }
  return result;
}

Tensor mean(const Tensor& x, int64_t axis) {
  axis = checked_axis(x.shape(), axis, "mean");
  AxisSpan s = axis_span(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + axis);
  if (out_shape.empty()) out_shape = {1};
  std::vector<double> out(s.outer * s.inner, 0.0);
  auto xv = x.values();
  double inv_len = 1.0 / static_cast<double>(s.len);
  for (int64_t o = 0; o < s.outer; ++o) {
    for (int64_t i = 0; i < s.len; ++i) {
      for (int64_t j = 0; j < s.inner; ++j) {
        out[o * s.inner + j] += xv[(o * s.len + i) * s.inner + j];
      }
    }
  }
  for (double& v : out) v *= inv_len;
  Tensor result =
      make_op_output(std::move(out_shape), std::move(out), x.requires_grad());
  if (should_record(result)) {
    auto xd = x.unsafe_data();
    auto rd = result.unsafe_data();
    Tape::active()->record(result, [xd, rd, s, inv_len]() {
      auto& gx = detail::ensure_grad(*xd);
      for (int64_t o = 0; o < s.outer; ++o) {
        for (int64_t i = 0; i < s.len; ++i) {
          for (int64_t j = 0; j < s.inner; ++j) {
            gx[(o * s.len + i) * s.inner + j] +=
                rd->grad[o * s.inner + j] * inv_len;
          }
        }
      }
    });
  }
  return result;
}

Tensor mse(const Tensor& pred, const Tensor& target) {
  check_same_shape(pred, target, "mse");
  int64_t n = pred.numel();
  auto pv = pred.values();
  auto tv = target.values();
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double d = pv[i] - tv[i];
    total += d * d;
  }
  Tensor result = make_op_output(
      {1}, {total / static_cast<double>(n)},
      pred.requires_grad() || target.requires_grad());
  if (should_record(result)) {
    auto pd = pred.unsafe_data();
    auto td = target.unsafe_data();
    auto rd = result.unsafe_data();
    Tape::active()->record(result, [pd, td, rd, n]() {
      double g = rd->grad[0] * 2.0 / static_cast<double>(n);
      if (pd->requires_grad) {
        auto& gp = detail::ensure_grad(*pd);
        for (int64_t i = 0; i < n; ++i) {
          gp[i] += g * (pd->values[i] - td->values[i]);
        }
      }
      if (td->requires_grad) {
        auto& gt = detail::ensure_grad(*td);
        for (int64_t i = 0; i < n; ++i) {
          gt[i] -= g * (pd->values[i] - td->values[i]);
        }
      }
    });
  }
  return result;
}

// ---- shape ops ----

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  Tensor result =
      make_op_output(std::move(shape), std::move(out), x.requires_grad());
  if (should_record(result)) {
    auto xd = x.unsafe_data();
    auto rd = result.unsafe_data();
    int64_t n = x.numel();
    Tape::active()->record(result, [xd, rd, n]() {
      detail::accumulate_grad(*xd, rd->grad.data(), n);
    });
  }
  return result;
}

Tensor permute(const Tensor& x, const std::vector<int64_t>& dims) {
  int64_t rank = x.rank();
  if (static_cast<int64_t>(dims.size()) != rank) {
    throw ShapeError("permute: dims size must equal rank");
  }
  std::vector<bool> seen(rank, false);
  for (int64_t d : dims) {
    if (d < 0 || d >= rank || seen[d]) throw ShapeError("permute: invalid dims");
    seen[d] = true;
  }
  Shape out_shape(rank);
  for (int64_t i = 0; i < rank; ++i) out_shape[i] = x.shape()[dims[i]];
  auto in_strides = row_major_strides(x.shape());
  auto out_strides = row_major_strides(out_shape);
  // map_strides[i]: input stride of output axis i
  std::vector<int64_t> map_strides(rank);
  for (int64_t i = 0; i < rank; ++i) map_strides[i] = in_strides[dims[i]];

  int64_t n = x.numel();
  std::vector<double> out(n);
  auto xv = x.values();
  std::vector<int64_t> idx(rank, 0);
  int64_t src = 0;
  for (int64_t flat = 0; flat < n; ++flat) {
    out[flat] = xv[src];
    // odometer increment over the output index space
    for (int64_t a = rank - 1; a >= 0; --a) {
      idx[a]++;
      src += map_strides[a];
      if (idx[a] < out_shape[a]) break;
      src -= map_strides[a] * out_shape[a];
      idx[a] = 0;
    }
  }
  Tensor result =
      make_op_output(std::move(out_shape), std::move(out), x.requires_grad());
  if (should_record(result)) {
    auto xd = x.unsafe_data();
    auto rd = result.unsafe_data();
    Shape oshape = result.shape();
    Tape::active()->record(result, [xd, rd, map_strides, oshape, n, rank]() {
      auto& gx = detail::ensure_grad(*xd);
      std::vector<int64_t> idx(rank, 0);
      int64_t src = 0;
      for (int64_t flat = 0; flat < n; ++flat) {
        gx[src] += rd->grad[flat];
        for (int64_t a = rank - 1; a >= 0; --a) {
          idx[a]++;
          src += map_strides[a];
          if (idx[a] < oshape[a]) break;
          src -= map_strides[a] * oshape[a];
          idx[a] = 0;
        }
      }
    });
  }
  return result;
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  int64_t rank = x.rank();
  if (static_cast<int64_t>(shape.size()) != rank) {
    throw ShapeError("broadcast_to: rank mismatch " + shape_str(x.shape()) +
                     " vs " + shape_str(shape));
  }
  for (int64_t i = 0; i < rank; ++i) {
    if (x.shape()[i] != shape[i] && x.shape()[i] != 1) {
      throw ShapeError("broadcast_to: cannot expand " + shape_str(x.shape()) +
                       " to " + shape_str(shape));
    }
  }
  auto in_strides = row_major_strides(x.shape());
  std::vector<int64_t> eff_strides(rank);
  for (int64_t i = 0; i < rank; ++i) {
    eff_strides[i] = (x.shape()[i] == 1 && shape[i] != 1) ? 0 : in_strides[i];
  }
  int64_t n = shape_numel(shape);
  std::vector<double> out(n);
  auto xv = x.values();
  std::vector<int64_t> idx(rank, 0);
  int64_t src = 0;
  for (int64_t flat = 0; flat < n; ++flat) {
    out[flat] = xv[src];
    for (int64_t a = rank - 1; a >= 0; --a) {
      idx[a]++;
      src += eff_strides[a];
      if (idx[a] < shape[a]) break;
      src -= eff_strides[a] * shape[a];
      idx[a] = 0;
    }
  }
  Tensor result = make_op_output(shape, std::move(out), x.requires_grad());
  if (should_record(result)) {
    auto xd = x.unsafe_data();
    auto rd = result.unsafe_data();
    Shape oshape = shape;
    Tape::active()->record(result, [xd, rd, eff_strides, oshape, n, rank]() {
      auto& gx = detail::ensure_grad(*xd);
      std::vector<int64_t> idx(rank, 0);
      int64_t src = 0;
      for (int64_t flat = 0; flat < n; ++flat) {
        gx[src] += rd->grad[flat];
        for (int64_t a = rank - 1; a >= 0; --a) {
          idx[a]++;
          src += eff_strides[a];
          if (idx[a] < oshape[a]) break;
          src -= eff_strides[a] * oshape[a];
          idx[a] = 0;
        }
      }
    });
  }
  return result;
}

Tensor slice(const Tensor& x, int64_t axis, int64_t start, int64_t length) {
  axis = checked_axis(x.shape(), axis, "slice");
  if (start < 0 || length <= 0 || start + length > x.shape()[axis]) {
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + length) + ") out of bounds for " +
                     shape_str(x.shape()));
  }
  AxisSpan s = axis_span(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::vector<double> out(s.outer * length * s.inner);
  auto xv = x.values();
  for (int64_t o = 0; o < s.outer; ++o) {
    const double* src = xv.data() + (o * s.len + start) * s.inner;
    double* dst = out.data() + o * length * s.inner;
    std::copy(src, src + length * s.inner, dst);
  }
  Tensor result =
      make_op_output(std::move(out_shape), std::move(out), x.requires_grad());
  if (should_record(result)) {
    auto xd = x.unsafe_data();
    auto rd = result.unsafe_data();
    Tape::active()->record(result, [xd, rd, s, start, length]() {
      auto& gx = detail::ensure_grad(*xd);
      for (int64_t o = 0; o < s.outer; ++o) {
        const double* src = rd->grad.data() + o * length * s.inner;
        double* dst = gx.data() + (o * s.len + start) * s.inner;
        for (int64_t i = 0; i < length * s.inner; ++i) dst[i] += src[i];
      }
    });
  }
  return result;
}

Tensor concat(const std::vector<Tensor>& parts, int64_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  axis = checked_axis(parts[0].shape(), axis, "concat");
  Shape out_shape = parts[0].shape();
  int64_t total_len = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    Shape s = p.shape();
    if (s.size() != out_shape.size()) throw ShapeError("concat: rank mismatch");
    for (size_t i = 0; i < s.size(); ++i) {
      if (static_cast<int64_t>(i) != axis && s[i] != out_shape[i]) {
        throw ShapeError("concat: extent mismatch off-axis");
      }
    }
    total_len += s[axis];
    rg = rg || p.requires_grad();
  }
  out_shape[axis] = total_len;
  AxisSpan os = axis_span(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  int64_t offset = 0;
  for (const Tensor& p : parts) {
    int64_t len = p.shape()[axis];
    auto pv = p.values();
    for (int64_t o = 0; o < os.outer; ++o) {
      const double* src = pv.data() + o * len * os.inner;
      double* dst = out.data() + (o * os.len + offset) * os.inner;
      std::copy(src, src + len * os.inner, dst);
    }
    offset += len;
  }
  Tensor result = make_op_output(out_shape, std::move(out), rg);
  if (should_record(result)) {
    std::vector<std::shared_ptr<detail::TensorData>> pd;
    std::vector<int64_t> lens;
    for (const Tensor& p : parts) {
      pd.push_back(p.unsafe_data());
      lens.push_back(p.shape()[axis]);
    }
    auto rd = result.unsafe_data();
    Tape::active()->record(result, [pd, lens, rd, os]() {
      int64_t offset = 0;
      for (size_t k = 0; k < pd.size(); ++k) {
        int64_t len = lens[k];
        if (pd[k]->requires_grad) {
          auto& gp = detail::ensure_grad(*pd[k]);
          for (int64_t o = 0; o < os.outer; ++o) {
            const double* src = rd->grad.data() + (o * os.len + offset) * os.inner;
            double* dst = gp.data() + o * len * os.inner;
            for (int64_t i = 0; i < len * os.inner; ++i) dst[i] += src[i];
          }
        }
        offset += len;
      }
    });
  }
  return result;
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  }
  int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n);
  {
    ConstMapMat A(a.values().data(), m, k);
    ConstMapMat B(b.values().data(), k, n);
    MapMat C(out.data(), m, n);
    C.noalias() = A * B;
  }
  Tensor result = make_op_output({m, n}, std::move(out),
                                 a.requires_grad() || b.requires_grad());
  if (should_record(result)) {
    auto ad = a.unsafe_data();
    auto bd = b.unsafe_data();
    auto rd = result.unsafe_data();
    Tape::active()->record(result, [ad, bd, rd, m, k, n]() {
      ConstMapMat G(rd->grad.data(), m, n);
      if (ad->requires_grad) {
        ConstMapMat B(bd->values.data(), k, n);
        MapMat GA(detail::ensure_grad(*ad).data(), m, k);
        GA.noalias() += G * B.transpose();
      }
      if (bd->requires_grad) {
        ConstMapMat A(ad->values.data(), m, k);
        MapMat GB(detail::ensure_grad(*bd).data(), k, n);
        GB.noalias() += A.transpose() * G;
      }
    });
  }
  return result;
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] ||
      a.shape()[2] != b.shape()[1]) {
    throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  }
  int64_t bs = a.shape()[0], m = a.shape()[1], k = a.shape()[2],
          n = b.shape()[2];
  std::vector<double> out(bs * m * n);
  for (int64_t i = 0; i < bs; ++i) {
    ConstMapMat A(a.values().data() + i * m * k, m, k);
    ConstMapMat B(b.values().data() + i * k * n, k, n);
    MapMat C(out.data() + i * m * n, m, n);
    C.noalias() = A * B;
  }
  Tensor result = make_op_output({bs, m, n}, std::move(out),
                                 a.requires_grad() || b.requires_grad());
  if (should_record(result)) {
    auto ad = a.unsafe_data();
    auto bd = b.unsafe_data();
    auto rd = result.unsafe_data();
    Tape::active()->record(result, [ad, bd, rd, bs, m, k, n]() {
      for (int64_t i = 0; i < bs; ++i) {
        ConstMapMat G(rd->grad.data() + i * m * n, m, n);
        if (ad->requires_grad) {
          ConstMapMat B(bd->values.data() + i * k * n, k, n);
          MapMat GA(detail::ensure_grad(*ad).data() + i * m * k, m, k);
          GA.noalias() += G * B.transpose();
        }
        if (bd->requires_grad) {
          ConstMapMat A(ad->values.data() + i * m * k, m, k);
          MapMat GB(detail::ensure_grad(*bd).data() + i * k * n, k, n);
          GB.noalias() += A.transpose() * G;
        }
      }
    });
  }
  return result;
}

// ---- conv ----

namespace {

struct ConvGeom {
  int64_t batch;     // product of leading axes
  int64_t c_in;
  int64_t c_out;
  int64_t in_h, in_w;    // in_h=1 for 1D
  int64_t k_h, k_w;      // k_h=1 for 1D
  int64_t out_h, out_w;
  int64_t stride, padding;
  Shape out_shape;
};

ConvGeom conv_geometry(const Tensor& x, const Tensor& kernel, int dims,
                       int64_t stride, int64_t padding) {
  if (dims != 1 && dims != 2) throw ValueError("conv: dims must be 1 or 2");
  if (stride < 1) throw ValueError("conv: stride must be >= 1");
  if (padding < 0) throw ValueError("conv: padding must be >= 0");
  if (x.rank() < dims + 1) {
    throw ShapeError("conv: input rank too small for " + std::to_string(dims) +
                     "D conv: " + shape_str(x.shape()));
  }
  if (kernel.rank() != dims + 2) {
    throw ShapeError("conv: kernel must have rank " + std::to_string(dims + 2) +
                     ", got " + shape_str(kernel.shape()));
  }
  ConvGeom g{};
  g.stride = stride;
  g.padding = padding;
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  int64_t spatial_start = x.rank() - dims;
  g.c_in = xs[spatial_start - 1];
  g.batch = 1;
  for (int64_t i = 0; i < spatial_start - 1; ++i) g.batch *= xs[i];
  g.c_out = ks[0];
  if (ks[1] != g.c_in) {
    throw ShapeError("conv: channel mismatch, input has " +
                     std::to_string(g.c_in) + ", kernel expects " +
                     std::to_string(ks[1]));
  }
  if (dims == 1) {
    g.in_h = 1;
    g.in_w = xs[spatial_start];
    g.k_h = 1;
    g.k_w = ks[2];
  } else {
    g.in_h = xs[spatial_start];
    g.in_w = xs[spatial_start + 1];
    g.k_h = ks[2];
    g.k_w = ks[3];
  }
  int64_t padded_h = g.in_h + (dims == 2 ? 2 * padding : 0);
  int64_t padded_w = g.in_w + 2 * padding;
  if (g.k_h > padded_h || g.k_w > padded_w) {
    throw ShapeError("conv: kernel " + shape_str(kernel.shape()) +
                     " larger than padded input " + shape_str(x.shape()));
  }
  g.out_h = dims == 2 ? (padded_h - g.k_h) / stride + 1 : 1;
  g.out_w = (padded_w - g.k_w) / stride + 1;
  g.out_shape.assign(xs.begin(), xs.begin() + (spatial_start - 1));
  g.out_shape.push_back(g.c_out);
  if (dims == 2) g.out_shape.push_back(g.out_h);
  g.out_shape.push_back(g.out_w);
  return g;
}

}  // namespace

Tensor conv(const Tensor& x, const Tensor& kernel, int dims, int64_t stride,
            int64_t padding) {
  ConvGeom g = conv_geometry(x, kernel, dims, stride, padding);
  int64_t pad_h = dims == 2 ? g.padding : 0;
  std::vector<double> out(shape_numel(g.out_shape), 0.0);
  auto xv = x.values();
  auto kv = kernel.values();
  const int64_t in_plane = g.in_h * g.in_w;
  const int64_t out_plane = g.out_h * g.out_w;
  const int64_t k_plane = g.k_h * g.k_w;
  for (int64_t b = 0; b < g.batch; ++b) {
    const double* xb = xv.data() + b * g.c_in * in_plane;
    double* ob = out.data() + b * g.c_out * out_plane;
    for (int64_t co = 0; co < g.c_out; ++co) {
      const double* kc = kv.data() + co * g.c_in * k_plane;
      for (int64_t oy = 0; oy < g.out_h; ++oy) {
        for (int64_t ox = 0; ox < g.out_w; ++ox) {
          double acc = 0.0;
          for (int64_t ci = 0; ci < g.c_in; ++ci) {
            const double* xc = xb + ci * in_plane;
            const double* kk = kc + ci * k_plane;
            for (int64_t ky = 0; ky < g.k_h; ++ky) {
              int64_t iy = oy * g.stride - pad_h + ky;
              if (iy < 0 || iy >= g.in_h) continue;
              for (int64_t kx = 0; kx < g.k_w; ++kx) {
                int64_t ix = ox * g.stride - g.padding + kx;
                if (ix < 0 || ix >= g.in_w) continue;
                acc += xc[iy * g.in_w + ix] * kk[ky * g.k_w + kx];
              }
            }
          }
          ob[co * out_plane + oy * g.out_w + ox] = acc;
        }
      }
    }
  }
  Tensor result = make_op_output(g.out_shape, std::move(out),
                                 x.requires_grad() || kernel.requires_grad());
  if (should_record(result)) {
    auto xd = x.unsafe_data();
    auto kd = kernel.unsafe_data();
    auto rd = result.unsafe_data();
    Tape::active()->record(result, [xd, kd, rd, g, pad_h]() {
      const int64_t in_plane = g.in_h * g.in_w;
      const int64_t out_plane = g.out_h * g.out_w;
      const int64_t k_plane = g.k_h * g.k_w;
      const bool need_x = xd->requires_grad;
      const bool need_k = kd->requires_grad;
      auto* gx = need_x ? detail::ensure_grad(*xd).data() : nullptr;
      auto* gk = need_k ? detail::ensure_grad(*kd).data() : nullptr;
      for (int64_t b = 0; b < g.batch; ++b) {
        const double* xb = xd->values.data() + b * g.c_in * in_plane;
        const double* gob = rd->grad.data() + b * g.c_out * out_plane;
        for (int64_t co = 0; co < g.c_out; ++co) {
          const double* kc = kd->values.data() + co * g.c_in * k_plane;
          for (int64_t oy = 0; oy < g.out_h; ++oy) {
            for (int64_t ox = 0; ox < g.out_w; ++ox) {
              double go = gob[co * out_plane + oy * g.out_w + ox];
              if (go == 0.0) continue;
              for (int64_t ci = 0; ci < g.c_in; ++ci) {
                const double* xc = xb + ci * in_plane;
                const double* kk = kc + ci * k_plane;
                for (int64_t ky = 0; ky < g.k_h; ++ky) {
                  int64_t iy = oy * g.stride - pad_h + ky;
                  if (iy < 0 || iy >= g.in_h) continue;
                  for (int64_t kx = 0; kx < g.k_w; ++kx) {
                    int64_t ix = ox * g.stride - g.padding + kx;
                    if (ix < 0 || ix >= g.in_w) continue;
                    if (need_x) {
                      gx[b * g.c_in * in_plane + ci * in_plane + iy * g.in_w + ix] +=
                          go * kk[ky * g.k_w + kx];
                    }
                    if (need_k) {
                      gk[co * g.c_in * k_plane + ci * k_plane + ky * g.k_w + kx] +=
                          go * xc[iy * g.in_w + ix];
                    }
                  }
                }
              }
            }
          }
        }
      }
    });
  }
  return result;
}

// ---- layernorm ----

Tensor layernorm(const Tensor& x, int64_t axis, const Tensor& gain,
                 const Tensor& bias) {
  axis = checked_axis(x.shape(), axis, "layernorm");
  AxisSpan s = axis_span(x.shape(), axis);
  if (gain.numel() != s.len || bias.numel() != s.len) {
    throw ShapeError("layernorm: gain/bias must have extent " +
                     std::to_string(s.len));
  }
  int64_t n = x.numel();
  std::vector<double> out(n);
  std::vector<double> xhat(n);
  auto xv = x.values();
  auto gv = gain.values();
  auto bv = bias.values();
  double inv_len = 1.0 / static_cast<double>(s.len);
  for (int64_t o = 0; o < s.outer; ++o) {
    for (int64_t j = 0; j < s.inner; ++j) {
      int64_t base = o * s.len * s.inner + j;
      double mu = 0.0;
      for (int64_t i = 0; i < s.len; ++i) mu += xv[base + i * s.inner];
      mu *= inv_len;
      double var = 0.0;
      for (int64_t i = 0; i < s.len; ++i) {
        double d = xv[base + i * s.inner] - mu;
        var += d * d;
      }
      var *= inv_len;
      double inv_std = 1.0 / std::sqrt(var + kLayerNormEps);
      for (int64_t i = 0; i < s.len; ++i) {
        int64_t k = base + i * s.inner;
        double h = (xv[k] - mu) * inv_std;
        xhat[k] = h;
        out[k] = gv[i] * h + bv[i];
      }
    }
  }
  bool rg = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
  Tensor result = make_op_output(x.shape(), std::move(out), rg);
  if (should_record(result)) {
    auto xd = x.unsafe_data();
    auto gd = gain.unsafe_data();
    auto bd = bias.unsafe_data();
    auto rd = result.unsafe_data();
    auto xhat_ptr = std::make_shared<std::vector<double>>(std::move(xhat));
    auto xv2 = xd;  // keep alive
    Tape::active()->record(result, [xd, gd, bd, rd, xhat_ptr, s, inv_len]() {
      const auto& xh = *xhat_ptr;
      const auto& gy = rd->grad;
      const auto& gv = gd->values;
      double* gx = xd->requires_grad ? detail::ensure_grad(*xd).data() : nullptr;
      double* gg = gd->requires_grad ? detail::ensure_grad(*gd).data() : nullptr;
      double* gb = bd->requires_grad ? detail::ensure_grad(*bd).data() : nullptr;
      for (int64_t o = 0; o < s.outer; ++o) {
        for (int64_t j = 0; j < s.inner; ++j) {
          int64_t base = o * s.len * s.inner + j;
          if (gg || gb) {
            for (int64_t i = 0; i < s.len; ++i) {
              int64_t k = base + i * s.inner;
              if (gg) gg[i] += gy[k] * xh[k];
              if (gb) gb[i] += gy[k];
            }
          }
          if (gx) {
            // recover inv_std from x and xhat: xhat = (x - mu)*inv_std
            double mu = 0.0;
            for (int64_t i = 0; i < s.len; ++i) mu += xd->values[base + i * s.inner];
            mu *= inv_len;
            double var = 0.0;
            for (int64_t i = 0; i < s.len; ++i) {
              double d = xd->values[base + i * s.inner] - mu;
              var += d * d;
            }
            var *= inv_len;
            double inv_std = 1.0 / std::sqrt(var + kLayerNormEps);
            double mean_dh = 0.0, mean_dh_xh = 0.0;
            for (int64_t i = 0; i < s.len; ++i) {
              int64_t k = base + i * s.inner;
              double dh = gy[k] * gv[i];
              mean_dh += dh;
              mean_dh_xh += dh * xh[k];
            }
            mean_dh *= inv_len;
            mean_dh_xh *= inv_len;
            for (int64_t i = 0; i < s.len; ++i) {
              int64_t k = base + i * s.inner;
              double dh = gy[k] * gv[i];
              gx[k] += inv_std * (dh - mean_dh - xh[k] * mean_dh_xh);
            }
          }
        }
      }
    });
  }
  return result;
}

// ---- dropout ----

Tensor dropout(const Tensor& x, double rate, Mode mode, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ValueError("dropout: rate must lie in [0,1), got " +
                     std::to_string(rate));
  }
  if (mode == Mode::kEval || rate == 0.0) return x;
  int64_t n = x.numel();
  double keep = 1.0 - rate;
  double inv_keep = 1.0 / keep;
  auto mask = std::make_shared<std::vector<double>>(n);
  std::vector<double> out(n);
  auto xv = x.values();
  for (int64_t i = 0; i < n; ++i) {
    double m = rng.uniform() < rate ? 0.0 : inv_keep;
    (*mask)[i] = m;
    out[i] = xv[i] * m;
  }
  Tensor result = make_op_output(x.shape(), std::move(out), x.requires_grad());
  if (should_record(result)) {
    auto xd = x.unsafe_data();
    auto rd = result.unsafe_data();
    Tape::active()->record(result, [xd, rd, mask, n]() {
      auto& gx = detail::ensure_grad(*xd);
      for (int64_t i = 0; i < n; ++i) gx[i] += rd->grad[i] * (*mask)[i];
    });
  }
  return result;
}

}  // namespace axinv
