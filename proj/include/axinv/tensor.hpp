#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "axinv/common.hpp"

namespace axinv {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

namespace detail {
struct TensorData {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until first accumulation
  Tape* creator = nullptr;   // tape that recorded the producing op, if any
};
}  // namespace detail

/// Dense 64-bit tensor handle with reverse-mode autodiff.
///
/// A Tensor is a value-semantic handle to shared storage. Storage is
/// immutable after creation except for the grad buffer, which backward
/// passes accumulate into (sum semantics; call zero_grad between steps).
/// Ops record backward rules onto the thread's active Tape, if any.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return data_->shape; }
  int64_t rank() const { return static_cast<int64_t>(data_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(data_->values.size()); }
  int64_t extent(int64_t axis) const;

  std::span<const double> values() const { return data_->values; }
  bool requires_grad() const { return data_->requires_grad; }

  /// Grad buffer, allocated (zero-filled) on first access.
  std::span<double> grad();
  bool has_grad() const { return !data_->grad.empty(); }
  void zero_grad();

  /// Value of a single-element tensor.
  double item() const;
  double at(int64_t flat_index) const { return data_->values[flat_index]; }

  /// True when every value (and grad entry, if present) is finite.
  bool all_finite() const;

  /// Identity of the underlying storage; used for parameter bookkeeping.
  const void* storage_id() const { return data_.get(); }

  std::shared_ptr<detail::TensorData> unsafe_data() const { return data_; }

 private:
  friend class Tape;
  explicit Tensor(std::shared_ptr<detail::TensorData> data)
      : data_(std::move(data)) {}
  std::shared_ptr<detail::TensorData> data_;

  friend Tensor make_op_output(Shape shape, std::vector<double> values,
                               bool requires_grad);
};

Tensor make_op_output(Shape shape, std::vector<double> values,
                      bool requires_grad);

/// Reverse-mode tape. Constructing a Tape makes it the active tape for the
/// current thread (tapes nest; the innermost one records). Ops append nodes
/// in execution order, so the node list is already topologically sorted.
///
/// Lifecycle policy: one tape per training step. backward() may be called
/// once per recorded graph; clear() (or destruction) releases the graph.
/// Grads accumulate across backward calls until zero_grad.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() noexcept;

  void record(const Tensor& output, std::function<void()> backward_fn);

  /// Seeds d(loss)/d(loss)=1 and runs all recorded rules in reverse order.
  /// loss must be a single-element tensor recorded on this tape.
  void backward(const Tensor& loss);

  void clear();
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::shared_ptr<detail::TensorData> output;
    std::function<void()> backward_fn;
  };
  std::vector<Node> nodes_;
  Tape* previous_ = nullptr;
};

namespace detail {
// Accumulate helper shared by backward rules.
void accumulate_grad(TensorData& t, const double* src, int64_t n);
std::vector<double>& ensure_grad(TensorData& t);
}  // namespace detail

// ---- elementwise and reduction ops ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor gelu(const Tensor& x);
Tensor softmax(const Tensor& x, int64_t axis);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x, int64_t axis);
Tensor mse(const Tensor& pred, const Tensor& target);

// ---- shape ops (no implicit broadcasting; these are the explicit forms) ----

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int64_t>& dims);
Tensor broadcast_to(const Tensor& x, const Shape& shape);
Tensor slice(const Tensor& x, int64_t axis, int64_t start, int64_t length);
Tensor concat(const std::vector<Tensor>& parts, int64_t axis);

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b);
/// Batched matmul: (B,m,k) x (B,k,n) -> (B,m,n).
Tensor bmm(const Tensor& a, const Tensor& b);

// ---- structured ops ----

/// Cross-correlation over the trailing `dims` spatial axes.
/// x: (batch..., C_in, spatial...), kernel: (C_out, C_in, kspatial...).
/// Output extents follow floor((L + 2*padding - K)/stride) + 1.
Tensor conv(const Tensor& x, const Tensor& kernel, int dims, int64_t stride,
            int64_t padding);

/// Normalizes over one axis (population variance, epsilon 1e-5), then
/// applies the per-position affine (gain, bias), both of extent(axis).
Tensor layernorm(const Tensor& x, int64_t axis, const Tensor& gain,
                 const Tensor& bias);

enum class Mode { kTrain, kEval };

/// Inverted dropout: eval is the identity, train scales kept entries by
/// 1/(1-rate).
Tensor dropout(const Tensor& x, double rate, Mode mode, Rng& rng);

}  // namespace axinv
