// Minimal reverse-mode automatic differentiation over dense double tensors.
//
// A Tensor is a shared handle to a node holding shape, row-major data and an
// optional gradient buffer. Operations are free functions that take the Tape
// they should be recorded on; backward() replays the tape in reverse.
//
// Gradient semantics: leaf tensors (created by the user, e.g. parameters or
// attack inputs) accumulate gradients across backward() calls until
// zero_grad() is called. Intermediate tensors are reset at the start of
// every backward() call.

#ifndef CBMLAB_TENSOR_HPP
#define CBMLAB_TENSOR_HPP

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cbm {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t i) const { return shape().at(i); }
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  // Writable view for in-place parameter updates. Never call on a tensor
  // whose value was already consumed by a recorded operation.
  std::span<double> mutable_data();
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  // Gradient buffer; all zeros when nothing has been accumulated yet.
  std::span<const double> grad() const;
  void zero_grad();

  // Deep copy of the values; the copy is a fresh leaf.
  Tensor clone(bool requires_grad = false) const;

  // Identity of the underlying node, for bookkeeping in the tape.
  const void* id() const { return node_.get(); }

 private:
  friend class Tape;
  friend struct TensorAccess;
  struct Node;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

// Ordered record of executed operations. A tape is confined to one thread.
class Tape {
 public:
  enum class Mode { kRecord, kInference };

  explicit Tape(Mode mode = Mode::kRecord) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return mode_ == Mode::kRecord; }
  std::size_t size() const { return entries_.size(); }

  // Populate gradients of every requires_grad tensor reachable from `loss`.
  // Throws ShapeError for non-scalar losses and std::logic_error when the
  // loss was not produced on this tape.
  void backward(const Tensor& loss);

  void clear() { entries_.clear(); }

  // Used by operator implementations.
  struct Entry {
    Tensor output;
    std::function<void()> grad_fn;
  };
  void record(Tensor output, std::function<void()> grad_fn);

 private:
  Mode mode_;
  std::vector<Entry> entries_;
};

// ---- operators -----------------------------------------------------------

// input[B x I] * weight[I x O] + bias[O]
Tensor dense(Tape& tape, const Tensor& input, const Tensor& weight, const Tensor& bias);

// 3x3 cross-correlation, stride 1, zero padding 1.
// input[B x C x H x W], kernel[F x C x 3 x 3], bias[F] -> [B x F x H x W]
Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, const Tensor& bias);

// 2x2 max pooling with stride 2. Ties resolve to the lowest flat index of the
// window, which is also where the gradient is routed.
Tensor maxpool2(Tape& tape, const Tensor& input);

Tensor relu(Tape& tape, const Tensor& x);
Tensor sigmoid(Tape& tape, const Tensor& x);
Tensor abs(Tape& tape, const Tensor& x);
// Row-wise softmax of [B x K].
Tensor softmax(Tape& tape, const Tensor& x);

// [B x ...] -> [B x rest]
Tensor flatten(Tape& tape, const Tensor& x);

// Reductions to a scalar (shape {1}).
Tensor sum(Tape& tape, const Tensor& x);
// sum_i coeffs[i] * x[i]; coeffs is a constant.
Tensor weighted_sum(Tape& tape, const Tensor& x, std::span<const double> coeffs);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& x, double factor);
// x + constant (same shape)
Tensor add_const(Tape& tape, const Tensor& x, std::span<const double> constant);

// Losses reduce as: sum over the trailing (feature) dimension, mean over the
// leading (batch) dimension. A rank-1 tensor counts as one row.

// Sigmoid fused with binary cross entropy; targets must be 0 or 1.
Tensor bce_loss(Tape& tape, const Tensor& logits, const Tensor& targets);
Tensor mse_loss(Tape& tape, const Tensor& pred, const Tensor& targets);
// logits[B x K], one label per row.
Tensor softmax_ce_loss(Tape& tape, const Tensor& logits, std::span<const std::size_t> labels);

}  // namespace cbm

#endif  // CBMLAB_TENSOR_HPP
