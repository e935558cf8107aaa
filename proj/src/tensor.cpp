#include "cbmlab/tensor.hpp"

#include <numeric>
#include <sstream>

#include "tensor_internal.hpp"

namespace cbm {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one extent");
  for (auto e : shape)
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  check_shape(shape);
  std::vector<double> data(shape_numel(shape), value);
  return from(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  check_shape(shape);
  if (shape_numel(shape) != data.size())
    throw ShapeError("shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) +
                     " values");
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->data.size(); }
std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool on) { node_->requires_grad = on; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  node_->grad_buffer();
  return node_->grad;
}

void Tensor::zero_grad() { node_->reset_grad(); }

Tensor Tensor::clone(bool requires_grad) const { return from(shape(), node_->data, requires_grad); }

void Tape::record(Tensor output, std::function<void()> grad_fn) {
  entries_.push_back(Entry{std::move(output), std::move(grad_fn)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ShapeError("backward() needs a scalar loss, got " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  if (!loss.requires_grad()) throw std::logic_error("loss does not depend on any tensor that requires grad");

  std::size_t end = entries_.size();
  while (end > 0 && entries_[end - 1].output.id() != loss.id()) --end;
  if (end == 0) throw std::logic_error("loss was not produced on this tape");

  for (std::size_t i = 0; i < end; ++i) {
    auto& node = *TensorAccess::node(entries_[i].output);
    node.grad_buffer();
    node.reset_grad();
  }
  TensorAccess::node(loss)->grad_buffer()[0] = 1.0;
  for (std::size_t i = end; i-- > 0;) entries_[i].grad_fn();
}

}  // namespace cbm
