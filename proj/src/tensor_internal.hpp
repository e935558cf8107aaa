// Node layout shared by the tensor and operator translation units.

#ifndef CBMLAB_TENSOR_INTERNAL_HPP
#define CBMLAB_TENSOR_INTERNAL_HPP

#include <algorithm>
#include <memory>
#include <vector>

#include "cbmlab/tensor.hpp"

namespace cbm {

struct Tensor::Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;

  double* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad.data();
  }
  void reset_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

struct TensorAccess {
  using NodePtr = std::shared_ptr<Tensor::Node>;
  static const NodePtr& node(const Tensor& t) { return t.node_; }
  static Tensor wrap(NodePtr node) { return Tensor(std::move(node)); }
};

}  // namespace cbm

#endif  // CBMLAB_TENSOR_INTERNAL_HPP
