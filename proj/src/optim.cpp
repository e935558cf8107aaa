#include "cbmlab/optim.hpp"

#include <stdexcept>
#include <string>

namespace cbm {

SgdMomentum::SgdMomentum(std::vector<Tensor> params, double lr, double momentum)
    : params_(std::move(params)), lr_(lr), momentum_(momentum) {
  if (!(lr > 0)) throw std::invalid_argument("learning rate must be positive, got " + std::to_string(lr));
  if (!(momentum >= 0 && momentum < 1))
    throw std::invalid_argument("momentum must lie in [0,1), got " + std::to_string(momentum));
  velocity_.reserve(params_.size());
  for (const auto& p : params_) velocity_.emplace_back(p.numel(), 0.0);
}

void SgdMomentum::step() {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    auto grad = p.grad();
    auto value = p.mutable_data();
    auto& v = velocity_[k];
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = momentum_ * v[i] + grad[i];
      value[i] -= lr_ * v[i];
    }
  }
}

void SgdMomentum::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace cbm
