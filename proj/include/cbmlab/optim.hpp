#ifndef CBMLAB_OPTIM_HPP
#define CBMLAB_OPTIM_HPP

#include <vector>

#include "cbmlab/tensor.hpp"

namespace cbm {

// Heavy-ball SGD: v <- momentum * v + grad; param <- param - lr * v.
// Velocities start at zero and are owned by the optimizer, so a fresh
// optimizer restarts the momentum.
class SgdMomentum {
 public:
  SgdMomentum(std::vector<Tensor> params, double lr, double momentum);

  void step();
  void zero_grad();

  double lr() const { return lr_; }
  double momentum() const { return momentum_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  double lr_;
  double momentum_;
};

}  // namespace cbm

#endif  // CBMLAB_OPTIM_HPP
