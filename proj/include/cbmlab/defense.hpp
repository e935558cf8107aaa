// Robust concept learning: hybrid training with an extra loss on images
// perturbed, inside an L-infinity ball, to maximise the concept loss.

#ifndef CBMLAB_DEFENSE_HPP
#define CBMLAB_DEFENSE_HPP

#include <string>

#include "cbmlab/train.hpp"

namespace cbm {

enum class AdvLossMode {
  kConcept,     // l(g(x~), c); never looks at the labels
  kPrediction,  // l(f(g(x~)), y)
};

std::string to_string(AdvLossMode m);
AdvLossMode adv_loss_mode_from_string(const std::string& s);

struct RclConfig {
  double step = 0.03;        // inner sign-step size
  std::size_t iterations = 5;
  double budget = 0.12;      // inner L-inf bound, same units as the attack budget
  double alpha_rcl = 1.0;    // weight of the adversarial term
  AdvLossMode mode = AdvLossMode::kConcept;
  TrainConfig train = [] {
    TrainConfig t;
    t.paradigm = Paradigm::kHybrid;
    return t;
  }();

  // Also accepts iterations == 0 (identity augmentation).
  void validate() const;
};

// Perturbed copy of `batch.images`: `iterations` sign-ascent steps on the
// inner loss against a frozen copy of the model, each followed by clamping
// to [0,1] and projection onto the budget ball around the clean images.
Tensor adversarial_augment(const CbmModel& model, const Batch& batch, const RclConfig& config);

// alpha_rcl * loss(model, augmented batch), recorded on `tape` against the
// trainable model. The raw member carries the unweighted loss.
ExtraTerm adversarial_term(Tape& tape, const CbmModel& model, const Batch& batch, const RclConfig& config);

TrainHistory rcl_train(CbmModel& model, std::span<const ConceptSample> samples, const RclConfig& config);
TrainHistory rcl_train(CbmModel& model, const DatasetSplit& split, const RclConfig& config);

}  // namespace cbm

#endif  // CBMLAB_DEFENSE_HPP
