#include "cbmlab/defense.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace cbm {

std::string to_string(AdvLossMode m) { return m == AdvLossMode::kConcept ? "concept" : "prediction"; }

AdvLossMode adv_loss_mode_from_string(const std::string& s) {
  if (s == "concept") return AdvLossMode::kConcept;
  if (s == "prediction") return AdvLossMode::kPrediction;
  throw std::invalid_argument("unknown adversarial loss mode '" + s + "'");
}

void RclConfig::validate() const {
  if (!(step > 0)) throw std::invalid_argument("rcl step size must be positive");
  if (!(budget >= 0)) throw std::invalid_argument("rcl budget must be non-negative");
  if (!(alpha_rcl >= 0)) throw std::invalid_argument("rcl weight must be non-negative");
  train.validate();
}

namespace {

Tensor inner_loss(Tape& tape, const CbmModel& model, const Tensor& images, const Batch& batch, AdvLossMode mode) {
  auto logits = model.concept_logits(tape, images);
  if (mode == AdvLossMode::kConcept) return concept_loss(tape, model, logits, batch.concepts);
  return task_loss(tape, model, model.predict(tape, model.concept_scores(tape, logits)), batch.labels);
}

}  // namespace

Tensor adversarial_augment(const CbmModel& model, const Batch& batch, const RclConfig& config) {
  config.validate();
  const auto x0 = batch.images.data();
  std::vector<double> x(x0.begin(), x0.end());
  if (config.iterations == 0) return Tensor::from(batch.images.shape(), std::move(x));
  const CbmModel frozen = model.frozen();
  for (std::size_t it = 0; it < config.iterations; ++it) {
    Tape tape;
    auto images = Tensor::from(batch.images.shape(), x, true);
    tape.backward(inner_loss(tape, frozen, images, batch, config.mode));
    const auto g = images.grad();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double s = g[i] > 0 ? 1.0 : (g[i] < 0 ? -1.0 : 0.0);
      double v = std::clamp(x[i] + config.step * s, x0[i] - config.budget, x0[i] + config.budget);
      // x0 +- budget can round to just outside the ball.
      while (std::fabs(v - x0[i]) > config.budget) v = std::nextafter(v, x0[i]);
      x[i] = std::clamp(v, 0.0, 1.0);
    }
  }
  return Tensor::from(batch.images.shape(), std::move(x));
}

ExtraTerm adversarial_term(Tape& tape, const CbmModel& model, const Batch& batch, const RclConfig& config) {
  if (config.alpha_rcl == 0.0) return {};
  const auto adv = adversarial_augment(model, batch, config);
  auto loss = inner_loss(tape, model, adv, batch, config.mode);
  return {config.alpha_rcl == 1.0 ? loss : scale(tape, loss, config.alpha_rcl), loss.item()};
}

TrainHistory rcl_train(CbmModel& model, std::span<const ConceptSample> samples, const RclConfig& config) {
  config.validate();
  auto history = train(model, samples, config.train,
                       [&config](Tape& tape, const CbmModel& m, const Batch& batch, const Phase&) {
                         return adversarial_term(tape, m, batch, config);
                       });
  auto& tags = model.tags();
  tags["defense"] = "rcl";
  tags["rcl.mode"] = to_string(config.mode);
  std::ostringstream os;
  os << "step=" << config.step << " iterations=" << config.iterations << " budget=" << config.budget
     << " alpha=" << config.alpha_rcl;
  tags["rcl.params"] = os.str();
  return history;
}

TrainHistory rcl_train(CbmModel& model, const DatasetSplit& split, const RclConfig& config) {
  return rcl_train(model, split.train, config);
}

}  // namespace cbm
