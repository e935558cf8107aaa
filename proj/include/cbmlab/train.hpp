// Sequential, joint and hybrid training of concept bottleneck models.

#ifndef CBMLAB_TRAIN_HPP
#define CBMLAB_TRAIN_HPP

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cbmlab/dataset.hpp"
#include "cbmlab/model.hpp"

namespace cbm {

enum class Paradigm { kSequential, kJoint, kHybrid };

std::string to_string(Paradigm p);
Paradigm paradigm_from_string(const std::string& s);

struct TrainConfig {
  Paradigm paradigm = Paradigm::kJoint;
  std::size_t epochs = 20;        // per stage for sequential training
  std::size_t batch_size = 64;
  double task_weight = 1.0;       // weight of the task loss wherever it is switched on
  double concept_weight = 0.5;    // concept loss weight (lambda)
  double lr = 0.01;               // omega
  double lr_finetune = 0.005;     // omega', hybrid second half
  double momentum = 0.9;
  std::uint64_t seed = 0;         // mini-batch order

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

// One contiguous stretch of epochs with fixed loss weights and parameter set.
struct Phase {
  std::string name;
  std::size_t first_epoch = 1;  // 1-based, inclusive
  std::size_t last_epoch = 1;
  bool update_g = true;
  bool update_f = true;
  double task_weight = 1.0;
  double concept_weight = 1.0;
  double lr = 0.01;
};

// joint:      one phase, all parameters, (task_weight, concept_weight), lr.
// hybrid:     epochs 1..ceil(N/2) g only with (0, 1) at lr; the rest all
//             parameters with (task_weight, concept_weight) at lr_finetune.
// sequential: N epochs g only with (0, 1), then N epochs f only with
//             (task_weight, 0), both at lr.
std::vector<Phase> training_schedule(const TrainConfig& config);

struct EpochRecord {
  std::size_t epoch = 0;
  std::string phase;
  double task_loss = 0.0;     // mean over the epoch's batches
  double concept_loss = 0.0;
  double extra_loss = 0.0;    // e.g. the adversarial term; 0 when unused
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// An additional weighted loss term evaluated per batch (already scaled).
// Returns an undefined Tensor when it contributes nothing. The second
// member of the pair is the unscaled value for the history.
struct ExtraTerm {
  Tensor weighted;
  double raw = 0.0;
};
using ExtraLossFn = std::function<ExtraTerm(Tape&, const CbmModel&, const Batch&, const Phase&)>;

TrainHistory train(CbmModel& model, std::span<const ConceptSample> samples, const TrainConfig& config,
                   const ExtraLossFn& extra = {});
TrainHistory train(CbmModel& model, const DatasetSplit& split, const TrainConfig& config);

// Concept loss (BCE on logits or MSE) and task loss (softmax CE or MSE)
// for one batch, as recorded on `tape`.
Tensor concept_loss(Tape& tape, const CbmModel& model, const Tensor& logits, const Tensor& targets);
Tensor task_loss(Tape& tape, const CbmModel& model, const Tensor& outputs, std::span<const std::size_t> labels);

struct EvalResult {
  double task_error = 0.0;     // misclassification rate, or RMSE for regression
  double concept_error = 0.0;  // mean 0-1 error at the threshold (score >= t is present), or RMSE
};

EvalResult evaluate(const CbmModel& model, std::span<const ConceptSample> samples, double threshold = 0.5);

}  // namespace cbm

#endif  // CBMLAB_TRAIN_HPP
