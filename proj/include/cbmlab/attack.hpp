// Concept erasure, introduction and confounding attacks.
//
// All three maximise L = alpha * P + D by iterated sign-gradient steps on the
// input, where P keeps the original prediction confident and D moves the
// targeted concept scores. A step is only accepted if it keeps the image in
// [0,1], the perturbation within the L-infinity budget, and the predicted
// class unchanged; the first step that violates one of these ends the
// attack and is discarded.

#ifndef CBMLAB_ATTACK_HPP
#define CBMLAB_ATTACK_HPP

#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cbmlab/model.hpp"
#include "cbmlab/tensor.hpp"

namespace cbm {

enum class AttackGoal { kErasure, kIntroduction, kConfounding };

std::string to_string(AttackGoal goal);
AttackGoal attack_goal_from_string(const std::string& s);

struct RelevanceSets {
  std::vector<std::size_t> relevant;     // score >= threshold
  std::vector<std::size_t> nonrelevant;
};

RelevanceSets relevance_sets(std::span<const double> scores, double threshold);

// How run_attacks erases: one run per relevant concept, or one run that
// pushes all of them down together.
enum class ErasureMode { kPerTarget, kAllTargets };

std::string to_string(ErasureMode m);
ErasureMode erasure_mode_from_string(const std::string& s);

// What the prediction-keeping term P measures for classification models.
enum class PredictionTerm {
  kLogit,        // logit of the originally predicted class
  kProbability,  // its softmax probability, on the same [0,1] scale as binary concept scores
};

std::string to_string(PredictionTerm t);
PredictionTerm prediction_term_from_string(const std::string& s);

class NoTargetError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct AttackSpec {
  AttackGoal goal = AttackGoal::kErasure;
  std::vector<std::size_t> targets;  // erasure only; empty means every relevant concept
  ErasureMode erasure_mode = ErasureMode::kPerTarget;  // run_attacks only, when targets is empty
  double step_size = 1e-3;           // per-step L-inf move
  std::size_t max_steps = 100;
  double budget = 0.12;              // L-inf bound on the perturbation, pixel units
  double alpha = 1.0;                // prediction-keeping weight
  double beta = 1.0;                 // concept term weight
  double gamma_conf = 0.0;           // confounding: weight on pushing relevant concepts down
  double relevance_threshold = 0.5;
  double flip_threshold = 2.0;       // continuous concepts: |change| above this is a flip
  PredictionTerm prediction_term = PredictionTerm::kLogit;
  // Alternative sign convention: erasure and the confounding relevant term
  // push scores up instead of down.
  bool literal_signs = false;

  void validate() const;
};

// Everything the objective needs besides the perturbed image.
struct ObjectiveTerms {
  AttackGoal goal = AttackGoal::kErasure;
  std::vector<std::size_t> erasure_targets;  // still-active targets
  RelevanceSets sets;
  double alpha = 1.0;
  double beta = 1.0;
  double gamma_conf = 0.0;
  bool literal_signs = false;
  PredictionTerm prediction_term = PredictionTerm::kLogit;
  std::size_t predicted_class = 0;  // classification
  double predicted_value = 0.0;     // regression
};

// Per-concept coefficients c such that D-part of L = sum_j c_j * score_j.
std::vector<double> concept_coefficients(const ObjectiveTerms& terms, std::size_t num_concepts);

// Scalar L(x') recorded on `tape`; throws NoTargetError for an erasure
// objective without targets.
Tensor attack_objective(Tape& tape, const CbmModel& model, const Tensor& images, const ObjectiveTerms& terms);

enum class StopReason { kMaxSteps, kBudget, kPredictionChange, kAllFlipped, kNoGradient, kZeroBudget };
std::string to_string(StopReason r);

struct StepRecord {
  std::size_t step = 0;
  double objective = 0.0;
  double linf = 0.0;
  std::size_t prediction = 0;
};

struct AttackOutcome {
  AttackGoal goal = AttackGoal::kErasure;
  std::vector<double> perturbed;  // x' = x + delta
  std::size_t steps = 0;          // accepted steps
  StopReason stop = StopReason::kMaxSteps;
  RelevanceSets sets;             // computed on the clean image
  std::vector<std::size_t> targets;
  std::vector<bool> flipped;      // per target, latched when it first crossed
  std::vector<double> scores_before;
  std::vector<double> scores_after;
  std::size_t prediction_before = 0;
  std::size_t prediction_after = 0;
  double linf = 0.0;
  double objective_before = 0.0;
  double objective_after = 0.0;
  std::vector<StepRecord> trace;  // one record per accepted step

  std::size_t flips() const;
  // Erasure: some target flipped. Other goals: the explanation changed.
  bool success(double threshold) const;
};

// Runs the attack on one image (values in [0,1], laid out as the model
// input). A model with trainable parameters is frozen internally first.
AttackOutcome run_attack(const CbmModel& model, std::span<const double> image, const AttackSpec& spec);

// run_attack with beta = gamma_conf = 0: a plain confidence-preserving
// adversarial perturbation that ignores concepts.
AttackOutcome standard_adv_baseline(const CbmModel& model, std::span<const double> image, AttackSpec spec);

// Attacks many images with a pool of `workers` threads against one frozen
// copy of the model. Entry i holds the runs for image i: one per relevant
// concept for per-target erasure, otherwise a single run, and none when an
// erasure has nothing to target. Results do not depend on the worker count.
std::vector<std::vector<AttackOutcome>> run_attacks(const CbmModel& model, std::span<const std::vector<double>> images,
                                                    const AttackSpec& spec, std::size_t workers = 1);

// Line-delimited JSON, one object per accepted step.
void write_trace(std::ostream& os, const AttackOutcome& outcome, std::size_t sample_id);

}  // namespace cbm

#endif  // CBMLAB_ATTACK_HPP
