#include "cbmlab/attack.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <ostream>
#include <thread>

#include "json.hpp"

namespace cbm {

std::string to_string(AttackGoal goal) {
  switch (goal) {
    case AttackGoal::kErasure: return "erasure";
    case AttackGoal::kIntroduction: return "introduction";
    case AttackGoal::kConfounding: return "confounding";
  }
  return "?";
}

AttackGoal attack_goal_from_string(const std::string& s) {
  if (s == "erasure") return AttackGoal::kErasure;
  if (s == "introduction") return AttackGoal::kIntroduction;
  if (s == "confounding") return AttackGoal::kConfounding;
  throw std::invalid_argument("unknown attack goal '" + s + "'");
}

std::string to_string(StopReason r) {
  switch (r) {
    case StopReason::kMaxSteps: return "max-steps";
    case StopReason::kBudget: return "budget";
    case StopReason::kPredictionChange: return "prediction-change";
    case StopReason::kAllFlipped: return "all-flipped";
    case StopReason::kNoGradient: return "no-gradient";
    case StopReason::kZeroBudget: return "zero-budget";
  }
  return "?";
}

std::string to_string(ErasureMode m) { return m == ErasureMode::kPerTarget ? "per-target" : "all-targets"; }

ErasureMode erasure_mode_from_string(const std::string& s) {
  if (s == "per-target") return ErasureMode::kPerTarget;
  if (s == "all-targets") return ErasureMode::kAllTargets;
  throw std::invalid_argument("unknown erasure mode '" + s + "'");
}

std::string to_string(PredictionTerm t) { return t == PredictionTerm::kLogit ? "logit" : "probability"; }

PredictionTerm prediction_term_from_string(const std::string& s) {
  if (s == "logit") return PredictionTerm::kLogit;
  if (s == "probability") return PredictionTerm::kProbability;
  throw std::invalid_argument("unknown prediction term '" + s + "'");
}

RelevanceSets relevance_sets(std::span<const double> scores, double threshold) {
  RelevanceSets sets;
  for (std::size_t j = 0; j < scores.size(); ++j) (scores[j] >= threshold ? sets.relevant : sets.nonrelevant).push_back(j);
  return sets;
}

void AttackSpec::validate() const {
  if (!(step_size > 0)) throw std::invalid_argument("attack step size must be positive");
  if (!(budget >= 0)) throw std::invalid_argument("attack budget must be non-negative");
  if (max_steps < 1) throw std::invalid_argument("attack needs at least one step");
  if (alpha < 0 || beta < 0 || gamma_conf < 0) throw std::invalid_argument("attack weights must be non-negative");
}

std::vector<double> concept_coefficients(const ObjectiveTerms& t, std::size_t num_concepts) {
  std::vector<double> c(num_concepts, 0.0);
  switch (t.goal) {
    case AttackGoal::kErasure: {
      const double sign = t.literal_signs ? 1.0 : -1.0;
      for (auto j : t.erasure_targets) c.at(j) += sign * t.beta;
      break;
    }
    case AttackGoal::kIntroduction:
      for (auto j : t.sets.nonrelevant) c.at(j) += t.beta;
      break;
    case AttackGoal::kConfounding: {
      const double sign = t.literal_signs ? 1.0 : -1.0;
      for (auto j : t.sets.nonrelevant) c.at(j) += t.beta;
      for (auto j : t.sets.relevant) c.at(j) += sign * t.gamma_conf;
      break;
    }
  }
  return c;
}

namespace {

Tensor objective_on(Tape& tape, const CbmModel& model, const ForwardPass& pass, const ObjectiveTerms& terms) {
  const auto& arch = model.arch();
  auto d = weighted_sum(tape, pass.concept_scores, concept_coefficients(terms, arch.num_concepts));
  Tensor p;
  if (arch.task == TaskKind::kClassification) {
    std::vector<double> a(arch.num_outputs, 0.0);
    a.at(terms.predicted_class) = terms.alpha;
    const Tensor out = terms.prediction_term == PredictionTerm::kLogit ? pass.outputs : softmax(tape, pass.outputs);
    p = weighted_sum(tape, out, a);
  } else {
    const std::vector<double> shift{-terms.predicted_value};
    const std::vector<double> a{-terms.alpha};
    p = weighted_sum(tape, abs(tape, add_const(tape, pass.outputs, shift)), a);
  }
  return add(tape, p, d);
}

}  // namespace

Tensor attack_objective(Tape& tape, const CbmModel& model, const Tensor& images, const ObjectiveTerms& terms) {
  if (terms.goal == AttackGoal::kErasure && terms.erasure_targets.empty())
    throw NoTargetError("erasure objective has no target concept");
  return objective_on(tape, model, model.forward(tape, images), terms);
}

std::size_t AttackOutcome::flips() const { return static_cast<std::size_t>(std::count(flipped.begin(), flipped.end(), true)); }

bool AttackOutcome::success(double threshold) const {
  if (prediction_after != prediction_before) return false;
  if (goal == AttackGoal::kErasure) return flips() > 0;
  for (std::size_t j = 0; j < scores_before.size(); ++j)
    if ((scores_before[j] >= threshold) != (scores_after[j] >= threshold)) return true;
  return false;
}

namespace {

struct Probe {
  double objective = 0.0;
  std::vector<double> grad;
  std::vector<double> scores;
  std::size_t prediction = 0;
  double value = 0.0;  // regression output
};

std::size_t predicted(const CbmModel& model, std::span<const double> outputs) {
  if (model.arch().task == TaskKind::kClassification) return argmax(outputs);
  return static_cast<std::size_t>(std::max(0.0, std::round(outputs[0])));
}

// Forward, objective and input gradient at one point.
Probe probe(const CbmModel& model, std::span<const double> x, const ObjectiveTerms& terms) {
  Tape tape;
  auto images = image_tensor(x, model.arch().input);
  images.set_requires_grad(true);
  auto pass = model.forward(tape, images);
  Probe out;
  out.scores.assign(pass.concept_scores.data().begin(), pass.concept_scores.data().end());
  out.prediction = predicted(model, pass.outputs.data());
  out.value = pass.outputs.data()[0];
  if (terms.goal == AttackGoal::kErasure && terms.erasure_targets.empty()) return out;
  auto loss = objective_on(tape, model, pass, terms);
  out.objective = loss.item();
  tape.backward(loss);
  out.grad.assign(images.grad().begin(), images.grad().end());
  return out;
}

bool is_flipped(const CbmModel& model, const AttackSpec& spec, double before, double after) {
  if (model.arch().concept_kind == ConceptKind::kBinary) return after < spec.relevance_threshold;
  return std::fabs(after - before) > spec.flip_threshold;
}

AttackOutcome attack_frozen(const CbmModel& model, std::span<const double> image, const AttackSpec& spec) {
  spec.validate();
  if (image.size() != model.arch().input.numel())
    throw ShapeError("attack image has " + std::to_string(image.size()) + " pixels, model expects " +
                     std::to_string(model.arch().input.numel()));

  AttackOutcome out;
  out.goal = spec.goal;
  ObjectiveTerms terms;
  terms.goal = spec.goal;
  terms.alpha = spec.alpha;
  terms.beta = spec.beta;
  terms.gamma_conf = spec.gamma_conf;
  terms.literal_signs = spec.literal_signs;
  terms.prediction_term = spec.prediction_term;

  const std::vector<double> x0(image.begin(), image.end());
  {
    const Probe clean = probe(model, x0, ObjectiveTerms{});
    out.scores_before = clean.scores;
    out.prediction_before = clean.prediction;
    terms.predicted_class = clean.prediction;
    terms.predicted_value = clean.value;
  }
  out.sets = relevance_sets(out.scores_before, spec.relevance_threshold);
  terms.sets = out.sets;
  if (spec.goal == AttackGoal::kErasure) {
    out.targets = spec.targets.empty() ? out.sets.relevant : spec.targets;
    for (auto j : out.targets)
      if (!std::binary_search(out.sets.relevant.begin(), out.sets.relevant.end(), j))
        throw NoTargetError("erasure target " + std::to_string(j) + " is not an initially relevant concept");
    if (out.targets.empty()) throw NoTargetError("sample has no relevant concept to erase");
    terms.erasure_targets = out.targets;
  }
  out.flipped.assign(out.targets.size(), false);

  std::vector<double> x = x0;
  Probe cur = probe(model, x, terms);
  out.objective_before = cur.objective;
  out.stop = StopReason::kMaxSteps;

  if (spec.budget == 0.0) {
    out.stop = StopReason::kZeroBudget;
  } else {
    std::vector<double> cand(x.size());
    for (std::size_t step = 1; step <= spec.max_steps; ++step) {
      if (std::all_of(cur.grad.begin(), cur.grad.end(), [](double g) { return g == 0.0; })) {
        out.stop = StopReason::kNoGradient;
        break;
      }
      double linf = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double g = cur.grad[i];
        const double s = g > 0 ? 1.0 : (g < 0 ? -1.0 : 0.0);
        cand[i] = std::clamp(x[i] + spec.step_size * s, 0.0, 1.0);
        linf = std::max(linf, std::fabs(cand[i] - x0[i]));
      }
      if (linf > spec.budget) {  // exact: accumulated steps can overshoot by an ulp
        out.stop = StopReason::kBudget;
        break;
      }
      Probe next = probe(model, cand, terms);
      if (next.prediction != out.prediction_before) {
        out.stop = StopReason::kPredictionChange;
        break;
      }
      x = cand;
      ++out.steps;
      out.linf = linf;

      if (spec.goal == AttackGoal::kErasure) {
        bool changed = false;
        for (std::size_t k = 0; k < out.targets.size(); ++k) {
          const auto j = out.targets[k];
          if (!out.flipped[k] && is_flipped(model, spec, out.scores_before[j], next.scores[j])) {
            out.flipped[k] = true;
            changed = true;
          }
        }
        if (changed) {
          terms.erasure_targets.clear();
          for (std::size_t k = 0; k < out.targets.size(); ++k)
            if (!out.flipped[k]) terms.erasure_targets.push_back(out.targets[k]);
          if (terms.erasure_targets.empty()) {
            out.trace.push_back({out.steps, next.objective, out.linf, next.prediction});
            cur = std::move(next);
            out.stop = StopReason::kAllFlipped;
            break;
          }
          next = probe(model, x, terms);
        }
      }
      out.trace.push_back({out.steps, next.objective, out.linf, next.prediction});
      cur = std::move(next);
    }
  }

  out.perturbed = x;
  out.scores_after = cur.scores;
  out.prediction_after = cur.prediction;
  out.objective_after = cur.objective;
  return out;
}

bool is_frozen(const CbmModel& model) {
  for (const auto& p : model.params())
    if (p.requires_grad()) return false;
  return true;
}

}  // namespace

AttackOutcome run_attack(const CbmModel& model, std::span<const double> image, const AttackSpec& spec) {
  if (is_frozen(model)) return attack_frozen(model, image, spec);
  return attack_frozen(model.frozen(), image, spec);
}

AttackOutcome standard_adv_baseline(const CbmModel& model, std::span<const double> image, AttackSpec spec) {
  spec.beta = 0.0;
  spec.gamma_conf = 0.0;
  return run_attack(model, image, spec);
}

namespace {

std::vector<AttackOutcome> attack_sample(const CbmModel& frozen, std::span<const double> image, const AttackSpec& spec) {
  const bool per_target =
      spec.goal == AttackGoal::kErasure && spec.targets.empty() && spec.erasure_mode == ErasureMode::kPerTarget;
  if (!per_target) {
    try {
      return {attack_frozen(frozen, image, spec)};
    } catch (const NoTargetError&) {
      return {};
    }
  }
  const auto scores = forward_concepts(frozen, image_tensor(image, frozen.arch().input));
  std::vector<AttackOutcome> runs;
  AttackSpec one = spec;
  for (auto j : relevance_sets(scores, spec.relevance_threshold).relevant) {
    one.targets = {j};
    runs.push_back(attack_frozen(frozen, image, one));
  }
  return runs;
}

}  // namespace

std::vector<std::vector<AttackOutcome>> run_attacks(const CbmModel& model, std::span<const std::vector<double>> images,
                                                    const AttackSpec& spec, std::size_t workers) {
  spec.validate();
  const CbmModel frozen = model.frozen();
  std::vector<std::vector<AttackOutcome>> results(images.size());
  std::atomic<std::size_t> next{0};
  std::mutex failure_mutex;
  std::exception_ptr failure;
  auto work = [&] {
    for (std::size_t i = next++; i < images.size(); i = next++) {
      try {
        results[i] = attack_sample(frozen, images[i], spec);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = images.size();
      }
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, images.size()));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  }
  if (failure) std::rethrow_exception(failure);
  return results;
}

void write_trace(std::ostream& os, const AttackOutcome& outcome, std::size_t sample_id) {
  for (const auto& r : outcome.trace) {
    nlohmann::json j = {{"sample", sample_id}, {"attack", to_string(outcome.goal)}, {"step", r.step},
                        {"objective", r.objective}, {"linf", r.linf}, {"prediction", r.prediction}};
    os << j.dump() << '\n';
  }
}

}  // namespace cbm
