#include "cbmlab/train.hpp"

#include <cmath>
#include <sstream>

#include "cbmlab/optim.hpp"

namespace cbm {

std::string to_string(Paradigm p) {
  switch (p) {
    case Paradigm::kSequential: return "sequential";
    case Paradigm::kJoint: return "joint";
    case Paradigm::kHybrid: return "hybrid";
  }
  return "?";
}

Paradigm paradigm_from_string(const std::string& s) {
  if (s == "sequential") return Paradigm::kSequential;
  if (s == "joint") return Paradigm::kJoint;
  if (s == "hybrid") return Paradigm::kHybrid;
  throw std::invalid_argument("unknown training paradigm '" + s + "'");
}

void TrainConfig::validate() const {
  if (epochs < 2) throw std::invalid_argument("training needs at least 2 epochs");
  if (batch_size == 0) throw std::invalid_argument("batch size must be at least 1");
  if (!(lr > 0) || !(lr_finetune > 0)) throw std::invalid_argument("learning rates must be positive");
  if (!(concept_weight >= 0) || !(task_weight >= 0)) throw std::invalid_argument("loss weights must be non-negative");
  if (!(momentum >= 0 && momentum < 1)) throw std::invalid_argument("momentum must lie in [0,1)");
}

std::vector<Phase> training_schedule(const TrainConfig& c) {
  const std::size_t n = c.epochs;
  switch (c.paradigm) {
    case Paradigm::kJoint:
      return {Phase{"joint", 1, n, true, true, c.task_weight, c.concept_weight, c.lr}};
    case Paradigm::kHybrid: {
      const std::size_t half = (n + 1) / 2;
      std::vector<Phase> out{Phase{"concept", 1, half, true, false, 0.0, 1.0, c.lr}};
      if (half < n) out.push_back(Phase{"finetune", half + 1, n, true, true, c.task_weight, c.concept_weight, c.lr_finetune});
      return out;
    }
    case Paradigm::kSequential:
      return {Phase{"concept", 1, n, true, false, 0.0, 1.0, c.lr},
              Phase{"predictor", n + 1, 2 * n, false, true, c.task_weight, 0.0, c.lr}};
  }
  return {};
}

Tensor concept_loss(Tape& tape, const CbmModel& model, const Tensor& logits, const Tensor& targets) {
  return model.arch().concept_kind == ConceptKind::kBinary ? bce_loss(tape, logits, targets)
                                                           : mse_loss(tape, logits, targets);
}

Tensor task_loss(Tape& tape, const CbmModel& model, const Tensor& outputs, std::span<const std::size_t> labels) {
  if (model.arch().task == TaskKind::kClassification) return softmax_ce_loss(tape, outputs, labels);
  std::vector<double> y(labels.begin(), labels.end());
  return mse_loss(tape, outputs, Tensor::from({labels.size(), 1}, std::move(y)));
}

namespace {

Tensor weighted_total(Tape& tape, const std::vector<std::pair<double, Tensor>>& terms) {
  Tensor total;
  for (const auto& [w, t] : terms) {
    if (w == 0.0 || !t.defined()) continue;
    Tensor scaled = w == 1.0 ? t : scale(tape, t, w);
    total = total.defined() ? add(tape, total, scaled) : scaled;
  }
  return total;
}

}  // namespace

TrainHistory train(CbmModel& model, std::span<const ConceptSample> samples, const TrainConfig& config,
                   const ExtraLossFn& extra) {
  config.validate();
  if (samples.empty()) throw std::invalid_argument("cannot train on an empty sample set");
  model.set_trainable(true);
  const auto& arch = model.arch();
  TrainHistory history;

  for (const Phase& phase : training_schedule(config)) {
    std::vector<Tensor> params;
    if (phase.update_g)
      for (auto& p : model.g_params()) params.push_back(p);
    if (phase.update_f)
      for (auto& p : model.f_params()) params.push_back(p);
    SgdMomentum opt(params, phase.lr, config.momentum);
    auto all_params = model.params();

    for (std::size_t epoch = phase.first_epoch; epoch <= phase.last_epoch; ++epoch) {
      EpochRecord rec{epoch, phase.name, 0.0, 0.0, 0.0};
      const auto order = epoch_batches(samples.size(), config.batch_size, config.seed, epoch);
      for (std::size_t bi = 0; bi < order.size(); ++bi) {
        Batch batch = make_batch(samples, order[bi], arch.input);
        Tape tape;
        Tensor logits;
        if (phase.update_g) {
          logits = model.concept_logits(tape, batch.images);
        } else {
          Tape frozen(Tape::Mode::kInference);
          logits = model.concept_logits(frozen, batch.images).clone();
        }
        auto scores = model.concept_scores(tape, logits);
        auto outputs = model.predict(tape, scores);
        auto c_loss = concept_loss(tape, model, logits, batch.concepts);
        auto y_loss = task_loss(tape, model, outputs, batch.labels);
        ExtraTerm ex;
        if (extra) ex = extra(tape, model, batch, phase);
        auto total = weighted_total(tape, {{phase.task_weight, y_loss}, {phase.concept_weight, c_loss}, {1.0, ex.weighted}});

        rec.task_loss += y_loss.item();
        rec.concept_loss += c_loss.item();
        rec.extra_loss += ex.raw;
        if (!total.defined()) continue;
        if (!std::isfinite(total.item())) {
          std::ostringstream os;
          os << "non-finite loss in phase '" << phase.name << "', epoch " << epoch << ", batch " << bi
             << " (task " << y_loss.item() << ", concept " << c_loss.item() << ", extra " << ex.raw << ")";
          throw TrainingDiverged(os.str());
        }
        for (auto& p : all_params) p.zero_grad();
        if (total.requires_grad()) {
          tape.backward(total);
          opt.step();
        }
      }
      const auto nb = static_cast<double>(order.size());
      rec.task_loss /= nb;
      rec.concept_loss /= nb;
      rec.extra_loss /= nb;
      history.epochs.push_back(rec);
    }
  }
  for (auto& p : model.params()) p.zero_grad();
  model.tags()["paradigm"] = to_string(config.paradigm);
  return history;
}

TrainHistory train(CbmModel& model, const DatasetSplit& split, const TrainConfig& config) {
  return train(model, split.train, config);
}

EvalResult evaluate(const CbmModel& model, std::span<const ConceptSample> samples, double threshold) {
  if (samples.empty()) throw std::invalid_argument("cannot evaluate on an empty sample set");
  const auto inf = infer(model, samples);
  const auto& arch = model.arch();
  double task_acc = 0.0, concept_acc = 0.0;
  std::size_t concept_count = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (arch.task == TaskKind::kClassification) {
      task_acc += inf.predictions[i] != s.label ? 1.0 : 0.0;
    } else {
      const double d = inf.outputs[i][0] - static_cast<double>(s.label);
      task_acc += d * d;
    }
    for (std::size_t j = 0; j < s.concepts.size(); ++j, ++concept_count) {
      if (arch.concept_kind == ConceptKind::kBinary) {
        const bool present = inf.scores[i][j] >= threshold;
        concept_acc += present != (s.concepts[j] >= 0.5) ? 1.0 : 0.0;
      } else {
        const double d = inf.scores[i][j] - s.concepts[j];
        concept_acc += d * d;
      }
    }
  }
  const auto n = static_cast<double>(samples.size());
  EvalResult r;
  r.task_error = arch.task == TaskKind::kClassification ? task_acc / n : std::sqrt(task_acc / n);
  r.concept_error = arch.concept_kind == ConceptKind::kBinary ? concept_acc / static_cast<double>(concept_count)
                                                             : std::sqrt(concept_acc / static_cast<double>(concept_count));
  return r;
}

}  // namespace cbm
