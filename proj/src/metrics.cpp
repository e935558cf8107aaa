#include "cbmlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>
#include <stdexcept>

namespace cbm {

std::string to_string(SkipReason r) {
  return r == SkipReason::kWrongPrediction ? "wrong-prediction" : "low-concept-accuracy";
}

std::optional<SkipReason> filter_decision(std::size_t prediction, std::size_t label, std::span<const double> scores,
                                          std::span<const double> truth, ConceptKind kind, double threshold) {
  if (scores.size() != truth.size() || scores.empty())
    throw std::invalid_argument("concept scores and annotations differ in length");
  if (prediction != label) return SkipReason::kWrongPrediction;
  if (kind == ConceptKind::kBinary) {
    std::size_t correct = 0;
    for (std::size_t j = 0; j < scores.size(); ++j) correct += (scores[j] >= threshold) == (truth[j] >= 0.5);
    // correct / n <= 0.6, in integers
    if (10 * correct <= 6 * scores.size()) return SkipReason::kLowConceptAccuracy;
  } else {
    double se = 0.0;
    for (std::size_t j = 0; j < scores.size(); ++j) se += (scores[j] - truth[j]) * (scores[j] - truth[j]);
    if (std::sqrt(se / static_cast<double>(scores.size())) >= 0.6) return SkipReason::kLowConceptAccuracy;
  }
  return std::nullopt;
}

std::vector<std::optional<SkipReason>> filter_samples(const CbmModel& model, std::span<const ConceptSample> samples,
                                                      double threshold) {
  std::vector<std::optional<SkipReason>> out;
  if (samples.empty()) return out;
  const auto inf = infer(model, samples);
  for (std::size_t i = 0; i < samples.size(); ++i)
    out.push_back(filter_decision(inf.predictions[i], samples[i].label, inf.scores[i], samples[i].concepts,
                                  model.arch().concept_kind, threshold));
  return out;
}

std::optional<SkipReason> sample_filter(const CbmModel& model, const ConceptSample& sample, double threshold) {
  return filter_samples(model, std::span(&sample, 1), threshold).front();
}

std::vector<std::size_t> presence_set(std::span<const double> scores, double threshold) {
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < scores.size(); ++j)
    if (scores[j] >= threshold) out.push_back(j);
  return out;
}

double pct_flipped(std::span<const double> orig, std::span<const double> pert, ConceptKind kind, double threshold,
                   double delta_thresh) {
  if (orig.size() != pert.size()) throw std::invalid_argument("concept vectors differ in length");
  if (orig.empty()) throw std::invalid_argument("empty concept vector");
  std::size_t flipped = 0;
  for (std::size_t j = 0; j < orig.size(); ++j) {
    if (kind == ConceptKind::kBinary)
      flipped += (orig[j] >= threshold) != (pert[j] >= threshold);
    else
      flipped += std::fabs(orig[j] - pert[j]) > delta_thresh;
  }
  return 100.0 * static_cast<double>(flipped) / static_cast<double>(orig.size());
}

namespace {

std::size_t intersection_size(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  std::vector<std::size_t> out;
  std::ranges::set_intersection(a, b, std::back_inserter(out));
  return out.size();
}

}  // namespace

std::optional<double> pct_introduced(std::span<const std::size_t> orig, std::span<const std::size_t> pert) {
  if (orig.empty()) return std::nullopt;
  const auto fresh = pert.size() - intersection_size(orig, pert);
  return 100.0 * static_cast<double>(fresh) / static_cast<double>(orig.size());
}

std::optional<double> pct_retained(std::span<const std::size_t> orig, std::span<const std::size_t> pert) {
  if (orig.empty()) return std::nullopt;
  return 100.0 * static_cast<double>(intersection_size(orig, pert)) / static_cast<double>(orig.size());
}

double jaccard(std::span<const std::size_t> orig, std::span<const std::size_t> pert) {
  if (orig.empty() && pert.empty()) return 1.0;
  const auto inter = intersection_size(orig, pert);
  return static_cast<double>(inter) / static_cast<double>(orig.size() + pert.size() - inter);
}

DeltaStats delta_stats(std::span<const double> orig, std::span<const double> pert) {
  if (orig.size() != pert.size()) throw std::invalid_argument("concept vectors differ in length");
  if (orig.empty()) throw std::invalid_argument("empty concept vector");
  DeltaStats s{0.0, INFINITY};
  for (std::size_t j = 0; j < orig.size(); ++j) {
    const double d = std::fabs(orig[j] - pert[j]);
    s.avg += d;
    s.min = std::min(s.min, d);
  }
  s.avg /= static_cast<double>(orig.size());
  return s;
}

MeanStd mean_std(std::span<const double> values) {
  MeanStd r;
  r.n = values.size();
  if (values.empty()) return r;
  for (double v : values) r.mean += v;
  r.mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - r.mean) * (v - r.mean);
  r.std = std::sqrt(ss / static_cast<double>(values.size()));
  return r;
}

}  // namespace cbm
