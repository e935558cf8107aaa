// Explanation-diffing metrics and the evaluation sample filter.
//
// Concept sets are sorted, duplicate-free index vectors. Percentages are in
// [0,100] except introduced%, which can exceed 100.

#ifndef CBMLAB_METRICS_HPP
#define CBMLAB_METRICS_HPP

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cbmlab/dataset.hpp"
#include "cbmlab/model.hpp"

namespace cbm {

enum class SkipReason { kWrongPrediction, kLowConceptAccuracy };
std::string to_string(SkipReason r);

// Keep (nullopt) or skip. Binary concepts: skip at accuracy <= 60%.
// Continuous concepts: skip at RMSE >= 0.6.
std::optional<SkipReason> filter_decision(std::size_t prediction, std::size_t label, std::span<const double> scores,
                                          std::span<const double> truth, ConceptKind kind, double threshold = 0.5);

std::optional<SkipReason> sample_filter(const CbmModel& model, const ConceptSample& sample, double threshold = 0.5);

// One decision per sample, batched through the model.
std::vector<std::optional<SkipReason>> filter_samples(const CbmModel& model, std::span<const ConceptSample> samples,
                                                      double threshold = 0.5);

// Indices j with scores[j] >= threshold.
std::vector<std::size_t> presence_set(std::span<const double> scores, double threshold = 0.5);

// Binary: share of concepts whose presence changed. Continuous: share with
// |orig - pert| > delta_thresh. Throws std::invalid_argument on a length
// mismatch or empty input.
double pct_flipped(std::span<const double> orig, std::span<const double> pert, ConceptKind kind,
                   double threshold = 0.5, double delta_thresh = 2.0);

// |pert \ orig| / |orig| and |orig & pert| / |orig|; nullopt when orig is empty.
std::optional<double> pct_introduced(std::span<const std::size_t> orig, std::span<const std::size_t> pert);
std::optional<double> pct_retained(std::span<const std::size_t> orig, std::span<const std::size_t> pert);

// |orig & pert| / |orig | pert|, and 1 when both are empty.
double jaccard(std::span<const std::size_t> orig, std::span<const std::size_t> pert);

struct DeltaStats {
  double avg = 0.0;
  double min = 0.0;
};
DeltaStats delta_stats(std::span<const double> orig, std::span<const double> pert);

// Mean and population standard deviation.
struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
  std::size_t n = 0;
};
MeanStd mean_std(std::span<const double> values);

}  // namespace cbm

#endif  // CBMLAB_METRICS_HPP
