// Concept bottleneck model: a concept network g (image -> concept logits)
// followed by a predictor f (concept activations -> task outputs).

#ifndef CBMLAB_MODEL_HPP
#define CBMLAB_MODEL_HPP

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cbmlab/dataset.hpp"
#include "cbmlab/tensor.hpp"

namespace cbm {

enum class ConceptNet {
  kConv,    // conv3x3 -> maxpool2 -> relu -> conv3x3 -> relu -> dense
  kLinear,  // dense on the flattened image
};

enum class TaskKind { kClassification, kRegression };

std::string to_string(ConceptNet net);
std::string to_string(TaskKind task);
ConceptNet concept_net_from_string(const std::string& s);
TaskKind task_kind_from_string(const std::string& s);

struct Architecture {
  ConceptNet concept_net = ConceptNet::kConv;
  ImageShape input{1, 28, 28};
  std::size_t conv_channels = 32;
  std::size_t num_concepts = 12;
  std::size_t num_outputs = 10;  // 1 for regression
  ConceptKind concept_kind = ConceptKind::kBinary;
  TaskKind task = TaskKind::kClassification;

  void validate() const;
  bool operator==(const Architecture&) const = default;
};

// The full-size ConceptMNIST network and its small blob-corpus sibling.
Architecture cmnist_architecture();
Architecture blob_architecture();

struct NamedParam {
  std::string name;
  Tensor value;
};

struct ForwardPass {
  Tensor concept_logits;
  Tensor concept_scores;  // sigmoid(logits) for binary concepts, logits otherwise
  Tensor outputs;         // class logits or the regression value
};

class CbmModel {
 public:
  CbmModel() = default;
  // Uniform(+-sqrt(1/fan_in)) initialisation; g and f draw from separate
  // streams so either can be re-seeded without touching the other.
  CbmModel(const Architecture& arch, std::uint64_t g_seed, std::uint64_t f_seed);

  const Architecture& arch() const { return arch_; }

  std::vector<Tensor> g_params() const;
  std::vector<Tensor> f_params() const;
  std::vector<Tensor> params() const;
  const std::vector<NamedParam>& named_g() const { return g_; }
  const std::vector<NamedParam>& named_f() const { return f_; }
  std::vector<NamedParam>& named_g() { return g_; }
  std::vector<NamedParam>& named_f() { return f_; }

  Tensor concept_logits(Tape& tape, const Tensor& images) const;
  Tensor concept_scores(Tape& tape, const Tensor& logits) const;
  Tensor predict(Tape& tape, const Tensor& scores) const;
  ForwardPass forward(Tape& tape, const Tensor& images) const;

  // Deep copy. A frozen copy has requires_grad off on every parameter, so
  // it can be shared read-only across threads and only input gradients
  // are computed.
  CbmModel clone() const;
  CbmModel frozen() const;

  void set_trainable(bool on);

  // Free-form provenance (paradigm, defense, seeds), persisted in checkpoints.
  std::map<std::string, std::string>& tags() { return tags_; }
  const std::map<std::string, std::string>& tags() const { return tags_; }

 private:
  Tensor param(const std::vector<NamedParam>& group, const std::string& name) const;

  Architecture arch_;
  std::vector<NamedParam> g_;
  std::vector<NamedParam> f_;
  std::map<std::string, std::string> tags_;
};

// Concept scores for a batch of images, as plain values.
std::vector<double> forward_concepts(const CbmModel& model, const Tensor& images);

// Index of the largest value; ties go to the lowest index.
std::size_t argmax(std::span<const double> values);

// Per-sample predictions and scores without gradient tracking.
struct Inference {
  std::vector<std::vector<double>> scores;
  std::vector<std::vector<double>> outputs;
  std::vector<std::size_t> predictions;  // argmax for classification, rounded value for regression
};
Inference infer(const CbmModel& model, std::span<const ConceptSample> samples, std::size_t batch_size = 256);

Tensor image_tensor(std::span<const double> pixels, ImageShape shape);

}  // namespace cbm

#endif  // CBMLAB_MODEL_HPP
