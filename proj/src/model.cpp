#include "cbmlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cbmlab/rng.hpp"

namespace cbm {

std::string to_string(ConceptNet net) { return net == ConceptNet::kConv ? "conv" : "linear"; }
std::string to_string(TaskKind task) {
  return task == TaskKind::kClassification ? "classification" : "regression";
}

ConceptNet concept_net_from_string(const std::string& s) {
  if (s == "conv") return ConceptNet::kConv;
  if (s == "linear") return ConceptNet::kLinear;
  throw std::invalid_argument("unknown concept network '" + s + "'");
}

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "classification") return TaskKind::kClassification;
  if (s == "regression") return TaskKind::kRegression;
  throw std::invalid_argument("unknown task kind '" + s + "'");
}

void Architecture::validate() const {
  if (input.numel() == 0) throw std::invalid_argument("input shape must be non-empty");
  if (num_concepts == 0 || num_outputs == 0) throw std::invalid_argument("concept and output counts must be positive");
  if (task == TaskKind::kRegression && num_outputs != 1)
    throw std::invalid_argument("regression head must have exactly one output");
  if (concept_net == ConceptNet::kConv) {
    if (conv_channels == 0) throw std::invalid_argument("conv channels must be positive");
    if (input.height % 2 || input.width % 2)
      throw std::invalid_argument("conv concept network needs even image extents");
  }
}

Architecture cmnist_architecture() { return Architecture{}; }

Architecture blob_architecture() {
  Architecture a;
  a.input = {1, 12, 12};
  a.conv_channels = 8;
  return a;
}

namespace {

Tensor uniform_param(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

std::vector<Tensor> values(const std::vector<NamedParam>& group) {
  std::vector<Tensor> out;
  for (const auto& p : group) out.push_back(p.value);
  return out;
}

std::vector<NamedParam> deep_copy(const std::vector<NamedParam>& group, bool trainable) {
  std::vector<NamedParam> out;
  for (const auto& p : group) out.push_back({p.name, p.value.clone(trainable)});
  return out;
}

}  // namespace

CbmModel::CbmModel(const Architecture& arch, std::uint64_t g_seed, std::uint64_t f_seed) : arch_(arch) {
  arch_.validate();
  Rng grng(mix_seed(g_seed, 0x9));
  const std::size_t t = arch_.num_concepts;
  if (arch_.concept_net == ConceptNet::kConv) {
    const std::size_t c = arch_.input.channels, ch = arch_.conv_channels;
    g_.push_back({"g.conv1.weight", uniform_param({ch, c, 3, 3}, c * 9, grng)});
    g_.push_back({"g.conv1.bias", uniform_param({ch}, c * 9, grng)});
    g_.push_back({"g.conv2.weight", uniform_param({ch, ch, 3, 3}, ch * 9, grng)});
    g_.push_back({"g.conv2.bias", uniform_param({ch}, ch * 9, grng)});
    const std::size_t flat = ch * (arch_.input.height / 2) * (arch_.input.width / 2);
    g_.push_back({"g.fc.weight", uniform_param({flat, t}, flat, grng)});
    g_.push_back({"g.fc.bias", uniform_param({t}, flat, grng)});
  } else {
    const std::size_t d = arch_.input.numel();
    g_.push_back({"g.fc.weight", uniform_param({d, t}, d, grng)});
    g_.push_back({"g.fc.bias", uniform_param({t}, d, grng)});
  }
  Rng frng(mix_seed(f_seed, 0xf));
  f_.push_back({"f.fc.weight", uniform_param({t, arch_.num_outputs}, t, frng)});
  f_.push_back({"f.fc.bias", uniform_param({arch_.num_outputs}, t, frng)});
}

std::vector<Tensor> CbmModel::g_params() const { return values(g_); }
std::vector<Tensor> CbmModel::f_params() const { return values(f_); }

std::vector<Tensor> CbmModel::params() const {
  auto out = g_params();
  for (auto& p : f_params()) out.push_back(p);
  return out;
}

Tensor CbmModel::param(const std::vector<NamedParam>& group, const std::string& name) const {
  for (const auto& p : group)
    if (p.name == name) return p.value;
  throw std::logic_error("model has no parameter " + name);
}

Tensor CbmModel::concept_logits(Tape& tape, const Tensor& images) const {
  const auto& in = arch_.input;
  if (images.rank() != 4 || images.dim(1) != in.channels || images.dim(2) != in.height || images.dim(3) != in.width)
    throw ShapeError("model expects images [B x " + std::to_string(in.channels) + " x " + std::to_string(in.height) +
                     " x " + std::to_string(in.width) + "], got " + shape_str(images.shape()));
  if (arch_.concept_net == ConceptNet::kLinear)
    return dense(tape, flatten(tape, images), param(g_, "g.fc.weight"), param(g_, "g.fc.bias"));
  // max-pool before the first relu: the two commute and the relu runs on a
  // quarter of the activations.
  auto h = conv2d(tape, images, param(g_, "g.conv1.weight"), param(g_, "g.conv1.bias"));
  h = relu(tape, maxpool2(tape, h));
  h = relu(tape, conv2d(tape, h, param(g_, "g.conv2.weight"), param(g_, "g.conv2.bias")));
  return dense(tape, flatten(tape, h), param(g_, "g.fc.weight"), param(g_, "g.fc.bias"));
}

Tensor CbmModel::concept_scores(Tape& tape, const Tensor& logits) const {
  return arch_.concept_kind == ConceptKind::kBinary ? sigmoid(tape, logits) : logits;
}

Tensor CbmModel::predict(Tape& tape, const Tensor& scores) const {
  return dense(tape, scores, param(f_, "f.fc.weight"), param(f_, "f.fc.bias"));
}

ForwardPass CbmModel::forward(Tape& tape, const Tensor& images) const {
  ForwardPass out;
  out.concept_logits = concept_logits(tape, images);
  out.concept_scores = concept_scores(tape, out.concept_logits);
  out.outputs = predict(tape, out.concept_scores);
  return out;
}

CbmModel CbmModel::clone() const {
  CbmModel m;
  m.arch_ = arch_;
  m.g_ = deep_copy(g_, true);
  m.f_ = deep_copy(f_, true);
  m.tags_ = tags_;
  return m;
}

CbmModel CbmModel::frozen() const {
  CbmModel m = clone();
  m.set_trainable(false);
  return m;
}

void CbmModel::set_trainable(bool on) {
  for (auto& p : g_) p.value.set_requires_grad(on);
  for (auto& p : f_) p.value.set_requires_grad(on);
}

std::vector<double> forward_concepts(const CbmModel& model, const Tensor& images) {
  Tape tape(Tape::Mode::kInference);
  auto scores = model.concept_scores(tape, model.concept_logits(tape, images));
  return {scores.data().begin(), scores.data().end()};
}

std::size_t argmax(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("argmax of an empty range");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

Tensor image_tensor(std::span<const double> pixels, ImageShape shape) {
  if (pixels.size() != shape.numel())
    throw ShapeError("image has " + std::to_string(pixels.size()) + " pixels, expected " +
                     std::to_string(shape.numel()));
  return Tensor::from({1, shape.channels, shape.height, shape.width}, {pixels.begin(), pixels.end()});
}

Inference infer(const CbmModel& model, std::span<const ConceptSample> samples, std::size_t batch_size) {
  Inference out;
  const auto& arch = model.arch();
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(samples.size(), start + batch_size); ++i) idx.push_back(i);
    Batch batch = make_batch(samples, idx, arch.input);
    Tape tape(Tape::Mode::kInference);
    auto pass = model.forward(tape, batch.images);
    const std::size_t t = arch.num_concepts, k = arch.num_outputs;
    for (std::size_t r = 0; r < idx.size(); ++r) {
      auto s = pass.concept_scores.data().subspan(r * t, t);
      auto o = pass.outputs.data().subspan(r * k, k);
      out.scores.emplace_back(s.begin(), s.end());
      out.outputs.emplace_back(o.begin(), o.end());
      if (arch.task == TaskKind::kClassification) {
        out.predictions.push_back(argmax(o));
      } else {
        out.predictions.push_back(static_cast<std::size_t>(std::max(0.0, std::round(o[0]))));
      }
    }
  }
  return out;
}

}  // namespace cbm
