#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <limits>
#include <map>

#include "cbmlab/train.hpp"
#include "toy_models.hpp"

using namespace cbm;
using cbm::testing::linear_arch;
using cbm::testing::set_linear;

namespace {

std::vector<std::vector<double>> snapshot(const std::vector<Tensor>& params) {
  std::vector<std::vector<double>> out;
  for (const auto& p : params) out.emplace_back(p.data().begin(), p.data().end());
  return out;
}

const DatasetSplit& blobs() {
  static const auto split = synth_blob_dataset(600, 21);
  return split;
}

}  // namespace

TEST_CASE("zero concept network gives 0.5 scores") {
  CbmModel m(blob_architecture(), 3, 4);
  for (auto& p : m.g_params())
    for (auto& v : p.mutable_data()) v = 0.0;
  const auto s = forward_concepts(m, make_batch(blobs().test, std::vector<std::size_t>{0, 1}, blobs().image).images);
  CHECK(s.size() == 24);
  for (double v : s) CHECK(v == 0.5);
}

TEST_CASE("continuous concepts pass the pre-activation through") {
  CbmModel m(linear_arch(2, 2, 2, ConceptKind::kContinuous), 0, 0);
  set_linear(m, {1, 0, 0, 1}, {0, 0}, {1, 0, 0, 1}, {0, 0});
  const auto s = forward_concepts(m, image_tensor(std::vector<double>{0.3, -0.7}, m.arch().input));
  CHECK(s == std::vector<double>{0.3, -0.7});
}

TEST_CASE("forward rejects a wrong input shape") {
  CbmModel m(blob_architecture(), 0, 0);
  Tape tape;
  CHECK_THROWS_AS(m.forward(tape, Tensor::zeros({1, 1, 10, 12})), ShapeError);
  CHECK_THROWS_AS(image_tensor(std::vector<double>(5), m.arch().input), ShapeError);
}

TEST_CASE("architecture validation") {
  Architecture a;
  a.task = TaskKind::kRegression;
  CHECK_THROWS_AS(a.validate(), std::invalid_argument);
  a = {};
  a.input = {1, 7, 7};
  CHECK_THROWS_AS(a.validate(), std::invalid_argument);
  a.concept_net = ConceptNet::kLinear;
  CHECK_NOTHROW(a.validate());
  CHECK(cmnist_architecture().conv_channels == 32);
  CHECK(cmnist_architecture().num_concepts == 12);
}

TEST_CASE("initialisation is seeded per sub-network") {
  CbmModel a(blob_architecture(), 1, 2), b(blob_architecture(), 1, 3), c(blob_architecture(), 5, 2);
  CHECK(snapshot(a.g_params()) == snapshot(b.g_params()));
  CHECK(snapshot(a.f_params()) != snapshot(b.f_params()));
  CHECK(snapshot(a.f_params()) == snapshot(c.f_params()));
  CHECK(snapshot(a.g_params()) != snapshot(c.g_params()));
  // fan-in: conv1 1*9, conv2 8*9, fc 8*6*6
  const std::map<std::string, double> fan_in{{"g.conv1.weight", 9},  {"g.conv1.bias", 9}, {"g.conv2.weight", 72},
                                             {"g.conv2.bias", 72},   {"g.fc.weight", 288}, {"g.fc.bias", 288}};
  for (const auto& p : a.named_g())
    for (double v : p.value.data()) CHECK(std::fabs(v) <= std::sqrt(1.0 / fan_in.at(p.name)));
}

TEST_CASE("clone is deep and frozen copies carry no gradients") {
  CbmModel a(blob_architecture(), 1, 2);
  auto b = a.clone();
  b.g_params()[0].mutable_data()[0] += 1.0;
  CHECK(a.g_params()[0].data()[0] != b.g_params()[0].data()[0]);
  const auto f = a.frozen();
  for (const auto& p : f.params()) CHECK_FALSE(p.requires_grad());
  for (const auto& p : a.params()) CHECK(p.requires_grad());
}

TEST_CASE("training schedules") {
  TrainConfig c;
  c.epochs = 5;
  c.paradigm = Paradigm::kHybrid;
  auto s = training_schedule(c);
  REQUIRE(s.size() == 2);
  CHECK(s[0].last_epoch == 3);
  CHECK_FALSE(s[0].update_f);
  CHECK(s[0].task_weight == 0.0);
  CHECK(s[0].concept_weight == 1.0);
  CHECK(s[1].first_epoch == 4);
  CHECK(s[1].lr == c.lr_finetune);
  CHECK(s[1].concept_weight == c.concept_weight);
  c.paradigm = Paradigm::kSequential;
  s = training_schedule(c);
  REQUIRE(s.size() == 2);
  CHECK(s[1].first_epoch == 6);
  CHECK(s[1].last_epoch == 10);
  CHECK_FALSE(s[1].update_g);
  CHECK(s[1].concept_weight == 0.0);
  c.paradigm = Paradigm::kJoint;
  CHECK(training_schedule(c).size() == 1);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  c.epochs = 1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.momentum = 1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.lr = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK(paradigm_from_string("hybrid") == Paradigm::kHybrid);
  CHECK_THROWS(paradigm_from_string("joint-ish"));
}

TEST_CASE("evaluation on perfect and tied predictors") {
  // Concept 0 copies pixel 0; class follows concept 0.
  CbmModel m(linear_arch(2, 2, 2, ConceptKind::kBinary), 0, 0);
  set_linear(m, {40, 0, 0, 40}, {-20, -20}, {-10, 10, 0, 0}, {5, -5});
  std::vector<ConceptSample> samples{{{1, 0}, 1, {1, 0}}, {{0, 1}, 0, {0, 1}}, {{1, 1}, 1, {1, 1}}};
  auto r = evaluate(m, samples);
  CHECK(r.task_error == 0.0);
  CHECK(r.concept_error == 0.0);

  // All scores exactly 0.5 count as present: balanced concepts give 50% error.
  set_linear(m, {0, 0, 0, 0}, {0, 0}, {0, 0, 0, 0}, {1, 0});
  std::vector<ConceptSample> balanced{{{0, 0}, 0, {1, 0}}, {{0, 0}, 0, {0, 1}}};
  r = evaluate(m, balanced);
  CHECK(r.concept_error == 0.5);
  CHECK(r.task_error == 0.0);
  CHECK_THROWS_AS(evaluate(m, std::vector<ConceptSample>{}), std::invalid_argument);
}

TEST_CASE("hybrid phase one leaves f untouched") {
  CbmModel m(blob_architecture(), 1, 2);
  const auto f0 = snapshot(m.f_params());
  const auto g0 = snapshot(m.g_params());
  std::vector<std::vector<double>> f_at_switch;
  TrainConfig c;
  c.paradigm = Paradigm::kHybrid;
  c.epochs = 2;
  auto hook = [&](Tape&, const CbmModel& model, const Batch&, const Phase& phase) {
    if (phase.name == "finetune" && f_at_switch.empty()) f_at_switch = snapshot(model.f_params());
    return ExtraTerm{};
  };
  const auto h = train(m, blobs().train, c, hook);
  REQUIRE(h.epochs.size() == 2);
  CHECK(h.epochs[0].phase == "concept");
  CHECK(h.epochs[1].phase == "finetune");
  CHECK(f_at_switch == f0);
  CHECK(snapshot(m.f_params()) != f0);
  CHECK(snapshot(m.g_params()) != g0);
  CHECK(m.tags().at("paradigm") == "hybrid");
}

TEST_CASE("sequential g does not depend on the f seed") {
  TrainConfig c;
  c.paradigm = Paradigm::kSequential;
  c.epochs = 2;
  CbmModel a(blob_architecture(), 7, 1), b(blob_architecture(), 7, 99);
  const auto h = train(a, blobs().train, c);
  train(b, blobs().train, c);
  CHECK(h.epochs.size() == 4);
  CHECK(snapshot(a.g_params()) == snapshot(b.g_params()));
  CHECK(snapshot(a.f_params()) != snapshot(b.f_params()));
}

TEST_CASE("joint training on blobs") {
  CbmModel m(blob_architecture(), 1, 2);
  TrainConfig c;
  c.seed = 5;
  const auto h = train(m, blobs(), c);
  const auto r = evaluate(m, blobs().test);
  MESSAGE("blob joint test errors " << r.task_error << " / " << r.concept_error);
  CHECK(r.task_error <= 0.10);
  CHECK(r.concept_error <= 0.10);
  CHECK(evaluate(m, blobs().train).concept_error < 0.1);

  REQUIRE(h.epochs.size() == 20);
  std::size_t transitions = 0, down = 0;
  for (std::size_t i = 0; i < h.epochs.size(); ++i) {
    const auto& e = h.epochs[i];
    CHECK(std::isfinite(e.task_loss));
    CHECK(std::isfinite(e.concept_loss));
    if (i == 0) continue;
    const auto& p = h.epochs[i - 1];
    ++transitions;
    const double before = p.task_loss + c.concept_weight * p.concept_loss;
    const double after = e.task_loss + c.concept_weight * e.concept_loss;
    down += after <= before;
  }
  CHECK(static_cast<double>(down) >= 0.8 * static_cast<double>(transitions));
}

TEST_CASE("training is reproducible") {
  TrainConfig c;
  c.epochs = 2;
  c.seed = 4;
  CbmModel a(blob_architecture(), 1, 2), b(blob_architecture(), 1, 2);
  train(a, blobs().train, c);
  train(b, blobs().train, c);
  CHECK(snapshot(a.params()) == snapshot(b.params()));
}

TEST_CASE("a non-finite loss aborts training") {
  CbmModel m(blob_architecture(), 1, 2);
  m.f_params()[0].mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
  TrainConfig c;
  c.epochs = 2;
  CHECK_THROWS_AS(train(m, blobs().train, c), TrainingDiverged);
  CHECK_THROWS_AS(train(m, std::vector<ConceptSample>{}, c), std::invalid_argument);
}

TEST_CASE("regression head trains and reports RMSE") {
  // Label = 3 * pixel 0 rounded, one continuous concept equal to pixel 0.
  Architecture a = linear_arch(2, 1, 1, ConceptKind::kContinuous);
  a.task = TaskKind::kRegression;
  std::vector<ConceptSample> samples;
  for (int i = 0; i <= 3; ++i)
    for (int k = 0; k < 8; ++k) samples.push_back({{i / 3.0, k / 8.0}, static_cast<std::size_t>(i), {i / 3.0}});
  CbmModel m(a, 1, 2);
  TrainConfig c;
  c.epochs = 200;
  c.batch_size = 8;
  c.lr = 0.01;
  train(m, samples, c);
  const auto r = evaluate(m, samples);
  MESSAGE("regression RMSE " << r.task_error << ", concept RMSE " << r.concept_error);
  CHECK(r.task_error < 0.2);
  CHECK(r.concept_error < 0.1);
}
