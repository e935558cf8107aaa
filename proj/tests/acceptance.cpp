// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
// Criteria 4-8 and 10 train and attack the C-MNIST preset for three seeds,
// which takes most of an hour on one core. Outputs go to --out; pass
// --reuse to keep matching checkpoints from an earlier run.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "cbmlab/checkpoint.hpp"
#include "cbmlab/harness.hpp"
#include "suites.hpp"

namespace fs = std::filesystem;
using namespace cbm;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

std::string format(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string suite_fingerprint(const std::vector<testing::SuiteResult>& rs) {
  std::string s;
  for (const auto& r : rs) s += r.name + (r.pass ? " ok " : " bad ") + r.detail + "\n";
  return s;
}

std::vector<std::vector<double>> snapshot(const std::vector<Tensor>& params) {
  std::vector<std::vector<double>> out;
  for (const auto& p : params) out.emplace_back(p.data().begin(), p.data().end());
  return out;
}

// Mean over seeds of one attack metric for one model.
struct Means {
  const std::vector<ModelReport>& reports;

  double of(const std::string& model, const std::string& attack,
            const std::function<double(const AttackReport&)>& metric) const {
    double sum = 0;
    std::size_t n = 0;
    for (const auto& r : reports)
      if (r.model == model)
        for (const auto& a : r.attacks)
          if (a.attack == attack) {
            sum += metric(a);
            ++n;
          }
    return n ? sum / static_cast<double>(n) : std::nan("");
  }
};

// Lines of a samples CSV whose sample_id is in `ids`, header excluded.
std::vector<std::string> rows_for(const std::string& csv, const std::set<std::string>& ids) {
  std::vector<std::string> out;
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::istringstream fields(line);
    std::string model, attack, id;
    std::getline(fields, model, ',');
    std::getline(fields, attack, ',');
    std::getline(fields, id, ',');
    if (ids.count(id)) out.push_back(line);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cbmlab acceptance run"};
  fs::path out = "acceptance-runs";
  bool reuse = false;
  app.add_option("--out", out, "working directory for checkpoints and reports");
  app.add_flag("--reuse", reuse, "reuse checkpoints trained with identical settings");
  CLI11_PARSE(app, argc, argv);

  std::vector<std::pair<int, Verdict>> verdicts;
  auto report = [&](int id, const std::string& what, Verdict v) {
    std::printf("%s criterion %d (%s): %s\n", v.pass ? "PASS" : "FAIL", id, what.c_str(), v.detail.c_str());
    std::fflush(stdout);
    verdicts.emplace_back(id, std::move(v));
  };
  auto guarded = [&](int id, const std::string& what, const std::function<Verdict()>& body) {
    try {
      report(id, what, body());
    } catch (const std::exception& e) {
      report(id, what, {false, std::string("threw: ") + e.what()});
    }
  };

  // ---- 1-3: property suites ----------------------------------------------
  std::vector<testing::SuiteResult> grad, attack_oracle, metric_oracle;
  guarded(1, "gradient checks", [&] {
    const auto t = std::chrono::steady_clock::now();
    grad = testing::gradient_suite(20);
    const double secs = seconds_since(t);
    bool ok = grad.size() == 15 && secs < 60;
    double worst = 0;
    std::string failing;
    for (const auto& r : grad) {
      ok = ok && r.pass && r.cases == 20;
      worst = std::max(worst, r.worst);
      if (!r.pass) failing += " " + r.name;
    }
    return Verdict{ok, format("%zu ops x 20 shapes, worst rel error %.2e (< 1e-4), %.1f s%s", grad.size(), worst, secs,
                              failing.empty() ? "" : (", failing:" + failing).c_str())};
  });
  guarded(2, "attack grid oracle", [&] {
    const auto t = std::chrono::steady_clock::now();
    attack_oracle = {testing::attack_oracle_suite(50)};
    const double secs = seconds_since(t);
    const auto& r = attack_oracle[0];
    return Verdict{r.pass && r.cases == 50 && secs < 60, format("%s, %.1f s", r.detail.c_str(), secs)};
  });
  guarded(3, "metric oracles", [&] {
    metric_oracle = {testing::metric_oracle_suite(1000)};
    const auto& r = metric_oracle[0];
    return Verdict{r.pass && r.cases == 1000, r.detail};
  });

  // ---- 4: training benchmark ---------------------------------------------
  const auto data_root = default_data_root();
  ExperimentConfig config = preset_config("cmnist");
  config.out = out / "cmnist";
  config.reuse_checkpoints = true;
  if (!reuse) fs::remove_all(config.out);
  const fs::path joint0 = config.out / "seed-0" / (model_label(config, "standard") + ".ckpt");

  std::optional<DatasetSplit> data;
  guarded(4, "joint C-MNIST training", [&] {
    config.validate(data_root);
    data = load_data(config, data_root);
    const auto t = std::chrono::steady_clock::now();
    const auto model = train_model(config, *data, "standard", 0);
    const double secs = seconds_since(t);
    fs::create_directories(joint0.parent_path());
    save_checkpoint(joint0, make_checkpoint(config, *data, model, "standard", 0));
    const auto e = evaluate(model, data->test);
    const bool ok = e.task_error <= 0.05 && e.concept_error <= 0.06 && secs <= 20 * 60 &&
                    config.train.epochs <= 20 && data->train.size() <= 10000;
    return Verdict{ok, format("seed 0, %zu train images, %zu epochs: task error %.4f (<= 0.05), concept error %.4f "
                              "(<= 0.06), %.0f s (<= 1200)",
                              data->train.size(), config.train.epochs, e.task_error, e.concept_error, secs)};
  });

  // ---- 5-8: attacks on three seeds ---------------------------------------
  std::optional<ExperimentResult> run;
  double run_secs = 0;
  try {
    const auto t = std::chrono::steady_clock::now();
    run = run_experiment(config, data_root);
    run_secs = seconds_since(t);
    std::printf("info: 3-seed C-MNIST run took %.0f s, outputs in %s\n", run_secs, config.out.string().c_str());
  } catch (const std::exception& e) {
    std::printf("info: C-MNIST run failed: %s\n", e.what());
  }
  auto need_run = [&](int id, const std::string& what, const std::function<Verdict(const ExperimentResult&)>& body) {
    guarded(id, what, [&] {
      if (!run) return Verdict{false, "the C-MNIST run failed"};
      if (!run->failures.empty()) return Verdict{false, "seed " + std::to_string(run->failures.begin()->first) +
                                                            " failed: " + run->failures.begin()->second};
      return body(*run);
    });
  };
  const std::string joint = model_label(config, "standard"), robust = model_label(config, "rcl");
  if (run) {
    for (const auto& r : run->reports)
      std::printf("info: seed %llu %-10s task error %.4f, concept error %.4f, %zu of %zu drawn samples attacked\n",
                  static_cast<unsigned long long>(r.seed), r.model.c_str(), r.task_error, r.concept_error, r.kept,
                  r.drawn);
  }

  need_run(5, "erasure gap", [&](const ExperimentResult& r) {
    std::size_t min_kept = SIZE_MAX;
    for (const auto& m : r.reports) min_kept = std::min(min_kept, m.kept);
    const Means mean{r.reports};
    auto flip = [](const AttackReport& a) { return a.flip_pct; };
    auto per_sample = [](const AttackReport& a) { return a.flip_pct_per_sample; };
    const double j = mean.of(joint, "erasure", flip), h = mean.of(robust, "erasure", flip);
    const double b = mean.of(joint, "baseline", flip);
    const bool ok = r.reports.size() == 6 && min_kept >= 200 && j >= 40 && h <= 30 && j - h >= 15 && b <= 10;
    return Verdict{ok, format("3 seeds, >= %zu filtered samples each: joint %.1f%% (>= 40), rcl-hybrid %.1f%% (<= 30), "
                              "gap %.1f pp (>= 15), beta=0 baseline on joint %.1f%% (<= 10); per-sample averaging: "
                              "joint %.1f%%, rcl-hybrid %.1f%%",
                              min_kept, j, h, j - h, b, mean.of(joint, "erasure", per_sample),
                              mean.of(robust, "erasure", per_sample))};
  });
  need_run(6, "introduction gap", [&](const ExperimentResult& r) {
    const Means mean{r.reports};
    auto intro = [](const AttackReport& a) { return a.introduced_pct.value_or(std::nan("")); };
    auto kept = [](const AttackReport& a) { return a.retained_pct.value_or(std::nan("")); };
    const double j = mean.of(joint, "introduction", intro), h = mean.of(robust, "introduction", intro);
    const double jr = mean.of(joint, "introduction", kept), hr = mean.of(robust, "introduction", kept);
    const bool ok = j >= 2 * h && jr >= 85 && hr >= 85;
    return Verdict{ok, format("introduced joint %.2f%% vs rcl-hybrid %.2f%% (ratio %.1f, >= 2); retained %.1f%% and "
                              "%.1f%% (>= 85)",
                              j, h, h > 0 ? j / h : INFINITY, jr, hr)};
  });
  need_run(7, "confounding gap", [&](const ExperimentResult& r) {
    const Means mean{r.reports};
    auto jsi = [](const AttackReport& a) { return a.jsi; };
    const double j = mean.of(joint, "confounding", jsi), h = mean.of(robust, "confounding", jsi);
    return Verdict{h - j >= 0.08, format("JSI rcl-hybrid %.3f - joint %.3f = %.3f (>= 0.08)", h, j, h - j)};
  });
  need_run(8, "constraint invariants", [&](const ExperimentResult& r) {
    std::size_t runs = 0, budget = 0, range = 0, prediction = 0;
    double max_linf = 0;
    bool over = false;
    for (const auto& m : r.reports)
      for (const auto& a : m.attacks) {
        runs += a.runs;
        budget += a.budget_violations;
        range += a.range_violations;
        prediction += a.prediction_changes;
        max_linf = std::max(max_linf, a.max_linf);
        for (const auto& na : config.attacks)
          if (na.name == a.attack && a.max_linf > na.spec.budget) over = true;
      }
    const bool ok = runs > 0 && budget + range + prediction == 0 && !over;
    return Verdict{ok, format("%zu attack runs: %zu budget, %zu range, %zu prediction violations; max L-inf %.4f "
                              "(budget 0.12)",
                              runs, budget, range, prediction, max_linf)};
  });

  // ---- 9: paradigm properties on the C-MNIST architecture ----------------
  guarded(9, "paradigm properties", [&] {
    if (!data) data = load_data(config, data_root);
    const std::span<const ConceptSample> subset(data->train.data(), std::min<std::size_t>(512, data->train.size()));
    const auto arch = architecture_for(config, *data);

    TrainConfig hybrid = config.train;
    hybrid.paradigm = Paradigm::kHybrid;
    hybrid.epochs = 2;
    CbmModel h(arch, 1, 2);
    const auto f0 = snapshot(h.f_params());
    std::vector<std::vector<double>> f_at_switch;
    train(h, subset, hybrid, [&](Tape&, const CbmModel& m, const Batch&, const Phase& phase) {
      if (phase.name != "concept" && f_at_switch.empty()) f_at_switch = snapshot(m.f_params());
      return ExtraTerm{};
    });
    const bool frozen = f_at_switch == f0 && snapshot(h.f_params()) != f0;

    TrainConfig seq = config.train;
    seq.paradigm = Paradigm::kSequential;
    seq.epochs = 2;
    CbmModel a(arch, 5, 6), b(arch, 5, 606);
    train(a, subset, seq);
    train(b, subset, seq);
    const bool invariant = snapshot(a.g_params()) == snapshot(b.g_params()) && snapshot(a.f_params()) != snapshot(b.f_params());
    return Verdict{frozen && invariant, format("hybrid phase 1 leaves f bit-identical: %s; sequential g identical "
                                               "under f seeds 6 and 606: %s",
                                               frozen ? "yes" : "no", invariant ? "yes" : "no")};
  });

  // ---- 10: determinism ---------------------------------------------------
  guarded(10, "determinism", [&] {
    std::vector<std::string> problems;
    if (suite_fingerprint(grad) != suite_fingerprint(testing::gradient_suite(20))) problems.push_back("gradient suite");
    if (suite_fingerprint(attack_oracle) != suite_fingerprint({testing::attack_oracle_suite(50)}))
      problems.push_back("attack oracle");
    if (suite_fingerprint(metric_oracle) != suite_fingerprint({testing::metric_oracle_suite(1000)}))
      problems.push_back("metric oracle");
    if (!run) throw std::runtime_error("the C-MNIST run failed");

    // Retrain joint seed 0 and compare checkpoint bytes.
    const fs::path again = out / "determinism";
    fs::remove_all(again);
    fs::create_directories(again);
    const auto model = train_model(config, *data, "standard", 0);
    save_checkpoint(again / "joint.ckpt", make_checkpoint(config, *data, model, "standard", 0));
    if (slurp(again / "joint.ckpt") != slurp(joint0)) problems.push_back("joint checkpoint");

    // Re-attack a prefix of the seed-0 draw with three workers.
    ExperimentConfig sub = config;
    sub.samples = 40;
    sub.workers = 3;
    const auto seed0 = config.out / "seed-0";
    std::set<std::string> ids;
    for (auto i : draw_samples(data->test.size(), sub.samples, 0)) ids.insert(std::to_string(i));
    std::size_t rows = 0;
    for (const auto& label : {joint, robust}) {
      const auto ck = load_checkpoint(seed0 / (label + ".ckpt"));
      attack_model(sub, *data, ck.model, label, 0, again);
      const auto expect = rows_for(slurp(seed0 / (label + ".samples.csv")), ids);
      const auto got = rows_for(slurp(again / (label + ".samples.csv")), ids);
      rows += got.size();
      if (expect.empty() || expect != got) problems.push_back(label + " rows with 3 workers");
    }

    // Summaries rebuilt from the per-seed report files.
    if (summary_csv(write_summary(config.out)) != summary_csv(run->summary)) problems.push_back("summary from reports");
    if (slurp(config.out / "summary.csv") != summary_csv(run->summary)) problems.push_back("summary.csv");

    std::string detail = format("suites rerun, joint seed 0 retrained (checkpoint bytes), %zu attack rows re-run "
                                "with 3 workers, summary rebuilt from reports",
                                rows);
    for (const auto& p : problems) detail += "; MISMATCH " + p;
    return Verdict{problems.empty(), detail};
  });

  const auto failed = std::count_if(verdicts.begin(), verdicts.end(), [](const auto& v) { return !v.second.pass; });
  std::printf("%zu of %zu criteria passed\n", verdicts.size() - failed, verdicts.size());
  return failed ? 1 : 0;
}
