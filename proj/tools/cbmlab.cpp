// cbmlab: command-line front end for training, attacking and reporting.
//
// Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "cbmlab/checkpoint.hpp"
#include "cbmlab/harness.hpp"
#include "suites.hpp"

namespace fs = std::filesystem;
using namespace cbm;

namespace {

constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;

struct CommonOptions {
  std::string config;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "experiment config file (INI)")->check(CLI::ExistingFile);
  cmd->add_option("--preset", o.preset, "built-in defaults")->check(CLI::IsMember({"cmnist", "blob"}));
  cmd->add_option("--seed", o.seed, "run this seed only");
  cmd->add_option("--out", o.out, "output directory");
}

ExperimentConfig resolve_config(const CommonOptions& o, const fs::path& data_root) {
  const std::string preset = o.preset.empty() ? "cmnist" : o.preset;
  ExperimentConfig c = o.config.empty() ? preset_config(preset) : load_config(o.config, preset);
  if (o.seed) c.seeds = {*o.seed};
  if (!o.out.empty()) c.out = o.out;
  c.validate(data_root);
  return c;
}

fs::path seed_dir(const ExperimentConfig& c, std::uint64_t seed) { return c.out / ("seed-" + std::to_string(seed)); }

void print_eval(const std::string& label, std::uint64_t seed, const CbmModel& m, const DatasetSplit& data) {
  const auto e = evaluate(m, data.test);
  std::printf("seed %llu %s: test task error %.4f, concept error %.4f\n", static_cast<unsigned long long>(seed),
              label.c_str(), e.task_error, e.concept_error);
}

int cmd_synth(const ExperimentConfig& c, const fs::path& data_root) {
  fs::create_directories(c.out);
  const auto data = load_data(c, data_root);
  std::ofstream csv(c.out / "concepts.csv");
  csv << "split,index,label";
  for (const auto& n : data.spec.names) csv << ',' << n;
  csv << '\n';
  IdxData all{data.image.height, data.image.width, {}};
  const std::pair<const char*, const std::vector<ConceptSample>*> parts[] = {
      {"train", &data.train}, {"val", &data.val}, {"test", &data.test}};
  for (const auto& [name, samples] : parts)
    for (std::size_t i = 0; i < samples->size(); ++i) {
      const auto& s = (*samples)[i];
      csv << name << ',' << i << ',' << s.label;
      for (double v : s.concepts) csv << ',' << v;
      csv << '\n';
      all.items.push_back({s.image, s.label});
    }
  if (!csv) throw std::runtime_error("cannot write concepts.csv");
  if (c.data.kind == DataKind::kBlob)
    write_idx(c.out / "images-idx3-ubyte.gz", c.out / "labels-idx1-ubyte.gz", all);
  std::printf("%zu samples (%zu/%zu/%zu) written to %s\n", data.size(), data.train.size(), data.val.size(),
              data.test.size(), c.out.string().c_str());
  return 0;
}

int cmd_train(const ExperimentConfig& c, const fs::path& data_root, const std::string& kind) {
  const auto data = load_data(c, data_root);
  for (auto seed : c.seeds) {
    const auto label = model_label(c, kind);
    auto model = train_model(c, data, kind, seed);
    fs::create_directories(seed_dir(c, seed));
    save_checkpoint(seed_dir(c, seed) / (label + ".ckpt"), make_checkpoint(c, data, model, kind, seed));
    print_eval(label, seed, model, data);
  }
  return 0;
}

int cmd_attack(const ExperimentConfig& c, const fs::path& data_root, const std::string& checkpoint) {
  const auto data = load_data(c, data_root);
  std::vector<std::pair<fs::path, std::optional<std::uint64_t>>> jobs;
  if (!checkpoint.empty()) {
    jobs.emplace_back(checkpoint, std::nullopt);
  } else {
    for (auto seed : c.seeds)
      for (const auto& kind : c.models) jobs.emplace_back(seed_dir(c, seed) / (model_label(c, kind) + ".ckpt"), seed);
  }
  for (const auto& [path, seed_hint] : jobs) {
    if (!fs::exists(path)) throw CheckpointError("missing checkpoint " + path.string());
    auto ck = load_checkpoint(path);
    const std::uint64_t seed = seed_hint.value_or(ck.seed);
    std::string label = path.stem().string();
    const auto dir = seed_dir(c, seed);
    const auto rep = attack_model(c, data, ck.model, label, seed, dir);
    std::ofstream(dir / (label + ".report.json")) << report_json(rep);
    std::printf("seed %llu %s: %zu of %zu drawn samples attacked\n", static_cast<unsigned long long>(seed),
                label.c_str(), rep.kept, rep.drawn);
    if (rep.no_attackable_samples) std::printf("  no attackable samples after filtering\n");
    for (const auto& a : rep.attacks)
      std::printf("  %-14s runs %4zu  flip%% %6.2f  introduced%% %7.2f  retained%% %6.2f  jsi %.3f\n", a.attack.c_str(),
                  a.runs, a.flip_pct, a.introduced_pct.value_or(0.0), a.retained_pct.value_or(0.0), a.jsi);
  }
  return 0;
}

void print_summary(const std::vector<SummaryCell>& cells) {
  for (const auto& s : cells)
    std::printf("%-13s %-12s %-13s %-20s %10.4f +- %.4f (%zu seeds)\n", s.table.c_str(), s.model.c_str(),
                s.attack.c_str(), s.metric.c_str(), s.mean, s.std, s.seeds);
}

int cmd_selfcheck() {
  bool ok = true;
  auto show = [&](const testing::SuiteResult& r) {
    std::printf("%s %-22s %s\n", r.pass ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str());
    ok = ok && r.pass;
  };
  for (const auto& r : testing::gradient_suite()) show(r);
  show(testing::attack_oracle_suite());
  show(testing::metric_oracle_suite());
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Concept bottleneck model robustness lab"};
  app.require_subcommand(1);
  CommonOptions opts;
  std::string checkpoint;

  auto* synth = app.add_subcommand("synth-data", "write the corpus and its concept annotations");
  auto* train_cmd = app.add_subcommand("train", "train the standard model for each seed");
  auto* rcl_cmd = app.add_subcommand("rcl-train", "train the RCL-hardened model for each seed");
  auto* attack = app.add_subcommand("attack", "attack trained checkpoints and write per-sample reports");
  auto* report = app.add_subcommand("report", "aggregate per-seed reports into summary.csv and summary.json");
  auto* run = app.add_subcommand("run", "train, attack and report every seed in one go");
  auto* selfcheck = app.add_subcommand("selfcheck", "gradient, attack-oracle and metric-oracle suites");
  auto* show = app.add_subcommand("show-config", "print the resolved config in canonical form, and its hash");
  for (auto* cmd : {synth, train_cmd, rcl_cmd, attack, report, run, show}) add_common(cmd, opts);
  attack->add_option("--checkpoint", checkpoint, "attack this checkpoint instead of the configured models");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigError;
  }

  try {
    if (selfcheck->parsed()) return cmd_selfcheck();
    const auto data_root = default_data_root();
    const auto config = resolve_config(opts, data_root);
    if (show->parsed()) {
      std::printf("# config hash %s\n%s", config_hash(config).c_str(), to_ini(config).c_str());
      return 0;
    }
    if (synth->parsed()) return cmd_synth(config, data_root);
    if (train_cmd->parsed()) return cmd_train(config, data_root, "standard");
    if (rcl_cmd->parsed()) return cmd_train(config, data_root, "rcl");
    if (attack->parsed()) return cmd_attack(config, data_root, checkpoint);
    if (report->parsed()) {
      print_summary(write_summary(config.out));
      return 0;
    }
    if (run->parsed()) {
      const auto result = run_experiment(config, data_root);
      for (const auto& [seed, err] : result.failures) std::fprintf(stderr, "seed %llu failed: %s\n",
                                                                   static_cast<unsigned long long>(seed), err.c_str());
      print_summary(result.summary);
      std::printf("config hash %s, outputs in %s\n", config_hash(config).c_str(), config.out.string().c_str());
      return 0;
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfigError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntimeError;
  }
  return kConfigError;
}
