#include "cbmlab/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <tuple>

#include <openssl/evp.h>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "cbmlab/checkpoint.hpp"
#include "cbmlab/metrics.hpp"
#include "cbmlab/rng.hpp"
#include "json.hpp"

#ifndef CBMLAB_DEFAULT_DATA_ROOT
#define CBMLAB_DEFAULT_DATA_ROOT "data"
#endif
#ifndef CBMLAB_VERSION
#define CBMLAB_VERSION "0.0.0"
#endif

namespace cbm {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::string to_string(DataKind k) { return k == DataKind::kConceptMnist ? "cmnist" : "blob"; }

namespace {

DataKind data_kind_from_string(const std::string& s) {
  if (s == "cmnist") return DataKind::kConceptMnist;
  if (s == "blob") return DataKind::kBlob;
  throw ConfigError("unknown data kind '" + s + "' (expected cmnist or blob)");
}

// Shortest text that reads back to the same double.
std::string fmt(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

// Fixed precision for summaries.
std::string fmt_report(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (auto t = trim(item); !t.empty()) out.push_back(t);
  return out;
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? ", " : "") << v[i];
  return os.str();
}

std::vector<NamedAttack> preset_attacks() {
  AttackSpec erasure;
  erasure.goal = AttackGoal::kErasure;
  erasure.step_size = 1e-3;
  erasure.max_steps = 1000;
  erasure.budget = 0.12;
  erasure.prediction_term = PredictionTerm::kProbability;
  AttackSpec baseline = erasure;
  baseline.beta = 0.0;
  AttackSpec intro = erasure;
  intro.goal = AttackGoal::kIntroduction;
  intro.max_steps = 500;
  intro.beta = 5.0;
  AttackSpec conf = intro;
  conf.goal = AttackGoal::kConfounding;
  conf.beta = 10.0;
  conf.gamma_conf = 5.0;
  return {{"erasure", erasure}, {"baseline", baseline}, {"introduction", intro}, {"confounding", conf}};
}

// ---- typed reads from the property tree ------------------------------------

using Ptree = boost::property_tree::ptree;

class SectionReader {
 public:
  SectionReader(const Ptree& tree, std::string name) : tree_(tree), name_(std::move(name)) {}

  std::optional<std::string> str(const std::string& key) {
    seen_.insert(key);
    if (auto v = tree_.get_child_optional(Ptree::path_type(key, '\0'))) return trim(v->data());
    return std::nullopt;
  }

  template <class T>
  void read(const std::string& key, T& out) {
    auto v = str(key);
    if (!v) return;
    try {
      if constexpr (std::is_same_v<T, std::string>) {
        out = *v;
      } else if constexpr (std::is_same_v<T, bool>) {
        if (*v == "true" || *v == "1") out = true;
        else if (*v == "false" || *v == "0") out = false;
        else throw std::invalid_argument("not a boolean");
      } else if constexpr (std::is_floating_point_v<T>) {
        std::size_t used = 0;
        out = std::stod(*v, &used);
        if (used != v->size()) throw std::invalid_argument("trailing characters");
      } else {
        if (!v->empty() && (*v)[0] == '-') throw std::invalid_argument("negative");
        std::size_t used = 0;
        out = static_cast<T>(std::stoull(*v, &used));
        if (used != v->size()) throw std::invalid_argument("trailing characters");
      }
    } catch (const std::exception&) {
      throw ConfigError("[" + name_ + "] " + key + " = '" + *v + "' is not a valid value");
    }
  }

  template <class T, class Parse>
  void read_enum(const std::string& key, T& out, Parse parse) {
    if (auto v = str(key)) {
      try {
        out = parse(*v);
      } catch (const std::invalid_argument& e) {
        throw ConfigError("[" + name_ + "] " + key + ": " + e.what());
      }
    }
  }

  void finish() const {
    for (const auto& [k, v] : tree_)
      if (!seen_.count(k)) throw ConfigError("unknown key '" + k + "' in [" + name_ + "]");
  }

 private:
  const Ptree& tree_;
  std::string name_;
  std::set<std::string> seen_;
};

void read_attack(SectionReader& r, AttackSpec& s) {
  r.read_enum("goal", s.goal, attack_goal_from_string);
  if (auto t = r.str("targets")) {
    s.targets.clear();
    for (const auto& item : split_list(*t)) {
      try {
        s.targets.push_back(std::stoull(item));
      } catch (const std::exception&) {
        throw ConfigError("attack target '" + item + "' is not an index");
      }
    }
  }
  r.read_enum("erasure_mode", s.erasure_mode, erasure_mode_from_string);
  r.read("step", s.step_size);
  r.read("max_steps", s.max_steps);
  r.read("budget", s.budget);
  r.read("alpha", s.alpha);
  r.read("beta", s.beta);
  r.read("gamma", s.gamma_conf);
  r.read("relevance_threshold", s.relevance_threshold);
  r.read("flip_threshold", s.flip_threshold);
  r.read_enum("prediction_term", s.prediction_term, prediction_term_from_string);
  r.read("literal_signs", s.literal_signs);
}

std::string sha256_hex(const std::string& text) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("SHA-256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

fs::path resolve(const fs::path& p, const fs::path& root) { return p.is_absolute() ? p : root / p; }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

// ---- config -----------------------------------------------------------------

ExperimentConfig preset_config(const std::string& preset) {
  ExperimentConfig c;
  c.preset = preset;
  c.attacks = preset_attacks();
  if (preset == "cmnist") {
    c.name = "cmnist";
    c.out = "runs/cmnist";
    return c;
  }
  if (preset == "blob") {
    c.name = "blob";
    c.data.kind = DataKind::kBlob;
    c.data.images.clear();
    c.data.labels.clear();
    c.conv_channels = 8;
    c.seeds = {0};
    c.samples = 200;
    c.out = "runs/blob";
    return c;
  }
  throw ConfigError("unknown preset '" + preset + "' (expected cmnist or blob)");
}

void ExperimentConfig::validate(const fs::path& data_root) const {
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (std::set(seeds.begin(), seeds.end()).size() != seeds.size()) throw ConfigError("seeds must be distinct");
  if (samples == 0) throw ConfigError("samples must be positive");
  if (workers == 0) throw ConfigError("workers must be positive");
  if (out.empty()) throw ConfigError("an output directory is required");
  if (models.empty()) throw ConfigError("at least one model is required");
  std::set<std::string> seen;
  for (const auto& m : models) {
    if (m != "standard" && m != "rcl") throw ConfigError("unknown model '" + m + "' (expected standard or rcl)");
    if (!seen.insert(m).second) throw ConfigError("model '" + m + "' listed twice");
  }
  seen.clear();
  for (const auto& a : attacks) {
    if (a.name.empty() || a.name.find_first_of(" ,.[]=") != std::string::npos)
      throw ConfigError("invalid attack name '" + a.name + "'");
    if (!seen.insert(a.name).second) throw ConfigError("attack '" + a.name + "' defined twice");
    try {
      a.spec.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError("attack " + a.name + ": " + e.what());
    }
  }
  if (concept_net == ConceptNet::kConv && conv_channels == 0) throw ConfigError("conv_channels must be positive");
  try {
    train.validate();
    RclConfig r = rcl;
    r.train = train;
    r.train.paradigm = rcl.train.paradigm;
    r.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (data.kind == DataKind::kBlob) {
    if (data.blob_samples < 30) throw ConfigError("blob_samples must be at least 30");
  } else {
    for (const auto& p : {data.images, data.labels}) {
      if (p.empty()) throw ConfigError("cmnist data needs images and labels paths");
      if (!fs::exists(resolve(p, data_root)))
        throw ConfigError("data file not found: " + resolve(p, data_root).string());
    }
  }
  if (!data.shape_table.empty() && !fs::exists(resolve(data.shape_table, data_root)))
    throw ConfigError("shape table not found: " + resolve(data.shape_table, data_root).string());
}

ExperimentConfig parse_config(const std::string& text, const std::string& fallback_preset) {
  Ptree tree;
  try {
    std::istringstream in(text);
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("config line " + std::to_string(e.line()) + ": " + e.message());
  }
  for (const auto& [k, v] : tree)
    if (v.empty() && !v.data().empty()) throw ConfigError("key '" + k + "' must be inside a [section]");

  static const Ptree empty;
  auto section = [&](const std::string& name) -> const Ptree& {
    auto it = tree.find(name);
    return it == tree.not_found() ? empty : it->second;
  };

  std::string preset = fallback_preset;
  if (auto p = section("experiment").get_optional<std::string>("preset")) preset = trim(*p);
  ExperimentConfig c = preset_config(preset);

  SectionReader ex(section("experiment"), "experiment");
  ex.str("preset");
  ex.read("name", c.name);
  if (auto s = ex.str("seeds")) {
    c.seeds.clear();
    for (const auto& item : split_list(*s)) {
      try {
        if (item[0] == '-') throw std::invalid_argument("negative");
        c.seeds.push_back(std::stoull(item));
      } catch (const std::exception&) {
        throw ConfigError("seed '" + item + "' is not a non-negative integer");
      }
    }
  }
  ex.read("samples", c.samples);
  ex.read("workers", c.workers);
  if (auto m = ex.str("models")) c.models = split_list(*m);
  ex.read("reuse_checkpoints", c.reuse_checkpoints);
  std::string out = c.out.string();
  ex.read("out", out);
  c.out = out;
  const auto selected = ex.str("attacks");
  ex.finish();

  SectionReader d(section("data"), "data");
  d.read_enum("kind", c.data.kind, data_kind_from_string);
  for (auto [key, path] : {std::pair{"images", &c.data.images}, {"labels", &c.data.labels},
                           {"shape_table", &c.data.shape_table}}) {
    std::string v = path->string();
    d.read(key, v);
    *path = v;
  }
  d.read("split_seed", c.data.split_seed);
  d.read("blob_samples", c.data.blob_samples);
  d.read("blob_seed", c.data.blob_seed);
  d.finish();

  SectionReader m(section("model"), "model");
  m.read_enum("concept_net", c.concept_net, concept_net_from_string);
  m.read("conv_channels", c.conv_channels);
  m.finish();

  SectionReader t(section("train"), "train");
  t.read_enum("paradigm", c.train.paradigm, paradigm_from_string);
  t.read("epochs", c.train.epochs);
  t.read("batch_size", c.train.batch_size);
  t.read("task_weight", c.train.task_weight);
  t.read("concept_weight", c.train.concept_weight);
  t.read("lr", c.train.lr);
  t.read("lr_finetune", c.train.lr_finetune);
  t.read("momentum", c.train.momentum);
  t.finish();

  SectionReader r(section("rcl"), "rcl");
  r.read("step", c.rcl.step);
  r.read("iterations", c.rcl.iterations);
  r.read("budget", c.rcl.budget);
  r.read("alpha", c.rcl.alpha_rcl);
  r.read_enum("mode", c.rcl.mode, adv_loss_mode_from_string);
  r.read_enum("paradigm", c.rcl.train.paradigm, paradigm_from_string);
  r.finish();

  for (const auto& [key, sub] : tree) {
    if (key.rfind("attack.", 0) == 0) {
      const std::string name = key.substr(7);
      auto it = std::find_if(c.attacks.begin(), c.attacks.end(), [&](const auto& a) { return a.name == name; });
      if (it == c.attacks.end()) {
        c.attacks.push_back({name, {}});
        it = std::prev(c.attacks.end());
      }
      SectionReader a(sub, key);
      read_attack(a, it->spec);
      a.finish();
    } else if (key != "experiment" && key != "data" && key != "model" && key != "train" && key != "rcl") {
      throw ConfigError("unknown section [" + key + "]");
    }
  }
  if (selected) {
    std::vector<NamedAttack> chosen;
    for (const auto& name : split_list(*selected)) {
      auto it = std::find_if(c.attacks.begin(), c.attacks.end(), [&](const auto& a) { return a.name == name; });
      if (it == c.attacks.end()) throw ConfigError("attack '" + name + "' is not defined");
      chosen.push_back(*it);
    }
    c.attacks = std::move(chosen);
  }
  return c;
}

ExperimentConfig load_config(const fs::path& path, const std::string& fallback_preset) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return parse_config(os.str(), fallback_preset);
}

std::string to_ini(const ExperimentConfig& c) {
  std::ostringstream os;
  std::vector<std::string> names;
  for (const auto& a : c.attacks) names.push_back(a.name);
  os << "[experiment]\n"
     << "name = " << c.name << "\npreset = " << c.preset << "\nseeds = " << join(c.seeds)
     << "\nsamples = " << c.samples << "\nworkers = " << c.workers << "\nmodels = " << join(c.models)
     << "\nattacks = " << join(names) << "\nreuse_checkpoints = " << (c.reuse_checkpoints ? "true" : "false")
     << "\nout = " << c.out.string() << "\n\n";
  os << "[data]\nkind = " << to_string(c.data.kind) << "\nimages = " << c.data.images.string()
     << "\nlabels = " << c.data.labels.string() << "\nshape_table = " << c.data.shape_table.string()
     << "\nsplit_seed = " << c.data.split_seed << "\nblob_samples = " << c.data.blob_samples
     << "\nblob_seed = " << c.data.blob_seed << "\n\n";
  os << "[model]\nconcept_net = " << to_string(c.concept_net) << "\nconv_channels = " << c.conv_channels << "\n\n";
  const auto& t = c.train;
  os << "[train]\nparadigm = " << to_string(t.paradigm) << "\nepochs = " << t.epochs
     << "\nbatch_size = " << t.batch_size << "\ntask_weight = " << fmt(t.task_weight)
     << "\nconcept_weight = " << fmt(t.concept_weight) << "\nlr = " << fmt(t.lr)
     << "\nlr_finetune = " << fmt(t.lr_finetune) << "\nmomentum = " << fmt(t.momentum) << "\n\n";
  os << "[rcl]\nstep = " << fmt(c.rcl.step) << "\niterations = " << c.rcl.iterations
     << "\nbudget = " << fmt(c.rcl.budget) << "\nalpha = " << fmt(c.rcl.alpha_rcl)
     << "\nmode = " << to_string(c.rcl.mode) << "\nparadigm = " << to_string(c.rcl.train.paradigm) << "\n";
  for (const auto& a : c.attacks) {
    const auto& s = a.spec;
    os << "\n[attack." << a.name << "]\ngoal = " << to_string(s.goal) << "\ntargets = " << join(s.targets)
       << "\nerasure_mode = " << to_string(s.erasure_mode) << "\nstep = " << fmt(s.step_size)
       << "\nmax_steps = " << s.max_steps << "\nbudget = " << fmt(s.budget) << "\nalpha = " << fmt(s.alpha)
       << "\nbeta = " << fmt(s.beta) << "\ngamma = " << fmt(s.gamma_conf)
       << "\nrelevance_threshold = " << fmt(s.relevance_threshold) << "\nflip_threshold = " << fmt(s.flip_threshold)
       << "\nprediction_term = " << to_string(s.prediction_term)
       << "\nliteral_signs = " << (s.literal_signs ? "true" : "false") << "\n";
  }
  return os.str();
}

std::string config_hash(const ExperimentConfig& config) { return sha256_hex(to_ini(config)); }

fs::path default_data_root() {
  if (const char* env = std::getenv("CBM_DATA_ROOT"); env && *env) return env;
  return CBMLAB_DEFAULT_DATA_ROOT;
}

// ---- models -----------------------------------------------------------------

DatasetSplit load_data(const ExperimentConfig& config, const fs::path& data_root) {
  const auto& d = config.data;
  const ShapeTable table = d.shape_table.empty() ? default_shape_table() : read_shape_table(resolve(d.shape_table, data_root));
  if (d.kind == DataKind::kBlob) return synth_blob_dataset(d.blob_samples, d.blob_seed, table);
  return load_concept_mnist(resolve(d.images, data_root), resolve(d.labels, data_root), d.split_seed, table);
}

Architecture architecture_for(const ExperimentConfig& config, const DatasetSplit& data) {
  Architecture a;
  a.concept_net = config.concept_net;
  a.input = data.image;
  a.conv_channels = config.conv_channels;
  a.num_concepts = data.spec.size();
  a.num_outputs = data.num_classes;
  a.concept_kind = data.spec.kind;
  return a;
}

std::string model_label(const ExperimentConfig& config, const std::string& kind) {
  if (kind == "rcl") return "rcl-" + to_string(config.rcl.train.paradigm);
  return to_string(config.train.paradigm);
}

namespace {

RclConfig rcl_for(const ExperimentConfig& config, std::uint64_t seed) {
  RclConfig r = config.rcl;
  r.train = config.train;
  r.train.paradigm = config.rcl.train.paradigm;
  r.train.seed = seed;
  return r;
}

// Hash of everything that determines the trained weights.
std::string training_hash(const ExperimentConfig& config, const std::string& kind, std::uint64_t seed) {
  ExperimentConfig c = config;
  c.name.clear();
  c.out.clear();
  c.attacks.clear();
  c.seeds = {seed};
  c.models = {kind};
  c.samples = 1;
  c.workers = 1;
  if (kind != "rcl") c.rcl = {};
  return sha256_hex(to_ini(c));
}

}  // namespace

CbmModel train_model(const ExperimentConfig& config, const DatasetSplit& data, const std::string& kind,
                     std::uint64_t seed) {
  CbmModel model(architecture_for(config, data), 2 * seed + 1, 2 * seed + 2);
  if (kind == "rcl") {
    rcl_train(model, data, rcl_for(config, seed));
  } else {
    TrainConfig t = config.train;
    t.seed = seed;
    train(model, data, t);
  }
  model.tags()["training_hash"] = training_hash(config, kind, seed);
  return model;
}

Checkpoint make_checkpoint(const ExperimentConfig& config, const DatasetSplit& data, const CbmModel& model,
                           const std::string& kind, std::uint64_t seed) {
  Checkpoint ck{model, data.spec, kind == "rcl" ? rcl_for(config, seed).train : config.train, seed};
  ck.train.seed = seed;
  return ck;
}

// ---- attacks and reports ----------------------------------------------------

std::vector<std::size_t> draw_samples(std::size_t test_size, std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(test_size);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(mix_seed(seed, 0xd4a));
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(n, test_size));
  std::sort(idx.begin(), idx.end());
  return idx;
}

ModelReport attack_model(const ExperimentConfig& config, const DatasetSplit& data, const CbmModel& model,
                         const std::string& label, std::uint64_t seed, const fs::path& dir) {
  ModelReport rep;
  rep.seed = seed;
  rep.model = label;
  const auto eval = evaluate(model, data.test);
  rep.task_error = eval.task_error;
  rep.concept_error = eval.concept_error;

  const auto drawn = draw_samples(data.test.size(), config.samples, seed);
  std::vector<ConceptSample> pool;
  for (auto i : drawn) pool.push_back(data.test[i]);
  const auto decisions = filter_samples(model, pool);
  std::vector<std::size_t> ids;
  std::vector<std::vector<double>> images;
  for (std::size_t k = 0; k < pool.size(); ++k) {
    if (!decisions[k]) {
      ids.push_back(drawn[k]);
      images.push_back(pool[k].image);
    } else if (*decisions[k] == SkipReason::kWrongPrediction) {
      ++rep.skipped_wrong_prediction;
    } else {
      ++rep.skipped_low_concept_accuracy;
    }
  }
  rep.drawn = drawn.size();
  rep.kept = ids.size();
  rep.no_attackable_samples = ids.empty();

  std::ostringstream csv;
  csv << "model,attack,sample_id,run,metric,value\n";
  const auto kind = model.arch().concept_kind;
  for (const auto& na : config.attacks) {
    AttackReport ar;
    ar.attack = na.name;
    ar.goal = na.spec.goal;
    const auto outcomes = images.empty() ? std::vector<std::vector<AttackOutcome>>{}
                                         : run_attacks(model, images, na.spec, config.workers);
    double intro_sum = 0, ret_sum = 0, jsi_sum = 0, avg_sum = 0, min_sum = 0, sample_share_sum = 0;
    std::size_t with_orig = 0, samples_with_targets = 0;
    for (std::size_t s = 0; s < outcomes.size(); ++s) {
      std::size_t sample_targets = 0, sample_flipped = 0;
      for (const auto& o : outcomes[s]) {
        sample_targets += o.targets.size();
        sample_flipped += o.flips();
      }
      if (sample_targets) {
        sample_share_sum += static_cast<double>(sample_flipped) / static_cast<double>(sample_targets);
        ++samples_with_targets;
      }
      for (std::size_t r = 0; r < outcomes[s].size(); ++r) {
        const auto& o = outcomes[s][r];
        const auto before = presence_set(o.scores_before, na.spec.relevance_threshold);
        const auto after = presence_set(o.scores_after, na.spec.relevance_threshold);
        const auto intro = pct_introduced(before, after);
        const auto ret = pct_retained(before, after);
        const double jsi = jaccard(before, after);
        const auto delta = delta_stats(o.scores_before, o.scores_after);
        const bool in_range =
            std::all_of(o.perturbed.begin(), o.perturbed.end(), [](double v) { return v >= 0.0 && v <= 1.0; });
        const bool kept = o.prediction_after == o.prediction_before;

        ++ar.runs;
        ar.targets += o.targets.size();
        ar.flipped += o.flips();
        if (intro) {
          intro_sum += *intro;
          ret_sum += *ret;
          ++with_orig;
        }
        jsi_sum += jsi;
        avg_sum += delta.avg;
        min_sum += delta.min;
        ar.max_linf = std::max(ar.max_linf, o.linf);
        ar.budget_violations += o.linf > na.spec.budget;
        ar.range_violations += !in_range;
        ar.prediction_changes += !kept;
        ++ar.stops[to_string(o.stop)];

        auto row = [&](const char* metric, double v) {
          csv << label << ',' << na.name << ',' << ids[s] << ',' << r << ',' << metric << ',' << fmt(v) << '\n';
        };
        if (na.spec.goal == AttackGoal::kErasure) {
          row("targets", static_cast<double>(o.targets.size()));
          row("flipped", static_cast<double>(o.flips()));
          if (o.targets.size() == 1) row("target", static_cast<double>(o.targets[0]));
        }
        if (intro) row("introduced_pct", *intro);
        if (ret) row("retained_pct", *ret);
        row("jsi", jsi);
        row("flip_pct_all", pct_flipped(o.scores_before, o.scores_after, kind, na.spec.relevance_threshold,
                                        na.spec.flip_threshold));
        row("avg_delta", delta.avg);
        row("min_delta", delta.min);
        row("linf", o.linf);
        row("steps", static_cast<double>(o.steps));
        row("prediction_kept", kept ? 1.0 : 0.0);
      }
    }
    const double runs = static_cast<double>(std::max<std::size_t>(ar.runs, 1));
    ar.flip_pct = ar.targets ? 100.0 * static_cast<double>(ar.flipped) / static_cast<double>(ar.targets) : 0.0;
    if (samples_with_targets)
      ar.flip_pct_per_sample = 100.0 * sample_share_sum / static_cast<double>(samples_with_targets);
    if (with_orig) {
      ar.introduced_pct = intro_sum / static_cast<double>(with_orig);
      ar.retained_pct = ret_sum / static_cast<double>(with_orig);
    }
    ar.jsi = ar.runs ? jsi_sum / runs : 0.0;
    ar.avg_delta = ar.runs ? avg_sum / runs : 0.0;
    ar.min_delta = ar.runs ? min_sum / runs : 0.0;
    rep.attacks.push_back(std::move(ar));
  }
  if (!dir.empty()) {
    fs::create_directories(dir);
    write_text(dir / (label + ".samples.csv"), csv.str());
  }
  return rep;
}

std::string report_json(const ModelReport& r) {
  json j;
  j["seed"] = r.seed;
  j["model"] = r.model;
  j["task_error"] = r.task_error;
  j["concept_error"] = r.concept_error;
  j["drawn"] = r.drawn;
  j["kept"] = r.kept;
  j["skipped_wrong_prediction"] = r.skipped_wrong_prediction;
  j["skipped_low_concept_accuracy"] = r.skipped_low_concept_accuracy;
  j["no_attackable_samples"] = r.no_attackable_samples;
  j["attacks"] = json::array();
  for (const auto& a : r.attacks) {
    json x;
    x["attack"] = a.attack;
    x["goal"] = to_string(a.goal);
    x["runs"] = a.runs;
    x["targets"] = a.targets;
    x["flipped"] = a.flipped;
    x["flip_pct"] = a.flip_pct;
    x["flip_pct_per_sample"] = a.flip_pct_per_sample;
    x["introduced_pct"] = a.introduced_pct ? json(*a.introduced_pct) : json(nullptr);
    x["retained_pct"] = a.retained_pct ? json(*a.retained_pct) : json(nullptr);
    x["jsi"] = a.jsi;
    x["avg_delta"] = a.avg_delta;
    x["min_delta"] = a.min_delta;
    x["max_linf"] = a.max_linf;
    x["budget_violations"] = a.budget_violations;
    x["range_violations"] = a.range_violations;
    x["prediction_changes"] = a.prediction_changes;
    x["stops"] = a.stops;
    j["attacks"].push_back(std::move(x));
  }
  return j.dump(2) + "\n";
}

ModelReport parse_report_json(const std::string& text) {
  try {
    const auto j = json::parse(text);
    ModelReport r;
    r.seed = j.at("seed").get<std::uint64_t>();
    r.model = j.at("model").get<std::string>();
    r.task_error = j.at("task_error").get<double>();
    r.concept_error = j.at("concept_error").get<double>();
    r.drawn = j.at("drawn").get<std::size_t>();
    r.kept = j.at("kept").get<std::size_t>();
    r.skipped_wrong_prediction = j.at("skipped_wrong_prediction").get<std::size_t>();
    r.skipped_low_concept_accuracy = j.at("skipped_low_concept_accuracy").get<std::size_t>();
    r.no_attackable_samples = j.at("no_attackable_samples").get<bool>();
    for (const auto& x : j.at("attacks")) {
      AttackReport a;
      a.attack = x.at("attack").get<std::string>();
      a.goal = attack_goal_from_string(x.at("goal").get<std::string>());
      a.runs = x.at("runs").get<std::size_t>();
      a.targets = x.at("targets").get<std::size_t>();
      a.flipped = x.at("flipped").get<std::size_t>();
      a.flip_pct = x.at("flip_pct").get<double>();
      a.flip_pct_per_sample = x.at("flip_pct_per_sample").get<double>();
      if (!x.at("introduced_pct").is_null()) a.introduced_pct = x.at("introduced_pct").get<double>();
      if (!x.at("retained_pct").is_null()) a.retained_pct = x.at("retained_pct").get<double>();
      a.jsi = x.at("jsi").get<double>();
      a.avg_delta = x.at("avg_delta").get<double>();
      a.min_delta = x.at("min_delta").get<double>();
      a.max_linf = x.at("max_linf").get<double>();
      a.budget_violations = x.at("budget_violations").get<std::size_t>();
      a.range_violations = x.at("range_violations").get<std::size_t>();
      a.prediction_changes = x.at("prediction_changes").get<std::size_t>();
      a.stops = x.at("stops").get<std::map<std::string, std::size_t>>();
      r.attacks.push_back(std::move(a));
    }
    return r;
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("malformed report: ") + e.what());
  }
}

std::vector<SummaryCell> summarize(const std::vector<ModelReport>& reports) {
  std::vector<std::string> models, attacks;
  std::map<std::string, AttackGoal> goals;
  for (const auto& r : reports) {
    if (std::find(models.begin(), models.end(), r.model) == models.end()) models.push_back(r.model);
    for (const auto& a : r.attacks) {
      if (std::find(attacks.begin(), attacks.end(), a.attack) == attacks.end()) attacks.push_back(a.attack);
      goals[a.attack] = a.goal;
    }
  }
  std::vector<SummaryCell> cells;
  auto add = [&](const std::string& table, const std::string& model, const std::string& attack,
                 const std::string& metric, const std::vector<double>& values) {
    if (values.empty()) return;
    const auto ms = mean_std(values);
    cells.push_back({table, model, attack, metric, ms.mean, ms.std, ms.n});
  };
  for (const auto& m : models) {
    std::vector<double> task, concept_err, kept;
    for (const auto& r : reports)
      if (r.model == m) {
        task.push_back(r.task_error);
        concept_err.push_back(r.concept_error);
        kept.push_back(static_cast<double>(r.kept));
      }
    add("training", m, "", "task_error", task);
    add("training", m, "", "concept_error", concept_err);
    add("training", m, "", "attacked_samples", kept);
  }
  const std::vector<std::pair<AttackGoal, std::vector<std::string>>> tables{
      {AttackGoal::kErasure, {"flip_pct", "flip_pct_per_sample", "avg_delta", "min_delta"}},
      {AttackGoal::kIntroduction, {"introduced_pct", "retained_pct", "jsi"}},
      {AttackGoal::kConfounding, {"jsi", "introduced_pct", "retained_pct"}}};
  for (const auto& [goal, metrics] : tables) {
    for (const auto& m : models)
      for (const auto& a : attacks) {
        if (goals[a] != goal) continue;
        for (const auto& metric : metrics) {
          std::vector<double> values;
          for (const auto& r : reports) {
            if (r.model != m) continue;
            for (const auto& x : r.attacks) {
              if (x.attack != a || x.runs == 0) continue;
              if (metric == "flip_pct") values.push_back(x.flip_pct);
              if (metric == "flip_pct_per_sample") values.push_back(x.flip_pct_per_sample);
              if (metric == "avg_delta") values.push_back(x.avg_delta);
              if (metric == "min_delta") values.push_back(x.min_delta);
              if (metric == "jsi") values.push_back(x.jsi);
              if (metric == "introduced_pct" && x.introduced_pct) values.push_back(*x.introduced_pct);
              if (metric == "retained_pct" && x.retained_pct) values.push_back(*x.retained_pct);
            }
          }
          add(to_string(goal), m, a, metric, values);
        }
      }
  }
  return cells;
}

std::string summary_csv(const std::vector<SummaryCell>& cells) {
  std::ostringstream os;
  os << "table,model,attack,metric,mean,std,seeds\n";
  for (const auto& c : cells)
    os << c.table << ',' << c.model << ',' << c.attack << ',' << c.metric << ',' << fmt_report(c.mean) << ','
       << fmt_report(c.std) << ',' << c.seeds << '\n';
  return os.str();
}

std::string summary_json(const std::vector<SummaryCell>& cells) {
  json j = json::object();
  for (const auto& c : cells) {
    auto& slot = j[c.table][c.model][c.attack.empty() ? "-" : c.attack][c.metric];
    slot["mean"] = std::stod(fmt_report(c.mean));
    slot["std"] = std::stod(fmt_report(c.std));
    slot["seeds"] = c.seeds;
  }
  return j.dump(2) + "\n";
}

std::vector<SummaryCell> write_summary(const fs::path& out) {
  std::vector<fs::path> files;
  if (fs::is_directory(out))
    for (const auto& seed_dir : fs::directory_iterator(out)) {
      if (!seed_dir.is_directory() || seed_dir.path().filename().string().rfind("seed-", 0) != 0) continue;
      for (const auto& f : fs::directory_iterator(seed_dir.path())) {
        const auto name = f.path().filename().string();
        if (name.size() > 12 && name.ends_with(".report.json")) files.push_back(f.path());
      }
    }
  if (files.empty()) throw std::runtime_error("no seed-*/<model>.report.json files under " + out.string());
  std::vector<ModelReport> reports;
  for (const auto& f : files) reports.push_back(parse_report_json(read_text(f)));
  // Directory order is unspecified; order by seed, then model name.
  std::stable_sort(reports.begin(), reports.end(),
                   [](const auto& a, const auto& b) { return std::tie(a.seed, a.model) < std::tie(b.seed, b.model); });
  const auto cells = summarize(reports);
  write_text(out / "summary.csv", summary_csv(cells));
  write_text(out / "summary.json", summary_json(cells));
  return cells;
}

// ---- experiment --------------------------------------------------------------

ExperimentResult run_experiment(const ExperimentConfig& config, const fs::path& data_root) {
  config.validate(data_root);
  const auto start = std::chrono::steady_clock::now();
  auto seconds = [](auto since) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - since).count();
  };
  fs::create_directories(config.out);
  const auto data = load_data(config, data_root);

  ExperimentResult result;
  json manifest;
  manifest["name"] = config.name;
  manifest["config_hash"] = config_hash(config);
  manifest["config"] = to_ini(config);
  manifest["versions"] = {{"cbmlab", CBMLAB_VERSION}, {"compiler", __VERSION__}, {"checkpoint_format", kCheckpointVersion}};
  manifest["data"] = {{"kind", to_string(config.data.kind)},
                      {"train", data.train.size()},
                      {"val", data.val.size()},
                      {"test", data.test.size()}};
  manifest["seeds"] = json::array();

  for (const auto seed : config.seeds) {
    const auto seed_start = std::chrono::steady_clock::now();
    const fs::path dir = config.out / ("seed-" + std::to_string(seed));
    json entry{{"seed", seed}};
    try {
      fs::create_directories(dir);
      std::vector<ModelReport> seed_reports;
      for (const auto& kind : config.models) {
        const auto label = model_label(config, kind);
        const auto ckpt_path = dir / (label + ".ckpt");
        std::optional<CbmModel> model;
        if (config.reuse_checkpoints && fs::exists(ckpt_path)) {
          auto ck = load_checkpoint(ckpt_path);
          const auto tag = ck.model.tags().find("training_hash");
          if (tag != ck.model.tags().end() && tag->second == training_hash(config, kind, seed))
            model = std::move(ck.model);
        }
        entry["checkpoints"][label] = model ? "reused" : "trained";
        if (!model) {
          model = train_model(config, data, kind, seed);
          save_checkpoint(ckpt_path, make_checkpoint(config, data, *model, kind, seed));
        }
        auto rep = attack_model(config, data, *model, label, seed, dir);
        write_text(dir / (label + ".report.json"), report_json(rep));
        seed_reports.push_back(std::move(rep));
      }
      for (auto& r : seed_reports) result.reports.push_back(std::move(r));
      entry["status"] = "ok";
    } catch (const std::exception& e) {
      result.failures[seed] = e.what();
      entry["status"] = "failed";
      entry["error"] = e.what();
    }
    entry["wall_seconds"] = seconds(seed_start);
    manifest["seeds"].push_back(std::move(entry));
  }
  manifest["wall_seconds"] = seconds(start);
  write_text(config.out / "manifest.json", manifest.dump(2) + "\n");

  if (result.failures.size() == config.seeds.size())
    throw std::runtime_error("every seed failed; first error: " + result.failures.begin()->second);
  std::stable_sort(result.reports.begin(), result.reports.end(),
                   [](const auto& a, const auto& b) { return std::tie(a.seed, a.model) < std::tie(b.seed, b.model); });
  result.summary = summarize(result.reports);
  write_text(config.out / "summary.csv", summary_csv(result.summary));
  write_text(config.out / "summary.json", summary_json(result.summary));
  return result;
}

}  // namespace cbm
