#include "experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include "errors.hpp"
#include "hashing.hpp"

namespace dfr {

using json = nlohmann::json;

const char* profile_name(Profile p) { return p == Profile::kDesk ? "desk" : "paper"; }

Profile parse_profile(const std::string& s) {
  if (s == "desk") return Profile::kDesk;
  if (s == "paper") return Profile::kPaper;
  fail(ErrorCode::kConfig, "unknown profile '" + s + "' (expected desk or paper)");
}

ExperimentConfig default_experiment_config(Profile profile) {
  ExperimentConfig c;
  c.profile = profile;
  c.generate_real = 800;
  c.synthetic.blend_mode = BlendMode::kColorMatched;
  c.synthetic.smoothing = 0.0;
  c.lambdas = {5.0, 50.0, 500.0, 5000.0};
  c.training.epochs = 5;
  c.training.batch_size = 16;
  if (profile == Profile::kDesk) {
    // Blur range scaled from 224 px to the 64 px desk images.
    c.augmentation.sigma_min = 0.85;
    c.augmentation.sigma_max = 1.45;
    c.fgsm.epsilon = 0.08;
    c.cw.kappa = 30.0;
    c.cw.max_iterations = 100;
    c.dip_config.total_iterations = 3000;
    c.dip_config.checkpoint_iteration = 1500;
    c.sampling = {10, 5, 0};
  } else {
    c.fgsm.epsilon = 0.02;
    c.cw.kappa = 200.0;
    c.cw.max_iterations = 1000;
    c.dip_config.total_iterations = 10000;
    c.dip_config.checkpoint_iteration = 6000;
    // Keeps lr x checkpoint close to the desk setting.
    c.dip_config.learning_rate = 6e-5;
    c.checkpoint_sweep = false;
    c.sampling = {10, 10, 10};
  }
  return c;
}

void ExperimentConfig::validate() const {
  if (real_dir.empty()) fail(ErrorCode::kConfig, "dataset.real_dir is required");
  if (generate_real < 0) fail(ErrorCode::kConfig, "dataset.generate_real must be >= 0");
  if (generate_real == 0 && !fs::is_directory(real_dir)) {
    fail(ErrorCode::kConfig, "dataset.real_dir '" + real_dir.string() + "' does not exist");
  }
  if (fake_dir && !fs::is_directory(*fake_dir)) {
    fail(ErrorCode::kConfig, "dataset.fake_dir '" + fake_dir->string() + "' does not exist");
  }
  if (image_size < 16 || image_size % 8 != 0) {
    fail(ErrorCode::kConfig, "dataset.image_size must be a multiple of 8 and at least 16");
  }
  if (!(grain >= 0.0)) fail(ErrorCode::kConfig, "dataset.grain must be >= 0");
  if (!(split_ratio > 0.0 && split_ratio < 1.0)) fail(ErrorCode::kConfig, "dataset.split_ratio must lie in (0,1)");
  synthetic.validate();
  if (augment) augmentation.validate();
  if (fine_tune_epochs < 1) fail(ErrorCode::kConfig, "augmentation.fine_tune_epochs must be >= 1");
  if (architectures.empty()) fail(ErrorCode::kConfig, "training.architectures is empty");
  for (auto a : architectures) {
    if (a == Architecture::kLinearProbe) fail(ErrorCode::kConfig, "LINEAR_PROBE cannot be trained");
  }
  if (std::find(architectures.begin(), architectures.end(), target) == architectures.end()) {
    fail(ErrorCode::kConfig, "training.target must be one of training.architectures");
  }
  for (double l : lambdas) {
    if (!(l > 0.0) || !std::isfinite(l)) fail(ErrorCode::kConfig, "training.lambdas must be positive");
  }
  training.validate();
  if (attack_fakes < 1) fail(ErrorCode::kConfig, "attacks.fakes must be >= 1");
  fgsm.validate();
  cw.validate();
  dip_config.validate();
  if (dip && dip_use_augmented && !augment) {
    fail(ErrorCode::kConfig, "dip.classifier = augmented needs augmentation.enabled = true");
  }
  if (checkpoint_sweep && sweep_images < 1) fail(ErrorCode::kConfig, "dip.sweep_images must be >= 1");
  if (thresholds.empty()) fail(ErrorCode::kConfig, "report.thresholds is empty");
  for (double t : thresholds) {
    if (!(t >= 0.0 && t <= 1.0)) fail(ErrorCode::kConfig, "report.thresholds must lie in [0,1]");
  }
}

namespace {

json config_json(const ExperimentConfig& c) {
  json archs = json::array();
  for (auto a : c.architectures) archs.push_back(architecture_name(a));
  json atks = json::array();
  for (auto a : c.attacks) atks.push_back(attack_name(a));
  return {
      {"seed", c.seed},
      {"dataset",
       {{"real_dir", c.real_dir.empty() ? std::string() : fs::absolute(c.real_dir).lexically_normal().string()},
        {"fake_dir", c.fake_dir ? json(fs::absolute(*c.fake_dir).lexically_normal().string()) : json(nullptr)},
        {"generate_real", c.generate_real},
        {"image_size", c.image_size},
        {"grain", c.grain},
        {"split_ratio", c.split_ratio}}},
      {"synthetic_fake",
       {{"warp_strength", c.synthetic.warp_strength},
        {"blend_mode", blend_mode_name(c.synthetic.blend_mode)},
        {"seam_softness", c.synthetic.seam_softness},
        {"region_radius", c.synthetic.region_radius},
        {"smoothing", c.synthetic.smoothing}}},
      {"augmentation",
       {{"enabled", c.augment},
        {"blur_fraction", c.augmentation.blur_fraction},
        {"sigma_min", c.augmentation.sigma_min},
        {"sigma_max", c.augmentation.sigma_max},
        {"fine_tune_epochs", c.fine_tune_epochs}}},
      {"training",
       {{"architectures", archs},
        {"target", architecture_name(c.target)},
        {"lambdas", c.lambdas},
        {"epochs", c.training.epochs},
        {"batch_size", c.training.batch_size},
        {"learning_rate", c.training.learning_rate},
        {"optimizer", optimizer_name(c.training.optimizer)}}},
      {"attacks",
       {{"attacks", atks},
        {"fakes", c.attack_fakes},
        {"whitebox_regularized", c.whitebox_regularized},
        {"fgsm_epsilon", c.fgsm.epsilon},
        {"cw_kappa", c.cw.kappa},
        {"cw_c_min", c.cw.c_min},
        {"cw_c_max", c.cw.c_max},
        {"cw_search_steps", c.cw.search_steps},
        {"cw_max_iterations", c.cw.max_iterations},
        {"cw_learning_rate", c.cw.learning_rate},
        {"cw_abort_early", c.cw.abort_early}}},
      {"dip",
       {{"enabled", c.dip},
        {"classifier", c.dip_use_augmented ? "augmented" : "baseline"},
        {"total_iterations", c.dip_config.total_iterations},
        {"checkpoint_iteration", c.dip_config.checkpoint_iteration},
        {"checkpoint", c.checkpoint_sweep ? "sweep" : "fixed"},
        {"sweep_images", c.sweep_images},
        {"smoothing_window", c.dip_config.smoothing_window},
        {"learning_rate", c.dip_config.learning_rate},
        {"n_clean", c.sampling.n_clean},
        {"n_wrong", c.sampling.n_wrong},
        {"n_perturbed_correct", c.sampling.n_perturbed_correct}}},
      {"report", {{"thresholds", c.thresholds}}},
  };
}

}  // namespace

std::string ExperimentConfig::content_id() const { return sha256_hex(config_json(*this).dump()).substr(0, 16); }

// ---- INI loading -------------------------------------------------------------------

namespace {

namespace pt = boost::property_tree;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

class IniReader {
 public:
  IniReader(const pt::ptree& tree, fs::path base) : tree_(tree), base_(std::move(base)) {}

  void check_known(const std::map<std::string, std::set<std::string>>& known) const {
    for (const auto& [section, body] : tree_) {
      const auto it = known.find(section);
      if (it == known.end()) fail(ErrorCode::kConfig, "unknown config section [" + section + "]");
      if (!body.data().empty()) fail(ErrorCode::kConfig, "'" + section + "' must be a section");
      for (const auto& [key, value] : body) {
        if (!it->second.count(key)) fail(ErrorCode::kConfig, "unknown config key " + section + "." + key);
      }
    }
  }

  std::optional<std::string> raw(const std::string& section, const std::string& key) const {
    const auto v = tree_.get_optional<std::string>(pt::ptree::path_type(section + "/" + key, '/'));
    if (!v) return std::nullopt;
    return trim(*v);
  }

  template <class T>
  void get(const std::string& section, const std::string& key, T& out) const {
    const auto v = raw(section, key);
    if (!v) return;
    std::istringstream is(*v);
    T parsed{};
    if constexpr (std::is_same_v<T, bool>) {
      if (*v == "true" || *v == "1" || *v == "yes") {
        out = true;
        return;
      }
      if (*v == "false" || *v == "0" || *v == "no") {
        out = false;
        return;
      }
      bad(section, key, *v);
    } else {
      is >> parsed;
      if (!is || !(is >> std::ws).eof()) bad(section, key, *v);
      out = parsed;
    }
  }

  void get_path(const std::string& section, const std::string& key, fs::path& out) const {
    if (const auto v = raw(section, key)) {
      if (v->empty()) fail(ErrorCode::kConfig, section + "." + key + " is empty");
      out = fs::path(*v).is_absolute() ? fs::path(*v) : (base_ / *v).lexically_normal();
    }
  }

  std::vector<double> get_doubles(const std::string& section, const std::string& key,
                                  std::vector<double> fallback) const {
    const auto v = raw(section, key);
    if (!v) return fallback;
    std::vector<double> out;
    for (const auto& item : split_list(*v)) {
      try {
        std::size_t used = 0;
        out.push_back(std::stod(item, &used));
        if (used != item.size()) bad(section, key, *v);
      } catch (const std::logic_error&) {
        bad(section, key, *v);
      }
    }
    return out;
  }

  [[noreturn]] static void bad(const std::string& section, const std::string& key, const std::string& v) {
    fail(ErrorCode::kConfig, "invalid value '" + v + "' for " + section + "." + key);
  }

 private:
  const pt::ptree& tree_;
  fs::path base_;
};

}  // namespace

ExperimentConfig load_experiment_config(const fs::path& path, const ConfigOverrides& overrides) {
  pt::ptree tree;
  try {
    pt::read_ini(path.string(), tree);
  } catch (const pt::ini_parser_error& e) {
    fail(ErrorCode::kConfig, "cannot read config '" + path.string() + "': " + e.message());
  }
  const IniReader ini(tree, fs::absolute(path).parent_path());
  ini.check_known({
      {"run", {"seed", "profile", "out"}},
      {"dataset", {"real_dir", "fake_dir", "generate_real", "image_size", "grain", "split_ratio"}},
      {"synthetic_fake", {"warp_strength", "blend_mode", "seam_softness", "region_radius", "smoothing"}},
      {"augmentation", {"enabled", "blur_fraction", "sigma_min", "sigma_max", "fine_tune_epochs"}},
      {"training", {"architectures", "target", "epochs", "batch_size", "learning_rate", "optimizer", "lambdas"}},
      {"attacks",
       {"attacks", "fakes", "whitebox_regularized", "fgsm_epsilon", "cw_kappa", "cw_c_min", "cw_c_max",
        "cw_search_steps", "cw_max_iterations", "cw_learning_rate", "cw_abort_early"}},
      {"dip",
       {"enabled", "classifier", "total_iterations", "checkpoint_iteration", "checkpoint", "sweep_images",
        "smoothing_window", "learning_rate", "n_clean", "n_wrong", "n_perturbed_correct"}},
      {"report", {"thresholds"}},
  });

  Profile profile = Profile::kDesk;
  if (const auto p = ini.raw("run", "profile")) profile = parse_profile(*p);
  if (overrides.profile) profile = *overrides.profile;
  ExperimentConfig c = default_experiment_config(profile);

  ini.get("run", "seed", c.seed);
  ini.get_path("run", "out", c.out_dir);

  ini.get_path("dataset", "real_dir", c.real_dir);
  if (ini.raw("dataset", "fake_dir")) {
    fs::path f;
    ini.get_path("dataset", "fake_dir", f);
    c.fake_dir = f;
  }
  ini.get("dataset", "generate_real", c.generate_real);
  ini.get("dataset", "image_size", c.image_size);
  ini.get("dataset", "grain", c.grain);
  ini.get("dataset", "split_ratio", c.split_ratio);

  ini.get("synthetic_fake", "warp_strength", c.synthetic.warp_strength);
  if (const auto b = ini.raw("synthetic_fake", "blend_mode")) c.synthetic.blend_mode = parse_blend_mode(*b);
  ini.get("synthetic_fake", "seam_softness", c.synthetic.seam_softness);
  ini.get("synthetic_fake", "region_radius", c.synthetic.region_radius);
  ini.get("synthetic_fake", "smoothing", c.synthetic.smoothing);

  ini.get("augmentation", "enabled", c.augment);
  ini.get("augmentation", "blur_fraction", c.augmentation.blur_fraction);
  ini.get("augmentation", "sigma_min", c.augmentation.sigma_min);
  ini.get("augmentation", "sigma_max", c.augmentation.sigma_max);
  ini.get("augmentation", "fine_tune_epochs", c.fine_tune_epochs);

  if (const auto a = ini.raw("training", "architectures")) {
    c.architectures.clear();
    for (const auto& s : split_list(*a)) c.architectures.push_back(parse_architecture(s));
  }
  if (const auto t = ini.raw("training", "target")) c.target = parse_architecture(*t);
  ini.get("training", "epochs", c.training.epochs);
  ini.get("training", "batch_size", c.training.batch_size);
  ini.get("training", "learning_rate", c.training.learning_rate);
  if (const auto o = ini.raw("training", "optimizer")) c.training.optimizer = parse_optimizer(*o);
  c.lambdas = ini.get_doubles("training", "lambdas", c.lambdas);

  if (const auto a = ini.raw("attacks", "attacks")) {
    c.attacks.clear();
    for (const auto& s : split_list(*a)) c.attacks.push_back(parse_attack(s));
  }
  ini.get("attacks", "fakes", c.attack_fakes);
  ini.get("attacks", "whitebox_regularized", c.whitebox_regularized);
  ini.get("attacks", "fgsm_epsilon", c.fgsm.epsilon);
  ini.get("attacks", "cw_kappa", c.cw.kappa);
  ini.get("attacks", "cw_c_min", c.cw.c_min);
  ini.get("attacks", "cw_c_max", c.cw.c_max);
  ini.get("attacks", "cw_search_steps", c.cw.search_steps);
  ini.get("attacks", "cw_max_iterations", c.cw.max_iterations);
  ini.get("attacks", "cw_learning_rate", c.cw.learning_rate);
  ini.get("attacks", "cw_abort_early", c.cw.abort_early);

  ini.get("dip", "enabled", c.dip);
  if (const auto k = ini.raw("dip", "classifier")) {
    if (*k == "augmented") {
      c.dip_use_augmented = true;
    } else if (*k == "baseline") {
      c.dip_use_augmented = false;
    } else {
      IniReader::bad("dip", "classifier", *k);
    }
  }
  ini.get("dip", "total_iterations", c.dip_config.total_iterations);
  ini.get("dip", "checkpoint_iteration", c.dip_config.checkpoint_iteration);
  if (const auto k = ini.raw("dip", "checkpoint")) {
    if (*k == "sweep") {
      c.checkpoint_sweep = true;
    } else if (*k == "fixed") {
      c.checkpoint_sweep = false;
    } else {
      IniReader::bad("dip", "checkpoint", *k);
    }
  }
  ini.get("dip", "sweep_images", c.sweep_images);
  ini.get("dip", "smoothing_window", c.dip_config.smoothing_window);
  ini.get("dip", "learning_rate", c.dip_config.learning_rate);
  ini.get("dip", "n_clean", c.sampling.n_clean);
  ini.get("dip", "n_wrong", c.sampling.n_wrong);
  ini.get("dip", "n_perturbed_correct", c.sampling.n_perturbed_correct);

  c.thresholds = ini.get_doubles("report", "thresholds", c.thresholds);

  if (overrides.seed) c.seed = *overrides.seed;
  if (overrides.out_dir) c.out_dir = *overrides.out_dir;
  c.validate();
  return c;
}

// ---- orchestration -----------------------------------------------------------------

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string format_lambda(double l) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", l);
  return buf;
}

json read_json(const fs::path& p) {
  std::ifstream is(p);
  if (!is) fail(ErrorCode::kIo, "cannot read '" + p.string() + "'");
  return json::parse(is);
}

void write_json(const json& j, const fs::path& p) {
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream os(tmp);
    os << j.dump(2) << '\n';
    if (!os) fail(ErrorCode::kIo, "cannot write '" + p.string() + "'");
  }
  fs::rename(tmp, p);
}

std::string image_digest(const ImageTensor& im) {
  std::string bytes(reinterpret_cast<const char*>(im.values().data()), im.size() * sizeof(double));
  bytes += im.shape_string();
  return sha256_hex(bytes);
}

// Stage directories hold a stage.json marker written last; a marker with a
// matching key means the stage's outputs are complete and reusable.
class StageStore {
 public:
  StageStore(fs::path root, bool verbose, ExperimentResult& result)
      : root_(std::move(root)), verbose_(verbose), result_(result) {}

  fs::path dir(const std::string& name) const { return root_ / name; }

  std::optional<json> completed(const std::string& name, const std::string& key) const {
    const fs::path marker = dir(name) / "stage.json";
    if (!fs::exists(marker)) return std::nullopt;
    try {
      json j = read_json(marker);
      if (j.value("key", "") == key) return j;
    } catch (const std::exception&) {
    }
    return std::nullopt;
  }

  // Runs `body(dir)` unless a matching completed stage exists. `body` returns
  // extra JSON stored in the marker.
  template <class F>
  json run(const std::string& name, const std::string& key, F&& body) {
    if (auto j = completed(name, key)) {
      log("reuse " + name);
      result_.reused_stages.push_back(name);
      return *j;
    }
    const fs::path d = dir(name);
    std::error_code ec;
    fs::remove_all(d, ec);
    fs::create_directories(d);
    log("run " + name);
    const auto t0 = std::chrono::steady_clock::now();
    json extra;
    try {
      extra = body(d);
    } catch (const Error& e) {
      fail(ErrorCode::kStageFailure, "stage '" + name + "' failed: " + e.what());
    } catch (const std::exception& e) {
      fail(ErrorCode::kStageFailure, "stage '" + name + "' failed: " + e.what());
    }
    json marker = {{"key", key}, {"seconds", seconds_since(t0)}, {"info", extra}};
    write_json(marker, d / "stage.json");
    result_.computed_stages.push_back(name);
    return marker;
  }

  void log(const std::string& msg) const {
    if (verbose_) std::fprintf(stderr, "[experiment] %s\n", msg.c_str());
  }

 private:
  fs::path root_;
  bool verbose_;
  ExperimentResult& result_;
};

struct TrainedModel {
  std::string label;  // e.g. "CONVNET_B lambda=50"
  std::string stem;   // file-safe form
  std::string key;
  DetectorModel model;
  Architecture arch = Architecture::kConvNetA;
  double lambda = 0.0;
  bool augmented = false;
  double train_seconds = 0.0;
};

struct CraftedSet {
  AttackId attack = AttackId::kFgsm;
  std::string source_label;
  std::string key;
  std::vector<AdversarialRecord> records;
  double seconds = 0.0;
};

json stats_json(const AttackSetStats& s) {
  return {{"n", s.n},
          {"failures", s.failures},
          {"defined", s.defined},
          {"clean_accuracy", s.clean_accuracy},
          {"perturbed_accuracy", s.perturbed_accuracy},
          {"source_success_rate", s.source_success_rate}};
}

json metrics_json(const MetricsReport& m) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"accuracy", m.accuracy},
          {"auroc", opt(m.auroc)},
          {"precision_fake", opt(m.precision[0])},
          {"precision_real", opt(m.precision[1])},
          {"recall_fake", opt(m.recall[0])},
          {"recall_real", opt(m.recall[1])},
          {"confusion", m.confusion},
          {"n_images", m.n_images},
          {"threshold", m.threshold},
          {"model_id", m.model_id},
          {"dataset_id", m.dataset_id}};
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& input, bool verbose) {
  input.validate();
  ExperimentConfig cfg = input;
  cfg.synthetic.seed = derive_seed(cfg.seed, 1);
  cfg.augmentation.seed = derive_seed(cfg.seed, 2);
  cfg.dip_config.seed = derive_seed(cfg.seed, 5);

  ExperimentResult result;
  result.run_dir = fs::absolute(cfg.out_dir / ("run-" + cfg.content_id())).lexically_normal();
  fs::create_directories(result.run_dir);
  write_json(config_json(cfg), result.run_dir / "config.json");
  StageStore stages(result.run_dir, verbose, result);
  json summary;
  summary["config"] = config_json(cfg);
  summary["profile"] = profile_name(cfg.profile);
  summary["run_dir"] = result.run_dir.string();
  const InputShape shape{cfg.image_size, cfg.image_size, 3};

  // ---- corpus and dataset ----
  if (cfg.generate_real > 0 && !fs::is_directory(cfg.real_dir)) {
    stages.log("generating " + std::to_string(cfg.generate_real) + " real images in " + cfg.real_dir.string());
    try {
      generate_real_corpus(cfg.real_dir, cfg.generate_real, shape, derive_seed(cfg.seed, 0), cfg.grain);
    } catch (const Error& e) {
      fail(ErrorCode::kStageFailure, std::string("corpus generation failed: ") + e.what());
    }
  }
  std::string listing;
  for (const auto& e : fs::directory_iterator(cfg.real_dir)) {
    if (e.path().extension() == ".png") listing += e.path().filename().string() + ":" + std::to_string(e.file_size()) + ";";
  }
  const std::string dataset_key = sha256_hex(summary["config"]["dataset"].dump() +
                                             summary["config"]["synthetic_fake"].dump() + std::to_string(cfg.seed) +
                                             sha256_hex(listing));
  const json ds_stage = stages.run("dataset", dataset_key, [&](const fs::path& d) {
    FakeSource src;
    if (cfg.fake_dir) {
      src.directory = cfg.fake_dir;
    } else {
      src.synthetic = cfg.synthetic;
    }
    const auto m = build_dataset(cfg.real_dir, src, cfg.split_ratio, derive_seed(cfg.seed, 3), d);
    for (const auto& r : m.records) {
      const auto im = read_png(r.path);
      if (shape_of(im) != shape) {
        fail(ErrorCode::kInputShape, "'" + r.path.string() + "' is " + im.shape_string() + ", expected " +
                                         std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size) +
                                         "x3");
      }
    }
    write_manifest(m, d / "manifest.csv");
    return json{{"dataset_id", m.content_id()}, {"records", m.records.size()}};
  });
  const DatasetManifest manifest = read_manifest(stages.dir("dataset") / "manifest.csv");
  const std::string dataset_id = manifest.content_id();
  const LoadedSplit test = load_split(manifest, Split::kTest);
  std::size_t n_real = 0;
  for (const auto& r : manifest.records) n_real += r.label == LabelClass::kReal;
  summary["dataset"] = {{"dataset_id", dataset_id},
                        {"records", manifest.records.size()},
                        {"real", n_real},
                        {"fake", manifest.records.size() - n_real},
                        {"train", manifest.select(Split::kTrain).size()},
                        {"test", test.images.size()},
                        {"test_fake", manifest.select(Split::kTest, LabelClass::kFake).size()},
                        {"test_real", manifest.select(Split::kTest, LabelClass::kReal).size()},
                        {"seconds", ds_stage["seconds"]}};

  std::string aug_key;
  if (cfg.augment) {
    aug_key = sha256_hex(dataset_key + summary["config"]["augmentation"].dump());
    stages.run("augment", aug_key, [&](const fs::path& d) {
      const auto m = augment_training_set(manifest, cfg.augmentation, d / "images");
      write_manifest(m, d / "manifest.csv");
      return json{{"dataset_id", m.content_id()}};
    });
  }

  // ---- training ----
  std::vector<TrainedModel> models;
  const std::string train_cfg = summary["config"]["training"].dump();
  auto train_one = [&](Architecture arch, double lambda) {
    TrainedModel t;
    t.arch = arch;
    t.lambda = lambda;
    t.label = architecture_name(arch);
    t.stem = t.label;
    if (lambda > 0.0) {
      t.label += " lambda=" + format_lambda(lambda);
      t.stem += "_lambda" + format_lambda(lambda);
    }
    t.key = sha256_hex(dataset_key + train_cfg + t.stem + std::to_string(cfg.seed));
    TrainConfig tc = cfg.training;
    tc.seed = derive_seed(cfg.seed, 0x100 + static_cast<std::uint64_t>(arch));
    const std::string name = "models/" + t.stem;
    const json st = stages.run(name, t.key, [&](const fs::path& d) {
      RegularizationConfig reg;
      reg.lambda = lambda;
      TrainOutputs out;
      out.curve_path = d / "curve.csv";
      out.verbose = verbose;
      auto r = train_detector(arch, manifest, tc, reg, out);
      r.model.id = t.stem + "-" + t.key.substr(0, 8);
      save_model(r.model, d / "model.dfrw");
      return json{{"model_id", r.model.id}, {"final_train_acc", r.curve.back().train_acc}};
    });
    t.model = load_model(stages.dir(name) / "model.dfrw");
    t.train_seconds = st["seconds"].get<double>();
    return t;
  };
  for (auto arch : cfg.architectures) models.push_back(train_one(arch, 0.0));
  for (double l : cfg.lambdas) models.push_back(train_one(cfg.target, l));

  const auto find_model = [&](const std::string& label) -> const TrainedModel* {
    for (const auto& m : models) {
      if (m.label == label) return &m;
    }
    return nullptr;
  };
  const TrainedModel& target_base = *find_model(architecture_name(cfg.target));

  if (cfg.augment) {
    const DatasetManifest aug = read_manifest(stages.dir("augment") / "manifest.csv");
    TrainedModel t;
    t.arch = cfg.target;
    t.augmented = true;
    t.label = target_base.label + " blur-augmented";
    t.stem = target_base.stem + "_blur";
    t.key = sha256_hex(target_base.key + aug_key + std::to_string(cfg.fine_tune_epochs));
    const std::string name = "models/" + t.stem;
    const json st = stages.run(name, t.key, [&](const fs::path& d) {
      TrainOutputs out;
      out.curve_path = d / "curve.csv";
      out.verbose = verbose;
      TrainConfig tc = cfg.training;
      tc.seed = derive_seed(cfg.seed, 0x200);
      auto r = fine_tune_blur(target_base.model, aug, cfg.fine_tune_epochs, tc, out);
      r.model.id = t.stem + "-" + t.key.substr(0, 8);
      save_model(r.model, d / "model.dfrw");
      return json{{"model_id", r.model.id}, {"final_train_acc", r.curve.back().train_acc}};
    });
    t.model = load_model(stages.dir(name) / "model.dfrw");
    t.train_seconds = st["seconds"].get<double>() + target_base.train_seconds;
    models.push_back(std::move(t));
  }

  // ---- clean evaluation ----
  json models_json = json::array();
  for (const auto& m : models) {
    const auto p = p_real_batch(m.model, test.images);
    MetricsReport rep = compute_metrics(p, test.labels, 0.5);
    rep.model_id = m.model.id;
    rep.dataset_id = dataset_id;
    result.report.clean.push_back({m.label, rep, m.lambda > 0.0});
    json mj = {{"label", m.label},
               {"architecture", architecture_name(m.arch)},
               {"lambda", m.lambda},
               {"augmented", m.augmented},
               {"model_id", m.model.id},
               {"train_seconds", m.train_seconds},
               {"clean", metrics_json(rep)}};
    for (double thr : cfg.thresholds) {
      if (thr == 0.5) continue;
      MetricsReport alt = compute_metrics(p, test.labels, thr);
      mj["clean_at"][format_lambda(thr)] = metrics_json(alt);
    }
    models_json.push_back(mj);
  }
  summary["models"] = models_json;

  // ---- attacks ----
  std::vector<ImageTensor> fakes;
  std::vector<std::string> fake_paths;
  {
    const LoadedSplit tf = load_split(manifest, Split::kTest, LabelClass::kFake);
    if (tf.images.size() < static_cast<std::size_t>(cfg.attack_fakes)) {
      fail(ErrorCode::kStageFailure, "attacks need " + std::to_string(cfg.attack_fakes) + " TEST fakes, only " +
                                         std::to_string(tf.images.size()) + " available");
    }
    std::vector<std::size_t> order(tf.images.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(derive_seed(cfg.seed, 4));
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(static_cast<std::size_t>(cfg.attack_fakes));
    std::sort(order.begin(), order.end());
    for (auto i : order) {
      fakes.push_back(tf.images[i]);
      fake_paths.push_back(tf.paths[i].string());
    }
  }
  std::string fakes_id;
  for (const auto& p : fake_paths) fakes_id += p + ";";
  fakes_id = sha256_hex(fakes_id);

  const TrainedModel* dip_clf = nullptr;
  if (cfg.dip) dip_clf = cfg.dip_use_augmented ? &models.back() : &target_base;

  // Sources: every baseline architecture, plus the regularised models when
  // asked for, plus the DIP classifier for its own whitebox sets.
  std::vector<const TrainedModel*> sources;
  for (const auto& m : models) {
    const bool base = m.lambda == 0.0 && !m.augmented;
    if (base || (m.lambda > 0.0 && cfg.whitebox_regularized) || &m == dip_clf) sources.push_back(&m);
  }
  std::map<std::pair<AttackId, std::string>, CraftedSet> crafted;
  for (auto attack : cfg.attacks) {
    AttackSpec spec;
    spec.attack = attack;
    spec.fgsm = cfg.fgsm;
    spec.cw = cfg.cw;
    const std::string params = attack == AttackId::kFgsm ? summary["config"]["attacks"]["fgsm_epsilon"].dump()
                                                         : summary["config"]["attacks"].dump();
    for (const TrainedModel* src : sources) {
      CraftedSet cs;
      cs.attack = attack;
      cs.source_label = src->label;
      cs.key = sha256_hex(src->key + attack_name(attack) + params + fakes_id);
      const std::string name = std::string("attacks/") + attack_name(attack) + "@" + src->stem;
      const json st = stages.run(name, cs.key, [&](const fs::path& d) {
        auto set = craft_attack_set(src->model, src->model, fakes, fake_paths, spec);
        save_adversarial_set(set.records, d / "set");
        return json{{"whitebox", stats_json(set.stats)}};
      });
      cs.records = load_adversarial_set(stages.dir(name) / "set");
      cs.seconds = st["seconds"].get<double>();
      crafted.emplace(std::make_pair(attack, src->label), std::move(cs));
    }
  }

  const auto blackbox_source = [&](Architecture arch) -> std::string {
    for (auto a : cfg.architectures) {
      if (a != arch) return architecture_name(a);
    }
    return "";
  };

  json attack_json = json::array();
  for (const auto& m : models) {
    if (m.augmented) continue;
    AttackRow row;
    row.label = m.label;
    row.regularized = m.lambda > 0.0;
    bool have_unperturbed = false;
    for (auto attack : cfg.attacks) {
      for (const char* setting : {"blackbox", "whitebox"}) {
        const std::string col = std::string(attack_name(attack)) + " " + setting;
        const std::string src = std::string(setting) == "whitebox" ? m.label : blackbox_source(m.arch);
        const auto it = crafted.find({attack, src});
        if (src.empty() || it == crafted.end()) {
          row.columns.push_back({col, std::nullopt});
          continue;
        }
        const AttackSet ev = evaluate_attack_set(it->second.records, m.model);
        row.columns.push_back({col, ev.stats.defined ? std::optional<double>(ev.stats.perturbed_accuracy)
                                                     : std::nullopt});
        if (!have_unperturbed && ev.stats.defined) {
          row.unperturbed = ev.stats.clean_accuracy;
          have_unperturbed = true;
        }
        attack_json.push_back({{"target", m.label},
                               {"source", src},
                               {"attack", attack_name(attack)},
                               {"setting", setting},
                               {"craft_seconds", it->second.seconds},
                               {"stats", stats_json(ev.stats)}});
      }
    }
    if (!have_unperturbed) {
      const auto p = p_real_batch(m.model, fakes);
      std::size_t ok = 0;
      for (double v : p) ok += classify_score(v, 0.5) == LabelClass::kFake;
      row.unperturbed = fakes.empty() ? 0.0 : static_cast<double>(ok) / static_cast<double>(fakes.size());
    }
    result.report.attacks.push_back(row);
  }
  summary["attacks"] = attack_json;
  summary["attacked_fakes"] = fakes.size();

  // ---- DIP ----
  result.report.dip_thresholds = cfg.thresholds;
  if (dip_clf) {
    std::vector<NamedAttackSet> named;
    for (auto attack : cfg.attacks) {
      for (const char* setting : {"blackbox", "whitebox"}) {
        const std::string src =
            std::string(setting) == "whitebox" ? dip_clf->label : blackbox_source(dip_clf->arch);
        const auto it = crafted.find({attack, src});
        if (src.empty() || it == crafted.end()) continue;
        named.push_back({std::string(attack_name(attack)) + " " + setting, it->second.records});
      }
    }
    std::vector<std::string> clean_paths;
    for (const auto& p : test.paths) clean_paths.push_back(p.string());

    SamplingPlan plan = cfg.sampling;
    std::size_t val_wrong = 0, val_clean = 0;
    if (cfg.checkpoint_sweep) {
      const std::size_t per = static_cast<std::size_t>(cfg.sweep_images) / (named.size() + 2);
      val_wrong = named.empty() ? 0 : std::max<std::size_t>(1, per);
      val_clean = (static_cast<std::size_t>(cfg.sweep_images) - std::min<std::size_t>(cfg.sweep_images, val_wrong * named.size()) + 1) / 2;
      plan.n_clean += val_clean;
      plan.n_wrong += val_wrong;
    }
    CategorySample drawn;
    try {
      drawn = sample_categories(dip_clf->model, test.images, test.labels, clean_paths, named, plan,
                                derive_seed(cfg.seed, 6));
    } catch (const Error& e) {
      fail(ErrorCode::kStageFailure, std::string("stage 'dip sampling' failed: ") + e.what());
    }
    CategorySample sample, validation;
    for (const auto& cat : drawn.categories) {
      std::size_t keep = cat.items.size();
      const bool clean_cat = cat.name == kCleanFakeCategory || cat.name == kCleanRealCategory;
      const bool wrong_cat = !clean_cat && cat.name.size() > 11 && cat.name.rfind(" Fake-Wrong") == cat.name.size() - 11;
      if (clean_cat) keep -= val_clean;
      if (wrong_cat) keep -= val_wrong;
      Category main{cat.name, {cat.items.begin(), cat.items.begin() + static_cast<std::ptrdiff_t>(keep)}};
      Category val{cat.name, {cat.items.begin() + static_cast<std::ptrdiff_t>(keep), cat.items.end()}};
      if (!main.items.empty()) sample.categories.push_back(std::move(main));
      if (!val.items.empty()) validation.categories.push_back(std::move(val));
    }

    const fs::path trace_dir = stages.dir("dip/traces");
    fs::create_directories(trace_dir);
    const std::string dip_cfg_id = summary["config"]["dip"].dump();
    auto run_dip = [&](const SampledImage& item, const DipConfig& dc, double& secs) {
      const std::string stem =
          sha256_hex(image_digest(item.image) + dip_clf->model.id + dip_cfg_id +
                     std::to_string(dc.checkpoint_iteration) + std::to_string(dc.seed))
              .substr(0, 20);
      const fs::path done = trace_dir / (stem + ".run.json");
      if (fs::exists(done)) {
        secs = read_json(done).value("seconds", 0.0);
        return load_dip_trace(trace_dir, stem);
      }
      stages.log("dip " + item.ref);
      const auto t0 = std::chrono::steady_clock::now();
      DipTrace tr;
      try {
        tr = dip_optimize(item.image, dip_clf->model, dc);
      } catch (const Error& e) {
        fail(ErrorCode::kStageFailure, "stage 'dip' failed on " + item.ref + ": " + e.what());
      }
      secs = seconds_since(t0);
      save_dip_trace(tr, trace_dir, stem, item.ref);
      write_json({{"seconds", secs}, {"ref", item.ref}}, done);
      return tr;
    };

    DipConfig dc = cfg.dip_config;
    json sweep_json = nullptr;
    if (cfg.checkpoint_sweep && validation.total() > 0) {
      std::vector<DipTrace> traces;
      std::vector<LabelClass> labels;
      for (const auto& cat : validation.categories) {
        for (const auto& item : cat.items) {
          double secs = 0.0;
          traces.push_back(run_dip(item, dc, secs));
          labels.push_back(item.label);
        }
      }
      const double thr = *std::min_element(cfg.thresholds.begin(), cfg.thresholds.end());
      const auto sw = sweep_checkpoint(traces, labels, thr);
      dc.checkpoint_iteration = sw.chosen_iteration;
      sweep_json = {{"threshold", thr},
                    {"images", traces.size()},
                    {"iterations", sw.iterations},
                    {"accuracy", sw.accuracy},
                    {"chosen_iteration", sw.chosen_iteration}};
    }

    json images = json::array();
    std::vector<double> secs_all;
    const std::size_t nt = cfg.thresholds.size();
    std::map<std::string, std::pair<std::size_t, std::vector<std::size_t>>> groups;
    auto tally = [&](const std::string& g, const std::vector<bool>& ok) {
      auto& [n, hits] = groups[g];
      if (hits.empty()) hits.assign(nt, 0);
      ++n;
      for (std::size_t k = 0; k < nt; ++k) hits[k] += ok[k];
    };
    for (const auto& cat : sample.categories) {
      DipRow row{cat.name, cat.items.size(), std::vector<double>(nt, 0.0)};
      const bool clean_cat = cat.name == kCleanFakeCategory || cat.name == kCleanRealCategory;
      const bool wrong_cat = !clean_cat && cat.name.rfind(" Fake-Wrong") == cat.name.size() - 11;
      for (const auto& item : cat.items) {
        double secs = 0.0;
        const DipTrace tr = run_dip(item, dc, secs);
        secs_all.push_back(secs);
        std::vector<bool> ok(nt);
        json thr_json = json::object();
        for (std::size_t k = 0; k < nt; ++k) {
          ok[k] = dip_classify_at(tr, dc.checkpoint_iteration, cfg.thresholds[k]) == item.label;
          row.accuracy[k] += ok[k];
        }
        tally("Overall", ok);
        tally(clean_cat ? "Clean (all)" : wrong_cat ? "Fake-Wrong (all)" : "Perturbed Fake-Correct (all)", ok);
        const double direct = forward_probs(dip_clf->model, item.image).p_real();
        images.push_back({{"category", cat.name},
                          {"ref", item.ref},
                          {"label", label_name(item.label)},
                          {"p_real_input", direct},
                          {"p_real_checkpoint", tr.p_real_at(dc.checkpoint_iteration)},
                          {"mse_first", tr.mse_series.front()},
                          {"best_mse", tr.best_mse},
                          {"seconds", secs}});
      }
      for (auto& a : row.accuracy) a /= static_cast<double>(std::max<std::size_t>(1, row.n));
      result.report.dip.push_back(row);
    }
    for (const char* g : {"Fake-Wrong (all)", "Perturbed Fake-Correct (all)", "Clean (all)", "Overall"}) {
      const auto it = groups.find(g);
      if (it == groups.end()) continue;
      DipRow row{g, it->second.first, {}};
      for (auto h : it->second.second) row.accuracy.push_back(static_cast<double>(h) / static_cast<double>(row.n));
      result.report.dip_overall.push_back(row);
    }
    json rows = json::array();
    for (const auto* list : {&result.report.dip, &result.report.dip_overall}) {
      for (const auto& r : *list) rows.push_back({{"category", r.category}, {"n", r.n}, {"accuracy", r.accuracy}});
    }
    double max_secs = 0.0, sum_secs = 0.0;
    for (double s : secs_all) {
      max_secs = std::max(max_secs, s);
      sum_secs += s;
    }
    summary["dip"] = {{"classifier", dip_clf->label},
                      {"checkpoint_iteration", dc.checkpoint_iteration},
                      {"thresholds", cfg.thresholds},
                      {"sweep", sweep_json},
                      {"rows", rows},
                      {"images", images},
                      {"seconds_per_image_max", max_secs},
                      {"seconds_per_image_mean", secs_all.empty() ? 0.0 : sum_secs / secs_all.size()}};
  }

  // ---- reports ----
  const fs::path reports = result.run_dir / "reports";
  fs::create_directories(reports);
  write_reports(result.report, reports);
  save_report_input(result.report, result.run_dir / "report_input.json");
  summary["reused_stages"] = result.reused_stages;
  summary["computed_stages"] = result.computed_stages;
  result.summary_path = result.run_dir / "summary.json";
  write_json(summary, result.summary_path);
  return result;
}

}  // namespace dfr
