#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dfrobust/dfrobust.h"

namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

struct Failure {
  int exit_code;
};

// Config-type problems exit 2, everything else 3.
void check(dfr_status s, const char* what) {
  if (s == DFR_OK) return;
  std::fprintf(stderr, "error: %s: %s (%s)\n", what, dfr_last_error(), dfr_status_name(s));
  const bool config = s == DFR_CONFIG || s == DFR_INVALID_ARGUMENT;
  throw Failure{config ? kExitConfig : kExitStage};
}

struct Globals {
  uint64_t seed = 0;
  bool seed_set = false;
  std::string profile = "desk";
  std::string out = ".";
};

struct Model {
  dfr_model* p = nullptr;
  Model() = default;
  explicit Model(const std::string& path) { check(dfr_model_load(path.c_str(), &p), ("loading " + path).c_str()); }
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  ~Model() { dfr_model_free(p); }
};

std::string fmt(double v) {
  if (std::isnan(v)) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

void print_stats(const dfr_attack_stats& s) {
  std::printf("scored %zu  failures %zu\n", s.n, s.failures);
  std::printf("fake accuracy: clean %s  perturbed %s\n", fmt(s.clean_accuracy).c_str(),
              fmt(s.perturbed_accuracy).c_str());
  std::printf("success on source: %s\n", fmt(s.source_success_rate).c_str());
}

bool is_image(const fs::path& p) { return p.extension() == ".png" || p.extension() == ".dfrt"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deepfake detector robustness toolkit"};
  app.require_subcommand(1);
  Globals g;
  auto* seed_opt = app.add_option("--seed", g.seed, "Base random seed");
  app.add_option("--profile", g.profile, "Default profile")->check(CLI::IsMember({"desk", "paper"}));
  app.add_option("--out", g.out, "Output directory");
  const char* profile = nullptr;

  // corpus
  auto* corpus = app.add_subcommand("corpus", "Build a dataset manifest from real images and synthetic fakes");
  std::string real_dir, fake_dir, blend;
  int generate = -1, image_size = 0;
  double grain = -1.0, smoothing = -1.0, split = 0.0;
  corpus->add_option("--real-dir", real_dir, "Directory of real PNG images")->required();
  corpus->add_option("--fake-dir", fake_dir, "Directory of fake PNG images (default: synthesize)");
  corpus->add_option("--generate", generate, "Procedurally generate N real images if --real-dir is missing");
  corpus->add_option("--image-size", image_size, "Side length of generated images");
  corpus->add_option("--grain", grain, "Sensor noise of generated images");
  corpus->add_option("--blend", blend, "Synthetic fake blend mode")->check(CLI::IsMember({"alpha", "color_matched"}));
  corpus->add_option("--smoothing", smoothing, "Blur on the pasted region, pixels");
  corpus->add_option("--split", split, "TRAIN fraction");

  // train
  auto* train = app.add_subcommand("train", "Train a detector, optionally with the input-gradient penalty");
  std::string manifest, arch, curve, name, blur_base, optimizer;
  int epochs = 0, batch = 0, blur_epochs = 10;
  double lr = 0.0, lambda = 0.0;
  bool verbose = false;
  train->add_option("--manifest", manifest, "Dataset manifest CSV")->required();
  train->add_option("--arch", arch, "CONVNET_A or CONVNET_B");
  train->add_option("--epochs", epochs);
  train->add_option("--batch-size", batch);
  train->add_option("--lr", lr);
  train->add_option("--optimizer", optimizer)->check(CLI::IsMember({"adam", "sgd"}));
  train->add_option("--lambda", lambda, "Input-gradient penalty strength");
  train->add_option("--name", name, "Model file stem (default: architecture)");
  train->add_option("--blur-finetune", blur_base, "Fine-tune this model on a blur-augmented TRAIN split instead");
  train->add_option("--blur-epochs", blur_epochs);
  train->add_flag("--verbose", verbose);

  // attack
  auto* attack = app.add_subcommand("attack", "Craft an adversarial set from TEST fakes");
  std::string source, target, attack_name = "FGSM";
  double epsilon = -1.0, kappa = -1.0, c_min = -1.0, c_max = -1.0;
  int steps = -1, iterations = -1, max_images = -1;
  attack->add_option("--source", source, "Model the attack differentiates")->required();
  attack->add_option("--target", target, "Model that scores the set (default: source)");
  attack->add_option("--manifest", manifest, "Dataset manifest CSV")->required();
  attack->add_option("--attack", attack_name)->check(CLI::IsMember({"FGSM", "CW_L2"}));
  attack->add_option("--epsilon", epsilon);
  attack->add_option("--kappa", kappa);
  attack->add_option("--c-min", c_min);
  attack->add_option("--c-max", c_max);
  attack->add_option("--search-steps", steps);
  attack->add_option("--iterations", iterations);
  attack->add_option("--max-images", max_images, "0: every TEST fake");

  // dip
  auto* dip = app.add_subcommand("dip", "Deep-image-prior purification and classification");
  std::string model_path, images_dir;
  int iters = 0, checkpoint = 0, window = 0;
  double threshold = 0.5, dip_lr = 0.0;
  dip->add_option("--model", model_path, "Classifier model")->required();
  dip->add_option("--images", images_dir, "Directory of PNG or DFRT images")->required();
  dip->add_option("--iters", iters);
  dip->add_option("--checkpoint", checkpoint);
  dip->add_option("--threshold", threshold)->check(CLI::Range(0.0, 1.0));
  dip->add_option("--lr", dip_lr);
  dip->add_option("--window", window, "Smoothing window of the reported series");

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "Score a model on a dataset split or an adversarial set");
  std::string split_name = "test", adv_set;
  evaluate->add_option("--model", model_path)->required();
  evaluate->add_option("--manifest", manifest);
  evaluate->add_option("--split", split_name)->check(CLI::IsMember({"train", "test"}));
  evaluate->add_option("--adv-set", adv_set, "Adversarial set directory");
  evaluate->add_option("--threshold", threshold)->check(CLI::Range(0.0, 1.0));

  // report
  auto* report = app.add_subcommand("report", "Print the tables of a finished experiment run");
  std::string run_dir, format = "text";
  report->add_option("--run", run_dir, "Run directory")->required();
  report->add_option("--format", format)->check(CLI::IsMember({"text", "csv"}));

  // experiment
  auto* experiment = app.add_subcommand("experiment", "Run or resume an experiment from an INI config");
  std::string config;
  experiment->add_option("--config", config)->required();
  experiment->add_flag("--verbose", verbose);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }
  g.seed_set = seed_opt->count() > 0;
  profile = g.profile.c_str();
  const fs::path out = g.out;

  try {
    if (*corpus) {
      dfr_dataset_options o;
      check(dfr_dataset_options_init(&o, profile), "options");
      o.real_dir = real_dir.c_str();
      o.fake_dir = fake_dir.empty() ? nullptr : fake_dir.c_str();
      o.generate_real = generate >= 0 ? generate : 0;
      if (image_size > 0) o.image_size = image_size;
      if (grain >= 0.0) o.grain = grain;
      if (!blend.empty()) o.blend_mode = blend.c_str();
      if (smoothing >= 0.0) o.smoothing = smoothing;
      if (split > 0.0) o.split_ratio = split;
      o.seed = g.seed;
      check(dfr_dataset_build(&o, out.string().c_str()), "corpus");
      std::printf("%s\n", (out / "manifest.csv").string().c_str());
    } else if (*train) {
      dfr_train_options o;
      check(dfr_train_options_init(&o, profile), "options");
      if (!arch.empty()) o.architecture = arch.c_str();
      if (epochs > 0) o.epochs = epochs;
      if (batch > 0) o.batch_size = batch;
      if (lr > 0.0) o.learning_rate = lr;
      if (!optimizer.empty()) o.optimizer = optimizer.c_str();
      o.lambda = lambda;
      o.seed = g.seed;
      o.verbose = verbose;
      fs::create_directories(out);
      Model trained;
      std::string stem = name;
      if (!blur_base.empty()) {
        Model base(blur_base);
        dfr_augment_options a;
        check(dfr_augment_options_init(&a, profile), "options");
        a.seed = g.seed;
        const fs::path aug = out / "augment";
        check(dfr_dataset_augment(manifest.c_str(), &a, aug.string().c_str()), "augment");
        if (stem.empty()) stem = fs::path(blur_base).stem().string() + "_blur";
        const std::string curve_path = (out / (stem + ".curve.csv")).string();
        check(dfr_fine_tune_blur(base.p, (aug / "manifest.csv").string().c_str(), blur_epochs, &o, curve_path.c_str(),
                                 &trained.p),
              "fine-tune");
      } else {
        if (stem.empty()) stem = o.architecture;
        const std::string curve_path = (out / (stem + ".curve.csv")).string();
        check(dfr_train(manifest.c_str(), &o, curve_path.c_str(), &trained.p), "train");
      }
      const std::string path = (out / (stem + ".dfrw")).string();
      check(dfr_model_save(trained.p, path.c_str()), "save");
      std::printf("%s\n", path.c_str());
    } else if (*attack) {
      dfr_attack_options o;
      check(dfr_attack_options_init(&o, profile), "options");
      o.attack = attack_name.c_str();
      if (epsilon >= 0.0) o.epsilon = epsilon;
      if (kappa >= 0.0) o.kappa = kappa;
      if (c_min > 0.0) o.c_min = c_min;
      if (c_max > 0.0) o.c_max = c_max;
      if (steps > 0) o.search_steps = steps;
      if (iterations > 0) o.max_iterations = iterations;
      if (max_images >= 0) o.max_images = max_images;
      Model src(source);
      Model tgt(target.empty() ? source : target);
      dfr_attack_stats st{};
      check(dfr_attack(src.p, tgt.p, manifest.c_str(), &o, out.string().c_str(), &st), "attack");
      std::printf("%s set written to %s\n", attack_name.c_str(), out.string().c_str());
      print_stats(st);
    } else if (*dip) {
      dfr_dip_options o;
      check(dfr_dip_options_init(&o, profile), "options");
      if (iters > 0) o.total_iterations = iters;
      if (checkpoint > 0) o.checkpoint_iteration = checkpoint;
      if (window > 0) o.smoothing_window = window;
      if (dip_lr > 0.0) o.learning_rate = dip_lr;
      o.seed = g.seed;
      Model clf(model_path);
      std::vector<fs::path> files;
      if (!fs::is_directory(images_dir)) {
        std::fprintf(stderr, "error: '%s' is not a directory\n", images_dir.c_str());
        return kExitConfig;
      }
      for (const auto& e : fs::directory_iterator(images_dir)) {
        if (e.is_regular_file() && is_image(e.path())) files.push_back(e.path());
      }
      std::sort(files.begin(), files.end());
      fs::create_directories(out);
      std::ofstream decisions(out / "dip_decisions.csv");
      decisions << "image,p_real_input,p_real_checkpoint,checkpoint,threshold,decision\n";
      for (const auto& f : files) {
        dfr_image* img = nullptr;
        check(dfr_image_load(f.string().c_str(), &img), ("loading " + f.string()).c_str());
        double direct = 0.0;
        const dfr_status ps = dfr_predict(clf.p, img, &direct);
        dfr_dip_trace* tr = nullptr;
        const dfr_status ds = ps == DFR_OK ? dfr_dip_run(clf.p, img, &o, &tr) : ps;
        dfr_image_free(img);
        check(ds, ("dip on " + f.string()).c_str());
        double p = 0.0;
        int real = 0;
        dfr_status s = dfr_dip_p_real(tr, o.checkpoint_iteration, &p);
        if (s == DFR_OK) s = dfr_dip_classify(tr, o.checkpoint_iteration, threshold, &real);
        if (s == DFR_OK) s = dfr_dip_save(tr, out.string().c_str(), f.stem().string().c_str(), f.string().c_str());
        dfr_dip_free(tr);
        check(s, ("dip on " + f.string()).c_str());
        const char* decision = real ? "REAL" : "FAKE";
        std::printf("%s  p_real %.4f -> %.4f @%d  %s\n", f.filename().string().c_str(), direct, p,
                    o.checkpoint_iteration, decision);
        decisions << f.filename().string() << ',' << direct << ',' << p << ',' << o.checkpoint_iteration << ','
                  << threshold << ',' << decision << '\n';
      }
    } else if (*evaluate) {
      Model m(model_path);
      if (!adv_set.empty()) {
        dfr_attack_stats st{};
        check(dfr_attack_evaluate(adv_set.c_str(), m.p, &st), "evaluate");
        print_stats(st);
      } else {
        if (manifest.empty()) {
          std::fprintf(stderr, "error: evaluate needs --manifest or --adv-set\n");
          return kExitConfig;
        }
        dfr_metrics r{};
        check(dfr_evaluate(m.p, manifest.c_str(), split_name.c_str(), threshold, &r), "evaluate");
        std::printf("images %zu  threshold %.2f\n", r.n_images, threshold);
        std::printf("accuracy %s  auroc %s\n", fmt(r.accuracy).c_str(), fmt(r.auroc).c_str());
        std::printf("FAKE precision %s recall %s\n", fmt(r.precision[0]).c_str(), fmt(r.recall[0]).c_str());
        std::printf("REAL precision %s recall %s\n", fmt(r.precision[1]).c_str(), fmt(r.recall[1]).c_str());
        std::printf("confusion [true][pred]: FF %zu FR %zu RF %zu RR %zu\n", r.confusion[0][0], r.confusion[0][1],
                    r.confusion[1][0], r.confusion[1][1]);
      }
    } else if (*report) {
      std::size_t needed = 0;
      check(dfr_report(run_dir.c_str(), format.c_str(), nullptr, 0, &needed), "report");
      std::string text(needed, '\0');
      check(dfr_report(run_dir.c_str(), format.c_str(), text.data(), text.size(), &needed), "report");
      std::fputs(text.c_str(), stdout);
    } else if (*experiment) {
      dfr_experiment_overrides o{};
      o.has_seed = g.seed_set;
      o.seed = g.seed;
      o.profile = app.get_option("--profile")->count() ? profile : nullptr;
      o.out_dir = app.get_option("--out")->count() ? g.out.c_str() : nullptr;
      o.verbose = verbose;
      char buf[4096];
      check(dfr_experiment_run(config.c_str(), &o, buf, sizeof buf), "experiment");
      std::printf("%s\n", buf);
      std::size_t needed = 0;
      if (dfr_report(buf, "text", nullptr, 0, &needed) == DFR_OK) {
        std::string text(needed, '\0');
        if (dfr_report(buf, "text", text.data(), text.size(), &needed) == DFR_OK) std::fputs(text.c_str(), stdout);
      }
    }
  } catch (const Failure& f) {
    return f.exit_code;
  }
  return 0;
}
