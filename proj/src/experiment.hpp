#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "attacks.hpp"
#include "dataset.hpp"
#include "dip.hpp"
#include "metrics.hpp"
#include "training.hpp"

namespace dfr {

enum class Profile { kDesk, kPaper };
const char* profile_name(Profile p);
Profile parse_profile(const std::string& s);

struct ExperimentConfig {
  Profile profile = Profile::kDesk;
  std::uint64_t seed = 0;
  fs::path out_dir = "runs";

  // dataset
  fs::path real_dir;
  std::optional<fs::path> fake_dir;  // unset: synthetic fakes
  int generate_real = 0;             // > 0: procedurally fill real_dir when it is absent
  int image_size = 64;
  double grain = 0.0;
  double split_ratio = 0.75;
  SyntheticFakeConfig synthetic;

  // augmentation and the blur fine-tune
  bool augment = true;
  AugmentationConfig augmentation;
  int fine_tune_epochs = 10;

  // training
  std::vector<Architecture> architectures{Architecture::kConvNetA, Architecture::kConvNetB};
  Architecture target = Architecture::kConvNetB;  // regularised, attacked and defended
  std::vector<double> lambdas;
  TrainConfig training;

  // attacks
  std::vector<AttackId> attacks{AttackId::kFgsm, AttackId::kCwL2};
  int attack_fakes = 100;
  bool whitebox_regularized = false;
  FgsmConfig fgsm;
  CwConfig cw;

  // DIP
  bool dip = true;
  bool dip_use_augmented = true;
  DipConfig dip_config;
  bool checkpoint_sweep = true;
  int sweep_images = 10;
  SamplingPlan sampling;

  std::vector<double> thresholds{0.5, 0.25};

  void validate() const;
  // Hash of every field that affects results.
  std::string content_id() const;
};

// Profile defaults before any file or flag overrides.
ExperimentConfig default_experiment_config(Profile profile);

struct ConfigOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<Profile> profile;
  std::optional<fs::path> out_dir;
};

// INI file with sections run, dataset, synthetic_fake, augmentation, training,
// attacks, dip and report. Throws kConfig on unknown keys, bad values or a
// missing dataset path. Relative paths resolve against the file's directory.
ExperimentConfig load_experiment_config(const fs::path& path, const ConfigOverrides& overrides = {});

struct ExperimentResult {
  fs::path run_dir;
  fs::path summary_path;  // summary.json
  ReportInput report;
  std::vector<std::string> reused_stages;
  std::vector<std::string> computed_stages;
};

// Runs every stage under <out_dir>/run-<config id>. Completed stages are
// reused; a failure leaves earlier stages intact and throws kStageFailure.
ExperimentResult run_experiment(const ExperimentConfig& config, bool verbose = false);

}  // namespace dfr
