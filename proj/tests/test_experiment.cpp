#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <json.hpp>

#include "errors.hpp"
#include "experiment.hpp"
#include "temp_dir.hpp"

using namespace dfr;

namespace {

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream f(p);
  f << text;
}

ErrorCode code_of(auto&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::kInternal;
}

int cli(const std::string& args) {
  const std::string cmd = std::string(DFR_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

const char* kSmoke = R"([run]
seed = 3
out = runs

[dataset]
real_dir = real
generate_real = 32
image_size = 16

[augmentation]
enabled = false

[training]
epochs = 1
batch_size = 8
lambdas = 50

[attacks]
attacks = FGSM
fakes = 6

[dip]
enabled = false
)";

}  // namespace

TEST_CASE("profile defaults") {
  const auto desk = default_experiment_config(Profile::kDesk);
  const auto paper = default_experiment_config(Profile::kPaper);
  CHECK(paper.fgsm.epsilon == 0.02);
  CHECK(paper.cw.kappa == 200.0);
  CHECK(paper.dip_config.total_iterations == 10000);
  CHECK(paper.dip_config.checkpoint_iteration == 6000);
  CHECK(paper.sampling.n_clean == 10);
  CHECK(paper.sampling.n_wrong == 10);
  CHECK(paper.sampling.n_perturbed_correct == 10);
  CHECK(desk.dip_config.total_iterations == 3000);
  CHECK(desk.training.epochs == 5);
  CHECK(desk.training.batch_size == 16);
  CHECK(desk.augmentation.blur_fraction == 0.4);
  CHECK(paper.augmentation.sigma_min == 3.0);
  CHECK(paper.augmentation.sigma_max == 5.0);
  CHECK(desk.content_id() != paper.content_id());
}

TEST_CASE("config loading and validation") {
  TempDir tmp;
  fs::create_directories(tmp / "real");
  write_file(tmp / "a.ini",
             "[run]\nprofile = paper\nseed = 9\n[dataset]\nreal_dir = real\n[training]\nlambdas = 1, 2.5\n"
             "architectures = CONVNET_B\n[attacks]\nattacks = CW_L2\ncw_kappa = 7\n[dip]\ncheckpoint = fixed\n"
             "[report]\nthresholds = 0.25\n");
  const auto c = load_experiment_config(tmp / "a.ini");
  CHECK(c.profile == Profile::kPaper);
  CHECK(c.seed == 9);
  CHECK(c.real_dir == (tmp / "real").lexically_normal());
  CHECK(c.lambdas == std::vector<double>{1.0, 2.5});
  CHECK(c.architectures.size() == 1);
  CHECK(c.attacks == std::vector<AttackId>{AttackId::kCwL2});
  CHECK(c.cw.kappa == 7.0);
  CHECK(c.fgsm.epsilon == 0.02);
  CHECK_FALSE(c.checkpoint_sweep);
  CHECK(c.thresholds == std::vector<double>{0.25});

  ConfigOverrides ov;
  ov.seed = 4;
  ov.profile = Profile::kDesk;
  const auto d = load_experiment_config(tmp / "a.ini", ov);
  CHECK(d.seed == 4);
  CHECK(d.profile == Profile::kDesk);
  CHECK(d.cw.kappa == 7.0);

  write_file(tmp / "nodata.ini", "[dataset]\nimage_size = 32\n");
  CHECK(code_of([&] { load_experiment_config(tmp / "nodata.ini"); }) == ErrorCode::kConfig);
  write_file(tmp / "gone.ini", "[dataset]\nreal_dir = nowhere\ngenerate_real = 0\n");
  CHECK(code_of([&] { load_experiment_config(tmp / "gone.ini"); }) == ErrorCode::kConfig);
  write_file(tmp / "key.ini", "[dataset]\nreal_dir = real\nresolution = 3\n");
  CHECK(code_of([&] { load_experiment_config(tmp / "key.ini"); }) == ErrorCode::kConfig);
  write_file(tmp / "num.ini", "[dataset]\nreal_dir = real\n[attacks]\nfgsm_epsilon = small\n");
  CHECK(code_of([&] { load_experiment_config(tmp / "num.ini"); }) == ErrorCode::kConfig);
  write_file(tmp / "eps.ini", "[dataset]\nreal_dir = real\n[attacks]\nfgsm_epsilon = -0.1\n");
  CHECK(code_of([&] { load_experiment_config(tmp / "eps.ini"); }) == ErrorCode::kConfig);
  write_file(tmp / "target.ini", "[dataset]\nreal_dir = real\n[training]\narchitectures = CONVNET_A\n");
  CHECK(code_of([&] { load_experiment_config(tmp / "target.ini"); }) == ErrorCode::kConfig);
  write_file(tmp / "dip.ini", "[dataset]\nreal_dir = real\n[augmentation]\nenabled = false\n");
  CHECK(code_of([&] { load_experiment_config(tmp / "dip.ini"); }) == ErrorCode::kConfig);
  CHECK(code_of([&] { load_experiment_config(tmp / "missing.ini"); }) == ErrorCode::kConfig);
  // Nothing was computed for any rejected config.
  CHECK(fs::is_empty(tmp / "real"));
}

TEST_CASE("smoke experiment runs end to end and resumes without recomputation") {
  TempDir tmp;
  write_file(tmp / "smoke.ini", kSmoke);
  const auto cfg = load_experiment_config(tmp / "smoke.ini");
  const auto first = run_experiment(cfg);
  CHECK(first.reused_stages.empty());
  CHECK(first.computed_stages.size() == 6);
  CHECK(fs::exists(first.run_dir / "models" / "CONVNET_B_lambda50" / "model.dfrw"));
  CHECK(fs::exists(first.run_dir / "models" / "CONVNET_A" / "curve.csv"));
  CHECK(fs::exists(first.run_dir / "attacks" / "FGSM@CONVNET_A" / "set" / "index.csv"));
  CHECK(fs::exists(first.run_dir / "reports" / "clean_metrics.csv"));
  CHECK(fs::exists(first.run_dir / "reports" / "attack_accuracy.txt"));
  REQUIRE(first.report.clean.size() == 3);
  CHECK(first.report.clean[2].regularized);
  REQUIRE(first.report.attacks.size() == 3);
  CHECK(first.report.attacks[0].columns.size() == 2);

  const auto second = run_experiment(cfg);
  CHECK(second.computed_stages.empty());
  CHECK(second.reused_stages.size() == 6);
  CHECK(second.run_dir == first.run_dir);
  std::ifstream a(first.run_dir / "reports" / "clean_metrics.csv");
  const std::string csv((std::istreambuf_iterator<char>(a)), {});
  CHECK(csv.find("CONVNET_B lambda=50") != std::string::npos);

  const auto summary = nlohmann::json::parse(std::ifstream(first.run_dir / "summary.json"));
  CHECK(summary["attacked_fakes"] == 6);
  CHECK(summary["models"].size() == 3);
}

TEST_CASE("a failing stage keeps earlier stages") {
  TempDir tmp;
  std::string text = kSmoke;
  text.replace(text.find("fakes = 6"), 9, "fakes = 60");
  write_file(tmp / "big.ini", text);
  const auto cfg = load_experiment_config(tmp / "big.ini");
  CHECK(code_of([&] { run_experiment(cfg); }) == ErrorCode::kStageFailure);
  const fs::path run = cfg.out_dir / ("run-" + cfg.content_id());
  CHECK(fs::exists(run / "dataset" / "stage.json"));
  CHECK(fs::exists(run / "models" / "CONVNET_A" / "stage.json"));
}

TEST_CASE("command-line exit codes") {
  TempDir tmp;
  write_file(tmp / "nodata.ini", "[dataset]\nimage_size = 32\n");
  CHECK(cli("experiment --config " + (tmp / "nodata.ini").string()) == 2);
  CHECK(cli("--profile laptop report --run x") == 2);
  CHECK(cli("nonsense") == 2);
  CHECK(cli("report --run " + (tmp / "none").string()) == 3);
  std::string text = kSmoke;
  text.replace(text.find("fakes = 6"), 9, "fakes = 60");
  write_file(tmp / "big.ini", text);
  CHECK(cli("--out " + (tmp / "runs").string() + " experiment --config " + (tmp / "big.ini").string()) == 3);
  CHECK(cli("--help") == 0);
}
