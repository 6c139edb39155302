#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "errors.hpp"
#include "fd_oracle.hpp"
#include "temp_dir.hpp"
#include "training.hpp"

using namespace dfr;

namespace {

constexpr InputShape kTiny{16, 16, 3};

ImageTensor random_image(InputShape s, std::mt19937_64& rng) {
  return ImageTensor(s.height, s.width, s.channels, dfr::testing::random_vector(s.size(), rng, 0.05, 0.95));
}

// Small two-class corpus: reals are the procedural portraits, fakes the blended composites.
DatasetManifest tiny_dataset(const TempDir& tmp, int per_class) {
  generate_real_corpus(tmp / "real", per_class, kTiny, 5);
  SyntheticFakeConfig cfg;
  cfg.seed = 6;
  return build_dataset(tmp / "real", FakeSource{std::nullopt, cfg}, 0.75, 3, tmp.path());
}

}  // namespace

TEST_CASE("cross-entropy values") {
  CHECK(cross_entropy_loss({{0, 0}}, LabelClass::kReal) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(cross_entropy_loss({{0, 0}}, LabelClass::kFake) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  // -log(e^10 / (e^10 + e^-10)) = log1p(e^-20)
  const double expected = std::log1p(std::exp(-20.0));
  CHECK(cross_entropy_loss({{10, -10}}, LabelClass::kFake) == doctest::Approx(expected).epsilon(1e-9));
  CHECK(expected == doctest::Approx(2.06e-9).epsilon(1e-2));
  for (double shift : {-50.0, 3.0, 700.0}) {
    CHECK(cross_entropy_loss({{1.5 + shift, -0.25 + shift}}, LabelClass::kReal) ==
          doctest::Approx(cross_entropy_loss({{1.5, -0.25}}, LabelClass::kReal)).epsilon(1e-12));
  }
  CHECK(cross_entropy_loss({{1000, 0}}, LabelClass::kReal) == doctest::Approx(1000.0));
}

TEST_CASE("lipschitz penalty on linear probes") {
  std::mt19937_64 rng(1);
  const InputShape s{4, 5, 3};
  const ImageTensor zero(4, 5, 3, 0.0);
  const auto x = random_image(s, rng);
  CHECK(lipschitz_penalty(DetectorModel::linear_probe(zero, zero, {0.3, -1.0}), x) == 0.0);

  const auto w0 = ImageTensor(4, 5, 3, dfr::testing::random_vector(s.size(), rng));
  const auto w1 = ImageTensor(4, 5, 3, dfr::testing::random_vector(s.size(), rng));
  double expected = 0.0;
  for (double v : w0.values()) expected += v * v;
  for (double v : w1.values()) expected += v * v;
  expected /= 2.0 * static_cast<double>(s.size());
  const auto probe = DetectorModel::linear_probe(w0, w1);
  const double p1 = lipschitz_penalty(probe, x);
  CHECK(p1 == doctest::Approx(expected).epsilon(1e-12));
  CHECK(lipschitz_penalty(probe, x) == p1);
  // Batch penalty is the mean of per-image penalties.
  const auto params = parameter_vars(probe, false);
  const ImageTensor imgs[2] = {x, random_image(s, rng)};
  CHECK(lipschitz_penalty_graph(probe, Var(to_batch(imgs), true), params).value().item() ==
        doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("augmented loss") {
  CHECK(augmented_loss(0.7, 0.01, 5.0) == doctest::Approx(0.75));
  CHECK(augmented_loss(0.7, 0.01, 0.0) == 0.7);
  double prev = -1.0;
  for (double lam : {0.0, 5.0, 50.0, 500.0, 5000.0}) {
    const double v = augmented_loss(0.4, 0.002, lam);
    CHECK(v >= prev);
    prev = v;
  }
}

TEST_CASE("penalty parameter gradient matches finite differences") {
  require_double_backprop();
  std::mt19937_64 rng(2);
  for (Architecture arch : {Architecture::kConvNetA, Architecture::kConvNetB}) {
    const auto model = DetectorModel::create(arch, kTiny, 9);
    const ImageTensor imgs[2] = {random_image(kTiny, rng), random_image(kTiny, rng)};
    const Tensor xb = to_batch(imgs);
    const double lambda = 50.0;
    auto objective = [&](const std::vector<Var>& params) {
      return scale(lipschitz_penalty_graph(model, Var(xb, true), params), lambda);
    };
    const auto params = parameter_vars(model, true);
    const auto g = grad(objective(params), params);
    const auto flat = model.flat_parameters();
    auto eval = [&](const std::vector<double>& theta) {
      DetectorModel m = model;
      m.set_flat_parameters(theta);
      return objective(parameter_vars(m, false)).value().item();
    };
    std::vector<double> g_flat;
    for (const auto& gi : g) g_flat.insert(g_flat.end(), gi.value().values().begin(), gi.value().values().end());
    // Entries far below the gradient's scale are dominated by rounding in the FD quotient.
    double scale_g = 0.0;
    for (double v : g_flat) scale_g = std::max(scale_g, std::abs(v));
    std::uniform_int_distribution<std::size_t> pick(0, flat.size() - 1);
    int checked = 0;
    for (int trial = 0; trial < 200 && checked < 12; ++trial) {
      const std::size_t i = pick(rng);
      const double fd = dfr::testing::central_difference(eval, flat, i, 1e-5);
      if (std::abs(fd) < 1e-4 * scale_g && std::abs(g_flat[i]) < 1e-4 * scale_g) continue;
      // Exact-zero ReLU inputs put some parameters on a kink, where one-sided slopes disagree.
      auto theta = flat;
      const double f0 = eval(theta);
      theta[i] += 1e-6;
      const double right = (eval(theta) - f0) / 1e-6;
      theta[i] -= 2e-6;
      const double left = (f0 - eval(theta)) / 1e-6;
      if (dfr::testing::rel_error(right, left, 1e-4 * scale_g) > 1e-3) continue;
      ++checked;
      INFO(architecture_name(arch) << " param " << i << " analytic " << g_flat[i] << " fd " << fd);
      CHECK(dfr::testing::rel_error(g_flat[i], fd, 1e-4 * scale_g) <= 1e-2);
    }
    CHECK(checked >= 6);
  }
}

TEST_CASE("training reduces loss, records provenance, is deterministic") {
  TempDir tmp;
  const auto m = tiny_dataset(tmp, 24);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 8;
  cfg.seed = 17;
  TrainOutputs out;
  out.checkpoint_dir = tmp / "ckpt";
  out.curve_path = tmp / "curve.csv";
  const auto a = train_detector(Architecture::kConvNetB, m, cfg, {}, out);
  REQUIRE(a.curve.size() == 4);
  CHECK(a.curve.back().loss < a.curve.front().loss);
  CHECK(a.model.provenance.epochs == 4);
  CHECK(a.model.provenance.optimizer == "adam");
  CHECK(a.model.provenance.dataset_id == m.content_id());
  for (int e = 1; e <= 4; ++e) {
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%03d.dfrw", e);
    CHECK(fs::exists(tmp / "ckpt" / name));
  }
  std::ifstream curve(tmp / "curve.csv");
  std::string header;
  std::getline(curve, header);
  CHECK(header == "epoch,loss,train_acc");

  const auto b = train_detector(Architecture::kConvNetB, m, cfg, {});
  CHECK(a.model.flat_parameters() == b.model.flat_parameters());
  CHECK(a.model.id == b.model.id);

  // The last checkpoint equals the returned model.
  const auto last = load_model(tmp / "ckpt" / "epoch_004.dfrw");
  CHECK(last.flat_parameters() == a.model.flat_parameters());
}

TEST_CASE("regularised training stores lambda; fine-tuning") {
  TempDir tmp;
  const auto m = tiny_dataset(tmp, 8);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  RegularizationConfig reg;
  reg.lambda = 5000.0;
  const auto r = train_detector(Architecture::kConvNetA, m, cfg, reg);
  CHECK(r.model.provenance.lambda == 5000.0);
  CHECK(std::isfinite(r.curve.front().loss));

  const auto same = fine_tune_blur(r.model, m, 0, cfg);
  CHECK(same.model.flat_parameters() == r.model.flat_parameters());
  CHECK(same.curve.empty());

  AugmentationConfig aug;
  aug.seed = 1;
  const auto am = augment_training_set(m, aug, tmp / "aug");
  const auto ft = fine_tune_blur(r.model, am, 1, cfg);
  CHECK(ft.model.provenance.augmented);
  CHECK(ft.model.provenance.fine_tune_epochs == 1);
  CHECK(ft.model.provenance.lambda == 5000.0);
  CHECK(ft.model.flat_parameters() != r.model.flat_parameters());
  CHECK(ft.curve.front().epoch == 2);
}

TEST_CASE("divergence and configuration errors") {
  TempDir tmp;
  const auto m = tiny_dataset(tmp, 4);
  TrainConfig cfg;
  cfg.learning_rate = 1e300;
  cfg.batch_size = 2;
  cfg.epochs = 4;
  try {
    train_detector(Architecture::kConvNetB, m, cfg, {});
    FAIL("expected training failure");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kTrainingFailure);
    CHECK(std::string(e.what()).find("epoch") != std::string::npos);
    CHECK(std::string(e.what()).find("batch") != std::string::npos);
  }
  TrainConfig bad;
  bad.epochs = 0;
  CHECK_THROWS_AS(train_detector(Architecture::kConvNetB, m, bad, {}), Error);
  RegularizationConfig neg;
  neg.lambda = -1;
  CHECK_THROWS_AS(train_detector(Architecture::kConvNetB, m, {}, neg), Error);
  RegularizationConfig dim;
  dim.input_dim = 7;
  CHECK_THROWS_AS(train_detector(Architecture::kConvNetB, m, {}, dim), Error);
  DatasetManifest empty;
  CHECK_THROWS_AS(train_detector(Architecture::kConvNetB, empty, {}, {}), Error);
}

TEST_CASE("loss linearisation residual shrinks faster than the step") {
  TempDir tmp;
  const auto m = tiny_dataset(tmp, 12);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  const auto model = train_detector(Architecture::kConvNetB, m, cfg, {}).model;
  std::mt19937_64 rng(4);
  const auto x = random_image(kTiny, rng);
  const auto g = input_gradient(model, x, Functional::cross_entropy(LabelClass::kReal));
  const auto dir = dfr::testing::random_vector(x.size(), rng);
  auto residual = [&](double t) {
    ImageTensor xp = x;
    double lin = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      xp.values()[i] = x.values()[i] + t * dir[i];
      lin += g.values()[i] * t * dir[i];
    }
    const double j0 = cross_entropy_loss(forward_logits(model, x), LabelClass::kReal);
    const double j1 = cross_entropy_loss(forward_logits(model, xp), LabelClass::kReal);
    return std::abs(j1 - j0 - lin);
  };
  const double r1 = residual(1e-4), r2 = residual(5e-5);
  INFO("r1 " << r1 << " r2 " << r2);
  CHECK((r2 <= 0.5 * r1 || r1 < 1e-12));
}
