#include <doctest.h>

#include <cmath>

#include "dataset.hpp"
#include "dip.hpp"
#include "errors.hpp"
#include "temp_dir.hpp"

using namespace dfr;

namespace {

constexpr LabelClass F = LabelClass::kFake;
constexpr LabelClass R = LabelClass::kReal;

// p_real = sigmoid(mean brightness * 2 - 1) on 16x16x3.
DetectorModel probe(InputShape s) {
  const double w = 1.0 / static_cast<double>(s.size());
  return DetectorModel::linear_probe(ImageTensor(s.height, s.width, 3, -w), ImageTensor(s.height, s.width, 3, w),
                                     {0.0, -1.0});
}

DipTrace synthetic_trace(std::vector<double> p_real, int checkpoint) {
  DipTrace t;
  t.p_real_series = std::move(p_real);
  t.mse_series.assign(t.p_real_series.size(), 0.01);
  t.checkpoint_iteration = checkpoint;
  t.config.total_iterations = static_cast<int>(t.p_real_series.size());
  t.config.checkpoint_iteration = checkpoint;
  t.checkpoint_image = ImageTensor(8, 8, 3, 0.5);
  return t;
}

int expect_code(auto&& f) {
  try {
    f();
  } catch (const Error& e) {
    return static_cast<int>(e.code());
  }
  return 0;
}

}  // namespace

TEST_CASE("generator shape, range and determinism") {
  const InputShape s{16, 16, 3};
  const auto a = GeneratorNet::create(s, 4);
  const auto b = GeneratorNet::create(s, 4);
  const auto c = GeneratorNet::create(s, 5);
  CHECK(a.seed_input().shape()[1] == GeneratorNet::kSeedChannels);
  for (double v : a.seed_input().values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 0.1);
  }
  const auto out = a.output();
  CHECK(out.height() == 16);
  CHECK(out.channels() == 3);
  for (double v : out.values()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  CHECK(out.values()[7] == b.output().values()[7]);
  CHECK(out.values()[7] != c.output().values()[7]);
  CHECK(expect_code([&] { GeneratorNet::create({12, 12, 3}, 1); }) == static_cast<int>(ErrorCode::kInputShape));
}

TEST_CASE("fitting the generator's own output stays at the fixed point") {
  const InputShape s{16, 16, 3};
  DipConfig cfg;
  cfg.total_iterations = 40;
  cfg.checkpoint_iteration = 20;
  cfg.seed = 11;
  const ImageTensor target = GeneratorNet::create(s, cfg.seed).output();
  const auto tr = dip_optimize(target, probe(s), cfg);
  REQUIRE(tr.mse_series.size() == 40);
  for (double m : tr.mse_series) CHECK(m <= 1e-4);
}

TEST_CASE("reconstruction makes progress on a portrait") {
  const InputShape s{32, 32, 3};
  const ImageTensor target = generate_real_image(s, 3, 0.0);
  DipConfig cfg;
  cfg.total_iterations = 300;
  cfg.checkpoint_iteration = 300;
  cfg.seed = 2;
  const auto tr = dip_optimize(target, probe(s), cfg);
  CHECK(tr.best_mse < tr.mse_series.front());
  CHECK(tr.best_mse <= 0.25 * tr.mse_series.front());
  for (double p : tr.p_real_series) {
    CHECK(p >= 0.0);
    CHECK(p <= 1.0);
  }
  CHECK(tr.checkpoint_iteration == 300);
  for (double v : tr.checkpoint_image.values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  const auto again = dip_optimize(target, probe(s), cfg);
  CHECK(again.mse_series[150] == tr.mse_series[150]);
}

TEST_CASE("diverging optimisation is a stage failure") {
  const InputShape s{16, 16, 3};
  DipConfig cfg;
  cfg.total_iterations = 20;
  cfg.checkpoint_iteration = 10;
  cfg.learning_rate = 1e300;
  const int code = expect_code([&] { dip_optimize(ImageTensor(16, 16, 3, 0.5), probe(s), cfg); });
  CHECK(code == static_cast<int>(ErrorCode::kStageFailure));
}

TEST_CASE("config validation") {
  DipConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.checkpoint_iteration = cfg.total_iterations + 1;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = DipConfig{};
  cfg.smoothing_window = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = DipConfig{};
  cfg.learning_rate = 0.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("moving average") {
  const std::vector<double> spike{0, 0, 1, 0, 0};
  const auto s3 = smooth_trace(spike, 3);
  const std::vector<double> want{0.0, 1.0 / 3, 1.0 / 3, 1.0 / 3, 0.0};
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(s3[i] == doctest::Approx(want[i]).epsilon(1e-15));
  CHECK(smooth_trace(spike, 1) == spike);
  const std::vector<double> flat(25, 0.37);
  for (double v : smooth_trace(flat, 10)) CHECK(v == doctest::Approx(0.37).epsilon(1e-15));
  CHECK_THROWS_AS(smooth_trace(spike, 0), Error);
}

TEST_CASE("checkpoint decisions") {
  auto at = [](double p) {
    std::vector<double> s(1000, 0.9);
    s[599] = p;
    return synthetic_trace(s, 600);
  };
  CHECK(dip_classify(at(0.7), 0.5) == R);
  CHECK(dip_classify(at(0.3), 0.25) == R);
  CHECK(dip_classify(at(0.3), 0.5) == F);
  CHECK(dip_classify(at(0.5), 0.5) == F);
  CHECK(dip_classify_at(at(0.3), 600, 0.5) == F);
  CHECK(dip_classify_at(at(0.3), 601, 0.5) == R);
  CHECK_THROWS_AS(dip_classify(at(0.3), 1.5), Error);
  CHECK_THROWS_AS(dip_classify(at(0.3), -0.1), Error);
  CHECK(expect_code([&] { dip_classify_at(at(0.3), 499, 0.5); }) == static_cast<int>(ErrorCode::kConfig));
  CHECK_NOTHROW(dip_classify_at(at(0.3), kMinDecisionIteration, 0.5));
}

TEST_CASE("checkpoint sweep over the middle third") {
  std::vector<double> fake(3000, 0.9), real(3000, 0.9);
  for (int it = 1200; it <= 1800; ++it) fake[it - 1] = 0.1;
  const std::vector<DipTrace> traces{synthetic_trace(fake, 1500), synthetic_trace(real, 1500)};
  const std::vector<LabelClass> labels{F, R};
  const auto sw = sweep_checkpoint(traces, labels, 0.25);
  CHECK(sw.iterations.front() == 1000);
  CHECK(sw.iterations.back() == 2000);
  CHECK(sw.chosen_iteration == 1200);
  CHECK(sw.accuracy[0] == doctest::Approx(0.5));
  CHECK(sw.accuracy[2] == doctest::Approx(1.0));

  // Short runs never sweep below the minimum decision iteration.
  std::vector<double> shortf(900, 0.1);
  const std::vector<DipTrace> short_traces{synthetic_trace(shortf, 600)};
  const std::vector<LabelClass> one{F};
  CHECK(sweep_checkpoint(short_traces, one, 0.25).chosen_iteration == 500);

  CHECK_THROWS_AS(sweep_checkpoint({}, {}, 0.25), Error);
}

TEST_CASE("trace persistence round trip") {
  const InputShape s{16, 16, 3};
  DipConfig cfg;
  cfg.total_iterations = 30;
  cfg.checkpoint_iteration = 12;
  const auto tr = dip_optimize(generate_real_image(s, 8, 0.0), probe(s), cfg);
  TempDir tmp;
  save_dip_trace(tr, tmp.path(), "img", "some/target.png");
  CHECK(std::filesystem::exists(tmp / "img.trace.csv"));
  CHECK(std::filesystem::exists(tmp / "img.checkpoint.png"));
  const auto back = load_dip_trace(tmp.path(), "img");
  REQUIRE(back.p_real_series.size() == 30);
  CHECK(back.checkpoint_iteration == 12);
  CHECK(back.config.total_iterations == 30);
  for (std::size_t i = 0; i < 30; ++i) {
    CHECK(back.p_real_series[i] == doctest::Approx(tr.p_real_series[i]).epsilon(1e-12));
    CHECK(back.mse_series[i] == doctest::Approx(tr.mse_series[i]).epsilon(1e-12));
  }
  CHECK(linf_distance(back.checkpoint_image, tr.checkpoint_image) < 1e-6);
}
