#include <doctest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <random>

#include "detector.hpp"
#include "errors.hpp"
#include "fd_oracle.hpp"
#include "temp_dir.hpp"

using namespace dfr;

namespace {

ImageTensor random_image(InputShape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  ImageTensor im(s.height, s.width, s.channels);
  for (double& v : im.values()) v = u(rng);
  return im;
}

ErrorCode code_of(auto&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::kInternal;
}

}  // namespace

TEST_CASE("softmax") {
  const auto even = softmax(Logits{{0.0, 0.0}});
  CHECK(even.p_real() == 0.5);
  const auto q = softmax(Logits{{0.0, std::log(3.0)}});
  CHECK(q.p_real() == doctest::Approx(0.75).epsilon(1e-15));
  const auto big = softmax(Logits{{1000.0, 0.0}});
  CHECK(std::isfinite(big.p_real()));
  CHECK(big.p_real() < 1e-300);
  CHECK(big[0] == 1.0);
}

TEST_CASE("architectures build, run and are seed-deterministic") {
  const InputShape s{16, 16, 3};
  const auto img = random_image(s, 1);
  for (auto arch : {Architecture::kConvNetA, Architecture::kConvNetB}) {
    const auto a = DetectorModel::create(arch, s, 7);
    const auto b = DetectorModel::create(arch, s, 7);
    const auto c = DetectorModel::create(arch, s, 8);
    CHECK(a.parameter_count() > 1000);
    const auto la = forward_logits(a, img);
    CHECK(la[0] == forward_logits(b, img)[0]);
    CHECK(la[1] != forward_logits(c, img)[1]);
    const auto p = forward_probs(a, img);
    CHECK(p[0] + p[1] == doctest::Approx(1.0).epsilon(1e-15));

    const std::vector<ImageTensor> batch{img, random_image(s, 2), random_image(s, 3)};
    const auto lb = forward_logits_batch(a, batch, 2);
    REQUIRE(lb.size() == 3);
    CHECK(lb[0][1] == doctest::Approx(la[1]).epsilon(1e-12));
    CHECK(p_real_batch(a, batch)[2] == doctest::Approx(forward_probs(a, batch[2]).p_real()).epsilon(1e-12));
  }
  CHECK(code_of([&] { DetectorModel::create(Architecture::kConvNetA, {12, 12, 3}, 1); }) == ErrorCode::kInputShape);
  CHECK(parse_architecture("CONVNET_B") == Architecture::kConvNetB);
  CHECK(code_of([] { parse_architecture("VGG16"); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("input validation") {
  const InputShape s{16, 16, 3};
  const auto m = DetectorModel::create(Architecture::kConvNetA, s, 1);
  CHECK(code_of([&] { forward_logits(m, ImageTensor(8, 8, 3, 0.5)); }) == ErrorCode::kInputShape);
  auto bad = random_image(s, 4);
  bad.values()[5] = std::numeric_limits<double>::quiet_NaN();
  CHECK(code_of([&] { forward_logits(m, bad); }) == ErrorCode::kInputValue);
  bad.values()[5] = 1.5;
  CHECK(code_of([&] { forward_logits(m, bad); }) == ErrorCode::kInputValue);
}

TEST_CASE("linear probe: logits and input gradients are the weights") {
  const InputShape s{4, 4, 3};
  ImageTensor wf(4, 4, 3), wr(4, 4, 3);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& v : wf.values()) v = n(rng);
  for (double& v : wr.values()) v = n(rng);
  const auto probe = DetectorModel::linear_probe(wf, wr, {0.5, -0.25});
  const auto x = random_image(s, 9);
  double zr = -0.25;
  for (std::size_t i = 0; i < x.size(); ++i) zr += wr.values()[i] * x.values()[i];
  CHECK(forward_logits(probe, x)[1] == doctest::Approx(zr).epsilon(1e-12));

  const auto g = input_gradient(probe, x, Functional::logit(1));
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(g.values()[i] == doctest::Approx(wr.values()[i]).epsilon(1e-12));
  const auto zero = input_gradient(probe, x, Functional::constant());
  for (double v : zero.values()) CHECK(v == 0.0);
  CHECK(code_of([&] { input_gradient(probe, x, Functional::predicted_class()); }) == ErrorCode::kUnsupported);
  CHECK(code_of([&] { input_gradient(probe, x, Functional::logit(2)); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("input gradient matches finite differences on both architectures") {
  const InputShape s{16, 16, 3};
  for (auto arch : {Architecture::kConvNetA, Architecture::kConvNetB}) {
    auto m = DetectorModel::create(arch, s, 21);
    // Give CONVNET_B's zero-initialised residual branches some weight.
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n(0.0, 0.05);
    for (auto& t : m.mutable_parameters()) {
      for (double& v : t.values()) {
        if (v == 0.0) v = n(rng);
      }
    }
    const auto x = random_image(s, 6);
    const Functional fn = Functional::cross_entropy(LabelClass::kFake);
    const auto g = input_gradient(m, x, fn);
    const auto f = [&](const std::vector<double>& v) {
      const Logits z = forward_logits(m, ImageTensor(16, 16, 3, v));
      const double mx = std::max(z[0], z[1]);
      return -(z[0] - mx - std::log(std::exp(z[0] - mx) + std::exp(z[1] - mx)));
    };
    const std::vector<double> base(x.values().begin(), x.values().end());
    std::uniform_int_distribution<std::size_t> pick(0, x.size() - 1);
    for (int k = 0; k < 10; ++k) {
      const std::size_t i = pick(rng);
      const double fd = testing::central_difference(f, base, i, 1e-5);
      CHECK(testing::rel_error(g.values()[i], fd, 1e-8) <= 1e-3);
    }
  }
}

TEST_CASE("thresholds") {
  CHECK(classify_score(0.5, 0.5) == LabelClass::kFake);
  CHECK(classify_score(0.5000001, 0.5) == LabelClass::kReal);
  CHECK(classify_score(0.3, 0.25) == LabelClass::kReal);
  CHECK(classify_score(0.0, 0.0) == LabelClass::kFake);
  CHECK(classify_score(1.0, 1.0) == LabelClass::kFake);
  CHECK(code_of([] { classify_score(0.5, 1.1); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("save and load round trip") {
  const InputShape s{16, 16, 3};
  auto m = DetectorModel::create(Architecture::kConvNetB, s, 4);
  m.id = "b-test";
  m.provenance.lambda = 50.0;
  m.provenance.epochs = 3;
  m.provenance.dataset_id = "abc";
  TempDir tmp;
  save_model(m, tmp / "m.dfrw");
  CHECK(std::filesystem::exists(tmp / "m.dfrw.json"));
  const auto back = load_model(tmp / "m.dfrw");
  CHECK(back.id == "b-test");
  CHECK(back.architecture() == Architecture::kConvNetB);
  CHECK(back.provenance.lambda == 50.0);
  CHECK(back.provenance.dataset_id == "abc");
  const auto x = random_image(s, 2);
  CHECK(forward_logits(back, x)[1] == doctest::Approx(forward_logits(m, x)[1]).epsilon(1e-6));

  {
    std::ofstream junk(tmp / "junk.dfrw", std::ios::binary);
    junk << "not a model";
  }
  std::filesystem::copy_file(tmp / "m.dfrw.json", tmp / "junk.dfrw.json");
  CHECK(code_of([&] { load_model(tmp / "junk.dfrw"); }) == ErrorCode::kIo);
  CHECK(code_of([&] { load_model(tmp / "missing.dfrw"); }) == ErrorCode::kIo);
}
