#include <doctest.h>

#include <cmath>
#include <random>

#include "errors.hpp"
#include "metrics.hpp"
#include "temp_dir.hpp"

using namespace dfr;

namespace {

constexpr LabelClass F = LabelClass::kFake;
constexpr LabelClass R = LabelClass::kReal;

double pairwise_auroc(const std::vector<double>& s, const std::vector<LabelClass>& y) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != R) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != F) continue;
      pairs += 1.0;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return wins / pairs;
}

// p_real = sigmoid(sum(x) - 24) on 4x4x3 images.
DetectorModel brightness_probe() {
  return DetectorModel::linear_probe(ImageTensor(4, 4, 3, 0.0), ImageTensor(4, 4, 3, 1.0), {24.0, 0.0});
}

}  // namespace

TEST_CASE("compute_metrics on small hand-built sets") {
  const std::vector<double> sep{0.1, 0.2, 0.8, 0.9};
  const std::vector<LabelClass> y4{F, F, R, R};
  const auto p = compute_metrics(sep, y4, 0.5);
  CHECK(p.accuracy == 1.0);
  CHECK(*p.auroc == 1.0);
  for (int k = 0; k < 2; ++k) {
    CHECK(*p.precision[k] == 1.0);
    CHECK(*p.recall[k] == 1.0);
  }

  const std::vector<double> all_real{0.9, 0.9, 0.9, 0.9};
  const auto a = compute_metrics(all_real, y4, 0.5);
  CHECK(a.accuracy == 0.5);
  CHECK(*a.recall[1] == 1.0);
  CHECK(*a.recall[0] == 0.0);
  CHECK_FALSE(a.precision[0].has_value());
  CHECK(format_optional(a.precision[0]) == "n/a");

  // Predictions at 0.5: R R F R R F against truth R F R F R F.
  const std::vector<double> s6{0.9, 0.6, 0.4, 0.55, 0.7, 0.1};
  const std::vector<LabelClass> y6{R, F, R, F, R, F};
  const auto m = compute_metrics(s6, y6, 0.5);
  CHECK(m.confusion[1][1] == 2);
  CHECK(m.confusion[1][0] == 1);
  CHECK(m.confusion[0][1] == 2);
  CHECK(m.confusion[0][0] == 1);
  CHECK(m.accuracy == doctest::Approx(0.5));
  CHECK(*m.precision[1] == doctest::Approx(0.5));
  CHECK(*m.recall[1] == doctest::Approx(2.0 / 3.0));
  CHECK(*m.precision[0] == doctest::Approx(0.5));
  CHECK(*m.recall[0] == doctest::Approx(1.0 / 3.0));
  CHECK(*m.auroc == doctest::Approx(7.0 / 9.0).epsilon(1e-15));
  CHECK(m.n_images == 6);

  // Exact tie at the threshold goes to FAKE.
  const std::vector<double> tie{0.5};
  const std::vector<LabelClass> yt{F};
  CHECK(compute_metrics(tie, yt, 0.5).accuracy == 1.0);
  CHECK_FALSE(compute_metrics(tie, yt, 0.5).auroc.has_value());

  CHECK_THROWS_AS(compute_metrics({}, {}, 0.5), Error);
  try {
    compute_metrics({}, {}, 0.5);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kEmpty);
  }
}

TEST_CASE("auroc matches the pairwise oracle, ties included") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> coarse(0, 10);
  std::bernoulli_distribution coin(0.5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> s(50);
    std::vector<LabelClass> y(50);
    for (std::size_t i = 0; i < s.size(); ++i) {
      s[i] = coarse(rng) / 10.0;
      y[i] = coin(rng) ? R : F;
    }
    y[0] = R;
    y[1] = F;
    CHECK(std::abs(auroc(s, y) - pairwise_auroc(s, y)) <= 1e-12);
    std::vector<double> t(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) t[i] = std::exp(3.0 * s[i]) - 7.0;
    CHECK(std::abs(auroc(t, y) - auroc(s, y)) <= 1e-12);
  }
  const std::vector<double> same(6, 0.3);
  const std::vector<LabelClass> y{R, F, R, F, R, F};
  CHECK(auroc(same, y) == 0.5);
  const std::vector<LabelClass> one(6, R);
  try {
    auroc(same, one);
    FAIL("expected undefined AUROC");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kUndefined);
  }
}

TEST_CASE("lowering the threshold trades FAKE recall for REAL recall") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> s(40);
    std::vector<LabelClass> y(40);
    for (std::size_t i = 0; i < s.size(); ++i) {
      y[i] = i % 2 ? R : F;
      s[i] = std::clamp(u(rng) * 0.8 + (y[i] == R ? 0.2 : 0.0), 0.0, 1.0);
    }
    double prev_real = -1.0, prev_fake = 2.0;
    for (double t : {0.9, 0.75, 0.5, 0.25, 0.1}) {
      const auto m = compute_metrics(s, y, t);
      CHECK(*m.recall[1] >= prev_real);
      CHECK(*m.recall[0] <= prev_fake);
      prev_real = *m.recall[1];
      prev_fake = *m.recall[0];
    }
  }
}

TEST_CASE("category sampling") {
  const auto clf = brightness_probe();
  // Clean fakes are dark (p_real ~ 0), clean reals bright; two of each are misclassified.
  std::vector<ImageTensor> clean;
  std::vector<LabelClass> labels;
  for (int i = 0; i < 12; ++i) {
    clean.emplace_back(4, 4, 3, i < 10 ? 0.2 : 0.9);
    labels.push_back(F);
  }
  for (int i = 0; i < 12; ++i) {
    clean.emplace_back(4, 4, 3, i < 10 ? 0.9 : 0.2);
    labels.push_back(R);
  }
  NamedAttackSet set{"FGSM blackbox", {}};
  for (int i = 0; i < 15; ++i) {
    AdversarialRecord r;
    r.original = ImageTensor(4, 4, 3, i < 14 ? 0.2 : 0.9);  // the last original is already misclassified
    r.perturbed = ImageTensor(4, 4, 3, i < 8 ? 0.8 : 0.3);  // 8 fool the probe
    set.records.push_back(r);
  }
  set.records[3].error = "failed";
  const NamedAttackSet sets[1] = {set};

  SamplingPlan plan;
  plan.n_clean = 10;
  plan.n_wrong = 7;
  plan.n_perturbed_correct = 6;
  const auto s = sample_categories(clf, clean, labels, {}, sets, plan, 1);
  REQUIRE(s.categories.size() == 4);
  CHECK(s.total() == 33);
  CHECK(s.categories[0].name == kCleanFakeCategory);
  for (const auto& it : s.categories[0].items) CHECK(classify(clf, it.image, 0.5) == F);
  for (const auto& it : s.categories[1].items) CHECK(classify(clf, it.image, 0.5) == R);
  CHECK(s.categories[2].name == "FGSM blackbox Fake-Wrong");
  for (const auto& it : s.categories[2].items) {
    CHECK(classify(clf, it.image, 0.5) == R);
    CHECK(it.label == F);
    CHECK(it.ref != "FGSM blackbox#3");
  }
  for (const auto& it : s.categories[3].items) CHECK(classify(clf, it.image, 0.5) == F);

  const auto again = sample_categories(clf, clean, labels, {}, sets, plan, 1);
  for (std::size_t c = 0; c < s.categories.size(); ++c)
    for (std::size_t i = 0; i < s.categories[c].items.size(); ++i)
      CHECK(s.categories[c].items[i].ref == again.categories[c].items[i].ref);

  SamplingPlan none{0, 0, 0};
  CHECK(sample_categories(clf, clean, labels, {}, sets, none, 1).total() == 0);

  SamplingPlan greedy = plan;
  greedy.n_wrong = 8;  // only 7 eligible: record 3 errored
  try {
    sample_categories(clf, clean, labels, {}, sets, greedy, 1);
    FAIL("expected sampling error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kSampling);
    CHECK(std::string(e.what()).find("FGSM blackbox Fake-Wrong") != std::string::npos);
    CHECK(std::string(e.what()).find("7") != std::string::npos);
  }
}

TEST_CASE("report tables") {
  ReportInput in;
  auto metrics = [](double acc, std::optional<double> prec) {
    MetricsReport m;
    m.accuracy = acc;
    m.auroc = 0.9;
    m.precision = {prec, 0.8};
    m.recall = {0.7, 0.6};
    m.n_images = 10;
    return m;
  };
  in.clean.push_back({"CONVNET_A", metrics(0.9, 0.5), false});
  in.clean.push_back({"CONVNET_B", metrics(0.8, 0.5), false});
  const auto two = emit_clean_table(in, ReportFormat::kCsv);
  CHECK(std::count(two.begin(), two.end(), '\n') == 3);

  in.clean.push_back({"CONVNET_B lambda=5", metrics(0.7, std::nullopt), true});
  in.clean.push_back({"CONVNET_B lambda=50", metrics(0.6, 0.25), true});
  const auto csv = emit_clean_table(in, ReportFormat::kCsv);
  CHECK(csv.find("Average Regularized,0.6500,0.9000,0.2500") != std::string::npos);
  CHECK(csv.find("n/a") != std::string::npos);
  CHECK(emit_clean_table(in, ReportFormat::kCsv) == csv);

  in.attacks.push_back({"CONVNET_B", false, 0.98, {{"FGSM blackbox", 0.3}, {"FGSM whitebox", 0.1}}});
  in.attacks.push_back({"CONVNET_B lambda=5", true, 0.96, {{"FGSM blackbox", 0.5}, {"FGSM whitebox", std::nullopt}}});
  const auto atk = emit_attack_table(in, ReportFormat::kText);
  CHECK(atk.find("Fake-only accuracy (recall)") != std::string::npos);
  CHECK(atk.find("FGSM whitebox") != std::string::npos);
  CHECK(atk.find("Average Regularized") != std::string::npos);

  in.dip.push_back({"FGSM blackbox Fake-Wrong", 5, {0.6, 0.8}});
  in.dip_overall.push_back({"Overall", 40, {0.7, 0.85}});
  const auto dip = emit_dip_table(in, ReportFormat::kCsv);
  CHECK(dip.find("Accuracy @0.50") != std::string::npos);
  CHECK(dip.find("Accuracy @0.25") != std::string::npos);
  CHECK(dip.find("Overall,40,0.7000,0.8500") != std::string::npos);

  TempDir tmp;
  write_reports(in, tmp.path());
  CHECK(std::filesystem::exists(tmp / "clean_metrics.csv"));
  CHECK(std::filesystem::exists(tmp / "attack_accuracy.txt"));
  CHECK(std::filesystem::exists(tmp / "dip_defense.csv"));
}
