#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "dfrobust/dfrobust.h"
#include "temp_dir.hpp"

TEST_CASE("status reporting") {
  CHECK(std::string(dfr_status_name(DFR_CONFIG)) == "config");
  CHECK(std::string(dfr_version()).size() > 0);
  dfr_model* m = nullptr;
  CHECK(dfr_model_load(nullptr, &m) == DFR_INVALID_ARGUMENT);
  CHECK(std::string(dfr_last_error()).find("path") != std::string::npos);
  CHECK(dfr_model_load("/nonexistent/model.dfrw", &m) == DFR_IO);
  CHECK(m == nullptr);
  dfr_model_free(nullptr);
  dfr_image_free(nullptr);
  dfr_dip_free(nullptr);
}

TEST_CASE("images") {
  std::vector<float> px(4 * 4 * 3, 0.25f);
  px[5] = 1.0f;
  dfr_image* img = nullptr;
  REQUIRE(dfr_image_from_floats(4, 4, 3, px.data(), &img) == DFR_OK);
  CHECK(std::string(dfr_last_error()).empty());
  CHECK(dfr_image_height(img) == 4);
  CHECK(dfr_image_channels(img) == 3);
  std::vector<float> back(px.size());
  CHECK(dfr_image_copy(img, back.data(), back.size()) == DFR_OK);
  CHECK(back == px);
  CHECK(dfr_image_copy(img, back.data(), 3) == DFR_INVALID_ARGUMENT);
  dfr_image_free(img);

  px[0] = 2.0f;
  dfr_image* bad = nullptr;
  CHECK(dfr_image_from_floats(4, 4, 3, px.data(), &bad) == DFR_INPUT_VALUE);
  CHECK(bad == nullptr);
  CHECK(dfr_image_from_floats(0, 4, 3, px.data(), &bad) == DFR_INPUT_SHAPE);
}

TEST_CASE("profiles fill option structs") {
  dfr_attack_options desk, paper;
  REQUIRE(dfr_attack_options_init(&desk, "desk") == DFR_OK);
  REQUIRE(dfr_attack_options_init(&paper, "paper") == DFR_OK);
  CHECK(paper.epsilon == 0.02);
  CHECK(paper.kappa == 200.0);
  CHECK(paper.max_iterations == 1000);
  CHECK(paper.c_min == 100.0);
  CHECK(paper.c_max == 10000.0);
  CHECK(paper.search_steps == 5);
  dfr_dip_options dp;
  REQUIRE(dfr_dip_options_init(&dp, "paper") == DFR_OK);
  CHECK(dp.total_iterations == 10000);
  CHECK(dp.checkpoint_iteration == 6000);
  CHECK(dp.smoothing_window == 10);
  REQUIRE(dfr_dip_options_init(&dp, nullptr) == DFR_OK);
  CHECK(dp.total_iterations == 3000);
  dfr_train_options t;
  REQUIRE(dfr_train_options_init(&t, "desk") == DFR_OK);
  CHECK(t.epochs == 5);
  CHECK(t.batch_size == 16);
  CHECK(dfr_train_options_init(&t, "laptop") == DFR_CONFIG);
}

TEST_CASE("dataset, training, evaluation, attack and DIP through the C interface") {
  dfr::TempDir tmp;
  dfr_dataset_options d;
  REQUIRE(dfr_dataset_options_init(&d, "desk") == DFR_OK);
  const std::string real = (tmp / "real").string();
  const std::string data = (tmp / "data").string();
  d.real_dir = real.c_str();
  d.generate_real = 16;
  d.image_size = 16;
  d.seed = 2;
  REQUIRE(dfr_dataset_build(&d, data.c_str()) == DFR_OK);
  const std::string manifest = data + "/manifest.csv";

  dfr_train_options t;
  REQUIRE(dfr_train_options_init(&t, "desk") == DFR_OK);
  t.architecture = "CONVNET_B";
  t.epochs = 1;
  t.batch_size = 8;
  dfr_model* model = nullptr;
  REQUIRE(dfr_train(manifest.c_str(), &t, nullptr, &model) == DFR_OK);
  CHECK(std::string(dfr_model_architecture(model)) == "CONVNET_B");
  const std::string path = (tmp / "b.dfrw").string();
  REQUIRE(dfr_model_save(model, path.c_str()) == DFR_OK);
  dfr_model* loaded = nullptr;
  REQUIRE(dfr_model_load(path.c_str(), &loaded) == DFR_OK);

  dfr_metrics m{};
  REQUIRE(dfr_evaluate(loaded, manifest.c_str(), "test", 0.5, &m) == DFR_OK);
  CHECK(m.n_images == 8);
  CHECK(m.confusion[0][0] + m.confusion[0][1] + m.confusion[1][0] + m.confusion[1][1] == 8);
  CHECK(dfr_evaluate(loaded, manifest.c_str(), "validation", 0.5, &m) == DFR_INVALID_ARGUMENT);

  dfr_attack_options a;
  REQUIRE(dfr_attack_options_init(&a, "desk") == DFR_OK);
  a.max_images = 3;
  dfr_attack_stats st{};
  const std::string set = (tmp / "set").string();
  REQUIRE(dfr_attack(loaded, loaded, manifest.c_str(), &a, set.c_str(), &st) == DFR_OK);
  CHECK(st.n == 3);
  dfr_attack_stats again{};
  REQUIRE(dfr_attack_evaluate(set.c_str(), model, &again) == DFR_OK);
  CHECK(again.perturbed_accuracy == st.perturbed_accuracy);
  a.epsilon = -1.0;
  CHECK(dfr_attack(loaded, loaded, manifest.c_str(), &a, set.c_str(), &st) == DFR_CONFIG);

  std::vector<float> px(16 * 16 * 3, 0.5f);
  dfr_image* img = nullptr;
  REQUIRE(dfr_image_from_floats(16, 16, 3, px.data(), &img) == DFR_OK);
  double p = -1.0;
  REQUIRE(dfr_predict(model, img, &p) == DFR_OK);
  CHECK(p >= 0.0);
  CHECK(p <= 1.0);
  dfr_dip_options o;
  REQUIRE(dfr_dip_options_init(&o, "desk") == DFR_OK);
  o.total_iterations = 20;
  o.checkpoint_iteration = 10;
  dfr_dip_trace* tr = nullptr;
  REQUIRE(dfr_dip_run(model, img, &o, &tr) == DFR_OK);
  CHECK(dfr_dip_length(tr) == 20);
  double p10 = -1.0, mse1 = -1.0;
  CHECK(dfr_dip_p_real(tr, 10, &p10) == DFR_OK);
  CHECK(dfr_dip_mse(tr, 1, &mse1) == DFR_OK);
  CHECK(dfr_dip_best_mse(tr) <= mse1);
  CHECK(dfr_dip_mse(tr, 21, &mse1) == DFR_INVALID_ARGUMENT);
  int is_real = 0;
  CHECK(dfr_dip_classify(tr, 10, 0.5, &is_real) == DFR_CONFIG);
  CHECK(dfr_dip_save(tr, tmp.path().string().c_str(), "grey", nullptr) == DFR_OK);
  dfr_dip_free(tr);

  o.checkpoint_iteration = 30;
  CHECK(dfr_dip_run(model, img, &o, &tr) == DFR_CONFIG);
  dfr_image_free(img);
  dfr_model_free(loaded);
  dfr_model_free(model);
}

TEST_CASE("experiment config errors") {
  char buf[256];
  CHECK(dfr_experiment_run("/nonexistent/config.ini", nullptr, buf, sizeof buf) == DFR_CONFIG);
  std::size_t needed = 0;
  CHECK(dfr_report("/nonexistent/run", "text", nullptr, 0, &needed) == DFR_IO);
  CHECK(dfr_report("/nonexistent/run", "html", nullptr, 0, &needed) == DFR_INVALID_ARGUMENT);
}
