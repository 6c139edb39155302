#include "dfrobust/dfrobust.h"

#include <cmath>
#include <cstring>
#include <limits>
#include <string>

#include "attacks.hpp"
#include "dataset.hpp"
#include "detector.hpp"
#include "dip.hpp"
#include "errors.hpp"
#include "experiment.hpp"
#include "metrics.hpp"
#include "training.hpp"

struct dfr_model {
  dfr::DetectorModel model;
};

struct dfr_image {
  dfr::ImageTensor image;
};

struct dfr_dip_trace {
  dfr::DipTrace trace;
};

namespace {

thread_local std::string g_last_error;

dfr_status set_error(dfr_status s, const std::string& msg) {
  g_last_error = msg;
  return s;
}

template <class F>
dfr_status guarded(F&& f) {
  try {
    f();
    g_last_error.clear();
    return DFR_OK;
  } catch (const dfr::Error& e) {
    return set_error(static_cast<dfr_status>(e.code()), e.what());
  } catch (const std::bad_alloc&) {
    return set_error(DFR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return set_error(DFR_INTERNAL, e.what());
  }
}

void require(const void* p, const char* name) {
  if (!p) dfr::fail(dfr::ErrorCode::kInvalidArgument, std::string(name) + " is NULL");
}

dfr::Profile profile_of(const char* profile) { return profile ? dfr::parse_profile(profile) : dfr::Profile::kDesk; }

double nan_or(const std::optional<double>& v) { return v ? *v : std::numeric_limits<double>::quiet_NaN(); }

void copy_stats(const dfr::AttackSetStats& s, dfr_attack_stats* out) {
  if (!out) return;
  out->n = s.n;
  out->failures = s.failures;
  out->defined = s.defined ? 1 : 0;
  out->clean_accuracy = s.clean_accuracy;
  out->perturbed_accuracy = s.perturbed_accuracy;
  out->source_success_rate = s.source_success_rate;
}

dfr::TrainConfig train_config(const dfr_train_options* o) {
  dfr::TrainConfig tc;
  tc.epochs = o->epochs;
  tc.batch_size = o->batch_size;
  tc.learning_rate = o->learning_rate;
  tc.optimizer = dfr::parse_optimizer(o->optimizer ? o->optimizer : "adam");
  tc.seed = o->seed;
  return tc;
}

void copy_string(const std::string& s, char* buf, std::size_t capacity) {
  if (!buf || capacity == 0) return;
  const std::size_t n = std::min(s.size(), capacity - 1);
  std::memcpy(buf, s.data(), n);
  buf[n] = '\0';
}

}  // namespace

extern "C" {

const char* dfr_version(void) { return "0.1.0"; }

const char* dfr_status_name(dfr_status status) {
  switch (status) {
    case DFR_OK: return "ok";
    case DFR_INVALID_ARGUMENT: return "invalid argument";
    case DFR_INPUT_SHAPE: return "input shape";
    case DFR_INPUT_VALUE: return "input value";
    case DFR_IO: return "io";
    case DFR_CONFIG: return "config";
    case DFR_TRAINING_FAILURE: return "training failure";
    case DFR_UNSUPPORTED: return "unsupported";
    case DFR_EMPTY: return "empty";
    case DFR_SAMPLING: return "sampling";
    case DFR_STAGE_FAILURE: return "stage failure";
    case DFR_UNDEFINED: return "undefined";
    case DFR_CAPABILITY: return "capability";
    case DFR_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* dfr_last_error(void) { return g_last_error.c_str(); }

// ---- images

dfr_status dfr_image_load(const char* path, dfr_image** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = new dfr_image{dfr::read_image(path)};
  });
}

dfr_status dfr_image_from_floats(int height, int width, int channels, const float* hwc, dfr_image** out) {
  return guarded([&] {
    require(hwc, "hwc");
    require(out, "out");
    if (height < 1 || width < 1 || channels < 1) dfr::fail(dfr::ErrorCode::kInputShape, "image dimensions must be positive");
    const std::size_t n = static_cast<std::size_t>(height) * width * channels;
    std::vector<double> v(hwc, hwc + n);
    dfr::ImageTensor im(height, width, channels, std::move(v));
    im.validate();
    *out = new dfr_image{std::move(im)};
  });
}

dfr_status dfr_image_save_png(const dfr_image* image, const char* path) {
  return guarded([&] {
    require(image, "image");
    require(path, "path");
    dfr::write_png(image->image, path);
  });
}

int dfr_image_height(const dfr_image* image) { return image ? image->image.height() : 0; }
int dfr_image_width(const dfr_image* image) { return image ? image->image.width() : 0; }
int dfr_image_channels(const dfr_image* image) { return image ? image->image.channels() : 0; }

dfr_status dfr_image_copy(const dfr_image* image, float* out, size_t count) {
  return guarded([&] {
    require(image, "image");
    require(out, "out");
    const auto v = image->image.values();
    if (count < v.size()) dfr::fail(dfr::ErrorCode::kInvalidArgument, "output buffer too small");
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i]);
  });
}

void dfr_image_free(dfr_image* image) { delete image; }

// ---- datasets

dfr_status dfr_dataset_options_init(dfr_dataset_options* o, const char* profile) {
  return guarded([&] {
    require(o, "options");
    const auto c = dfr::default_experiment_config(profile_of(profile));
    *o = dfr_dataset_options{};
    o->generate_real = c.generate_real;
    o->image_size = c.image_size;
    o->grain = c.grain;
    o->split_ratio = c.split_ratio;
    o->warp_strength = c.synthetic.warp_strength;
    o->blend_mode = dfr::blend_mode_name(c.synthetic.blend_mode);
    o->seam_softness = c.synthetic.seam_softness;
    o->region_radius = c.synthetic.region_radius;
    o->smoothing = c.synthetic.smoothing;
  });
}

dfr_status dfr_augment_options_init(dfr_augment_options* o, const char* profile) {
  return guarded([&] {
    require(o, "options");
    const auto c = dfr::default_experiment_config(profile_of(profile));
    *o = dfr_augment_options{c.augmentation.blur_fraction, c.augmentation.sigma_min, c.augmentation.sigma_max, 0};
  });
}

dfr_status dfr_dataset_build(const dfr_dataset_options* o, const char* out_dir) {
  return guarded([&] {
    require(o, "options");
    require(o->real_dir, "options->real_dir");
    require(out_dir, "out_dir");
    const dfr::InputShape shape{o->image_size, o->image_size, 3};
    if (o->image_size < 8) dfr::fail(dfr::ErrorCode::kConfig, "image_size must be at least 8");
    if (o->generate_real > 0 && !dfr::fs::is_directory(o->real_dir)) {
      dfr::generate_real_corpus(o->real_dir, o->generate_real, shape, dfr::derive_seed(o->seed, 0), o->grain);
    }
    dfr::FakeSource src;
    if (o->fake_dir) {
      src.directory = dfr::fs::path(o->fake_dir);
    } else {
      dfr::SyntheticFakeConfig s;
      s.warp_strength = o->warp_strength;
      s.blend_mode = dfr::parse_blend_mode(o->blend_mode ? o->blend_mode : "alpha");
      s.seam_softness = o->seam_softness;
      s.region_radius = o->region_radius;
      s.smoothing = o->smoothing;
      s.seed = dfr::derive_seed(o->seed, 1);
      s.validate();
      src.synthetic = s;
    }
    dfr::fs::create_directories(out_dir);
    const auto m = dfr::build_dataset(o->real_dir, src, o->split_ratio, dfr::derive_seed(o->seed, 3), out_dir);
    dfr::write_manifest(m, dfr::fs::path(out_dir) / "manifest.csv");
  });
}

dfr_status dfr_dataset_augment(const char* manifest, const dfr_augment_options* o, const char* out_dir) {
  return guarded([&] {
    require(manifest, "manifest");
    require(o, "options");
    require(out_dir, "out_dir");
    dfr::AugmentationConfig c;
    c.blur_fraction = o->blur_fraction;
    c.sigma_min = o->sigma_min;
    c.sigma_max = o->sigma_max;
    c.seed = o->seed;
    c.validate();
    const auto m = dfr::augment_training_set(dfr::read_manifest(manifest), c, dfr::fs::path(out_dir) / "images");
    dfr::write_manifest(m, dfr::fs::path(out_dir) / "manifest.csv");
  });
}

// ---- models

dfr_status dfr_train_options_init(dfr_train_options* o, const char* profile) {
  return guarded([&] {
    require(o, "options");
    const auto c = dfr::default_experiment_config(profile_of(profile));
    *o = dfr_train_options{};
    o->architecture = dfr::architecture_name(c.target);
    o->epochs = c.training.epochs;
    o->batch_size = c.training.batch_size;
    o->learning_rate = c.training.learning_rate;
    o->optimizer = dfr::optimizer_name(c.training.optimizer);
  });
}

dfr_status dfr_train(const char* manifest, const dfr_train_options* o, const char* curve_csv, dfr_model** out) {
  return guarded([&] {
    require(manifest, "manifest");
    require(o, "options");
    require(o->architecture, "options->architecture");
    require(out, "out");
    const auto tc = train_config(o);
    tc.validate();
    dfr::RegularizationConfig reg;
    reg.lambda = o->lambda;
    dfr::TrainOutputs outs;
    if (curve_csv) outs.curve_path = dfr::fs::path(curve_csv);
    outs.verbose = o->verbose != 0;
    auto r = dfr::train_detector(dfr::parse_architecture(o->architecture), dfr::read_manifest(manifest), tc, reg, outs);
    *out = new dfr_model{std::move(r.model)};
  });
}

dfr_status dfr_fine_tune_blur(const dfr_model* model, const char* augmented_manifest, int epochs,
                              const dfr_train_options* o, const char* curve_csv, dfr_model** out) {
  return guarded([&] {
    require(model, "model");
    require(augmented_manifest, "augmented_manifest");
    require(o, "options");
    require(out, "out");
    const auto tc = train_config(o);
    tc.validate();
    dfr::TrainOutputs outs;
    if (curve_csv) outs.curve_path = dfr::fs::path(curve_csv);
    outs.verbose = o->verbose != 0;
    auto r = dfr::fine_tune_blur(model->model, dfr::read_manifest(augmented_manifest), epochs, tc, outs);
    *out = new dfr_model{std::move(r.model)};
  });
}

dfr_status dfr_model_load(const char* path, dfr_model** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = new dfr_model{dfr::load_model(path)};
  });
}

dfr_status dfr_model_save(const dfr_model* model, const char* path) {
  return guarded([&] {
    require(model, "model");
    require(path, "path");
    dfr::save_model(model->model, path);
  });
}

const char* dfr_model_id(const dfr_model* model) { return model ? model->model.id.c_str() : ""; }

const char* dfr_model_architecture(const dfr_model* model) {
  return model ? dfr::architecture_name(model->model.architecture()) : "";
}

void dfr_model_free(dfr_model* model) { delete model; }

dfr_status dfr_predict(const dfr_model* model, const dfr_image* image, double* p_real) {
  return guarded([&] {
    require(model, "model");
    require(image, "image");
    require(p_real, "p_real");
    *p_real = dfr::forward_probs(model->model, image->image).p_real();
  });
}

dfr_status dfr_classify(const dfr_model* model, const dfr_image* image, double threshold, int* is_real) {
  return guarded([&] {
    require(model, "model");
    require(image, "image");
    require(is_real, "is_real");
    if (!(threshold >= 0.0 && threshold <= 1.0)) dfr::fail(dfr::ErrorCode::kInvalidArgument, "threshold must lie in [0,1]");
    *is_real = dfr::classify(model->model, image->image, threshold) == dfr::LabelClass::kReal;
  });
}

// ---- evaluation

dfr_status dfr_evaluate(const dfr_model* model, const char* manifest, const char* split, double threshold,
                        dfr_metrics* out) {
  return guarded([&] {
    require(model, "model");
    require(manifest, "manifest");
    require(out, "out");
    const std::string s = split ? split : "test";
    if (s != "train" && s != "test") dfr::fail(dfr::ErrorCode::kInvalidArgument, "split must be train or test");
    const auto data = dfr::load_split(dfr::read_manifest(manifest), s == "train" ? dfr::Split::kTrain : dfr::Split::kTest);
    const auto p = dfr::p_real_batch(model->model, data.images);
    const auto m = dfr::compute_metrics(p, data.labels, threshold);
    out->accuracy = m.accuracy;
    out->auroc = nan_or(m.auroc);
    for (int k = 0; k < 2; ++k) {
      out->precision[k] = nan_or(m.precision[k]);
      out->recall[k] = nan_or(m.recall[k]);
      for (int j = 0; j < 2; ++j) out->confusion[k][j] = m.confusion[k][j];
    }
    out->n_images = m.n_images;
  });
}

// ---- attacks

dfr_status dfr_attack_options_init(dfr_attack_options* o, const char* profile) {
  return guarded([&] {
    require(o, "options");
    const auto c = dfr::default_experiment_config(profile_of(profile));
    *o = dfr_attack_options{};
    o->attack = "FGSM";
    o->epsilon = c.fgsm.epsilon;
    o->kappa = c.cw.kappa;
    o->c_min = c.cw.c_min;
    o->c_max = c.cw.c_max;
    o->search_steps = c.cw.search_steps;
    o->max_iterations = c.cw.max_iterations;
    o->learning_rate = c.cw.learning_rate;
    o->abort_early = c.cw.abort_early ? 1 : 0;
    o->max_images = c.attack_fakes;
  });
}

dfr_status dfr_attack(const dfr_model* source, const dfr_model* target, const char* manifest,
                      const dfr_attack_options* o, const char* out_dir, dfr_attack_stats* stats) {
  return guarded([&] {
    require(source, "source");
    require(target, "target");
    require(manifest, "manifest");
    require(o, "options");
    require(out_dir, "out_dir");
    dfr::AttackSpec spec;
    spec.attack = dfr::parse_attack(o->attack ? o->attack : "FGSM");
    spec.fgsm.epsilon = o->epsilon;
    spec.cw.kappa = o->kappa;
    spec.cw.c_min = o->c_min;
    spec.cw.c_max = o->c_max;
    spec.cw.search_steps = o->search_steps;
    spec.cw.max_iterations = o->max_iterations;
    spec.cw.learning_rate = o->learning_rate;
    spec.cw.abort_early = o->abort_early != 0;
    spec.fgsm.validate();
    spec.cw.validate();
    if (o->max_images < 0) dfr::fail(dfr::ErrorCode::kConfig, "max_images must be >= 0");
    auto fakes = dfr::load_split(dfr::read_manifest(manifest), dfr::Split::kTest, dfr::LabelClass::kFake);
    std::size_t n = fakes.images.size();
    if (o->max_images > 0) n = std::min<std::size_t>(n, static_cast<std::size_t>(o->max_images));
    if (n == 0) dfr::fail(dfr::ErrorCode::kEmpty, "no TEST fakes in '" + std::string(manifest) + "'");
    fakes.images.resize(n);
    std::vector<std::string> paths;
    for (std::size_t i = 0; i < n; ++i) paths.push_back(fakes.paths[i].string());
    const auto set = dfr::craft_attack_set(source->model, target->model, fakes.images, paths, spec);
    dfr::save_adversarial_set(set.records, out_dir);
    copy_stats(set.stats, stats);
  });
}

dfr_status dfr_attack_evaluate(const char* set_dir, const dfr_model* target, dfr_attack_stats* stats) {
  return guarded([&] {
    require(set_dir, "set_dir");
    require(target, "target");
    const auto set = dfr::evaluate_attack_set(dfr::load_adversarial_set(set_dir), target->model);
    copy_stats(set.stats, stats);
  });
}

// ---- DIP

dfr_status dfr_dip_options_init(dfr_dip_options* o, const char* profile) {
  return guarded([&] {
    require(o, "options");
    const auto d = dfr::default_experiment_config(profile_of(profile)).dip_config;
    *o = dfr_dip_options{d.total_iterations, d.checkpoint_iteration, d.smoothing_window, d.learning_rate, 0};
  });
}

dfr_status dfr_dip_run(const dfr_model* classifier, const dfr_image* target, const dfr_dip_options* o,
                       dfr_dip_trace** out) {
  return guarded([&] {
    require(classifier, "classifier");
    require(target, "target");
    require(o, "options");
    require(out, "out");
    dfr::DipConfig c;
    c.total_iterations = o->total_iterations;
    c.checkpoint_iteration = o->checkpoint_iteration;
    c.smoothing_window = o->smoothing_window;
    c.learning_rate = o->learning_rate;
    c.seed = o->seed;
    *out = new dfr_dip_trace{dfr::dip_optimize(target->image, classifier->model, c)};
  });
}

dfr_status dfr_dip_save(const dfr_dip_trace* trace, const char* dir, const char* stem, const char* target_path) {
  return guarded([&] {
    require(trace, "trace");
    require(dir, "dir");
    require(stem, "stem");
    dfr::save_dip_trace(trace->trace, dir, stem, target_path ? target_path : "");
  });
}

int dfr_dip_length(const dfr_dip_trace* trace) {
  return trace ? static_cast<int>(trace->trace.p_real_series.size()) : 0;
}

dfr_status dfr_dip_p_real(const dfr_dip_trace* trace, int iteration, double* p_real) {
  return guarded([&] {
    require(trace, "trace");
    require(p_real, "p_real");
    *p_real = trace->trace.p_real_at(iteration);
  });
}

dfr_status dfr_dip_mse(const dfr_dip_trace* trace, int iteration, double* mse) {
  return guarded([&] {
    require(trace, "trace");
    require(mse, "mse");
    const auto& s = trace->trace.mse_series;
    if (iteration < 1 || static_cast<std::size_t>(iteration) > s.size()) {
      dfr::fail(dfr::ErrorCode::kInvalidArgument, "iteration " + std::to_string(iteration) + " outside the trace");
    }
    *mse = s[static_cast<std::size_t>(iteration) - 1];
  });
}

double dfr_dip_best_mse(const dfr_dip_trace* trace) {
  return trace ? trace->trace.best_mse : std::numeric_limits<double>::quiet_NaN();
}

dfr_status dfr_dip_classify(const dfr_dip_trace* trace, int iteration, double threshold, int* is_real) {
  return guarded([&] {
    require(trace, "trace");
    require(is_real, "is_real");
    *is_real = dfr::dip_classify_at(trace->trace, iteration, threshold) == dfr::LabelClass::kReal;
  });
}

void dfr_dip_free(dfr_dip_trace* trace) { delete trace; }

// ---- experiments

dfr_status dfr_experiment_run(const char* config_path, const dfr_experiment_overrides* o, char* run_dir,
                              size_t capacity) {
  return guarded([&] {
    require(config_path, "config_path");
    dfr::ConfigOverrides ov;
    bool verbose = false;
    if (o) {
      if (o->has_seed) ov.seed = o->seed;
      if (o->profile) ov.profile = dfr::parse_profile(o->profile);
      if (o->out_dir) ov.out_dir = dfr::fs::path(o->out_dir);
      verbose = o->verbose != 0;
    }
    const auto cfg = dfr::load_experiment_config(config_path, ov);
    const auto r = dfr::run_experiment(cfg, verbose);
    copy_string(r.run_dir.string(), run_dir, capacity);
  });
}

dfr_status dfr_report(const char* run_dir, const char* format, char* buffer, size_t capacity, size_t* needed) {
  return guarded([&] {
    require(run_dir, "run_dir");
    const std::string f = format ? format : "text";
    if (f != "text" && f != "csv") dfr::fail(dfr::ErrorCode::kInvalidArgument, "format must be text or csv");
    const auto fmt = f == "csv" ? dfr::ReportFormat::kCsv : dfr::ReportFormat::kText;
    const auto in = dfr::load_report_input(dfr::fs::path(run_dir) / "report_input.json");
    std::string out;
    if (!in.clean.empty()) out += dfr::emit_clean_table(in, fmt) + "\n";
    if (!in.attacks.empty()) out += dfr::emit_attack_table(in, fmt) + "\n";
    if (!in.dip.empty() || !in.dip_overall.empty()) out += dfr::emit_dip_table(in, fmt);
    if (needed) *needed = out.size() + 1;
    if (buffer && capacity > out.size()) copy_string(out, buffer, capacity);
  });
}

}  // extern "C"
