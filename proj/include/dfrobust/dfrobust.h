#ifndef DFROBUST_DFROBUST_H
#define DFROBUST_DFROBUST_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define DFR_API __declspec(dllexport)
#else
#define DFR_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Values mirror dfr::ErrorCode. */
typedef enum dfr_status {
  DFR_OK = 0,
  DFR_INVALID_ARGUMENT = 1,
  DFR_INPUT_SHAPE = 2,
  DFR_INPUT_VALUE = 3,
  DFR_IO = 4,
  DFR_CONFIG = 5,
  DFR_TRAINING_FAILURE = 6,
  DFR_UNSUPPORTED = 7,
  DFR_EMPTY = 8,
  DFR_SAMPLING = 9,
  DFR_STAGE_FAILURE = 10,
  DFR_UNDEFINED = 11,
  DFR_CAPABILITY = 12,
  DFR_INTERNAL = 99
} dfr_status;

typedef struct dfr_model dfr_model;
typedef struct dfr_image dfr_image;
typedef struct dfr_dip_trace dfr_dip_trace;

DFR_API const char* dfr_version(void);
DFR_API const char* dfr_status_name(dfr_status status);
/* Message of the last failed call on this thread; "" after a success. */
DFR_API const char* dfr_last_error(void);

/* ---- images: H x W x C, values in [0,1] ---- */

DFR_API dfr_status dfr_image_load(const char* path, dfr_image** out);
DFR_API dfr_status dfr_image_from_floats(int height, int width, int channels, const float* hwc, dfr_image** out);
DFR_API dfr_status dfr_image_save_png(const dfr_image* image, const char* path);
DFR_API int dfr_image_height(const dfr_image* image);
DFR_API int dfr_image_width(const dfr_image* image);
DFR_API int dfr_image_channels(const dfr_image* image);
DFR_API dfr_status dfr_image_copy(const dfr_image* image, float* out, size_t count);
DFR_API void dfr_image_free(dfr_image* image);

/* ---- datasets ---- */

typedef struct dfr_dataset_options {
  const char* real_dir;
  const char* fake_dir;   /* NULL: synthesize one fake per real image */
  int generate_real;      /* > 0: fill real_dir procedurally when it does not exist */
  int image_size;
  double grain;
  double split_ratio;
  double warp_strength;
  const char* blend_mode; /* "alpha" or "color_matched" */
  double seam_softness;
  double region_radius;
  double smoothing;
  uint64_t seed;
} dfr_dataset_options;

typedef struct dfr_augment_options {
  double blur_fraction;
  double sigma_min;
  double sigma_max;
  uint64_t seed;
} dfr_augment_options;

/* profile: "desk" or "paper"; NULL means desk. */
DFR_API dfr_status dfr_dataset_options_init(dfr_dataset_options* options, const char* profile);
DFR_API dfr_status dfr_augment_options_init(dfr_augment_options* options, const char* profile);

/* Writes <out_dir>/manifest.csv (and synthetic fakes under <out_dir>/fake). */
DFR_API dfr_status dfr_dataset_build(const dfr_dataset_options* options, const char* out_dir);
/* Blurs part of the TRAIN split; writes <out_dir>/manifest.csv. */
DFR_API dfr_status dfr_dataset_augment(const char* manifest, const dfr_augment_options* options,
                                       const char* out_dir);

/* ---- models ---- */

typedef struct dfr_train_options {
  const char* architecture; /* "CONVNET_A" or "CONVNET_B" */
  int epochs;
  int batch_size;
  double learning_rate;
  const char* optimizer; /* "adam" or "sgd" */
  double lambda;         /* input-gradient penalty strength, 0 disables */
  uint64_t seed;
  int verbose;
} dfr_train_options;

DFR_API dfr_status dfr_train_options_init(dfr_train_options* options, const char* profile);

/* curve_csv may be NULL. */
DFR_API dfr_status dfr_train(const char* manifest, const dfr_train_options* options, const char* curve_csv,
                             dfr_model** out);
DFR_API dfr_status dfr_fine_tune_blur(const dfr_model* model, const char* augmented_manifest, int epochs,
                                      const dfr_train_options* options, const char* curve_csv, dfr_model** out);

DFR_API dfr_status dfr_model_load(const char* path, dfr_model** out);
/* Weights to `path`, metadata to `path`.json. */
DFR_API dfr_status dfr_model_save(const dfr_model* model, const char* path);
DFR_API const char* dfr_model_id(const dfr_model* model);
DFR_API const char* dfr_model_architecture(const dfr_model* model);
DFR_API void dfr_model_free(dfr_model* model);

DFR_API dfr_status dfr_predict(const dfr_model* model, const dfr_image* image, double* p_real);
/* *is_real = 1 iff p_real > threshold. */
DFR_API dfr_status dfr_classify(const dfr_model* model, const dfr_image* image, double threshold, int* is_real);

/* ---- evaluation ---- */

typedef struct dfr_metrics {
  double accuracy;
  double auroc;        /* NaN when one class is missing */
  double precision[2]; /* indexed FAKE = 0, REAL = 1; NaN when undefined */
  double recall[2];
  size_t confusion[2][2]; /* [true][predicted] */
  size_t n_images;
} dfr_metrics;

/* split: "train" or "test". */
DFR_API dfr_status dfr_evaluate(const dfr_model* model, const char* manifest, const char* split, double threshold,
                                dfr_metrics* out);

/* ---- attacks ---- */

typedef struct dfr_attack_options {
  const char* attack; /* "FGSM" or "CW_L2" */
  double epsilon;
  double kappa;
  double c_min;
  double c_max;
  int search_steps;
  int max_iterations;
  double learning_rate;
  int abort_early;
  int max_images; /* 0: every TEST fake */
} dfr_attack_options;

typedef struct dfr_attack_stats {
  size_t n;
  size_t failures;
  int defined;
  double clean_accuracy;     /* fraction of originals the target calls FAKE */
  double perturbed_accuracy; /* fraction of perturbed images the target calls FAKE */
  double source_success_rate;
} dfr_attack_stats;

DFR_API dfr_status dfr_attack_options_init(dfr_attack_options* options, const char* profile);

/* Attacks the TEST fakes of `manifest` on `source`, scores them on `target`
   and writes the adversarial set to `out_dir`. */
DFR_API dfr_status dfr_attack(const dfr_model* source, const dfr_model* target, const char* manifest,
                              const dfr_attack_options* options, const char* out_dir, dfr_attack_stats* stats);
/* Re-scores a saved adversarial set on another model. */
DFR_API dfr_status dfr_attack_evaluate(const char* set_dir, const dfr_model* target, dfr_attack_stats* stats);

/* ---- deep image prior ---- */

typedef struct dfr_dip_options {
  int total_iterations;
  int checkpoint_iteration;
  int smoothing_window;
  double learning_rate;
  uint64_t seed;
} dfr_dip_options;

DFR_API dfr_status dfr_dip_options_init(dfr_dip_options* options, const char* profile);
DFR_API dfr_status dfr_dip_run(const dfr_model* classifier, const dfr_image* target, const dfr_dip_options* options,
                               dfr_dip_trace** out);
DFR_API dfr_status dfr_dip_save(const dfr_dip_trace* trace, const char* dir, const char* stem,
                                const char* target_path);
DFR_API int dfr_dip_length(const dfr_dip_trace* trace);
/* Iterations are 1-based. */
DFR_API dfr_status dfr_dip_p_real(const dfr_dip_trace* trace, int iteration, double* p_real);
DFR_API dfr_status dfr_dip_mse(const dfr_dip_trace* trace, int iteration, double* mse);
DFR_API double dfr_dip_best_mse(const dfr_dip_trace* trace);
DFR_API dfr_status dfr_dip_classify(const dfr_dip_trace* trace, int iteration, double threshold, int* is_real);
DFR_API void dfr_dip_free(dfr_dip_trace* trace);

/* ---- experiments and reports ---- */

typedef struct dfr_experiment_overrides {
  int has_seed;
  uint64_t seed;
  const char* profile; /* NULL: from the config file */
  const char* out_dir; /* NULL: from the config file */
  int verbose;
} dfr_experiment_overrides;

/* Runs or resumes the experiment; the run directory is copied to run_dir
   (NUL-terminated, truncated to capacity). overrides may be NULL. */
DFR_API dfr_status dfr_experiment_run(const char* config_path, const dfr_experiment_overrides* overrides,
                                      char* run_dir, size_t capacity);

/* Tables of a finished run. format: "text" or "csv". Returns the full length
   in *needed; the text is copied when capacity allows. */
DFR_API dfr_status dfr_report(const char* run_dir, const char* format, char* buffer, size_t capacity,
                              size_t* needed);

#ifdef __cplusplus
}
#endif

#endif
