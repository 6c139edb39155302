#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "detector.hpp"

namespace dfr {

// Checkpoints earlier than this are never used for a decision.
inline constexpr int kMinDecisionIteration = 500;

struct DipConfig {
  int total_iterations = 3000;
  int checkpoint_iteration = 1500;
  int smoothing_window = 10;
  double learning_rate = 2.5e-4;
  std::uint64_t seed = 0;
  void validate() const;
};

// Four-level encoder-decoder, widths {8,16,32,64}. Skips on every level except
// full resolution, sigmoid output. The 32-channel seed z ~ Uniform(0, 0.1) is drawn once.
class GeneratorNet {
 public:
  static GeneratorNet create(InputShape shape, std::uint64_t seed);

  const Tensor& seed_input() const { return z_; }
  std::vector<Tensor>& parameters() { return params_; }
  const std::vector<Tensor>& parameters() const { return params_; }
  InputShape output_shape() const { return shape_; }

  // [1,3,H,W] output in (0,1).
  Var forward(std::span<const Var> params) const;
  ImageTensor output() const;

  static constexpr int kSeedChannels = 32;
  static constexpr int kWidths[4] = {8, 16, 32, 64};

 private:
  InputShape shape_;
  Tensor z_;
  std::vector<Tensor> params_;
};

struct DipTrace {
  std::vector<double> p_real_series;  // index i holds iteration i+1
  std::vector<double> mse_series;
  ImageTensor checkpoint_image;
  int checkpoint_iteration = 0;
  double best_mse = 0.0;
  std::string classifier_id;
  DipConfig config;

  double p_real_at(int iteration) const;
};

// Fits a fresh generator to `target` by minimising pixel MSE with Adam,
// scoring every iterate with `classifier`.
DipTrace dip_optimize(const ImageTensor& target, const DetectorModel& classifier, const DipConfig& config);

// Centred moving average; the window shrinks at the ends.
std::vector<double> smooth_trace(std::span<const double> series, int window);

// REAL iff P(REAL) at the checkpoint > threshold_real; ties go to FAKE.
LabelClass dip_classify(const DipTrace& trace, double threshold_real);
LabelClass dip_classify_at(const DipTrace& trace, int iteration, double threshold_real);

struct CheckpointSweep {
  int chosen_iteration = 0;
  std::vector<int> iterations;
  std::vector<double> accuracy;
};

// Picks the iteration in the middle third of the run (every `stride` steps)
// with the highest accuracy on labelled validation traces; ties go to the
// earliest iteration.
CheckpointSweep sweep_checkpoint(std::span<const DipTrace> traces, std::span<const LabelClass> labels,
                                 double threshold_real, int stride = 100);

// <dir>/<stem>.trace.csv, <stem>.checkpoint.dfrt, <stem>.checkpoint.png, <stem>.json
void save_dip_trace(const DipTrace& trace, const std::filesystem::path& dir, const std::string& stem,
                    const std::string& target_path = "");
DipTrace load_dip_trace(const std::filesystem::path& dir, const std::string& stem);

}  // namespace dfr
