#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dataset.hpp"
#include "detector.hpp"

namespace dfr {

enum class Optimizer { kAdam, kSgd };
const char* optimizer_name(Optimizer o);
Optimizer parse_optimizer(const std::string& s);

struct TrainConfig {
  int epochs = 5;
  int batch_size = 16;
  double learning_rate = 1e-3;
  Optimizer optimizer = Optimizer::kAdam;
  std::uint64_t seed = 0;
  void validate() const;
};

struct RegularizationConfig {
  double lambda = 0.0;
  int num_classes = 2;
  int input_dim = 0;  // 0: take H*W*C from the model
  void validate(const DetectorModel& model) const;
};

double cross_entropy_loss(const Logits& logits, LabelClass label);

// (1/(C*N)) * sum_i ||dZ_i/dx||^2 for one image.
double lipschitz_penalty(const DetectorModel& model, const ImageTensor& image);
// Batch mean of the per-image penalty as a differentiable graph over `params`.
Var lipschitz_penalty_graph(const DetectorModel& model, const Var& x, std::span<const Var> params);

double augmented_loss(double cross_entropy, double penalty, double lambda);

// Throws kCapability unless the autodiff substrate can differentiate a
// gradient (checked against finite differences on a tiny network).
void require_double_backprop();

// Per-parameter-tensor first-order optimiser state.
class ParameterOptimizer {
 public:
  ParameterOptimizer(Optimizer kind, double learning_rate, const std::vector<Tensor>& params);
  void step(std::vector<Tensor>& params, const std::vector<Var>& grads);

 private:
  Optimizer kind_;
  double lr_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  long long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct EpochStats {
  int epoch = 0;
  double loss = 0.0;
  double train_acc = 0.0;
};

struct TrainOutputs {
  std::optional<std::filesystem::path> checkpoint_dir;  // epoch_NNN.dfrw per epoch
  std::optional<std::filesystem::path> curve_path;      // CSV epoch,loss,train_acc
  bool verbose = false;
};

struct TrainResult {
  DetectorModel model;
  std::vector<EpochStats> curve;
};

// Trains on the TRAIN split of `manifest`.
TrainResult train_detector(Architecture arch, const DatasetManifest& manifest, const TrainConfig& config,
                           const RegularizationConfig& reg, const TrainOutputs& outputs = {});

// Continues training a copy of `model` on the augmented TRAIN split. The
// regularisation strength recorded in the model's provenance is kept.
TrainResult fine_tune_blur(const DetectorModel& model, const DatasetManifest& augmented_manifest, int epochs,
                           TrainConfig config, const TrainOutputs& outputs = {});

void write_training_curve(const std::vector<EpochStats>& curve, const std::filesystem::path& path);

}  // namespace dfr
