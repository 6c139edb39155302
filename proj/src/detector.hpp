#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "autograd.hpp"
#include "image.hpp"

namespace dfr {

enum class Architecture {
  kConvNetA,     // plain stacked 3x3 convolutions with max pooling (VGG-like)
  kConvNetB,     // small residual network with average-pool downsampling (ResNet-like)
  kLinearProbe,  // Z = Wx + b, used as an analytic oracle in tests
};

const char* architecture_name(Architecture a);
Architecture parse_architecture(const std::string& s);

// Training provenance stored alongside the weights.
struct Provenance {
  double lambda = 0.0;
  int epochs = 0;
  int batch_size = 0;
  double learning_rate = 0.0;
  std::string optimizer = "none";
  std::uint64_t seed = 0;
  bool augmented = false;
  int fine_tune_epochs = 0;
  std::string dataset_id;
};

class DetectorModel {
 public:
  DetectorModel() = default;

  // Randomly initialised (He-normal) parameters.
  static DetectorModel create(Architecture arch, InputShape shape, std::uint64_t seed);
  // Linear probe with per-class weight images (HWC) and biases.
  static DetectorModel linear_probe(const ImageTensor& w_fake, const ImageTensor& w_real,
                                    std::array<double, 2> bias = {0.0, 0.0});

  Architecture architecture() const { return arch_; }
  const InputShape& input_shape() const { return input_; }
  const std::vector<Tensor>& parameters() const { return params_; }
  std::size_t parameter_count() const;
  std::vector<double> flat_parameters() const;

  // Training-only mutation; inference code takes models by const reference.
  std::vector<Tensor>& mutable_parameters() { return params_; }
  void set_flat_parameters(std::span<const double> flat);

  // Graph forward pass. `x` is an NCHW batch and `params` mirrors parameters().
  Var forward(const Var& x, std::span<const Var> params) const;

  // Throws kInputShape if the image shape differs from the model's input.
  void check_input(const ImageTensor& image) const;

  std::string id;
  Provenance provenance;

 private:
  Architecture arch_ = Architecture::kConvNetA;
  InputShape input_;
  std::vector<Tensor> params_;
};

// Leaf Vars over the model's parameters.
std::vector<Var> parameter_vars(const DetectorModel& model, bool requires_grad);

Logits forward_logits(const DetectorModel& model, const ImageTensor& image);
Probabilities forward_probs(const DetectorModel& model, const ImageTensor& image);
std::vector<Logits> forward_logits_batch(const DetectorModel& model,
                                         std::span<const ImageTensor> images,
                                         std::size_t batch_size = 64);
std::vector<double> p_real_batch(const DetectorModel& model, std::span<const ImageTensor> images);

// Per-sample cross-entropy, [N,2] logits -> [N].
Var cross_entropy_rows(const Var& logits, std::span<const LabelClass> labels);

// Scalar functional of the logits, differentiated by input_gradient.
struct Functional {
  enum class Kind { kConstant, kLogit, kCrossEntropy, kPredictedClass };
  Kind kind = Kind::kConstant;
  int logit_index = 0;
  LabelClass label = LabelClass::kFake;

  static Functional constant() { return {}; }
  static Functional logit(int i) { return {Kind::kLogit, i, LabelClass::kFake}; }
  static Functional cross_entropy(LabelClass y) { return {Kind::kCrossEntropy, 0, y}; }
  // Argmax is piecewise constant; declared non-differentiable.
  static Functional predicted_class() { return {Kind::kPredictedClass, 0, LabelClass::kFake}; }
  bool differentiable() const { return kind != Kind::kPredictedClass; }
};

// Gradient of the functional with respect to the image, same HWC layout.
ImageTensor input_gradient(const DetectorModel& model, const ImageTensor& image,
                           const Functional& functional);

// REAL iff p_real > threshold_real; ties go to FAKE.
LabelClass classify_score(double p_real, double threshold_real);
LabelClass classify(const DetectorModel& model, const ImageTensor& image, double threshold_real);

// Weights go to `path` (binary); metadata to `path` + ".json".
void save_model(const DetectorModel& model, const std::filesystem::path& path);
DetectorModel load_model(const std::filesystem::path& path);

}  // namespace dfr
