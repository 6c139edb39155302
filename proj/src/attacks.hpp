#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "detector.hpp"

namespace dfr {

enum class AttackId { kFgsm, kCwL2 };
const char* attack_name(AttackId a);
AttackId parse_attack(const std::string& s);

struct FgsmConfig {
  double epsilon = 0.02;
  void validate() const;
};

struct CwConfig {
  double kappa = 200.0;
  double c_min = 1e2;
  double c_max = 1e4;
  int search_steps = 5;
  int max_iterations = 1000;
  double learning_rate = 0.01;
  bool abort_early = true;
  void validate() const;
};

struct AdversarialRecord {
  ImageTensor original;
  ImageTensor perturbed;
  AttackId attack = AttackId::kFgsm;
  std::string source_model_id;
  bool success_on_source = false;
  double l2_norm = 0.0;
  double linf_norm = 0.0;
  std::optional<double> chosen_c;
  std::string original_path;
  std::string error;  // non-empty when the attack failed for this image

  // Quantises both images to float32 precision (the persisted form) and
  // recomputes the norms from the pair.
  void finalize();
};

// ---- FGSM ------------------------------------------------------------------------

AdversarialRecord fgsm_attack(const DetectorModel& model, const ImageTensor& image, LabelClass label,
                              const FgsmConfig& config);
std::vector<AdversarialRecord> fgsm_attack_batch(const DetectorModel& model, std::span<const ImageTensor> images,
                                                 std::span<const LabelClass> labels, const FgsmConfig& config);

// Per-image gradients of the cross-entropy at the given labels, batched.
std::vector<ImageTensor> loss_input_gradients(const DetectorModel& model, std::span<const ImageTensor> images,
                                              std::span<const LabelClass> labels);

// ---- CW-L2 -----------------------------------------------------------------------

// f = max(Z_y - max_{i != y} Z_i, -kappa).
double cw_margin_f(const Logits& logits, LabelClass true_class, double kappa);

// x = (tanh(omega) + 1) / 2, elementwise.
ImageTensor tanh_reparam(std::span<const double> omega, InputShape shape);
// Boundary pixels are pulled 1e-6 inside (0,1) before atanh.
std::vector<double> inverse_reparam(const ImageTensor& x);

struct CwCandidate {
  ImageTensor image;          // best iterate by total objective
  std::vector<double> trace;  // total objective per step
  bool finite = true;
  // Smallest-L2 iterate that met the margin, if any.
  std::optional<ImageTensor> best_success;
  double best_success_l2 = 0.0;
};

CwCandidate cw_inner_optimize(const DetectorModel& model, const ImageTensor& image, LabelClass label, double c,
                              const CwConfig& config);

AdversarialRecord cw_l2_attack(const DetectorModel& model, const ImageTensor& image, LabelClass label,
                               const CwConfig& config);
// Same search, with every image optimised in one batched graph.
std::vector<AdversarialRecord> cw_l2_attack_batch(const DetectorModel& model, std::span<const ImageTensor> images,
                                                  std::span<const LabelClass> labels, const CwConfig& config);

// Margin condition used by the c search: the wrong logit beats the true logit
// by at least kappa (strictly, when kappa is 0).
bool cw_margin_met(const Logits& logits, LabelClass true_class, double kappa);

// ---- attack sets -----------------------------------------------------------------

struct AttackSetStats {
  bool defined = false;
  std::size_t n = 0;  // records scored; failed records are excluded
  double clean_accuracy = 0.0;       // target_model on originals, fraction predicted FAKE
  double perturbed_accuracy = 0.0;   // target_model on perturbed images
  double source_success_rate = 0.0;
  std::size_t failures = 0;
};

struct AttackSet {
  std::vector<AdversarialRecord> records;
  std::vector<double> target_p_real;  // per record, perturbed image under the target; NaN for failures
  std::vector<double> clean_p_real;   // per record, original image under the target
  std::string target_model_id;
  AttackSetStats stats;
};

struct AttackSpec {
  AttackId attack = AttackId::kFgsm;
  FgsmConfig fgsm;
  CwConfig cw;
};

// Attacks FAKE images on `source` and evaluates the results on `target` at
// threshold 0.5. Whitebox when source and target are the same model.
AttackSet craft_attack_set(const DetectorModel& source, const DetectorModel& target,
                           std::span<const ImageTensor> fakes, std::span<const std::string> paths,
                           const AttackSpec& spec);

// Re-scores an existing set against another target.
AttackSet evaluate_attack_set(std::vector<AdversarialRecord> records, const DetectorModel& target);

// Layout: <dir>/index.csv plus NNNNN.orig.dfrt, NNNNN.adv.dfrt, NNNNN.adv.png,
// NNNNN.json per record.
void save_adversarial_set(const std::vector<AdversarialRecord>& records, const std::filesystem::path& dir);
std::vector<AdversarialRecord> load_adversarial_set(const std::filesystem::path& dir);

}  // namespace dfr
