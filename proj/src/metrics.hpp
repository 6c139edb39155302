#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "attacks.hpp"
#include "image.hpp"

namespace dfr {

struct MetricsReport {
  double accuracy = 0.0;
  std::optional<double> auroc;                        // absent when one class is missing
  std::array<std::optional<double>, 2> precision;     // indexed by class; absent with no predicted members
  std::array<std::optional<double>, 2> recall;        // absent with no true members
  std::array<std::array<std::size_t, 2>, 2> confusion{};  // [true][predicted]
  std::size_t n_images = 0;
  double threshold = 0.5;
  std::string model_id;
  std::string dataset_id;
};

// Thresholded at `threshold` (REAL iff score > threshold).
MetricsReport compute_metrics(std::span<const double> p_real, std::span<const LabelClass> labels, double threshold);

// Mann-Whitney statistic: P(score_real > score_fake) + P(tie) / 2.
double auroc(std::span<const double> p_real, std::span<const LabelClass> labels);

// ---- category sampling ----------------------------------------------------------

struct SampledImage {
  ImageTensor image;
  LabelClass label = LabelClass::kFake;
  std::string ref;  // source path or "<set>#<index>"
};

struct Category {
  std::string name;
  std::vector<SampledImage> items;
};

struct CategorySample {
  std::vector<Category> categories;
  std::size_t total() const;
};

struct NamedAttackSet {
  std::string name;  // e.g. "FGSM blackbox"
  std::vector<AdversarialRecord> records;
};

struct SamplingPlan {
  std::size_t n_clean = 10;              // Fake-Correct and Real-Correct, unperturbed
  std::size_t n_wrong = 10;              // perturbed Fake-Wrong per attack set
  std::size_t n_perturbed_correct = 10;  // perturbed Fake-Correct per attack set
};

inline constexpr const char* kCleanFakeCategory = "Fake-Correct (unperturbed)";
inline constexpr const char* kCleanRealCategory = "Real-Correct (unperturbed)";
std::string wrong_category(const std::string& set_name);
std::string perturbed_correct_category(const std::string& set_name);

// Eligibility is checked against `classifier` at threshold 0.5. Perturbed
// categories only draw records whose original the classifier gets right.
CategorySample sample_categories(const DetectorModel& classifier, std::span<const ImageTensor> clean_images,
                                 std::span<const LabelClass> clean_labels, std::span<const std::string> clean_paths,
                                 std::span<const NamedAttackSet> adv_sets, const SamplingPlan& plan,
                                 std::uint64_t seed);

// ---- reports ---------------------------------------------------------------------

struct ModelRow {
  std::string label;
  MetricsReport metrics;
  bool regularized = false;
};

struct AttackRow {
  std::string label;
  bool regularized = false;
  double unperturbed = 0.0;
  std::vector<std::pair<std::string, std::optional<double>>> columns;  // e.g. {"FGSM blackbox", 0.3}
};

struct DipRow {
  std::string category;
  std::size_t n = 0;
  std::vector<double> accuracy;  // one per threshold
};

struct ReportInput {
  std::vector<ModelRow> clean;
  std::vector<AttackRow> attacks;
  std::vector<double> dip_thresholds{0.5, 0.25};
  std::vector<DipRow> dip;           // per category
  std::vector<DipRow> dip_overall;   // e.g. "Fake-Wrong (all)", "Clean (all)", "Overall"
};

enum class ReportFormat { kText, kCsv };

std::string emit_clean_table(const ReportInput& in, ReportFormat fmt);
std::string emit_attack_table(const ReportInput& in, ReportFormat fmt);
std::string emit_dip_table(const ReportInput& in, ReportFormat fmt);

// Writes clean_metrics, attack_accuracy and dip_defense tables as .txt and .csv
// for every table that has rows.
void write_reports(const ReportInput& in, const std::filesystem::path& dir);

// JSON form of the report rows, so tables can be re-emitted later.
void save_report_input(const ReportInput& in, const std::filesystem::path& path);
ReportInput load_report_input(const std::filesystem::path& path);

std::string format_optional(const std::optional<double>& v, int precision = 4);

}  // namespace dfr
