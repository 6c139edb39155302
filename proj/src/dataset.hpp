#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "image.hpp"

namespace dfr {

namespace fs = std::filesystem;

// SplitMix64 step; derives independent per-task seeds from a base seed.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

enum class Split { kTrain, kTest };
const char* split_name(Split s);

struct DatasetRecord {
  fs::path path;
  LabelClass label = LabelClass::kReal;
  Split split = Split::kTrain;
  bool augmented = false;
  double sigma = 0.0;  // blur sigma when augmented
  bool operator==(const DatasetRecord&) const = default;
};

struct DatasetManifest {
  std::vector<DatasetRecord> records;
  std::uint64_t seed = 0;

  std::vector<const DatasetRecord*> select(Split split) const;
  std::vector<const DatasetRecord*> select(Split split, LabelClass label) const;
  // Stable content hash of the records, used as a dataset id.
  std::string content_id() const;
};

// CSV with header `path,label,split,augmented,sigma`; the seed is kept in a
// leading `# seed=N` comment line.
void write_manifest(const DatasetManifest& m, const fs::path& path);
DatasetManifest read_manifest(const fs::path& path);

// ---- procedural corpora ----------------------------------------------------------

// A synthetic portrait: shaded head ellipse, hair, eyes, mouth and film grain.
// `grain` is the standard deviation of the per-pixel sensor noise.
ImageTensor generate_real_image(InputShape shape, std::uint64_t seed, double grain = 0.03);
// Writes `count` portraits as `<dir>/real_NNNNN.png`.
void generate_real_corpus(const fs::path& dir, int count, InputShape shape, std::uint64_t seed,
                          double grain = 0.03);

enum class BlendMode { kAlpha, kColorMatched };
const char* blend_mode_name(BlendMode m);
BlendMode parse_blend_mode(const std::string& s);

struct SyntheticFakeConfig {
  double warp_strength = 1.5;   // peak displacement, pixels
  BlendMode blend_mode = BlendMode::kAlpha;
  double seam_softness = 3.0;   // feather width, pixels
  double region_radius = 0.24;  // blended disc radius as a fraction of min(H, W)
  double smoothing = 1.0;       // blur applied to the pasted region, pixels (0: none)
  std::uint64_t seed = 0;
  void validate() const;
};

// Blends a warped central disc of `target` into `source` behind a soft seam.
ImageTensor generate_synthetic_fake(const ImageTensor& source, const ImageTensor& target,
                                    const SyntheticFakeConfig& config, std::uint64_t seed);

// ---- blur and augmentation ---------------------------------------------------------

// Separable Gaussian, kernel truncated at 3 sigma and renormalised, reflection
// padding at the borders.
ImageTensor gaussian_blur(const ImageTensor& image, double sigma);

struct AugmentationConfig {
  double blur_fraction = 0.4;
  double sigma_min = 3.0;
  double sigma_max = 5.0;
  std::uint64_t seed = 0;
  void validate() const;
};

// Blurs round(blur_fraction * |TRAIN|) label-blind TRAIN records, writing the
// blurred images under `out_dir` and pointing those records at them.
DatasetManifest augment_training_set(const DatasetManifest& manifest, const AugmentationConfig& config,
                                     const fs::path& out_dir);

// ---- dataset assembly -------------------------------------------------------------

struct FakeSource {
  std::optional<fs::path> directory;
  std::optional<SyntheticFakeConfig> synthetic;
};

// Stratified per-class split. Synthetic fakes (one per real image) are written
// to `<work_dir>/fake/`.
DatasetManifest build_dataset(const fs::path& real_dir, const FakeSource& fakes, double split_ratio,
                              std::uint64_t seed, const fs::path& work_dir);

struct LoadedSplit {
  std::vector<ImageTensor> images;
  std::vector<LabelClass> labels;
  std::vector<fs::path> paths;
};

LoadedSplit load_split(const DatasetManifest& m, Split split);
LoadedSplit load_split(const DatasetManifest& m, Split split, LabelClass label);

}  // namespace dfr
