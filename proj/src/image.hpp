#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace dfr {

// Class-index convention: FAKE = 0, REAL = 1.
enum class LabelClass : int { kFake = 0, kReal = 1 };

inline int class_index(LabelClass c) { return static_cast<int>(c); }
const char* label_name(LabelClass c);
LabelClass parse_label(const std::string& s);

// H x W x C intensities in [0,1], interleaved (HWC).
class ImageTensor {
 public:
  ImageTensor() = default;
  ImageTensor(int height, int width, int channels, double fill = 0.0);
  ImageTensor(int height, int width, int channels, std::vector<double> data);

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  std::size_t size() const { return data_.size(); }
  bool same_shape(const ImageTensor& o) const {
    return height_ == o.height_ && width_ == o.width_ && channels_ == o.channels_;
  }
  std::string shape_string() const;

  double& at(int y, int x, int c) { return data_[index(y, x, c)]; }
  double at(int y, int x, int c) const { return data_[index(y, x, c)]; }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  // Throws kInputValue if any element is non-finite or outside [0,1].
  void validate() const;
  bool valid() const;

 private:
  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }
  int height_ = 0, width_ = 0, channels_ = 0;
  std::vector<double> data_;
};

struct InputShape {
  int height = 64;
  int width = 64;
  int channels = 3;
  bool operator==(const InputShape&) const = default;
  std::size_t size() const { return static_cast<std::size_t>(height) * width * channels; }
};

inline InputShape shape_of(const ImageTensor& im) {
  return {im.height(), im.width(), im.channels()};
}

struct Logits {
  std::array<double, 2> values{};
  double operator[](int i) const { return values[static_cast<std::size_t>(i)]; }
};

struct Probabilities {
  std::array<double, 2> values{};
  double operator[](int i) const { return values[static_cast<std::size_t>(i)]; }
  double p_real() const { return values[1]; }
};

// Max-subtracted softmax; safe for large logits.
Probabilities softmax(const Logits& z);

// HWC images -> NCHW batch tensor and back.
Tensor to_batch(std::span<const ImageTensor> images);
Tensor to_batch(const ImageTensor& image);
ImageTensor from_batch(const Tensor& batch, int index);

double l2_distance(const ImageTensor& a, const ImageTensor& b);
double linf_distance(const ImageTensor& a, const ImageTensor& b);

// ---- file formats -----------------------------------------------------------

// 8-bit PNG, values decoded as byte/255. Grey and alpha channels are expanded or
// dropped to reach RGB.
ImageTensor read_png(const std::filesystem::path& path);
void write_png(const ImageTensor& image, const std::filesystem::path& path);

// Float tensor container: magic "DFRT", u32 version, u32 height, width,
// channels, then H*W*C little-endian float32 values in HWC order.
void write_tensor_file(const ImageTensor& image, const std::filesystem::path& path);
ImageTensor read_tensor_file(const std::filesystem::path& path);

// Dispatches on extension (.png or .dfrt).
ImageTensor read_image(const std::filesystem::path& path);

}  // namespace dfr
