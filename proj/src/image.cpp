#include "image.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>

#include "errors.hpp"

namespace dfr {

const char* label_name(LabelClass c) { return c == LabelClass::kReal ? "REAL" : "FAKE"; }

LabelClass parse_label(const std::string& s) {
  if (s == "REAL" || s == "real" || s == "1") return LabelClass::kReal;
  if (s == "FAKE" || s == "fake" || s == "0") return LabelClass::kFake;
  fail(ErrorCode::kInvalidArgument, "unknown label '" + s + "'");
}

ImageTensor::ImageTensor(int height, int width, int channels, double fill)
    : height_(height), width_(width), channels_(channels),
      data_(static_cast<std::size_t>(height) * width * channels, fill) {
  if (height <= 0 || width <= 0 || channels <= 0) {
    fail(ErrorCode::kInputShape, "image dimensions must be positive");
  }
}

ImageTensor::ImageTensor(int height, int width, int channels, std::vector<double> data)
    : height_(height), width_(width), channels_(channels), data_(std::move(data)) {
  if (height <= 0 || width <= 0 || channels <= 0) {
    fail(ErrorCode::kInputShape, "image dimensions must be positive");
  }
  if (data_.size() != static_cast<std::size_t>(height) * width * channels) {
    fail(ErrorCode::kInputShape, "image data size does not match " + shape_string());
  }
}

std::string ImageTensor::shape_string() const {
  return std::to_string(height_) + "x" + std::to_string(width_) + "x" + std::to_string(channels_);
}

bool ImageTensor::valid() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v) && v >= 0.0 && v <= 1.0; });
}

void ImageTensor::validate() const {
  for (std::size_t i = 0; i < data_.size(); ++i) {
    const double v = data_[i];
    if (!std::isfinite(v)) fail(ErrorCode::kInputValue, "non-finite pixel at element " + std::to_string(i));
    if (v < 0.0 || v > 1.0) {
      fail(ErrorCode::kInputValue, "pixel outside [0,1] at element " + std::to_string(i));
    }
  }
}

Probabilities softmax(const Logits& z) {
  const double m = std::max(z[0], z[1]);
  const double e0 = std::exp(z[0] - m);
  const double e1 = std::exp(z[1] - m);
  const double s = e0 + e1;
  return Probabilities{{e0 / s, e1 / s}};
}

Tensor to_batch(std::span<const ImageTensor> images) {
  if (images.empty()) fail(ErrorCode::kEmpty, "empty image batch");
  const int h = images[0].height(), w = images[0].width(), c = images[0].channels();
  Tensor out(Shape{static_cast<int>(images.size()), c, h, w});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (std::size_t n = 0; n < images.size(); ++n) {
    const ImageTensor& im = images[n];
    if (!im.same_shape(images[0])) fail(ErrorCode::kInputShape, "mixed image shapes in batch");
    const auto src = im.values();
    double* dst = out.data() + n * plane * c;
    for (std::size_t p = 0; p < plane; ++p)
      for (int ch = 0; ch < c; ++ch) dst[static_cast<std::size_t>(ch) * plane + p] = src[p * c + ch];
  }
  return out;
}

Tensor to_batch(const ImageTensor& image) { return to_batch(std::span<const ImageTensor>(&image, 1)); }

ImageTensor from_batch(const Tensor& batch, int index) {
  if (batch.rank() != 4) fail(ErrorCode::kInputShape, "from_batch expects NCHW");
  const int c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  ImageTensor im(h, w, c);
  const double* src = batch.data() + static_cast<std::size_t>(index) * plane * c;
  auto dst = im.values();
  for (std::size_t p = 0; p < plane; ++p)
    for (int ch = 0; ch < c; ++ch) dst[p * c + ch] = src[static_cast<std::size_t>(ch) * plane + p];
  return im;
}

double l2_distance(const ImageTensor& a, const ImageTensor& b) {
  if (!a.same_shape(b)) fail(ErrorCode::kInputShape, "l2_distance shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.values()[i] - b.values()[i];
    s += d * d;
  }
  return std::sqrt(s);
}

double linf_distance(const ImageTensor& a, const ImageTensor& b) {
  if (!a.same_shape(b)) fail(ErrorCode::kInputShape, "linf_distance shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  return m;
}

// ---- PNG ----------------------------------------------------------------------

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

ImageTensor read_png(const std::filesystem::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    fail(ErrorCode::kIo, "cannot read image '" + path.string() + "': " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    fail(ErrorCode::kIo, "cannot decode image '" + path.string() + "': " + msg);
  }
  const int h = static_cast<int>(img.height), w = static_cast<int>(img.width);
  std::vector<double> data(buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) data[i] = buf[i] / 255.0;
  return ImageTensor(h, w, 3, std::move(data));
}

void write_png(const ImageTensor& image, const std::filesystem::path& path) {
  if (image.channels() != 3 && image.channels() != 1) {
    fail(ErrorCode::kInvalidArgument, "PNG export supports 1 or 3 channels");
  }
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width());
  img.height = static_cast<png_uint_32>(image.height());
  img.format = image.channels() == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<unsigned char> buf(image.size());
  for (std::size_t i = 0; i < buf.size(); ++i) {
    const double v = std::clamp(image.values()[i], 0.0, 1.0);
    buf[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr)) {
    fail(ErrorCode::kIo, "cannot write image '" + path.string() + "': " + img.message);
  }
}

// ---- float tensor container -------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'D', 'F', 'R', 'T'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put_le(std::ostream& os, T v) {
  static_assert(std::endian::native == std::endian::little, "big-endian hosts not supported");
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get_le(std::istream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) {
    fail(ErrorCode::kIo, "truncated tensor file '" + path.string() + "'");
  }
  return v;
}

}  // namespace

void write_tensor_file(const ImageTensor& image, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorCode::kIo, "cannot open '" + path.string() + "' for writing");
  os.write(kMagic, 4);
  put_le<std::uint32_t>(os, kVersion);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(image.height()));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(image.width()));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(image.channels()));
  for (double v : image.values()) put_le<float>(os, static_cast<float>(v));
  if (!os) fail(ErrorCode::kIo, "write failed for '" + path.string() + "'");
}

ImageTensor read_tensor_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::kIo, "cannot open '" + path.string() + "'");
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    fail(ErrorCode::kIo, "'" + path.string() + "' is not a tensor container");
  }
  const auto version = get_le<std::uint32_t>(is, path);
  if (version != kVersion) fail(ErrorCode::kIo, "unsupported tensor container version");
  const auto h = get_le<std::uint32_t>(is, path);
  const auto w = get_le<std::uint32_t>(is, path);
  const auto c = get_le<std::uint32_t>(is, path);
  if (h == 0 || w == 0 || c == 0 || h > 16384 || w > 16384 || c > 64) {
    fail(ErrorCode::kIo, "implausible tensor shape in '" + path.string() + "'");
  }
  std::vector<double> data(static_cast<std::size_t>(h) * w * c);
  for (auto& v : data) v = get_le<float>(is, path);
  return ImageTensor(static_cast<int>(h), static_cast<int>(w), static_cast<int>(c), std::move(data));
}

ImageTensor read_image(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".dfrt") return read_tensor_file(path);
  return read_png(path);
}

}  // namespace dfr
