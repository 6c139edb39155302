#include "dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "errors.hpp"
#include "csv.hpp"
#include "hashing.hpp"

namespace dfr {

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

const char* split_name(Split s) { return s == Split::kTrain ? "TRAIN" : "TEST"; }

namespace {

Split parse_split(const std::string& s) {
  if (s == "TRAIN" || s == "train") return Split::kTrain;
  if (s == "TEST" || s == "test") return Split::kTest;
  fail(ErrorCode::kIo, "unknown split '" + s + "' in manifest");
}

using Rgb = std::array<double, 3>;

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }
double smoothstep(double e0, double e1, double x) {
  if (e1 <= e0) return x < e0 ? 0.0 : 1.0;
  const double t = clamp01((x - e0) / (e1 - e0));
  return t * t * (3.0 - 2.0 * t);
}
Rgb lerp(const Rgb& a, const Rgb& b, double t) {
  return {a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t};
}

// Anti-aliased coverage of an axis-aligned ellipse at pixel centre (x, y).
double ellipse_cover(double x, double y, double cx, double cy, double rx, double ry) {
  const double nx = (x - cx) / rx, ny = (y - cy) / ry;
  const double d = (std::sqrt(nx * nx + ny * ny) - 1.0) * std::min(rx, ry);
  return clamp01(0.5 - d);
}

std::vector<fs::path> list_pngs(const fs::path& dir) {
  if (!fs::is_directory(dir)) fail(ErrorCode::kIo, "image directory '" + dir.string() + "' does not exist");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png") out.push_back(fs::absolute(e.path()).lexically_normal());
  }
  std::sort(out.begin(), out.end());
  return out;
}

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - i - 1;
  }
  return i;
}

double bilinear(const ImageTensor& im, double x, double y, int c) {
  const int w = im.width(), h = im.height();
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
  const double fx = x - x0, fy = y - y0;
  const double top = im.at(y0, x0, c) * (1 - fx) + im.at(y0, x1, c) * fx;
  const double bot = im.at(y1, x0, c) * (1 - fx) + im.at(y1, x1, c) * fx;
  return top * (1 - fy) + bot * fy;
}

}  // namespace

// ---- manifest ------------------------------------------------------------------

std::vector<const DatasetRecord*> DatasetManifest::select(Split split) const {
  std::vector<const DatasetRecord*> out;
  for (const auto& r : records)
    if (r.split == split) out.push_back(&r);
  return out;
}

std::vector<const DatasetRecord*> DatasetManifest::select(Split split, LabelClass label) const {
  std::vector<const DatasetRecord*> out;
  for (const auto& r : records)
    if (r.split == split && r.label == label) out.push_back(&r);
  return out;
}

std::string DatasetManifest::content_id() const {
  std::ostringstream os;
  os << "seed=" << seed << '\n';
  for (const auto& r : records) {
    os << r.path.string() << ',' << label_name(r.label) << ',' << split_name(r.split) << ',' << r.augmented
       << ',' << r.sigma << '\n';
  }
  return sha256_hex(os.str()).substr(0, 16);
}

void write_manifest(const DatasetManifest& m, const fs::path& path) {
  std::ofstream os(path);
  if (!os) fail(ErrorCode::kIo, "cannot write manifest '" + path.string() + "'");
  os << "# seed=" << m.seed << '\n';
  os << "path,label,split,augmented,sigma\n";
  os.precision(17);
  for (const auto& r : m.records) {
    os << csv_field(r.path.string()) << ',' << label_name(r.label) << ',' << split_name(r.split) << ','
       << (r.augmented ? 1 : 0) << ',' << r.sigma << '\n';
  }
  if (!os) fail(ErrorCode::kIo, "write failed for manifest '" + path.string() + "'");
}

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorCode::kIo, "cannot read manifest '" + path.string() + "'");
  DatasetManifest m;
  std::string line;
  bool header_seen = false;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line.rfind("# seed=", 0) == 0) {
      m.seed = std::stoull(line.substr(7));
      continue;
    }
    if (line[0] == '#') continue;
    if (!header_seen) {
      if (line != "path,label,split,augmented,sigma") {
        fail(ErrorCode::kIo, "manifest '" + path.string() + "' has unexpected header");
      }
      header_seen = true;
      continue;
    }
    const auto f = csv_split(line);
    if (f.size() != 5) {
      fail(ErrorCode::kIo, "manifest '" + path.string() + "' line " + std::to_string(lineno) + ": expected 5 fields");
    }
    DatasetRecord r;
    r.path = f[0];
    r.label = parse_label(f[1]);
    r.split = parse_split(f[2]);
    r.augmented = f[3] == "1" || f[3] == "true";
    r.sigma = f[4].empty() ? 0.0 : std::stod(f[4]);
    m.records.push_back(std::move(r));
  }
  if (!header_seen) fail(ErrorCode::kIo, "manifest '" + path.string() + "' is empty");
  return m;
}

// ---- procedural portraits -----------------------------------------------------------

ImageTensor generate_real_image(InputShape shape, std::uint64_t seed, double grain_sigma) {
  if (shape.channels != 3) fail(ErrorCode::kInvalidArgument, "procedural portraits are RGB");
  std::mt19937_64 rng(seed);
  auto U = [&rng](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
  const double W = shape.width, H = shape.height;

  const Rgb bg0{U(0.05, 0.95), U(0.05, 0.95), U(0.05, 0.95)};
  const Rgb bg1{U(0.05, 0.95), U(0.05, 0.95), U(0.05, 0.95)};
  const double bg_angle = U(0, 2 * std::numbers::pi);

  const double cx = W * (0.5 + U(-0.04, 0.04)), cy = H * (0.53 + U(-0.03, 0.03));
  const double rx = W * U(0.27, 0.32), ry = H * U(0.34, 0.39);

  const Rgb light_skin{0.96, 0.80, 0.69}, dark_skin{0.42, 0.28, 0.20};
  Rgb skin = lerp(light_skin, dark_skin, U(0, 1));
  for (double& v : skin) v = clamp01(v + U(-0.03, 0.03));
  const double light_angle = U(0, 2 * std::numbers::pi), light_k = U(0.08, 0.22);
  const double lx = std::cos(light_angle), ly = std::sin(light_angle);

  static const std::array<Rgb, 5> hair_palette{{{0.08, 0.06, 0.05}, {0.30, 0.18, 0.10},
                                                {0.75, 0.62, 0.35}, {0.55, 0.25, 0.12},
                                                {0.45, 0.45, 0.45}}};
  Rgb hair = hair_palette[static_cast<std::size_t>(U(0, 4.999))];
  for (double& v : hair) v = clamp01(v + U(-0.04, 0.04));
  const double hairline = cy - ry * U(0.38, 0.58);
  const double hair_freq = U(0.15, 0.45), hair_phase = U(0, 6.28), hair_amp = U(0.5, 2.0);

  const double eye_dx = rx * U(0.34, 0.42), eye_y = cy - ry * U(0.12, 0.2);
  const double eye_rx = rx * 0.17, eye_ry = ry * 0.085;
  static const std::array<Rgb, 3> iris_palette{{{0.25, 0.15, 0.08}, {0.20, 0.40, 0.65}, {0.25, 0.45, 0.25}}};
  const Rgb iris = iris_palette[static_cast<std::size_t>(U(0, 2.999))];
  const double mouth_y = cy + ry * U(0.4, 0.5), mouth_rx = rx * U(0.26, 0.36), mouth_ry = ry * U(0.05, 0.08);
  const Rgb lip{clamp01(skin[0] * 0.95), clamp01(skin[1] * 0.55), clamp01(skin[2] * 0.55)};
  const double nose_len = ry * U(0.15, 0.25);

  std::normal_distribution<double> noise(0.0, 1.0);
  ImageTensor im(shape.height, shape.width, 3);
  for (int yi = 0; yi < shape.height; ++yi) {
    for (int xi = 0; xi < shape.width; ++xi) {
      const double x = xi + 0.5, y = yi + 0.5;
      const double s = ((x - W / 2) * std::cos(bg_angle) + (y - H / 2) * std::sin(bg_angle)) / W + 0.5;
      Rgb col = lerp(bg0, bg1, clamp01(s));

      const double wave = hairline + hair_amp * std::sin(x * hair_freq + hair_phase);
      const double above = clamp01(wave - y + 0.5);  // 1 above the hairline
      const double hair_back = ellipse_cover(x, y, cx, cy - 0.06 * ry, rx * 1.1, ry * 1.06) * above;
      col = lerp(col, hair, hair_back);

      const double head = ellipse_cover(x, y, cx, cy, rx, ry);
      if (head > 0.0) {
        const double nx = (x - cx) / rx, ny = (y - cy) / ry;
        const double r2 = nx * nx + ny * ny;
        const double shade = 1.0 + light_k * (nx * lx + ny * ly) - 0.18 * r2 * r2;
        Rgb face{skin[0] * shade, skin[1] * shade, skin[2] * shade};
        face = lerp(face, hair, above);
        for (int side : {-1, 1}) {
          const double ex = cx + side * eye_dx;
          const double brow = ellipse_cover(x, y, ex, eye_y - eye_ry * 2.4, eye_rx * 1.2, eye_ry * 0.45);
          face = lerp(face, hair, brow * 0.85);
          const double sclera = ellipse_cover(x, y, ex, eye_y, eye_rx, eye_ry);
          face = lerp(face, Rgb{0.93, 0.93, 0.9}, sclera);
          const double ir = ellipse_cover(x, y, ex, eye_y, eye_ry * 0.95, eye_ry * 0.95) * sclera;
          face = lerp(face, iris, ir);
          const double pupil = ellipse_cover(x, y, ex, eye_y, eye_ry * 0.45, eye_ry * 0.45) * sclera;
          face = lerp(face, Rgb{0.03, 0.03, 0.03}, pupil);
        }
        const double nose = ellipse_cover(x, y, cx + 0.6, eye_y + nose_len, rx * 0.05, nose_len * 0.9);
        face = lerp(face, Rgb{face[0] * 0.85, face[1] * 0.85, face[2] * 0.85}, nose * 0.6);
        const double mouth = ellipse_cover(x, y, cx, mouth_y, mouth_rx, mouth_ry);
        face = lerp(face, lip, mouth);
        col = lerp(col, face, head);
      }
      // Mostly luminance grain with a smaller chroma component.
      const double lum = 0.8 * noise(rng);
      for (int c = 0; c < 3; ++c) {
        im.at(yi, xi, c) = clamp01(col[static_cast<std::size_t>(c)] + grain_sigma * (lum + 0.6 * noise(rng)));
      }
    }
  }
  return im;
}

void generate_real_corpus(const fs::path& dir, int count, InputShape shape, std::uint64_t seed, double grain) {
  if (count <= 0) fail(ErrorCode::kInvalidArgument, "corpus size must be positive");
  fs::create_directories(dir);
  for (int i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "real_%05d.png", i);
    write_png(generate_real_image(shape, derive_seed(seed, static_cast<std::uint64_t>(i)), grain), dir / name);
  }
}

// ---- synthetic fakes ------------------------------------------------------------------

const char* blend_mode_name(BlendMode m) { return m == BlendMode::kAlpha ? "alpha" : "color_matched"; }

BlendMode parse_blend_mode(const std::string& s) {
  if (s == "alpha") return BlendMode::kAlpha;
  if (s == "color_matched") return BlendMode::kColorMatched;
  fail(ErrorCode::kConfig, "unknown blend mode '" + s + "'");
}

void SyntheticFakeConfig::validate() const {
  if (!(warp_strength >= 0.0 && warp_strength <= 8.0)) fail(ErrorCode::kConfig, "warp_strength must lie in [0,8]");
  if (!(seam_softness >= 0.0 && seam_softness <= 16.0)) fail(ErrorCode::kConfig, "seam_softness must lie in [0,16]");
  if (!(region_radius > 0.0 && region_radius <= 0.5)) fail(ErrorCode::kConfig, "region_radius must lie in (0,0.5]");
  if (!(smoothing >= 0.0 && smoothing <= 8.0)) fail(ErrorCode::kConfig, "smoothing must lie in [0,8]");
}

ImageTensor generate_synthetic_fake(const ImageTensor& source, const ImageTensor& target,
                                    const SyntheticFakeConfig& config, std::uint64_t seed) {
  config.validate();
  if (!source.same_shape(target)) {
    fail(ErrorCode::kInputShape, "source " + source.shape_string() + " and target " + target.shape_string() +
                                     " differ in shape");
  }
  std::mt19937_64 rng(seed);
  auto U = [&rng](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
  const int h = source.height(), w = source.width(), nc = source.channels();
  const double cx = 0.5 * w, cy = 0.53 * h;
  const double radius = config.region_radius * std::min(h, w);
  std::array<double, 4> fx{U(0.5, 1.5), U(0.5, 1.5), U(0.5, 1.5), U(0.5, 1.5)};
  std::array<double, 2> ph{U(0, 6.283), U(0, 6.283)};
  const double a = config.warp_strength;

  ImageTensor warped(h, w, nc);
  std::vector<double> mask(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double u = (x + 0.5) / w, v = (y + 0.5) / h;
      const double dx = a * std::sin(2 * std::numbers::pi * (fx[0] * u + fx[1] * v) + ph[0]);
      const double dy = a * std::sin(2 * std::numbers::pi * (fx[2] * u + fx[3] * v) + ph[1]);
      for (int c = 0; c < nc; ++c) warped.at(y, x, c) = bilinear(target, x + dx, y + dy, c);
      const double d = std::hypot(x + 0.5 - cx, y + 0.5 - cy);
      mask[static_cast<std::size_t>(y) * w + x] =
          config.seam_softness > 0 ? 1.0 - smoothstep(radius - config.seam_softness, radius, d) : (d < radius ? 1.0 : 0.0);
    }
  }

  if (config.smoothing > 0.0) warped = gaussian_blur(warped, config.smoothing);

  if (config.blend_mode == BlendMode::kColorMatched) {
    std::vector<double> mean_s(static_cast<std::size_t>(nc)), mean_t(static_cast<std::size_t>(nc));
    double wsum = 0.0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double m = mask[static_cast<std::size_t>(y) * w + x];
        wsum += m;
        for (int c = 0; c < nc; ++c) {
          mean_s[static_cast<std::size_t>(c)] += m * source.at(y, x, c);
          mean_t[static_cast<std::size_t>(c)] += m * warped.at(y, x, c);
        }
      }
    if (wsum > 0)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          for (int c = 0; c < nc; ++c)
            warped.at(y, x, c) = clamp01(warped.at(y, x, c) +
                                         (mean_s[static_cast<std::size_t>(c)] - mean_t[static_cast<std::size_t>(c)]) / wsum);
  }

  ImageTensor out(h, w, nc);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double m = mask[static_cast<std::size_t>(y) * w + x];
      for (int c = 0; c < nc; ++c) {
        out.at(y, x, c) = clamp01(m * warped.at(y, x, c) + (1.0 - m) * source.at(y, x, c));
      }
    }
  return out;
}

// ---- blur ------------------------------------------------------------------------------

ImageTensor gaussian_blur(const ImageTensor& image, double sigma) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) fail(ErrorCode::kInvalidArgument, "blur sigma must be positive");
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double ksum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    ksum += k[static_cast<std::size_t>(i + radius)];
  }
  for (double& v : k) v /= ksum;

  const int h = image.height(), w = image.width(), nc = image.channels();
  ImageTensor tmp(h, w, nc), out(h, w, nc);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < nc; ++c) {
        double s = 0.0;
        for (int i = -radius; i <= radius; ++i) s += k[static_cast<std::size_t>(i + radius)] * image.at(y, reflect_index(x + i, w), c);
        tmp.at(y, x, c) = s;
      }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < nc; ++c) {
        double s = 0.0;
        for (int i = -radius; i <= radius; ++i) s += k[static_cast<std::size_t>(i + radius)] * tmp.at(reflect_index(y + i, h), x, c);
        out.at(y, x, c) = clamp01(s);
      }
  return out;
}

void AugmentationConfig::validate() const {
  if (!(blur_fraction >= 0.0 && blur_fraction <= 1.0)) fail(ErrorCode::kConfig, "blur_fraction must lie in [0,1]");
  if (!(sigma_min > 0.0 && sigma_max > sigma_min)) {
    fail(ErrorCode::kConfig, "sigma range must be positive and non-degenerate");
  }
}

DatasetManifest augment_training_set(const DatasetManifest& manifest, const AugmentationConfig& config,
                                     const fs::path& out_dir) {
  config.validate();
  std::vector<std::size_t> train;
  for (std::size_t i = 0; i < manifest.records.size(); ++i)
    if (manifest.records[i].split == Split::kTrain) train.push_back(i);
  if (train.empty()) fail(ErrorCode::kEmpty, "manifest has no TRAIN records to augment");
  DatasetManifest out = manifest;
  const auto n_blur = static_cast<std::size_t>(std::llround(config.blur_fraction * static_cast<double>(train.size())));
  if (n_blur == 0) return out;

  std::mt19937_64 rng(config.seed);
  std::shuffle(train.begin(), train.end(), rng);
  train.resize(n_blur);
  std::sort(train.begin(), train.end());
  fs::create_directories(out_dir);
  for (std::size_t idx : train) {
    DatasetRecord& r = out.records[idx];
    std::mt19937_64 task_rng(derive_seed(config.seed, idx));
    const double sigma = std::uniform_real_distribution<double>(config.sigma_min, config.sigma_max)(task_rng);
    const ImageTensor blurred = gaussian_blur(read_image(r.path), sigma);
    char name[32];
    std::snprintf(name, sizeof name, "blur_%06zu.png", idx);
    const fs::path dst = fs::absolute(out_dir / name).lexically_normal();
    write_png(blurred, dst);
    r.path = dst;
    r.augmented = true;
    r.sigma = sigma;
  }
  return out;
}

// ---- assembly --------------------------------------------------------------------------

DatasetManifest build_dataset(const fs::path& real_dir, const FakeSource& fakes, double split_ratio,
                              std::uint64_t seed, const fs::path& work_dir) {
  if (!(split_ratio > 0.0 && split_ratio < 1.0)) fail(ErrorCode::kConfig, "split_ratio must lie in (0,1)");
  if (fakes.directory.has_value() == fakes.synthetic.has_value()) {
    fail(ErrorCode::kConfig, "exactly one fake source (directory or synthetic config) is required");
  }
  const auto real_paths = list_pngs(real_dir);
  if (real_paths.empty()) fail(ErrorCode::kEmpty, "no real images in '" + real_dir.string() + "'");
  std::vector<ImageTensor> reals;
  reals.reserve(real_paths.size());
  for (const auto& p : real_paths) {
    try {
      reals.push_back(read_png(p));
    } catch (const Error& e) {
      fail(ErrorCode::kIo, "ingestion failed for '" + p.string() + "': " + e.what());
    }
  }

  std::vector<fs::path> fake_paths;
  if (fakes.directory) {
    fake_paths = list_pngs(*fakes.directory);
    if (fake_paths.empty()) fail(ErrorCode::kEmpty, "no fake images in '" + fakes.directory->string() + "'");
    for (const auto& p : fake_paths) {
      try {
        (void)read_png(p);
      } catch (const Error& e) {
        fail(ErrorCode::kIo, "ingestion failed for '" + p.string() + "': " + e.what());
      }
    }
  } else {
    if (reals.size() < 2) fail(ErrorCode::kEmpty, "synthetic fakes need at least two real images");
    const fs::path fake_dir = work_dir / "fake";
    fs::create_directories(fake_dir);
    std::mt19937_64 rng(derive_seed(seed, 0xfa4e));
    for (std::size_t i = 0; i < reals.size(); ++i) {
      std::size_t j = std::uniform_int_distribution<std::size_t>(0, reals.size() - 2)(rng);
      if (j >= i) ++j;
      const ImageTensor fake = generate_synthetic_fake(reals[i], reals[j], *fakes.synthetic,
                                                       derive_seed(fakes.synthetic->seed, i));
      char name[32];
      std::snprintf(name, sizeof name, "fake_%05zu.png", i);
      const fs::path dst = fs::absolute(fake_dir / name).lexically_normal();
      write_png(fake, dst);
      fake_paths.push_back(dst);
    }
  }
  if (real_paths.size() < 2 || fake_paths.size() < 2) {
    fail(ErrorCode::kEmpty, "need at least two images per class");
  }

  DatasetManifest m;
  m.seed = seed;
  auto add_class = [&](const std::vector<fs::path>& paths, LabelClass label) {
    std::vector<std::size_t> order(paths.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(class_index(label))));
    std::shuffle(order.begin(), order.end(), rng);
    const auto n = static_cast<long long>(paths.size());
    const long long n_train = std::clamp<long long>(std::llround(split_ratio * static_cast<double>(n)), 1, n - 1);
    std::vector<bool> is_train(paths.size(), false);
    for (long long k = 0; k < n_train; ++k) is_train[order[static_cast<std::size_t>(k)]] = true;
    for (std::size_t i = 0; i < paths.size(); ++i) {
      m.records.push_back({paths[i], label, is_train[i] ? Split::kTrain : Split::kTest, false, 0.0});
    }
  };
  add_class(real_paths, LabelClass::kReal);
  add_class(fake_paths, LabelClass::kFake);
  return m;
}

LoadedSplit load_split(const DatasetManifest& m, Split split) {
  LoadedSplit out;
  for (const DatasetRecord* r : m.select(split)) {
    out.images.push_back(read_image(r->path));
    out.labels.push_back(r->label);
    out.paths.push_back(r->path);
  }
  return out;
}

LoadedSplit load_split(const DatasetManifest& m, Split split, LabelClass label) {
  LoadedSplit out;
  for (const DatasetRecord* r : m.select(split, label)) {
    out.images.push_back(read_image(r->path));
    out.labels.push_back(r->label);
    out.paths.push_back(r->path);
  }
  return out;
}

}  // namespace dfr
