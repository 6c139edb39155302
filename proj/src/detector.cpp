#include "detector.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <random>

#include "errors.hpp"

namespace dfr {

namespace {

using json = nlohmann::json;

struct ParamSpec {
  Shape shape;
  int fan_in;  // 0 -> zero init (biases)
};

std::vector<ParamSpec> param_specs(Architecture arch, const InputShape& in) {
  auto conv = [](int o, int c) { return ParamSpec{Shape{o, c, 3, 3}, c * 9}; };
  auto bias = [](int o) { return ParamSpec{Shape{o}, 0}; };
  switch (arch) {
    case Architecture::kConvNetA: {
      if (in.height % 16 || in.width % 16) {
        fail(ErrorCode::kInputShape, "CONVNET_A needs spatial dims divisible by 16");
      }
      const int flat = 64 * (in.height / 16) * (in.width / 16);
      return {conv(16, in.channels), bias(16), conv(32, 16),       bias(32),
              conv(64, 32),          bias(64), conv(64, 64),       bias(64),
              {Shape{flat, 64}, flat}, bias(64), {Shape{64, 2}, 64}, bias(2)};
    }
    case Architecture::kConvNetB: {
      if (in.height % 8 || in.width % 8) {
        fail(ErrorCode::kInputShape, "CONVNET_B needs spatial dims divisible by 8");
      }
      return {conv(16, in.channels), bias(16),                        // stem
              conv(16, 16), bias(16), conv(16, 16), bias(16),         // block 1
              conv(32, 16), bias(32),                                 // down
              conv(32, 32), bias(32), conv(32, 32), bias(32),         // block 2
              conv(64, 32), bias(64),                                 // down
              conv(64, 64), bias(64), conv(64, 64), bias(64),         // block 3
              {Shape{64 * (in.height / 8) * (in.width / 8), 2}, 64 * (in.height / 8) * (in.width / 8)}, bias(2)};
    }
    case Architecture::kLinearProbe:
      return {{Shape{static_cast<int>(in.size()), 2}, 0}, bias(2)};
  }
  fail(ErrorCode::kInvalidArgument, "unknown architecture");
}

Var conv_relu(const Var& x, const Var& w, const Var& b, int stride = 1) {
  return relu(bias_add(conv2d(x, w, {stride, 1}), b));
}

Var avgpool2(const Var& x) { return scale(sumpool2(x), 0.25); }

Var forward_convnet_a(const Var& x, std::span<const Var> p) {
  Var h = maxpool2(conv_relu(x, p[0], p[1]));
  h = maxpool2(conv_relu(h, p[2], p[3]));
  h = maxpool2(conv_relu(h, p[4], p[5]));
  h = maxpool2(conv_relu(h, p[6], p[7]));
  const int n = h.shape()[0];
  h = reshape(h, Shape{n, static_cast<int>(h.value().size()) / n});
  h = relu(bias_add(matmul(h, p[8]), p[9]));
  return bias_add(matmul(h, p[10]), p[11]);
}

Var residual_block(const Var& x, std::span<const Var> p) {
  Var h = conv_relu(x, p[0], p[1]);
  h = bias_add(conv2d(h, p[2], {1, 1}), p[3]);
  return relu(add(x, h));
}

Var forward_convnet_b(const Var& x, std::span<const Var> p) {
  Var h = avgpool2(conv_relu(x, p[0], p[1]));
  h = residual_block(h, p.subspan(2, 4));
  h = avgpool2(conv_relu(h, p[6], p[7]));
  h = residual_block(h, p.subspan(8, 4));
  h = avgpool2(conv_relu(h, p[12], p[13]));
  h = residual_block(h, p.subspan(14, 4));
  const int n = h.shape()[0];
  h = reshape(h, Shape{n, static_cast<int>(h.value().size()) / n});
  return bias_add(matmul(h, p[18]), p[19]);
}

Var forward_linear(const Var& x, std::span<const Var> p) {
  const int n = x.shape()[0];
  Var flat = reshape(x, Shape{n, static_cast<int>(x.value().size()) / n});
  return bias_add(matmul(flat, p[0]), p[1]);
}

}  // namespace

const char* architecture_name(Architecture a) {
  switch (a) {
    case Architecture::kConvNetA: return "CONVNET_A";
    case Architecture::kConvNetB: return "CONVNET_B";
    case Architecture::kLinearProbe: return "LINEAR_PROBE";
  }
  return "UNKNOWN";
}

Architecture parse_architecture(const std::string& s) {
  std::string u;
  for (char c : s) u.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  if (u == "CONVNET_A" || u == "A") return Architecture::kConvNetA;
  if (u == "CONVNET_B" || u == "B") return Architecture::kConvNetB;
  if (u == "LINEAR_PROBE") return Architecture::kLinearProbe;
  fail(ErrorCode::kInvalidArgument, "unknown architecture '" + s + "'");
}

DetectorModel DetectorModel::create(Architecture arch, InputShape shape, std::uint64_t seed) {
  DetectorModel m;
  m.arch_ = arch;
  m.input_ = shape;
  m.provenance.seed = seed;
  std::mt19937_64 rng(seed);
  for (const ParamSpec& spec : param_specs(arch, shape)) {
    Tensor t(spec.shape);
    if (spec.fan_in > 0) {
      std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / spec.fan_in));
      for (double& v : t.values()) v = normal(rng);
    }
    m.params_.push_back(std::move(t));
  }
  // Residual branches start as identity maps.
  if (arch == Architecture::kConvNetB) {
    for (std::size_t k : {4u, 10u, 16u})
      for (double& v : m.params_[k].values()) v = 0.0;
  }
  // Smaller output layer keeps initial logits near zero.
  for (double& v : m.params_[m.params_.size() - 2].values()) v *= 0.5;
  m.id = std::string(architecture_name(arch)) + "-s" + std::to_string(seed);
  return m;
}

DetectorModel DetectorModel::linear_probe(const ImageTensor& w_fake, const ImageTensor& w_real,
                                          std::array<double, 2> bias) {
  if (!w_fake.same_shape(w_real)) fail(ErrorCode::kInputShape, "probe weight shapes differ");
  DetectorModel m;
  m.arch_ = Architecture::kLinearProbe;
  m.input_ = shape_of(w_fake);
  const auto specs = param_specs(m.arch_, m.input_);
  Tensor w(specs[0].shape);
  // Rows follow the NCHW flattening used by forward().
  const Tensor w0 = to_batch(w_fake), w1 = to_batch(w_real);
  for (std::size_t i = 0; i < w0.size(); ++i) {
    w[i * 2 + 0] = w0[i];
    w[i * 2 + 1] = w1[i];
  }
  m.params_ = {std::move(w), Tensor(Shape{2}, std::vector<double>{bias[0], bias[1]})};
  m.id = "LINEAR_PROBE";
  return m;
}

std::size_t DetectorModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

std::vector<double> DetectorModel::flat_parameters() const {
  std::vector<double> flat;
  flat.reserve(parameter_count());
  for (const auto& p : params_) flat.insert(flat.end(), p.values().begin(), p.values().end());
  return flat;
}

void DetectorModel::set_flat_parameters(std::span<const double> flat) {
  if (flat.size() != parameter_count()) fail(ErrorCode::kInvalidArgument, "parameter count mismatch");
  std::size_t k = 0;
  for (auto& p : params_)
    for (double& v : p.values()) v = flat[k++];
}

Var DetectorModel::forward(const Var& x, std::span<const Var> params) const {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != input_.channels || s[2] != input_.height || s[3] != input_.width) {
    fail(ErrorCode::kInputShape, std::string(architecture_name(arch_)) + " expects NCHW input [N," +
                                     std::to_string(input_.channels) + "," + std::to_string(input_.height) +
                                     "," + std::to_string(input_.width) + "], got " + shape_str(s));
  }
  if (params.size() != params_.size()) fail(ErrorCode::kInvalidArgument, "parameter list mismatch");
  switch (arch_) {
    case Architecture::kConvNetA: return forward_convnet_a(add_scalar(x, -0.5), params);
    case Architecture::kConvNetB: return forward_convnet_b(add_scalar(x, -0.5), params);
    case Architecture::kLinearProbe: return forward_linear(x, params);
  }
  fail(ErrorCode::kInternal, "unreachable architecture");
}

void DetectorModel::check_input(const ImageTensor& image) const {
  if (shape_of(image) != input_) {
    fail(ErrorCode::kInputShape, "image shape " + image.shape_string() + " does not match model input " +
                                     std::to_string(input_.height) + "x" + std::to_string(input_.width) +
                                     "x" + std::to_string(input_.channels));
  }
}

std::vector<Var> parameter_vars(const DetectorModel& model, bool requires_grad) {
  std::vector<Var> vars;
  vars.reserve(model.parameters().size());
  for (const auto& p : model.parameters()) vars.emplace_back(p, requires_grad);
  return vars;
}

Logits forward_logits(const DetectorModel& model, const ImageTensor& image) {
  model.check_input(image);
  image.validate();
  NoGradGuard no_grad;
  const auto params = parameter_vars(model, false);
  const Var z = model.forward(constant(to_batch(image)), params);
  Logits out{{z.value()[0], z.value()[1]}};
  if (!std::isfinite(out[0]) || !std::isfinite(out[1])) {
    fail(ErrorCode::kInputValue, "forward pass produced non-finite logits");
  }
  return out;
}

Probabilities forward_probs(const DetectorModel& model, const ImageTensor& image) {
  return softmax(forward_logits(model, image));
}

std::vector<Logits> forward_logits_batch(const DetectorModel& model, std::span<const ImageTensor> images,
                                         std::size_t batch_size) {
  std::vector<Logits> out;
  out.reserve(images.size());
  NoGradGuard no_grad;
  const auto params = parameter_vars(model, false);
  for (std::size_t start = 0; start < images.size(); start += batch_size) {
    const auto chunk = images.subspan(start, std::min(batch_size, images.size() - start));
    for (const auto& im : chunk) {
      model.check_input(im);
      im.validate();
    }
    const Var z = model.forward(constant(to_batch(chunk)), params);
    for (std::size_t i = 0; i < chunk.size(); ++i) out.push_back(Logits{{z.value()[2 * i], z.value()[2 * i + 1]}});
  }
  return out;
}

std::vector<double> p_real_batch(const DetectorModel& model, std::span<const ImageTensor> images) {
  std::vector<double> out;
  out.reserve(images.size());
  for (const Logits& z : forward_logits_batch(model, images)) out.push_back(softmax(z).p_real());
  return out;
}

Var cross_entropy_rows(const Var& logits, std::span<const LabelClass> labels) {
  std::vector<int> cols;
  cols.reserve(labels.size());
  for (LabelClass l : labels) cols.push_back(class_index(l));
  return sub(logsumexp_rows(logits), pick(logits, std::move(cols)));
}

ImageTensor input_gradient(const DetectorModel& model, const ImageTensor& image, const Functional& functional) {
  if (!functional.differentiable()) {
    fail(ErrorCode::kUnsupported, "functional is not differentiable (predicted class)");
  }
  model.check_input(image);
  image.validate();
  if (functional.kind == Functional::Kind::kConstant) {
    return ImageTensor(image.height(), image.width(), image.channels(), 0.0);
  }
  const auto params = parameter_vars(model, false);
  const Var x(to_batch(image), true);
  const Var z = model.forward(x, params);
  Var objective;
  if (functional.kind == Functional::Kind::kLogit) {
    if (functional.logit_index < 0 || functional.logit_index > 1) {
      fail(ErrorCode::kInvalidArgument, "logit index must be 0 or 1");
    }
    objective = sum(pick(z, {functional.logit_index}));
  } else {
    const LabelClass y[1] = {functional.label};
    objective = sum(cross_entropy_rows(z, y));
  }
  const Var inputs[1] = {x};
  const auto g = grad(objective, inputs);
  return from_batch(g[0].value(), 0);
}

LabelClass classify_score(double p_real, double threshold_real) {
  if (!(threshold_real >= 0.0 && threshold_real <= 1.0)) {
    fail(ErrorCode::kInvalidArgument, "threshold must lie in [0,1]");
  }
  return p_real > threshold_real ? LabelClass::kReal : LabelClass::kFake;
}

LabelClass classify(const DetectorModel& model, const ImageTensor& image, double threshold_real) {
  if (!(threshold_real >= 0.0 && threshold_real <= 1.0)) {
    fail(ErrorCode::kInvalidArgument, "threshold must lie in [0,1]");
  }
  return classify_score(forward_probs(model, image).p_real(), threshold_real);
}

// ---- persistence -------------------------------------------------------------------

namespace {
constexpr char kWeightMagic[4] = {'D', 'F', 'R', 'W'};
constexpr std::uint32_t kWeightVersion = 1;
}  // namespace

void save_model(const DetectorModel& model, const std::filesystem::path& path) {
  {
    std::ofstream os(path, std::ios::binary);
    if (!os) fail(ErrorCode::kIo, "cannot write model '" + path.string() + "'");
    os.write(kWeightMagic, 4);
    auto put_u32 = [&os](std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); };
    put_u32(kWeightVersion);
    put_u32(static_cast<std::uint32_t>(model.parameters().size()));
    for (const Tensor& t : model.parameters()) {
      put_u32(static_cast<std::uint32_t>(t.rank()));
      for (int d : t.shape()) put_u32(static_cast<std::uint32_t>(d));
      os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!os) fail(ErrorCode::kIo, "write failed for '" + path.string() + "'");
  }
  const Provenance& p = model.provenance;
  json meta = {
      {"model_id", model.id},
      {"architecture_id", architecture_name(model.architecture())},
      {"input_shape", {{"height", model.input_shape().height},
                       {"width", model.input_shape().width},
                       {"channels", model.input_shape().channels}}},
      {"class_index", {{"FAKE", 0}, {"REAL", 1}}},
      {"parameter_count", model.parameter_count()},
      {"seed", p.seed},
      {"training_config", {{"lambda", p.lambda},
                           {"epochs", p.epochs},
                           {"batch_size", p.batch_size},
                           {"learning_rate", p.learning_rate},
                           {"optimizer", p.optimizer},
                           {"augmented", p.augmented},
                           {"fine_tune_epochs", p.fine_tune_epochs},
                           {"dataset_id", p.dataset_id}}},
  };
  std::ofstream js(path.string() + ".json");
  if (!js) fail(ErrorCode::kIo, "cannot write model metadata for '" + path.string() + "'");
  js << meta.dump(2) << '\n';
}

DetectorModel load_model(const std::filesystem::path& path) {
  const std::filesystem::path meta_path = path.string() + ".json";
  std::ifstream js(meta_path);
  if (!js) fail(ErrorCode::kIo, "missing model metadata '" + meta_path.string() + "'");
  json meta;
  try {
    js >> meta;
  } catch (const json::exception& e) {
    fail(ErrorCode::kIo, "bad model metadata '" + meta_path.string() + "': " + e.what());
  }
  const Architecture arch = parse_architecture(meta.at("architecture_id").get<std::string>());
  InputShape shape{meta["input_shape"]["height"].get<int>(), meta["input_shape"]["width"].get<int>(),
                   meta["input_shape"]["channels"].get<int>()};
  DetectorModel m = arch == Architecture::kLinearProbe
                        ? DetectorModel::linear_probe(ImageTensor(shape.height, shape.width, shape.channels),
                                                      ImageTensor(shape.height, shape.width, shape.channels))
                        : DetectorModel::create(arch, shape, 0);
  m.id = meta.value("model_id", std::string(architecture_name(arch)));
  const auto& tc = meta["training_config"];
  m.provenance.seed = meta.value("seed", std::uint64_t{0});
  m.provenance.lambda = tc.value("lambda", 0.0);
  m.provenance.epochs = tc.value("epochs", 0);
  m.provenance.batch_size = tc.value("batch_size", 0);
  m.provenance.learning_rate = tc.value("learning_rate", 0.0);
  m.provenance.optimizer = tc.value("optimizer", std::string("none"));
  m.provenance.augmented = tc.value("augmented", false);
  m.provenance.fine_tune_epochs = tc.value("fine_tune_epochs", 0);
  m.provenance.dataset_id = tc.value("dataset_id", std::string());

  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::kIo, "cannot open model '" + path.string() + "'");
  char magic[4];
  auto get_u32 = [&is, &path]() {
    std::uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4)) fail(ErrorCode::kIo, "truncated model '" + path.string() + "'");
    return v;
  };
  if (!is.read(magic, 4) || std::memcmp(magic, kWeightMagic, 4) != 0) {
    fail(ErrorCode::kIo, "'" + path.string() + "' is not a model weight file");
  }
  if (get_u32() != kWeightVersion) fail(ErrorCode::kIo, "unsupported weight file version");
  const std::uint32_t count = get_u32();
  auto& params = m.mutable_parameters();
  if (count != params.size()) fail(ErrorCode::kIo, "parameter tensor count does not match architecture");
  for (Tensor& t : params) {
    const std::uint32_t rank = get_u32();
    Shape s;
    for (std::uint32_t i = 0; i < rank; ++i) s.push_back(static_cast<int>(get_u32()));
    if (s != t.shape()) fail(ErrorCode::kIo, "parameter shape mismatch in '" + path.string() + "'");
    if (!is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)))) {
      fail(ErrorCode::kIo, "truncated model '" + path.string() + "'");
    }
  }
  return m;
}

}  // namespace dfr
