#include "training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <numeric>
#include <random>

#include "errors.hpp"
#include "hashing.hpp"

namespace dfr {

const char* optimizer_name(Optimizer o) { return o == Optimizer::kAdam ? "adam" : "sgd"; }

Optimizer parse_optimizer(const std::string& s) {
  if (s == "adam") return Optimizer::kAdam;
  if (s == "sgd") return Optimizer::kSgd;
  fail(ErrorCode::kConfig, "unknown optimizer '" + s + "' (expected adam or sgd)");
}

void TrainConfig::validate() const {
  if (epochs < 1) fail(ErrorCode::kConfig, "epochs must be >= 1");
  if (batch_size < 1) fail(ErrorCode::kConfig, "batch_size must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) fail(ErrorCode::kConfig, "learning_rate must be > 0");
}

void RegularizationConfig::validate(const DetectorModel& model) const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) fail(ErrorCode::kConfig, "lambda must be >= 0");
  if (num_classes != 2) fail(ErrorCode::kConfig, "detectors have exactly 2 classes");
  if (input_dim != 0 && static_cast<std::size_t>(input_dim) != model.input_shape().size()) {
    fail(ErrorCode::kConfig, "input_dim " + std::to_string(input_dim) + " does not match the model input size " +
                                 std::to_string(model.input_shape().size()));
  }
}

double cross_entropy_loss(const Logits& z, LabelClass label) {
  const double m = std::max(z[0], z[1]);
  const double lse = m + std::log(std::exp(z[0] - m) + std::exp(z[1] - m));
  return lse - z[class_index(label)];
}

Var lipschitz_penalty_graph(const DetectorModel& model, const Var& x, std::span<const Var> params) {
  const int batch = x.shape()[0];
  const Var z = model.forward(x, params);
  const Var xs[1] = {x};
  Var total;
  for (int i = 0; i < 2; ++i) {
    const Var gi = grad(sum(pick(z, std::vector<int>(static_cast<std::size_t>(batch), i))), xs, true)[0];
    const Var s = sum(square(gi));
    total = i == 0 ? s : add(total, s);
  }
  const double cn = 2.0 * static_cast<double>(model.input_shape().size());
  return scale(total, 1.0 / (cn * batch));
}

double lipschitz_penalty(const DetectorModel& model, const ImageTensor& image) {
  model.check_input(image);
  image.validate();
  const auto params = parameter_vars(model, false);
  const Var x(to_batch(image), true);
  return lipschitz_penalty_graph(model, x, params).value().item();
}

double augmented_loss(double cross_entropy, double penalty, double lambda) {
  return cross_entropy + lambda * penalty;
}

void require_double_backprop() {
  static std::once_flag once;
  static bool ok = false;
  std::call_once(once, [] {
    const Tensor x0({1, 1, 3, 3}, std::vector<double>{0.1, -0.2, 0.3, 0.5, -0.4, 0.2, 0.0, 0.7, -0.6});
    auto penalty = [&](const Tensor& w) {
      const Var x(x0, true);
      const Var wv(w, true);
      const Var xs[1] = {x};
      const Var gx = grad(sum(square(tanh(conv2d(x, wv, {1, 0})))), xs, true)[0];
      return std::pair{sum(square(gx)), wv};
    };
    Tensor w({1, 1, 2, 2}, std::vector<double>{0.3, -0.5, 0.8, 0.2});
    auto [p, wv] = penalty(w);
    const Var ws[1] = {wv};
    const double analytic = grad(p, ws)[0].value()[0];
    const double h = 1e-6;
    Tensor wp = w, wm = w;
    wp.values()[0] += h;
    wm.values()[0] -= h;
    const double fd = (penalty(wp).first.value().item() - penalty(wm).first.value().item()) / (2 * h);
    ok = std::isfinite(analytic) && std::abs(analytic - fd) <= 1e-5 * std::max(1.0, std::abs(fd)) &&
         std::abs(fd) > 1e-8;
  });
  if (!ok) fail(ErrorCode::kCapability, "autodiff substrate cannot differentiate through gradients");
}

ParameterOptimizer::ParameterOptimizer(Optimizer kind, double learning_rate, const std::vector<Tensor>& params)
    : kind_(kind), lr_(learning_rate) {
  for (const auto& p : params) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void ParameterOptimizer::step(std::vector<Tensor>& params, const std::vector<Var>& grads) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k].values();
    const auto& g = grads[k].value();
    if (kind_ == Optimizer::kSgd) {
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr_ * g[i];
      continue;
    }
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = beta1_ * m[i] + (1 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1 - beta2_) * g[i] * g[i];
      p[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
    }
  }
}

void write_training_curve(const std::vector<EpochStats>& curve, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) fail(ErrorCode::kIo, "cannot write training curve '" + path.string() + "'");
  os << "epoch,loss,train_acc\n";
  os.precision(10);
  for (const auto& e : curve) os << e.epoch << ',' << e.loss << ',' << e.train_acc << '\n';
}

namespace {

std::string model_id_for(const DetectorModel& m) {
  const auto flat = m.flat_parameters();
  const std::string_view bytes(reinterpret_cast<const char*>(flat.data()), flat.size() * sizeof(double));
  char lam[32];
  std::snprintf(lam, sizeof lam, "%g", m.provenance.lambda);
  return std::string(architecture_name(m.architecture())) + "-lam" + lam + (m.provenance.augmented ? "-aug" : "") +
         "-" + sha256_hex(bytes).substr(0, 10);
}

// Runs `epochs` passes over the data, mutating `model` in place.
std::vector<EpochStats> run_epochs(DetectorModel& model, const LoadedSplit& data, const TrainConfig& config,
                                   double lambda, std::uint64_t shuffle_seed, const TrainOutputs& outputs,
                                   int epoch_offset) {
  if (lambda > 0.0) require_double_backprop();
  ParameterOptimizer opt(config.optimizer, config.learning_rate, model.parameters());
  std::vector<std::size_t> order(data.images.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<EpochStats> curve;
  if (outputs.checkpoint_dir) std::filesystem::create_directories(*outputs.checkpoint_dir);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::mt19937_64 rng(derive_seed(shuffle_seed, static_cast<std::uint64_t>(epoch_offset + epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    int batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      ++batch_index;
      const std::size_t n = std::min(static_cast<std::size_t>(config.batch_size), order.size() - start);
      std::vector<ImageTensor> xs;
      std::vector<LabelClass> ys;
      for (std::size_t k = 0; k < n; ++k) {
        xs.push_back(data.images[order[start + k]]);
        ys.push_back(data.labels[order[start + k]]);
      }
      const auto params = parameter_vars(model, true);
      const Var x(to_batch(xs), lambda > 0.0);
      const Var z = model.forward(x, params);
      const Var ce = scale(sum(cross_entropy_rows(z, ys)), 1.0 / static_cast<double>(n));
      Var loss = ce;
      if (lambda > 0.0) loss = add(ce, scale(lipschitz_penalty_graph(model, x, params), lambda));
      const double lv = loss.value().item();
      if (!std::isfinite(lv)) {
        fail(ErrorCode::kTrainingFailure, "non-finite loss at epoch " + std::to_string(epoch_offset + epoch) +
                                              ", batch " + std::to_string(batch_index));
      }
      loss_sum += lv * static_cast<double>(n);
      for (std::size_t k = 0; k < n; ++k) {
        const Probabilities p = softmax(Logits{{z.value()[2 * k], z.value()[2 * k + 1]}});
        correct += classify_score(p.p_real(), 0.5) == ys[k];
      }
      const auto grads = grad(loss, params);
      opt.step(model.mutable_parameters(), grads);
    }
    EpochStats st{epoch_offset + epoch, loss_sum / static_cast<double>(order.size()),
                  static_cast<double>(correct) / static_cast<double>(order.size())};
    curve.push_back(st);
    if (outputs.verbose) {
      std::fprintf(stderr, "[train] %s epoch %d loss %.5f train_acc %.4f\n", architecture_name(model.architecture()),
                   st.epoch, st.loss, st.train_acc);
    }
    if (outputs.checkpoint_dir) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%03d.dfrw", st.epoch);
      save_model(model, *outputs.checkpoint_dir / name);
    }
  }
  return curve;
}

LoadedSplit load_train(const DatasetManifest& manifest) {
  LoadedSplit data = load_split(manifest, Split::kTrain);
  if (data.images.empty()) fail(ErrorCode::kEmpty, "manifest has an empty TRAIN split");
  for (const auto& im : data.images) {
    if (!im.same_shape(data.images.front())) {
      fail(ErrorCode::kInputShape, "TRAIN images differ in shape: " + im.shape_string() + " vs " +
                                       data.images.front().shape_string());
    }
  }
  return data;
}

bool any_augmented(const DatasetManifest& m) {
  return std::any_of(m.records.begin(), m.records.end(), [](const DatasetRecord& r) { return r.augmented; });
}

}  // namespace

TrainResult train_detector(Architecture arch, const DatasetManifest& manifest, const TrainConfig& config,
                           const RegularizationConfig& reg, const TrainOutputs& outputs) {
  config.validate();
  const LoadedSplit data = load_train(manifest);
  DetectorModel model = DetectorModel::create(arch, shape_of(data.images.front()), derive_seed(config.seed, 1));
  reg.validate(model);

  auto curve = run_epochs(model, data, config, reg.lambda, derive_seed(config.seed, 2), outputs, 0);
  Provenance& p = model.provenance;
  p.lambda = reg.lambda;
  p.epochs = config.epochs;
  p.batch_size = config.batch_size;
  p.learning_rate = config.learning_rate;
  p.optimizer = optimizer_name(config.optimizer);
  p.seed = config.seed;
  p.augmented = any_augmented(manifest);
  p.fine_tune_epochs = 0;
  p.dataset_id = manifest.content_id();
  model.id = model_id_for(model);
  if (outputs.curve_path) write_training_curve(curve, *outputs.curve_path);
  return {std::move(model), std::move(curve)};
}

TrainResult fine_tune_blur(const DetectorModel& base, const DatasetManifest& augmented_manifest, int epochs,
                           TrainConfig config, const TrainOutputs& outputs) {
  if (epochs < 0) fail(ErrorCode::kConfig, "fine-tune epochs must be >= 0");
  if (epochs == 0) return {base, {}};
  config.epochs = epochs;
  config.validate();
  const LoadedSplit data = load_train(augmented_manifest);
  base.check_input(data.images.front());

  DetectorModel model = base;
  auto curve = run_epochs(model, data, config, base.provenance.lambda, derive_seed(config.seed, 3), outputs,
                          base.provenance.epochs);
  model.provenance.augmented = true;
  model.provenance.fine_tune_epochs = epochs;
  model.provenance.dataset_id = augmented_manifest.content_id();
  model.id = model_id_for(model);
  if (outputs.curve_path) write_training_curve(curve, *outputs.curve_path);
  return {std::move(model), std::move(curve)};
}

}  // namespace dfr
