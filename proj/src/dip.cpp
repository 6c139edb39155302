#include "dip.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <json.hpp>
#include <random>
#include <sstream>

#include "csv.hpp"
#include "errors.hpp"
#include "training.hpp"

namespace dfr {

namespace {

using json = nlohmann::json;

Var conv_act(const Var& x, const Var& w, const Var& b, int stride) {
  return relu(bias_add(conv2d(x, w, {stride, static_cast<int>(w.shape()[2] / 2)}), b));
}

void check_unit_interval(double t, const char* what) {
  if (!(t >= 0.0 && t <= 1.0)) fail(ErrorCode::kInvalidArgument, std::string(what) + " must lie in [0,1]");
}

}  // namespace

void DipConfig::validate() const {
  if (total_iterations <= 0) fail(ErrorCode::kConfig, "dip iterations must be positive");
  if (checkpoint_iteration <= 0 || checkpoint_iteration > total_iterations) {
    fail(ErrorCode::kConfig, "dip checkpoint " + std::to_string(checkpoint_iteration) + " outside [1, " +
                                 std::to_string(total_iterations) + "]");
  }
  if (smoothing_window < 1) fail(ErrorCode::kConfig, "smoothing window must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    fail(ErrorCode::kConfig, "dip learning rate must be positive");
  }
}

GeneratorNet GeneratorNet::create(InputShape shape, std::uint64_t seed) {
  if (shape.height % 8 || shape.width % 8) {
    fail(ErrorCode::kInputShape, "generator needs spatial dims divisible by 8");
  }
  GeneratorNet g;
  g.shape_ = shape;
  std::mt19937_64 rng(seed);
  g.z_ = Tensor(Shape{1, kSeedChannels, shape.height, shape.width});
  std::uniform_real_distribution<double> uz(0.0, 0.1);
  for (double& v : g.z_.values()) v = uz(rng);

  auto add_conv = [&](int out, int in, int k) {
    Tensor w(Shape{out, in, k, k});
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / (in * k * k)));
    for (double& v : w.values()) v = normal(rng);
    g.params_.push_back(std::move(w));
    g.params_.push_back(Tensor(Shape{out}));
  };
  const int* wd = kWidths;
  add_conv(wd[0], kSeedChannels, 3);  // encoder
  add_conv(wd[1], wd[0], 3);
  add_conv(wd[2], wd[1], 3);
  add_conv(wd[3], wd[2], 3);
  // Decoder: 1x1 squeeze, upsample, merge with the skip. The full-resolution
  // level has no skip, which slows the fit of pixel-level noise.
  for (int lvl = 2; lvl >= 0; --lvl) {
    add_conv(wd[lvl], wd[lvl + 1], 1);
    add_conv(wd[lvl], lvl > 0 ? 2 * wd[lvl] : wd[lvl], 3);
  }
  add_conv(shape.channels, wd[0], 1);
  return g;
}

Var GeneratorNet::forward(std::span<const Var> p) const {
  const Var z = constant(z_);
  Var e[4];
  e[0] = conv_act(z, p[0], p[1], 1);
  e[1] = conv_act(e[0], p[2], p[3], 2);
  e[2] = conv_act(e[1], p[4], p[5], 2);
  e[3] = conv_act(e[2], p[6], p[7], 2);
  Var h = e[3];
  std::size_t k = 8;
  for (int lvl = 2; lvl >= 0; --lvl, k += 4) {
    h = upsample2(conv_act(h, p[k], p[k + 1], 1));
    h = conv_act(lvl > 0 ? concat_channels(h, e[lvl]) : h, p[k + 2], p[k + 3], 1);
  }
  return sigmoid(bias_add(conv2d(h, p[k], {1, 0}), p[k + 1]));
}

ImageTensor GeneratorNet::output() const {
  NoGradGuard no_grad;
  std::vector<Var> p;
  for (const Tensor& t : params_) p.emplace_back(t, false);
  return from_batch(forward(p).value(), 0);
}

double DipTrace::p_real_at(int iteration) const {
  if (iteration < 1 || iteration > static_cast<int>(p_real_series.size())) {
    fail(ErrorCode::kInvalidArgument, "iteration " + std::to_string(iteration) + " not in trace");
  }
  return p_real_series[static_cast<std::size_t>(iteration - 1)];
}

DipTrace dip_optimize(const ImageTensor& target, const DetectorModel& classifier, const DipConfig& config) {
  config.validate();
  target.validate();
  classifier.check_input(target);

  GeneratorNet net = GeneratorNet::create(shape_of(target), config.seed);
  ParameterOptimizer opt(Optimizer::kAdam, config.learning_rate, net.parameters());
  const Var tgt = constant(to_batch(target));
  const double inv_n = 1.0 / static_cast<double>(target.size());

  DipTrace trace;
  trace.config = config;
  trace.classifier_id = classifier.id;
  trace.checkpoint_iteration = config.checkpoint_iteration;
  trace.p_real_series.reserve(static_cast<std::size_t>(config.total_iterations));
  trace.mse_series.reserve(static_cast<std::size_t>(config.total_iterations));
  trace.best_mse = std::numeric_limits<double>::infinity();

  for (int it = 1; it <= config.total_iterations; ++it) {
    std::vector<Var> params;
    params.reserve(net.parameters().size());
    for (const Tensor& t : net.parameters()) params.emplace_back(t, true);
    const Var out = net.forward(params);
    const Var loss = scale(sum(square(sub(out, tgt))), inv_n);
    const double mse = loss.value().item();
    if (!std::isfinite(mse)) {
      fail(ErrorCode::kStageFailure, "dip loss became non-finite at iteration " + std::to_string(it));
    }
    ImageTensor current = from_batch(out.value(), 0);
    trace.mse_series.push_back(mse);
    trace.p_real_series.push_back(forward_probs(classifier, current).p_real());
    trace.best_mse = std::min(trace.best_mse, mse);
    if (it == config.checkpoint_iteration) trace.checkpoint_image = std::move(current);
    if (it == config.total_iterations) break;
    opt.step(net.parameters(), grad(loss, params));
  }
  return trace;
}

std::vector<double> smooth_trace(std::span<const double> series, int window) {
  if (window < 1) fail(ErrorCode::kInvalidArgument, "smoothing window must be >= 1");
  const long n = static_cast<long>(series.size());
  const long before = window / 2, after = (window - 1) / 2;
  std::vector<double> out(series.size());
  for (long i = 0; i < n; ++i) {
    const long lo = std::max(0L, i - before), hi = std::min(n - 1, i + after);
    double acc = 0.0;
    for (long j = lo; j <= hi; ++j) acc += series[static_cast<std::size_t>(j)];
    out[static_cast<std::size_t>(i)] = acc / static_cast<double>(hi - lo + 1);
  }
  return out;
}

LabelClass dip_classify_at(const DipTrace& trace, int iteration, double threshold_real) {
  check_unit_interval(threshold_real, "threshold");
  if (iteration < kMinDecisionIteration) {
    fail(ErrorCode::kConfig, "checkpoint " + std::to_string(iteration) + " is earlier than iteration " +
                                 std::to_string(kMinDecisionIteration));
  }
  return classify_score(trace.p_real_at(iteration), threshold_real);
}

LabelClass dip_classify(const DipTrace& trace, double threshold_real) {
  return dip_classify_at(trace, trace.checkpoint_iteration, threshold_real);
}

CheckpointSweep sweep_checkpoint(std::span<const DipTrace> traces, std::span<const LabelClass> labels,
                                 double threshold_real, int stride) {
  if (traces.empty()) fail(ErrorCode::kEmpty, "checkpoint sweep needs validation traces");
  if (traces.size() != labels.size()) fail(ErrorCode::kInvalidArgument, "traces and labels differ in length");
  if (stride < 1) fail(ErrorCode::kInvalidArgument, "sweep stride must be >= 1");
  int total = static_cast<int>(traces.front().p_real_series.size());
  for (const DipTrace& t : traces) total = std::min(total, static_cast<int>(t.p_real_series.size()));
  const int lo = std::max(kMinDecisionIteration, (total + 2) / 3);
  const int hi = (2 * total) / 3;
  if (lo > hi) fail(ErrorCode::kConfig, "run too short for a checkpoint sweep");

  CheckpointSweep s;
  double best = -1.0;
  for (int it = lo; it <= hi; it += stride) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < traces.size(); ++i) {
      correct += dip_classify_at(traces[i], it, threshold_real) == labels[i];
    }
    const double acc = static_cast<double>(correct) / static_cast<double>(traces.size());
    s.iterations.push_back(it);
    s.accuracy.push_back(acc);
    if (acc > best) {
      best = acc;
      s.chosen_iteration = it;
    }
  }
  return s;
}

void save_dip_trace(const DipTrace& trace, const std::filesystem::path& dir, const std::string& stem,
                    const std::string& target_path) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream csv(dir / (stem + ".trace.csv"));
    if (!csv) fail(ErrorCode::kIo, "cannot write " + (dir / (stem + ".trace.csv")).string());
    csv << "iteration,p_real,mse\n";
    csv.precision(17);
    for (std::size_t i = 0; i < trace.p_real_series.size(); ++i) {
      csv << i + 1 << ',' << trace.p_real_series[i] << ',' << trace.mse_series[i] << '\n';
    }
  }
  if (trace.checkpoint_image.size() > 0) {
    write_tensor_file(trace.checkpoint_image, dir / (stem + ".checkpoint.dfrt"));
    write_png(trace.checkpoint_image, dir / (stem + ".checkpoint.png"));
  }
  json meta = {
      {"classifier_id", trace.classifier_id},
      {"seed", trace.config.seed},
      {"total_iterations", trace.config.total_iterations},
      {"checkpoint_iteration", trace.checkpoint_iteration},
      {"smoothing_window", trace.config.smoothing_window},
      {"learning_rate", trace.config.learning_rate},
      {"best_mse", trace.best_mse},
      {"target", target_path},
      {"generator",
       {{"levels", 4},
        {"widths", {GeneratorNet::kWidths[0], GeneratorNet::kWidths[1], GeneratorNet::kWidths[2],
                    GeneratorNet::kWidths[3]}},
        {"decoder", "conv1x1-relu, nearest upsample, concat skip (none at full resolution), conv3x3-relu"},
        {"seed_channels", GeneratorNet::kSeedChannels},
        {"seed_distribution", "uniform(0,0.1)"},
        {"output", "sigmoid"}}},
  };
  if (trace.checkpoint_iteration >= 1 &&
      trace.checkpoint_iteration <= static_cast<int>(trace.p_real_series.size())) {
    meta["p_real_checkpoint"] = trace.p_real_at(trace.checkpoint_iteration);
  }
  std::ofstream js(dir / (stem + ".json"));
  if (!js) fail(ErrorCode::kIo, "cannot write " + (dir / (stem + ".json")).string());
  js << meta.dump(2) << '\n';
}

DipTrace load_dip_trace(const std::filesystem::path& dir, const std::string& stem) {
  DipTrace t;
  std::ifstream js(dir / (stem + ".json"));
  if (!js) fail(ErrorCode::kIo, "cannot read " + (dir / (stem + ".json")).string());
  json meta;
  try {
    js >> meta;
    t.classifier_id = meta.at("classifier_id").get<std::string>();
    t.config.seed = meta.at("seed").get<std::uint64_t>();
    t.config.total_iterations = meta.at("total_iterations").get<int>();
    t.config.checkpoint_iteration = meta.at("checkpoint_iteration").get<int>();
    t.config.smoothing_window = meta.at("smoothing_window").get<int>();
    t.config.learning_rate = meta.at("learning_rate").get<double>();
    t.best_mse = meta.at("best_mse").get<double>();
  } catch (const json::exception& e) {
    fail(ErrorCode::kIo, "malformed dip metadata " + (dir / (stem + ".json")).string() + ": " + e.what());
  }
  t.checkpoint_iteration = t.config.checkpoint_iteration;

  const auto csv_path = dir / (stem + ".trace.csv");
  std::ifstream csv(csv_path);
  if (!csv) fail(ErrorCode::kIo, "cannot read " + csv_path.string());
  std::string line;
  std::getline(csv, line);
  if (line != "iteration,p_real,mse") fail(ErrorCode::kIo, "bad trace header in " + csv_path.string());
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    const auto f = csv_split(line);
    if (f.size() != 3) fail(ErrorCode::kIo, "bad trace row in " + csv_path.string());
    t.p_real_series.push_back(std::stod(f[1]));
    t.mse_series.push_back(std::stod(f[2]));
  }
  const auto ckpt = dir / (stem + ".checkpoint.dfrt");
  if (std::filesystem::exists(ckpt)) t.checkpoint_image = read_tensor_file(ckpt);
  return t;
}

}  // namespace dfr
