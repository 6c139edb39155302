#include "attacks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <limits>

#include "csv.hpp"
#include "errors.hpp"

namespace dfr {

using json = nlohmann::json;

const char* attack_name(AttackId a) { return a == AttackId::kFgsm ? "FGSM" : "CW_L2"; }

AttackId parse_attack(const std::string& s) {
  std::string u;
  for (char c : s) u.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  if (u == "FGSM") return AttackId::kFgsm;
  if (u == "CW_L2" || u == "CW" || u == "CWL2") return AttackId::kCwL2;
  fail(ErrorCode::kConfig, "unknown attack '" + s + "' (expected FGSM or CW_L2)");
}

void FgsmConfig::validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) fail(ErrorCode::kConfig, "FGSM epsilon must be >= 0");
}

void CwConfig::validate() const {
  if (!(kappa >= 0.0) || !std::isfinite(kappa)) fail(ErrorCode::kConfig, "CW kappa must be >= 0");
  if (!(c_min > 0.0 && c_max >= c_min) || !std::isfinite(c_max)) {
    fail(ErrorCode::kConfig, "CW c range must be positive and ordered");
  }
  if (search_steps < 1) fail(ErrorCode::kConfig, "CW search_steps must be >= 1");
  if (max_iterations < 1) fail(ErrorCode::kConfig, "CW max_iterations must be >= 1");
  if (!(learning_rate > 0.0)) fail(ErrorCode::kConfig, "CW learning_rate must be > 0");
}

void AdversarialRecord::finalize() {
  for (double& v : original.values()) v = static_cast<double>(static_cast<float>(v));
  for (double& v : perturbed.values()) v = static_cast<double>(static_cast<float>(v));
  l2_norm = l2_distance(original, perturbed);
  linf_norm = linf_distance(original, perturbed);
}

namespace {

int other_class(LabelClass y) { return 1 - class_index(y); }

void check_batch(const DetectorModel& model, std::span<const ImageTensor> images, std::span<const LabelClass> labels) {
  if (images.size() != labels.size()) fail(ErrorCode::kInvalidArgument, "images and labels differ in length");
  for (const auto& im : images) {
    model.check_input(im);
    im.validate();
  }
}

}  // namespace

// ---- FGSM ------------------------------------------------------------------------

std::vector<ImageTensor> loss_input_gradients(const DetectorModel& model, std::span<const ImageTensor> images,
                                              std::span<const LabelClass> labels) {
  check_batch(model, images, labels);
  std::vector<ImageTensor> out;
  out.reserve(images.size());
  const auto params = parameter_vars(model, false);
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, images.size() - start);
    const Var x(to_batch(images.subspan(start, n)), true);
    const Var loss = sum(cross_entropy_rows(model.forward(x, params), labels.subspan(start, n)));
    const Var xs[1] = {x};
    const Tensor g = grad(loss, xs)[0].value();
    for (std::size_t i = 0; i < n; ++i) out.push_back(from_batch(g, static_cast<int>(i)));
  }
  return out;
}

std::vector<AdversarialRecord> fgsm_attack_batch(const DetectorModel& model, std::span<const ImageTensor> images,
                                                 std::span<const LabelClass> labels, const FgsmConfig& config) {
  config.validate();
  const auto grads = loss_input_gradients(model, images, labels);
  std::vector<AdversarialRecord> out(images.size());
  std::vector<ImageTensor> perturbed;
  std::vector<bool> zero_grad(images.size(), true);
  for (std::size_t i = 0; i < images.size(); ++i) {
    ImageTensor p = images[i];
    const auto g = grads[i].values();
    auto v = p.values();
    for (std::size_t k = 0; k < v.size(); ++k) {
      const double s = g[k] > 0 ? 1.0 : (g[k] < 0 ? -1.0 : 0.0);
      if (s != 0.0) zero_grad[i] = false;
      v[k] = std::clamp(v[k] + config.epsilon * s, 0.0, 1.0);
    }
    AdversarialRecord& r = out[i];
    r.original = images[i];
    r.perturbed = std::move(p);
    r.attack = AttackId::kFgsm;
    r.source_model_id = model.id;
    r.finalize();
    perturbed.push_back(r.perturbed);
  }
  const auto p_real = p_real_batch(model, perturbed);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].success_on_source = !zero_grad[i] && classify_score(p_real[i], 0.5) != labels[i];
  }
  return out;
}

AdversarialRecord fgsm_attack(const DetectorModel& model, const ImageTensor& image, LabelClass label,
                              const FgsmConfig& config) {
  return fgsm_attack_batch(model, std::span(&image, 1), std::span(&label, 1), config).front();
}

// ---- CW-L2 -----------------------------------------------------------------------

double cw_margin_f(const Logits& z, LabelClass y, double kappa) {
  return std::max(z[class_index(y)] - z[other_class(y)], -kappa);
}

bool cw_margin_met(const Logits& z, LabelClass y, double kappa) {
  const double margin = z[other_class(y)] - z[class_index(y)];
  return margin > 0.0 && margin >= kappa;
}

ImageTensor tanh_reparam(std::span<const double> omega, InputShape shape) {
  if (omega.size() != shape.size()) fail(ErrorCode::kInputShape, "omega size does not match the image shape");
  ImageTensor x(shape.height, shape.width, shape.channels);
  auto v = x.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.5 * (std::tanh(omega[i]) + 1.0);
  return x;
}

std::vector<double> inverse_reparam(const ImageTensor& x) {
  std::vector<double> omega(x.size());
  const auto v = x.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double p = std::clamp(v[i], 1e-6, 1.0 - 1e-6);
    omega[i] = std::atanh(2.0 * p - 1.0);
  }
  return omega;
}

namespace {

// Inner CW loop for a batch of images, each with its own c. Images drop out of
// the graph once abort-early triggers or their objective turns non-finite.
std::vector<CwCandidate> cw_optimize_batch(const DetectorModel& model, std::span<const ImageTensor> images,
                                           std::span<const LabelClass> labels, std::span<const double> cs,
                                           const CwConfig& config) {
  const std::size_t n = images.size();
  const InputShape shape = model.input_shape();
  const std::size_t dim = shape.size();
  std::vector<std::vector<double>> omega(n), target(n), m(n, std::vector<double>(dim, 0.0)),
      v(n, std::vector<double>(dim, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    omega[i] = to_batch(ImageTensor(shape.height, shape.width, shape.channels, inverse_reparam(images[i]))).vec();
    target[i] = to_batch(images[i]).vec();
  }
  std::vector<CwCandidate> out(n);
  std::vector<double> best_obj(n, std::numeric_limits<double>::infinity());
  std::vector<double> prev_check(n, std::numeric_limits<double>::infinity());
  std::vector<bool> active(n, true);
  const auto params = parameter_vars(model, false);
  const int check_every = std::max(1, config.max_iterations / 10);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const Shape one{1, shape.channels, shape.height, shape.width};

  for (int it = 0; it < config.max_iterations; ++it) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < n; ++i)
      if (active[i]) idx.push_back(i);
    if (idx.empty()) break;
    const int b = static_cast<int>(idx.size());
    Tensor om({b, shape.channels, shape.height, shape.width}), tg(om.shape());
    std::vector<int> ycol, ocol;
    std::vector<double> cvec;
    for (int k = 0; k < b; ++k) {
      const std::size_t i = idx[static_cast<std::size_t>(k)];
      std::copy(omega[i].begin(), omega[i].end(), om.data() + static_cast<std::size_t>(k) * dim);
      std::copy(target[i].begin(), target[i].end(), tg.data() + static_cast<std::size_t>(k) * dim);
      ycol.push_back(class_index(labels[i]));
      ocol.push_back(other_class(labels[i]));
      cvec.push_back(cs[i]);
    }
    const Var w(std::move(om), true);
    const Var xp = scale(add_scalar(tanh(w), 1.0), 0.5);
    const Var diff = sub(xp, constant(std::move(tg)));
    const Var l2 = sum_cols(reshape(square(diff), Shape{b, static_cast<int>(dim)}));
    const Var z = model.forward(xp, params);
    const Var d = sub(pick(z, ycol), pick(z, ocol));
    const Var f = add_scalar(relu(add_scalar(d, config.kappa)), -config.kappa);
    const Var obj = add(l2, mul(f, constant(Tensor(Shape{b}, cvec))));
    const Var ws[1] = {w};
    const Tensor g = grad(sum(obj), ws)[0].value();

    const double bc1 = 1.0 - std::pow(b1, it + 1), bc2 = 1.0 - std::pow(b2, it + 1);
    for (int k = 0; k < b; ++k) {
      const std::size_t i = idx[static_cast<std::size_t>(k)];
      const double o = obj.value()[static_cast<std::size_t>(k)];
      CwCandidate& cand = out[i];
      cand.trace.push_back(o);
      if (!std::isfinite(o)) {
        cand.finite = false;
        active[i] = false;
        continue;
      }
      const Logits zl{{z.value()[2 * static_cast<std::size_t>(k)], z.value()[2 * static_cast<std::size_t>(k) + 1]}};
      const double l2v = std::sqrt(l2.value()[static_cast<std::size_t>(k)]);
      const bool record_obj = o < best_obj[i];
      const bool record_success =
          cw_margin_met(zl, labels[i], config.kappa) && (!cand.best_success || l2v < cand.best_success_l2);
      if (record_obj || record_success) {
        Tensor xt(one);
        std::copy(xp.value().data() + static_cast<std::size_t>(k) * dim,
                  xp.value().data() + static_cast<std::size_t>(k + 1) * dim, xt.data());
        ImageTensor im = from_batch(xt, 0);
        if (record_obj) {
          best_obj[i] = o;
          cand.image = im;
        }
        if (record_success) {
          cand.best_success = std::move(im);
          cand.best_success_l2 = l2v;
        }
      }
      // Adam step on omega.
      const double* gk = g.data() + static_cast<std::size_t>(k) * dim;
      auto& om_i = omega[i];
      auto& mi = m[i];
      auto& vi = v[i];
      for (std::size_t j = 0; j < dim; ++j) {
        mi[j] = b1 * mi[j] + (1 - b1) * gk[j];
        vi[j] = b2 * vi[j] + (1 - b2) * gk[j] * gk[j];
        om_i[j] -= config.learning_rate * (mi[j] / bc1) / (std::sqrt(vi[j] / bc2) + eps);
      }
      if (config.abort_early && (it + 1) % check_every == 0) {
        if (o > prev_check[i] * 0.9999) active[i] = false;
        prev_check[i] = o;
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    if (out[i].image.size() == 0) out[i].image = images[i];
  return out;
}

}  // namespace

CwCandidate cw_inner_optimize(const DetectorModel& model, const ImageTensor& image, LabelClass label, double c,
                              const CwConfig& config) {
  config.validate();
  if (!(c > 0.0)) fail(ErrorCode::kInvalidArgument, "CW constant c must be > 0");
  check_batch(model, std::span(&image, 1), std::span(&label, 1));
  return std::move(cw_optimize_batch(model, std::span(&image, 1), std::span(&label, 1), std::span(&c, 1), config)
                       .front());
}

std::vector<AdversarialRecord> cw_l2_attack_batch(const DetectorModel& model, std::span<const ImageTensor> images,
                                                  std::span<const LabelClass> labels, const CwConfig& config) {
  config.validate();
  check_batch(model, images, labels);
  const std::size_t n = images.size();
  std::vector<double> lo(n, config.c_min), hi(n, config.c_max);
  std::vector<std::optional<ImageTensor>> best(n);
  std::vector<double> best_l2(n, std::numeric_limits<double>::infinity());
  std::vector<std::optional<double>> chosen(n);
  std::vector<ImageTensor> fallback(images.begin(), images.end());
  std::vector<double> fallback_obj(n, std::numeric_limits<double>::infinity());

  for (int step = 0; step < config.search_steps; ++step) {
    std::vector<double> cs(n);
    for (std::size_t i = 0; i < n; ++i) cs[i] = std::sqrt(lo[i] * hi[i]);
    const auto cands = cw_optimize_batch(model, images, labels, cs, config);
    for (std::size_t i = 0; i < n; ++i) {
      const CwCandidate& cand = cands[i];
      if (cand.best_success) {
        if (cand.best_success_l2 < best_l2[i]) {
          best_l2[i] = cand.best_success_l2;
          best[i] = cand.best_success;
        }
        if (!chosen[i] || cs[i] < *chosen[i]) chosen[i] = cs[i];
        hi[i] = cs[i];
      } else {
        lo[i] = cs[i];
        // Best-effort candidate: the final-margin objective without the distance term.
        if (cand.finite) {
          const double f = cw_margin_f(forward_logits(model, cand.image), labels[i], config.kappa);
          if (f < fallback_obj[i]) {
            fallback_obj[i] = f;
            fallback[i] = cand.image;
          }
        }
      }
    }
  }

  std::vector<AdversarialRecord> out(n);
  std::vector<ImageTensor> perturbed;
  for (std::size_t i = 0; i < n; ++i) {
    AdversarialRecord& r = out[i];
    r.original = images[i];
    r.perturbed = best[i] ? *best[i] : fallback[i];
    r.attack = AttackId::kCwL2;
    r.source_model_id = model.id;
    r.chosen_c = chosen[i];
    r.finalize();
    perturbed.push_back(r.perturbed);
  }
  const auto logits = forward_logits_batch(model, perturbed);
  for (std::size_t i = 0; i < n; ++i) out[i].success_on_source = cw_margin_f(logits[i], labels[i], config.kappa) < 0;
  return out;
}

AdversarialRecord cw_l2_attack(const DetectorModel& model, const ImageTensor& image, LabelClass label,
                               const CwConfig& config) {
  return cw_l2_attack_batch(model, std::span(&image, 1), std::span(&label, 1), config).front();
}

// ---- attack sets -----------------------------------------------------------------

AttackSet evaluate_attack_set(std::vector<AdversarialRecord> records, const DetectorModel& target) {
  AttackSet set;
  set.records = std::move(records);
  set.target_model_id = target.id;
  AttackSetStats& st = set.stats;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  set.clean_p_real.assign(set.records.size(), nan);
  set.target_p_real.assign(set.records.size(), nan);
  std::vector<std::size_t> idx;
  std::vector<ImageTensor> orig, pert;
  for (std::size_t i = 0; i < set.records.size(); ++i) {
    const auto& r = set.records[i];
    if (!r.error.empty() || shape_of(r.perturbed) != target.input_shape()) {
      ++st.failures;
      continue;
    }
    idx.push_back(i);
    orig.push_back(r.original);
    pert.push_back(r.perturbed);
  }
  st.n = idx.size();
  if (idx.empty()) return set;
  const auto clean = p_real_batch(target, orig);
  const auto adv = p_real_batch(target, pert);
  std::size_t clean_ok = 0, pert_ok = 0, success = 0;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    set.clean_p_real[idx[k]] = clean[k];
    set.target_p_real[idx[k]] = adv[k];
    clean_ok += classify_score(clean[k], 0.5) == LabelClass::kFake;
    pert_ok += classify_score(adv[k], 0.5) == LabelClass::kFake;
    success += set.records[idx[k]].success_on_source;
  }
  const double nn = static_cast<double>(st.n);
  st.defined = true;
  st.clean_accuracy = static_cast<double>(clean_ok) / nn;
  st.perturbed_accuracy = static_cast<double>(pert_ok) / nn;
  st.source_success_rate = static_cast<double>(success) / nn;
  return set;
}

AttackSet craft_attack_set(const DetectorModel& source, const DetectorModel& target,
                           std::span<const ImageTensor> fakes, std::span<const std::string> paths,
                           const AttackSpec& spec) {
  if (!paths.empty() && paths.size() != fakes.size()) {
    fail(ErrorCode::kInvalidArgument, "fake paths and images differ in length");
  }
  std::vector<AdversarialRecord> records(fakes.size());
  std::vector<std::size_t> ok;
  for (std::size_t i = 0; i < fakes.size(); ++i) {
    records[i].original = fakes[i];
    records[i].perturbed = fakes[i];
    records[i].attack = spec.attack;
    records[i].source_model_id = source.id;
    if (!paths.empty()) records[i].original_path = paths[i];
    try {
      source.check_input(fakes[i]);
      target.check_input(fakes[i]);
      fakes[i].validate();
      ok.push_back(i);
    } catch (const Error& e) {
      records[i].error = e.what();
    }
  }

  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < ok.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, ok.size() - start);
    std::vector<ImageTensor> imgs;
    for (std::size_t k = 0; k < n; ++k) imgs.push_back(fakes[ok[start + k]]);
    const std::vector<LabelClass> labels(n, LabelClass::kFake);
    auto run = [&](std::span<const ImageTensor> im, std::span<const LabelClass> lb) {
      return spec.attack == AttackId::kFgsm ? fgsm_attack_batch(source, im, lb, spec.fgsm)
                                            : cw_l2_attack_batch(source, im, lb, spec.cw);
    };
    std::vector<AdversarialRecord> got;
    try {
      got = run(imgs, labels);
    } catch (const Error&) {
      // Retry one by one so a single bad image cannot sink the chunk.
      for (std::size_t k = 0; k < n; ++k) {
        try {
          got.push_back(run(std::span(&imgs[k], 1), std::span(&labels[k], 1)).front());
        } catch (const Error& e) {
          AdversarialRecord r = records[ok[start + k]];
          r.error = e.what();
          got.push_back(std::move(r));
        }
      }
    }
    for (std::size_t k = 0; k < n; ++k) {
      const std::string path = records[ok[start + k]].original_path;
      records[ok[start + k]] = std::move(got[k]);
      records[ok[start + k]].original_path = path;
    }
  }
  for (auto& r : records)
    if (!r.error.empty()) {
      r.success_on_source = false;
      r.finalize();
    }
  return evaluate_attack_set(std::move(records), target);
}

// ---- persistence -----------------------------------------------------------------

void save_adversarial_set(const std::vector<AdversarialRecord>& records, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream index(dir / "index.csv");
  if (!index) fail(ErrorCode::kIo, "cannot write '" + (dir / "index.csv").string() + "'");
  index << "index,original_path,attack,source_model_id,success_on_source,l2_norm,linf_norm,chosen_c,"
           "original_tensor,perturbed_tensor,preview_png,metadata_json\n";
  index.precision(17);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    char stem[16];
    std::snprintf(stem, sizeof stem, "%05zu", i);
    const std::string s = stem;
    write_tensor_file(r.original, dir / (s + ".orig.dfrt"));
    write_tensor_file(r.perturbed, dir / (s + ".adv.dfrt"));
    write_png(r.perturbed, dir / (s + ".adv.png"));
    json meta = {{"index", i},
                 {"attack_id", attack_name(r.attack)},
                 {"source_model_id", r.source_model_id},
                 {"success_on_source", r.success_on_source},
                 {"l2_norm", r.l2_norm},
                 {"linf_norm", r.linf_norm},
                 {"chosen_c", r.chosen_c ? json(*r.chosen_c) : json(nullptr)},
                 {"original_path", r.original_path},
                 {"error", r.error},
                 {"shape", {r.perturbed.height(), r.perturbed.width(), r.perturbed.channels()}}};
    std::ofstream(dir / (s + ".json")) << meta.dump(2) << '\n';
    index << i << ',' << csv_field(r.original_path) << ',' << attack_name(r.attack) << ','
          << csv_field(r.source_model_id) << ',' << (r.success_on_source ? 1 : 0) << ',' << r.l2_norm << ','
          << r.linf_norm << ',' << (r.chosen_c ? std::to_string(*r.chosen_c) : std::string()) << ',' << s
          << ".orig.dfrt," << s << ".adv.dfrt," << s << ".adv.png," << s << ".json\n";
  }
  if (!index) fail(ErrorCode::kIo, "write failed for '" + (dir / "index.csv").string() + "'");
}

std::vector<AdversarialRecord> load_adversarial_set(const std::filesystem::path& dir) {
  std::ifstream index(dir / "index.csv");
  if (!index) fail(ErrorCode::kIo, "cannot read adversarial set index in '" + dir.string() + "'");
  std::string line;
  std::getline(index, line);
  std::vector<AdversarialRecord> out;
  while (std::getline(index, line)) {
    if (line.empty()) continue;
    const auto f = csv_split(line);
    if (f.size() != 12) fail(ErrorCode::kIo, "malformed adversarial index line: " + line);
    std::ifstream js(dir / f[11]);
    if (!js) fail(ErrorCode::kIo, "missing metadata '" + (dir / f[11]).string() + "'");
    const json meta = json::parse(js);
    AdversarialRecord r;
    r.original = read_tensor_file(dir / f[8]);
    r.perturbed = read_tensor_file(dir / f[9]);
    r.attack = parse_attack(meta.at("attack_id").get<std::string>());
    r.source_model_id = meta.at("source_model_id").get<std::string>();
    r.success_on_source = meta.at("success_on_source").get<bool>();
    r.l2_norm = meta.at("l2_norm").get<double>();
    r.linf_norm = meta.at("linf_norm").get<double>();
    if (!meta.at("chosen_c").is_null()) r.chosen_c = meta.at("chosen_c").get<double>();
    r.original_path = meta.value("original_path", std::string());
    r.error = meta.value("error", std::string());
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace dfr
