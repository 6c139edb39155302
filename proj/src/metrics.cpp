#include "metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "csv.hpp"
#include "dataset.hpp"
#include "errors.hpp"

namespace dfr {

namespace {

void check_scores(std::span<const double> p_real, std::span<const LabelClass> labels) {
  if (p_real.empty()) fail(ErrorCode::kEmpty, "empty evaluation");
  if (p_real.size() != labels.size()) fail(ErrorCode::kInvalidArgument, "scores and labels differ in length");
  for (double p : p_real) {
    if (!std::isfinite(p)) fail(ErrorCode::kInputValue, "non-finite score");
  }
}

std::optional<double> ratio(std::size_t num, std::size_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

std::optional<double> mean_defined(const std::vector<std::optional<double>>& v) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& x : v)
    if (x) {
      s += *x;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return s / static_cast<double>(n);
}

using Table = std::vector<std::vector<std::string>>;

std::string render(const std::vector<std::string>& header, const Table& rows, ReportFormat fmt,
                   const std::string& caption) {
  std::ostringstream out;
  if (fmt == ReportFormat::kCsv) {
    auto line = [&](const std::vector<std::string>& r) {
      for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << csv_field(r[i]);
      out << '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
    return out.str();
  }
  std::vector<std::size_t> width(header.size());
  for (std::size_t i = 0; i < header.size(); ++i) width[i] = header[i].size();
  for (const auto& r : rows)
    for (std::size_t i = 0; i < r.size() && i < width.size(); ++i) width[i] = std::max(width[i], r[i].size());
  auto line = [&](const std::vector<std::string>& r) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      out << (i ? "  " : "");
      if (i == 0) {
        out << r[i] << std::string(width[i] - r[i].size(), ' ');
      } else {
        out << std::string(width[i] - r[i].size(), ' ') << r[i];
      }
    }
    out << '\n';
  };
  if (!caption.empty()) out << caption << '\n';
  line(header);
  std::size_t total = 0;
  for (std::size_t w : width) total += w;
  out << std::string(total + 2 * (width.size() - 1), '-') << '\n';
  for (const auto& r : rows) line(r);
  return out.str();
}

std::string fmt_value(double v, int precision = 4) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

}  // namespace

std::string format_optional(const std::optional<double>& v, int precision) {
  return v ? fmt_value(*v, precision) : std::string("n/a");
}

MetricsReport compute_metrics(std::span<const double> p_real, std::span<const LabelClass> labels, double threshold) {
  check_scores(p_real, labels);
  if (!(threshold >= 0.0 && threshold <= 1.0)) fail(ErrorCode::kInvalidArgument, "threshold must lie in [0,1]");
  MetricsReport r;
  r.threshold = threshold;
  r.n_images = p_real.size();
  for (std::size_t i = 0; i < p_real.size(); ++i) {
    const int t = class_index(labels[i]);
    const int p = class_index(classify_score(p_real[i], threshold));
    ++r.confusion[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)];
  }
  const auto& c = r.confusion;
  r.accuracy = static_cast<double>(c[0][0] + c[1][1]) / static_cast<double>(r.n_images);
  for (std::size_t k = 0; k < 2; ++k) {
    r.precision[k] = ratio(c[k][k], c[0][k] + c[1][k]);
    r.recall[k] = ratio(c[k][k], c[k][0] + c[k][1]);
  }
  if (c[0][0] + c[0][1] > 0 && c[1][0] + c[1][1] > 0) r.auroc = auroc(p_real, labels);
  return r;
}

double auroc(std::span<const double> p_real, std::span<const LabelClass> labels) {
  check_scores(p_real, labels);
  const std::size_t n = p_real.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p_real[a] < p_real[b]; });
  // Average ranks over tie groups, kept doubled so the sums stay integral.
  double rank_sum_real_x2 = 0.0;
  std::size_t n_real = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && p_real[order[j]] == p_real[order[i]]) ++j;
    const double avg_rank_x2 = static_cast<double>(i + 1 + j);  // (i+1 + j) / 2 doubled
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == LabelClass::kReal) {
        rank_sum_real_x2 += avg_rank_x2;
        ++n_real;
      }
    }
    i = j;
  }
  const std::size_t n_fake = n - n_real;
  if (n_real == 0 || n_fake == 0) fail(ErrorCode::kUndefined, "AUROC undefined: only one class present");
  const double u_x2 = rank_sum_real_x2 - static_cast<double>(n_real) * static_cast<double>(n_real + 1);
  return u_x2 / (2.0 * static_cast<double>(n_real) * static_cast<double>(n_fake));
}

// ---- category sampling ----------------------------------------------------------

std::size_t CategorySample::total() const {
  std::size_t n = 0;
  for (const auto& c : categories) n += c.items.size();
  return n;
}

std::string wrong_category(const std::string& set_name) { return set_name + " Fake-Wrong"; }
std::string perturbed_correct_category(const std::string& set_name) { return set_name + " Fake-Correct"; }

CategorySample sample_categories(const DetectorModel& classifier, std::span<const ImageTensor> clean_images,
                                 std::span<const LabelClass> clean_labels, std::span<const std::string> clean_paths,
                                 std::span<const NamedAttackSet> adv_sets, const SamplingPlan& plan,
                                 std::uint64_t seed) {
  if (clean_images.size() != clean_labels.size()) {
    fail(ErrorCode::kInvalidArgument, "clean images and labels differ in length");
  }
  if (!clean_paths.empty() && clean_paths.size() != clean_images.size()) {
    fail(ErrorCode::kInvalidArgument, "clean paths and images differ in length");
  }
  std::uint64_t stream = 0;
  auto draw = [&](const std::string& name, std::vector<SampledImage> pool, std::size_t n) {
    const std::uint64_t s = derive_seed(seed, stream++);
    Category cat{name, {}};
    if (n == 0) return cat;
    if (pool.size() < n) {
      fail(ErrorCode::kSampling, "category '" + name + "' has " + std::to_string(pool.size()) +
                                     " eligible images, " + std::to_string(n) + " required");
    }
    std::mt19937_64 rng(s);
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(n);
    cat.items = std::move(pool);
    return cat;
  };
  auto ref_of = [&](std::size_t i) { return clean_paths.empty() ? "clean#" + std::to_string(i) : clean_paths[i]; };

  CategorySample out;
  const auto clean_p = p_real_batch(classifier, clean_images);
  std::vector<SampledImage> fake_ok, real_ok;
  for (std::size_t i = 0; i < clean_images.size(); ++i) {
    const LabelClass pred = classify_score(clean_p[i], 0.5);
    if (pred != clean_labels[i]) continue;
    (clean_labels[i] == LabelClass::kFake ? fake_ok : real_ok).push_back({clean_images[i], clean_labels[i], ref_of(i)});
  }
  out.categories.push_back(draw(kCleanFakeCategory, std::move(fake_ok), plan.n_clean));
  out.categories.push_back(draw(kCleanRealCategory, std::move(real_ok), plan.n_clean));

  for (const auto& set : adv_sets) {
    std::vector<std::size_t> usable;
    std::vector<ImageTensor> orig, pert;
    for (std::size_t i = 0; i < set.records.size(); ++i) {
      const auto& r = set.records[i];
      if (!r.error.empty()) continue;
      usable.push_back(i);
      orig.push_back(r.original);
      pert.push_back(r.perturbed);
    }
    const auto po = p_real_batch(classifier, orig);
    const auto pp = p_real_batch(classifier, pert);
    std::vector<SampledImage> wrong, right;
    for (std::size_t k = 0; k < usable.size(); ++k) {
      if (classify_score(po[k], 0.5) != LabelClass::kFake) continue;
      SampledImage s{pert[k], LabelClass::kFake, set.name + "#" + std::to_string(usable[k])};
      (classify_score(pp[k], 0.5) == LabelClass::kReal ? wrong : right).push_back(std::move(s));
    }
    out.categories.push_back(draw(wrong_category(set.name), std::move(wrong), plan.n_wrong));
    out.categories.push_back(draw(perturbed_correct_category(set.name), std::move(right), plan.n_perturbed_correct));
  }
  std::erase_if(out.categories, [](const Category& c) { return c.items.empty(); });
  return out;
}

// ---- reports ---------------------------------------------------------------------

std::string emit_clean_table(const ReportInput& in, ReportFormat fmt) {
  const std::vector<std::string> header{"Model",          "Accuracy",    "AUROC",       "Precision FAKE",
                                        "Recall FAKE",    "Precision REAL", "Recall REAL", "N"};
  Table rows;
  std::vector<const MetricsReport*> reg;
  for (const auto& m : in.clean) {
    const auto& r = m.metrics;
    rows.push_back({m.label, fmt_value(r.accuracy), format_optional(r.auroc), format_optional(r.precision[0]),
                    format_optional(r.recall[0]), format_optional(r.precision[1]), format_optional(r.recall[1]),
                    std::to_string(r.n_images)});
    if (m.regularized) reg.push_back(&m.metrics);
  }
  if (!reg.empty()) {
    auto col = [&](auto get) {
      std::vector<std::optional<double>> v;
      for (const auto* r : reg) v.push_back(get(*r));
      return format_optional(mean_defined(v));
    };
    rows.push_back({"Average Regularized", col([](const MetricsReport& r) { return std::optional(r.accuracy); }),
                    col([](const MetricsReport& r) { return r.auroc; }),
                    col([](const MetricsReport& r) { return r.precision[0]; }),
                    col([](const MetricsReport& r) { return r.recall[0]; }),
                    col([](const MetricsReport& r) { return r.precision[1]; }),
                    col([](const MetricsReport& r) { return r.recall[1]; }), "-"});
  }
  const double thr = in.clean.empty() ? 0.5 : in.clean.front().metrics.threshold;
  return render(header, rows, fmt, "Clean test metrics (threshold " + fmt_value(thr, 2) + ")");
}

std::string emit_attack_table(const ReportInput& in, ReportFormat fmt) {
  std::vector<std::string> header{"Model", "Unperturbed"};
  for (const auto& r : in.attacks)
    for (const auto& [name, v] : r.columns)
      if (std::find(header.begin() + 2, header.end(), name) == header.end()) header.push_back(name);
  Table rows;
  std::vector<std::vector<std::optional<double>>> reg;
  for (const auto& r : in.attacks) {
    std::vector<std::optional<double>> vals{r.unperturbed};
    for (std::size_t h = 2; h < header.size(); ++h) {
      std::optional<double> v;
      for (const auto& [name, x] : r.columns)
        if (name == header[h]) v = x;
      vals.push_back(v);
    }
    std::vector<std::string> row{r.label};
    for (const auto& v : vals) row.push_back(format_optional(v));
    rows.push_back(std::move(row));
    if (r.regularized) reg.push_back(std::move(vals));
  }
  if (!reg.empty()) {
    std::vector<std::string> row{"Average Regularized"};
    for (std::size_t c = 0; c + 1 < header.size(); ++c) {
      std::vector<std::optional<double>> col;
      for (const auto& v : reg) col.push_back(v[c]);
      row.push_back(format_optional(mean_defined(col)));
    }
    rows.push_back(std::move(row));
  }
  return render(header, rows, fmt, "Fake-only accuracy (recall) on unperturbed and perturbed fakes");
}

std::string emit_dip_table(const ReportInput& in, ReportFormat fmt) {
  std::vector<std::string> header{"Category", "N"};
  for (double t : in.dip_thresholds) header.push_back("Accuracy @" + fmt_value(t, 2));
  Table rows;
  auto add = [&](const DipRow& r) {
    std::vector<std::string> row{r.category, std::to_string(r.n)};
    for (double a : r.accuracy) row.push_back(fmt_value(a));
    rows.push_back(std::move(row));
  };
  for (const auto& r : in.dip) add(r);
  for (const auto& r : in.dip_overall) add(r);
  return render(header, rows, fmt, "DIP defense accuracy by category and classifier threshold");
}

void write_reports(const ReportInput& in, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto put = [&](const std::string& stem, auto emit) {
    for (auto fmt : {ReportFormat::kText, ReportFormat::kCsv}) {
      const auto path = dir / (stem + (fmt == ReportFormat::kText ? ".txt" : ".csv"));
      std::ofstream f(path, std::ios::binary);
      if (!f) fail(ErrorCode::kIo, "cannot write " + path.string());
      f << emit(in, fmt);
    }
  };
  if (!in.clean.empty()) put("clean_metrics", emit_clean_table);
  if (!in.attacks.empty()) put("attack_accuracy", emit_attack_table);
  if (!in.dip.empty() || !in.dip_overall.empty()) put("dip_defense", emit_dip_table);
}

namespace {

using json = nlohmann::json;

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
std::optional<double> json_opt(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

json metrics_to_json(const MetricsReport& m) {
  return {{"accuracy", m.accuracy},
          {"auroc", opt_json(m.auroc)},
          {"precision", {opt_json(m.precision[0]), opt_json(m.precision[1])}},
          {"recall", {opt_json(m.recall[0]), opt_json(m.recall[1])}},
          {"confusion", m.confusion},
          {"n_images", m.n_images},
          {"threshold", m.threshold},
          {"model_id", m.model_id},
          {"dataset_id", m.dataset_id}};
}

MetricsReport metrics_from_json(const json& j) {
  MetricsReport m;
  m.accuracy = j.at("accuracy").get<double>();
  m.auroc = json_opt(j.at("auroc"));
  for (int k = 0; k < 2; ++k) {
    m.precision[k] = json_opt(j.at("precision").at(k));
    m.recall[k] = json_opt(j.at("recall").at(k));
  }
  m.confusion = j.at("confusion").get<std::array<std::array<std::size_t, 2>, 2>>();
  m.n_images = j.at("n_images").get<std::size_t>();
  m.threshold = j.at("threshold").get<double>();
  m.model_id = j.at("model_id").get<std::string>();
  m.dataset_id = j.at("dataset_id").get<std::string>();
  return m;
}

json dip_rows_json(const std::vector<DipRow>& rows) {
  json out = json::array();
  for (const auto& r : rows) out.push_back({{"category", r.category}, {"n", r.n}, {"accuracy", r.accuracy}});
  return out;
}

std::vector<DipRow> dip_rows_from(const json& j) {
  std::vector<DipRow> out;
  for (const auto& r : j) {
    out.push_back({r.at("category").get<std::string>(), r.at("n").get<std::size_t>(),
                   r.at("accuracy").get<std::vector<double>>()});
  }
  return out;
}

}  // namespace

void save_report_input(const ReportInput& in, const std::filesystem::path& path) {
  json j;
  j["clean"] = json::array();
  for (const auto& r : in.clean) {
    j["clean"].push_back({{"label", r.label}, {"regularized", r.regularized}, {"metrics", metrics_to_json(r.metrics)}});
  }
  j["attacks"] = json::array();
  for (const auto& r : in.attacks) {
    json cols = json::array();
    for (const auto& [name, v] : r.columns) cols.push_back({{"name", name}, {"value", opt_json(v)}});
    j["attacks"].push_back(
        {{"label", r.label}, {"regularized", r.regularized}, {"unperturbed", r.unperturbed}, {"columns", cols}});
  }
  j["dip_thresholds"] = in.dip_thresholds;
  j["dip"] = dip_rows_json(in.dip);
  j["dip_overall"] = dip_rows_json(in.dip_overall);
  std::ofstream f(path);
  f << j.dump(2) << '\n';
  if (!f) fail(ErrorCode::kIo, "cannot write " + path.string());
}

ReportInput load_report_input(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) fail(ErrorCode::kIo, "cannot read " + path.string());
  ReportInput in;
  try {
    const json j = json::parse(f);
    for (const auto& r : j.at("clean")) {
      in.clean.push_back({r.at("label").get<std::string>(), metrics_from_json(r.at("metrics")),
                          r.at("regularized").get<bool>()});
    }
    for (const auto& r : j.at("attacks")) {
      AttackRow row;
      row.label = r.at("label").get<std::string>();
      row.regularized = r.at("regularized").get<bool>();
      row.unperturbed = r.at("unperturbed").get<double>();
      for (const auto& c : r.at("columns")) row.columns.push_back({c.at("name").get<std::string>(), json_opt(c.at("value"))});
      in.attacks.push_back(std::move(row));
    }
    in.dip_thresholds = j.at("dip_thresholds").get<std::vector<double>>();
    in.dip = dip_rows_from(j.at("dip"));
    in.dip_overall = dip_rows_from(j.at("dip_overall"));
  } catch (const json::exception& e) {
    fail(ErrorCode::kIo, "malformed report input '" + path.string() + "': " + e.what());
  }
  return in;
}

}  // namespace dfr
