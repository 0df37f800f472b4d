#include "mnet/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include <Eigen/LU>

#include "mnet/error.hpp"
#include "mnet/serialize.hpp"

namespace mnet {

using nlohmann::json;

double percentile_nearest_rank(std::vector<double> values, double p) {
  if (values.empty()) throw NoSequences("percentile of an empty sample");
  if (!(p >= 0.0 && p <= 100.0)) throw InvalidSpec("percentile must lie in [0, 100]");
  std::sort(values.begin(), values.end());
  const auto n = static_cast<double>(values.size());
  const auto rank = static_cast<std::size_t>(std::max(1.0, std::ceil(p / 100.0 * n - 1e-9)));
  return values[std::min(rank, values.size()) - 1];
}

double gaussian_nll(const GaussPrediction& g, const Vec2& y) {
  const Eigen::Matrix2d s = g.sigma();
  const Vec2 d = y - g.mu;
  return std::log(2.0 * std::numbers::pi) + 0.5 * std::log(g.det()) + 0.5 * d.dot(s.inverse() * d);
}

double heatmap_nll(const HeatmapPrediction& m, const Vec2& y) {
  int r = 0, c = 0;
  m.cell_of(y, r, c);
  const double p = m.p[static_cast<std::size_t>(r * m.w + c)];
  if (!(p > 0.0)) throw ZeroMass("zero probability at the ground-truth cell");
  return -std::log(p) + 2.0 * std::log(m.delta);
}

double entropy(const HeatmapPrediction& m) {
  double h = 0;
  for (double p : m.p)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

double entropy(const GaussPrediction& g) {
  return std::log(2.0 * std::numbers::pi * std::numbers::e) + 0.5 * std::log(g.det());
}

// ---------------------------------------------------------------------------------------------
// Report

const HorizonStats& MetricsReport::at(int horizon) const {
  for (const auto& h : horizons)
    if (h.horizon == horizon) return h;
  throw InvalidSpec("report has no horizon " + std::to_string(horizon));
}

namespace {

json number_or_inf(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

double parse_number_or_inf(const json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    throw FormatError("bad number '" + s + "' in report");
  }
  return j.get<double>();
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

}  // namespace

void to_json(json& j, const MetricsReport& r) {
  j = json{{"schema_version", r.schema_version}, {"predictor", r.predictor}, {"sequences", r.sequences},
           {"config", r.config}};
  j["horizons"] = json::array();
  for (const auto& h : r.horizons) {
    json e{{"horizon", h.horizon}, {"count", h.count},   {"excluded", h.excluded}, {"mean_l2", h.mean_l2},
           {"p25", h.p25},         {"median", h.median}, {"p75", h.p75},           {"zero_mass", h.zero_mass}};
    e["ln_perplexity"] = h.ln_perplexity ? number_or_inf(*h.ln_perplexity) : json(nullptr);
    j["horizons"].push_back(std::move(e));
  }
  j["entropy"] = json::array();
  for (const auto& e : r.entropy)
    j["entropy"].push_back(json{{"t", e.t},
                                {"count", e.count},
                                {"mean", e.mean},
                                {"p25", e.p25},
                                {"median", e.median},
                                {"p75", e.p75}});
}

void from_json(const json& j, MetricsReport& r) {
  r.schema_version = j.at("schema_version").get<int>();
  if (r.schema_version != MetricsReport::kSchemaVersion)
    throw FormatError("unsupported report schema version " + std::to_string(r.schema_version));
  r.predictor = j.at("predictor").get<std::string>();
  r.sequences = j.at("sequences").get<std::size_t>();
  r.config = j.value("config", json::object());
  r.horizons.clear();
  for (const auto& e : j.at("horizons")) {
    HorizonStats h;
    h.horizon = e.at("horizon").get<int>();
    h.count = e.at("count").get<std::size_t>();
    h.excluded = e.at("excluded").get<std::size_t>();
    h.mean_l2 = e.at("mean_l2").get<double>();
    h.p25 = e.at("p25").get<double>();
    h.median = e.at("median").get<double>();
    h.p75 = e.at("p75").get<double>();
    h.zero_mass = e.at("zero_mass").get<std::size_t>();
    if (!e.at("ln_perplexity").is_null()) h.ln_perplexity = parse_number_or_inf(e.at("ln_perplexity"));
    r.horizons.push_back(h);
  }
  r.entropy.clear();
  for (const auto& e : j.at("entropy")) {
    EntropyStats s;
    s.t = e.at("t").get<int>();
    s.count = e.at("count").get<std::size_t>();
    s.mean = e.at("mean").get<double>();
    s.p25 = e.at("p25").get<double>();
    s.median = e.at("median").get<double>();
    s.p75 = e.at("p75").get<double>();
    r.entropy.push_back(s);
  }
}

std::string MetricsReport::to_csv() const {
  std::ostringstream os;
  os << "predictor,horizon,count,excluded,mean_l2,p25,median,p75,ln_perplexity,zero_mass\n";
  for (const auto& h : horizons) {
    os << predictor << ',' << h.horizon << ',' << h.count << ',' << h.excluded << ',' << fmt(h.mean_l2) << ','
       << fmt(h.p25) << ',' << fmt(h.median) << ',' << fmt(h.p75) << ','
       << (h.ln_perplexity ? fmt(*h.ln_perplexity) : std::string()) << ',' << h.zero_mass << '\n';
  }
  return os.str();
}

void write_report(const std::filesystem::path& path, const MetricsReport& r) {
  const auto ext = path.extension().string();
  std::string text;
  if (ext == ".json") {
    text = json(r).dump(2) + "\n";
  } else if (ext == ".csv") {
    text = r.to_csv();
  } else {
    throw InvalidSpec("report path must end in .json or .csv: " + path.string());
  }
  write_file(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

MetricsReport read_report(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return json::parse(bytes.begin(), bytes.end()).get<MetricsReport>();
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------------------------
// Aggregation

MetricsAccumulator::MetricsAccumulator(std::vector<int> horizons, bool expected_value)
    : horizons_(std::move(horizons)), expected_value_(expected_value) {
  if (horizons_.empty()) throw InvalidSpec("no horizons requested");
  for (int h : horizons_) {
    if (h < 1) throw InvalidSpec("horizons must be >= 1");
    max_horizon_ = std::max(max_horizon_, h);
  }
  l2_.resize(horizons_.size());
  excluded_.assign(horizons_.size(), 0);
  nll_sum_.assign(horizons_.size(), 0.0);
  zero_mass_.assign(horizons_.size(), 0);
}

void MetricsAccumulator::add_skipped(const std::vector<Vec2>&) {
  ++sequences_;
  for (auto& e : excluded_) ++e;
}

void MetricsAccumulator::add(const std::vector<Vec2>& gt, const std::vector<Vec2>& pred) {
  ++sequences_;
  for (std::size_t i = 0; i < horizons_.size(); ++i) {
    const auto t = static_cast<std::size_t>(horizons_[i] - 1);
    if (gt.size() <= t) {
      ++excluded_[i];
      continue;
    }
    if (pred.size() <= t) throw ShapeMismatch("prediction shorter than horizon " + std::to_string(horizons_[i]));
    l2_[i].push_back((pred[t] - gt[t]).norm());
  }
}

void MetricsAccumulator::add(const std::vector<Vec2>& gt, const PredictionSet& pred) {
  if (pred.kind == HeadKind::kPoint || pred.kind == HeadKind::kSimNet) {
    add(gt, pred.points);
    return;
  }
  probabilistic_ = true;
  ++sequences_;
  for (std::size_t i = 0; i < horizons_.size(); ++i) {
    const auto t = static_cast<std::size_t>(horizons_[i] - 1);
    if (gt.size() <= t) {
      ++excluded_[i];
      continue;
    }
    if (pred.size() <= t) throw ShapeMismatch("prediction shorter than horizon " + std::to_string(horizons_[i]));
    l2_[i].push_back((pred.point(t, expected_value_) - gt[t]).norm());
    try {
      nll_sum_[i] += pred.kind == HeadKind::kGauss ? gaussian_nll(pred.gauss[t], gt[t]) : heatmap_nll(pred.maps[t], gt[t]);
    } catch (const ZeroMass&) {
      ++zero_mass_[i];
    }
  }
  const std::size_t steps = std::min(pred.size(), static_cast<std::size_t>(max_horizon_));
  if (entropy_.size() < steps) entropy_.resize(steps);
  for (std::size_t t = 0; t < steps; ++t)
    entropy_[t].push_back(pred.kind == HeadKind::kGauss ? entropy(pred.gauss[t]) : entropy(pred.maps[t]));
}

MetricsReport MetricsAccumulator::report(const std::string& predictor, const json& config) const {
  MetricsReport r;
  r.predictor = predictor;
  r.sequences = sequences_;
  r.config = config;
  for (std::size_t i = 0; i < horizons_.size(); ++i) {
    if (l2_[i].empty())
      throw NoSequences("no sequence reaches horizon " + std::to_string(horizons_[i]) + " (" +
                        std::to_string(excluded_[i]) + " excluded)");
    HorizonStats h;
    h.horizon = horizons_[i];
    h.count = l2_[i].size();
    h.excluded = excluded_[i];
    double s = 0;
    for (double v : l2_[i]) s += v;
    h.mean_l2 = s / static_cast<double>(h.count);
    h.p25 = percentile_nearest_rank(l2_[i], 25);
    h.median = percentile_nearest_rank(l2_[i], 50);
    h.p75 = percentile_nearest_rank(l2_[i], 75);
    if (probabilistic_) {
      h.zero_mass = zero_mass_[i];
      h.ln_perplexity = zero_mass_[i] ? std::numeric_limits<double>::infinity()
                                      : nll_sum_[i] / static_cast<double>(h.count);
    }
    r.horizons.push_back(h);
  }
  for (std::size_t t = 0; t < entropy_.size(); ++t) {
    EntropyStats e;
    e.t = static_cast<int>(t);
    e.count = entropy_[t].size();
    double s = 0;
    for (double v : entropy_[t]) s += v;
    e.mean = s / static_cast<double>(e.count);
    e.p25 = percentile_nearest_rank(entropy_[t], 25);
    e.median = percentile_nearest_rank(entropy_[t], 50);
    e.p75 = percentile_nearest_rank(entropy_[t], 75);
    r.entropy.push_back(e);
  }
  return r;
}

std::vector<HorizonStats> l2_at(const std::vector<std::vector<Vec2>>& preds, const std::vector<std::vector<Vec2>>& gts,
                                const std::vector<int>& horizons) {
  if (preds.size() != gts.size()) throw ShapeMismatch("prediction and ground-truth counts differ");
  MetricsAccumulator acc(horizons);
  for (std::size_t i = 0; i < preds.size(); ++i) acc.add(gts[i], preds[i]);
  return acc.report("l2").horizons;
}

double ln_perplexity(const std::vector<PredictionSet>& preds, const std::vector<std::vector<Vec2>>& gts, int horizon) {
  if (preds.size() != gts.size()) throw ShapeMismatch("prediction and ground-truth counts differ");
  MetricsAccumulator acc({horizon});
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].kind != HeadKind::kGauss && preds[i].kind != HeadKind::kHeatmap)
      throw VariantMismatch("perplexity needs probabilistic predictions");
    acc.add(gts[i], preds[i]);
  }
  return *acc.report("perplexity").horizons.front().ln_perplexity;
}

// ---------------------------------------------------------------------------------------------
// Dataset evaluation

namespace {

json eval_config(const EvalOptions& opt, const DatasetManifest& m) {
  return json{{"horizons", opt.horizons},
              {"split", split_name(opt.split)},
              {"scenario", scenario_name(m.scenario.scenario)},
              {"dataset_seed", m.scenario.seed},
              {"image_size", m.protocol.image_size},
              {"expected_value", opt.expected_value}};
}

template <typename F>
void for_each_batch(const std::filesystem::path& dir, const EvalOptions& opt, std::size_t frame_limit, F&& f) {
  ReadOptions ro;
  ro.frame_limit = frame_limit;
  DatasetReader reader(dir, ro, opt.split);
  std::vector<SequenceRecord> batch;
  const auto n = static_cast<std::size_t>(std::max(1, opt.batch));
  while (auto rec = reader.next()) {
    batch.push_back(std::move(*rec));
    if (batch.size() == n) {
      f(batch);
      batch.clear();
    }
  }
  if (!batch.empty()) f(batch);
}

}  // namespace

MetricsReport evaluate_model(const LoadedModel& lm, const std::filesystem::path& data_dir, const EvalOptions& opt) {
  const ModelConfig& cfg = lm.model.config();
  const DatasetManifest manifest = read_manifest(data_dir);
  if (manifest.protocol.image_size != cfg.image_size)
    throw ShapeMismatch("model expects " + std::to_string(cfg.image_size) + " px frames, dataset has " +
                        std::to_string(manifest.protocol.image_size));
  MetricsAccumulator acc(opt.horizons, opt.expected_value);
  const int horizon = std::max(acc.max_horizon(), cfg.t0);
  const auto ctx = SimulationContext::from_manifest(manifest);
  for_each_batch(data_dir, opt, static_cast<std::size_t>(cfg.t0), [&](const std::vector<SequenceRecord>& batch) {
    std::vector<std::span<const Frame>> frames;
    for (const auto& r : batch) frames.emplace_back(r.frames);
    if (cfg.variant == Variant::kSimNet) {
      if (!lm.simnet) throw FormatError("SimNet checkpoint lacks target statistics");
      const auto params = simnet_regress(lm.model, *lm.simnet, frames, opt.batch);
      for (std::size_t i = 0; i < batch.size(); ++i) acc.add(batch[i].pixels_gt, simnet_predict(params[i], horizon, ctx));
    } else {
      const auto preds = forward_predict(lm.model, frames, horizon, opt.batch);
      for (std::size_t i = 0; i < batch.size(); ++i) acc.add(batch[i].pixels_gt, preds[i]);
    }
  });
  json config = eval_config(opt, manifest);
  config["model"] = lm.metadata.value("model", json::object());
  config["train"] = lm.metadata.value("train", json::object());
  return acc.report(variant_name(cfg.variant), config);
}

MetricsReport evaluate_baseline(BaselineMethod method, const std::filesystem::path& data_dir, const EvalOptions& opt) {
  const DatasetManifest manifest = read_manifest(data_dir);
  MetricsAccumulator acc(opt.horizons);
  for_each_batch(data_dir, opt, kBaselineFrames, [&](const std::vector<SequenceRecord>& batch) {
    for (const auto& r : batch) {
      if (r.frames.size() < static_cast<std::size_t>(kBaselineFrames)) {
        acc.add_skipped(r.pixels_gt);
        continue;
      }
      acc.add(r.pixels_gt, baseline_predict(r, method, acc.max_horizon()));
    }
  });
  return acc.report(baseline_name(method), eval_config(opt, manifest));
}

std::string GeneralizationTable::to_csv() const {
  std::ostringstream os;
  os << "row,train_horizon";
  for (int h : eval_horizons) os << ",l2_at_" << h;
  os << '\n';
  for (std::size_t i = 0; i < train_horizons.size(); ++i) {
    os << "model," << train_horizons[i];
    for (double v : l2[i]) os << ',' << fmt(v);
    os << '\n';
  }
  for (std::size_t i = 0; i < baseline_names.size(); ++i) {
    os << baseline_names[i] << ",";
    for (double v : baseline_l2[i]) os << ',' << fmt(v);
    os << '\n';
  }
  return os.str();
}

GeneralizationTable generalization_table(const std::map<int, std::filesystem::path>& checkpoints,
                                         const std::filesystem::path& data_dir, const EvalOptions& opt,
                                         const std::vector<BaselineMethod>& baselines) {
  for (const auto& [h, path] : checkpoints)
    if (!std::filesystem::exists(path))
      throw MissingCheckpoint("no checkpoint for training horizon " + std::to_string(h) + ": " + path.string());
  GeneralizationTable t;
  t.eval_horizons = opt.horizons;
  for (const auto& [h, path] : checkpoints) {
    t.train_horizons.push_back(h);
    const auto report = evaluate_model(load_model(path), data_dir, opt);
    std::vector<double> row;
    for (int e : opt.horizons) row.push_back(report.at(e).mean_l2);
    t.l2.push_back(std::move(row));
  }
  for (BaselineMethod m : baselines) {
    t.baseline_names.emplace_back(baseline_name(m));
    const auto report = evaluate_baseline(m, data_dir, opt);
    std::vector<double> row;
    for (int e : opt.horizons) row.push_back(report.at(e).mean_l2);
    t.baseline_l2.push_back(std::move(row));
  }
  return t;
}

}  // namespace mnet
