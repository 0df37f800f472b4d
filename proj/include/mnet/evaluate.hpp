#pragma once

// Trajectory metrics: single-frame L2 error at a horizon with nearest-rank percentile bands,
// natural-log perplexity of probabilistic predictions, and the entropy of each predicted
// distribution over time. Horizon h denotes the h-th predicted frame (output index h - 1).

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mnet/baselines.hpp"
#include "mnet/datagen.hpp"
#include "mnet/models.hpp"

namespace mnet {

/// Nearest-rank percentile (p in [0, 100]) of unsorted values; NoSequences if empty.
double percentile_nearest_rank(std::vector<double> values, double p);

double gaussian_nll(const GaussPrediction& g, const Vec2& y);
/// -ln p[round(y / δ)] + 2 ln δ; ZeroMass if that cell has probability exactly 0.
double heatmap_nll(const HeatmapPrediction& m, const Vec2& y);

/// -Σ p ln p with 0 ln 0 = 0.
double entropy(const HeatmapPrediction& m);
/// ln(2πe) + ½ ln det Σ.
double entropy(const GaussPrediction& g);

struct HorizonStats {
  int horizon = 0;
  std::size_t count = 0;
  std::size_t excluded = 0;
  double mean_l2 = 0.0;
  double p25 = 0.0;
  double median = 0.0;
  double p75 = 0.0;
  /// Mean -ln p(y) over counted sequences (probabilistic models); +inf if any cell had zero mass.
  std::optional<double> ln_perplexity;
  std::size_t zero_mass = 0;

  bool operator==(const HorizonStats&) const = default;
};

/// Per-timestep entropy distribution across sequences.
struct EntropyStats {
  int t = 0;
  std::size_t count = 0;
  double mean = 0.0;
  double p25 = 0.0;
  double median = 0.0;
  double p75 = 0.0;

  bool operator==(const EntropyStats&) const = default;
};

struct MetricsReport {
  static constexpr int kSchemaVersion = 1;
  int schema_version = kSchemaVersion;
  std::string predictor;
  std::size_t sequences = 0;
  std::vector<HorizonStats> horizons;
  std::vector<EntropyStats> entropy;
  nlohmann::json config = nlohmann::json::object();

  bool operator==(const MetricsReport&) const = default;

  const HorizonStats& at(int horizon) const;
  std::string to_csv() const;
};

void to_json(nlohmann::json& j, const MetricsReport& r);
void from_json(const nlohmann::json& j, MetricsReport& r);

/// Writes JSON or CSV by the path's extension (.json / .csv).
void write_report(const std::filesystem::path& path, const MetricsReport& r);
MetricsReport read_report(const std::filesystem::path& path);

/// Streaming aggregation: keeps only the per-horizon scalars of each added sequence.
class MetricsAccumulator {
 public:
  explicit MetricsAccumulator(std::vector<int> horizons, bool expected_value = false);

  void add(const std::vector<Vec2>& gt, const PredictionSet& pred);
  void add(const std::vector<Vec2>& gt, const std::vector<Vec2>& pred);
  /// A sequence that produced no prediction (e.g. too short for a baseline's ten frames).
  void add_skipped(const std::vector<Vec2>& gt);

  MetricsReport report(const std::string& predictor, const nlohmann::json& config = nlohmann::json::object()) const;
  int max_horizon() const { return max_horizon_; }

 private:
  void add_point(std::size_t h, const Vec2& p, const Vec2& y);

  std::vector<int> horizons_;
  int max_horizon_ = 0;
  bool expected_value_ = false;
  bool probabilistic_ = false;
  std::size_t sequences_ = 0;
  std::vector<std::vector<double>> l2_;
  std::vector<std::size_t> excluded_;
  std::vector<double> nll_sum_;
  std::vector<std::size_t> zero_mass_;
  std::vector<std::vector<double>> entropy_;
};

/// Per-horizon L2 statistics of point predictions; sequences shorter than a horizon are
/// excluded from it. NoSequences if every sequence is excluded at some horizon.
std::vector<HorizonStats> l2_at(const std::vector<std::vector<Vec2>>& preds, const std::vector<std::vector<Vec2>>& gts,
                                const std::vector<int>& horizons);
/// Mean -ln p(y) at one horizon over sequences long enough for it.
double ln_perplexity(const std::vector<PredictionSet>& preds, const std::vector<std::vector<Vec2>>& gts, int horizon);

struct EvalOptions {
  std::vector<int> horizons{20, 40};
  Split split = Split::kTest;
  int batch = 16;
  bool expected_value = false;
};

MetricsReport evaluate_model(const LoadedModel& model, const std::filesystem::path& data_dir, const EvalOptions& opt);
MetricsReport evaluate_baseline(BaselineMethod method, const std::filesystem::path& data_dir, const EvalOptions& opt);

struct GeneralizationTable {
  std::vector<int> train_horizons;
  std::vector<int> eval_horizons;
  /// l2[i][j]: mean L2 at eval_horizons[j] of the model trained with train_horizons[i].
  std::vector<std::vector<double>> l2;
  std::vector<std::string> baseline_names;
  std::vector<std::vector<double>> baseline_l2;

  std::string to_csv() const;
};

/// Mean L2 matrix over trained checkpoints (keyed by training horizon) plus baseline rows.
GeneralizationTable generalization_table(const std::map<int, std::filesystem::path>& checkpoints,
                                         const std::filesystem::path& data_dir, const EvalOptions& opt,
                                         const std::vector<BaselineMethod>& baselines = {BaselineMethod::kLinear,
                                                                                         BaselineMethod::kQuadratic});

}  // namespace mnet
