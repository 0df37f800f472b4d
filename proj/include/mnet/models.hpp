#pragma once

// Recurrent trajectory predictors: a convolutional feature extractor maps the first T0 frames to
// an internal state S_0, a propagation network advances it (S_{t+1} = F(S_t)), and estimation
// heads decode states into points, Gaussians or probability maps.
//
// Output assembly for a horizon T: entries 0..T0-1 come from the observed-frame head L'(S_0),
// entries T0..T-1 from L(S_1) .. L(S_{T-T0}).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "mnet/datagen.hpp"
#include "mnet/render.hpp"
#include "mnet/tensor.hpp"

namespace mnet {

enum class Variant : std::uint8_t {
  kMN1 = 1,     // vector state, LSTM propagation, point head
  kMN2 = 2,     // tensor state, conv propagation, point head
  kMN3 = 3,     // tensor state, conv propagation, Gaussian head
  kMN4 = 4,     // tensor state, conv propagation, heatmap head
  kSimNet = 5,  // vector features regressing physical parameters
};

const char* variant_name(Variant v);
Variant parse_variant(const std::string& name);

enum class HeadKind : std::uint8_t { kPoint, kGauss, kHeatmap, kSimNet };
HeadKind head_kind(Variant v);

struct ModelConfig {
  Variant variant = Variant::kMN2;
  int t0 = 4;
  int t_train = 20;
  int image_size = 128;
  /// Channels C of the 8x8 tensor state and of the last extractor layer.
  int channels = 64;
  int state_size = 8;
  /// Width of the vector state (MN1, SimNet).
  int vector_units = 128;
  /// Channels of the first extractor layer; doubled per layer until the last, which has C.
  int extractor_base = 16;
  /// Heatmap sampling step in pixels.
  double delta = 1.0;
  double lambda_scale = 99.99;
  double lambda_floor = 0.01;
  double init_gain = 1.0;

  void validate() const;
  bool tensor_state() const;
  int extractor_layers() const;
  int simnet_outputs() const { return 3 + 2 * t0 + 2; }
  /// Heatmap side length in cells.
  int map_size() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Σ = R(-θ) diag(λ1, λ2) R(θ) with R(θ) = [[cos θ, -sin θ], [sin θ, cos θ]].
Eigen::Matrix2d gaussian_covariance(double lambda1, double lambda2, double theta);

struct GaussPrediction {
  Vec2 mu = Vec2::Zero();
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double theta = 0.0;

  Eigen::Matrix2d sigma() const { return gaussian_covariance(lambda1, lambda2, theta); }
  double det() const { return lambda1 * lambda2; }
};

struct HeatmapPrediction {
  int h = 0;
  int w = 0;
  double delta = 1.0;
  /// Cell probabilities, row-major; computed from the logits in double precision.
  std::vector<double> p;
  std::vector<float> logits;

  /// Center of the most probable cell in pixels (ties: centroid of the tied cells).
  Vec2 argmax_center() const;
  Vec2 expected_position() const;
  /// Cell containing a pixel position (rounded, clamped to the map); returns false if clamped.
  bool cell_of(const Vec2& px, int& row, int& col) const;
};

HeatmapPrediction heatmap_from_logits(std::span<const float> logits, int h, int w, double delta);

struct PredictionSet {
  HeadKind kind = HeadKind::kPoint;
  std::vector<Vec2> points;
  std::vector<GaussPrediction> gauss;
  std::vector<HeatmapPrediction> maps;

  std::size_t size() const;
  /// Point estimate at step t: the point, μ, or the map's argmax (or mean) cell center.
  Vec2 point(std::size_t t, bool expected_value = false) const;
};

/// Network inputs for a batch: first T0 frames of each item stacked along channels, scaled to [0, 1].
template <typename T>
std::vector<T> frames_tensor(const std::vector<std::span<const Frame>>& items, const ModelConfig& cfg);

template <typename T>
class MechaNet {
 public:
  /// Binds parameters to one tape, as differentiable leaves or as constants.
  class Graph {
   public:
    /// Parameters become leaves whose gradients accumulate into `params`.
    Graph(ad::Tape<T>& tape, ad::ParameterSet<T>& params);
    /// Parameters become constants (inference).
    Graph(ad::Tape<T>& tape, const ad::ParameterSet<T>& params);
    ad::Tape<T>& tape() const { return tape_; }
    ad::Var<T> operator()(const std::string& name) const;

   private:
    ad::Tape<T>& tape_;
    std::unordered_map<std::string, ad::Var<T>> vars_;
  };

  struct State {
    ad::Var<T> s;
    ad::Var<T> c;  // LSTM cell; unused for tensor states
  };

  MechaNet(const ModelConfig& cfg, std::uint64_t seed);
  /// Adopts existing parameters; throws InvalidSpec if names or shapes disagree with cfg.
  MechaNet(const ModelConfig& cfg, ad::ParameterSet<T> params);

  const ModelConfig& config() const { return cfg_; }
  ad::ParameterSet<T>& params() { return params_; }
  const ad::ParameterSet<T>& params() const { return params_; }

  /// frames: [N, H, W, 3*T0]. Tensor states are [N, 8, 8, C]; vector states are [N, U].
  State feature_extract(const Graph& g, const ad::Var<T>& frames) const;
  State propagate(const Graph& g, const State& state) const;
  /// L: decoded [N, 2] points, [N, 5] Gaussians (mu_x, mu_y, lambda1, lambda2, theta), or [N, H*W] logits.
  ad::Var<T> head(const Graph& g, const State& state) const;
  /// L': one output of the same layout per observed frame, concatenated; SimNet: [N, 13].
  ad::Var<T> head_prime(const Graph& g, const State& s0) const;
  /// Decoded per-step outputs for steps 0..T-1.
  std::vector<ad::Var<T>> forward(const Graph& g, const ad::Var<T>& frames, int horizon) const;

 private:
  void build(std::uint64_t seed);
  ad::Var<T> deconv_stack(const Graph& g, const std::string& prefix, const ad::Var<T>& s) const;
  ad::Var<T> decode_point(const ad::Var<T>& raw) const;
  ad::Var<T> decode_gauss(const ad::Var<T>& raw) const;

  ModelConfig cfg_;
  ad::ParameterSet<T> params_;
};

/// Supervision for a batch over T steps: positions y[t][n] (px) and per-(t, n) loss weights.
struct BatchTargets {
  int n = 0;
  int steps = 0;
  std::vector<double> y;         // [steps][n][2]
  std::vector<double> weight;    // 1 / (N * T_n) on valid steps, else 0
  std::vector<double> det_weight;  // 1 / N on valid steps, else 0

  static BatchTargets from_records(const std::vector<const SequenceRecord*>& items, int steps);
};

/// Σ_t Σ_n w[t,n] ‖ŷ - y‖².
template <typename T>
ad::Var<T> loss_l2(ad::Tape<T>& tape, const std::vector<ad::Var<T>>& preds, const BatchTargets& tg);
/// Σ_t Σ_n w[t,n] (-log N(y; μ, Σ)) + λ_reg Σ_t Σ_n det_w[t,n] det Σ.
template <typename T>
ad::Var<T> loss_gaussian(ad::Tape<T>& tape, const std::vector<ad::Var<T>>& preds, const BatchTargets& tg,
                         double lambda_reg);
/// 2 log δ - Σ_t Σ_n w[t,n] log p(t)[round(y / δ)]; `clamped` counts targets outside the map.
template <typename T>
ad::Var<T> loss_heatmap(ad::Tape<T>& tape, const std::vector<ad::Var<T>>& logits, const BatchTargets& tg,
                        int map_h, int map_w, double delta, std::size_t* clamped = nullptr);

/// Decodes the per-step outputs of a batch into one PredictionSet per item.
template <typename T>
std::vector<PredictionSet> decode_outputs(const std::vector<ad::Var<T>>& outs, const ModelConfig& cfg);

/// Predictions for steps 0..T-1 of each item; pure function of (parameters, frames, T).
template <typename T>
std::vector<PredictionSet> forward_predict(const MechaNet<T>& model,
                                           const std::vector<std::span<const Frame>>& items, int horizon,
                                           int batch = 16);
template <typename T>
PredictionSet forward_predict(const MechaNet<T>& model, std::span<const Frame> frames, int horizon);

// ---------------------------------------------------------------------------------------------
// SimNet supervision

/// Per-output standardization of the SimNet target vector.
struct SimNetStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

/// (θx, θy, ρ, T0 positions, final velocity) of a record; ρ is the mean effective coefficient
/// for patch-grid friction.
std::vector<double> simnet_target(const SequenceRecord& rec, int t0);
SimNetStats simnet_stats(const std::vector<SequenceRecord>& train, int t0);

// ---------------------------------------------------------------------------------------------
// Training

struct TrainConfig {
  int batch = 50;
  int patience = 40;
  int epochs_max = 1000;
  std::uint64_t seed = 0;
  double lr = 1e-4;
  double decay = 0.9;
  double eps = 1e-8;
  double lambda_reg_initial = 10.0;
  double det_threshold = 100.0;
  /// MN4 validation point estimate: map mean instead of argmax cell center.
  bool expected_value_decoding = false;
  /// Called after every epoch (progress reporting); may be empty.
  std::function<void(const struct EpochLog&)> on_epoch;
};

void to_json(nlohmann::json& j, const TrainConfig& c);

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  /// Mean squared validation error in px² over the first T_train steps (SimNet: standardized loss).
  double val_l2 = 0.0;
  double lambda_reg = 0.0;
  /// Epoch mean of det Σ over all training predictions (MN3 only, else 0).
  double mean_det = 0.0;
  double wall_time = 0.0;
};

struct TrainResult {
  ModelConfig model;
  ad::ParameterSet<float> best;
  std::vector<EpochLog> log;
  int best_epoch = 0;
  int stop_epoch = 0;
  bool early_stopped = false;
  /// First epoch trained with λ_reg = 0 (MN3).
  std::optional<int> lambda_transition_epoch;
  std::optional<SimNetStats> simnet;
  nlohmann::json train_config;
  nlohmann::json metadata() const;
};

TrainResult train(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                  const std::vector<SequenceRecord>& train_set, const std::vector<SequenceRecord>& val_set);

void write_training_log(const std::filesystem::path& path, const std::vector<EpochLog>& log);

struct LoadedModel {
  MechaNet<float> model;
  nlohmann::json metadata;
  std::optional<SimNetStats> simnet;
};

void save_model(const std::filesystem::path& path, const TrainResult& result);
LoadedModel load_model(const std::filesystem::path& path);

}  // namespace mnet
