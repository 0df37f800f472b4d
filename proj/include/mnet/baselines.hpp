#pragma once

// Non-learned and physics-in-the-loop predictors: least-squares polynomial extrapolation of
// argmax positions, and SimNet, which regresses plane angles, friction, positions and velocity
// from the observed frames and re-runs the simulator.

#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mnet/datagen.hpp"
#include "mnet/models.hpp"
#include "mnet/physics.hpp"
#include "mnet/render.hpp"

namespace mnet {

inline constexpr int kBaselineFrames = 10;

/// argmax_red of the first `count` frames; NoObject carries the failing frame index.
std::vector<Vec2> estimate_positions(std::span<const Frame> frames, int count = kBaselineFrames);

struct PolyFit {
  int degree = 1;
  /// Coefficients c0 + c1 t + c2 t² per image axis, lowest order first.
  Eigen::VectorXd cx;
  Eigen::VectorXd cy;

  Vec2 at(double t) const;
};

/// Per-axis ordinary least squares on frame indices 0..n-1.
PolyFit polyfit(std::span<const Vec2> points, int degree);
/// Fit to `points` (frames 0..n-1), evaluated at frames 0..horizon-1.
std::vector<Vec2> polyfit_extrapolate(std::span<const Vec2> points, int degree, int horizon);

enum class BaselineMethod { kLinear, kQuadratic };
const char* baseline_name(BaselineMethod m);
BaselineMethod parse_baseline(const std::string& name);
int baseline_degree(BaselineMethod m);

/// Linear or quadratic extrapolation from the argmax positions of the first ten frames.
std::vector<Vec2> baseline_predict(const SequenceRecord& rec, BaselineMethod method, int horizon);

struct SimNetParams {
  double theta_x = 0.0;
  double theta_y = 0.0;
  double rho = 0.0;
  std::vector<Vec2> positions;
  /// Pixels per kept frame at frame T0-1.
  Vec2 velocity = Vec2::Zero();

  static SimNetParams ground_truth(const SequenceRecord& rec, int t0);
};

/// Camera, recording cadence and gravity the re-simulation must share with the dataset.
struct SimulationContext {
  CameraModel camera;
  Protocol protocol;
  double gravity = kDefaultGravity;

  static SimulationContext from_manifest(const DatasetManifest& m);
};

/// Destandardized SimNet outputs for a batch; ρ is clamped at 0.
std::vector<SimNetParams> simnet_regress(const MechaNet<float>& model, const SimNetStats& stats,
                                         const std::vector<std::span<const Frame>>& items, int batch = 16);
SimNetParams simnet_regress(const MechaNet<float>& model, const SimNetStats& stats, std::span<const Frame> frames);

/// Frames 0..T0-1 are the regressed positions; later frames integrate the simulator from the
/// frame-T0-1 state with homogeneous friction ρ, or with `field` when given.
std::vector<Vec2> simnet_predict(const SimNetParams& params, int horizon, const SimulationContext& ctx,
                                 const FrictionField* field = nullptr);

}  // namespace mnet
