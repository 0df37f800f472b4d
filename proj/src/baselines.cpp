#include "mnet/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/QR>

#include "mnet/error.hpp"

namespace mnet {

std::vector<Vec2> estimate_positions(std::span<const Frame> frames, int count) {
  if (count < 1) throw InvalidSpec("need at least one frame to estimate positions");
  if (frames.size() < static_cast<std::size_t>(count))
    throw ShapeMismatch("need " + std::to_string(count) + " frames, got " + std::to_string(frames.size()));
  std::vector<Vec2> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int t = 0; t < count; ++t) {
    try {
      out.push_back(argmax_red(frames[static_cast<std::size_t>(t)]));
    } catch (const NoObject&) {
      throw NoObject(t);
    }
  }
  return out;
}

Vec2 PolyFit::at(double t) const {
  double x = 0, y = 0, p = 1;
  for (int k = 0; k <= degree; ++k) {
    x += cx[k] * p;
    y += cy[k] * p;
    p *= t;
  }
  return {x, y};
}

PolyFit polyfit(std::span<const Vec2> points, int degree) {
  if (degree != 1 && degree != 2) throw InvalidSpec("polynomial degree must be 1 or 2");
  const int n = static_cast<int>(points.size());
  if (n <= degree) throw InvalidSpec("need more points than the polynomial degree");
  Eigen::MatrixXd a(n, degree + 1);
  Eigen::MatrixXd b(n, 2);
  for (int t = 0; t < n; ++t) {
    const Vec2& q = points[static_cast<std::size_t>(t)];
    if (!q.allFinite()) throw InvalidSpec("non-finite point at frame " + std::to_string(t));
    double p = 1;
    for (int k = 0; k <= degree; ++k, p *= t) a(t, k) = p;
    b.row(t) = q.transpose();
  }
  const Eigen::MatrixXd c = a.colPivHouseholderQr().solve(b);
  PolyFit fit;
  fit.degree = degree;
  fit.cx = c.col(0);
  fit.cy = c.col(1);
  return fit;
}

std::vector<Vec2> polyfit_extrapolate(std::span<const Vec2> points, int degree, int horizon) {
  const PolyFit fit = polyfit(points, degree);
  std::vector<Vec2> out;
  out.reserve(static_cast<std::size_t>(std::max(0, horizon)));
  for (int t = 0; t < horizon; ++t) out.push_back(fit.at(t));
  return out;
}

const char* baseline_name(BaselineMethod m) { return m == BaselineMethod::kLinear ? "linear" : "quadratic"; }

BaselineMethod parse_baseline(const std::string& name) {
  if (name == "linear") return BaselineMethod::kLinear;
  if (name == "quadratic") return BaselineMethod::kQuadratic;
  throw InvalidSpec("unknown baseline method '" + name + "'");
}

int baseline_degree(BaselineMethod m) { return m == BaselineMethod::kLinear ? 1 : 2; }

std::vector<Vec2> baseline_predict(const SequenceRecord& rec, BaselineMethod method, int horizon) {
  const auto pts = estimate_positions(rec.frames, kBaselineFrames);
  return polyfit_extrapolate(pts, baseline_degree(method), horizon);
}

SimNetParams SimNetParams::ground_truth(const SequenceRecord& rec, int t0) {
  const auto y = simnet_target(rec, t0);
  SimNetParams p;
  p.theta_x = y[0];
  p.theta_y = y[1];
  p.rho = y[2];
  for (int t = 0; t < t0; ++t) p.positions.emplace_back(y[3 + 2 * t], y[4 + 2 * t]);
  p.velocity = Vec2(y[3 + 2 * t0], y[4 + 2 * t0]);
  return p;
}

SimulationContext SimulationContext::from_manifest(const DatasetManifest& m) {
  return {m.camera, m.protocol, m.scenario.gravity};
}

std::vector<SimNetParams> simnet_regress(const MechaNet<float>& model, const SimNetStats& stats,
                                         const std::vector<std::span<const Frame>>& items, int batch) {
  const ModelConfig& cfg = model.config();
  if (cfg.variant != Variant::kSimNet) throw VariantMismatch("simnet_regress needs a SimNet model");
  const std::size_t k = static_cast<std::size_t>(cfg.simnet_outputs());
  if (stats.mean.size() != k || stats.stddev.size() != k) throw ShapeMismatch("SimNet statistics size");
  std::vector<SimNetParams> out;
  out.reserve(items.size());
  const std::size_t step = static_cast<std::size_t>(std::max(1, batch));
  for (std::size_t b = 0; b < items.size(); b += step) {
    const std::vector<std::span<const Frame>> chunk(
        items.begin() + static_cast<std::ptrdiff_t>(b),
        items.begin() + static_cast<std::ptrdiff_t>(std::min(items.size(), b + step)));
    ad::Tape<float> tape;
    const MechaNet<float>::Graph g(tape, model.params());
    const int s = cfg.image_size;
    const auto x = tape.constant({static_cast<int>(chunk.size()), s, s, 3 * cfg.t0}, frames_tensor<float>(chunk, cfg));
    const auto raw = model.head_prime(g, model.feature_extract(g, x)).value();
    for (std::size_t n = 0; n < chunk.size(); ++n) {
      std::vector<double> y(k);
      for (std::size_t j = 0; j < k; ++j) y[j] = stats.mean[j] + stats.stddev[j] * raw[n * k + j];
      SimNetParams p;
      p.theta_x = y[0];
      p.theta_y = y[1];
      p.rho = std::max(0.0, y[2]);
      for (int t = 0; t < cfg.t0; ++t)
        p.positions.emplace_back(y[3 + 2 * static_cast<std::size_t>(t)], y[4 + 2 * static_cast<std::size_t>(t)]);
      p.velocity = Vec2(y[3 + 2 * static_cast<std::size_t>(cfg.t0)], y[4 + 2 * static_cast<std::size_t>(cfg.t0)]);
      out.push_back(std::move(p));
    }
  }
  return out;
}

SimNetParams simnet_regress(const MechaNet<float>& model, const SimNetStats& stats, std::span<const Frame> frames) {
  return simnet_regress(model, stats, std::vector<std::span<const Frame>>{frames}, 1).front();
}

std::vector<Vec2> simnet_predict(const SimNetParams& params, int horizon, const SimulationContext& ctx,
                                 const FrictionField* field) {
  if (params.positions.empty()) throw InvalidSpec("SimNet parameters carry no observed positions");
  if (!std::isfinite(params.theta_x) || !std::isfinite(params.theta_y) || !std::isfinite(params.rho) ||
      !params.velocity.allFinite())
    throw InvalidSpec("non-finite SimNet parameters");
  for (const auto& q : params.positions)
    if (!q.allFinite()) throw InvalidSpec("non-finite SimNet position");
  if (std::abs(params.theta_x) >= std::numbers::pi / 2 || std::abs(params.theta_y) >= std::numbers::pi / 2)
    throw InvalidSpec("plane angles must lie in (-pi/2, pi/2)");

  const PlaneSpec plane = PlaneSpec::from_angles(params.theta_x, params.theta_y);
  const FrictionField homogeneous = HomogeneousFriction{std::max(0.0, params.rho)};
  const FrictionField& mu = field ? *field : homogeneous;
  const auto t0 = params.positions.size();

  std::vector<Vec2> out;
  out.reserve(static_cast<std::size_t>(std::max(0, horizon)));
  for (std::size_t t = 0; t < t0 && out.size() < static_cast<std::size_t>(horizon); ++t)
    out.push_back(params.positions[t]);
  if (out.size() == static_cast<std::size_t>(std::max(0, horizon))) return out;

  BodyState s;
  const Vec2 xy = ctx.camera.unproject(params.positions.back());
  s.q = plane.point_at(xy.x(), xy.y());
  const Vec2 vxy = params.velocity / (ctx.camera.alpha * ctx.protocol.kept_frame_dt());
  const Vec3& n = plane.normal;
  s.v = Vec3(vxy.x(), vxy.y(), -(n.x() * vxy.x() + n.y() * vxy.y()) / n.z());
  s.at_rest = s.v.norm() <= kRestSpeed && static_equilibrium(plane, friction_at(mu, s.q), ctx.gravity);

  const int steps = ctx.protocol.steps_per_kept_frame();
  while (out.size() < static_cast<std::size_t>(horizon)) {
    s = advance(s, plane, mu, steps, ctx.gravity);
    out.push_back(project(ctx.camera, s.q));
  }
  return out;
}

}  // namespace mnet
