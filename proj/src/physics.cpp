#include "mnet/physics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mnet/error.hpp"
#include "mnet/render.hpp"

namespace mnet {

namespace {

Vec3 rotate_x(double a, const Vec3& p) {
  const double c = std::cos(a), s = std::sin(a);
  return {p.x(), c * p.y() - s * p.z(), s * p.y() + c * p.z()};
}

Vec3 rotate_y(double a, const Vec3& p) {
  const double c = std::cos(a), s = std::sin(a);
  return {c * p.x() + s * p.z(), p.y(), -s * p.x() + c * p.z()};
}

Vec3 project_on_plane(const Vec3& n, const Vec3& p) { return p - n.dot(p) * n; }

}  // namespace

Vec3 plane_normal(double theta_x, double theta_y, RotationOrder order) {
  const Vec3 z = Vec3::UnitZ();
  Vec3 n = order == RotationOrder::kYAfterX ? rotate_y(theta_y, rotate_x(theta_x, z))
                                            : rotate_x(theta_x, rotate_y(theta_y, z));
  return n.normalized();
}

PlaneSpec PlaneSpec::from_angles(double theta_x, double theta_y, RotationOrder order) {
  PlaneSpec p;
  p.theta_x = theta_x;
  p.theta_y = theta_y;
  p.normal = plane_normal(theta_x, theta_y, order);
  return p;
}

double friction_at(const FrictionField& field, const Vec3& q) {
  if (const auto* h = std::get_if<HomogeneousFriction>(&field)) return h->rho;
  const auto& g = std::get<PatchGridFriction>(field);
  const double span = g.extent_max - g.extent_min;
  auto index = [&](double c) {
    const int i = static_cast<int>(std::floor((c - g.extent_min) / span * PatchGridFriction::kSide));
    return std::clamp(i, 0, PatchGridFriction::kSide - 1);
  };
  return g.scale_factor * g.at(index(q.x()), index(q.y()));
}

const char* scenario_name(Scenario s) {
  switch (s) {
    case Scenario::kS0: return "s0";
    case Scenario::kS1: return "s1";
    case Scenario::kS2: return "s2";
  }
  return "?";
}

Scenario parse_scenario(const std::string& name) {
  if (name == "s0" || name == "S0") return Scenario::kS0;
  if (name == "s1" || name == "S1") return Scenario::kS1;
  if (name == "s2" || name == "S2") return Scenario::kS2;
  throw InvalidSpec("unknown scenario '" + name + "'");
}

Vec3 sliding_acceleration(const PlaneSpec& plane, double mu, const Vec3& v, double gravity) {
  const Vec3& n = plane.normal;
  const Vec3 g(0.0, 0.0, -gravity);
  const double gn = g.dot(n);
  const Vec3 g_t = g - gn * n;
  const double normal_load = mu * std::abs(gn);
  const double speed = v.norm();
  if (speed > kRestSpeed) return g_t - normal_load * (v / speed);
  const double drive = g_t.norm();
  if (drive > normal_load) return g_t * (1.0 - normal_load / drive);
  return Vec3::Zero();
}

bool static_equilibrium(const PlaneSpec& plane, double mu, double gravity) {
  const Vec3& n = plane.normal;
  const Vec3 g(0.0, 0.0, -gravity);
  const double gn = g.dot(n);
  return mu * std::abs(gn) >= (g - gn * n).norm();
}

BodyState step(const BodyState& state, const PlaneSpec& plane, const FrictionField& field, double dt,
               double gravity) {
  const Vec3& n = plane.normal;
  const double mu = friction_at(field, state.q);
  if (state.at_rest && static_equilibrium(plane, mu, gravity)) return state;

  BodyState out = state;
  out.at_rest = false;
  const Vec3 a = sliding_acceleration(plane, mu, state.v, gravity);
  const Vec3 v_end = state.v + a * dt;

  if (state.v.norm() > kRestSpeed && v_end.dot(state.v) < 0.0) {
    // Friction stops the block inside this step; clamp at the velocity minimum.
    const double tau = std::clamp(-state.v.dot(a) / a.squaredNorm(), 0.0, dt);
    out.q = state.q + state.v * tau + 0.5 * a * tau * tau;
    out.v = Vec3::Zero();
    out.q = project_on_plane(n, out.q);
    const double mu_stop = friction_at(field, out.q);
    if (static_equilibrium(plane, mu_stop, gravity)) {
      out.at_rest = true;
      return out;
    }
    const double rest = dt - tau;
    const Vec3 a0 = sliding_acceleration(plane, mu_stop, Vec3::Zero(), gravity);
    out.q = project_on_plane(n, out.q + 0.5 * a0 * rest * rest);
    out.v = project_on_plane(n, a0 * rest);
    return out;
  }

  out.q = project_on_plane(n, state.q + state.v * dt + 0.5 * a * dt * dt);
  out.v = project_on_plane(n, v_end);
  if (out.v.norm() <= kRestSpeed) {
    out.v = Vec3::Zero();
    out.at_rest = static_equilibrium(plane, friction_at(field, out.q), gravity);
  }
  return out;
}

BodyState advance(BodyState state, const PlaneSpec& plane, const FrictionField& field, int steps,
                  double gravity) {
  const double dt = 1.0 / kPhysicsHz;
  for (int i = 0; i < steps; ++i) state = step(state, plane, field, dt, gravity);
  return state;
}

double mechanical_energy(const BodyState& state, double mass, double gravity) {
  return 0.5 * mass * state.v.squaredNorm() + mass * gravity * state.q.z();
}

Trajectory simulate(const ExperimentSpec& spec, const CameraModel& cam, int frames_max, double render_fps) {
  if (frames_max < 1) throw InvalidSpec("frames_max must be >= 1");
  const double ratio = kPhysicsHz / render_fps;
  const int steps_per_frame = static_cast<int>(std::lround(ratio));
  if (steps_per_frame < 1 || std::abs(ratio - steps_per_frame) > 1e-9)
    throw InvalidSpec("render_fps must divide the 120 Hz physics rate");

  BodyState state;
  state.q = spec.plane.point_at(spec.q0x, spec.q0y);
  state.at_rest = true;
  if (!cam.contains(project(cam, state.q)))
    throw InvalidSpec("initial position projects outside the image");

  Trajectory traj;
  traj.timestamps.reserve(static_cast<std::size_t>(frames_max));
  for (int k = 0; k < frames_max; ++k) {
    if (k > 0) state = advance(state, spec.plane, spec.friction, steps_per_frame, spec.gravity);
    const Vec2 px = project(cam, state.q);
    if (!cam.contains(px)) {
      traj.truncated_at = static_cast<std::size_t>(k);
      break;
    }
    traj.timestamps.push_back(k / render_fps);
    traj.positions3d.push_back(state.q);
    traj.velocities3d.push_back(state.v);
    traj.pixels.push_back(px);
  }
  return traj;
}

}  // namespace mnet
