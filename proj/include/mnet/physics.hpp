#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <variant>
#include <vector>

#include <Eigen/Core>

namespace mnet {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;

struct CameraModel;

/// Physics substep rate (the engine runs at a fixed 120 Hz).
inline constexpr double kPhysicsHz = 120.0;
/// Below this speed the block is considered not sliding.
inline constexpr double kRestSpeed = 1e-9;
/// 9.81 px/s² at the default 50 px per world unit.
inline constexpr double kDefaultGravity = 9.81 / 50.0;

enum class RotationOrder {
  kYAfterX,  // n = R_y(theta_y) * R_x(theta_x) * z
  kXAfterY,  // n = R_x(theta_x) * R_y(theta_y) * z
};

Vec3 plane_normal(double theta_x, double theta_y, RotationOrder order = RotationOrder::kYAfterX);

struct PlaneSpec {
  double theta_x = 0.0;
  double theta_y = 0.0;
  Vec3 normal = Vec3::UnitZ();

  static PlaneSpec from_angles(double theta_x, double theta_y,
                               RotationOrder order = RotationOrder::kYAfterX);

  /// Height of the plane above (x, y); the plane passes through the origin.
  double height_at(double x, double y) const { return -(normal.x() * x + normal.y() * y) / normal.z(); }
  Vec3 point_at(double x, double y) const { return {x, y, height_at(x, y)}; }
};

struct HomogeneousFriction {
  double rho = 0.0;
};

/// 10x10 tiling of the visible square, each tile with its own coefficient.
struct PatchGridFriction {
  static constexpr int kSide = 10;
  /// rhos[ix * kSide + iy]; ix indexes x, iy indexes y.
  std::array<double, kSide * kSide> rhos{};
  double extent_min = -1.28;
  double extent_max = 1.28;
  double scale_factor = 0.05;

  double& at(int ix, int iy) { return rhos[static_cast<std::size_t>(ix * kSide + iy)]; }
  double at(int ix, int iy) const { return rhos[static_cast<std::size_t>(ix * kSide + iy)]; }
};

using FrictionField = std::variant<HomogeneousFriction, PatchGridFriction>;

double friction_at(const FrictionField& field, const Vec3& q);

enum class Scenario : std::uint8_t { kS0 = 0, kS1 = 1, kS2 = 2 };

const char* scenario_name(Scenario s);
Scenario parse_scenario(const std::string& name);

struct BodyState {
  Vec3 q = Vec3::Zero();
  Vec3 v = Vec3::Zero();
  bool at_rest = false;
};

struct ExperimentSpec {
  double q0x = 0.0;
  double q0y = 0.0;
  PlaneSpec plane;
  FrictionField friction = HomogeneousFriction{};
  Scenario scenario = Scenario::kS0;
  std::uint64_t seed = 0;
  double gravity = kDefaultGravity;
  double mass = 1.0;
};

struct Trajectory {
  std::vector<double> timestamps;
  std::vector<Vec3> positions3d;
  std::vector<Vec3> velocities3d;
  std::vector<Vec2> pixels;
  /// First frame index whose projection fell outside the image, if the run ended that way.
  std::optional<std::size_t> truncated_at;

  std::size_t size() const { return timestamps.size(); }
};

/// Coulomb sliding acceleration for a point mass on the plane.
Vec3 sliding_acceleration(const PlaneSpec& plane, double mu, const Vec3& v, double gravity = kDefaultGravity);

/// True when static friction can hold the block at rest.
bool static_equilibrium(const PlaneSpec& plane, double mu, double gravity = kDefaultGravity);

BodyState step(const BodyState& state, const PlaneSpec& plane, const FrictionField& field, double dt,
               double gravity = kDefaultGravity);

/// Advances `steps` substeps of 1/120 s.
BodyState advance(BodyState state, const PlaneSpec& plane, const FrictionField& field, int steps,
                  double gravity = kDefaultGravity);

double mechanical_energy(const BodyState& state, double mass, double gravity);

/// Runs one experiment from rest, recording a frame every 120/render_fps substeps.
Trajectory simulate(const ExperimentSpec& spec, const CameraModel& cam, int frames_max = 240,
                    double render_fps = 30.0);

}  // namespace mnet
