#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "mnet/physics.hpp"

namespace mnet {

/// Orthographic camera looking down -z. Pixel coordinates are (column, row).
struct CameraModel {
  double alpha = 50.0;          // pixels per world unit
  Vec2 beta{-64.0, -64.0};      // offset, subtracted so the world origin lands mid-image
  int image_h = 128;
  int image_w = 128;
  /// Pixels kept clear of each border: a position counts as visible only if the whole cube
  /// footprint around it lies inside the image.
  int visible_margin = 2;

  /// Camera covering the same [-1.28, 1.28]² world square at a different resolution.
  static CameraModel for_image_size(int size);

  /// Whether a continuous pixel position rounds to a pixel at least visible_margin from every border.
  bool contains(const Vec2& px) const;
  /// Inverse of the xy part of `project`.
  Vec2 unproject(const Vec2& px) const;
};

/// Cube footprint in pixels for a given image size (5 px at 128).
int default_cube_px(int image_size);

inline constexpr std::uint8_t kCubeRed = 204;
inline constexpr std::uint8_t kCubeGreen = 10;
inline constexpr std::uint8_t kCubeBlue = 10;
inline constexpr int kRedThreshold = 20;

struct Frame {
  int h = 0;
  int w = 0;
  int t = 0;
  std::vector<std::uint8_t> rgb;  // row-major h * w * 3

  Frame() = default;
  Frame(int height, int width, int index = 0)
      : h(height), w(width), t(index), rgb(static_cast<std::size_t>(height) * width * 3, 0) {}

  std::uint8_t& at(int row, int col, int c) { return rgb[(static_cast<std::size_t>(row) * w + col) * 3 + c]; }
  std::uint8_t at(int row, int col, int c) const {
    return rgb[(static_cast<std::size_t>(row) * w + col) * 3 + c];
  }
  bool operator==(const Frame&) const = default;
};

Vec2 project(const CameraModel& cam, const Vec3& q);

Frame render_frame(const CameraModel& cam, const Vec3& q, int cube_px, int t = 0);

/// Centroid of the pixels holding the maximum red value. Throws NoObject if that maximum is
/// not above kRedThreshold.
Vec2 argmax_red(const Frame& frame);

void write_ppm(const std::filesystem::path& path, const Frame& frame);
/// Writes a single-channel map as P5, rescaled so its maximum maps to 255.
void write_pgm(const std::filesystem::path& path, std::span<const double> values, int h, int w);

}  // namespace mnet
