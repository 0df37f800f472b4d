#include "mnet/render.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "mnet/error.hpp"

namespace mnet {

CameraModel CameraModel::for_image_size(int size) {
  if (size < 1) throw InvalidSpec("image size must be positive");
  CameraModel cam;
  cam.alpha = 50.0 * size / 128.0;
  cam.beta = Vec2(-size / 2.0, -size / 2.0);
  cam.image_h = size;
  cam.image_w = size;
  cam.visible_margin = default_cube_px(size) / 2;
  return cam;
}

bool CameraModel::contains(const Vec2& px) const {
  const double lo = visible_margin - 0.5;
  return px.x() >= lo && px.x() < image_w - lo - 1.0 && px.y() >= lo && px.y() < image_h - lo - 1.0;
}

Vec2 CameraModel::unproject(const Vec2& px) const {
  return {(px.x() + beta.x()) / alpha, (px.y() + beta.y()) / alpha};
}

int default_cube_px(int image_size) {
  const int px = static_cast<int>(std::lround(5.0 * image_size / 128.0));
  return std::max(1, px);
}

Vec2 project(const CameraModel& cam, const Vec3& q) {
  return {cam.alpha * q.x() - cam.beta.x(), cam.alpha * q.y() - cam.beta.y()};
}

Frame render_frame(const CameraModel& cam, const Vec3& q, int cube_px, int t) {
  if (cube_px < 1) throw InvalidSpec("cube_px must be >= 1");
  Frame frame(cam.image_h, cam.image_w, t);
  const Vec2 px = project(cam, q);
  if (!std::isfinite(px.x()) || !std::isfinite(px.y())) return frame;
  const long cx = std::lround(px.x());
  const long cy = std::lround(px.y());
  const long lo = (cube_px - 1) / 2;  // odd sides are symmetric; even sides extend one more to +
  const long hi = cube_px - 1 - lo;
  const long r0 = std::max<long>(0, cy - lo), r1 = std::min<long>(cam.image_h - 1, cy + hi);
  const long c0 = std::max<long>(0, cx - lo), c1 = std::min<long>(cam.image_w - 1, cx + hi);
  for (long r = r0; r <= r1; ++r) {
    for (long c = c0; c <= c1; ++c) {
      frame.at(static_cast<int>(r), static_cast<int>(c), 0) = kCubeRed;
      frame.at(static_cast<int>(r), static_cast<int>(c), 1) = kCubeGreen;
      frame.at(static_cast<int>(r), static_cast<int>(c), 2) = kCubeBlue;
    }
  }
  return frame;
}

Vec2 argmax_red(const Frame& frame) {
  int best = -1;
  double sx = 0.0, sy = 0.0;
  long count = 0;
  for (int r = 0; r < frame.h; ++r) {
    for (int c = 0; c < frame.w; ++c) {
      const int red = frame.at(r, c, 0);
      if (red > best) {
        best = red;
        sx = sy = 0.0;
        count = 0;
      }
      if (red == best) {
        sx += c;
        sy += r;
        ++count;
      }
    }
  }
  if (best <= kRedThreshold) throw NoObject();
  return {sx / count, sy / count};
}

void write_ppm(const std::filesystem::path& path, const Frame& frame) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "P6\n" << frame.w << ' ' << frame.h << "\n255\n";
  out.write(reinterpret_cast<const char*>(frame.rgb.data()), static_cast<std::streamsize>(frame.rgb.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

void write_pgm(const std::filesystem::path& path, std::span<const double> values, int h, int w) {
  if (values.size() != static_cast<std::size_t>(h) * w) throw ShapeMismatch("pgm size mismatch");
  const double peak = values.empty() ? 0.0 : *std::max_element(values.begin(), values.end());
  std::vector<unsigned char> bytes(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double s = peak > 0.0 ? values[i] / peak : 0.0;
    bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(s, 0.0, 1.0) * 255.0));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "P5\n" << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace mnet
