#include <doctest.h>

#include <random>

#include "mnet/error.hpp"
#include "mnet/render.hpp"

using namespace mnet;

namespace {
int red_count(const Frame& f) {
  int n = 0;
  for (int r = 0; r < f.h; ++r)
    for (int c = 0; c < f.w; ++c) n += f.at(r, c, 0) == kCubeRed;
  return n;
}
}  // namespace

TEST_CASE("project examples") {
  CameraModel unit;
  unit.alpha = 1.0;
  CHECK((project(unit, Vec3(0, 0, 3)) - Vec2(64, 64)).norm() == 0.0);
  CHECK((project(unit, Vec3(-64, -64, 0)) - Vec2(0, 0)).norm() == 0.0);
  CHECK((project(CameraModel{}, Vec3(0.5, -0.2, 0)) - Vec2(89, 54)).norm() < 1e-12);
}

TEST_CASE("project is affine and unproject inverts it") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> d(-1.3, 1.3), l(0, 1);
  const CameraModel cam;
  for (int i = 0; i < 200; ++i) {
    const Vec3 a(d(rng), d(rng), d(rng)), b(d(rng), d(rng), d(rng));
    const double lam = l(rng);
    const Vec2 lhs = project(cam, lam * a + (1 - lam) * b);
    const Vec2 rhs = lam * project(cam, a) + (1 - lam) * project(cam, b);
    CHECK((lhs - rhs).norm() < 1e-9);
    CHECK((cam.unproject(project(cam, a)) - a.head<2>()).norm() < 1e-12);
  }
}

TEST_CASE("camera scaling by image size") {
  CHECK(default_cube_px(128) == 5);
  CHECK(default_cube_px(32) == 1);
  CHECK(default_cube_px(16) == 1);
  const CameraModel c32 = CameraModel::for_image_size(32);
  CHECK((project(c32, Vec3(0, 0, 0)) - Vec2(16, 16)).norm() == 0.0);
  CHECK(project(c32, Vec3(1.28, 0, 0)).x() == doctest::Approx(32.0));
}

TEST_CASE("render_frame examples") {
  const CameraModel cam;
  const Frame center = render_frame(cam, Vec3(0, 0, 0), 5);
  CHECK(red_count(center) == 25);
  for (int r = 62; r <= 66; ++r)
    for (int c = 62; c <= 66; ++c) {
      CHECK(center.at(r, c, 0) == 204);
      CHECK(center.at(r, c, 1) == 10);
      CHECK(center.at(r, c, 2) == 10);
    }
  CHECK(center.at(61, 64, 0) == 0);

  const Frame outside = render_frame(cam, Vec3(3.0, 0, 0), 5);
  CHECK(red_count(outside) == 0);

  // Center on column 0: columns -2,-1 are clipped.
  const Vec2 edge = cam.unproject(Vec2(0, 64));
  const Frame left = render_frame(cam, Vec3(edge.x(), edge.y(), 0), 5);
  CHECK(red_count(left) == 15);
  CHECK(red_count(left) < 25);
}

TEST_CASE("render_frame maps (column, row) correctly") {
  const CameraModel cam;
  const Vec2 px(10, 97);
  const Vec2 w = cam.unproject(px);
  const Frame f = render_frame(cam, Vec3(w.x(), w.y(), 0), 1);
  CHECK(red_count(f) == 1);
  CHECK(f.at(97, 10, 0) == kCubeRed);
}

TEST_CASE("argmax_red examples") {
  Frame f(128, 128);
  f.at(97, 10, 0) = 255;
  CHECK((argmax_red(f) - Vec2(10, 97)).norm() == 0.0);
  const Frame sq = render_frame(CameraModel{}, Vec3(0, 0, 0), 5);
  CHECK((argmax_red(sq) - Vec2(64, 64)).norm() < 1e-12);
  CHECK_THROWS_AS(argmax_red(Frame(128, 128)), NoObject);
  Frame dim(8, 8);
  dim.at(1, 1, 0) = kRedThreshold;
  CHECK_THROWS_AS(argmax_red(dim), NoObject);
}

TEST_CASE("property: render/argmax round trip within one pixel") {
  std::mt19937_64 rng(9);
  const CameraModel cam;
  std::uniform_real_distribution<double> d(-1.3, 1.3);
  for (int i = 0; i < 2000; ++i) {
    const Vec3 q(d(rng), d(rng), 0);
    if (!cam.contains(project(cam, q))) continue;
    const Vec2 est = argmax_red(render_frame(cam, q, 5));
    CHECK((est - project(cam, q)).cwiseAbs().maxCoeff() <= 1.0);
  }
}

TEST_CASE("render is deterministic") {
  const Vec3 q(0.3, 0.2, 0.1);
  CHECK(render_frame(CameraModel{}, q, 5, 3) == render_frame(CameraModel{}, q, 5, 3));
}

TEST_CASE("visibility margin keeps the whole cube inside") {
  CameraModel cam;
  CHECK(cam.contains(Vec2(1.5, 64)));
  CHECK_FALSE(cam.contains(Vec2(1.49, 64)));
  CHECK(cam.contains(Vec2(125.49, 125.49)));
  CHECK_FALSE(cam.contains(Vec2(125.5, 64)));
  cam.visible_margin = 0;
  CHECK(cam.contains(Vec2(-0.5, 127.49)));
  CHECK_FALSE(cam.contains(Vec2(-0.51, 0)));
  CHECK(CameraModel::for_image_size(32).visible_margin == 0);
  CHECK(CameraModel::for_image_size(128).visible_margin == 2);
}
