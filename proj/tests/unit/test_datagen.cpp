#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

#include "mnet/datagen.hpp"
#include "mnet/error.hpp"
#include "mnet/serialize.hpp"

using namespace mnet;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mnet_unit_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::uint8_t> slurp(const fs::path& p) { return read_file(p); }

}  // namespace

TEST_CASE("kept_frame_indices examples") {
  const Protocol p;
  CHECK(kept_frame_indices(240, p).size() == 70);
  CHECK(kept_frame_indices(120, p).size() == 30);
  CHECK(kept_frame_indices(30, p).empty());
  CHECK(kept_frame_indices(10, p).empty());
  const auto k = kept_frame_indices(40, p);
  CHECK(k == std::vector<std::size_t>{30, 33, 36, 39});
  CHECK(p.steps_per_raw_frame() == 4);
  CHECK(p.steps_per_kept_frame() == 12);
}

TEST_CASE("sample_experiment: S0 fixed tilt, friction range and uphill quadrant") {
  const CameraModel cam;
  auto cfg = ScenarioConfig::defaults(Scenario::kS0);
  Rng rng(1);
  for (int i = 0; i < 500; ++i) {
    const ExperimentSpec e = sample_experiment(cfg, cam, rng);
    CHECK(e.plane.theta_x == 0.0);
    CHECK(e.plane.theta_y == doctest::Approx(std::numbers::pi / 6));
    const double rho = std::get<HomogeneousFriction>(e.friction).rho;
    CHECK(rho >= 1e-4);
    CHECK(rho < 1e-1);
    // n = (0.5, 0, 0.866): height is maximal at negative x.
    CHECK(e.q0x < 0.0);
    CHECK(cam.contains(project(cam, e.plane.point_at(e.q0x, e.q0y))));
  }
}

TEST_CASE("sample_experiment: deterministic per seed") {
  const CameraModel cam;
  const auto cfg = ScenarioConfig::defaults(Scenario::kS2);
  Rng a(42), b(42);
  const auto ea = sample_experiment(cfg, cam, a);
  const auto eb = sample_experiment(cfg, cam, b);
  CHECK(ea.q0x == eb.q0x);
  CHECK(ea.q0y == eb.q0y);
  CHECK(ea.plane.normal == eb.plane.normal);
  CHECK(std::get<PatchGridFriction>(ea.friction).rhos == std::get<PatchGridFriction>(eb.friction).rhos);
}

TEST_CASE("sample_experiment: S1 angle distribution sanity over 2000 draws") {
  const CameraModel cam;
  const auto cfg = ScenarioConfig::defaults(Scenario::kS1);
  Rng rng(2024);
  double sum = 0, lo = 1, hi = -1;
  const int n = 2000;
  for (int i = 0; i < n; ++i) {
    const auto e = sample_experiment(cfg, cam, rng);
    sum += e.plane.theta_y;
    lo = std::min(lo, e.plane.theta_y);
    hi = std::max(hi, e.plane.theta_y);
    const Vec3& nrm = e.plane.normal;
    // Start lies in the quadrant of the highest visible corner.
    if (nrm.x() > 0) CHECK(e.q0x < 0);
    if (nrm.x() < 0) CHECK(e.q0x > 0);
    if (nrm.y() > 0) CHECK(e.q0y < 0);
    if (nrm.y() < 0) CHECK(e.q0y > 0);
  }
  const double sigma = (std::numbers::pi / 3) / std::sqrt(12.0) / std::sqrt(static_cast<double>(n));
  CHECK(std::abs(sum / n) < 3 * sigma);
  CHECK(lo > -std::numbers::pi / 6);
  CHECK(hi < std::numbers::pi / 6);
}

TEST_CASE("sample_experiment: S2 patch grid") {
  const CameraModel cam;
  const auto cfg = ScenarioConfig::defaults(Scenario::kS2);
  Rng rng(3);
  const auto e = sample_experiment(cfg, cam, rng);
  const auto& g = std::get<PatchGridFriction>(e.friction);
  CHECK(g.scale_factor == 0.05);
  CHECK(g.extent_min == doctest::Approx(-1.28));
  CHECK(g.extent_max == doctest::Approx(1.28));
  for (double r : g.rhos) {
    CHECK(r >= 0.5);
    CHECK(r < 5.0);
  }
}

TEST_CASE("build_sequence: lengths, TooShort and ground-truth consistency") {
  const CameraModel cam;
  const Protocol protocol;
  ExperimentSpec e;
  e.plane = PlaneSpec::from_angles(0, std::numbers::pi / 6);
  e.friction = HomogeneousFriction{0.05};
  e.q0x = -1.2;
  e.q0y = 0.2;
  const SequenceRecord rec = build_sequence(e, cam, protocol);
  CHECK(rec.frames.size() == rec.pixels_gt.size());
  CHECK(rec.velocities_px.size() == rec.pixels_gt.size());
  CHECK(rec.length() >= 5);
  for (std::size_t k = 0; k < rec.length(); ++k)
    CHECK((argmax_red(rec.frames[k]) - rec.pixels_gt[k]).cwiseAbs().maxCoeff() <= 1.0);

  // A flat plane never truncates: 240 raw frames -> 70 kept.
  ExperimentSpec flat;
  CHECK(build_sequence(flat, cam, protocol).length() == 70);

  // Starting next to the downhill edge leaves the view before the trim.
  ExperimentSpec fast = e;
  fast.q0x = 1.22;
  fast.friction = HomogeneousFriction{0.0};
  CHECK_THROWS_AS(build_sequence(fast, cam, protocol), TooShort);
}

TEST_CASE("assign_splits proportions and determinism") {
  auto cfg = ScenarioConfig::defaults(Scenario::kS0, 100, 5);
  const auto s = assign_splits(cfg);
  CHECK(std::count(s.begin(), s.end(), Split::kTrain) == 70);
  CHECK(std::count(s.begin(), s.end(), Split::kVal) == 15);
  CHECK(std::count(s.begin(), s.end(), Split::kTest) == 15);
  CHECK(assign_splits(cfg) == s);
  cfg.count = 2000;
  cfg.train_frac = 0.75;
  cfg.val_frac = 0.125;
  const auto t = assign_splits(cfg);
  CHECK(std::count(t.begin(), t.end(), Split::kTrain) == 1500);
  CHECK(std::count(t.begin(), t.end(), Split::kVal) == 250);
  CHECK(std::count(t.begin(), t.end(), Split::kTest) == 250);
  cfg.train_frac = 0.9;
  cfg.val_frac = 0.2;
  CHECK_THROWS_AS(assign_splits(cfg), InvalidSpec);
}

TEST_CASE("generate_dataset: round trip, determinism, empty") {
  const auto cam = CameraModel::for_image_size(32);
  const auto protocol = Protocol::for_image_size(32);
  const auto cfg = ScenarioConfig::defaults(Scenario::kS1, 12, 7);
  const fs::path a = scratch_dir("gen_a"), b = scratch_dir("gen_b");
  const auto m = generate_dataset(cfg, cam, protocol, a, 1);
  generate_dataset(cfg, cam, protocol, b, 3);
  CHECK(slurp(a / kBlobName) == slurp(b / kBlobName));
  CHECK(slurp(a / kManifestName) == slurp(b / kManifestName));
  REQUIRE(m.records.size() == 12);

  const auto m2 = read_manifest(a);
  CHECK(m2.records.size() == 12);
  CHECK(manifest_to_json(m2) == manifest_to_json(m));

  std::set<std::size_t> seen;
  auto reader = read_dataset(a);
  std::size_t n = 0;
  while (auto rec = reader.next()) {
    const SequenceRecord direct = generate_record(cfg, cam, protocol, rec->index);
    CHECK(rec->frames == direct.frames);
    CHECK(rec->pixels_gt == direct.pixels_gt);
    CHECK(rec->velocities_px == direct.velocities_px);
    CHECK(rec->experiment.q0x == direct.experiment.q0x);
    CHECK(rec->experiment.plane.normal == direct.experiment.plane.normal);
    CHECK(rec->experiment.seed == direct.experiment.seed);
    CHECK(rec->split == m.records[n].split);
    seen.insert(rec->index);
    ++n;
  }
  CHECK(n == 12);
  CHECK(seen.size() == 12);

  std::size_t by_split = 0;
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) by_split += load_split(a, s).size();
  CHECK(by_split == 12);

  ReadOptions limited;
  limited.frame_limit = 5;
  const auto few = load_split(a, Split::kTrain, limited);
  REQUIRE(!few.empty());
  CHECK(few.front().frames.size() == 5);
  CHECK(few.front().pixels_gt.size() > 5);

  const fs::path e = scratch_dir("gen_empty");
  auto empty_cfg = cfg;
  empty_cfg.count = 0;
  const auto me = generate_dataset(empty_cfg, cam, protocol, e);
  CHECK(me.records.empty());
  CHECK(read_manifest(e).records.empty());
  auto er = read_dataset(e);
  CHECK_FALSE(er.next().has_value());
}

TEST_CASE("read_dataset: corruption is detected") {
  const auto cam = CameraModel::for_image_size(32);
  const auto protocol = Protocol::for_image_size(32);
  const auto cfg = ScenarioConfig::defaults(Scenario::kS0, 4, 9);
  const fs::path dir = scratch_dir("corrupt");
  const auto m = generate_dataset(cfg, cam, protocol, dir);
  const auto good = slurp(dir / kBlobName);

  SUBCASE("truncated blob") {
    auto bytes = good;
    bytes.resize(static_cast<std::size_t>(m.records[2].offset + 20));
    write_file(dir / kBlobName, bytes);
    auto r = read_dataset(dir);
    CHECK(r.next().has_value());
    CHECK(r.next().has_value());
    try {
      r.next();
      FAIL("expected CorruptRecord");
    } catch (const CorruptRecord& e) {
      CHECK(e.index() == 2);
    }
  }
  SUBCASE("flipped payload byte") {
    auto bytes = good;
    bytes[static_cast<std::size_t>(m.records[1].offset + 40)] ^= 0xFF;
    write_file(dir / kBlobName, bytes);
    auto r = read_dataset(dir);
    r.next();
    CHECK_THROWS_AS(r.next(), CorruptRecord);
  }
  SUBCASE("wrong version") {
    auto bytes = good;
    bytes[4] = 9;
    write_file(dir / kBlobName, bytes);
    CHECK_THROWS_AS(read_dataset(dir), FormatError);
  }
  SUBCASE("bad magic") {
    auto bytes = good;
    bytes[0] = 'X';
    write_file(dir / kBlobName, bytes);
    CHECK_THROWS_AS(read_dataset(dir), FormatError);
  }
}

TEST_CASE("serialize: experiment round trip and crc") {
  ExperimentSpec e;
  e.q0x = -0.3;
  e.q0y = 0.7;
  e.plane = PlaneSpec::from_angles(0.1, -0.2);
  PatchGridFriction g;
  for (int i = 0; i < 100; ++i) g.rhos[static_cast<std::size_t>(i)] = 0.5 + i * 0.01;
  e.friction = g;
  e.scenario = Scenario::kS2;
  e.seed = 0xDEADBEEFCAFEull;
  ByteWriter w;
  write_experiment(w, e);
  ByteReader r(w.bytes());
  const ExperimentSpec back = read_experiment(r);
  CHECK(r.remaining() == 0);
  CHECK(back.q0x == e.q0x);
  CHECK(back.plane.normal == e.plane.normal);
  CHECK(std::get<PatchGridFriction>(back.friction).rhos == g.rhos);
  CHECK(back.seed == e.seed);
  CHECK(back.scenario == e.scenario);

  const std::string s = "123456789";
  CHECK(crc32(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())) == 0xCBF43926u);
}
