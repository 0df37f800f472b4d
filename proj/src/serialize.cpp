#include "mnet/serialize.hpp"

#include <fstream>

#include <zlib.h>

namespace mnet {

using nlohmann::json;

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in chunks.
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - pos, 1u << 30);
    c = ::crc32(c, bytes.data() + pos, static_cast<uInt>(n));
    pos += n;
  }
  return static_cast<std::uint32_t>(c);
}

void write_experiment(ByteWriter& w, const ExperimentSpec& s) {
  w.put(s.q0x);
  w.put(s.q0y);
  w.put(s.plane.theta_x);
  w.put(s.plane.theta_y);
  w.put(s.plane.normal.x());
  w.put(s.plane.normal.y());
  w.put(s.plane.normal.z());
  w.put(s.gravity);
  w.put(s.mass);
  w.put(static_cast<std::uint8_t>(s.scenario));
  w.put(s.seed);
  if (const auto* h = std::get_if<HomogeneousFriction>(&s.friction)) {
    w.put<std::uint8_t>(0);
    w.put(h->rho);
  } else {
    const auto& g = std::get<PatchGridFriction>(s.friction);
    w.put<std::uint8_t>(1);
    w.put(g.extent_min);
    w.put(g.extent_max);
    w.put(g.scale_factor);
    for (double rho : g.rhos) w.put(rho);
  }
}

ExperimentSpec read_experiment(ByteReader& r) {
  ExperimentSpec s;
  s.q0x = r.get<double>();
  s.q0y = r.get<double>();
  s.plane.theta_x = r.get<double>();
  s.plane.theta_y = r.get<double>();
  s.plane.normal.x() = r.get<double>();
  s.plane.normal.y() = r.get<double>();
  s.plane.normal.z() = r.get<double>();
  s.gravity = r.get<double>();
  s.mass = r.get<double>();
  const auto scenario = r.get<std::uint8_t>();
  if (scenario > 2) throw FormatError("bad scenario id");
  s.scenario = static_cast<Scenario>(scenario);
  s.seed = r.get<std::uint64_t>();
  const auto kind = r.get<std::uint8_t>();
  if (kind == 0) {
    s.friction = HomogeneousFriction{r.get<double>()};
  } else if (kind == 1) {
    PatchGridFriction g;
    g.extent_min = r.get<double>();
    g.extent_max = r.get<double>();
    g.scale_factor = r.get<double>();
    for (double& rho : g.rhos) rho = r.get<double>();
    s.friction = g;
  } else {
    throw FormatError("bad friction kind");
  }
  return s;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::uint8_t> bytes(size);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  if (!in) throw IoError("read failed: " + path.string());
  return bytes;
}

void to_json(json& j, const ExperimentSpec& s) {
  j = json{{"q0x", s.q0x},
           {"q0y", s.q0y},
           {"theta_x", s.plane.theta_x},
           {"theta_y", s.plane.theta_y},
           {"normal", {s.plane.normal.x(), s.plane.normal.y(), s.plane.normal.z()}},
           {"scenario", scenario_name(s.scenario)},
           {"seed", s.seed},
           {"gravity", s.gravity},
           {"mass", s.mass}};
  if (const auto* h = std::get_if<HomogeneousFriction>(&s.friction)) {
    j["friction"] = {{"kind", "homogeneous"}, {"rho", h->rho}};
  } else {
    const auto& g = std::get<PatchGridFriction>(s.friction);
    j["friction"] = {{"kind", "patch_grid"},
                     {"extent", {g.extent_min, g.extent_max}},
                     {"scale_factor", g.scale_factor},
                     {"rhos", g.rhos}};
  }
}

void from_json(const json& j, ExperimentSpec& s) {
  s.q0x = j.at("q0x").get<double>();
  s.q0y = j.at("q0y").get<double>();
  s.plane.theta_x = j.at("theta_x").get<double>();
  s.plane.theta_y = j.at("theta_y").get<double>();
  const auto& n = j.at("normal");
  s.plane.normal = Vec3(n.at(0).get<double>(), n.at(1).get<double>(), n.at(2).get<double>());
  s.scenario = parse_scenario(j.at("scenario").get<std::string>());
  s.seed = j.at("seed").get<std::uint64_t>();
  s.gravity = j.at("gravity").get<double>();
  s.mass = j.at("mass").get<double>();
  const auto& f = j.at("friction");
  if (f.at("kind") == "homogeneous") {
    s.friction = HomogeneousFriction{f.at("rho").get<double>()};
  } else {
    PatchGridFriction g;
    g.extent_min = f.at("extent").at(0).get<double>();
    g.extent_max = f.at("extent").at(1).get<double>();
    g.scale_factor = f.at("scale_factor").get<double>();
    g.rhos = f.at("rhos").get<std::array<double, 100>>();
    s.friction = g;
  }
}

void to_json(json& j, const ScenarioConfig& c) {
  j = json{{"scenario", scenario_name(c.scenario)},
           {"count", c.count},
           {"seed", c.seed},
           {"max_angle", c.max_angle},
           {"rho_range", {c.rho_min, c.rho_max}},
           {"patch_rho_range", {c.patch_rho_min, c.patch_rho_max}},
           {"patch_scale", c.patch_scale},
           {"gravity", c.gravity},
           {"split_fractions", {c.train_frac, c.val_frac, 1.0 - c.train_frac - c.val_frac}}};
}

void from_json(const json& j, ScenarioConfig& c) {
  c.scenario = parse_scenario(j.at("scenario").get<std::string>());
  c.count = j.at("count").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.max_angle = j.at("max_angle").get<double>();
  c.rho_min = j.at("rho_range").at(0).get<double>();
  c.rho_max = j.at("rho_range").at(1).get<double>();
  c.patch_rho_min = j.at("patch_rho_range").at(0).get<double>();
  c.patch_rho_max = j.at("patch_rho_range").at(1).get<double>();
  c.patch_scale = j.at("patch_scale").get<double>();
  c.gravity = j.at("gravity").get<double>();
  c.train_frac = j.at("split_fractions").at(0).get<double>();
  c.val_frac = j.at("split_fractions").at(1).get<double>();
}

void to_json(json& j, const CameraModel& c) {
  j = json{{"alpha", c.alpha}, {"beta", {c.beta.x(), c.beta.y()}}, {"image_h", c.image_h}, {"image_w", c.image_w},
           {"visible_margin", c.visible_margin}};
}

void from_json(const json& j, CameraModel& c) {
  c.alpha = j.at("alpha").get<double>();
  c.beta = Vec2(j.at("beta").at(0).get<double>(), j.at("beta").at(1).get<double>());
  c.image_h = j.at("image_h").get<int>();
  c.image_w = j.at("image_w").get<int>();
  c.visible_margin = j.value("visible_margin", 0);
}

void to_json(json& j, const Protocol& p) {
  j = json{{"frames_max", p.frames_max}, {"render_fps", p.render_fps}, {"trim", p.trim},
           {"subsample", p.subsample},   {"t0", p.t0},                 {"image_size", p.image_size},
           {"cube_px", p.cube_px}};
}

void from_json(const json& j, Protocol& p) {
  p.frames_max = j.at("frames_max").get<int>();
  p.render_fps = j.at("render_fps").get<double>();
  p.trim = j.at("trim").get<int>();
  p.subsample = j.at("subsample").get<int>();
  p.t0 = j.at("t0").get<int>();
  p.image_size = j.at("image_size").get<int>();
  p.cube_px = j.at("cube_px").get<int>();
}

}  // namespace mnet
