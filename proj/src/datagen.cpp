#include "mnet/datagen.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <numbers>
#include <mutex>
#include <thread>

#include "mnet/error.hpp"
#include "mnet/serialize.hpp"

namespace mnet {

using nlohmann::json;

namespace {

constexpr char kBlobMagic[4] = {'M', 'N', 'P', 'D'};
constexpr std::uint16_t kBlobVersion = 1;
constexpr std::size_t kBlobHeader = 6;
constexpr int kMaxAttempts = 10000;

}  // namespace

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

double uniform(Rng& rng, double lo, double hi) {
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

Protocol Protocol::for_image_size(int size) {
  Protocol p;
  p.image_size = size;
  p.cube_px = default_cube_px(size);
  return p;
}

int Protocol::steps_per_raw_frame() const { return static_cast<int>(std::lround(kPhysicsHz / render_fps)); }

ScenarioConfig ScenarioConfig::defaults(Scenario s, std::size_t count, std::uint64_t seed) {
  ScenarioConfig c;
  c.scenario = s;
  c.count = count;
  c.seed = seed;
  return c;
}

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw InvalidSpec("unknown split '" + name + "'");
}

std::size_t DatasetManifest::count(Split s) const {
  return static_cast<std::size_t>(
      std::count_if(records.begin(), records.end(), [s](const RecordEntry& e) { return e.split == s; }));
}

ExperimentSpec sample_experiment(const ScenarioConfig& cfg, const CameraModel& cam, Rng& rng) {
  ExperimentSpec spec;
  spec.scenario = cfg.scenario;
  spec.gravity = cfg.gravity;
  const double half_w = (cam.image_w / 2.0) / cam.alpha;
  const double half_h = (cam.image_h / 2.0) / cam.alpha;

  if (cfg.scenario == Scenario::kS0) {
    spec.plane = PlaneSpec::from_angles(0.0, std::numbers::pi / 6.0);
  } else {
    const double tx = uniform(rng, -cfg.max_angle, cfg.max_angle);
    const double ty = uniform(rng, -cfg.max_angle, cfg.max_angle);
    spec.plane = PlaneSpec::from_angles(tx, ty);
    if (std::hypot(spec.plane.normal.x(), spec.plane.normal.y()) < 1e-6)
      throw DegenerateSlope("plane is (nearly) flat");
  }

  if (cfg.scenario == Scenario::kS2) {
    PatchGridFriction grid;
    grid.extent_min = -half_w;
    grid.extent_max = half_w;
    grid.scale_factor = cfg.patch_scale;
    for (double& rho : grid.rhos) rho = uniform(rng, cfg.patch_rho_min, cfg.patch_rho_max);
    spec.friction = grid;
  } else {
    spec.friction = HomogeneousFriction{uniform(rng, cfg.rho_min, cfg.rho_max)};
  }

  // The highest visible corner of the slope decides the starting quadrant.
  const Vec3& n = spec.plane.normal;
  const double sx = n.x() > 0.0 ? -1.0 : 1.0;
  const double sy = n.y() > 0.0 ? -1.0 : 1.0;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    const double x = uniform(rng, -half_w, half_w);
    const double y = uniform(rng, -half_h, half_h);
    if (sx * x <= 0.0 || sy * y <= 0.0) continue;
    if (!cam.contains(project(cam, spec.plane.point_at(x, y)))) continue;
    spec.q0x = x;
    spec.q0y = y;
    return spec;
  }
  throw InvalidSpec("rejection sampling of the start position did not terminate");
}

std::vector<std::size_t> kept_frame_indices(std::size_t raw_frames, const Protocol& protocol) {
  std::vector<std::size_t> kept;
  for (std::size_t i = static_cast<std::size_t>(protocol.trim); i < raw_frames;
       i += static_cast<std::size_t>(protocol.subsample))
    kept.push_back(i);
  return kept;
}

SequenceRecord build_sequence(const ExperimentSpec& spec, const CameraModel& cam, const Protocol& protocol) {
  const Trajectory traj = simulate(spec, cam, protocol.frames_max, protocol.render_fps);
  const auto kept = kept_frame_indices(traj.size(), protocol);
  const auto required = static_cast<std::size_t>(protocol.t0 + 1);
  if (kept.size() < required) throw TooShort(kept.size(), required);

  const double px_per_kept = cam.alpha * protocol.kept_frame_dt();
  SequenceRecord rec;
  rec.experiment = spec;
  rec.frames.reserve(kept.size());
  for (std::size_t k = 0; k < kept.size(); ++k) {
    const std::size_t i = kept[k];
    rec.frames.push_back(render_frame(cam, traj.positions3d[i], protocol.cube_px, static_cast<int>(k)));
    rec.pixels_gt.push_back(traj.pixels[i]);
    const Vec3& v = traj.velocities3d[i];
    rec.velocities_px.emplace_back(v.x() * px_per_kept, v.y() * px_per_kept);
  }
  return rec;
}

SequenceRecord generate_record(const ScenarioConfig& cfg, const CameraModel& cam, const Protocol& protocol,
                               std::size_t index) {
  const std::uint64_t record_seed = splitmix64(cfg.seed ^ splitmix64(static_cast<std::uint64_t>(index) + 1));
  Rng rng(record_seed);
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    ExperimentSpec spec;
    try {
      spec = sample_experiment(cfg, cam, rng);
    } catch (const DegenerateSlope&) {
      continue;
    }
    spec.seed = record_seed;
    try {
      SequenceRecord rec = build_sequence(spec, cam, protocol);
      rec.index = index;
      return rec;
    } catch (const TooShort&) {
      continue;
    }
  }
  throw InvalidSpec("could not draw a long enough sequence for record " + std::to_string(index));
}

std::vector<Split> assign_splits(const ScenarioConfig& cfg) {
  if (cfg.train_frac < 0 || cfg.val_frac < 0 || cfg.train_frac + cfg.val_frac > 1.0 + 1e-12)
    throw InvalidSpec("split fractions must be non-negative and sum to at most 1");
  std::vector<std::size_t> order(cfg.count);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(splitmix64(cfg.seed ^ 0x5EEDF00Dull));
  for (std::size_t i = order.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  const auto n = static_cast<double>(cfg.count);
  const auto n_train = std::min<std::size_t>(cfg.count, static_cast<std::size_t>(std::llround(n * cfg.train_frac)));
  const auto n_val =
      std::min<std::size_t>(cfg.count - n_train, static_cast<std::size_t>(std::llround(n * cfg.val_frac)));
  std::vector<Split> splits(cfg.count, Split::kTest);
  for (std::size_t k = 0; k < cfg.count; ++k) {
    if (k < n_train)
      splits[order[k]] = Split::kTrain;
    else if (k < n_train + n_val)
      splits[order[k]] = Split::kVal;
  }
  return splits;
}

namespace {

std::vector<std::uint8_t> encode_record(const SequenceRecord& rec) {
  ByteWriter w;
  w.put<std::uint32_t>(static_cast<std::uint32_t>(rec.index));
  write_experiment(w, rec.experiment);
  w.put(static_cast<std::uint8_t>(rec.split));
  const int h = rec.frames.empty() ? 0 : rec.frames.front().h;
  const int wd = rec.frames.empty() ? 0 : rec.frames.front().w;
  w.put<std::uint16_t>(static_cast<std::uint16_t>(h));
  w.put<std::uint16_t>(static_cast<std::uint16_t>(wd));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(rec.pixels_gt.size()));
  for (const Vec2& p : rec.pixels_gt) {
    w.put(p.x());
    w.put(p.y());
  }
  for (const Vec2& v : rec.velocities_px) {
    w.put(v.x());
    w.put(v.y());
  }
  for (const Frame& f : rec.frames) w.put_bytes(f.rgb);
  return std::move(w.bytes());
}

SequenceRecord decode_record(std::span<const std::uint8_t> payload, const ReadOptions& options) {
  ByteReader r(payload);
  SequenceRecord rec;
  rec.index = r.get<std::uint32_t>();
  rec.experiment = read_experiment(r);
  const auto split = r.get<std::uint8_t>();
  if (split > 2) throw FormatError("bad split id");
  rec.split = static_cast<Split>(split);
  const int h = r.get<std::uint16_t>();
  const int w = r.get<std::uint16_t>();
  const std::size_t n = r.get<std::uint32_t>();
  rec.pixels_gt.resize(n);
  rec.velocities_px.resize(n);
  for (auto& p : rec.pixels_gt) {
    p.x() = r.get<double>();
    p.y() = r.get<double>();
  }
  for (auto& v : rec.velocities_px) {
    v.x() = r.get<double>();
    v.y() = r.get<double>();
  }
  const std::size_t frame_bytes = static_cast<std::size_t>(h) * w * 3;
  const std::size_t keep = std::min(n, options.frame_limit.value_or(n));
  rec.frames.reserve(keep);
  for (std::size_t k = 0; k < n; ++k) {
    if (k >= keep) {
      r.skip(frame_bytes);
      continue;
    }
    Frame f(h, w, static_cast<int>(k));
    auto bytes = r.get_bytes(frame_bytes);
    std::copy(bytes.begin(), bytes.end(), f.rgb.begin());
    rec.frames.push_back(std::move(f));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes in record");
  return rec;
}

json manifest_json(const DatasetManifest& m) {
  json records = json::array();
  for (const auto& e : m.records) {
    records.push_back(json{{"index", e.index},
                           {"offset", e.offset},
                           {"length", e.length},
                           {"split", split_name(e.split)},
                           {"n_frames", e.n_frames},
                           {"experiment", e.experiment}});
  }
  return json{{"format", "mnpd"},
              {"version", m.version},
              {"scenario", m.scenario},
              {"camera", m.camera},
              {"protocol", m.protocol},
              {"seed", m.scenario.seed},
              {"record_count", m.records.size()},
              {"splits",
               {{"train", m.count(Split::kTrain)}, {"val", m.count(Split::kVal)}, {"test", m.count(Split::kTest)}}},
              {"records", records}};
}

}  // namespace

std::string manifest_to_json(const DatasetManifest& manifest) { return manifest_json(manifest).dump(1) + "\n"; }

DatasetManifest generate_dataset(const ScenarioConfig& cfg, const CameraModel& cam, const Protocol& protocol,
                                 const std::filesystem::path& out_dir, unsigned workers) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  const auto blob_path = out_dir / kBlobName;
  std::ofstream blob(blob_path, std::ios::binary | std::ios::trunc);
  if (!blob) throw IoError("cannot open " + blob_path.string() + " for writing");

  DatasetManifest manifest;
  manifest.scenario = cfg;
  manifest.camera = cam;
  manifest.protocol = protocol;
  const auto splits = assign_splits(cfg);

  blob.write(kBlobMagic, 4);
  const std::uint16_t version = kBlobVersion;
  blob.write(reinterpret_cast<const char*>(&version), sizeof version);
  std::uint64_t offset = kBlobHeader;

  // Records are built in parallel chunks and written strictly in index order.
  workers = std::max(1u, workers);
  const std::size_t chunk = std::max<std::size_t>(workers * 8, 16);
  for (std::size_t begin = 0; begin < cfg.count; begin += chunk) {
    const std::size_t end = std::min(cfg.count, begin + chunk);
    std::vector<SequenceRecord> built(end - begin);
    std::atomic<std::size_t> next{begin};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto work = [&] {
      for (std::size_t i = next++; i < end; i = next++) {
        try {
          built[i - begin] = generate_record(cfg, cam, protocol, i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    };
    if (workers == 1) {
      work();
    } else {
      std::vector<std::thread> pool;
      for (unsigned t = 0; t < workers; ++t) pool.emplace_back(work);
      for (auto& t : pool) t.join();
    }
    if (failure) std::rethrow_exception(failure);

    for (auto& rec : built) {
      rec.split = splits[rec.index];
      const auto payload = encode_record(rec);
      const auto length = static_cast<std::uint32_t>(payload.size());
      const std::uint32_t crc = crc32(payload);
      blob.write(reinterpret_cast<const char*>(&length), sizeof length);
      blob.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
      blob.write(reinterpret_cast<const char*>(&crc), sizeof crc);
      if (!blob) throw IoError("write failed: " + blob_path.string());
      manifest.records.push_back(RecordEntry{rec.index, offset, length, rec.split, rec.length(), rec.experiment});
      offset += sizeof length + payload.size() + sizeof crc;
    }
  }
  blob.close();
  if (!blob) throw IoError("write failed: " + blob_path.string());

  const std::string text = manifest_to_json(manifest);
  write_file(out_dir / kManifestName,
             std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  return manifest;
}

DatasetManifest read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / kManifestName;
  const auto bytes = read_file(path);
  json j;
  try {
    j = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  try {
    if (j.at("format") != "mnpd") throw FormatError(path.string() + ": not a dataset manifest");
    DatasetManifest m;
    m.version = j.at("version").get<int>();
    if (m.version != DatasetManifest::kVersion)
      throw FormatError(path.string() + ": unsupported manifest version " + std::to_string(m.version));
    m.scenario = j.at("scenario").get<ScenarioConfig>();
    m.camera = j.at("camera").get<CameraModel>();
    m.protocol = j.at("protocol").get<Protocol>();
    for (const auto& r : j.at("records")) {
      RecordEntry e;
      e.index = r.at("index").get<std::size_t>();
      e.offset = r.at("offset").get<std::uint64_t>();
      e.length = r.at("length").get<std::uint32_t>();
      e.split = parse_split(r.at("split").get<std::string>());
      e.n_frames = r.at("n_frames").get<std::size_t>();
      e.experiment = r.at("experiment").get<ExperimentSpec>();
      m.records.push_back(e);
    }
    if (m.records.size() != j.at("record_count").get<std::size_t>())
      throw FormatError(path.string() + ": record count does not match header");
    return m;
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

DatasetReader::DatasetReader(const std::filesystem::path& dir, ReadOptions options, std::optional<Split> split)
    : blob_path_(dir / kBlobName), manifest_(read_manifest(dir)), options_(options), split_(split) {
  blob_.open(blob_path_, std::ios::binary);
  if (!blob_) throw IoError("cannot open " + blob_path_.string());
  blob_.seekg(0, std::ios::end);
  blob_size_ = static_cast<std::uint64_t>(blob_.tellg());
  blob_.seekg(0);
  char header[kBlobHeader] = {};
  blob_.read(header, kBlobHeader);
  if (!blob_ || !std::equal(kBlobMagic, kBlobMagic + 4, header))
    throw FormatError(blob_path_.string() + ": bad magic");
  std::uint16_t version = 0;
  std::memcpy(&version, header + 4, sizeof version);
  if (version != kBlobVersion)
    throw FormatError(blob_path_.string() + ": unsupported blob version " + std::to_string(version));
}

SequenceRecord DatasetReader::read(std::size_t index) {
  if (index >= manifest_.records.size()) throw InvalidSpec("record index out of range");
  const RecordEntry& e = manifest_.records[index];
  const std::uint64_t framed = 4ull + e.length + 4ull;
  if (e.offset + framed > blob_size_) throw CorruptRecord(index, "blob truncated");
  blob_.clear();
  blob_.seekg(static_cast<std::streamoff>(e.offset));
  std::uint32_t length = 0;
  blob_.read(reinterpret_cast<char*>(&length), sizeof length);
  if (!blob_ || length != e.length) throw CorruptRecord(index, "length mismatch");
  std::vector<std::uint8_t> payload(length);
  blob_.read(reinterpret_cast<char*>(payload.data()), length);
  std::uint32_t crc = 0;
  blob_.read(reinterpret_cast<char*>(&crc), sizeof crc);
  if (!blob_) throw CorruptRecord(index, "blob truncated");
  if (crc32(payload) != crc) throw CorruptRecord(index, "checksum mismatch");
  SequenceRecord rec;
  try {
    rec = decode_record(payload, options_);
  } catch (const FormatError& err) {
    throw CorruptRecord(index, err.what());
  }
  if (rec.index != e.index || rec.length() != e.n_frames || rec.split != e.split)
    throw CorruptRecord(index, "record disagrees with manifest");
  return rec;
}

std::optional<SequenceRecord> DatasetReader::next() {
  while (cursor_ < manifest_.records.size()) {
    const std::size_t i = cursor_++;
    if (split_ && manifest_.records[i].split != *split_) continue;
    return read(i);
  }
  return std::nullopt;
}

DatasetReader read_dataset(const std::filesystem::path& dir, ReadOptions options, std::optional<Split> split) {
  return DatasetReader(dir, options, split);
}

std::vector<SequenceRecord> load_split(const std::filesystem::path& dir, Split split, ReadOptions options) {
  DatasetReader reader(dir, options, split);
  std::vector<SequenceRecord> out;
  while (auto rec = reader.next()) out.push_back(std::move(*rec));
  return out;
}

}  // namespace mnet
