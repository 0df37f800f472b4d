#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mnet/physics.hpp"
#include "mnet/render.hpp"

namespace mnet {

using Rng = std::mt19937_64;

/// Uniform draw on [lo, hi) built from the raw 64-bit stream, so results do not depend on the
/// standard library's distribution implementation.
double uniform(Rng& rng, double lo, double hi);
std::uint64_t splitmix64(std::uint64_t x);

/// Recording and trimming protocol applied to every simulated experiment.
struct Protocol {
  int frames_max = 240;
  double render_fps = 30.0;
  int trim = 30;
  int subsample = 3;
  int t0 = 4;
  int image_size = 128;
  int cube_px = 5;

  static Protocol for_image_size(int size);
  int steps_per_raw_frame() const;
  int steps_per_kept_frame() const { return steps_per_raw_frame() * subsample; }
  double kept_frame_dt() const { return subsample / render_fps; }
};

struct ScenarioConfig {
  Scenario scenario = Scenario::kS0;
  std::size_t count = 2000;
  std::uint64_t seed = 0;
  double max_angle = 0.52359877559829887;  // pi / 6
  double rho_min = 1e-4;
  double rho_max = 1e-1;
  double patch_rho_min = 0.5;
  double patch_rho_max = 5.0;
  double patch_scale = 0.05;
  double gravity = kDefaultGravity;
  double train_frac = 0.70;
  double val_frac = 0.15;

  static ScenarioConfig defaults(Scenario s, std::size_t count = 2000, std::uint64_t seed = 0);
};

enum class Split : std::uint8_t { kTrain = 0, kVal = 1, kTest = 2 };
const char* split_name(Split s);
Split parse_split(const std::string& name);

struct SequenceRecord {
  std::size_t index = 0;
  ExperimentSpec experiment;
  /// Kept frames; may hold fewer entries than pixels_gt when read with a frame limit.
  std::vector<Frame> frames;
  std::vector<Vec2> pixels_gt;
  /// Instantaneous velocity in pixels per kept frame.
  std::vector<Vec2> velocities_px;
  Split split = Split::kTrain;

  std::size_t length() const { return pixels_gt.size(); }
};

struct RecordEntry {
  std::size_t index = 0;
  std::uint64_t offset = 0;
  std::uint32_t length = 0;
  Split split = Split::kTrain;
  std::size_t n_frames = 0;
  ExperimentSpec experiment;
};

struct DatasetManifest {
  static constexpr int kVersion = 1;
  int version = kVersion;
  ScenarioConfig scenario;
  CameraModel camera;
  Protocol protocol;
  std::vector<RecordEntry> records;

  std::size_t count(Split s) const;
};

/// Draws one experiment. Throws DegenerateSlope for (near) flat tilts in S1/S2; callers redraw.
ExperimentSpec sample_experiment(const ScenarioConfig& cfg, const CameraModel& cam, Rng& rng);

/// Simulates, trims, subsamples and renders. Throws TooShort if fewer than t0+1 frames survive.
SequenceRecord build_sequence(const ExperimentSpec& spec, const CameraModel& cam, const Protocol& protocol);

/// Indices of kept raw frames for a run of `raw_frames` recorded frames.
std::vector<std::size_t> kept_frame_indices(std::size_t raw_frames, const Protocol& protocol);

/// Builds record `index` of a dataset: fresh draws until a long enough sequence appears.
SequenceRecord generate_record(const ScenarioConfig& cfg, const CameraModel& cam, const Protocol& protocol,
                               std::size_t index);

/// Split labels for `count` records: seeded shuffle, then train/val/test in order.
std::vector<Split> assign_splits(const ScenarioConfig& cfg);

inline constexpr const char* kBlobName = "dataset.blob";
inline constexpr const char* kManifestName = "dataset.manifest.json";

DatasetManifest generate_dataset(const ScenarioConfig& cfg, const CameraModel& cam, const Protocol& protocol,
                                 const std::filesystem::path& out_dir, unsigned workers = 1);

DatasetManifest read_manifest(const std::filesystem::path& dir);
std::string manifest_to_json(const DatasetManifest& manifest);

struct ReadOptions {
  /// Keep at most this many decoded frames per record (all are still checksummed).
  std::optional<std::size_t> frame_limit;
};

/// Sequential reader over the records of a dataset directory, in manifest order.
class DatasetReader {
 public:
  explicit DatasetReader(const std::filesystem::path& dir, ReadOptions options = {},
                         std::optional<Split> split = std::nullopt);

  const DatasetManifest& manifest() const { return manifest_; }
  /// Next record of the selected split, or nullopt at the end.
  std::optional<SequenceRecord> next();
  SequenceRecord read(std::size_t index);

 private:
  std::filesystem::path blob_path_;
  DatasetManifest manifest_;
  ReadOptions options_;
  std::optional<Split> split_;
  std::ifstream blob_;
  std::uint64_t blob_size_ = 0;
  std::size_t cursor_ = 0;
};

DatasetReader read_dataset(const std::filesystem::path& dir, ReadOptions options = {},
                           std::optional<Split> split = std::nullopt);

std::vector<SequenceRecord> load_split(const std::filesystem::path& dir, Split split, ReadOptions options = {});

}  // namespace mnet
