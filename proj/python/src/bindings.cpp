#include <cstring>
#include <string>
#include <vector>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "mnet/baselines.hpp"
#include "mnet/datagen.hpp"
#include "mnet/error.hpp"
#include "mnet/evaluate.hpp"
#include "mnet/gradsuite.hpp"
#include "mnet/models.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace mnet;

namespace {

py::array_t<double> points_array(const std::vector<Vec2>& pts) {
  py::array_t<double> a({static_cast<py::ssize_t>(pts.size()), py::ssize_t{2}});
  auto m = a.mutable_unchecked<2>();
  for (std::size_t i = 0; i < pts.size(); ++i) {
    m(static_cast<py::ssize_t>(i), 0) = pts[i].x();
    m(static_cast<py::ssize_t>(i), 1) = pts[i].y();
  }
  return a;
}

std::vector<Vec2> points_of(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2 || a.shape(1) != 2) throw ShapeMismatch("expected an (n, 2) array of points");
  const auto r = a.unchecked<2>();
  std::vector<Vec2> out;
  for (py::ssize_t i = 0; i < a.shape(0); ++i) out.emplace_back(r(i, 0), r(i, 1));
  return out;
}

py::array_t<std::uint8_t> frames_array(const std::vector<Frame>& frames) {
  const py::ssize_t h = frames.empty() ? 0 : frames.front().h, w = frames.empty() ? 0 : frames.front().w;
  py::array_t<std::uint8_t> a({static_cast<py::ssize_t>(frames.size()), h, w, py::ssize_t{3}});
  auto* dst = a.mutable_data();
  for (const auto& f : frames) {
    std::memcpy(dst, f.rgb.data(), f.rgb.size());
    dst += f.rgb.size();
  }
  return a;
}

std::vector<Frame> frames_of(const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 4 || a.shape(3) != 3) throw ShapeMismatch("expected a (T, H, W, 3) uint8 array");
  std::vector<Frame> out;
  const auto step = static_cast<std::size_t>(a.shape(1) * a.shape(2) * 3);
  for (py::ssize_t t = 0; t < a.shape(0); ++t) {
    Frame f(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2)), static_cast<int>(t));
    std::memcpy(f.rgb.data(), a.data() + t * static_cast<py::ssize_t>(step), step);
    out.push_back(std::move(f));
  }
  return out;
}

py::dict record_dict(const SequenceRecord& r) {
  py::dict d;
  d["index"] = r.index;
  d["split"] = split_name(r.split);
  d["scenario"] = scenario_name(r.experiment.scenario);
  d["theta_x"] = r.experiment.plane.theta_x;
  d["theta_y"] = r.experiment.plane.theta_y;
  d["frames"] = frames_array(r.frames);
  d["pixels_gt"] = points_array(r.pixels_gt);
  d["velocities_px"] = points_array(r.velocities_px);
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Sliding-block video generation, trajectory predictors and metrics";

  auto base = py::register_exception<Error>(m, "MnetError", PyExc_RuntimeError);
  py::register_exception<InvalidSpec>(m, "InvalidSpec", base.ptr());
  py::register_exception<ShapeMismatch>(m, "ShapeMismatch", base.ptr());
  py::register_exception<VariantMismatch>(m, "VariantMismatch", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<CorruptRecord>(m, "CorruptRecord", base.ptr());
  py::register_exception<NoObject>(m, "NoObject", base.ptr());
  py::register_exception<EmptyDataset>(m, "EmptyDataset", base.ptr());
  py::register_exception<NonFiniteLoss>(m, "NonFiniteLoss", base.ptr());
  py::register_exception<NoSequences>(m, "NoSequences", base.ptr());
  py::register_exception<MissingCheckpoint>(m, "MissingCheckpoint", base.ptr());
  py::register_exception<ZeroMass>(m, "ZeroMass", base.ptr());

  m.def(
      "generate_dataset",
      [](const std::string& scenario, std::size_t count, std::uint64_t seed, const fs::path& out, int image_size,
         int frames_max, double train_frac, double val_frac) {
        auto cfg = ScenarioConfig::defaults(parse_scenario(scenario), count, seed);
        cfg.train_frac = train_frac;
        cfg.val_frac = val_frac;
        auto proto = Protocol::for_image_size(image_size);
        proto.frames_max = frames_max;
        py::gil_scoped_release release;
        return manifest_to_json(generate_dataset(cfg, CameraModel::for_image_size(image_size), proto, out));
      },
      py::arg("scenario"), py::arg("count"), py::arg("seed"), py::arg("out"), py::arg("image_size") = 128,
      py::arg("frames_max") = 240, py::arg("train_frac") = 0.70, py::arg("val_frac") = 0.15,
      "Writes a dataset directory; returns the manifest as JSON text.");

  m.def(
      "read_manifest", [](const fs::path& dir) { return manifest_to_json(read_manifest(dir)); }, py::arg("dir"));

  m.def(
      "read_record",
      [](const fs::path& dir, std::size_t index) {
        auto reader = read_dataset(dir);
        return record_dict(reader.read(index));
      },
      py::arg("dir"), py::arg("index"));

  m.def(
      "simulate",
      [](double theta_x, double theta_y, double rho, double q0x, double q0y, int image_size, int frames_max) {
        ExperimentSpec spec;
        spec.plane = PlaneSpec::from_angles(theta_x, theta_y);
        spec.friction = HomogeneousFriction{rho};
        spec.q0x = q0x;
        spec.q0y = q0y;
        const auto traj = simulate(spec, CameraModel::for_image_size(image_size), frames_max);
        py::array_t<double> q({static_cast<py::ssize_t>(traj.size()), py::ssize_t{3}});
        auto qm = q.mutable_unchecked<2>();
        for (std::size_t k = 0; k < traj.size(); ++k)
          for (int c = 0; c < 3; ++c) qm(static_cast<py::ssize_t>(k), c) = traj.positions3d[k][c];
        py::dict d;
        d["timestamps"] = traj.timestamps;
        d["positions3d"] = q;
        d["pixels"] = points_array(traj.pixels);
        d["truncated_at"] = traj.truncated_at ? py::cast(*traj.truncated_at) : py::none();
        return d;
      },
      py::arg("theta_x"), py::arg("theta_y"), py::arg("rho"), py::arg("q0x") = 0.0, py::arg("q0y") = 0.0,
      py::arg("image_size") = 128, py::arg("frames_max") = 240,
      "Homogeneous-friction run from rest; positions in world units, pixels via the camera.");

  m.def(
      "estimate_positions", [](const py::array_t<std::uint8_t>& frames,
                               int count) { return points_array(estimate_positions(frames_of(frames), count)); },
      py::arg("frames"), py::arg("count") = kBaselineFrames);
  m.def(
      "polyfit_extrapolate",
      [](const py::array_t<double>& points, int degree, int horizon) {
        return points_array(polyfit_extrapolate(points_of(points), degree, horizon));
      },
      py::arg("points"), py::arg("degree"), py::arg("horizon"));

  m.def(
      "train",
      [](const fs::path& data, const std::string& model, int t_train, std::uint64_t seed, const fs::path& out,
         int epochs_max, int patience, int batch, double lr, int channels) {
        ModelConfig mc;
        mc.variant = parse_variant(model);
        mc.t_train = t_train;
        mc.channels = channels;
        mc.image_size = read_manifest(data).protocol.image_size;
        TrainConfig tc;
        tc.seed = seed;
        tc.epochs_max = epochs_max;
        tc.patience = patience;
        tc.batch = batch;
        tc.lr = lr;
        py::gil_scoped_release release;
        ReadOptions ro;
        ro.frame_limit = static_cast<std::size_t>(mc.t0);
        const auto res = train(mc, tc, load_split(data, Split::kTrain, ro), load_split(data, Split::kVal, ro));
        save_model(out, res);
        return res.metadata().dump();
      },
      py::arg("data"), py::arg("model"), py::arg("t_train"), py::arg("seed"), py::arg("out"),
      py::arg("epochs_max") = 1000, py::arg("patience") = 40, py::arg("batch") = 50, py::arg("lr") = 1e-4,
      py::arg("channels") = 64, "Trains and saves a checkpoint; returns its metadata as JSON text.");

  m.def(
      "evaluate_model",
      [](const fs::path& ckpt, const fs::path& data, const std::vector<int>& horizons, const std::string& split) {
        EvalOptions opt;
        opt.horizons = horizons;
        opt.split = parse_split(split);
        py::gil_scoped_release release;
        return nlohmann::json(evaluate_model(load_model(ckpt), data, opt)).dump();
      },
      py::arg("ckpt"), py::arg("data"), py::arg("horizons") = std::vector<int>{20, 40}, py::arg("split") = "test");
  m.def(
      "evaluate_baseline",
      [](const std::string& method, const fs::path& data, const std::vector<int>& horizons, const std::string& split) {
        EvalOptions opt;
        opt.horizons = horizons;
        opt.split = parse_split(split);
        py::gil_scoped_release release;
        return nlohmann::json(evaluate_baseline(parse_baseline(method), data, opt)).dump();
      },
      py::arg("method"), py::arg("data"), py::arg("horizons") = std::vector<int>{20, 40}, py::arg("split") = "test");

  m.def(
      "predict",
      [](const fs::path& ckpt, const py::array_t<std::uint8_t>& frames, int horizon) {
        const auto lm = load_model(ckpt);
        const auto f = frames_of(frames);
        const auto p = forward_predict(lm.model, std::span<const Frame>(f), horizon);
        std::vector<Vec2> pts;
        for (std::size_t t = 0; t < p.size(); ++t) pts.push_back(p.point(t));
        py::dict d;
        d["points"] = points_array(pts);
        if (!p.maps.empty()) {
          const auto& m0 = p.maps.front();
          py::array_t<double> maps({static_cast<py::ssize_t>(p.maps.size()), py::ssize_t{m0.h}, py::ssize_t{m0.w}});
          double* dst = maps.mutable_data();
          for (const auto& mp : p.maps) dst = std::copy(mp.p.begin(), mp.p.end(), dst);
          d["maps"] = maps;
        }
        if (!p.gauss.empty()) {
          py::array_t<double> g({static_cast<py::ssize_t>(p.gauss.size()), py::ssize_t{5}});
          auto gm = g.mutable_unchecked<2>();
          for (std::size_t t = 0; t < p.gauss.size(); ++t) {
            const auto& q = p.gauss[t];
            const double row[5] = {q.mu.x(), q.mu.y(), q.lambda1, q.lambda2, q.theta};
            for (int c = 0; c < 5; ++c) gm(static_cast<py::ssize_t>(t), c) = row[c];
          }
          d["gauss"] = g;
        }
        return d;
      },
      py::arg("ckpt"), py::arg("frames"), py::arg("horizon"),
      "Point estimates (plus maps or mu/lambda1/lambda2/theta rows) for one sequence.");

  m.def(
      "heatmap_entropy",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& p) {
        HeatmapPrediction hm;
        hm.p.assign(p.data(), p.data() + p.size());
        return entropy(hm);
      },
      py::arg("p"));
  m.def(
      "gaussian_entropy",
      [](double lambda1, double lambda2) {
        GaussPrediction g;
        g.lambda1 = lambda1;
        g.lambda2 = lambda2;
        return entropy(g);
      },
      py::arg("lambda1"), py::arg("lambda2"));

  m.def(
      "gradcheck",
      [](double tol) {
        GradSuiteOptions o;
        o.tol = tol;
        py::dict d;
        for (const auto& c : run_gradient_suite(o)) d[py::str(c.name)] = py::make_tuple(c.report.passed, c.report.max_rel_error);
        return d;
      },
      py::arg("tol") = 1e-4, "Gradient-check suite: name -> (passed, max relative error).");
}
