// mnet: dataset generation, training, evaluation, baselines, exports and gradient checks.
// Usage errors exit 2 with the usage text; runtime errors exit 1 with a JSON error on stderr.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mnet/baselines.hpp"
#include "mnet/datagen.hpp"
#include "mnet/error.hpp"
#include "mnet/evaluate.hpp"
#include "mnet/gradsuite.hpp"
#include "mnet/models.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct GenArgs {
  std::string scenario;
  std::size_t count = 0;
  std::uint64_t seed = 0;
  fs::path out;
  int image_size = 128;
  int frames_max = 240;
  unsigned workers = 1;
  double train_frac = 0.70;
  double val_frac = 0.15;
};

struct TrainArgs {
  fs::path data;
  std::string model;
  int t_train = 20;
  std::uint64_t seed = 0;
  fs::path out;
  fs::path log;
  mnet::TrainConfig tc;
  mnet::ModelConfig mc;
  bool quiet = false;
};

struct EvalArgs {
  fs::path data;
  fs::path ckpt;
  std::vector<int> horizons{20, 40};
  fs::path report;
  std::string split = "test";
  int batch = 16;
  bool expected_value = false;
};

struct BaselineArgs {
  fs::path data;
  std::string method;
  std::vector<int> horizons{20, 40};
  fs::path report;
  std::string split = "test";
};

struct ExportArgs {
  fs::path data;
  std::size_t index = 0;
  fs::path dir;
  fs::path ckpt;
  int horizon = 0;
};

struct GradArgs {
  double tol = 1e-4;
  std::uint64_t seed = 1;
};

const char* error_kind(const mnet::Error& e) {
  using namespace mnet;
  if (dynamic_cast<const InvalidSpec*>(&e)) return "InvalidSpec";
  if (dynamic_cast<const ShapeMismatch*>(&e)) return "ShapeMismatch";
  if (dynamic_cast<const VariantMismatch*>(&e)) return "VariantMismatch";
  if (dynamic_cast<const IoError*>(&e)) return "IoError";
  if (dynamic_cast<const FormatError*>(&e)) return "FormatError";
  if (dynamic_cast<const CorruptRecord*>(&e)) return "CorruptRecord";
  if (dynamic_cast<const NoObject*>(&e)) return "NoObject";
  if (dynamic_cast<const TooShort*>(&e)) return "TooShort";
  if (dynamic_cast<const DegenerateSlope*>(&e)) return "DegenerateSlope";
  if (dynamic_cast<const EmptyDataset*>(&e)) return "EmptyDataset";
  if (dynamic_cast<const NonFiniteLoss*>(&e)) return "NonFiniteLoss";
  if (dynamic_cast<const NoSequences*>(&e)) return "NoSequences";
  if (dynamic_cast<const MissingCheckpoint*>(&e)) return "MissingCheckpoint";
  if (dynamic_cast<const ZeroMass*>(&e)) return "ZeroMass";
  return "Error";
}

int run_gen(const GenArgs& a) {
  auto cfg = mnet::ScenarioConfig::defaults(mnet::parse_scenario(a.scenario), a.count, a.seed);
  cfg.train_frac = a.train_frac;
  cfg.val_frac = a.val_frac;
  const auto cam = mnet::CameraModel::for_image_size(a.image_size);
  auto proto = mnet::Protocol::for_image_size(a.image_size);
  proto.frames_max = a.frames_max;
  const auto m = mnet::generate_dataset(cfg, cam, proto, a.out, a.workers);
  std::cout << "wrote " << m.records.size() << " sequences to " << a.out.string() << " (train "
            << m.count(mnet::Split::kTrain) << ", val " << m.count(mnet::Split::kVal) << ", test "
            << m.count(mnet::Split::kTest) << ")\n";
  return 0;
}

int run_train(TrainArgs a) {
  const auto manifest = mnet::read_manifest(a.data);
  a.mc.variant = mnet::parse_variant(a.model);
  a.mc.t_train = a.t_train;
  a.mc.image_size = manifest.protocol.image_size;
  a.mc.validate();
  a.tc.seed = a.seed;
  // The network sees only the first T0 frames; the rest of each record is ground truth.
  mnet::ReadOptions ro;
  ro.frame_limit = static_cast<std::size_t>(a.mc.t0);
  const auto train_set = mnet::load_split(a.data, mnet::Split::kTrain, ro);
  const auto val_set = mnet::load_split(a.data, mnet::Split::kVal, ro);
  if (!a.quiet)
    a.tc.on_epoch = [](const mnet::EpochLog& e) {
      std::fprintf(stderr, "epoch %4d  train %.6g  val_l2 %.6g  lambda_reg %g  %.1fs\n", e.epoch, e.train_loss,
                   e.val_l2, e.lambda_reg, e.wall_time);
    };
  const auto res = mnet::train(a.mc, a.tc, train_set, val_set);
  mnet::save_model(a.out, res);
  const fs::path log = a.log.empty() ? fs::path(a.out.string() + ".log.csv") : a.log;
  mnet::write_training_log(log, res.log);
  std::cout << "best epoch " << res.best_epoch << ", stopped at " << res.stop_epoch
            << (res.early_stopped ? " (early stop)" : "") << "; checkpoint " << a.out.string() << ", log "
            << log.string() << "\n";
  return 0;
}

int run_eval(const EvalArgs& a) {
  mnet::EvalOptions opt;
  opt.horizons = a.horizons;
  opt.split = mnet::parse_split(a.split);
  opt.batch = a.batch;
  opt.expected_value = a.expected_value;
  const auto model = mnet::load_model(a.ckpt);
  const auto rep = mnet::evaluate_model(model, a.data, opt);
  mnet::write_report(a.report, rep);
  std::cout << rep.to_csv();
  return 0;
}

int run_baseline(const BaselineArgs& a) {
  mnet::EvalOptions opt;
  opt.horizons = a.horizons;
  opt.split = mnet::parse_split(a.split);
  const auto rep = mnet::evaluate_baseline(mnet::parse_baseline(a.method), a.data, opt);
  mnet::write_report(a.report, rep);
  std::cout << rep.to_csv();
  return 0;
}

int run_export(const ExportArgs& a) {
  auto reader = mnet::read_dataset(a.data);
  const auto rec = reader.read(a.index);
  fs::create_directories(a.dir);
  char name[64];
  for (std::size_t t = 0; t < rec.frames.size(); ++t) {
    std::snprintf(name, sizeof name, "frame_%03zu.ppm", t);
    mnet::write_ppm(a.dir / name, rec.frames[t]);
  }
  std::size_t maps = 0;
  if (!a.ckpt.empty()) {
    const auto lm = mnet::load_model(a.ckpt);
    if (lm.model.config().variant != mnet::Variant::kMN4)
      throw mnet::VariantMismatch("heatmap export needs an MN4 checkpoint");
    const int horizon = a.horizon > 0 ? a.horizon : lm.model.config().t_train;
    const auto pred = mnet::forward_predict(lm.model, std::span<const mnet::Frame>(rec.frames), horizon);
    for (const auto& m : pred.maps) {
      std::snprintf(name, sizeof name, "heatmap_%03zu.pgm", maps++);
      mnet::write_pgm(a.dir / name, m.p, m.h, m.w);
    }
  }
  std::cout << "exported " << rec.frames.size() << " frames and " << maps << " heatmaps to " << a.dir.string()
            << "\n";
  return 0;
}

int run_gradcheck(const GradArgs& a) {
  mnet::GradSuiteOptions opt;
  opt.tol = a.tol;
  opt.seed = a.seed;
  const auto cases = mnet::run_gradient_suite(opt);
  std::size_t failed = 0;
  for (const auto& c : cases) {
    const bool ok = c.report.passed && c.report.checked > 0;
    failed += ok ? 0 : 1;
    std::printf("%s %-24s max_rel %.3e  checked %zu  skipped %zu%s%s\n", ok ? "PASS" : "FAIL", c.name.c_str(),
                c.report.max_rel_error, c.report.checked, c.report.skipped, ok ? "" : "  worst ",
                ok ? "" : c.report.worst.c_str());
  }
  std::printf("%zu/%zu gradient checks passed (tol %g)\n", cases.size() - failed, cases.size(), a.tol);
  return failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic sliding-block videos, trajectory predictors and their evaluation", "mnet"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate a dataset");
  g->add_option("--scenario", gen.scenario, "s0, s1 or s2")->required()->check(CLI::IsMember({"s0", "s1", "s2"}));
  g->add_option("--count", gen.count, "Number of sequences")->required()->check(CLI::PositiveNumber);
  g->add_option("--seed", gen.seed, "Random seed")->required();
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--image-size", gen.image_size, "Image side in pixels")->capture_default_str();
  g->add_option("--frames-max", gen.frames_max, "Raw frames per simulation")->capture_default_str();
  g->add_option("--workers", gen.workers, "Rendering threads")->capture_default_str();
  g->add_option("--train-frac", gen.train_frac, "Training fraction")->capture_default_str();
  g->add_option("--val-frac", gen.val_frac, "Validation fraction")->capture_default_str();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a predictor");
  t->add_option("--data", tr.data, "Dataset directory")->required();
  t->add_option("--model", tr.model, "mn1, mn2, mn3, mn4 or simnet")
      ->required()
      ->check(CLI::IsMember({"mn1", "mn2", "mn3", "mn4", "simnet"}));
  t->add_option("--t-train", tr.t_train, "Supervised frames per sequence")->required();
  t->add_option("--seed", tr.seed, "Initialization and shuffling seed")->required();
  t->add_option("--out", tr.out, "Checkpoint path")->required();
  t->add_option("--epochs-max", tr.tc.epochs_max, "Epoch cap")->capture_default_str();
  t->add_option("--patience", tr.tc.patience, "Early-stopping patience")->capture_default_str();
  t->add_option("--batch", tr.tc.batch, "Batch size")->capture_default_str();
  t->add_option("--lr", tr.tc.lr, "RMSProp learning rate")->capture_default_str();
  t->add_option("--t0", tr.mc.t0, "Observed frames")->capture_default_str();
  t->add_option("--channels", tr.mc.channels, "State channels C")->capture_default_str();
  t->add_option("--state-size", tr.mc.state_size, "State side")->capture_default_str();
  t->add_option("--vector-units", tr.mc.vector_units, "Vector state width")->capture_default_str();
  t->add_option("--extractor-base", tr.mc.extractor_base, "First extractor layer width")->capture_default_str();
  t->add_option("--delta", tr.mc.delta, "Heatmap cell size in pixels")->capture_default_str();
  t->add_option("--log", tr.log, "Training log CSV (default: CKPT.log.csv)");
  t->add_flag("--expected-value", tr.tc.expected_value_decoding, "Validate MN4 with the map mean");
  t->add_flag("--quiet", tr.quiet, "No per-epoch progress");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
  e->add_option("--data", ev.data, "Dataset directory")->required();
  e->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
  e->add_option("--horizons", ev.horizons, "Comma-separated horizons")->delimiter(',')->capture_default_str();
  e->add_option("--report", ev.report, "Report path (.json or .csv)")->required();
  e->add_option("--split", ev.split, "Split to evaluate")->check(CLI::IsMember({"train", "val", "test"}));
  e->add_option("--batch", ev.batch, "Inference batch")->capture_default_str();
  e->add_flag("--expected-value", ev.expected_value, "Use the map mean as MN4 point estimate");

  BaselineArgs bl;
  auto* b = app.add_subcommand("baseline", "Evaluate a polynomial baseline");
  b->add_option("--data", bl.data, "Dataset directory")->required();
  b->add_option("--method", bl.method, "linear or quadratic")
      ->required()
      ->check(CLI::IsMember({"linear", "quadratic"}));
  b->add_option("--horizons", bl.horizons, "Comma-separated horizons")->delimiter(',')->capture_default_str();
  b->add_option("--report", bl.report, "Report path (.json or .csv)")->required();
  b->add_option("--split", bl.split, "Split to evaluate")->check(CLI::IsMember({"train", "val", "test"}));

  ExportArgs ex;
  auto* x = app.add_subcommand("export", "Export frames (P6) and MN4 heatmaps (P5)");
  x->add_option("--data", ex.data, "Dataset directory")->required();
  x->add_option("--index", ex.index, "Record index")->required();
  x->add_option("--ppm", ex.dir, "Output directory")->required();
  x->add_option("--ckpt", ex.ckpt, "MN4 checkpoint whose predicted maps are exported");
  x->add_option("--horizon", ex.horizon, "Predicted maps to export (default: T_train)");

  GradArgs gr;
  auto* gc = app.add_subcommand("gradcheck", "Run the gradient-check suite");
  gc->add_option("--tol", gr.tol, "Maximum relative error")->capture_default_str();
  gc->add_option("--seed", gr.seed, "Input seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    const auto parsed = app.get_subcommands();
    std::cerr << "error: " << err.what() << "\n\n" << (parsed.empty() ? app.help() : parsed.front()->help());
    return 2;
  }

  try {
    if (g->parsed()) return run_gen(gen);
    if (t->parsed()) return run_train(std::move(tr));
    if (e->parsed()) return run_eval(ev);
    if (b->parsed()) return run_baseline(bl);
    if (x->parsed()) return run_export(ex);
    return run_gradcheck(gr);
  } catch (const mnet::Error& err) {
    std::cerr << json{{"error", error_kind(err)}, {"message", err.what()}}.dump() << "\n";
    return 1;
  } catch (const std::exception& err) {
    std::cerr << json{{"error", "internal"}, {"message", err.what()}}.dump() << "\n";
    return 1;
  }
}
