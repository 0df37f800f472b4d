#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "mnet/error.hpp"
#include "mnet/evaluate.hpp"
#include "mnet/serialize.hpp"

using namespace mnet;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mnet_eval_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<Vec2> line(int n, Vec2 offset = Vec2::Zero()) {
  std::vector<Vec2> v;
  for (int t = 0; t < n; ++t) v.push_back(Vec2(t, 2.0 * t) + offset);
  return v;
}

GaussPrediction unit_gauss(const Vec2& mu) {
  GaussPrediction g;
  g.mu = mu;
  return g;
}

HeatmapPrediction uniform_map(int side, double delta = 1.0) {
  return heatmap_from_logits(std::vector<float>(static_cast<std::size_t>(side) * side, 0.0f), side, side, delta);
}

}  // namespace

TEST_CASE("nearest-rank percentiles") {
  CHECK(percentile_nearest_rank({5.0}, 25) == 5.0);
  const std::vector<double> v{15, 20, 35, 40, 50};
  CHECK(percentile_nearest_rank(v, 30) == 20);
  CHECK(percentile_nearest_rank(v, 40) == 20);
  CHECK(percentile_nearest_rank(v, 50) == 35);
  CHECK(percentile_nearest_rank(v, 100) == 50);
  CHECK(percentile_nearest_rank(v, 0) == 15);
  CHECK(percentile_nearest_rank({4, 1, 3, 2}, 25) == 1);
  CHECK(percentile_nearest_rank({4, 1, 3, 2}, 75) == 3);
  CHECK_THROWS_AS(percentile_nearest_rank({}, 50), NoSequences);
  CHECK_THROWS_AS(percentile_nearest_rank(v, 101), InvalidSpec);
}

TEST_CASE("l2_at examples") {
  std::vector<std::vector<Vec2>> gts{line(40), line(40), line(25)};
  auto st = l2_at(gts, gts, {20, 40});
  CHECK(st[0].mean_l2 == 0.0);
  CHECK(st[1].mean_l2 == 0.0);
  CHECK(st[0].count == 3);
  CHECK(st[1].count == 2);
  CHECK(st[1].excluded == 1);

  std::vector<std::vector<Vec2>> off{line(40, {3, 4}), line(40, {3, 4}), line(40, {3, 4})};
  st = l2_at(off, gts, {1, 20, 40});
  for (const auto& h : st) {
    CHECK(h.mean_l2 == doctest::Approx(5.0));
    CHECK(h.p25 == doctest::Approx(5.0));
    CHECK(h.p75 == doctest::Approx(5.0));
    CHECK_FALSE(h.ln_perplexity.has_value());
  }

  // Horizon h reads output index h - 1.
  std::vector<std::vector<Vec2>> one{line(20)};
  auto p = line(20);
  p[19] += Vec2(6, 8);
  CHECK(l2_at({p}, one, {20})[0].mean_l2 == doctest::Approx(10.0));
  CHECK(l2_at({p}, one, {19})[0].mean_l2 == 0.0);

  CHECK_THROWS_AS(l2_at({line(10)}, {line(10)}, {20}), NoSequences);
  CHECK_THROWS_AS(l2_at({line(10)}, {}, {5}), ShapeMismatch);
  CHECK_THROWS_AS(l2_at({line(3)}, {line(10)}, {5}), ShapeMismatch);
  CHECK_THROWS_AS(MetricsAccumulator({}), InvalidSpec);
}

TEST_CASE("percentile band brackets the median") {
  std::mt19937_64 rng(2);
  std::vector<std::vector<Vec2>> preds, gts;
  for (int i = 0; i < 37; ++i) {
    gts.push_back(line(30));
    preds.push_back(line(30, Vec2(uniform(rng, -5, 5), uniform(rng, -5, 5))));
  }
  for (const auto& h : l2_at(preds, gts, {5, 10, 30})) {
    CHECK(h.p25 <= h.median);
    CHECK(h.median <= h.p75);
  }
}

TEST_CASE("perplexity examples") {
  const double ln2pi = std::log(2 * std::numbers::pi);
  CHECK(std::abs(gaussian_nll(unit_gauss({3, 4}), {3, 4}) - ln2pi) < 1e-12);
  CHECK(gaussian_nll(unit_gauss({3, 4}), {4, 4}) == doctest::Approx(ln2pi + 0.5));

  const auto u = uniform_map(128);
  CHECK(std::abs(heatmap_nll(u, {60.2, 17.9}) - std::log(16384.0)) < 1e-6);
  CHECK(std::abs(heatmap_nll(uniform_map(128, 0.5), {30, 20}) - (std::log(16384.0) - 2 * std::log(2.0))) < 1e-6);

  std::vector<float> spike(256, -1e4f);
  spike[5 * 16 + 9] = 0.0f;
  const auto s = heatmap_from_logits(spike, 16, 16, 1.0);
  CHECK(heatmap_nll(s, {9.3, 4.8}) == doctest::Approx(0.0));
  CHECK_THROWS_AS(heatmap_nll(s, {2, 2}), ZeroMass);

  // Aggregation: a zero-mass hit makes the horizon's perplexity infinite and is counted.
  PredictionSet ps;
  ps.kind = HeadKind::kHeatmap;
  ps.maps.assign(3, s);
  std::vector<Vec2> hit(3, Vec2(9, 5)), miss(3, Vec2(2, 2));
  CHECK(ln_perplexity({ps}, {hit}, 3) == doctest::Approx(0.0));
  MetricsAccumulator acc({3});
  acc.add(hit, ps);
  acc.add(miss, ps);
  const auto r = acc.report("mn4");
  CHECK(std::isinf(*r.horizons[0].ln_perplexity));
  CHECK(r.horizons[0].zero_mass == 1);

  PredictionSet g;
  g.kind = HeadKind::kGauss;
  g.gauss.assign(4, unit_gauss({1, 1}));
  CHECK(ln_perplexity({g, g}, {std::vector<Vec2>(4, Vec2(1, 1)), std::vector<Vec2>(4, Vec2(1, 1))}, 4) ==
        doctest::Approx(ln2pi));
  PredictionSet pts;
  pts.points = line(4);
  CHECK_THROWS_AS(ln_perplexity({pts}, {line(4)}, 2), VariantMismatch);
}

TEST_CASE("entropy examples and bounds") {
  CHECK(std::abs(entropy(uniform_map(128)) - std::log(16384.0)) < 1e-6);
  std::vector<float> one_hot(64, -1e4f);
  one_hot[7] = 0.0f;
  CHECK(entropy(heatmap_from_logits(one_hot, 8, 8, 1.0)) == doctest::Approx(0.0));
  CHECK(std::abs(entropy(unit_gauss({0, 0})) - std::log(2 * std::numbers::pi * std::numbers::e)) < 1e-12);
  CHECK(std::log(2 * std::numbers::pi * std::numbers::e) == doctest::Approx(2.8379).epsilon(1e-4));

  std::mt19937_64 rng(8);
  for (int i = 0; i < 50; ++i) {
    std::vector<float> logits(256);
    const double scale = uniform(rng, 0.0, 30.0);
    for (auto& l : logits) l = static_cast<float>(scale * uniform(rng, -1, 1));
    const double h = entropy(heatmap_from_logits(logits, 16, 16, 1.0));
    CHECK(h >= 0.0);
    CHECK(h <= std::log(256.0) + 1e-12);
    GaussPrediction g;
    g.lambda1 = uniform(rng, 0.01, 100);
    g.lambda2 = uniform(rng, 0.01, 100);
    CHECK(entropy(g) >= std::log(2 * std::numbers::pi * std::numbers::e) + 0.5 * std::log(0.01 * 0.01));
  }
}

TEST_CASE("report JSON round trip and CSV") {
  MetricsAccumulator acc({2, 5}, false);
  std::mt19937_64 rng(4);
  for (int i = 0; i < 9; ++i) {
    PredictionSet g;
    g.kind = HeadKind::kGauss;
    for (int t = 0; t < 6; ++t) {
      GaussPrediction gp = unit_gauss(Vec2(uniform(rng, 0, 10), uniform(rng, 0, 10)));
      gp.lambda1 = uniform(rng, 0.5, 3);
      gp.theta = 0.3 * t;
      g.gauss.push_back(gp);
    }
    acc.add(line(i % 2 ? 6 : 3), g);
  }
  const auto r = acc.report("mn3", nlohmann::json{{"seed", 4}});
  CHECK(r.sequences == 9);
  CHECK(r.at(5).excluded == 5);
  CHECK(r.entropy.size() == 5);
  CHECK(r.entropy[0].count == 9);

  const auto dir = scratch("report");
  write_report(dir / "r.json", r);
  CHECK(read_report(dir / "r.json") == r);
  const MetricsReport parsed = nlohmann::json::parse(nlohmann::json(r).dump()).get<MetricsReport>();
  CHECK(parsed == r);

  MetricsReport inf = r;
  inf.horizons[0].ln_perplexity = std::numeric_limits<double>::infinity();
  write_report(dir / "inf.json", inf);
  CHECK(read_report(dir / "inf.json") == inf);

  write_report(dir / "r.csv", r);
  const auto csv = read_file(dir / "r.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  CHECK_THROWS_AS(write_report(dir / "r.txt", r), InvalidSpec);
  CHECK_THROWS_AS(r.at(7), InvalidSpec);
}

TEST_CASE("dataset evaluation, generalization table and determinism") {
  const auto dir = scratch("data");
  auto cfg = ScenarioConfig::defaults(Scenario::kS0, 12, 3);
  cfg.train_frac = 0.5;
  cfg.val_frac = 0.25;
  const auto cam = CameraModel::for_image_size(16);
  const auto proto = Protocol::for_image_size(16);
  generate_dataset(cfg, cam, proto, dir);

  EvalOptions opt;
  opt.horizons = {5, 20};
  const auto lin = evaluate_baseline(BaselineMethod::kLinear, dir, opt);
  CHECK(lin.sequences == 3);
  CHECK(lin.at(5).count + lin.at(5).excluded == 3);
  CHECK(lin.config.at("split") == "test");
  const auto lin2 = evaluate_baseline(BaselineMethod::kLinear, dir, opt);
  CHECK(lin2 == lin);

  ModelConfig mc;
  mc.variant = Variant::kMN4;
  mc.image_size = 16;
  mc.state_size = 4;
  mc.channels = 8;
  mc.vector_units = 8;
  mc.extractor_base = 4;
  mc.t_train = 6;
  std::vector<SequenceRecord> tr, va;
  DatasetReader rt(dir, {}, Split::kTrain), rv(dir, {}, Split::kVal);
  while (auto r = rt.next()) tr.push_back(std::move(*r));
  while (auto r = rv.next()) va.push_back(std::move(*r));
  TrainConfig tc;
  tc.epochs_max = 2;
  const auto res = train(mc, tc, tr, va);
  save_model(dir / "m6.mnck", res);
  const auto rep = evaluate_model(load_model(dir / "m6.mnck"), dir, opt);
  CHECK(rep.predictor == "mn4");
  REQUIRE(rep.at(5).ln_perplexity.has_value());
  CHECK(*rep.at(5).ln_perplexity >= 0.0);
  CHECK(rep.entropy.size() == 20);
  for (const auto& e : rep.entropy) CHECK(e.mean <= std::log(256.0) + 1e-9);
  CHECK(evaluate_model(load_model(dir / "m6.mnck"), dir, opt) == rep);

  mc.t_train = 8;
  save_model(dir / "m8.mnck", train(mc, tc, tr, va));
  const auto table = generalization_table({{6, dir / "m6.mnck"}, {8, dir / "m8.mnck"}}, dir, opt);
  CHECK(table.l2.size() == 2);
  CHECK(table.l2[0][0] == doctest::Approx(rep.at(5).mean_l2));
  CHECK(table.baseline_l2.size() == 2);
  CHECK(table.baseline_l2[0][1] == doctest::Approx(lin.at(20).mean_l2));
  const auto csv = table.to_csv();
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
  CHECK_THROWS_AS(generalization_table({{6, dir / "nope.mnck"}}, dir, opt), MissingCheckpoint);

  ModelConfig wrong = mc;
  wrong.image_size = 32;
  TrainResult fake;
  fake.model = wrong;
  fake.best = MechaNet<float>(wrong, 0).params().cast<float>();
  save_model(dir / "wrong.mnck", fake);
  CHECK_THROWS_AS(evaluate_model(load_model(dir / "wrong.mnck"), dir, opt), ShapeMismatch);
}
