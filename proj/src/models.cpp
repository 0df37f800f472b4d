#include "mnet/models.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <utility>

#include "mnet/error.hpp"

namespace mnet {

using nlohmann::json;
namespace ad = mnet::ad;

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

bool is_pow2(int v) { return v > 0 && (v & (v - 1)) == 0; }

int log2_exact(int v) {
  int k = 0;
  while ((1 << k) < v) ++k;
  return k;
}

}  // namespace

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kMN1: return "mn1";
    case Variant::kMN2: return "mn2";
    case Variant::kMN3: return "mn3";
    case Variant::kMN4: return "mn4";
    case Variant::kSimNet: return "simnet";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  for (Variant v : {Variant::kMN1, Variant::kMN2, Variant::kMN3, Variant::kMN4, Variant::kSimNet})
    if (name == variant_name(v)) return v;
  throw InvalidSpec("unknown model '" + name + "'");
}

HeadKind head_kind(Variant v) {
  switch (v) {
    case Variant::kMN1:
    case Variant::kMN2: return HeadKind::kPoint;
    case Variant::kMN3: return HeadKind::kGauss;
    case Variant::kMN4: return HeadKind::kHeatmap;
    case Variant::kSimNet: return HeadKind::kSimNet;
  }
  throw InvalidSpec("bad variant");
}

// ---------------------------------------------------------------------------------------------
// Configuration

bool ModelConfig::tensor_state() const {
  return variant == Variant::kMN2 || variant == Variant::kMN3 || variant == Variant::kMN4;
}

int ModelConfig::extractor_layers() const { return log2_exact(image_size / state_size); }

int ModelConfig::map_size() const { return static_cast<int>(std::lround(image_size / delta)); }

void ModelConfig::validate() const {
  if (t0 < 1) throw InvalidSpec("T0 must be >= 1");
  if (variant != Variant::kSimNet && t_train <= t0) throw InvalidSpec("T_train must exceed T0");
  if (state_size < 1 || image_size % state_size != 0 || !is_pow2(image_size / state_size) ||
      image_size == state_size)
    throw InvalidSpec("image size must be the state size times a power of two >= 2");
  if (channels < 1 || vector_units < 1 || extractor_base < 1) throw InvalidSpec("layer widths must be >= 1");
  if (!(lambda_scale > 0) || !(lambda_floor > 0)) throw InvalidSpec("eigenvalue bounds must be positive");
  if (variant == Variant::kMN4) {
    if (!(delta > 0)) throw InvalidSpec("delta must be positive");
    const int m = map_size();
    if (std::abs(m * delta - image_size) > 1e-9 || m % state_size != 0 || !is_pow2(m / state_size) ||
        m == state_size)
      throw InvalidSpec("heatmap side image_size/delta must be the state size times a power of two >= 2");
  }
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"variant", variant_name(c.variant)},
           {"t0", c.t0},
           {"t_train", c.t_train},
           {"image_size", c.image_size},
           {"channels", c.channels},
           {"state_size", c.state_size},
           {"vector_units", c.vector_units},
           {"extractor_base", c.extractor_base},
           {"delta", c.delta},
           {"lambda_scale", c.lambda_scale},
           {"lambda_floor", c.lambda_floor},
           {"init_gain", c.init_gain}};
}

void from_json(const json& j, ModelConfig& c) {
  c.variant = parse_variant(j.at("variant").get<std::string>());
  c.t0 = j.at("t0").get<int>();
  c.t_train = j.at("t_train").get<int>();
  c.image_size = j.at("image_size").get<int>();
  c.channels = j.at("channels").get<int>();
  c.state_size = j.at("state_size").get<int>();
  c.vector_units = j.at("vector_units").get<int>();
  c.extractor_base = j.at("extractor_base").get<int>();
  c.delta = j.at("delta").get<double>();
  c.lambda_scale = j.at("lambda_scale").get<double>();
  c.lambda_floor = j.at("lambda_floor").get<double>();
  c.init_gain = j.value("init_gain", 1.0);
}

// ---------------------------------------------------------------------------------------------
// Prediction containers

Eigen::Matrix2d gaussian_covariance(double lambda1, double lambda2, double theta) {
  const double c = std::cos(theta), s = std::sin(theta);
  Eigen::Matrix2d r;
  r << c, -s, s, c;
  return r.transpose() * Eigen::Vector2d(lambda1, lambda2).asDiagonal() * r;
}

Vec2 HeatmapPrediction::argmax_center() const {
  const double best = *std::max_element(p.begin(), p.end());
  double sr = 0, sc = 0;
  int n = 0;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      if (p[static_cast<std::size_t>(r * w + c)] == best) {
        sr += r;
        sc += c;
        ++n;
      }
  return {sc / n * delta, sr / n * delta};
}

Vec2 HeatmapPrediction::expected_position() const {
  double sr = 0, sc = 0;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const double v = p[static_cast<std::size_t>(r * w + c)];
      sr += v * r;
      sc += v * c;
    }
  return {sc * delta, sr * delta};
}

bool HeatmapPrediction::cell_of(const Vec2& px, int& row, int& col) const {
  const long r = std::lround(px.y() / delta);
  const long c = std::lround(px.x() / delta);
  row = static_cast<int>(std::clamp<long>(r, 0, h - 1));
  col = static_cast<int>(std::clamp<long>(c, 0, w - 1));
  return r == row && c == col;
}

HeatmapPrediction heatmap_from_logits(std::span<const float> logits, int h, int w, double delta) {
  if (logits.size() != static_cast<std::size_t>(h) * w) throw ShapeMismatch("heatmap logits size");
  HeatmapPrediction m;
  m.h = h;
  m.w = w;
  m.delta = delta;
  m.logits.assign(logits.begin(), logits.end());
  m.p.resize(logits.size());
  const double mx = *std::max_element(logits.begin(), logits.end());
  double s = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    m.p[i] = std::exp(static_cast<double>(logits[i]) - mx);
    s += m.p[i];
  }
  for (auto& v : m.p) v /= s;
  return m;
}

std::size_t PredictionSet::size() const {
  switch (kind) {
    case HeadKind::kGauss: return gauss.size();
    case HeadKind::kHeatmap: return maps.size();
    default: return points.size();
  }
}

Vec2 PredictionSet::point(std::size_t t, bool expected_value) const {
  switch (kind) {
    case HeadKind::kGauss: return gauss.at(t).mu;
    case HeadKind::kHeatmap: return expected_value ? maps.at(t).expected_position() : maps.at(t).argmax_center();
    default: return points.at(t);
  }
}

template <typename T>
std::vector<T> frames_tensor(const std::vector<std::span<const Frame>>& items, const ModelConfig& cfg) {
  const int s = cfg.image_size;
  const int ch = 3 * cfg.t0;
  std::vector<T> x(items.size() * static_cast<std::size_t>(s) * s * ch);
  for (std::size_t n = 0; n < items.size(); ++n) {
    if (items[n].size() < static_cast<std::size_t>(cfg.t0))
      throw ShapeMismatch("need " + std::to_string(cfg.t0) + " observed frames, got " +
                          std::to_string(items[n].size()));
    for (int t = 0; t < cfg.t0; ++t) {
      const Frame& f = items[n][static_cast<std::size_t>(t)];
      if (f.h != s || f.w != s)
        throw ShapeMismatch("frame is " + std::to_string(f.h) + "x" + std::to_string(f.w) + ", model expects " +
                            std::to_string(s));
      for (int p = 0; p < s * s; ++p)
        for (int c = 0; c < 3; ++c)
          x[(n * static_cast<std::size_t>(s) * s + p) * ch + 3 * t + c] =
              static_cast<T>(f.rgb[static_cast<std::size_t>(p) * 3 + c]) / T(255);
    }
  }
  return x;
}

// ---------------------------------------------------------------------------------------------
// Network

template <typename T>
MechaNet<T>::Graph::Graph(ad::Tape<T>& tape, ad::ParameterSet<T>& params) : tape_(tape) {
  for (std::size_t i = 0; i < params.size(); ++i) vars_.emplace(params[i].name, tape.param(params[i]));
}

template <typename T>
MechaNet<T>::Graph::Graph(ad::Tape<T>& tape, const ad::ParameterSet<T>& params) : tape_(tape) {
  for (std::size_t i = 0; i < params.size(); ++i)
    vars_.emplace(params[i].name, tape.constant(params[i].shape, params[i].value));
}

template <typename T>
ad::Var<T> MechaNet<T>::Graph::operator()(const std::string& name) const {
  const auto it = vars_.find(name);
  if (it == vars_.end()) throw InvalidSpec("model has no parameter '" + name + "'");
  return it->second;
}

template <typename T>
MechaNet<T>::MechaNet(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  build(seed);
}

template <typename T>
MechaNet<T>::MechaNet(const ModelConfig& cfg, ad::ParameterSet<T> params) : cfg_(cfg) {
  cfg_.validate();
  build(0);
  if (params.size() != params_.size()) throw InvalidSpec("checkpoint parameter count does not match the model");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& mine = params_[i];
    if (!params.contains(mine.name)) throw InvalidSpec("checkpoint lacks parameter '" + mine.name + "'");
    const auto& theirs = params.get(mine.name);
    if (theirs.shape != mine.shape)
      throw InvalidSpec("parameter '" + mine.name + "' has shape " + ad::shape_str(theirs.shape) +
                        ", expected " + ad::shape_str(mine.shape));
    mine.value = theirs.value;
  }
}

template <typename T>
void MechaNet<T>::build(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double gain = cfg_.init_gain;
  auto weight = [&](const std::string& name, const ad::Shape& shape, int fan_in) {
    ad::init_gaussian(params_.add(name, shape), fan_in, rng, gain);
  };
  auto bias = [&](const std::string& name, int n) { params_.add(name, {n}); };

  const int layers = cfg_.extractor_layers();
  const int c = cfg_.channels;
  int in_c = 3 * cfg_.t0;
  for (int i = 0; i < layers; ++i) {
    const int out_c = i == layers - 1 ? c : cfg_.extractor_base << i;
    const std::string p = "feat/conv" + std::to_string(i);
    weight(p + "/w", {3, 3, in_c, out_c}, 9 * in_c);
    bias(p + "/b", out_c);
    in_c = out_c;
  }
  const int ss = cfg_.state_size;
  const int flat = ss * ss * c;
  const int u = cfg_.vector_units;
  const HeadKind kind = head_kind(cfg_.variant);

  if (!cfg_.tensor_state()) {
    weight("feat/fc/w", {flat, u}, flat);
    bias("feat/fc/b", u);
  }
  if (cfg_.variant == Variant::kSimNet) {
    weight("head_prime/fc/w", {u, cfg_.simnet_outputs()}, u);
    bias("head_prime/fc/b", cfg_.simnet_outputs());
    return;
  }

  if (cfg_.variant == Variant::kMN1) {
    weight("prop/lstm/wi", {u, 4 * u}, u);
    weight("prop/lstm/wh", {u, 4 * u}, u);
    bias("prop/lstm/b", 4 * u);
    // Forget gate starts open.
    auto& b = params_.get("prop/lstm/b");
    for (int j = u; j < 2 * u; ++j) b.value[static_cast<std::size_t>(j)] = T(1);
  } else {
    weight("prop/conv1/w", {3, 3, c, 2 * c}, 9 * c);
    bias("prop/conv1/b", 2 * c);
    weight("prop/conv2/w", {3, 3, 2 * c, c}, 18 * c);
    bias("prop/conv2/b", c);
  }

  const int state_flat = cfg_.tensor_state() ? flat : u;
  if (kind == HeadKind::kPoint || kind == HeadKind::kGauss) {
    const int k = kind == HeadKind::kPoint ? 2 : 5;
    weight("head/fc/w", {state_flat, k}, state_flat);
    bias("head/fc/b", k);
    weight("head_prime/fc/w", {state_flat, k * cfg_.t0}, state_flat);
    bias("head_prime/fc/b", k * cfg_.t0);
  } else {
    const int up = log2_exact(cfg_.map_size() / ss);
    for (const std::string prefix : {"head", "head_prime"}) {
      int cin = c;
      for (int i = 0; i < up; ++i) {
        const int last_c = prefix == "head" ? 1 : cfg_.t0;
        const int cout = i == up - 1 ? last_c : std::max(8, c >> (i + 1));
        const std::string p = prefix + "/deconv" + std::to_string(i);
        // Each output cell of a k=4, s=2 transposed conv sums 4 input taps per input channel.
        weight(p + "/w", {4, 4, cout, cin}, 4 * cin);
        bias(p + "/b", cout);
        cin = cout;
      }
    }
  }
}

template <typename T>
typename MechaNet<T>::State MechaNet<T>::feature_extract(const Graph& g, const ad::Var<T>& frames) const {
  const int s = cfg_.image_size;
  if (frames.shape() != ad::Shape{frames.dim(0), s, s, 3 * cfg_.t0})
    throw ShapeMismatch("feature_extract expects [N," + std::to_string(s) + "," + std::to_string(s) + "," +
                        std::to_string(3 * cfg_.t0) + "], got " + ad::shape_str(frames.shape()));
  ad::Var<T> x = frames;
  for (int i = 0; i < cfg_.extractor_layers(); ++i) {
    const std::string p = "feat/conv" + std::to_string(i);
    x = ad::relu(ad::conv2d_asym(x, g(p + "/w"), g(p + "/b"), 2, 0, 1));
  }
  State st;
  if (cfg_.tensor_state()) {
    st.s = cfg_.variant == Variant::kMN4 ? ad::l2_normalize_channels(x) : x;
    return st;
  }
  const int n = frames.dim(0);
  auto flat = ad::reshape(x, {n, static_cast<int>(x.size()) / n});
  st.s = ad::tanh(ad::linear(flat, g("feat/fc/w"), g("feat/fc/b")));
  st.c = g.tape().constant({n, cfg_.vector_units}, T(0));
  return st;
}

template <typename T>
typename MechaNet<T>::State MechaNet<T>::propagate(const Graph& g, const State& state) const {
  if (cfg_.variant == Variant::kSimNet) throw VariantMismatch("SimNet has no propagation network");
  if (cfg_.variant == Variant::kMN1) {
    if (state.s.shape() != ad::Shape{state.s.dim(0), cfg_.vector_units})
      throw ShapeMismatch("LSTM state shape " + ad::shape_str(state.s.shape()));
    const ad::LstmParams<T> p{g("prop/lstm/wi"), g("prop/lstm/wh"), g("prop/lstm/b")};
    const auto out = ad::lstm_cell(state.s, state.s, state.c, p);
    return {out.h, out.c};
  }
  const int ss = cfg_.state_size;
  if (state.s.shape() != ad::Shape{state.s.dim(0), ss, ss, cfg_.channels})
    throw ShapeMismatch("tensor state shape " + ad::shape_str(state.s.shape()));
  auto h = ad::relu(ad::conv2d(state.s, g("prop/conv1/w"), g("prop/conv1/b"), 1, 1));
  auto next = ad::conv2d(h, g("prop/conv2/w"), g("prop/conv2/b"), 1, 1);
  if (cfg_.variant == Variant::kMN4) next = ad::l2_normalize_channels(next);
  return {next, {}};
}

template <typename T>
ad::Var<T> MechaNet<T>::decode_point(const ad::Var<T>& raw) const {
  const T half = static_cast<T>(cfg_.image_size / 2.0);
  return ad::add_scalar(ad::scale(raw, half), half);
}

template <typename T>
ad::Var<T> MechaNet<T>::decode_gauss(const ad::Var<T>& raw) const {
  const auto mu = decode_point(ad::slice_cols(raw, 0, 2));
  const auto lam = ad::scaled_sigmoid(ad::slice_cols(raw, 2, 4), static_cast<T>(cfg_.lambda_scale),
                                      static_cast<T>(cfg_.lambda_floor));
  return ad::concat_cols<T>({mu, lam, ad::slice_cols(raw, 4, 5)});
}

template <typename T>
ad::Var<T> MechaNet<T>::deconv_stack(const Graph& g, const std::string& prefix, const ad::Var<T>& s) const {
  const int up = log2_exact(cfg_.map_size() / cfg_.state_size);
  ad::Var<T> x = s;
  for (int i = 0; i < up; ++i) {
    const std::string p = prefix + "/deconv" + std::to_string(i);
    x = ad::conv_transpose2d(x, g(p + "/w"), g(p + "/b"), 2, 1);
    if (i + 1 < up) x = ad::relu(x);
  }
  return x;
}

template <typename T>
ad::Var<T> MechaNet<T>::head(const Graph& g, const State& state) const {
  const int n = state.s.dim(0);
  switch (head_kind(cfg_.variant)) {
    case HeadKind::kPoint:
    case HeadKind::kGauss: {
      auto flat = ad::reshape(state.s, {n, static_cast<int>(state.s.size()) / n});
      auto raw = ad::linear(flat, g("head/fc/w"), g("head/fc/b"));
      return head_kind(cfg_.variant) == HeadKind::kPoint ? decode_point(raw) : decode_gauss(raw);
    }
    case HeadKind::kHeatmap: {
      if (!cfg_.tensor_state()) throw VariantMismatch("heatmap head needs a tensor state");
      const int m = cfg_.map_size();
      return ad::reshape(deconv_stack(g, "head", state.s), {n, m * m});
    }
    case HeadKind::kSimNet: break;
  }
  throw VariantMismatch("SimNet has no per-step head");
}

template <typename T>
ad::Var<T> MechaNet<T>::head_prime(const Graph& g, const State& s0) const {
  const int n = s0.s.dim(0);
  const HeadKind kind = head_kind(cfg_.variant);
  if (kind == HeadKind::kHeatmap) return deconv_stack(g, "head_prime", s0.s);
  auto flat = ad::reshape(s0.s, {n, static_cast<int>(s0.s.size()) / n});
  return ad::linear(flat, g("head_prime/fc/w"), g("head_prime/fc/b"));
}

template <typename T>
std::vector<ad::Var<T>> MechaNet<T>::forward(const Graph& g, const ad::Var<T>& frames, int horizon) const {
  const HeadKind kind = head_kind(cfg_.variant);
  if (kind == HeadKind::kSimNet) throw VariantMismatch("SimNet predicts parameters, not trajectories");
  if (horizon < cfg_.t0)
    throw ShapeMismatch("horizon " + std::to_string(horizon) + " is shorter than T0 = " + std::to_string(cfg_.t0));
  const int n = frames.dim(0);
  const State s0 = feature_extract(g, frames);
  const auto prime = head_prime(g, s0);
  std::vector<ad::Var<T>> outs;
  outs.reserve(static_cast<std::size_t>(horizon));
  if (kind == HeadKind::kHeatmap) {
    const int m = cfg_.map_size();
    const auto cols = ad::reshape(prime, {n * m * m, cfg_.t0});
    for (int t = 0; t < cfg_.t0; ++t) outs.push_back(ad::reshape(ad::slice_cols(cols, t, t + 1), {n, m * m}));
  } else {
    const int k = kind == HeadKind::kPoint ? 2 : 5;
    for (int t = 0; t < cfg_.t0; ++t) {
      const auto raw = ad::slice_cols(prime, k * t, k * (t + 1));
      outs.push_back(kind == HeadKind::kPoint ? decode_point(raw) : decode_gauss(raw));
    }
  }
  State s = s0;
  for (int t = cfg_.t0; t < horizon; ++t) {
    s = propagate(g, s);
    outs.push_back(head(g, s));
  }
  return outs;
}

// ---------------------------------------------------------------------------------------------
// Losses

BatchTargets BatchTargets::from_records(const std::vector<const SequenceRecord*>& items, int steps) {
  BatchTargets tg;
  tg.n = static_cast<int>(items.size());
  tg.steps = steps;
  tg.y.assign(static_cast<std::size_t>(steps) * tg.n * 2, 0.0);
  tg.weight.assign(static_cast<std::size_t>(steps) * tg.n, 0.0);
  tg.det_weight.assign(static_cast<std::size_t>(steps) * tg.n, 0.0);
  for (int n = 0; n < tg.n; ++n) {
    const auto& gt = items[static_cast<std::size_t>(n)]->pixels_gt;
    const int valid = std::min<int>(steps, static_cast<int>(gt.size()));
    for (int t = 0; t < valid; ++t) {
      const std::size_t i = static_cast<std::size_t>(t) * tg.n + n;
      tg.y[2 * i] = gt[static_cast<std::size_t>(t)].x();
      tg.y[2 * i + 1] = gt[static_cast<std::size_t>(t)].y();
      tg.weight[i] = 1.0 / (static_cast<double>(tg.n) * valid);
      tg.det_weight[i] = 1.0 / tg.n;
    }
  }
  return tg;
}

namespace {

template <typename T>
ad::Var<T> step_targets(ad::Tape<T>& tape, const BatchTargets& tg, int t) {
  const auto b = tg.y.begin() + static_cast<std::ptrdiff_t>(t) * tg.n * 2;
  return tape.constant({tg.n, 2}, std::vector<T>(b, b + 2 * tg.n));
}

template <typename T>
ad::Var<T> step_weights(ad::Tape<T>& tape, const std::vector<double>& w, int n, int t) {
  const auto b = w.begin() + static_cast<std::ptrdiff_t>(t) * n;
  return tape.constant({n}, std::vector<T>(b, b + n));
}

template <typename T>
void require_steps(const std::vector<ad::Var<T>>& preds, const BatchTargets& tg, int cols) {
  if (preds.size() > static_cast<std::size_t>(tg.steps)) throw ShapeMismatch("more predictions than target steps");
  for (const auto& p : preds)
    if (p.shape() != ad::Shape{tg.n, cols})
      throw ShapeMismatch("prediction shape " + ad::shape_str(p.shape()) + " does not match batch targets");
}

}  // namespace

template <typename T>
ad::Var<T> loss_l2(ad::Tape<T>& tape, const std::vector<ad::Var<T>>& preds, const BatchTargets& tg) {
  require_steps(preds, tg, 2);
  ad::Var<T> total = tape.constant({1}, T(0));
  for (std::size_t t = 0; t < preds.size(); ++t) {
    const int ti = static_cast<int>(t);
    const auto sq = ad::sum_cols(ad::square(ad::sub(preds[t], step_targets(tape, tg, ti))));
    total = ad::add(total, ad::sum(ad::mul(sq, step_weights(tape, tg.weight, tg.n, ti))));
  }
  return total;
}

template <typename T>
ad::Var<T> loss_gaussian(ad::Tape<T>& tape, const std::vector<ad::Var<T>>& preds, const BatchTargets& tg,
                         double lambda_reg) {
  require_steps(preds, tg, 5);
  ad::Var<T> total = tape.constant({1}, T(0));
  for (std::size_t t = 0; t < preds.size(); ++t) {
    const int ti = static_cast<int>(t);
    const auto& p = preds[t];
    const auto d = ad::sub(step_targets(tape, tg, ti), ad::slice_cols(p, 0, 2));
    const auto dx = ad::slice_cols(d, 0, 1), dy = ad::slice_cols(d, 1, 2);
    const auto l1 = ad::slice_cols(p, 2, 3), l2 = ad::slice_cols(p, 3, 4);
    const auto th = ad::slice_cols(p, 4, 5);
    const auto c = ad::cos(th), s = ad::sin(th);
    const auto u1 = ad::sub(ad::mul(c, dx), ad::mul(s, dy));
    const auto u2 = ad::add(ad::mul(s, dx), ad::mul(c, dy));
    auto nll = ad::add(ad::log(l1), ad::log(l2));
    nll = ad::add(nll, ad::add(ad::div(ad::square(u1), l1), ad::div(ad::square(u2), l2)));
    nll = ad::add_scalar(ad::scale(nll, T(0.5)), static_cast<T>(kLog2Pi));
    total = ad::add(total, ad::sum(ad::mul(ad::reshape(nll, {tg.n}), step_weights(tape, tg.weight, tg.n, ti))));
    if (lambda_reg != 0.0) {
      const auto det = ad::reshape(ad::mul(l1, l2), {tg.n});
      const auto reg = ad::sum(ad::mul(det, step_weights(tape, tg.det_weight, tg.n, ti)));
      total = ad::add(total, ad::scale(reg, static_cast<T>(lambda_reg)));
    }
  }
  return total;
}

template <typename T>
ad::Var<T> loss_heatmap(ad::Tape<T>& tape, const std::vector<ad::Var<T>>& logits, const BatchTargets& tg,
                        int map_h, int map_w, double delta, std::size_t* clamped) {
  require_steps(logits, tg, map_h * map_w);
  ad::Var<T> total = tape.constant({1}, T(0));
  std::size_t n_clamped = 0;
  HeatmapPrediction grid;
  grid.h = map_h;
  grid.w = map_w;
  grid.delta = delta;
  for (std::size_t t = 0; t < logits.size(); ++t) {
    const int ti = static_cast<int>(t);
    std::vector<int> idx(static_cast<std::size_t>(tg.n));
    for (int n = 0; n < tg.n; ++n) {
      const std::size_t i = t * tg.n + static_cast<std::size_t>(n);
      int row = 0, col = 0;
      if (tg.weight[i] != 0.0 && !grid.cell_of(Vec2(tg.y[2 * i], tg.y[2 * i + 1]), row, col)) ++n_clamped;
      idx[static_cast<std::size_t>(n)] = row * map_w + col;
    }
    const auto lp = ad::pick(ad::log_softmax(logits[t]), std::span<const int>(idx));
    total = ad::sub(total, ad::sum(ad::mul(lp, step_weights(tape, tg.weight, tg.n, ti))));
  }
  if (clamped) *clamped = n_clamped;
  return ad::add_scalar(total, static_cast<T>(2.0 * std::log(delta)));
}

template <typename T>
std::vector<PredictionSet> decode_outputs(const std::vector<ad::Var<T>>& outs, const ModelConfig& cfg) {
  const HeadKind kind = head_kind(cfg.variant);
  const int n = outs.empty() ? 0 : outs.front().dim(0);
  std::vector<PredictionSet> sets(static_cast<std::size_t>(n));
  for (auto& s : sets) s.kind = kind;
  const int m = cfg.map_size();
  for (const auto& o : outs) {
    const auto v = o.value();
    for (int i = 0; i < n; ++i) {
      auto& set = sets[static_cast<std::size_t>(i)];
      if (kind == HeadKind::kPoint) {
        set.points.emplace_back(v[2 * i], v[2 * i + 1]);
      } else if (kind == HeadKind::kGauss) {
        GaussPrediction gp;
        gp.mu = Vec2(v[5 * i], v[5 * i + 1]);
        gp.lambda1 = v[5 * i + 2];
        gp.lambda2 = v[5 * i + 3];
        gp.theta = v[5 * i + 4];
        set.gauss.push_back(gp);
      } else if (kind == HeadKind::kHeatmap) {
        const auto row = v.subspan(static_cast<std::size_t>(i) * m * m, static_cast<std::size_t>(m) * m);
        std::vector<float> f(row.begin(), row.end());
        set.maps.push_back(heatmap_from_logits(f, m, m, cfg.delta));
      }
    }
  }
  return sets;
}

template <typename T>
std::vector<PredictionSet> forward_predict(const MechaNet<T>& model,
                                           const std::vector<std::span<const Frame>>& items, int horizon,
                                           int batch) {
  std::vector<PredictionSet> out;
  out.reserve(items.size());
  const std::size_t step = static_cast<std::size_t>(std::max(1, batch));
  for (std::size_t b = 0; b < items.size(); b += step) {
    const std::vector<std::span<const Frame>> chunk(items.begin() + static_cast<std::ptrdiff_t>(b),
                                                    items.begin() + static_cast<std::ptrdiff_t>(std::min(items.size(), b + step)));
    ad::Tape<T> tape;
    const typename MechaNet<T>::Graph g(tape, model.params());
    const int s = model.config().image_size;
    const auto x = tape.constant({static_cast<int>(chunk.size()), s, s, 3 * model.config().t0},
                                 frames_tensor<T>(chunk, model.config()));
    auto sets = decode_outputs(model.forward(g, x, horizon), model.config());
    for (auto& set : sets) out.push_back(std::move(set));
  }
  return out;
}

template <typename T>
PredictionSet forward_predict(const MechaNet<T>& model, std::span<const Frame> frames, int horizon) {
  return forward_predict(model, std::vector<std::span<const Frame>>{frames}, horizon, 1).front();
}

// ---------------------------------------------------------------------------------------------
// SimNet supervision

std::vector<double> simnet_target(const SequenceRecord& rec, int t0) {
  if (rec.length() < static_cast<std::size_t>(t0)) throw ShapeMismatch("record shorter than T0");
  std::vector<double> y;
  y.reserve(static_cast<std::size_t>(3 + 2 * t0 + 2));
  y.push_back(rec.experiment.plane.theta_x);
  y.push_back(rec.experiment.plane.theta_y);
  if (const auto* h = std::get_if<HomogeneousFriction>(&rec.experiment.friction)) {
    y.push_back(h->rho);
  } else {
    const auto& g = std::get<PatchGridFriction>(rec.experiment.friction);
    y.push_back(g.scale_factor * std::accumulate(g.rhos.begin(), g.rhos.end(), 0.0) / g.rhos.size());
  }
  for (int t = 0; t < t0; ++t) {
    y.push_back(rec.pixels_gt[static_cast<std::size_t>(t)].x());
    y.push_back(rec.pixels_gt[static_cast<std::size_t>(t)].y());
  }
  y.push_back(rec.velocities_px[static_cast<std::size_t>(t0 - 1)].x());
  y.push_back(rec.velocities_px[static_cast<std::size_t>(t0 - 1)].y());
  return y;
}

SimNetStats simnet_stats(const std::vector<SequenceRecord>& train, int t0) {
  if (train.empty()) throw EmptyDataset("SimNet statistics need training records");
  const std::size_t k = static_cast<std::size_t>(3 + 2 * t0 + 2);
  SimNetStats st{std::vector<double>(k, 0.0), std::vector<double>(k, 0.0)};
  for (const auto& r : train) {
    const auto y = simnet_target(r, t0);
    for (std::size_t i = 0; i < k; ++i) st.mean[i] += y[i];
  }
  for (auto& m : st.mean) m /= static_cast<double>(train.size());
  for (const auto& r : train) {
    const auto y = simnet_target(r, t0);
    for (std::size_t i = 0; i < k; ++i) st.stddev[i] += (y[i] - st.mean[i]) * (y[i] - st.mean[i]);
  }
  for (auto& s : st.stddev) {
    s = std::sqrt(s / static_cast<double>(train.size()));
    // Constant targets (e.g. the fixed S0 tilt) are left unscaled.
    if (!(s > 1e-12)) s = 1.0;
  }
  return st;
}

// ---------------------------------------------------------------------------------------------
// Training

void to_json(json& j, const TrainConfig& c) {
  j = json{{"batch", c.batch},
           {"patience", c.patience},
           {"epochs_max", c.epochs_max},
           {"seed", c.seed},
           {"lr", c.lr},
           {"decay", c.decay},
           {"eps", c.eps},
           {"lambda_reg_initial", c.lambda_reg_initial},
           {"det_threshold", c.det_threshold},
           {"expected_value_decoding", c.expected_value_decoding}};
}

json TrainResult::metadata() const {
  json j{{"format", "mechanet-checkpoint"},
         {"model", model},
         {"train", train_config},
         {"best_epoch", best_epoch},
         {"stop_epoch", stop_epoch},
         {"early_stopped", early_stopped}};
  j["lambda_transition_epoch"] = lambda_transition_epoch ? json(*lambda_transition_epoch) : json(nullptr);
  if (simnet) j["simnet"] = json{{"mean", simnet->mean}, {"stddev", simnet->stddev}};
  if (!log.empty()) {
    const auto& best = log[static_cast<std::size_t>(best_epoch)];
    j["best_val_l2"] = best.val_l2;
  }
  return j;
}

namespace {

struct Batch {
  std::vector<const SequenceRecord*> items;
  std::vector<std::span<const Frame>> frames;
};

Batch make_batch(const std::vector<SequenceRecord>& data, const std::vector<std::size_t>& order, std::size_t begin,
                 std::size_t end) {
  Batch b;
  for (std::size_t k = begin; k < end; ++k) {
    const auto& r = data[order[k]];
    b.items.push_back(&r);
    b.frames.emplace_back(r.frames);
  }
  return b;
}

ad::Var<float> batch_input(ad::Tape<float>& tape, const Batch& b, const ModelConfig& cfg) {
  const int s = cfg.image_size;
  return tape.constant({static_cast<int>(b.items.size()), s, s, 3 * cfg.t0}, frames_tensor<float>(b.frames, cfg));
}

ad::Var<float> simnet_loss(ad::Tape<float>& tape, const ad::Var<float>& out, const Batch& b, const SimNetStats& st,
                           int t0) {
  const int n = static_cast<int>(b.items.size());
  const int k = static_cast<int>(st.mean.size());
  std::vector<float> z(static_cast<std::size_t>(n) * k);
  for (int i = 0; i < n; ++i) {
    const auto y = simnet_target(*b.items[static_cast<std::size_t>(i)], t0);
    for (int j = 0; j < k; ++j)
      z[static_cast<std::size_t>(i * k + j)] =
          static_cast<float>((y[static_cast<std::size_t>(j)] - st.mean[static_cast<std::size_t>(j)]) /
                             st.stddev[static_cast<std::size_t>(j)]);
  }
  return ad::mean(ad::square(ad::sub(out, tape.constant({n, k}, std::move(z)))));
}

/// Mean over items of (1/T_n) Σ_t ‖point(t) − y(t)‖² for the first `steps` steps.
double point_l2(const std::vector<ad::Var<float>>& outs, const BatchTargets& tg, const ModelConfig& cfg,
                bool expected_value) {
  const HeadKind kind = head_kind(cfg.variant);
  const int m = cfg.map_size();
  double total = 0;
  for (std::size_t t = 0; t < outs.size(); ++t) {
    const auto v = outs[t].value();
    for (int n = 0; n < tg.n; ++n) {
      const std::size_t i = t * tg.n + static_cast<std::size_t>(n);
      if (tg.weight[i] == 0.0) continue;
      Vec2 p;
      if (kind == HeadKind::kPoint) {
        p = Vec2(v[2 * n], v[2 * n + 1]);
      } else if (kind == HeadKind::kGauss) {
        p = Vec2(v[5 * n], v[5 * n + 1]);
      } else {
        const auto row = v.subspan(static_cast<std::size_t>(n) * m * m, static_cast<std::size_t>(m) * m);
        const auto map = heatmap_from_logits(row, m, m, cfg.delta);
        p = expected_value ? map.expected_position() : map.argmax_center();
      }
      const Vec2 y(tg.y[2 * i], tg.y[2 * i + 1]);
      total += tg.weight[i] * tg.n * (p - y).squaredNorm();
    }
  }
  return total;
}

}  // namespace

TrainResult train(const ModelConfig& model_cfg, const TrainConfig& tc, const std::vector<SequenceRecord>& train_set,
                  const std::vector<SequenceRecord>& val_set) {
  model_cfg.validate();
  if (train_set.empty()) throw EmptyDataset("training split is empty");
  if (val_set.empty()) throw EmptyDataset("validation split is empty");
  if (tc.batch < 1) throw InvalidSpec("batch size must be >= 1");
  if (tc.patience < 1) throw InvalidSpec("patience must be >= 1");
  if (tc.epochs_max < 1) throw InvalidSpec("epochs_max must be >= 1");

  const auto clock_start = std::chrono::steady_clock::now();
  const bool simnet = model_cfg.variant == Variant::kSimNet;
  const bool gauss = model_cfg.variant == Variant::kMN3;
  const HeadKind kind = head_kind(model_cfg.variant);
  const int steps = model_cfg.t_train;
  const int m = model_cfg.map_size();
  const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(tc.batch), train_set.size());

  MechaNet<float> model(model_cfg, tc.seed);
  ad::RmsProp<float> opt(tc.lr, tc.decay, tc.eps);

  TrainResult result;
  result.model = model_cfg;
  result.train_config = tc;
  if (simnet) result.simnet = simnet_stats(train_set, model_cfg.t0);
  result.best = model.params().cast<float>();

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<std::size_t> val_order(val_set.size());
  std::iota(val_order.begin(), val_order.end(), std::size_t{0});
  Rng rng(splitmix64(tc.seed ^ 0x7A11CAFEull));

  double lambda_reg = gauss ? tc.lambda_reg_initial : 0.0;
  double best_val = std::numeric_limits<double>::infinity();

  for (int epoch = 0; epoch < tc.epochs_max; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[static_cast<std::size_t>(rng() % i)]);

    double loss_sum = 0, det_sum = 0;
    std::size_t det_count = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += batch) {
      const Batch b = make_batch(train_set, order, b0, std::min(order.size(), b0 + batch));
      ad::Tape<float> tape;
      model.params().zero_grad();
      const MechaNet<float>::Graph g(tape, model.params());
      const auto x = batch_input(tape, b, model_cfg);
      ad::Var<float> loss;
      if (simnet) {
        const auto s0 = model.feature_extract(g, x);
        loss = simnet_loss(tape, model.head_prime(g, s0), b, *result.simnet, model_cfg.t0);
      } else {
        const auto outs = model.forward(g, x, steps);
        const auto tg = BatchTargets::from_records(b.items, steps);
        if (kind == HeadKind::kPoint) {
          loss = loss_l2(tape, outs, tg);
        } else if (kind == HeadKind::kGauss) {
          loss = loss_gaussian(tape, outs, tg, lambda_reg);
          for (std::size_t t = 0; t < outs.size(); ++t) {
            const auto v = outs[t].value();
            for (int n = 0; n < tg.n; ++n) {
              if (tg.weight[t * tg.n + static_cast<std::size_t>(n)] == 0.0) continue;
              det_sum += static_cast<double>(v[5 * n + 2]) * v[5 * n + 3];
              ++det_count;
            }
          }
        } else {
          loss = loss_heatmap(tape, outs, tg, m, m, model_cfg.delta);
        }
      }
      const double value = loss.item();
      if (!std::isfinite(value)) {
        std::ostringstream os;
        os << "non-finite training loss " << value << " at epoch " << epoch << ", batch " << b0 / batch
           << " (first record " << b.items.front()->index << ")";
        throw NonFiniteLoss(os.str());
      }
      tape.backward(loss);
      opt.step(model.params());
      loss_sum += value * static_cast<double>(b.items.size());
    }

    double val = 0;
    for (std::size_t b0 = 0; b0 < val_order.size(); b0 += batch) {
      const Batch b = make_batch(val_set, val_order, b0, std::min(val_order.size(), b0 + batch));
      ad::Tape<float> tape;
      const MechaNet<float>::Graph g(tape, std::as_const(model.params()));
      const auto x = batch_input(tape, b, model_cfg);
      if (simnet) {
        const auto s0 = model.feature_extract(g, x);
        val += simnet_loss(tape, model.head_prime(g, s0), b, *result.simnet, model_cfg.t0).item() *
               static_cast<double>(b.items.size());
      } else {
        const auto outs = model.forward(g, x, steps);
        val += point_l2(outs, BatchTargets::from_records(b.items, steps), model_cfg, tc.expected_value_decoding);
      }
    }
    val /= static_cast<double>(val_set.size());

    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = loss_sum / static_cast<double>(train_set.size());
    entry.val_l2 = val;
    entry.lambda_reg = lambda_reg;
    entry.mean_det = det_count ? det_sum / static_cast<double>(det_count) : 0.0;
    entry.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
    result.log.push_back(entry);
    if (tc.on_epoch) tc.on_epoch(entry);

    if (val < best_val) {
      best_val = val;
      result.best_epoch = epoch;
      result.best = model.params().cast<float>();
    }
    result.stop_epoch = epoch;
    if (gauss && lambda_reg != 0.0 && entry.mean_det < tc.det_threshold) {
      lambda_reg = 0.0;
      result.lambda_transition_epoch = epoch + 1;
    }
    if (epoch - result.best_epoch >= tc.patience) {
      result.early_stopped = true;
      break;
    }
  }
  return result;
}

void write_training_log(const std::filesystem::path& path, const std::vector<EpochLog>& log) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write training log " + path.string());
  out << "epoch,train_loss,val_l2,lambda_reg,mean_det,wall_time\n";
  out.precision(10);
  for (const auto& e : log)
    out << e.epoch << ',' << e.train_loss << ',' << e.val_l2 << ',' << e.lambda_reg << ',' << e.mean_det << ','
        << e.wall_time << '\n';
  if (!out) throw IoError("failed writing training log " + path.string());
}

void save_model(const std::filesystem::path& path, const TrainResult& result) {
  ad::save_checkpoint(path, result.best, result.metadata().dump());
}

LoadedModel load_model(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw MissingCheckpoint("checkpoint not found: " + path.string());
  ad::Checkpoint ck = ad::load_checkpoint(path);
  json meta;
  try {
    meta = json::parse(ck.metadata);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": checkpoint metadata is not JSON: " + e.what());
  }
  if (meta.value("format", "") != "mechanet-checkpoint") throw FormatError(path.string() + ": not a model checkpoint");
  ModelConfig cfg = meta.at("model").get<ModelConfig>();
  LoadedModel lm{MechaNet<float>(cfg, std::move(ck.params)), meta, std::nullopt};
  if (meta.contains("simnet"))
    lm.simnet = SimNetStats{meta["simnet"].at("mean").get<std::vector<double>>(),
                            meta["simnet"].at("stddev").get<std::vector<double>>()};
  return lm;
}

// ---------------------------------------------------------------------------------------------
// Instantiations

#define MNET_MODELS_INSTANTIATE(T)                                                                      \
  template class MechaNet<T>;                                                                           \
  template std::vector<T> frames_tensor<T>(const std::vector<std::span<const Frame>>&, const ModelConfig&); \
  template ad::Var<T> loss_l2(ad::Tape<T>&, const std::vector<ad::Var<T>>&, const BatchTargets&);     \
  template ad::Var<T> loss_gaussian(ad::Tape<T>&, const std::vector<ad::Var<T>>&, const BatchTargets&, double); \
  template ad::Var<T> loss_heatmap(ad::Tape<T>&, const std::vector<ad::Var<T>>&, const BatchTargets&, int, int, \
                                   double, std::size_t*);                                               \
  template std::vector<PredictionSet> decode_outputs(const std::vector<ad::Var<T>>&, const ModelConfig&); \
  template std::vector<PredictionSet> forward_predict(const MechaNet<T>&,                               \
                                                      const std::vector<std::span<const Frame>>&, int, int); \
  template PredictionSet forward_predict(const MechaNet<T>&, std::span<const Frame>, int);

MNET_MODELS_INSTANTIATE(float)
MNET_MODELS_INSTANTIATE(double)

#undef MNET_MODELS_INSTANTIATE

}  // namespace mnet
