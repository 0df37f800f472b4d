#include "mnet/gradsuite.hpp"

#include <functional>
#include <random>
#include <utility>

#include "mnet/models.hpp"

namespace mnet {

namespace {

using ad::Parameter;
using ad::Tape;
using ad::Var;
using P = ad::ParameterSet<double>;
using Fn = std::function<Var<double>(Tape<double>&)>;

Parameter<double>& uniform_param(P& ps, const std::string& name, const ad::Shape& shape, std::mt19937_64& rng,
                                 double lo = -1.0, double hi = 1.0) {
  auto& p = ps.add(name, shape);
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : p.value) v = d(rng);
  return p;
}

/// Magnitudes in [0.1, 1] with random signs, so relu/abs probes stay off their kinks.
Parameter<double>& signed_param(P& ps, const std::string& name, const ad::Shape& shape, std::mt19937_64& rng) {
  auto& p = uniform_param(ps, name, shape, rng, 0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : p.value)
    if (sign(rng)) v = -v;
  return p;
}

/// <w, y> with fixed random w, so every output entry reaches the scalar.
Var<double> readout(const Var<double>& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-1, 1);
  std::vector<double> w(y.size());
  for (auto& v : w) v = d(rng);
  return sum(mul(y, y.tape().constant(y.shape(), std::move(w))));
}

struct Suite {
  GradSuiteOptions opt;
  std::mt19937_64 rng;
  std::vector<GradSuiteCase> out;

  explicit Suite(const GradSuiteOptions& o) : opt(o), rng(o.seed) {}

  void op(const std::string& name, P& ps, const Fn& f, bool kinks = false) {
    ad::GradCheckOptions g;
    g.h = 1e-5;
    g.tol = opt.tol;
    g.skip_kinks = kinks;
    g.seed = opt.seed;
    out.push_back({name, ad::grad_check(f, ps, g)});
  }

  /// op on y(params) read out through random weights.
  void unary(const std::string& name, P& ps, const std::function<Var<double>(Tape<double>&)>& y, bool kinks = false) {
    const std::uint64_t s = rng();
    op(name, ps, [&, s](Tape<double>& t) { return readout(y(t), s); }, kinks);
  }
};

void op_cases(Suite& s) {
  auto& rng = s.rng;
  {
    P ps;
    auto& a = uniform_param(ps, "a", {3, 4}, rng);
    auto& b = uniform_param(ps, "b", {4, 5}, rng);
    s.unary("matmul", ps, [&](Tape<double>& t) { return matmul(t.param(a), t.param(b)); });
  }
  {
    P ps;
    auto& x = uniform_param(ps, "x", {3, 4}, rng);
    auto& w = uniform_param(ps, "w", {4, 2}, rng);
    auto& b = uniform_param(ps, "b", {2}, rng);
    s.unary("linear", ps, [&](Tape<double>& t) { return linear(t.param(x), t.param(w), t.param(b)); });
    s.unary("add_bias", ps, [&](Tape<double>& t) { return add_bias(matmul(t.param(x), t.param(w)), t.param(b)); });
  }
  {
    P ps;
    auto& a = uniform_param(ps, "a", {2, 5}, rng);
    auto& b = uniform_param(ps, "b", {2, 5}, rng, 0.5, 2.0);
    s.unary("add", ps, [&](Tape<double>& t) { return add(t.param(a), t.param(b)); });
    s.unary("sub", ps, [&](Tape<double>& t) { return sub(t.param(a), t.param(b)); });
    s.unary("mul", ps, [&](Tape<double>& t) { return mul(t.param(a), t.param(b)); });
    s.unary("div", ps, [&](Tape<double>& t) { return div(t.param(a), t.param(b)); });
    s.unary("scale", ps, [&](Tape<double>& t) { return scale(t.param(a), -1.7); });
    s.unary("add_scalar", ps, [&](Tape<double>& t) { return add_scalar(t.param(a), 0.3); });
    s.unary("sigmoid", ps, [&](Tape<double>& t) { return sigmoid(t.param(a)); });
    s.unary("tanh", ps, [&](Tape<double>& t) { return tanh(t.param(a)); });
    s.unary("exp", ps, [&](Tape<double>& t) { return exp(t.param(a)); });
    s.unary("log", ps, [&](Tape<double>& t) { return log(t.param(b)); });
    s.unary("sin", ps, [&](Tape<double>& t) { return sin(t.param(a)); });
    s.unary("cos", ps, [&](Tape<double>& t) { return cos(t.param(a)); });
    s.unary("square", ps, [&](Tape<double>& t) { return square(t.param(a)); });
    s.unary("scaled_sigmoid", ps, [&](Tape<double>& t) { return scaled_sigmoid(t.param(a), 99.99, 0.01); });
    s.unary("sum", ps, [&](Tape<double>& t) { return sum(square(t.param(a))); });
    s.unary("mean", ps, [&](Tape<double>& t) { return mean(square(t.param(a))); });
    s.unary("sum_cols", ps, [&](Tape<double>& t) { return sum_cols(t.param(a)); });
    s.unary("reshape", ps, [&](Tape<double>& t) { return reshape(t.param(a), {5, 2}); });
    s.unary("slice_cols", ps, [&](Tape<double>& t) { return slice_cols(t.param(a), 1, 4); });
    s.unary("concat_cols", ps, [&](Tape<double>& t) { return ad::concat_cols<double>({t.param(a), t.param(b)}); });
    s.unary("log_softmax", ps, [&](Tape<double>& t) { return log_softmax(t.param(a)); });
    s.unary("softmax", ps, [&](Tape<double>& t) { return softmax(t.param(a)); });
    const std::vector<int> idx{3, 0};
    s.op("pick", ps, [&](Tape<double>& t) { return sum(pick(square(t.param(a)), idx)); });
  }
  {
    P ps;
    auto& a = signed_param(ps, "a", {3, 4}, rng);
    s.unary("relu", ps, [&](Tape<double>& t) { return relu(t.param(a)); }, true);
    s.unary("abs", ps, [&](Tape<double>& t) { return abs(t.param(a)); }, true);
  }
  {
    P ps;
    auto& x = uniform_param(ps, "x", {2, 6, 6, 2}, rng);
    auto& w = uniform_param(ps, "w", {3, 3, 2, 3}, rng);
    auto& b = uniform_param(ps, "b", {3}, rng);
    s.unary("conv2d", ps, [&](Tape<double>& t) { return conv2d(t.param(x), t.param(w), t.param(b), 1, 1); });
    s.unary("conv2d_asym", ps,
            [&](Tape<double>& t) { return conv2d_asym(t.param(x), t.param(w), t.param(b), 2, 0, 1); });
  }
  {
    P ps;
    auto& x = uniform_param(ps, "x", {2, 3, 3, 2}, rng);
    auto& w = uniform_param(ps, "w", {4, 4, 3, 2}, rng);
    auto& b = uniform_param(ps, "b", {3}, rng);
    s.unary("conv_transpose2d", ps,
            [&](Tape<double>& t) { return conv_transpose2d(t.param(x), t.param(w), t.param(b), 2, 1); });
  }
  {
    P ps;
    auto& x = uniform_param(ps, "x", {2, 3, 3, 4}, rng);
    s.unary("l2_normalize_channels", ps, [&](Tape<double>& t) { return l2_normalize_channels(t.param(x)); });
    auto& m = uniform_param(ps, "m", {2, 4, 4}, rng, -2.0, 2.0);
    s.unary("softmax2d", ps, [&](Tape<double>& t) { return softmax2d(t.param(m)); });
  }
  {
    P ps;
    auto& x = uniform_param(ps, "x", {2, 3}, rng);
    auto& h = uniform_param(ps, "h", {2, 4}, rng);
    auto& c = uniform_param(ps, "c", {2, 4}, rng);
    auto& wi = uniform_param(ps, "wi", {3, 16}, rng);
    auto& wh = uniform_param(ps, "wh", {4, 16}, rng);
    auto& b = uniform_param(ps, "b", {16}, rng);
    const std::uint64_t s1 = rng(), s2 = rng();
    s.op("lstm_cell", ps, [&, s1, s2](Tape<double>& t) {
      const auto o = lstm_cell(t.param(x), t.param(h), t.param(c), {t.param(wi), t.param(wh), t.param(b)});
      return add(readout(o.h, s1), readout(o.c, s2));
    });
  }
}

std::vector<Frame> noise_frames(int n, int size, std::mt19937_64& rng) {
  std::vector<Frame> out;
  for (int t = 0; t < n; ++t) {
    Frame f(size, size, t);
    for (auto& v : f.rgb) v = static_cast<std::uint8_t>(rng() & 0xFF);
    out.push_back(std::move(f));
  }
  return out;
}

void model_cases(Suite& s) {
  constexpr int kSize = 16, kSteps = 6;
  std::vector<SequenceRecord> recs(2);
  std::uniform_real_distribution<double> pos(1.0, kSize - 2.0);
  for (auto& r : recs) {
    r.frames = noise_frames(kSteps, kSize, s.rng);
    for (int t = 0; t < kSteps; ++t) r.pixels_gt.emplace_back(pos(s.rng), pos(s.rng));
  }
  const BatchTargets tg = BatchTargets::from_records({&recs[0], &recs[1]}, kSteps);

  for (Variant v : {Variant::kMN1, Variant::kMN2, Variant::kMN3, Variant::kMN4, Variant::kSimNet}) {
    ModelConfig cfg;
    cfg.variant = v;
    cfg.t0 = 2;
    cfg.t_train = kSteps;
    cfg.image_size = kSize;
    cfg.state_size = 4;
    cfg.channels = 8;
    cfg.vector_units = 12;
    cfg.extractor_base = 4;
    MechaNet<double> net(cfg, s.rng());
    const std::vector<std::span<const Frame>> items{recs[0].frames, recs[1].frames};
    const auto x = frames_tensor<double>(items, cfg);
    const std::uint64_t ro = s.rng();

    ad::GradCheckOptions g;
    g.h = 1e-5;
    g.tol = s.opt.tol;
    g.max_coords_per_param = 12;
    g.skip_kinks = true;
    g.seed = s.opt.seed;
    auto f = [&](Tape<double>& tape) {
      const MechaNet<double>::Graph gr(tape, net.params());
      const auto in = tape.constant({2, kSize, kSize, 3 * cfg.t0}, x);
      if (v == Variant::kSimNet) return readout(net.head_prime(gr, net.feature_extract(gr, in)), ro);
      const auto outs = net.forward(gr, in, kSteps);
      if (v == Variant::kMN3) return loss_gaussian(tape, outs, tg, 1e-3);
      if (v == Variant::kMN4) return loss_heatmap(tape, outs, tg, kSize, kSize, 1.0);
      return loss_l2(tape, outs, tg);
    };
    s.out.push_back({std::string("model/") + variant_name(v), ad::grad_check(f, net.params(), g)});
  }
}

}  // namespace

std::vector<GradSuiteCase> run_gradient_suite(const GradSuiteOptions& options) {
  Suite s(options);
  op_cases(s);
  model_cases(s);
  return std::move(s.out);
}

}  // namespace mnet
