#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "mnet/error.hpp"
#include "mnet/tensor.hpp"

using namespace mnet;
using namespace mnet::ad;

namespace {

using P = ParameterSet<double>;

Parameter<double>& random_param(P& ps, const std::string& name, const Shape& shape, std::mt19937_64& rng,
                                double lo = -1.0, double hi = 1.0) {
  auto& p = ps.add(name, shape);
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : p.value) v = d(rng);
  return p;
}

/// Random inputs bounded away from zero, so relu/abs probes never cross a kink.
Parameter<double>& kink_free_param(P& ps, const std::string& name, const Shape& shape, std::mt19937_64& rng) {
  auto& p = random_param(ps, name, shape, rng, 0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : p.value)
    if (sign(rng)) v = -v;
  return p;
}

/// Scalar readout <w, y> with fixed random weights so every output entry matters.
Var<double> readout(const Var<double>& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-1, 1);
  std::vector<double> w(y.size());
  for (auto& v : w) v = d(rng);
  return sum(mul(y, y.tape().constant(y.shape(), std::move(w))));
}

GradCheckReport check(const std::function<Var<double>(Tape<double>&)>& f, P& ps, bool skip_kinks = false) {
  GradCheckOptions o;
  o.h = 1e-3;
  o.tol = 1e-4;
  o.skip_kinks = skip_kinks;
  return grad_check(f, ps, o);
}

}  // namespace

TEST_CASE("matmul: identity and shape errors") {
  Tape<double> t;
  auto eye = t.constant({2, 2}, {1, 0, 0, 1});
  auto x = t.constant({2, 1}, {3.5, -2});
  auto y = matmul(eye, x);
  CHECK(y.shape() == Shape{2, 1});
  CHECK(y.value()[0] == 3.5);
  CHECK(y.value()[1] == -2);
  CHECK_THROWS_AS(matmul(x, x), ShapeMismatch);
  CHECK_THROWS_AS(add(x, eye), ShapeMismatch);
  CHECK_THROWS_AS(t.constant({2, 2}, std::vector<double>{1, 2}), ShapeMismatch);
}

TEST_CASE("matmul: d sum(AB)/dA is the row-broadcast of B's row sums") {
  std::mt19937_64 rng(1);
  P ps;
  auto& a = random_param(ps, "a", {3, 4}, rng);
  auto& b = random_param(ps, "b", {4, 2}, rng);
  Tape<double> t;
  t.backward(sum(matmul(t.param(a), t.param(b))));
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 4; ++k) {
      const double expect = b.value[static_cast<std::size_t>(k * 2)] + b.value[static_cast<std::size_t>(k * 2 + 1)];
      CHECK(a.grad[static_cast<std::size_t>(i * 4 + k)] == doctest::Approx(expect).epsilon(1e-12));
    }
  const auto r = check([&](Tape<double>& t) { return readout(matmul(t.param(a), t.param(b))); }, ps);
  CHECK(r.passed);
  CHECK(r.max_rel_error < 1e-4);
  CHECK(r.checked == 20);
}

TEST_CASE("elementwise and linear gradients") {
  std::mt19937_64 rng(2);
  P ps;
  auto& a = random_param(ps, "a", {3, 5}, rng);
  auto& b = random_param(ps, "b", {3, 5}, rng, 0.5, 2.0);
  auto& w = random_param(ps, "w", {5, 4}, rng);
  auto& bias = random_param(ps, "bias", {4}, rng);
  auto& c = random_param(ps, "c", {5}, rng);
  const auto r = check(
      [&](Tape<double>& t) {
        auto A = t.param(a), B = t.param(b);
        auto e = add(sub(mul(A, B), div(A, B)), scale(add_scalar(A, 0.3), -1.7));
        e = add_bias(e, t.param(c));
        auto l = linear(e, t.param(w), t.param(bias));
        auto s = concat_cols<double>({slice_cols(l, 1, 3), sum_cols(l).tape().constant({3, 1}, 0.5), l});
        auto slope = reshape(sum_cols(s), {1, 3});
        return add(readout(s), mean(square(slope)));
      },
      ps);
  CHECK(r.passed);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("pointwise ops: values and gradients") {
  Tape<double> t;
  auto x = t.constant({3}, {-1, 0, 2});
  auto r = relu(x);
  CHECK(r.value()[0] == 0);
  CHECK(r.value()[1] == 0);
  CHECK(r.value()[2] == 2);
  CHECK(sigmoid(t.constant({1}, 0.0)).item() == 0.5);

  std::mt19937_64 rng(3);
  P ps;
  auto& a = kink_free_param(ps, "a", {4, 6}, rng);
  auto& pos = random_param(ps, "pos", {4, 6}, rng, 0.2, 3.0);
  const auto rep = check(
      [&](Tape<double>& t) {
        auto A = t.param(a);
        auto y = add(add(relu(A), sigmoid(A)), add(tanh(A), exp(A)));
        y = add(y, add(sin(A), cos(A)));
        y = add(y, add(abs(A), log(t.param(pos))));
        return readout(y);
      },
      ps);
  CHECK(rep.passed);
  CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("scaled_sigmoid") {
  Tape<double> t;
  auto z = t.constant({3}, {0.0, -1000.0, 1000.0});
  auto y = scaled_sigmoid(z, 99.99, 0.01);
  CHECK(y.value()[0] == doctest::Approx(50.005).epsilon(1e-12));
  CHECK(y.value()[1] == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(y.value()[2] == doctest::Approx(100.0).epsilon(1e-12));
  CHECK(std::isfinite(y.value()[1]));

  P ps;
  auto& p = ps.add("z", {1});
  p.value[0] = 0.0;
  Tape<double> t2;
  t2.backward(sum(scaled_sigmoid(t2.param(p), 99.99, 0.01)));
  CHECK(p.grad[0] == doctest::Approx(24.9975).epsilon(1e-12));
  CHECK_THROWS_AS(scaled_sigmoid(z, 0.0, 0.01), InvalidSpec);

  std::mt19937_64 rng(4);
  P ps2;
  auto& q = random_param(ps2, "z", {7}, rng, -3, 3);
  CHECK(check([&](Tape<double>& t) { return readout(scaled_sigmoid(t.param(q), 99.99, 0.01)); }, ps2).passed);
}

TEST_CASE("conv2d: counting overlaps, 1x1 kernels, shape errors") {
  Tape<double> t;
  auto x = t.constant({1, 3, 3, 1}, 1.0);
  auto k = t.constant({3, 3, 1, 1}, 1.0);
  auto y = conv2d(x, k, 1, 1);
  REQUIRE(y.shape() == Shape{1, 3, 3, 1});
  const std::vector<double> expect{4, 6, 4, 6, 9, 6, 4, 6, 4};
  for (std::size_t i = 0; i < 9; ++i) CHECK(y.value()[i] == expect[i]);

  auto img = t.constant({1, 2, 2, 1}, {1, 2, 3, 4});
  auto one = conv2d(img, t.constant({1, 1, 1, 1}, 2.5), 1, 0);
  for (std::size_t i = 0; i < 4; ++i) CHECK(one.value()[i] == 2.5 * (i + 1.0));

  auto even = t.constant({1, 8, 8, 2}, 1.0);
  auto k3 = t.constant({3, 3, 2, 4}, 1.0);
  CHECK_THROWS_AS(conv2d(even, k3, 2, 1), ShapeMismatch);
  auto b = t.constant({4}, 0.0);
  CHECK(conv2d_asym(even, k3, b, 2, 0, 1).shape() == Shape{1, 4, 4, 4});
  CHECK_THROWS_AS(conv2d(even, t.constant({3, 3, 3, 4}, 1.0), 1, 1), ShapeMismatch);
  CHECK_THROWS_AS(conv2d(even, k3, 0, 1), ShapeMismatch);
}

TEST_CASE("conv2d gradients on a 5x5x2 -> 3 case") {
  std::mt19937_64 rng(5);
  P ps;
  auto& x = random_param(ps, "x", {2, 5, 5, 2}, rng);
  auto& w = random_param(ps, "w", {3, 3, 2, 3}, rng);
  auto& b = random_param(ps, "b", {3}, rng);
  const auto r = check(
      [&](Tape<double>& t) {
        auto X = t.param(x);
        auto y1 = conv2d(X, t.param(w), t.param(b), 1, 1);
        auto y2 = conv2d(X, t.param(w), 2, 1);
        auto y3 = conv2d_asym(t.param(ps.get("x")), t.param(w), t.param(b), 2, 0, 0);
        return add(add(readout(y1, 1), readout(y2, 2)), readout(y3, 3));
      },
      ps);
  CHECK(r.passed);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("conv_transpose2d: adjoint identity, simple upsample, gradients") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> d(-1, 1);
  auto randv = [&](std::size_t n) {
    std::vector<double> v(n);
    for (auto& e : v) e = d(rng);
    return v;
  };
  for (int trial = 0; trial < 5; ++trial) {
    const int k = trial % 2 ? 4 : 3;
    const int s = 2;
    const int p = 1;
    const int h = k == 4 ? 8 : 9;
    Tape<double> t;
    auto x = t.constant({2, h, h, 3}, randv(static_cast<std::size_t>(2 * h * h * 3)));
    auto w = t.constant({k, k, 3, 5}, randv(static_cast<std::size_t>(k * k * 15)));
    auto cx = conv2d(x, w, s, p);
    auto y = t.constant(cx.shape(), randv(cx.size()));
    auto dy = conv_transpose2d(y, w, s, p);
    REQUIRE(dy.shape() == x.shape());
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < cx.size(); ++i) lhs += cx.value()[i] * y.value()[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += x.value()[i] * dy.value()[i];
    CHECK(std::abs(lhs - rhs) < 1e-5);
  }

  Tape<double> t;
  auto one = t.constant({1, 1, 1, 1}, 3.0);
  auto kernel = t.constant({2, 2, 1, 1}, {1, 2, 3, 4});
  auto up = conv_transpose2d(one, kernel, 2, 0);
  REQUIRE(up.shape() == Shape{1, 2, 2, 1});
  for (std::size_t i = 0; i < 4; ++i) CHECK(up.value()[i] == 3.0 * (i + 1.0));

  P ps;
  auto& xi = random_param(ps, "x", {1, 4, 4, 3}, rng);
  auto& wi = random_param(ps, "w", {4, 4, 2, 3}, rng);
  auto& bi = random_param(ps, "b", {2}, rng);
  const auto r = check(
      [&](Tape<double>& t) {
        auto y = conv_transpose2d(t.param(xi), t.param(wi), t.param(bi), 2, 1);
        return readout(y);
      },
      ps);
  CHECK(r.passed);
  auto t2 = std::make_unique<Tape<double>>();
  CHECK(conv_transpose2d(t2->param(xi), t2->param(wi), 2, 1).shape() == Shape{1, 8, 8, 2});
}

TEST_CASE("softmax2d") {
  Tape<double> t;
  auto flat = softmax2d(t.constant({1, 128, 128}, 0.7));
  double total = 0;
  for (double v : flat.value()) {
    CHECK(v == doctest::Approx(1.0 / 16384).epsilon(1e-12));
    total += v;
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));

  std::vector<double> logits(16, 0.0);
  logits[5] = 1000.0;
  auto spike = softmax2d(t.constant({1, 4, 4, 1}, logits));
  CHECK(spike.shape() == Shape{1, 4, 4, 1});
  CHECK(spike.value()[5] == 1.0);
  CHECK(spike.value()[0] == 0.0);

  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> d(-5, 5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> l(2 * 36);
    for (auto& v : l) v = d(rng);
    std::vector<double> shifted(l);
    for (auto& v : shifted) v += 12.5;
    auto p = softmax2d(t.constant({2, 6, 6}, l));
    auto q = softmax2d(t.constant({2, 6, 6}, shifted));
    for (int n = 0; n < 2; ++n) {
      double s = 0;
      for (int i = 0; i < 36; ++i) {
        const double v = p.value()[static_cast<std::size_t>(n * 36 + i)];
        CHECK(v > 0.0);
        s += v;
      }
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
    for (std::size_t i = 0; i < l.size(); ++i) CHECK(std::abs(p.value()[i] - q.value()[i]) < 1e-6);
  }

  P ps;
  auto& lg = random_param(ps, "logits", {1, 4, 4}, rng, -2, 2);
  CHECK(check([&](Tape<double>& t) { return readout(softmax2d(t.param(lg))); }, ps).passed);
  P ps2;
  auto& lg2 = random_param(ps2, "logits", {3, 7}, rng, -2, 2);
  CHECK(check([&](Tape<double>& t) { return readout(log_softmax(t.param(lg2))); }, ps2).passed);
  CHECK_THROWS_AS(softmax2d(t.constant({4}, 1.0)), ShapeMismatch);
}

TEST_CASE("l2_normalize_channels") {
  Tape<double> t;
  auto c2 = l2_normalize_channels(t.constant({1, 8, 8, 1}, 2.0));
  for (double v : c2.value()) CHECK(v == doctest::Approx(0.125).epsilon(1e-9));
  auto z = l2_normalize_channels(t.constant({1, 4, 4, 2}, 0.0));
  for (double v : z.value()) CHECK(v == 0.0);

  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> d(-1, 1);
  std::vector<double> raw(2 * 5 * 5 * 3);
  for (auto& v : raw) v = d(rng);
  auto y = l2_normalize_channels(t.constant({2, 5, 5, 3}, raw));
  auto yy = l2_normalize_channels(t.constant({2, 5, 5, 3}, std::vector<double>(y.value().begin(), y.value().end())));
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c) {
      double s = 0;
      for (int p = 0; p < 25; ++p) {
        const double v = y.value()[static_cast<std::size_t>((n * 25 + p) * 3 + c)];
        s += v * v;
      }
      CHECK(std::abs(std::sqrt(s) - 1.0) < 1e-5);
    }
  for (std::size_t i = 0; i < raw.size(); ++i) CHECK(std::abs(yy.value()[i] - y.value()[i]) < 1e-6);

  P ps;
  auto& x = random_param(ps, "x", {2, 3, 3, 2}, rng);
  CHECK(check([&](Tape<double>& t) { return readout(l2_normalize_channels(t.param(x))); }, ps).passed);
}

TEST_CASE("lstm_cell") {
  const int units = 8, in = 5;
  SUBCASE("zero weights") {
    Tape<double> t;
    LstmParams<double> p{t.constant({in, 4 * units}, 0.0), t.constant({units, 4 * units}, 0.0),
                         t.constant({4 * units}, 0.0)};
    auto out = lstm_cell(t.constant({1, in}, 0.7), t.constant({1, units}, 0.3), t.constant({1, units}, 0.0), p);
    for (double v : out.h.value()) CHECK(v == 0.0);
    for (double v : out.c.value()) CHECK(v == 0.0);
  }
  SUBCASE("saturated forget and input gates keep the cell") {
    Tape<double> t;
    std::vector<double> bias(4 * units, 0.0);
    for (int j = 0; j < units; ++j) {
      bias[static_cast<std::size_t>(j)] = -10.0;
      bias[static_cast<std::size_t>(units + j)] = 10.0;
    }
    std::vector<double> c(units);
    for (int j = 0; j < units; ++j) c[static_cast<std::size_t>(j)] = 0.1 * j - 0.3;
    LstmParams<double> p{t.constant({in, 4 * units}, 0.0), t.constant({units, 4 * units}, 0.0),
                         t.constant({4 * units}, bias)};
    auto out = lstm_cell(t.constant({1, in}, 0.0), t.constant({1, units}, 0.0), t.constant({1, units}, c), p);
    for (int j = 0; j < units; ++j) CHECK(std::abs(out.c.value()[static_cast<std::size_t>(j)] - c[static_cast<std::size_t>(j)]) < 1e-4);
  }
  SUBCASE("gradient check") {
    std::mt19937_64 rng(9);
    P ps;
    auto& wi = random_param(ps, "wi", {in, 4 * units}, rng, -0.5, 0.5);
    auto& wh = random_param(ps, "wh", {units, 4 * units}, rng, -0.5, 0.5);
    auto& b = random_param(ps, "b", {4 * units}, rng, -0.5, 0.5);
    auto& x = random_param(ps, "x", {2, in}, rng);
    auto& h = random_param(ps, "h", {2, units}, rng);
    auto& c = random_param(ps, "c", {2, units}, rng);
    const auto r = check(
        [&](Tape<double>& t) {
          LstmParams<double> p{t.param(wi), t.param(wh), t.param(b)};
          auto o1 = lstm_cell(t.param(x), t.param(h), t.param(c), p);
          // Second step feeds h back as the input, as the vector propagation does.
          auto o2 = lstm_cell(o1.h, o1.h, o1.c, LstmParams<double>{p.w_hidden, p.w_hidden, p.bias});
          return add(readout(o2.h, 4), readout(o2.c, 5));
        },
        ps);
    CHECK(r.passed);
  }
}

TEST_CASE("rmsprop") {
  SUBCASE("first step with g = 1") {
    ParameterSet<double> ps;
    auto& p = ps.add("p", {1});
    p.grad = {1.0};
    RmsProp<double> opt(0.01, 0.9, 1e-8);
    opt.step(ps);
    CHECK(p.value[0] == doctest::Approx(-0.01 / std::sqrt(0.1)).epsilon(1e-9));
    CHECK(p.value[0] == doctest::Approx(-0.031623).epsilon(1e-5));
  }
  SUBCASE("zero gradient leaves parameters unchanged") {
    ParameterSet<double> ps;
    auto& p = ps.add("p", {3});
    p.value = {1, 2, 3};
    p.grad = {0, 0, 0};
    RmsProp<double> opt(0.01, 0.9, 1e-8);
    opt.step(ps);
    CHECK(p.value == std::vector<double>{1, 2, 3});
  }
  SUBCASE("constant gradient: step size tends to lr") {
    ParameterSet<double> ps;
    auto& p = ps.add("p", {1});
    RmsProp<double> opt(0.01, 0.9, 1e-8);
    double last = 0;
    for (int i = 0; i < 400; ++i) {
      p.grad = {2.5};
      const double before = p.value[0];
      opt.step(ps);
      last = before - p.value[0];
      for (const auto& v : opt.mean_square()) CHECK(v[0] >= 0.0);
    }
    CHECK(last == doctest::Approx(0.01).epsilon(1e-6));
  }
  SUBCASE("shape mismatch") {
    ParameterSet<double> ps;
    auto& p = ps.add("p", {2});
    p.grad = {1.0};
    RmsProp<double> opt;
    CHECK_THROWS_AS(opt.step(ps), ShapeMismatch);
  }
}

TEST_CASE("grad_check behaviour") {
  P ps;
  auto& x = ps.add("x", {1});
  x.value = {3.0};
  const auto r = check([&](Tape<double>& t) { return sum(square(t.param(x))); }, ps);
  CHECK(r.passed);
  CHECK(r.max_rel_error < 1e-6);
  ps.zero_grad();
  Tape<double> t;
  t.backward(sum(square(t.param(x))));
  CHECK(x.grad[0] == doctest::Approx(6.0));

  // |x| at its kink: analytic +1, numeric 0.
  x.value = {0.0};
  const auto kink = check([&](Tape<double>& t) { return sum(abs(t.param(x))); }, ps);
  CHECK_FALSE(kink.passed);
  const auto skipped = check([&](Tape<double>& t) { return sum(abs(t.param(x))); }, ps, true);
  CHECK(skipped.skipped == 1);
  CHECK(skipped.checked == 0);
}

TEST_CASE("composed conv -> relu -> softmax2d -> NLL pipeline") {
  std::mt19937_64 rng(10);
  P ps;
  auto& x = random_param(ps, "x", {2, 6, 6, 2}, rng);
  auto& w1 = random_param(ps, "w1", {3, 3, 2, 4}, rng, -0.5, 0.5);
  auto& b1 = random_param(ps, "b1", {4}, rng, -0.1, 0.1);
  auto& w2 = random_param(ps, "w2", {3, 3, 4, 1}, rng, -0.5, 0.5);
  const std::vector<int> target{7, 30};
  const auto r = check(
      [&](Tape<double>& t) {
        auto h = relu(conv2d(t.param(x), t.param(w1), t.param(b1), 1, 1));
        auto logits = reshape(conv2d(h, t.param(w2), 1, 1), {2, 36});
        auto lp = log_softmax(logits);
        return scale(sum(pick(lp, std::span<const int>(target))), -0.5);
      },
      ps, true);
  CHECK(r.passed);
  CHECK(r.checked > 0);
}

TEST_CASE("shared subexpressions accumulate like an unrolled duplicate") {
  std::mt19937_64 rng(11);
  P ps;
  auto& a = random_param(ps, "a", {2, 3}, rng);
  Tape<double> t;
  auto A = t.param(a);
  auto s = tanh(A);
  t.backward(sum(mul(s, s)));
  const auto shared = a.grad;

  ps.zero_grad();
  Tape<double> u;
  auto s1 = tanh(u.param(a));
  auto s2 = tanh(u.param(a));
  u.backward(sum(mul(s1, s2)));
  for (std::size_t i = 0; i < shared.size(); ++i) CHECK(shared[i] == doctest::Approx(a.grad[i]).epsilon(1e-14));
}

TEST_CASE("constants receive no backward closure") {
  Tape<float> t;
  auto c = t.constant({2}, 1.0f);
  auto y = exp(c);
  CHECK_FALSE(t.needs_grad(y.id()));
  CHECK_FALSE(static_cast<bool>(t.node(y.id()).backward));
  t.backward(sum(y));
  CHECK(c.grad().empty());
}

TEST_CASE("pick and errors") {
  Tape<double> t;
  auto x = t.constant({2, 3}, {1, 2, 3, 4, 5, 6});
  const std::vector<int> idx{2, 0};
  auto p = pick(x, std::span<const int>(idx));
  CHECK(p.value()[0] == 3);
  CHECK(p.value()[1] == 4);
  const std::vector<int> bad{3, 0};
  CHECK_THROWS_AS(pick(x, std::span<const int>(bad)), ShapeMismatch);
  CHECK_THROWS_AS(slice_cols(x, 2, 2), ShapeMismatch);
  CHECK_THROWS_AS(reshape(x, {5}), ShapeMismatch);
  CHECK_THROWS_AS(t.backward(x), ShapeMismatch);
}

TEST_CASE("init and parameter sets") {
  ParameterSet<float> ps;
  auto& w = ps.add("w", {100, 50});
  std::mt19937_64 a(3), b(3);
  init_gaussian(w, 100, a);
  ParameterSet<float> ps2;
  auto& w2 = ps2.add("w", {100, 50});
  init_gaussian(w2, 100, b);
  CHECK(w.value == w2.value);
  double m = 0, s = 0;
  for (float v : w.value) {
    m += v;
    s += double(v) * v;
  }
  m /= w.value.size();
  s = std::sqrt(s / w.value.size() - m * m);
  CHECK(std::abs(m) < 0.01);
  CHECK(s == doctest::Approx(0.1).epsilon(0.05));
  CHECK_THROWS_AS(ps.add("w", {1}), InvalidSpec);
  CHECK_THROWS_AS(ps.get("nope"), InvalidSpec);
  auto d = ps.cast<double>();
  CHECK(d.get("w").value[7] == double(w.value[7]));
  CHECK(ps.scalar_count() == 5000);
}

TEST_CASE("checkpoint round trip and corruption") {
  ParameterSet<float> ps;
  auto& a = ps.add("layer/a", {2, 3});
  a.value = {1, 2, 3, 4, 5, 6.5f};
  auto& b = ps.add("b", {4});
  b.value = {-1, 0, 1, 1e-7f};
  const auto bytes = encode_checkpoint(ps, "{\"variant\":\"mn2\"}");
  CHECK(bytes[0] == 'M');
  CHECK(bytes[3] == 'K');
  const Checkpoint ck = decode_checkpoint(bytes);
  CHECK(ck.metadata == "{\"variant\":\"mn2\"}");
  REQUIRE(ck.params.size() == 2);
  CHECK(ck.params[0].name == "layer/a");
  CHECK(ck.params[0].shape == Shape{2, 3});
  CHECK(ck.params[0].value == a.value);
  CHECK(ck.params[1].value == b.value);
  CHECK(encode_checkpoint(ck.params, ck.metadata) == bytes);

  auto bad = bytes;
  bad[bytes.size() / 2] ^= 1;
  CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
  auto short_bytes = bytes;
  short_bytes.resize(8);
  CHECK_THROWS_AS(decode_checkpoint(short_bytes), FormatError);
  auto magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(magic), FormatError);
}
