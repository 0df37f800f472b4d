#pragma once

// Tape-based reverse-mode differentiation over dense row-major tensors.
//
// Layouts: images and states are NHWC, dense activations are [N, F]. Every op records one node
// on the tape that owns its inputs; Tape::backward walks nodes in reverse recording order, which
// is a topological order, so each node is visited once and shared inputs accumulate.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace mnet::ad {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct Parameter {
  std::string name;
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;

  std::size_t size() const { return value.size(); }
};

/// Ordered, named parameter collection with stable element addresses.
template <typename T>
class ParameterSet {
 public:
  Parameter<T>& add(const std::string& name, const Shape& shape);
  Parameter<T>& get(const std::string& name);
  const Parameter<T>& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }
  std::size_t scalar_count() const;

  void zero_grad();

  template <typename U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& p : params_) {
      auto& q = out.add(p->name, p->shape);
      for (std::size_t i = 0; i < p->value.size(); ++i) q.value[i] = static_cast<U>(p->value[i]);
    }
    return out;
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
};

template <typename T>
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while its tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, int id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Shape& shape() const;
  int dim(int i) const { return shape()[static_cast<std::size_t>(i)]; }
  std::size_t size() const;
  std::span<const T> value() const;
  /// Gradient after Tape::backward; empty if nothing flowed into this node.
  std::span<const T> grad() const;
  T item() const;

 private:
  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool needs_grad = false;
    Backward backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Shape shape, std::vector<T> value);
  Var<T> constant(Shape shape, T fill);
  /// Leaf bound to a parameter; backward adds its gradient into param.grad.
  Var<T> param(Parameter<T>& p);

  void backward(const Var<T>& loss);

  std::size_t node_count() const { return nodes_.size(); }
  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  /// Gradient buffer of a node, allocated (zeroed) on first use.
  std::vector<T>& grad_of(int id);
  bool needs_grad(int id) const { return node(id).needs_grad; }

  /// Records a node; `backward` runs only if some input needs a gradient.
  Var<T> record(Shape shape, std::vector<T> value, std::initializer_list<Var<T>> inputs, Backward backward);
  Var<T> record(Shape shape, std::vector<T> value, const std::vector<Var<T>>& inputs, Backward backward);

  /// Hash of the active/inactive pattern of every piecewise-linear unit evaluated so far.
  std::uint64_t kink_signature() const { return kink_signature_; }
  void mix_kink(std::uint64_t bits) { kink_signature_ = (kink_signature_ ^ bits) * 0x100000001B3ull; }

 private:
  std::vector<Node> nodes_;
  std::uint64_t kink_signature_ = 0xCBF29CE484222325ull;
};

// Linear algebra.
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
/// x[N,F] * w[F,O] + b[O]
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);

// Elementwise, same shape.
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> div(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);
template <typename T> Var<T> add_scalar(const Var<T>& a, T s);
/// Adds b[C] along the last axis of a.
template <typename T> Var<T> add_bias(const Var<T>& a, const Var<T>& b);

// Pointwise nonlinearities.
template <typename T> Var<T> relu(const Var<T>& a);
template <typename T> Var<T> sigmoid(const Var<T>& a);
template <typename T> Var<T> tanh(const Var<T>& a);
template <typename T> Var<T> exp(const Var<T>& a);
template <typename T> Var<T> log(const Var<T>& a);
template <typename T> Var<T> sin(const Var<T>& a);
template <typename T> Var<T> cos(const Var<T>& a);
template <typename T> Var<T> square(const Var<T>& a);
template <typename T> Var<T> abs(const Var<T>& a);
/// lambda / (1 + exp(-z)) + alpha, with range (alpha, alpha + lambda).
template <typename T> Var<T> scaled_sigmoid(const Var<T>& z, T lambda, T alpha);

// Reductions and reshaping.
template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);
/// Sum over the last axis: [N, F] -> [N].
template <typename T> Var<T> sum_cols(const Var<T>& a);
template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);
/// Columns [begin, end) of a [N, F] tensor.
template <typename T> Var<T> slice_cols(const Var<T>& a, int begin, int end);
template <typename T> Var<T> concat_cols(const std::vector<Var<T>>& parts);
/// x[n, idx[n]] for x[N, M].
template <typename T> Var<T> pick(const Var<T>& x, std::span<const int> idx);

// Convolutions (cross-correlation, NHWC). Kernels are [k, k, C_in, C_out].
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad);
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, int stride, int pad);
/// conv2d with separate leading/trailing padding (e.g. 0/1 for even inputs at stride 2).
template <typename T>
Var<T> conv2d_asym(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad_lo, int pad_hi);
/// Adjoint of conv2d. The kernel [k, k, C_out, C_in] is read as the forward convolution from the
/// C_out-channel output space to the C_in-channel input; output extent (H-1)*stride - 2*pad + k.
template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad);
template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, int stride, int pad);

/// Divides every (item, channel) plane of x[N,H,W,C] by its L2 norm plus eps.
template <typename T> Var<T> l2_normalize_channels(const Var<T>& x, T eps = T(1e-8));

/// Row-wise log-softmax / softmax of a [N, M] tensor (max-subtracted).
template <typename T> Var<T> log_softmax(const Var<T>& x);
template <typename T> Var<T> softmax(const Var<T>& x);
/// Spatial softmax of [N, H, W] (or [N, H, W, 1]) logits; keeps the input shape.
template <typename T> Var<T> softmax2d(const Var<T>& x);

template <typename T>
struct LstmParams {
  Var<T> w_input;   // [In, 4H], gate order i, f, g, o
  Var<T> w_hidden;  // [H, 4H]
  Var<T> bias;      // [4H]
};

template <typename T>
struct LstmOutput {
  Var<T> h;
  Var<T> c;
};

template <typename T>
LstmOutput<T> lstm_cell(const Var<T>& x, const Var<T>& h, const Var<T>& c, const LstmParams<T>& p);

/// RMSProp state with one running mean of squared gradients per parameter.
template <typename T>
class RmsProp {
 public:
  double lr = 1e-4;
  double decay = 0.9;
  double eps = 1e-8;

  RmsProp() = default;
  RmsProp(double learning_rate, double decay_rate, double epsilon)
      : lr(learning_rate), decay(decay_rate), eps(epsilon) {}

  /// v <- decay v + (1 - decay) g², p <- p - lr g / (sqrt(v) + eps).
  void step(ParameterSet<T>& params);
  const std::vector<std::vector<T>>& mean_square() const { return mean_square_; }

 private:
  std::vector<std::vector<T>> mean_square_;
};

/// Gaussian init with mean 0 and std 1/sqrt(fan_in), deterministic for a given generator.
template <typename T>
void init_gaussian(Parameter<T>& p, int fan_in, std::mt19937_64& rng, double gain = 1.0);
double standard_normal(std::mt19937_64& rng);

struct GradCheckOptions {
  double h = 1e-3;
  double tol = 1e-4;
  /// Denominator floor for the relative error |a - n| / max(|a|, |n|, floor).
  double abs_floor = 1e-6;
  /// Check at most this many coordinates per parameter (0 = all), picked at random.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 1;
  /// Skip coordinates whose +/- h probes flip a piecewise-linear unit (measure-zero kinks).
  bool skip_kinks = false;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  std::string worst;
  bool passed = false;
};

/// Central-difference check of d f / d params, where f builds a scalar on the given tape.
GradCheckReport grad_check(const std::function<Var<double>(Tape<double>&)>& f, ParameterSet<double>& params,
                           const GradCheckOptions& options = {});

/// Parameter checkpoint ("MNCK"): metadata string plus named f32 tensors, CRC32-protected.
struct Checkpoint {
  std::string metadata;
  ParameterSet<float> params;
};

void save_checkpoint(const std::filesystem::path& path, const ParameterSet<float>& params,
                     const std::string& metadata);
std::vector<std::uint8_t> encode_checkpoint(const ParameterSet<float>& params, const std::string& metadata);
Checkpoint load_checkpoint(const std::filesystem::path& path);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

}  // namespace mnet::ad
