#pragma once

// Real-domain training engine: forward/backward for conv, dense, pooling
// and the ReLU / scaled ReLU / square / x^2 + ax activations, plain SGD with
// L2 regularization and step decay.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "fieldnet/data.hpp"
#include "fieldnet/tensor.hpp"

namespace fieldnet::nn {

struct Activation {
  enum class Kind { ReLU, ScaledReLU, Square, Poly };

  Kind kind = Kind::ReLU;
  long param = 0;  // c for ScaledReLU, a for Poly

  static Activation relu() { return {Kind::ReLU, 0}; }
  /// c must be even.
  static Activation scaled_relu(long c);
  static Activation square() { return {Kind::Square, 0}; }
  /// a must be >= 1.
  static Activation poly(long a);

  bool field_compatible() const { return kind == Kind::Square || kind == Kind::Poly; }
  std::string name() const;

  friend bool operator==(const Activation&, const Activation&) = default;
};

double activation_forward(const Activation& act, double x);
/// Derivative; the ReLU subgradient at 0 is 0.
double activation_backward(const Activation& act, double x);

enum class PoolKind { Max, Mean, Sum };

std::string to_string(PoolKind k);
PoolKind pool_kind_from_string(const std::string& s);

struct Conv2D {
  std::size_t out_channels = 1;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  friend bool operator==(const Conv2D&, const Conv2D&) = default;
};

struct Dense {
  std::size_t out_dim = 1;
  friend bool operator==(const Dense&, const Dense&) = default;
};

/// Mean pooling divides by the full window area, padding included.
struct Pool {
  PoolKind kind = PoolKind::Max;
  std::size_t window = 2;
  std::size_t stride = 2;
  std::size_t padding = 0;
  friend bool operator==(const Pool&, const Pool&) = default;
};

struct GlobalAvgPool {
  friend bool operator==(const GlobalAvgPool&, const GlobalAvgPool&) = default;
};

struct Dropout {
  double rate = 0.5;
  friend bool operator==(const Dropout&, const Dropout&) = default;
};

struct Flatten {
  friend bool operator==(const Flatten&, const Flatten&) = default;
};

using LayerSpec = std::variant<Conv2D, Dense, Pool, GlobalAvgPool, Activation, Dropout, Flatten>;

std::string describe(const LayerSpec& layer);

struct LayerParams {
  Tensor weight;  // conv (O, C, K, K), dense (O, D)
  Tensor bias;    // (O)
  bool empty() const { return weight.empty() && bias.empty(); }
};

class ShapeError : public std::invalid_argument {
 public:
  ShapeError(std::size_t layer, const std::string& what);
  std::size_t layer() const { return layer_; }

 private:
  std::size_t layer_;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Model {
 public:
  Model() = default;
  /// Validates the layer chain from input_shape (no batch axis) and
  /// allocates zero parameters. Throws ShapeError naming the bad layer.
  Model(std::vector<LayerSpec> spec, Shape input_shape);

  const std::vector<LayerSpec>& spec() const { return spec_; }
  const Shape& input_shape() const { return input_shape_; }
  const Shape& output_shape(std::size_t layer) const { return shapes_.at(layer + 1); }
  const Shape& layer_input_shape(std::size_t layer) const { return shapes_.at(layer); }
  std::size_t num_classes() const;
  std::size_t num_layers() const { return spec_.size(); }

  std::vector<LayerParams>& params() { return params_; }
  const std::vector<LayerParams>& params() const { return params_; }

 private:
  std::vector<LayerSpec> spec_;
  Shape input_shape_;
  std::vector<Shape> shapes_;
  std::vector<LayerParams> params_;
};

/// Uniform fan-in init with bound gain * sqrt(3 / fan_in); biases zero.
void init_params(Model& model, std::uint64_t seed, double gain);
/// sqrt(2) when any ReLU-type activation is present, 1 otherwise.
double default_init_gain(const Model& model);

enum class Mode { Train, Eval };

struct ForwardCache {
  std::vector<Tensor> inputs;                           // input of every layer
  std::vector<std::vector<std::uint32_t>> max_index;    // max-pool argmax per layer
  std::vector<std::vector<double>> dropout_mask;        // scaled keep mask per layer
};

/// Returns pre-softmax logits for a batch (N, ...). Dropout is active only in
/// train mode and then needs `rng`.
Tensor forward(const Model& model, const Tensor& batch, Mode mode, ForwardCache* cache = nullptr,
               Rng* rng = nullptr);

Tensor softmax(const Tensor& logits);

struct LossResult {
  double loss = 0.0;
  Tensor dlogits;
};

/// Mean cross-entropy with max-subtraction, gradient (softmax - onehot) / N.
LossResult loss_softmax_xent(const Tensor& logits, std::span<const int> labels);

using Gradients = std::vector<LayerParams>;

/// Parameter gradients (and optionally the input gradient) from a cache
/// filled by forward().
Gradients backward(const Model& model, const ForwardCache& cache, const Tensor& dlogits,
                   Tensor* dinput = nullptr);

struct TrainConfig {
  double learning_rate = 0.01;
  double lr_decay_factor = 1.0;
  std::vector<int> lr_decay_epochs;
  double l2_lambda = 0.0;
  std::size_t batch_size = 125;
  int epochs = 1;
  std::uint64_t seed = 0;
  std::vector<double> lr_grid;
  int lr_search_epochs = 0;

  void validate() const;
};

/// Learning rate for a 1-based epoch: the base rate times decay_factor for
/// every listed decay epoch strictly before it.
double effective_lr(const TrainConfig& config, int epoch);

/// w <- w - lr * (g + lambda * w); biases exempt from the L2 term. Throws
/// DivergenceError on non-finite gradients.
void sgd_step(Model& model, const Gradients& grads, const TrainConfig& config, int epoch);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double lr = 0.0;
};

std::vector<EpochRecord> train(Model& model, const data::Dataset& train_set, const data::Dataset& test_set,
                               const TrainConfig& config);

std::vector<int> predict(const Model& model, const Tensor& batch);
double evaluate(const Model& model, const data::Dataset& ds);

/// Trains one fresh model per grid value for budget_epochs and returns the
/// rate with the best final test accuracy, ties going to the smaller rate.
/// Throws DivergenceError when every candidate diverges.
double lr_search(const std::function<Model()>& builder, const data::Dataset& train_set,
                 const data::Dataset& test_set, std::span<const double> grid, int budget_epochs,
                 const TrainConfig& base);

/// CSV with header epoch,train_loss,train_acc,test_acc,lr.
std::string metrics_csv(const std::vector<EpochRecord>& history);

/// Default learning-rate search grid.
inline const std::vector<double> kLearningRateGrid = {0.1, 0.03, 0.01, 0.003, 0.001, 0.0003, 0.0001};

}  // namespace fieldnet::nn
