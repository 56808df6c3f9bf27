#pragma once

// Quantization of trained real-domain models and exact inference over F_p,
// checked against an unbounded-integer oracle.
//
// Scales compound: a linear layer multiplies the running scale by the weight
// scale, a polynomial activation squares it, and a mean pool folded into a sum
// pool multiplies it by the window area. There is no rescaling between layers.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>
#include <nlohmann/json.hpp>

#include "fieldnet/field.hpp"
#include "fieldnet/nn.hpp"

namespace fieldnet::fieldnn {

using BigInt = boost::multiprecision::cpp_int;

struct QuantConfig {
  std::int64_t weight_scale = 256;
  std::int64_t input_scale = 256;
  long activation_a = 1;
  /// Adds round(a^2 S^2 / 8) after each x^2 + ax activation.
  bool fold_minimax_constant = false;

  /// Scales must be powers of two and activation_a >= 1.
  void validate() const;
};

struct QConv {
  nn::Conv2D geometry;
  Shape weight_shape;  // (O, C, K, K)
  std::vector<std::int64_t> weight;
  std::vector<BigInt> bias;
};

struct QDense {
  std::size_t out_dim = 0;
  Shape weight_shape;  // (O, D)
  std::vector<std::int64_t> weight;
  std::vector<BigInt> bias;
};

/// Window summation. `global` sums the whole spatial extent. scale_multiplier
/// is the area folded in when the layer replaces a mean pool (1 otherwise).
struct QSumPool {
  std::size_t window = 2;
  std::size_t stride = 2;
  std::size_t padding = 0;
  bool global = false;
  std::int64_t scale_multiplier = 1;
};

/// v -> v^2 + a * S * v + constant, with S the scale of the input. a = 0 is
/// the plain square.
struct QActivation {
  long a = 0;
  BigInt input_scale = 1;
  BigInt constant = 0;
};

struct QFlatten {};

using QLayer = std::variant<QConv, QDense, QSumPool, QActivation, QFlatten>;

std::string describe(const QLayer& layer);

class FieldIncompatibleError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ModulusTooSmall : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class QuantizedModel {
 public:
  /// Validates shapes and scale bookkeeping and computes layer_scales and
  /// required_bound (for inputs bounded by input_scale, i.e. reals in [-1, 1]).
  QuantizedModel(Shape input_shape, std::vector<QLayer> layers, QuantConfig config);

  const Shape& input_shape() const { return input_shape_; }
  const std::vector<QLayer>& layers() const { return layers_; }
  const QuantConfig& config() const { return config_; }
  const BigInt& input_scale() const { return input_scale_; }
  /// Integer-to-real ratio of every layer's output.
  const std::vector<BigInt>& layer_scales() const { return layer_scales_; }
  const BigInt& output_scale() const { return layer_scales_.empty() ? input_scale_ : layer_scales_.back(); }
  const Shape& output_shape(std::size_t layer) const { return shapes_.at(layer + 1); }
  const Shape& layer_input_shape(std::size_t layer) const { return shapes_.at(layer); }
  std::size_t num_outputs() const { return shape_size(shapes_.back()); }
  const BigInt& required_bound() const { return required_bound_; }

 private:
  Shape input_shape_;
  std::vector<QLayer> layers_;
  QuantConfig config_;
  BigInt input_scale_;
  std::vector<Shape> shapes_;
  std::vector<BigInt> layer_scales_;
  BigInt required_bound_;
};

/// round(value * scale) with ties away from zero, computed exactly.
BigInt round_scaled(double value, const BigInt& scale);

/// Integer weight round(w * s_w); throws std::overflow_error if |w s_w| >= 2^63.
std::int64_t quantize_weight(double w, std::int64_t weight_scale);

/// Converts Conv/Dense/sum- and mean-pool/global-average/Square/Poly/Flatten
/// layers; dropout is dropped. Throws FieldIncompatibleError naming the first
/// ReLU or max-pool layer.
QuantizedModel quantize(const nn::Model& model, const QuantConfig& qc);

/// round(x * s_x) per entry.
std::vector<std::int64_t> quantize_input(std::span<const double> x, std::int64_t input_scale);

/// v^2 + a*S*v. Throws std::overflow_error if |result| exceeds `bound`.
BigInt poly_activation_scaled(const BigInt& v, const BigInt& scale, long a,
                              const std::optional<BigInt>& bound = std::nullopt);

/// Same computation over unbounded integers; the ground truth for field_forward.
std::vector<BigInt> integer_forward(const QuantizedModel& qm, std::span<const std::int64_t> input);

/// Exact inference in F_p, logits decoded by centered lift. Refuses a modulus
/// with (p-1)/2 < required_bound unless allow_wrap is set.
std::vector<std::int64_t> field_forward(const QuantizedModel& qm, std::span<const std::int64_t> input,
                                        const field::Modulus& m, bool allow_wrap = false);

/// Row-wise versions over `n` inputs stored back to back; parameters are
/// converted to the target ring once.
std::vector<std::vector<BigInt>> integer_forward_batch(const QuantizedModel& qm, std::span<const std::int64_t> inputs,
                                                       std::size_t n);
std::vector<std::vector<std::int64_t>> field_forward_batch(const QuantizedModel& qm,
                                                           std::span<const std::int64_t> inputs, std::size_t n,
                                                           const field::Modulus& m, bool allow_wrap = false);

/// Worst-case absolute value of any intermediate for inputs with
/// |x| <= input_max, by interval arithmetic layer by layer.
BigInt required_modulus_bound(const QuantizedModel& qm, const BigInt& input_max);

/// Smallest prime >= 2 * required_bound + 1; throws std::overflow_error when
/// no 64-bit prime qualifies.
std::uint64_t auto_prime(const QuantizedModel& qm);

std::vector<double> descale(std::span<const BigInt> logits, const BigInt& scale);
int argmax(std::span<const BigInt> logits);
int argmax(std::span<const std::int64_t> logits);

inline constexpr int kQuantizedFormatVersion = 1;

/// Weights are base64 little-endian int64; biases, scales and the bound are
/// decimal strings since they routinely exceed 64 bits.
nlohmann::json quantized_to_json(const QuantizedModel& qm, std::optional<std::uint64_t> modulus = std::nullopt,
                                 const nlohmann::json& meta = nlohmann::json::object());
QuantizedModel quantized_from_json(const nlohmann::json& j, std::optional<std::uint64_t>* modulus = nullptr,
                                   nlohmann::json* meta = nullptr);

}  // namespace fieldnet::fieldnn
