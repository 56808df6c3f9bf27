#include "fieldnet/fieldnn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "fieldnet/serialize.hpp"

namespace fieldnet::fieldnn {

using nlohmann::json;

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

bool is_power_of_two(std::int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

BigInt abs_big(const BigInt& v) { return v < 0 ? BigInt(-v) : v; }

std::size_t out_extent(std::size_t in, std::size_t k, std::size_t s, std::size_t p) {
  if (in + 2 * p < k) return 0;
  return (in + 2 * p - k) / s + 1;
}

BigInt parse_big(const json& j) {
  const std::string s = j.get<std::string>();
  if (s.empty()) throw std::runtime_error("empty integer string");
  return BigInt(s);
}

std::uint64_t max_abs_weight(const std::vector<std::int64_t>& w) {
  std::uint64_t m = 0;
  for (std::int64_t v : w) {
    const std::uint64_t a = v < 0 ? static_cast<std::uint64_t>(-(v + 1)) + 1 : static_cast<std::uint64_t>(v);
    m = std::max(m, a);
  }
  return m;
}

BigInt max_abs(const std::vector<BigInt>& v) {
  BigInt m = 0;
  for (const BigInt& x : v) m = std::max(m, abs_big(x));
  return m;
}

struct IntegerRing {
  using Value = BigInt;
  Value from(std::int64_t v) const { return Value(v); }
  Value from(const BigInt& v) const { return v; }
  Value zero() const { return Value(0); }
  void mac(Value& acc, const Value& a, const Value& b) const { acc += a * b; }
  void add_to(Value& acc, const Value& a) const { acc += a; }
  Value mul(const Value& a, const Value& b) const { return a * b; }
};

struct FieldRing {
  field::Modulus m;
  using Value = field::FieldElement;
  Value from(std::int64_t v) const { return field::reduce(v, m); }
  Value from(const BigInt& v) const {
    BigInt r = v % m.value();
    if (r < 0) r += m.value();
    return Value(r.convert_to<std::uint64_t>(), m);
  }
  Value zero() const { return Value(); }
  void mac(Value& acc, const Value& a, const Value& b) const { acc = field::add(acc, field::mul(a, b, m), m); }
  void add_to(Value& acc, const Value& a) const { acc = field::add(acc, a, m); }
  Value mul(const Value& a, const Value& b) const { return field::mul(a, b, m); }
};

/// Layer-by-layer evaluation over any commutative ring supplying
/// from/zero/mac/add_to/mul; parameters are converted once up front.
template <class Ring>
class Engine {
 public:
  using Value = typename Ring::Value;

  Engine(const QuantizedModel& qm, Ring ring) : qm_(qm), ring_(std::move(ring)) {
    for (const QLayer& layer : qm.layers()) {
      Prepared p;
      std::visit(overloaded{
                     [&](const QConv& c) { convert(c.weight, c.bias, p); },
                     [&](const QDense& d) { convert(d.weight, d.bias, p); },
                     [&](const QActivation& a) {
                       p.coef = ring_.from(BigInt(a.a) * a.input_scale);
                       p.constant = ring_.from(a.constant);
                     },
                     [](const auto&) {},
                 },
                 layer);
      prepared_.push_back(std::move(p));
    }
  }

  std::vector<Value> run(std::span<const std::int64_t> input) const {
    if (input.size() != shape_size(qm_.input_shape())) {
      throw std::invalid_argument("quantized forward: input has " + std::to_string(input.size()) +
                                  " entries, model expects " + shape_string(qm_.input_shape()));
    }
    std::vector<Value> cur;
    cur.reserve(input.size());
    for (std::int64_t v : input) cur.push_back(ring_.from(v));
    for (std::size_t l = 0; l < qm_.layers().size(); ++l) {
      const Shape& in = qm_.layer_input_shape(l);
      const Shape& out = qm_.output_shape(l);
      const Prepared& p = prepared_[l];
      std::vector<Value> next(shape_size(out), ring_.zero());
      std::visit(overloaded{
                     [&](const QConv& c) {
                       const std::size_t C = in[0], H = in[1], W = in[2];
                       const std::size_t O = out[0], Ho = out[1], Wo = out[2];
                       const std::size_t K = c.geometry.kernel, s = c.geometry.stride, pad = c.geometry.padding;
                       for (std::size_t o = 0; o < O; ++o) {
                         for (std::size_t oh = 0; oh < Ho; ++oh) {
                           for (std::size_t ow = 0; ow < Wo; ++ow) {
                             Value acc = p.bias[o];
                             for (std::size_t ch = 0; ch < C; ++ch) {
                               for (std::size_t ki = 0; ki < K; ++ki) {
                                 const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(oh * s + ki) -
                                                          static_cast<std::ptrdiff_t>(pad);
                                 if (h < 0 || h >= static_cast<std::ptrdiff_t>(H)) continue;
                                 for (std::size_t kj = 0; kj < K; ++kj) {
                                   const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(ow * s + kj) -
                                                            static_cast<std::ptrdiff_t>(pad);
                                   if (w < 0 || w >= static_cast<std::ptrdiff_t>(W)) continue;
                                   ring_.mac(acc, p.weight[((o * C + ch) * K + ki) * K + kj],
                                             cur[(ch * H + static_cast<std::size_t>(h)) * W +
                                                 static_cast<std::size_t>(w)]);
                                 }
                               }
                             }
                             next[(o * Ho + oh) * Wo + ow] = std::move(acc);
                           }
                         }
                       }
                     },
                     [&](const QDense& d) {
                       const std::size_t D = in[0];
                       for (std::size_t o = 0; o < d.out_dim; ++o) {
                         Value acc = p.bias[o];
                         for (std::size_t k = 0; k < D; ++k) ring_.mac(acc, p.weight[o * D + k], cur[k]);
                         next[o] = std::move(acc);
                       }
                     },
                     [&](const QSumPool& sp) {
                       const std::size_t C = in[0], H = in[1], W = in[2];
                       const std::size_t Ho = out.size() == 3 ? out[1] : 1, Wo = out.size() == 3 ? out[2] : 1;
                       const std::size_t win = sp.global ? H : sp.window;
                       const std::size_t winw = sp.global ? W : sp.window;
                       const std::size_t stride = sp.global ? 1 : sp.stride;
                       const std::size_t pad = sp.global ? 0 : sp.padding;
                       for (std::size_t ch = 0; ch < C; ++ch) {
                         for (std::size_t oh = 0; oh < Ho; ++oh) {
                           for (std::size_t ow = 0; ow < Wo; ++ow) {
                             Value acc = ring_.zero();
                             for (std::size_t ki = 0; ki < win; ++ki) {
                               const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(oh * stride + ki) -
                                                        static_cast<std::ptrdiff_t>(pad);
                               if (h < 0 || h >= static_cast<std::ptrdiff_t>(H)) continue;
                               for (std::size_t kj = 0; kj < winw; ++kj) {
                                 const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(ow * stride + kj) -
                                                          static_cast<std::ptrdiff_t>(pad);
                                 if (w < 0 || w >= static_cast<std::ptrdiff_t>(W)) continue;
                                 ring_.add_to(acc, cur[(ch * H + static_cast<std::size_t>(h)) * W +
                                                       static_cast<std::size_t>(w)]);
                               }
                             }
                             next[(ch * Ho + oh) * Wo + ow] = std::move(acc);
                           }
                         }
                       }
                     },
                     [&](const QActivation&) {
                       for (std::size_t i = 0; i < cur.size(); ++i) {
                         Value y = ring_.mul(cur[i], cur[i]);
                         ring_.mac(y, p.coef, cur[i]);
                         ring_.add_to(y, p.constant);
                         next[i] = std::move(y);
                       }
                     },
                     [&](const QFlatten&) { next = cur; },
                 },
                 qm_.layers()[l]);
      cur = std::move(next);
    }
    return cur;
  }

 private:
  struct Prepared {
    std::vector<Value> weight;
    std::vector<Value> bias;
    Value coef{};
    Value constant{};
  };

  void convert(const std::vector<std::int64_t>& w, const std::vector<BigInt>& b, Prepared& p) const {
    p.weight.reserve(w.size());
    for (std::int64_t v : w) p.weight.push_back(ring_.from(v));
    p.bias.reserve(b.size());
    for (const BigInt& v : b) p.bias.push_back(ring_.from(v));
  }

  const QuantizedModel& qm_;
  Ring ring_;
  std::vector<Prepared> prepared_;
};

}  // namespace

void QuantConfig::validate() const {
  if (!is_power_of_two(weight_scale) || !is_power_of_two(input_scale)) {
    throw std::invalid_argument("quant config: scales must be positive powers of two");
  }
  if (activation_a < 1) throw std::invalid_argument("quant config: activation_a must be >= 1");
}

std::string describe(const QLayer& layer) {
  return std::visit(overloaded{
                        [](const QConv& c) { return "conv2d(" + std::to_string(c.geometry.out_channels) + ")"; },
                        [](const QDense& d) { return "dense(" + std::to_string(d.out_dim) + ")"; },
                        [](const QSumPool& p) {
                          return p.global ? std::string("global_sum_pool")
                                          : "sum_pool(" + std::to_string(p.window) + ")";
                        },
                        [](const QActivation& a) {
                          return a.a == 0 ? std::string("square") : "poly(" + std::to_string(a.a) + ")";
                        },
                        [](const QFlatten&) { return std::string("flatten"); },
                    },
                    layer);
}

QuantizedModel::QuantizedModel(Shape input_shape, std::vector<QLayer> layers, QuantConfig config)
    : input_shape_(std::move(input_shape)),
      layers_(std::move(layers)),
      config_(config),
      input_scale_(config.input_scale) {
  config_.validate();
  shapes_.push_back(input_shape_);
  BigInt scale = input_scale_;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Shape in = shapes_.back();
    const auto fail = [&](const std::string& what) {
      return std::invalid_argument("quantized layer " + std::to_string(l) + " (" + describe(layers_[l]) + "): " + what);
    };
    Shape out = std::visit(
        overloaded{
            [&](QConv& c) -> Shape {
              if (in.size() != 3) throw fail("expects (C,H,W) input");
              const auto& g = c.geometry;
              if (g.kernel == 0 || g.stride == 0 || g.out_channels == 0) throw fail("bad geometry");
              if (c.weight_shape != Shape{g.out_channels, in[0], g.kernel, g.kernel} ||
                  c.weight.size() != shape_size(c.weight_shape) || c.bias.size() != g.out_channels) {
                throw fail("parameter shapes do not match input " + shape_string(in));
              }
              const std::size_t ho = out_extent(in[1], g.kernel, g.stride, g.padding);
              const std::size_t wo = out_extent(in[2], g.kernel, g.stride, g.padding);
              if (ho == 0 || wo == 0) throw fail("kernel larger than padded input");
              scale *= config_.weight_scale;
              return {g.out_channels, ho, wo};
            },
            [&](QDense& d) -> Shape {
              if (in.size() != 1) throw fail("expects flat input");
              if (d.weight_shape != Shape{d.out_dim, in[0]} || d.weight.size() != shape_size(d.weight_shape) ||
                  d.bias.size() != d.out_dim) {
                throw fail("parameter shapes do not match input " + shape_string(in));
              }
              scale *= config_.weight_scale;
              return {d.out_dim};
            },
            [&](QSumPool& p) -> Shape {
              if (in.size() != 3) throw fail("expects (C,H,W) input");
              if (p.scale_multiplier < 1) throw fail("scale multiplier must be >= 1");
              scale *= p.scale_multiplier;
              if (p.global) return {in[0]};
              if (p.window == 0 || p.stride == 0 || p.padding >= p.window) throw fail("bad window");
              const std::size_t ho = out_extent(in[1], p.window, p.stride, p.padding);
              const std::size_t wo = out_extent(in[2], p.window, p.stride, p.padding);
              if (ho == 0 || wo == 0) throw fail("window larger than padded input");
              return {in[0], ho, wo};
            },
            [&](QActivation& a) -> Shape {
              if (a.a < 0) throw fail("negative activation coefficient");
              if (a.input_scale == 0) a.input_scale = scale;
              if (a.input_scale != scale) {
                throw fail("recorded input scale " + a.input_scale.str() + " disagrees with running scale " +
                           scale.str());
              }
              scale = scale * scale;
              return in;
            },
            [&](QFlatten&) -> Shape { return {shape_size(in)}; },
        },
        layers_[l]);
    shapes_.push_back(std::move(out));
    layer_scales_.push_back(scale);
  }
  required_bound_ = required_modulus_bound(*this, input_scale_);
}

BigInt round_scaled(double value, const BigInt& scale) {
  if (!std::isfinite(value)) throw std::invalid_argument("round_scaled: non-finite value");
  if (value == 0.0) return 0;
  int exp = 0;
  const double frac = std::frexp(value, &exp);  // value = frac * 2^exp, 0.5 <= |frac| < 1
  const auto mant = static_cast<std::int64_t>(std::ldexp(frac, 53));  // exact
  exp -= 53;
  BigInt num = abs_big(BigInt(mant) * scale);
  const bool negative = (mant < 0) != (scale < 0);
  BigInt q;
  if (exp >= 0) {
    q = num << exp;
  } else {
    const unsigned shift = static_cast<unsigned>(-exp);
    q = num >> shift;
    const BigInt rem = num - (q << shift);
    if (rem * 2 >= (BigInt(1) << shift)) q += 1;
  }
  return negative ? BigInt(-q) : q;
}

std::int64_t quantize_weight(double w, std::int64_t weight_scale) {
  const BigInt q = round_scaled(w, weight_scale);
  if (abs_big(q) > BigInt(std::numeric_limits<std::int64_t>::max())) {
    throw std::overflow_error("quantize: weight " + std::to_string(w) + " * " + std::to_string(weight_scale) +
                              " does not fit in 64 bits");
  }
  return q.convert_to<std::int64_t>();
}

QuantizedModel quantize(const nn::Model& model, const QuantConfig& qc) {
  qc.validate();
  std::vector<QLayer> layers;
  BigInt scale = qc.input_scale;
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    const nn::LayerSpec& spec = model.spec()[l];
    const nn::LayerParams& par = model.params()[l];
    const Shape& in = model.layer_input_shape(l);
    const auto incompatible = [&](const std::string& why) {
      return FieldIncompatibleError("layer " + std::to_string(l) + " (" + nn::describe(spec) +
                                    ") is not field-compatible: " + why);
    };
    const auto quantize_linear = [&](auto& q) {
      q.weight.reserve(par.weight.size());
      for (double w : par.weight.data) q.weight.push_back(quantize_weight(w, qc.weight_scale));
      const BigInt pre = scale * qc.weight_scale;
      for (double b : par.bias.data) q.bias.push_back(round_scaled(b, pre));
      q.weight_shape = par.weight.shape;
      scale = pre;
    };
    std::visit(overloaded{
                   [&](const nn::Conv2D& c) {
                     QConv q;
                     q.geometry = c;
                     quantize_linear(q);
                     layers.emplace_back(std::move(q));
                   },
                   [&](const nn::Dense& d) {
                     QDense q;
                     q.out_dim = d.out_dim;
                     quantize_linear(q);
                     layers.emplace_back(std::move(q));
                   },
                   [&](const nn::Pool& p) {
                     if (p.kind == nn::PoolKind::Max) throw incompatible("max pooling has no polynomial form");
                     QSumPool q{p.window, p.stride, p.padding, false, 1};
                     if (p.kind == nn::PoolKind::Mean) q.scale_multiplier = static_cast<std::int64_t>(p.window * p.window);
                     scale *= q.scale_multiplier;
                     layers.emplace_back(q);
                   },
                   [&](const nn::GlobalAvgPool&) {
                     QSumPool q{0, 1, 0, true, static_cast<std::int64_t>(in[1] * in[2])};
                     scale *= q.scale_multiplier;
                     layers.emplace_back(q);
                   },
                   [&](const nn::Activation& a) {
                     if (!a.field_compatible()) throw incompatible("ReLU-type activations have no polynomial form");
                     QActivation q;
                     if (a.kind == nn::Activation::Kind::Poly) {
                       if (a.param != qc.activation_a) {
                         throw std::invalid_argument("layer " + std::to_string(l) + ": model uses a = " +
                                                     std::to_string(a.param) + " but quant config has a = " +
                                                     std::to_string(qc.activation_a));
                       }
                       q.a = a.param;
                       if (qc.fold_minimax_constant) {
                         // round(a^2 S^2 / 8), exact: S is an integer.
                         const BigInt num = BigInt(a.param) * a.param * scale * scale;
                         BigInt c = num / 8;
                         if ((num - c * 8) * 2 >= 8) c += 1;
                         q.constant = c;
                       }
                     }
                     q.input_scale = scale;
                     scale = scale * scale;
                     layers.emplace_back(std::move(q));
                   },
                   [&](const nn::Dropout&) {},
                   [&](const nn::Flatten&) { layers.emplace_back(QFlatten{}); },
               },
               spec);
  }
  return QuantizedModel(model.input_shape(), std::move(layers), qc);
}

std::vector<std::int64_t> quantize_input(std::span<const double> x, std::int64_t input_scale) {
  std::vector<std::int64_t> out;
  out.reserve(x.size());
  for (double v : x) out.push_back(quantize_weight(v, input_scale));
  return out;
}

BigInt poly_activation_scaled(const BigInt& v, const BigInt& scale, long a, const std::optional<BigInt>& bound) {
  BigInt r = v * v + BigInt(a) * scale * v;
  if (bound && abs_big(r) > *bound) {
    throw std::overflow_error("poly_activation_scaled: |" + r.str() + "| exceeds bound " + bound->str());
  }
  return r;
}

std::vector<BigInt> integer_forward(const QuantizedModel& qm, std::span<const std::int64_t> input) {
  return Engine<IntegerRing>(qm, IntegerRing{}).run(input);
}

std::vector<std::int64_t> field_forward(const QuantizedModel& qm, std::span<const std::int64_t> input,
                                        const field::Modulus& m, bool allow_wrap) {
  return field_forward_batch(qm, input, 1, m, allow_wrap).front();
}

std::vector<std::vector<BigInt>> integer_forward_batch(const QuantizedModel& qm, std::span<const std::int64_t> inputs,
                                                       std::size_t n) {
  const std::size_t d = shape_size(qm.input_shape());
  if (inputs.size() != n * d) throw std::invalid_argument("integer_forward_batch: input size is not n * input size");
  const Engine<IntegerRing> engine(qm, IntegerRing{});
  std::vector<std::vector<BigInt>> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(engine.run(inputs.subspan(i * d, d)));
  return out;
}

std::vector<std::vector<std::int64_t>> field_forward_batch(const QuantizedModel& qm,
                                                           std::span<const std::int64_t> inputs, std::size_t n,
                                                           const field::Modulus& m, bool allow_wrap) {
  if (!allow_wrap && qm.required_bound() > BigInt(m.half())) {
    throw ModulusTooSmall("modulus " + std::to_string(m.value()) + " too small: (p-1)/2 = " +
                          std::to_string(m.half()) + " < required bound " + qm.required_bound().str());
  }
  const std::size_t d = shape_size(qm.input_shape());
  if (inputs.size() != n * d) {
    throw std::invalid_argument("field_forward: input has " + std::to_string(inputs.size()) +
                                " entries, model expects " + std::to_string(n) + " x " + shape_string(qm.input_shape()));
  }
  const Engine<FieldRing> engine(qm, FieldRing{m});
  std::vector<std::vector<std::int64_t>> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto logits = engine.run(inputs.subspan(i * d, d));
    std::vector<std::int64_t> decoded;
    decoded.reserve(logits.size());
    for (const auto& e : logits) decoded.push_back(field::decode(e, m));
    out.push_back(std::move(decoded));
  }
  return out;
}

BigInt required_modulus_bound(const QuantizedModel& qm, const BigInt& input_max) {
  BigInt x = abs_big(input_max);
  BigInt bound = x;
  for (std::size_t l = 0; l < qm.layers().size(); ++l) {
    const Shape& in = qm.layer_input_shape(l);
    x = std::visit(overloaded{
                       [&](const QConv& c) -> BigInt {
                         const std::size_t fan_in = in[0] * c.geometry.kernel * c.geometry.kernel;
                         return BigInt(fan_in) * max_abs_weight(c.weight) * x + max_abs(c.bias);
                       },
                       [&](const QDense& d) -> BigInt {
                         return BigInt(in[0]) * max_abs_weight(d.weight) * x + max_abs(d.bias);
                       },
                       [&](const QSumPool& p) -> BigInt {
                         const std::size_t area = p.global ? in[1] * in[2] : p.window * p.window;
                         return BigInt(area) * x;
                       },
                       [&](const QActivation& a) -> BigInt {
                         return x * x + BigInt(a.a) * abs_big(a.input_scale) * x + abs_big(a.constant);
                       },
                       [&](const QFlatten&) -> BigInt { return x; },
                   },
                   qm.layers()[l]);
    bound = std::max(bound, x);
  }
  return bound;
}

std::uint64_t auto_prime(const QuantizedModel& qm) {
  const BigInt target = 2 * qm.required_bound() + 1;
  if (target > BigInt(std::numeric_limits<std::uint64_t>::max())) {
    throw std::overflow_error("auto_prime: required modulus 2*" + qm.required_bound().str() +
                              "+1 exceeds 64 bits");
  }
  return field::next_prime(target.convert_to<std::uint64_t>());
}

std::vector<double> descale(std::span<const BigInt> logits, const BigInt& scale) {
  std::vector<double> out;
  out.reserve(logits.size());
  for (const BigInt& v : logits) {
    // Divide exactly first so huge scales keep full double precision.
    const BigInt q = v / scale;
    const BigInt r = v - q * scale;
    out.push_back(q.convert_to<double>() + r.convert_to<double>() / scale.convert_to<double>());
  }
  return out;
}

int argmax(std::span<const BigInt> logits) {
  return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

int argmax(std::span<const std::int64_t> logits) {
  return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

namespace {

json big_array(const std::vector<BigInt>& v) {
  json a = json::array();
  for (const BigInt& x : v) a.push_back(x.str());
  return a;
}

std::vector<BigInt> big_vector(const json& a) {
  std::vector<BigInt> v;
  for (const auto& x : a) v.push_back(parse_big(x));
  return v;
}

}  // namespace

json quantized_to_json(const QuantizedModel& qm, std::optional<std::uint64_t> modulus, const json& meta) {
  json layers = json::array();
  json params = json::array();
  for (const QLayer& layer : qm.layers()) {
    std::visit(overloaded{
                   [&](const QConv& c) {
                     layers.push_back({{"type", "conv2d"},
                                       {"out_channels", c.geometry.out_channels},
                                       {"kernel", c.geometry.kernel},
                                       {"stride", c.geometry.stride},
                                       {"padding", c.geometry.padding}});
                     params.push_back({{"weight", {{"shape", c.weight_shape}, {"data", encode_i64(c.weight)}}},
                                       {"bias", big_array(c.bias)}});
                   },
                   [&](const QDense& d) {
                     layers.push_back({{"type", "dense"}, {"out_dim", d.out_dim}});
                     params.push_back({{"weight", {{"shape", d.weight_shape}, {"data", encode_i64(d.weight)}}},
                                       {"bias", big_array(d.bias)}});
                   },
                   [&](const QSumPool& p) {
                     layers.push_back({{"type", "sum_pool"},
                                       {"window", p.window},
                                       {"stride", p.stride},
                                       {"padding", p.padding},
                                       {"global", p.global},
                                       {"scale_multiplier", p.scale_multiplier}});
                     params.push_back(nullptr);
                   },
                   [&](const QActivation& a) {
                     layers.push_back({{"type", "activation"},
                                       {"kind", a.a == 0 ? "square" : "poly"},
                                       {"a", a.a},
                                       {"input_scale", a.input_scale.str()},
                                       {"constant", a.constant.str()}});
                     params.push_back(nullptr);
                   },
                   [&](const QFlatten&) {
                     layers.push_back({{"type", "flatten"}});
                     params.push_back(nullptr);
                   },
               },
               layer);
  }
  const QuantConfig& qc = qm.config();
  json j = {{"format_version", kQuantizedFormatVersion},
            {"quant_config",
             {{"weight_scale", qc.weight_scale},
              {"input_scale", qc.input_scale},
              {"activation_a", qc.activation_a},
              {"fold_minimax_constant", qc.fold_minimax_constant}}},
            {"input_shape", qm.input_shape()},
            {"layers", layers},
            {"int_params", params},
            {"layer_scales", big_array(qm.layer_scales())},
            {"required_bound", qm.required_bound().str()},
            {"meta", meta}};
  if (modulus) j["modulus"] = *modulus;
  return j;
}

QuantizedModel quantized_from_json(const json& j, std::optional<std::uint64_t>* modulus, json* meta) {
  const int version = j.at("format_version").get<int>();
  if (version != kQuantizedFormatVersion) {
    throw std::runtime_error("unsupported quantized format_version " + std::to_string(version));
  }
  const json& qj = j.at("quant_config");
  QuantConfig qc;
  qc.weight_scale = qj.at("weight_scale").get<std::int64_t>();
  qc.input_scale = qj.at("input_scale").get<std::int64_t>();
  qc.activation_a = qj.at("activation_a").get<long>();
  qc.fold_minimax_constant = qj.value("fold_minimax_constant", false);

  const json& lj = j.at("layers");
  const json& pj = j.at("int_params");
  if (lj.size() != pj.size()) throw std::runtime_error("quantized file: layers/int_params length mismatch");
  std::vector<QLayer> layers;
  for (std::size_t l = 0; l < lj.size(); ++l) {
    const json& L = lj[l];
    const std::string type = L.at("type").get<std::string>();
    const auto linear = [&](auto& q) {
      q.weight_shape = pj[l].at("weight").at("shape").get<Shape>();
      q.weight = decode_i64(pj[l].at("weight").at("data").get<std::string>());
      q.bias = big_vector(pj[l].at("bias"));
    };
    if (type == "conv2d") {
      QConv q;
      q.geometry = nn::Conv2D{L.at("out_channels").get<std::size_t>(), L.at("kernel").get<std::size_t>(),
                              L.at("stride").get<std::size_t>(), L.at("padding").get<std::size_t>()};
      linear(q);
      layers.emplace_back(std::move(q));
    } else if (type == "dense") {
      QDense q;
      q.out_dim = L.at("out_dim").get<std::size_t>();
      linear(q);
      layers.emplace_back(std::move(q));
    } else if (type == "sum_pool") {
      layers.emplace_back(QSumPool{L.at("window").get<std::size_t>(), L.at("stride").get<std::size_t>(),
                                   L.at("padding").get<std::size_t>(), L.at("global").get<bool>(),
                                   L.at("scale_multiplier").get<std::int64_t>()});
    } else if (type == "activation") {
      QActivation q;
      q.a = L.at("a").get<long>();
      q.input_scale = parse_big(L.at("input_scale"));
      q.constant = parse_big(L.at("constant"));
      layers.emplace_back(std::move(q));
    } else if (type == "flatten") {
      layers.emplace_back(QFlatten{});
    } else {
      throw FieldIncompatibleError("quantized file: layer " + std::to_string(l) + " has type '" + type +
                                   "', which is not field-compatible");
    }
  }
  QuantizedModel qm(j.at("input_shape").get<Shape>(), std::move(layers), qc);
  if (big_vector(j.at("layer_scales")) != qm.layer_scales()) {
    throw std::runtime_error("quantized file: stored layer_scales disagree with the layer sequence");
  }
  if (parse_big(j.at("required_bound")) != qm.required_bound()) {
    throw std::runtime_error("quantized file: stored required_bound disagrees with the parameters");
  }
  if (modulus) {
    *modulus = j.contains("modulus") && !j.at("modulus").is_null()
                   ? std::optional<std::uint64_t>(j.at("modulus").get<std::uint64_t>())
                   : std::nullopt;
  }
  if (meta) *meta = j.value("meta", json::object());
  return qm;
}

}  // namespace fieldnet::fieldnn
