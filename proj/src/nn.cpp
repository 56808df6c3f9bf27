#include "fieldnet/nn.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace fieldnet::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<RowMat>;
using MapCR = Eigen::Map<const RowMat>;
using MapV = Eigen::Map<Eigen::VectorXd>;
using MapCV = Eigen::Map<const Eigen::VectorXd>;

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

std::size_t conv_out(std::size_t in, std::size_t k, std::size_t s, std::size_t p) {
  if (in + 2 * p < k) return 0;
  return (in + 2 * p - k) / s + 1;
}

Shape with_batch(std::size_t n, const Shape& s) {
  Shape out{n};
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

void im2col(const double* x, std::size_t C, std::size_t H, std::size_t W, const Conv2D& cv, std::size_t Ho,
            std::size_t Wo, double* cols) {
  const std::size_t K = cv.kernel;
  const std::size_t hw = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < K; ++ki) {
      for (std::size_t kj = 0; kj < K; ++kj) {
        double* row = cols + ((c * K + ki) * K + kj) * hw;
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(oh * cv.stride + ki) - static_cast<std::ptrdiff_t>(cv.padding);
          for (std::size_t ow = 0; ow < Wo; ++ow) {
            const std::ptrdiff_t w =
                static_cast<std::ptrdiff_t>(ow * cv.stride + kj) - static_cast<std::ptrdiff_t>(cv.padding);
            const bool inside = h >= 0 && w >= 0 && h < static_cast<std::ptrdiff_t>(H) && w < static_cast<std::ptrdiff_t>(W);
            row[oh * Wo + ow] = inside ? x[(c * H + static_cast<std::size_t>(h)) * W + static_cast<std::size_t>(w)] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, std::size_t C, std::size_t H, std::size_t W, const Conv2D& cv, std::size_t Ho,
            std::size_t Wo, double* dx) {
  const std::size_t K = cv.kernel;
  const std::size_t hw = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < K; ++ki) {
      for (std::size_t kj = 0; kj < K; ++kj) {
        const double* row = cols + ((c * K + ki) * K + kj) * hw;
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(oh * cv.stride + ki) - static_cast<std::ptrdiff_t>(cv.padding);
          if (h < 0 || h >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t ow = 0; ow < Wo; ++ow) {
            const std::ptrdiff_t w =
                static_cast<std::ptrdiff_t>(ow * cv.stride + kj) - static_cast<std::ptrdiff_t>(cv.padding);
            if (w < 0 || w >= static_cast<std::ptrdiff_t>(W)) continue;
            dx[(c * H + static_cast<std::size_t>(h)) * W + static_cast<std::size_t>(w)] += row[oh * Wo + ow];
          }
        }
      }
    }
  }
}

bool all_finite(const Tensor& t) {
  return std::all_of(t.data.begin(), t.data.end(), [](double v) { return std::isfinite(v); });
}

std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

Activation Activation::scaled_relu(long c) {
  if (c % 2 != 0) throw std::invalid_argument("scaled ReLU constant must be even, got " + std::to_string(c));
  return {Kind::ScaledReLU, c};
}

Activation Activation::poly(long a) {
  if (a < 1) throw std::invalid_argument("poly activation needs a >= 1, got " + std::to_string(a));
  return {Kind::Poly, a};
}

std::string Activation::name() const {
  switch (kind) {
    case Kind::ReLU: return "relu";
    case Kind::ScaledReLU: return "scaled_relu(" + std::to_string(param) + ")";
    case Kind::Square: return "square";
    case Kind::Poly: return "poly(" + std::to_string(param) + ")";
  }
  return "?";
}

double activation_forward(const Activation& act, double x) {
  switch (act.kind) {
    case Activation::Kind::ReLU: return x > 0.0 ? x : 0.0;
    case Activation::Kind::ScaledReLU: return x > 0.0 ? static_cast<double>(act.param) * x : 0.0;
    case Activation::Kind::Square: return x * x;
    case Activation::Kind::Poly: return x * x + static_cast<double>(act.param) * x;
  }
  return 0.0;
}

double activation_backward(const Activation& act, double x) {
  switch (act.kind) {
    case Activation::Kind::ReLU: return x > 0.0 ? 1.0 : 0.0;
    case Activation::Kind::ScaledReLU: return x > 0.0 ? static_cast<double>(act.param) : 0.0;
    case Activation::Kind::Square: return 2.0 * x;
    case Activation::Kind::Poly: return 2.0 * x + static_cast<double>(act.param);
  }
  return 0.0;
}

std::string to_string(PoolKind k) {
  switch (k) {
    case PoolKind::Max: return "max";
    case PoolKind::Mean: return "mean";
    case PoolKind::Sum: return "sum";
  }
  return "?";
}

PoolKind pool_kind_from_string(const std::string& s) {
  if (s == "max") return PoolKind::Max;
  if (s == "mean" || s == "avg" || s == "average") return PoolKind::Mean;
  if (s == "sum") return PoolKind::Sum;
  throw std::invalid_argument("unknown pool kind '" + s + "'");
}

std::string describe(const LayerSpec& layer) {
  return std::visit(
      overloaded{
          [](const Conv2D& c) {
            return "conv2d(" + std::to_string(c.out_channels) + ", k=" + std::to_string(c.kernel) +
                   ", s=" + std::to_string(c.stride) + ", p=" + std::to_string(c.padding) + ")";
          },
          [](const Dense& d) { return "dense(" + std::to_string(d.out_dim) + ")"; },
          [](const Pool& p) {
            return to_string(p.kind) + "_pool(" + std::to_string(p.window) + ", s=" + std::to_string(p.stride) +
                   ", p=" + std::to_string(p.padding) + ")";
          },
          [](const GlobalAvgPool&) { return std::string("global_avg_pool"); },
          [](const Activation& a) { return a.name(); },
          [](const Dropout& d) { return "dropout(" + fmt_g(d.rate) + ")"; },
          [](const Flatten&) { return std::string("flatten"); },
      },
      layer);
}

ShapeError::ShapeError(std::size_t layer, const std::string& what)
    : std::invalid_argument("layer " + std::to_string(layer) + ": " + what), layer_(layer) {}

Model::Model(std::vector<LayerSpec> spec, Shape input_shape)
    : spec_(std::move(spec)), input_shape_(std::move(input_shape)) {
  if (input_shape_.empty() || shape_size(input_shape_) == 0) throw ShapeError(0, "empty input shape");
  shapes_.push_back(input_shape_);
  for (std::size_t l = 0; l < spec_.size(); ++l) {
    const Shape& in = shapes_.back();
    LayerParams params;
    Shape out = std::visit(
        overloaded{
            [&](const Conv2D& c) -> Shape {
              if (in.size() != 3) throw ShapeError(l, "conv2d expects (C,H,W) input, got " + shape_string(in));
              if (c.out_channels == 0 || c.kernel == 0 || c.stride == 0) {
                throw ShapeError(l, "conv2d dimensions must be positive");
              }
              const std::size_t ho = conv_out(in[1], c.kernel, c.stride, c.padding);
              const std::size_t wo = conv_out(in[2], c.kernel, c.stride, c.padding);
              if (ho == 0 || wo == 0) throw ShapeError(l, "conv2d kernel larger than padded input");
              params.weight = Tensor({c.out_channels, in[0], c.kernel, c.kernel});
              params.bias = Tensor({c.out_channels});
              return {c.out_channels, ho, wo};
            },
            [&](const Dense& d) -> Shape {
              if (in.size() != 1) throw ShapeError(l, "dense expects flat input, got " + shape_string(in));
              if (d.out_dim == 0) throw ShapeError(l, "dense output dimension must be positive");
              params.weight = Tensor({d.out_dim, in[0]});
              params.bias = Tensor({d.out_dim});
              return {d.out_dim};
            },
            [&](const Pool& p) -> Shape {
              if (in.size() != 3) throw ShapeError(l, "pooling expects (C,H,W) input, got " + shape_string(in));
              if (p.window == 0 || p.stride == 0 || p.padding >= p.window) {
                throw ShapeError(l, "pooling needs window, stride >= 1 and padding < window");
              }
              const std::size_t ho = conv_out(in[1], p.window, p.stride, p.padding);
              const std::size_t wo = conv_out(in[2], p.window, p.stride, p.padding);
              if (ho == 0 || wo == 0) throw ShapeError(l, "pooling window larger than padded input");
              return {in[0], ho, wo};
            },
            [&](const GlobalAvgPool&) -> Shape {
              if (in.size() != 3) throw ShapeError(l, "global pooling expects (C,H,W) input");
              return {in[0]};
            },
            [&](const Activation&) -> Shape { return in; },
            [&](const Dropout& d) -> Shape {
              if (!(d.rate >= 0.0 && d.rate < 1.0)) throw ShapeError(l, "dropout rate must be in [0,1)");
              return in;
            },
            [&](const Flatten&) -> Shape { return {shape_size(in)}; },
        },
        spec_[l]);
    shapes_.push_back(std::move(out));
    params_.push_back(std::move(params));
  }
}

std::size_t Model::num_classes() const {
  const Shape& out = shapes_.back();
  if (out.size() != 1) throw std::logic_error("model output is not flat: " + shape_string(out));
  return out[0];
}

void init_params(Model& model, std::uint64_t seed, double gain) {
  Rng rng(seed);
  for (auto& p : model.params()) {
    if (p.empty()) continue;
    const std::size_t fan_in = p.weight.stride0();
    const double bound = gain * std::sqrt(3.0 / static_cast<double>(fan_in));
    for (double& w : p.weight.data) w = rng.uniform(-bound, bound);
    std::fill(p.bias.data.begin(), p.bias.data.end(), 0.0);
  }
}

double default_init_gain(const Model& model) {
  for (const auto& l : model.spec()) {
    if (const auto* a = std::get_if<Activation>(&l); a && !a->field_compatible()) return std::sqrt(2.0);
  }
  return 1.0;
}

Tensor forward(const Model& model, const Tensor& batch, Mode mode, ForwardCache* cache, Rng* rng) {
  if (batch.shape.size() != model.input_shape().size() + 1 ||
      !std::equal(model.input_shape().begin(), model.input_shape().end(), batch.shape.begin() + 1)) {
    throw ShapeError(0, "input batch " + shape_string(batch.shape) + " does not match model input " +
                            shape_string(model.input_shape()));
  }
  const std::size_t N = batch.shape[0];
  if (cache) {
    cache->inputs.assign(model.num_layers(), Tensor{});
    cache->max_index.assign(model.num_layers(), {});
    cache->dropout_mask.assign(model.num_layers(), {});
  }
  Tensor cur = batch;
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    const Shape& in = model.layer_input_shape(l);
    const Shape& outs = model.output_shape(l);
    const LayerParams& par = model.params()[l];
    Tensor next(with_batch(N, outs));
    std::visit(
        overloaded{
            [&](const Conv2D& c) {
              const std::size_t C = in[0], H = in[1], W = in[2];
              const std::size_t O = outs[0], Ho = outs[1], Wo = outs[2];
              const std::size_t ckk = C * c.kernel * c.kernel;
              RowMat cols(ckk, Ho * Wo);
              MapCR w(par.weight.data.data(), static_cast<Eigen::Index>(O), static_cast<Eigen::Index>(ckk));
              MapCV b(par.bias.data.data(), static_cast<Eigen::Index>(O));
              for (std::size_t n = 0; n < N; ++n) {
                im2col(cur.data.data() + n * C * H * W, C, H, W, c, Ho, Wo, cols.data());
                MapR y(next.data.data() + n * O * Ho * Wo, static_cast<Eigen::Index>(O),
                       static_cast<Eigen::Index>(Ho * Wo));
                y.noalias() = w * cols;
                y.colwise() += b;
              }
            },
            [&](const Dense& d) {
              const std::size_t D = in[0];
              MapCR x(cur.data.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(D));
              MapCR w(par.weight.data.data(), static_cast<Eigen::Index>(d.out_dim), static_cast<Eigen::Index>(D));
              MapCV b(par.bias.data.data(), static_cast<Eigen::Index>(d.out_dim));
              MapR y(next.data.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(d.out_dim));
              y.noalias() = x * w.transpose();
              y.rowwise() += b.transpose();
            },
            [&](const Pool& p) {
              const std::size_t C = in[0], H = in[1], W = in[2];
              const std::size_t Ho = outs[1], Wo = outs[2];
              const double area = static_cast<double>(p.window * p.window);
              std::vector<std::uint32_t>* argmax = nullptr;
              if (cache && p.kind == PoolKind::Max) {
                argmax = &cache->max_index[l];
                argmax->resize(next.size());
              }
              for (std::size_t n = 0; n < N; ++n) {
                const double* x = cur.data.data() + n * C * H * W;
                double* y = next.data.data() + n * C * Ho * Wo;
                for (std::size_t ch = 0; ch < C; ++ch) {
                  for (std::size_t oh = 0; oh < Ho; ++oh) {
                    for (std::size_t ow = 0; ow < Wo; ++ow) {
                      double acc = p.kind == PoolKind::Max ? -std::numeric_limits<double>::infinity() : 0.0;
                      std::uint32_t best = 0;
                      for (std::size_t ki = 0; ki < p.window; ++ki) {
                        const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(oh * p.stride + ki) -
                                                 static_cast<std::ptrdiff_t>(p.padding);
                        if (h < 0 || h >= static_cast<std::ptrdiff_t>(H)) continue;
                        for (std::size_t kj = 0; kj < p.window; ++kj) {
                          const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(ow * p.stride + kj) -
                                                   static_cast<std::ptrdiff_t>(p.padding);
                          if (w < 0 || w >= static_cast<std::ptrdiff_t>(W)) continue;
                          const std::size_t idx =
                              (ch * H + static_cast<std::size_t>(h)) * W + static_cast<std::size_t>(w);
                          if (p.kind == PoolKind::Max) {
                            if (x[idx] > acc) {
                              acc = x[idx];
                              best = static_cast<std::uint32_t>(idx);
                            }
                          } else {
                            acc += x[idx];
                          }
                        }
                      }
                      const std::size_t o = (ch * Ho + oh) * Wo + ow;
                      y[o] = p.kind == PoolKind::Mean ? acc / area : acc;
                      if (argmax) (*argmax)[n * C * Ho * Wo + o] = best;
                    }
                  }
                }
              }
            },
            [&](const GlobalAvgPool&) {
              const std::size_t C = in[0], hw = in[1] * in[2];
              for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t ch = 0; ch < C; ++ch) {
                  const double* x = cur.data.data() + (n * C + ch) * hw;
                  double s = 0.0;
                  for (std::size_t k = 0; k < hw; ++k) s += x[k];
                  next.data[n * C + ch] = s / static_cast<double>(hw);
                }
              }
            },
            [&](const Activation& a) {
              const double* x = cur.data.data();
              double* y = next.data.data();
              const std::size_t sz = cur.size();
              const double k = static_cast<double>(a.param);
              switch (a.kind) {
                case Activation::Kind::ReLU:
                  for (std::size_t i = 0; i < sz; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
                  break;
                case Activation::Kind::ScaledReLU:
                  for (std::size_t i = 0; i < sz; ++i) y[i] = x[i] > 0.0 ? k * x[i] : 0.0;
                  break;
                case Activation::Kind::Square:
                  for (std::size_t i = 0; i < sz; ++i) y[i] = x[i] * x[i];
                  break;
                case Activation::Kind::Poly:
                  for (std::size_t i = 0; i < sz; ++i) y[i] = x[i] * x[i] + k * x[i];
                  break;
              }
            },
            [&](const Dropout& d) {
              if (mode == Mode::Eval || d.rate == 0.0) {
                next.data = cur.data;
                return;
              }
              if (!rng) throw std::invalid_argument("forward: dropout in train mode needs an rng");
              std::vector<double> mask(cur.size());
              const double keep = 1.0 / (1.0 - d.rate);
              for (std::size_t i = 0; i < cur.size(); ++i) {
                mask[i] = rng->uniform() >= d.rate ? keep : 0.0;
                next.data[i] = cur.data[i] * mask[i];
              }
              if (cache) cache->dropout_mask[l] = std::move(mask);
            },
            [&](const Flatten&) { next.data = cur.data; },
        },
        model.spec()[l]);
    if (cache) cache->inputs[l] = std::move(cur);
    cur = std::move(next);
  }
  return cur;
}

Tensor softmax(const Tensor& logits) {
  if (logits.shape.size() != 2) throw std::invalid_argument("softmax expects (N, K) logits");
  Tensor out = logits;
  const std::size_t K = logits.shape[1];
  for (std::size_t n = 0; n < logits.shape[0]; ++n) {
    double* r = out.data.data() + n * K;
    const double mx = *std::max_element(r, r + K);
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      r[k] = std::exp(r[k] - mx);
      s += r[k];
    }
    for (std::size_t k = 0; k < K; ++k) r[k] /= s;
  }
  return out;
}

LossResult loss_softmax_xent(const Tensor& logits, std::span<const int> labels) {
  if (logits.shape.size() != 2 || logits.shape[0] != labels.size()) {
    throw std::invalid_argument("loss: logits " + shape_string(logits.shape) + " vs " +
                                std::to_string(labels.size()) + " labels");
  }
  const std::size_t N = logits.shape[0], K = logits.shape[1];
  LossResult r{0.0, Tensor(logits.shape)};
  for (std::size_t n = 0; n < N; ++n) {
    if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= K) {
      throw std::invalid_argument("loss: label " + std::to_string(labels[n]) + " outside [0, " +
                                  std::to_string(K) + ")");
    }
    const double* z = logits.data.data() + n * K;
    double* g = r.dlogits.data.data() + n * K;
    const double mx = *std::max_element(z, z + K);
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(z[k] - mx);
    const double lse = mx + std::log(s);
    r.loss += lse - z[labels[n]];
    for (std::size_t k = 0; k < K; ++k) g[k] = std::exp(z[k] - lse) / static_cast<double>(N);
    g[labels[n]] -= 1.0 / static_cast<double>(N);
  }
  r.loss /= static_cast<double>(N);
  return r;
}

Gradients backward(const Model& model, const ForwardCache& cache, const Tensor& dlogits, Tensor* dinput) {
  if (cache.inputs.size() != model.num_layers()) throw std::invalid_argument("backward: cache does not match model");
  Gradients grads(model.num_layers());
  Tensor dcur = dlogits;
  const std::size_t N = dlogits.shape.at(0);
  for (std::size_t l = model.num_layers(); l-- > 0;) {
    const Shape& in = model.layer_input_shape(l);
    const Shape& outs = model.output_shape(l);
    const Tensor& x = cache.inputs[l];
    const LayerParams& par = model.params()[l];
    const bool need_dx = l > 0 || dinput != nullptr;
    Tensor dx(with_batch(N, in));
    std::visit(
        overloaded{
            [&](const Conv2D& c) {
              const std::size_t C = in[0], H = in[1], W = in[2];
              const std::size_t O = outs[0], Ho = outs[1], Wo = outs[2];
              const std::size_t ckk = C * c.kernel * c.kernel;
              LayerParams g{Tensor(par.weight.shape), Tensor(par.bias.shape)};
              MapR gw(g.weight.data.data(), static_cast<Eigen::Index>(O), static_cast<Eigen::Index>(ckk));
              MapV gb(g.bias.data.data(), static_cast<Eigen::Index>(O));
              MapCR w(par.weight.data.data(), static_cast<Eigen::Index>(O), static_cast<Eigen::Index>(ckk));
              RowMat cols(ckk, Ho * Wo);
              RowMat dcols(ckk, Ho * Wo);
              for (std::size_t n = 0; n < N; ++n) {
                im2col(x.data.data() + n * C * H * W, C, H, W, c, Ho, Wo, cols.data());
                MapCR dy(dcur.data.data() + n * O * Ho * Wo, static_cast<Eigen::Index>(O),
                         static_cast<Eigen::Index>(Ho * Wo));
                gw.noalias() += dy * cols.transpose();
                gb += dy.rowwise().sum();
                if (need_dx) {
                  dcols.noalias() = w.transpose() * dy;
                  col2im(dcols.data(), C, H, W, c, Ho, Wo, dx.data.data() + n * C * H * W);
                }
              }
              grads[l] = std::move(g);
            },
            [&](const Dense& d) {
              const std::size_t D = in[0];
              LayerParams g{Tensor(par.weight.shape), Tensor(par.bias.shape)};
              MapCR xm(x.data.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(D));
              MapCR dy(dcur.data.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(d.out_dim));
              MapCR w(par.weight.data.data(), static_cast<Eigen::Index>(d.out_dim), static_cast<Eigen::Index>(D));
              MapR gw(g.weight.data.data(), static_cast<Eigen::Index>(d.out_dim), static_cast<Eigen::Index>(D));
              MapV gb(g.bias.data.data(), static_cast<Eigen::Index>(d.out_dim));
              gw.noalias() = dy.transpose() * xm;
              gb = dy.colwise().sum().transpose();
              if (need_dx) {
                MapR dxm(dx.data.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(D));
                dxm.noalias() = dy * w;
              }
              grads[l] = std::move(g);
            },
            [&](const Pool& p) {
              const std::size_t C = in[0], H = in[1], W = in[2];
              const std::size_t Ho = outs[1], Wo = outs[2];
              const double area = static_cast<double>(p.window * p.window);
              for (std::size_t n = 0; n < N; ++n) {
                const double* dy = dcur.data.data() + n * C * Ho * Wo;
                double* dxs = dx.data.data() + n * C * H * W;
                if (p.kind == PoolKind::Max) {
                  const std::uint32_t* idx = cache.max_index[l].data() + n * C * Ho * Wo;
                  for (std::size_t o = 0; o < C * Ho * Wo; ++o) dxs[idx[o]] += dy[o];
                  continue;
                }
                const double scale = p.kind == PoolKind::Mean ? 1.0 / area : 1.0;
                for (std::size_t ch = 0; ch < C; ++ch) {
                  for (std::size_t oh = 0; oh < Ho; ++oh) {
                    for (std::size_t ow = 0; ow < Wo; ++ow) {
                      const double g = dy[(ch * Ho + oh) * Wo + ow] * scale;
                      for (std::size_t ki = 0; ki < p.window; ++ki) {
                        const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(oh * p.stride + ki) -
                                                 static_cast<std::ptrdiff_t>(p.padding);
                        if (h < 0 || h >= static_cast<std::ptrdiff_t>(H)) continue;
                        for (std::size_t kj = 0; kj < p.window; ++kj) {
                          const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(ow * p.stride + kj) -
                                                   static_cast<std::ptrdiff_t>(p.padding);
                          if (w < 0 || w >= static_cast<std::ptrdiff_t>(W)) continue;
                          dxs[(ch * H + static_cast<std::size_t>(h)) * W + static_cast<std::size_t>(w)] += g;
                        }
                      }
                    }
                  }
                }
              }
            },
            [&](const GlobalAvgPool&) {
              const std::size_t C = in[0], hw = in[1] * in[2];
              for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t ch = 0; ch < C; ++ch) {
                  const double g = dcur.data[n * C + ch] / static_cast<double>(hw);
                  double* d = dx.data.data() + (n * C + ch) * hw;
                  for (std::size_t k = 0; k < hw; ++k) d[k] = g;
                }
              }
            },
            [&](const Activation& a) {
              for (std::size_t i = 0; i < x.size(); ++i) {
                dx.data[i] = dcur.data[i] * activation_backward(a, x.data[i]);
              }
            },
            [&](const Dropout&) {
              const auto& mask = cache.dropout_mask[l];
              if (mask.empty()) {
                dx.data = dcur.data;
              } else {
                for (std::size_t i = 0; i < mask.size(); ++i) dx.data[i] = dcur.data[i] * mask[i];
              }
            },
            [&](const Flatten&) { dx.data = dcur.data; },
        },
        model.spec()[l]);
    dcur = std::move(dx);
  }
  if (dinput) *dinput = std::move(dcur);
  return grads;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("train config: learning_rate must be > 0");
  if (!(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0)) {
    throw std::invalid_argument("train config: lr_decay_factor must be in (0, 1]");
  }
  if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
  if (epochs < 0) throw std::invalid_argument("train config: epochs must be >= 0");
  if (l2_lambda < 0.0) throw std::invalid_argument("train config: l2_lambda must be >= 0");
}

double effective_lr(const TrainConfig& config, int epoch) {
  double lr = config.learning_rate;
  for (int d : config.lr_decay_epochs) {
    if (epoch > d) lr *= config.lr_decay_factor;
  }
  return lr;
}

void sgd_step(Model& model, const Gradients& grads, const TrainConfig& config, int epoch) {
  if (grads.size() != model.params().size()) throw std::invalid_argument("sgd_step: gradient count mismatch");
  for (std::size_t l = 0; l < grads.size(); ++l) {
    if (grads[l].empty()) continue;
    if (!all_finite(grads[l].weight) || !all_finite(grads[l].bias)) {
      throw DivergenceError("non-finite gradient at layer " + std::to_string(l) + " (" +
                            describe(model.spec()[l]) + ") in epoch " + std::to_string(epoch));
    }
  }
  const double lr = effective_lr(config, epoch);
  const double lambda = config.l2_lambda;
  for (std::size_t l = 0; l < grads.size(); ++l) {
    if (grads[l].empty()) continue;
    LayerParams& p = model.params()[l];
    if (p.weight.size() != grads[l].weight.size() || p.bias.size() != grads[l].bias.size()) {
      throw std::invalid_argument("sgd_step: gradient shape mismatch at layer " + std::to_string(l));
    }
    for (std::size_t i = 0; i < p.weight.size(); ++i) {
      p.weight.data[i] -= lr * (grads[l].weight.data[i] + lambda * p.weight.data[i]);
    }
    for (std::size_t i = 0; i < p.bias.size(); ++i) p.bias.data[i] -= lr * grads[l].bias.data[i];
  }
}

std::vector<int> predict(const Model& model, const Tensor& batch) {
  const Tensor logits = forward(model, batch, Mode::Eval);
  const std::size_t K = logits.shape[1];
  std::vector<int> out(logits.shape[0]);
  for (std::size_t n = 0; n < out.size(); ++n) {
    const double* z = logits.data.data() + n * K;
    out[n] = static_cast<int>(std::max_element(z, z + K) - z);
  }
  return out;
}

double evaluate(const Model& model, const data::Dataset& ds) {
  if (ds.size() == 0) return 0.0;
  std::size_t correct = 0;
  auto it = data::batches(ds, 500, 0, false);
  data::Batch b;
  while (it.next(b)) {
    const std::vector<int> pred = predict(model, b.images);
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == b.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

std::vector<EpochRecord> train(Model& model, const data::Dataset& train_set, const data::Dataset& test_set,
                               const TrainConfig& config) {
  config.validate();
  std::vector<EpochRecord> history;
  Rng dropout_rng(mix_seed(config.seed, 0xd50));
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    auto it = data::batches(train_set, config.batch_size, mix_seed(config.seed, static_cast<std::uint64_t>(epoch)),
                            true);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    data::Batch b;
    ForwardCache cache;
    while (it.next(b)) {
      const Tensor logits = forward(model, b.images, Mode::Train, &cache, &dropout_rng);
      const LossResult lr = loss_softmax_xent(logits, b.labels);
      if (!std::isfinite(lr.loss)) {
        throw DivergenceError("non-finite training loss in epoch " + std::to_string(epoch));
      }
      const std::size_t K = logits.shape[1];
      for (std::size_t n = 0; n < b.labels.size(); ++n) {
        const double* z = logits.data.data() + n * K;
        correct += static_cast<int>(std::max_element(z, z + K) - z) == b.labels[n];
      }
      loss_sum += lr.loss * static_cast<double>(b.labels.size());
      const Gradients g = backward(model, cache, lr.dlogits);
      sgd_step(model, g, config, epoch);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(train_set.size());
    rec.train_acc = static_cast<double>(correct) / static_cast<double>(train_set.size());
    rec.test_acc = evaluate(model, test_set);
    rec.lr = effective_lr(config, epoch);
    history.push_back(rec);
  }
  return history;
}

double lr_search(const std::function<Model()>& builder, const data::Dataset& train_set,
                 const data::Dataset& test_set, std::span<const double> grid, int budget_epochs,
                 const TrainConfig& base) {
  if (grid.empty()) throw std::invalid_argument("lr_search: empty grid");
  std::optional<double> best_lr;
  double best_acc = -1.0;
  std::string failures;
  for (double lr : grid) {
    TrainConfig cfg = base;
    cfg.learning_rate = lr;
    cfg.epochs = budget_epochs;
    cfg.lr_grid.clear();
    Model m = builder();
    double acc = 0.0;
    try {
      const auto hist = train(m, train_set, test_set, cfg);
      acc = hist.empty() ? evaluate(m, test_set) : hist.back().test_acc;
    } catch (const DivergenceError& e) {
      failures += " [lr=" + fmt_g(lr) + ": " + e.what() + "]";
      continue;
    }
    if (!best_lr || acc > best_acc || (acc == best_acc && lr < *best_lr)) {
      best_lr = lr;
      best_acc = acc;
    }
  }
  if (!best_lr) throw DivergenceError("lr_search: every candidate diverged:" + failures);
  return *best_lr;
}

std::string metrics_csv(const std::vector<EpochRecord>& history) {
  std::string out = "epoch,train_loss,train_acc,test_acc,lr\n";
  for (const auto& r : history) {
    out += std::to_string(r.epoch) + "," + fmt_g(r.train_loss) + "," + fmt_g(r.train_acc) + "," +
           fmt_g(r.test_acc) + "," + fmt_g(r.lr) + "\n";
  }
  return out;
}

}  // namespace fieldnet::nn
