#pragma once

// Central-difference gradient checking shared by the unit and acceptance
// tests. The scalar objective is sum(R * logits) for a fixed random R, so the
// upstream gradient is R itself.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "fieldnet/nn.hpp"

namespace fieldnet::testing {

enum class LayerUnderTest { Conv, ConvStrided, Dense, MaxPool, MeanPool, SumPool, PaddedPool, GlobalAvg, Dropout, Flatten };

inline const std::vector<LayerUnderTest> kAllLayers = {
    LayerUnderTest::Conv,     LayerUnderTest::ConvStrided, LayerUnderTest::Dense,     LayerUnderTest::MaxPool,
    LayerUnderTest::MeanPool, LayerUnderTest::SumPool,     LayerUnderTest::PaddedPool, LayerUnderTest::GlobalAvg,
    LayerUnderTest::Dropout,  LayerUnderTest::Flatten};

inline const std::vector<nn::Activation> kAllActivations = {nn::Activation::relu(), nn::Activation::scaled_relu(2),
                                                            nn::Activation::square(), nn::Activation::poly(1),
                                                            nn::Activation::poly(3)};

inline std::string layer_name(LayerUnderTest l) {
  switch (l) {
    case LayerUnderTest::Conv: return "conv";
    case LayerUnderTest::ConvStrided: return "conv_strided";
    case LayerUnderTest::Dense: return "dense";
    case LayerUnderTest::MaxPool: return "max_pool";
    case LayerUnderTest::MeanPool: return "mean_pool";
    case LayerUnderTest::SumPool: return "sum_pool";
    case LayerUnderTest::PaddedPool: return "padded_pool";
    case LayerUnderTest::GlobalAvg: return "global_avg_pool";
    case LayerUnderTest::Dropout: return "dropout";
    case LayerUnderTest::Flatten: return "flatten";
  }
  return "";
}

/// Small network on (2, 6, 6) input exercising `layer` next to `act`.
inline nn::Model gradcheck_model(LayerUnderTest layer, const nn::Activation& act) {
  std::vector<nn::LayerSpec> s = {nn::Conv2D{3, 3, 1, 1}, act};
  switch (layer) {
    case LayerUnderTest::Conv: s.push_back(nn::Conv2D{2, 3, 1, 0}); break;
    case LayerUnderTest::ConvStrided: s.push_back(nn::Conv2D{2, 2, 2, 1}); break;
    case LayerUnderTest::Dense: break;
    case LayerUnderTest::MaxPool: s.push_back(nn::Pool{nn::PoolKind::Max, 2, 2, 0}); break;
    case LayerUnderTest::MeanPool: s.push_back(nn::Pool{nn::PoolKind::Mean, 2, 2, 0}); break;
    case LayerUnderTest::SumPool: s.push_back(nn::Pool{nn::PoolKind::Sum, 3, 2, 0}); break;
    case LayerUnderTest::PaddedPool: s.push_back(nn::Pool{nn::PoolKind::Mean, 3, 2, 1}); break;
    case LayerUnderTest::GlobalAvg: s.push_back(nn::GlobalAvgPool{}); break;
    case LayerUnderTest::Dropout: s.push_back(nn::Dropout{0.3}); break;
    case LayerUnderTest::Flatten: break;
  }
  if (layer != LayerUnderTest::GlobalAvg) s.push_back(nn::Flatten{});
  s.push_back(nn::Dense{4});
  s.push_back(act);
  s.push_back(nn::Dense{3});
  return nn::Model(s, {2, 6, 6});
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;
  bool near_kink = false;
};

/// Relative error ||a - n|| / max(||a|| + ||n||, 1e-12) per parameter tensor
/// and for the input gradient; returns the worst. near_kink is set when a
/// ReLU input or a max-pool runner-up lies within 1e-3 of the switch point.
inline GradCheckResult gradient_check(const nn::Model& model, const Tensor& x, std::uint64_t seed,
                                      double eps = 1e-5) {
  Rng rng(seed);
  const Tensor probe = nn::forward(model, x, nn::Mode::Eval);
  Tensor r(probe.shape);
  for (double& v : r.data) v = rng.uniform(-1, 1);
  const std::uint64_t dropout_seed = mix_seed(seed, 77);

  const auto objective = [&](const nn::Model& m, const Tensor& in) {
    Rng dr(dropout_seed);
    const Tensor z = nn::forward(m, in, nn::Mode::Train, nullptr, &dr);
    double s = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) s += z.data[i] * r.data[i];
    return s;
  };

  nn::ForwardCache cache;
  Rng dr(dropout_seed);
  nn::forward(model, x, nn::Mode::Train, &cache, &dr);
  Tensor dinput;
  const nn::Gradients g = nn::backward(model, cache, r, &dinput);

  GradCheckResult res;
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    const auto* act = std::get_if<nn::Activation>(&model.spec()[l]);
    if (act && (act->kind == nn::Activation::Kind::ReLU || act->kind == nn::Activation::Kind::ScaledReLU)) {
      for (double v : cache.inputs[l].data) res.near_kink |= std::abs(v) < 1e-3;
    }
    const auto* pool = std::get_if<nn::Pool>(&model.spec()[l]);
    if (pool && pool->kind == nn::PoolKind::Max) {
      const Tensor& in = cache.inputs[l];
      const std::size_t N = in.shape[0], C = in.shape[1], H = in.shape[2], W = in.shape[3];
      const Shape& out = model.output_shape(l);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t oh = 0; oh < out[1]; ++oh)
            for (std::size_t ow = 0; ow < out[2]; ++ow) {
              std::vector<double> w;
              for (std::size_t i = 0; i < pool->window; ++i)
                for (std::size_t j = 0; j < pool->window; ++j) {
                  const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(oh * pool->stride + i) -
                                           static_cast<std::ptrdiff_t>(pool->padding);
                  const std::ptrdiff_t ww = static_cast<std::ptrdiff_t>(ow * pool->stride + j) -
                                            static_cast<std::ptrdiff_t>(pool->padding);
                  if (h < 0 || ww < 0 || h >= static_cast<std::ptrdiff_t>(H) || ww >= static_cast<std::ptrdiff_t>(W))
                    continue;
                  w.push_back(in.data[((n * C + c) * H + static_cast<std::size_t>(h)) * W + static_cast<std::size_t>(ww)]);
                }
              std::sort(w.rbegin(), w.rend());
              // Exact zeros are ReLU-clamped and carry no gradient.
              if (w.size() > 1 && w[0] != 0.0) res.near_kink |= w[0] - w[1] < 1e-3;
            }
    }
  }

  const auto compare = [&](const std::vector<double>& analytic, const std::vector<double>& numeric,
                           const std::string& what) {
    double diff = 0.0, na = 0.0, nn_ = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
      na += analytic[i] * analytic[i];
      nn_ += numeric[i] * numeric[i];
    }
    const double rel = std::sqrt(diff) / std::max(std::sqrt(na) + std::sqrt(nn_), 1e-12);
    if (rel > res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst = what;
    }
  };

  nn::Model m = model;
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    for (int which = 0; which < 2; ++which) {
      Tensor& t = which == 0 ? m.params()[l].weight : m.params()[l].bias;
      if (t.empty()) continue;
      std::vector<double> numeric(t.size());
      for (std::size_t i = 0; i < t.size(); ++i) {
        const double keep = t.data[i];
        t.data[i] = keep + eps;
        const double up = objective(m, x);
        t.data[i] = keep - eps;
        const double down = objective(m, x);
        t.data[i] = keep;
        numeric[i] = (up - down) / (2 * eps);
      }
      const Tensor& a = which == 0 ? g[l].weight : g[l].bias;
      compare(a.data, numeric, "layer " + std::to_string(l) + (which == 0 ? " weight" : " bias"));
    }
  }
  Tensor xp = x;
  std::vector<double> numeric(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = xp.data[i];
    xp.data[i] = keep + eps;
    const double up = objective(model, xp);
    xp.data[i] = keep - eps;
    const double down = objective(model, xp);
    xp.data[i] = keep;
    numeric[i] = (up - down) / (2 * eps);
  }
  compare(dinput.data, numeric, "input");
  return res;
}

/// Random model parameters and a random (2, 2, 6, 6) batch for one seed.
inline Tensor gradcheck_input(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 5));
  Tensor x({2, 2, 6, 6});
  for (double& v : x.data) v = rng.uniform(-1, 1);
  return x;
}

}  // namespace fieldnet::testing
