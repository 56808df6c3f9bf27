#include <doctest.h>

#include <cmath>
#include <numeric>

#include "../common/gradcheck.hpp"
#include "fieldnet/data.hpp"
#include "fieldnet/nn.hpp"
#include "fieldnet/serialize.hpp"

using namespace fieldnet;
using namespace fieldnet::nn;

namespace {

Tensor image(std::vector<double> v, std::size_t c, std::size_t h, std::size_t w) {
  return Tensor({1, c, h, w}, std::move(v));
}

double single_output(const std::vector<LayerSpec>& spec, const Shape& in, const Tensor& x) {
  Model m(spec, in);
  return forward(m, x, Mode::Eval).data.at(0);
}

}  // namespace

TEST_CASE("activation examples") {
  CHECK(activation_forward(Activation::poly(1), 2.0) == 6.0);
  CHECK(activation_backward(Activation::poly(1), 2.0) == 5.0);
  CHECK(activation_forward(Activation::square(), -3.0) == 9.0);
  CHECK(activation_backward(Activation::square(), -3.0) == -6.0);
  CHECK(activation_backward(Activation::relu(), -1.0) == 0.0);
  CHECK(activation_backward(Activation::relu(), 0.0) == 0.0);
  CHECK(activation_forward(Activation::scaled_relu(4), 0.5) == 2.0);
  CHECK(activation_backward(Activation::scaled_relu(4), 0.5) == 4.0);
  CHECK_THROWS_AS(Activation::scaled_relu(3), std::invalid_argument);
  CHECK_THROWS_AS(Activation::poly(0), std::invalid_argument);
  for (long a : {1L, 2L, 5L, 100L}) CHECK(activation_forward(Activation::poly(a), 0.0) == 0.0);
}

TEST_CASE("pooling and convolution examples") {
  const Tensor ones = image({1, 1, 1, 1}, 1, 2, 2);
  const Tensor ramp = image({1, 2, 3, 4}, 1, 2, 2);
  CHECK(single_output({Pool{PoolKind::Sum, 2, 2, 0}}, {1, 2, 2}, ones) == 4.0);
  CHECK(single_output({Pool{PoolKind::Mean, 2, 2, 0}}, {1, 2, 2}, ramp) == 2.5);
  CHECK(single_output({Pool{PoolKind::Max, 2, 2, 0}}, {1, 2, 2}, ramp) == 4.0);
  Model conv({Conv2D{1, 2, 1, 0}}, {1, 2, 2});
  std::fill(conv.params()[0].weight.data.begin(), conv.params()[0].weight.data.end(), 1.0);
  CHECK(forward(conv, ones, Mode::Eval).data.at(0) == 4.0);
}

TEST_CASE("shape errors name the layer") {
  CHECK_THROWS_AS(Model({Dense{3}}, {2, 4, 4}), ShapeError);
  try {
    Model({Conv2D{2, 3, 1, 0}, Conv2D{2, 5, 1, 0}}, {1, 4, 4});
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(e.layer() == 1);
  }
  CHECK_THROWS_AS(Model({Dropout{1.0}}, {4}), std::invalid_argument);
  CHECK_THROWS_AS(Model({Dense{0}}, {4}), std::invalid_argument);
  Model m({Dense{2}}, {3});
  CHECK_THROWS_AS(forward(m, Tensor({1, 4}), Mode::Eval), ShapeError);
}

TEST_CASE("softmax cross-entropy examples") {
  const int l0[] = {0};
  CHECK(loss_softmax_xent(Tensor({1, 2}, {0, 0}), l0).loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  const auto big = loss_softmax_xent(Tensor({1, 2}, {1e6, 0}), l0);
  CHECK(std::isfinite(big.loss));
  CHECK(big.loss == doctest::Approx(0.0));
  const int l2[] = {2};
  const double want = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)) - 3.0;
  const auto r = loss_softmax_xent(Tensor({1, 3}, {1, 2, 3}), l2);
  CHECK(r.loss == doctest::Approx(want).epsilon(1e-12));
  CHECK(r.loss == doctest::Approx(0.4076).epsilon(1e-4));
  const int bad[] = {3};
  CHECK_THROWS_AS(loss_softmax_xent(Tensor({1, 3}, {1, 2, 3}), bad), std::invalid_argument);
}

TEST_CASE("softmax cross-entropy gradient is (softmax - onehot) / N") {
  const Tensor z({2, 3}, {0.1, -0.4, 2.0, 1.0, 1.0, -3.0});
  const int labels[] = {2, 0};
  const auto r = loss_softmax_xent(z, labels);
  const Tensor p = softmax(z);
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t k = 0; k < 3; ++k) {
      const double want = (p.data[n * 3 + k] - (static_cast<int>(k) == labels[n] ? 1.0 : 0.0)) / 2.0;
      CHECK(r.dlogits.data[n * 3 + k] == doctest::Approx(want).epsilon(1e-14));
    }
  }
  // Central differences on the loss itself.
  for (std::size_t i = 0; i < z.size(); ++i) {
    Tensor up = z, down = z;
    up.data[i] += 1e-6;
    down.data[i] -= 1e-6;
    const double num = (loss_softmax_xent(up, labels).loss - loss_softmax_xent(down, labels).loss) / 2e-6;
    CHECK(num == doctest::Approx(r.dlogits.data[i]).epsilon(1e-6));
  }
}

TEST_CASE("softmax rows are probability vectors") {
  Rng rng(4);
  Tensor z({20, 7});
  for (double& v : z.data) v = rng.uniform(-50, 50);
  const Tensor p = softmax(z);
  for (std::size_t n = 0; n < 20; ++n) {
    double s = 0.0;
    for (std::size_t k = 0; k < 7; ++k) {
      CHECK(p.data[n * 7 + k] >= 0.0);
      s += p.data[n * 7 + k];
    }
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
}

TEST_CASE("sgd examples") {
  Model m({Dense{1}}, {1});
  m.params()[0].weight.data = {1.0};
  m.params()[0].bias.data = {1.0};
  Gradients g = {LayerParams{Tensor({1, 1}, 0.0), Tensor({1}, 0.0)}};
  TrainConfig c;
  c.learning_rate = 0.1;
  c.l2_lambda = 0.001;
  sgd_step(m, g, c, 1);
  CHECK(m.params()[0].weight.data[0] == doctest::Approx(0.9999).epsilon(1e-15));
  CHECK(m.params()[0].bias.data[0] == 1.0);

  m.params()[0].weight.data = {1.0};
  c.l2_lambda = 0.0;
  g[0].weight.data = {2.0};
  sgd_step(m, g, c, 1);
  CHECK(m.params()[0].weight.data[0] == doctest::Approx(0.8).epsilon(1e-15));

  g[0].weight.data = {std::nan("")};
  CHECK_THROWS_AS(sgd_step(m, g, c, 1), DivergenceError);
}

TEST_CASE("learning-rate decay schedule") {
  TrainConfig c;
  c.learning_rate = 0.1;
  c.lr_decay_factor = 0.4;
  c.lr_decay_epochs = {80, 140};
  CHECK(effective_lr(c, 1) == 0.1);
  CHECK(effective_lr(c, 80) == 0.1);
  CHECK(effective_lr(c, 100) == doctest::Approx(0.04).epsilon(1e-15));
  CHECK(effective_lr(c, 150) == doctest::Approx(0.016).epsilon(1e-15));
}

TEST_CASE("train config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.learning_rate = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.lr_decay_factor = 1.5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("gradient check on every layer and activation") {
  for (auto layer : testing::kAllLayers) {
    for (const auto& act : testing::kAllActivations) {
      CAPTURE(testing::layer_name(layer));
      CAPTURE(act.name());
      int checked = 0;
      for (std::uint64_t seed = 0; checked < 3 && seed < 20; ++seed) {
        Model m = testing::gradcheck_model(layer, act);
        init_params(m, seed, 1.0);
        for (auto& p : m.params()) {
          Rng rng(mix_seed(seed, 9));
          for (double& b : p.bias.data) b = rng.uniform(-0.2, 0.2);
        }
        const auto r = testing::gradient_check(m, testing::gradcheck_input(seed), seed);
        if (r.near_kink) continue;
        ++checked;
        CAPTURE(r.worst);
        CHECK(r.max_rel_error < 1e-5);
      }
      CHECK(checked == 3);
    }
  }
}

TEST_CASE("sum pool equals mean pool times area, forward and backward") {
  Rng rng(11);
  Tensor x({3, 2, 4, 4});
  for (double& v : x.data) v = rng.uniform(-1, 1);
  const Model sum({Pool{PoolKind::Sum, 2, 2, 0}}, {2, 4, 4});
  const Model mean({Pool{PoolKind::Mean, 2, 2, 0}}, {2, 4, 4});
  ForwardCache cs, cm;
  const Tensor ys = forward(sum, x, Mode::Eval, &cs);
  const Tensor ym = forward(mean, x, Mode::Eval, &cm);
  for (std::size_t i = 0; i < ys.size(); ++i) CHECK(ys.data[i] == doctest::Approx(4.0 * ym.data[i]));
  const Tensor ones(ys.shape, 1.0);
  Tensor ds, dm;
  backward(sum, cs, ones, &ds);
  backward(mean, cm, ones, &dm);
  for (double v : ds.data) CHECK(v == 1.0);
  for (double v : dm.data) CHECK(v == 0.25);
}

TEST_CASE("dropout: train/eval agree at rate 0 and eval is the identity") {
  Rng rng(2);
  Tensor x({4, 6});
  for (double& v : x.data) v = rng.uniform(-1, 1);
  Model m({Dense{5}, Dropout{0.0}, Activation::poly(1), Dense{2}}, {6});
  init_params(m, 1, 1.0);
  Rng d(3);
  const Tensor a = forward(m, x, Mode::Train, nullptr, &d);
  const Tensor b = forward(m, x, Mode::Eval);
  CHECK(a.data == b.data);
  CHECK(forward(m, x, Mode::Eval).data == b.data);

  Model half({Dropout{0.5}}, {1000});
  Tensor ones({1, 1000}, 1.0);
  Rng d2(5);
  const Tensor t = forward(half, ones, Mode::Train, nullptr, &d2);
  for (double v : t.data) CHECK((v == 0.0 || v == 2.0));
  CHECK(forward(half, ones, Mode::Eval).data == ones.data);
}

TEST_CASE("training on separable blobs reaches 99% and is deterministic") {
  const data::Dataset train_set = data::synth_blobs(2, 2, 200, 0);
  const data::Dataset test_set = data::synth_blobs(2, 2, 100, 1);
  TrainConfig c;
  c.learning_rate = 0.1;
  c.epochs = 50;
  c.batch_size = 20;
  c.seed = 3;
  const auto run = [&]() {
    Model m({Dense{2}}, {2});
    init_params(m, 3, 1.0);
    return std::make_pair(train(m, train_set, test_set, c), m);
  };
  const auto [h1, m1] = run();
  const auto [h2, m2] = run();
  CHECK(h1.back().train_acc >= 0.99);
  CHECK(metrics_csv(h1) == metrics_csv(h2));
  CHECK(m1.params()[0].weight.data == m2.params()[0].weight.data);
  CHECK(metrics_csv(h1).rfind("epoch,train_loss,train_acc,test_acc,lr\n", 0) == 0);
}

TEST_CASE("evaluate on a constant classifier over a balanced set") {
  data::Dataset ds;
  ds.images = Tensor({100, 3}, 0.5);
  ds.num_classes = 10;
  for (int i = 0; i < 100; ++i) ds.labels.push_back(i % 10);
  Model m({Dense{10}}, {3});
  m.params()[0].bias.data[0] = 1.0;  // weights zero: always class 0
  CHECK(evaluate(m, ds) == doctest::Approx(0.10));
}

TEST_CASE("lr_search") {
  const data::Dataset tr = data::synth_blobs(2, 2, 100, 0);
  const data::Dataset te = data::synth_blobs(2, 2, 50, 1);
  const auto builder = [] {
    Model m({Dense{4}, Activation::square(), Dense{2}}, {2});
    init_params(m, 0, 1.0);
    return m;
  };
  TrainConfig base;
  base.batch_size = 10;
  const double single[] = {0.1};
  CHECK(lr_search(builder, tr, te, single, 2, base) == 0.1);

  // 1e6 blows up a squared activation immediately; it must never be chosen.
  const double grid[] = {1e6, 0.01};
  CHECK(lr_search(builder, tr, te, grid, 3, base) == 0.01);
  const double all_bad[] = {1e6, 1e7};
  CHECK_THROWS_AS(lr_search(builder, tr, te, all_bad, 3, base), DivergenceError);

  const double chosen = lr_search(builder, tr, te, kLearningRateGrid, 2, base);
  CHECK(std::find(kLearningRateGrid.begin(), kLearningRateGrid.end(), chosen) != kLearningRateGrid.end());
}

TEST_CASE("model JSON round trip") {
  Model m({Conv2D{2, 3, 1, 1}, Activation::poly(2), Pool{PoolKind::Sum, 2, 2, 0}, Dropout{0.25}, Flatten{},
           Dense{3}},
          {1, 4, 4});
  init_params(m, 8, 1.0);
  const auto j = model_to_json(m, {{"note", "x"}});
  CHECK(j.at("format_version") == 1);
  const Model back = model_from_json(j);
  CHECK(back.spec() == m.spec());
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    CHECK(back.params()[l].weight.data == m.params()[l].weight.data);
    CHECK(back.params()[l].bias.data == m.params()[l].bias.data);
  }
  CHECK(model_to_json(back, {{"note", "x"}}) == j);
  auto broken = j;
  broken["format_version"] = 2;
  CHECK_THROWS(model_from_json(broken));
}

TEST_CASE("base64 matches known vectors") {
  const std::string s = "foobar";
  for (std::size_t n = 0; n <= s.size(); ++n) {
    const std::vector<std::uint8_t> bytes(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(n));
    const std::string want[] = {"", "Zg==", "Zm8=", "Zm9v", "Zm9vYg==", "Zm9vYmE=", "Zm9vYmFy"};
    CHECK(base64_encode(bytes) == want[n]);
    CHECK(base64_decode(want[n]) == bytes);
  }
  CHECK_THROWS(base64_decode("Zm9"));
  CHECK_THROWS(base64_decode("Zm!v"));
}
