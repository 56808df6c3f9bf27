#include "fieldnet/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <set>

#include "fieldnet/field.hpp"
#include "fieldnet/serialize.hpp"

namespace fieldnet::experiment {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw std::invalid_argument(where + ": unknown key '" + key + "'");
  }
}

template <class T>
void read_opt(const json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

std::string normalization_name(Normalization n) {
  return n == Normalization::UnitInterval ? "unit_interval" : "per_channel_standardize";
}

Normalization normalization_from_string(const std::string& s) {
  if (s == "unit_interval") return Normalization::UnitInterval;
  if (s == "per_channel_standardize") return Normalization::Standardize;
  throw std::invalid_argument("unknown normalization '" + s + "'");
}

bool is_cifar(DatasetKind k) { return k == DatasetKind::Cifar10 || k == DatasetKind::Cifar100; }

std::string fmt_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

json train_to_json(const nn::TrainConfig& t) {
  return {{"learning_rate", t.learning_rate}, {"lr_decay_factor", t.lr_decay_factor},
          {"lr_decay_epochs", t.lr_decay_epochs}, {"l2_lambda", t.l2_lambda},
          {"batch_size", t.batch_size},         {"epochs", t.epochs},
          {"seed", t.seed},                     {"lr_grid", t.lr_grid},
          {"lr_search_epochs", t.lr_search_epochs}};
}

void train_from_json(const json& j, nn::TrainConfig& t) {
  reject_unknown(j, {"learning_rate", "lr_decay_factor", "lr_decay_epochs", "l2_lambda", "batch_size", "epochs", "seed",
                     "lr_grid", "lr_search_epochs"},
                 "train");
  read_opt(j, "learning_rate", t.learning_rate);
  read_opt(j, "lr_decay_factor", t.lr_decay_factor);
  read_opt(j, "lr_decay_epochs", t.lr_decay_epochs);
  read_opt(j, "l2_lambda", t.l2_lambda);
  read_opt(j, "batch_size", t.batch_size);
  read_opt(j, "epochs", t.epochs);
  read_opt(j, "seed", t.seed);
  read_opt(j, "lr_grid", t.lr_grid);
  read_opt(j, "lr_search_epochs", t.lr_search_epochs);
}

std::vector<nn::LayerSpec> conv_act(std::size_t out, std::size_t k, std::size_t pad, const nn::Activation& act) {
  return {nn::Conv2D{out, k, 1, pad}, act};
}

void append(std::vector<nn::LayerSpec>& dst, const std::vector<nn::LayerSpec>& src) {
  dst.insert(dst.end(), src.begin(), src.end());
}

}  // namespace

nn::Activation Scheme::activation() const {
  switch (kind) {
    case SchemeKind::ReLU: return nn::Activation::relu();
    case SchemeKind::Poly: return nn::Activation::poly(a);
    case SchemeKind::Quad: return nn::Activation::square();
  }
  return {};
}

std::string Scheme::name() const {
  switch (kind) {
    case SchemeKind::ReLU: return "relu";
    case SchemeKind::Poly: return "poly";
    case SchemeKind::Quad: return "quad";
  }
  return "";
}

Scheme scheme_from_string(const std::string& s, long a) {
  if (s == "relu") return {SchemeKind::ReLU, a};
  if (s == "poly") {
    if (a < 1) throw std::invalid_argument("scheme poly needs a >= 1");
    return {SchemeKind::Poly, a};
  }
  if (s == "quad" || s == "square") return {SchemeKind::Quad, a};
  throw std::invalid_argument("unknown scheme '" + s + "' (expected relu, poly or quad)");
}

std::string to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::Cifar10: return "cifar10";
    case DatasetKind::Cifar100: return "cifar100";
    case DatasetKind::Blobs: return "blobs";
    case DatasetKind::Spirals: return "spirals";
  }
  return "";
}

DatasetKind dataset_kind_from_string(const std::string& s) {
  if (s == "cifar10") return DatasetKind::Cifar10;
  if (s == "cifar100") return DatasetKind::Cifar100;
  if (s == "blobs") return DatasetKind::Blobs;
  if (s == "spirals") return DatasetKind::Spirals;
  throw std::invalid_argument("unknown dataset '" + s + "'");
}

std::string to_string(Architecture a) {
  switch (a) {
    case Architecture::Mlp: return "mlp";
    case Architecture::CnnSmall: return "cnn_small";
    case Architecture::CnnLiu: return "cnn_liu";
    case Architecture::Nin: return "nin";
  }
  return "";
}

Architecture architecture_from_string(const std::string& s) {
  if (s == "mlp") return Architecture::Mlp;
  if (s == "cnn_small") return Architecture::CnnSmall;
  if (s == "cnn_liu") return Architecture::CnnLiu;
  if (s == "nin") return Architecture::Nin;
  throw std::invalid_argument("unknown architecture '" + s + "'");
}

nn::TrainConfig default_train_config(Architecture arch) {
  nn::TrainConfig t;
  t.batch_size = 125;
  switch (arch) {
    case Architecture::CnnLiu:
      t.epochs = 150;
      t.l2_lambda = 5e-4;
      break;
    case Architecture::Nin:
      t.epochs = 160;
      t.l2_lambda = 3e-4;
      t.lr_decay_factor = 0.4;
      t.lr_decay_epochs = {80, 140};
      break;
    default:
      t.epochs = 30;
      t.l2_lambda = 5e-4;
      break;
  }
  return t;
}

void ExperimentConfig::validate() const {
  train.validate();
  if (scheme.kind == SchemeKind::ReLU && quant) {
    throw std::invalid_argument("config: scheme relu is not field-compatible and cannot have a quant section");
  }
  if (scheme.kind == SchemeKind::Poly && scheme.a < 1) throw std::invalid_argument("config: poly needs a >= 1");
  if (quant) {
    quant->validate();
    if (scheme.kind == SchemeKind::Poly && quant->activation_a != scheme.a) {
      throw std::invalid_argument("config: quant.activation_a differs from the scheme's a");
    }
  }
  if (modulus) {
    if (!quant) throw std::invalid_argument("config: modulus given without a quant section");
    field::Modulus m(*modulus);
  }
  if (architecture.kind == Architecture::Mlp && architecture.hidden.empty()) {
    throw std::invalid_argument("config: mlp needs at least one hidden width");
  }
  if (!is_cifar(dataset.kind)) {
    if (dataset.n_train == 0 || dataset.n_test == 0) throw std::invalid_argument("config: empty synthetic split");
    if (dataset.kind == DatasetKind::Blobs && (dataset.classes < 2 || dataset.dims < 1)) {
      throw std::invalid_argument("config: blobs needs classes >= 2 and dims >= 1");
    }
  }
}

json to_json(const ExperimentConfig& c) {
  const DatasetConfig& d = c.dataset;
  json dataset = {{"name", to_string(d.kind)}, {"seed", d.seed}};
  if (is_cifar(d.kind)) {
    dataset["data_dir"] = d.data_dir;
    dataset["train_per_class"] = d.train_per_class;
    dataset["test_per_class"] = d.test_per_class;
    dataset["normalization"] = normalization_name(d.normalization);
  } else {
    dataset["n_train"] = d.n_train;
    dataset["n_test"] = d.n_test;
    if (d.kind == DatasetKind::Blobs) {
      dataset["classes"] = d.classes;
      dataset["dims"] = d.dims;
    } else {
      dataset["turns"] = d.turns;
      dataset["noise"] = d.noise;
    }
  }
  json arch = {{"name", to_string(c.architecture.kind)},
               {"pool", c.architecture.pool ? nn::to_string(*c.architecture.pool) : "auto"}};
  if (c.architecture.kind == Architecture::Mlp) arch["hidden"] = c.architecture.hidden;
  json scheme = {{"name", c.scheme.name()}};
  if (c.scheme.kind == SchemeKind::Poly) scheme["a"] = c.scheme.a;
  json j = {{"dataset", dataset},
            {"architecture", arch},
            {"scheme", scheme},
            {"train", train_to_json(c.train)},
            {"quant", nullptr},
            {"modulus", nullptr},
            {"output_dir", c.output_dir}};
  if (c.quant) {
    j["quant"] = {{"weight_scale", c.quant->weight_scale},
                  {"input_scale", c.quant->input_scale},
                  {"activation_a", c.quant->activation_a},
                  {"fold_minimax_constant", c.quant->fold_minimax_constant}};
  }
  if (c.modulus) j["modulus"] = *c.modulus;
  return j;
}

ExperimentConfig config_from_json(const json& j) {
  reject_unknown(j, {"dataset", "architecture", "scheme", "train", "quant", "modulus", "output_dir"}, "config");
  ExperimentConfig c;

  if (j.contains("architecture")) {
    const json& a = j.at("architecture");
    reject_unknown(a, {"name", "hidden", "pool"}, "architecture");
    c.architecture.kind = architecture_from_string(a.value("name", std::string("mlp")));
    read_opt(a, "hidden", c.architecture.hidden);
    const std::string pool = a.value("pool", std::string("auto"));
    if (pool != "auto") c.architecture.pool = nn::pool_kind_from_string(pool);
  }

  if (j.contains("dataset")) {
    const json& d = j.at("dataset");
    reject_unknown(d, {"name", "data_dir", "train_per_class", "test_per_class", "normalization", "classes", "dims",
                       "n_train", "n_test", "turns", "noise", "seed"},
                   "dataset");
    DatasetConfig& dc = c.dataset;
    dc.kind = dataset_kind_from_string(d.value("name", std::string("blobs")));
    read_opt(d, "data_dir", dc.data_dir);
    read_opt(d, "train_per_class", dc.train_per_class);
    read_opt(d, "test_per_class", dc.test_per_class);
    if (d.contains("normalization")) dc.normalization = normalization_from_string(d.at("normalization"));
    read_opt(d, "classes", dc.classes);
    read_opt(d, "dims", dc.dims);
    read_opt(d, "n_train", dc.n_train);
    read_opt(d, "n_test", dc.n_test);
    read_opt(d, "turns", dc.turns);
    read_opt(d, "noise", dc.noise);
    read_opt(d, "seed", dc.seed);
    if (dc.kind == DatasetKind::Spirals) dc.classes = 2;
    if (dc.kind == DatasetKind::Cifar10) dc.classes = 10;
    if (dc.kind == DatasetKind::Cifar100) dc.classes = 100;
  }

  if (j.contains("scheme")) {
    const json& s = j.at("scheme");
    if (s.is_string()) {
      c.scheme = scheme_from_string(s.get<std::string>());
    } else {
      reject_unknown(s, {"name", "a"}, "scheme");
      c.scheme = scheme_from_string(s.value("name", std::string("poly")), s.value("a", 1L));
    }
  }

  c.train = default_train_config(c.architecture.kind);
  if (j.contains("train")) train_from_json(j.at("train"), c.train);

  if (j.contains("quant") && !j.at("quant").is_null()) {
    const json& q = j.at("quant");
    reject_unknown(q, {"weight_scale", "input_scale", "activation_a", "fold_minimax_constant"}, "quant");
    fieldnn::QuantConfig qc;
    qc.activation_a = c.scheme.kind == SchemeKind::Poly ? c.scheme.a : 1;
    read_opt(q, "weight_scale", qc.weight_scale);
    read_opt(q, "input_scale", qc.input_scale);
    read_opt(q, "activation_a", qc.activation_a);
    read_opt(q, "fold_minimax_constant", qc.fold_minimax_constant);
    c.quant = qc;
  }
  if (j.contains("modulus") && !j.at("modulus").is_null()) c.modulus = j.at("modulus").get<std::uint64_t>();
  read_opt(j, "output_dir", c.output_dir);
  c.validate();
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  try {
    return config_from_json(json::parse(read_text_file(path)));
  } catch (const json::exception& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

std::vector<nn::LayerSpec> build_layers(const ArchitectureConfig& arch, const Scheme& scheme, const Shape& input_shape,
                                        int num_classes) {
  const nn::Activation act = scheme.activation();
  const bool relu = scheme.kind == SchemeKind::ReLU;
  const nn::PoolKind pool = arch.pool ? *arch.pool : (relu ? nn::PoolKind::Max : nn::PoolKind::Sum);
  const auto classes = static_cast<std::size_t>(num_classes);
  std::vector<nn::LayerSpec> layers;
  const auto need_image = [&](std::size_t h) {
    if (input_shape.size() != 3 || input_shape[1] != h || input_shape[2] != h) {
      throw std::invalid_argument("architecture " + to_string(arch.kind) + " expects (C," + std::to_string(h) + "," +
                                  std::to_string(h) + ") input, got " + shape_string(input_shape));
    }
  };
  switch (arch.kind) {
    case Architecture::Mlp:
      if (input_shape.size() != 1) layers.emplace_back(nn::Flatten{});
      for (std::size_t h : arch.hidden) {
        layers.emplace_back(nn::Dense{h});
        layers.emplace_back(act);
      }
      layers.emplace_back(nn::Dense{classes});
      break;
    case Architecture::CnnSmall: {
      if (input_shape.size() != 3 || input_shape[1] % 8 != 0 || input_shape[2] % 8 != 0) {
        throw std::invalid_argument("cnn_small expects (C,H,W) input with H and W divisible by 8");
      }
      append(layers, conv_act(16, 3, 1, act));
      layers.emplace_back(nn::Pool{pool, 2, 2, 0});
      append(layers, conv_act(32, 3, 1, act));
      layers.emplace_back(nn::Pool{pool, 2, 2, 0});
      append(layers, conv_act(32, 3, 1, act));
      layers.emplace_back(nn::Pool{pool, 2, 2, 0});
      layers.emplace_back(nn::Flatten{});
      layers.emplace_back(nn::Dense{64});
      layers.emplace_back(act);
      layers.emplace_back(nn::Dense{classes});
      break;
    }
    case Architecture::CnnLiu:
      need_image(32);
      append(layers, conv_act(64, 3, 1, act));
      append(layers, conv_act(64, 3, 1, act));
      layers.emplace_back(nn::Pool{pool, 2, 2, 0});
      append(layers, conv_act(64, 3, 1, act));
      append(layers, conv_act(64, 3, 1, act));
      layers.emplace_back(nn::Pool{pool, 2, 2, 0});
      append(layers, conv_act(64, 3, 1, act));
      append(layers, conv_act(64, 1, 0, act));
      append(layers, conv_act(16, 1, 0, act));
      layers.emplace_back(nn::Flatten{});
      layers.emplace_back(nn::Dense{classes});
      break;
    case Architecture::Nin: {
      need_image(32);
      const nn::PoolKind first = arch.pool ? *arch.pool : (relu ? nn::PoolKind::Max : nn::PoolKind::Sum);
      const nn::PoolKind second = arch.pool ? *arch.pool : (relu ? nn::PoolKind::Mean : nn::PoolKind::Sum);
      append(layers, conv_act(192, 5, 2, act));
      append(layers, conv_act(160, 1, 0, act));
      append(layers, conv_act(96, 1, 0, act));
      layers.emplace_back(nn::Pool{first, 3, 2, 1});
      layers.emplace_back(nn::Dropout{0.5});
      append(layers, conv_act(192, 5, 2, act));
      append(layers, conv_act(192, 1, 0, act));
      append(layers, conv_act(192, 1, 0, act));
      layers.emplace_back(nn::Pool{second, 3, 2, 1});
      layers.emplace_back(nn::Dropout{0.5});
      append(layers, conv_act(192, 3, 1, act));
      append(layers, conv_act(192, 1, 0, act));
      append(layers, conv_act(classes, 1, 0, act));
      layers.emplace_back(nn::GlobalAvgPool{});
      break;
    }
  }
  return layers;
}

std::optional<fs::path> resolve_data_dir(const DatasetConfig& dc) {
  if (!dc.data_dir.empty()) return fs::path(dc.data_dir);
  if (const char* env = std::getenv("FIELDNET_DATA_DIR"); env && *env) return fs::path(env);
  return std::nullopt;
}

data::Split load_dataset(const DatasetConfig& dc) {
  data::Split split;
  switch (dc.kind) {
    case DatasetKind::Blobs:
      split.train = data::synth_blobs(dc.classes, dc.dims, dc.n_train, dc.seed);
      split.test = data::synth_blobs(dc.classes, dc.dims, dc.n_test, mix_seed(dc.seed, 1));
      return split;
    case DatasetKind::Spirals:
      split.train = data::synth_spirals(dc.n_train, dc.turns, dc.noise, dc.seed);
      split.test = data::synth_spirals(dc.n_test, dc.turns, dc.noise, mix_seed(dc.seed, 1));
      return split;
    case DatasetKind::Cifar10:
    case DatasetKind::Cifar100: {
      const auto dir = resolve_data_dir(dc);
      if (!dir) throw std::runtime_error("no CIFAR directory: set dataset.data_dir or FIELDNET_DATA_DIR");
      fs::path root = *dir;
      const char* sub = dc.kind == DatasetKind::Cifar10 ? "cifar-10-batches-bin" : "cifar-100-binary";
      if (fs::is_directory(root / sub)) root /= sub;
      split = dc.kind == DatasetKind::Cifar10 ? data::load_cifar10(root) : data::load_cifar100(root);
      if (dc.train_per_class > 0) split.train = data::subset(split.train, dc.train_per_class, dc.seed);
      if (dc.test_per_class > 0) split.test = data::subset(split.test, dc.test_per_class, mix_seed(dc.seed, 1));
      if (dc.normalization == Normalization::UnitInterval) {
        split.train = data::normalize(split.train, data::NormalizeMode::UnitInterval);
        split.test = data::normalize(split.test, data::NormalizeMode::UnitInterval);
      } else {
        const data::ChannelStats st = data::channel_stats(split.train);
        split.train = data::normalize(split.train, data::NormalizeMode::PerChannelStandardize, st);
        split.test = data::normalize(split.test, data::NormalizeMode::PerChannelStandardize, st);
      }
      return split;
    }
  }
  return split;
}

TrainResult run_train(const ExperimentConfig& config, const data::Split& split) {
  config.validate();
  Shape input_shape(split.train.images.shape.begin() + 1, split.train.images.shape.end());
  const auto layers = build_layers(config.architecture, config.scheme, input_shape, split.train.num_classes);
  const auto builder = [&]() {
    nn::Model m(layers, input_shape);
    nn::init_params(m, mix_seed(config.train.seed, 0x1417), nn::default_init_gain(m));
    return m;
  };
  TrainResult result;
  nn::TrainConfig tc = config.train;
  if (!tc.lr_grid.empty() && tc.lr_search_epochs > 0) {
    tc.learning_rate = nn::lr_search(builder, split.train, split.test, tc.lr_grid, tc.lr_search_epochs, tc);
  }
  result.learning_rate = tc.learning_rate;
  result.model = builder();
  result.history = nn::train(result.model, split.train, split.test, tc);
  return result;
}

std::uint64_t choose_modulus(const fieldnn::QuantizedModel& qm, std::optional<std::uint64_t> requested) {
  return requested ? *requested : fieldnn::auto_prime(qm);
}

void write_train_outputs(const ExperimentConfig& config, const TrainResult& result) {
  if (config.output_dir.empty()) throw std::invalid_argument("config: output_dir is empty");
  const fs::path dir(config.output_dir);
  fs::create_directories(dir);
  ExperimentConfig echoed = config;
  echoed.train.learning_rate = result.learning_rate;
  const json cfg = to_json(echoed);
  write_file_atomic(dir / "config.json", cfg.dump(2) + "\n");
  nn::save_model(dir / "model.json", result.model, {{"config", cfg}});
  write_file_atomic(dir / "metrics.csv", nn::metrics_csv(result.history));
  if (config.quant) {
    const fieldnn::QuantizedModel qm = fieldnn::quantize(result.model, *config.quant);
    std::optional<std::uint64_t> p = config.modulus;
    if (!p) {
      try {
        p = fieldnn::auto_prime(qm);
      } catch (const std::overflow_error&) {
        // No 64-bit prime is large enough; the file is still usable with --allow-wrap.
      }
    }
    const json meta = {{"config", cfg}, {"source_model", fs::absolute(dir / "model.json").string()}};
    write_file_atomic(dir / "qmodel.json", fieldnn::quantized_to_json(qm, p, meta).dump(2) + "\n");
  }
}

std::vector<CompareRow> run_compare(const ExperimentConfig& base, std::span<const Scheme> schemes,
                                    std::span<const std::uint64_t> seeds, const data::Split& split) {
  std::vector<CompareRow> rows;
  for (const Scheme& scheme : schemes) {
    for (std::uint64_t seed : seeds) {
      ExperimentConfig cfg = base;
      cfg.scheme = scheme;
      cfg.train.seed = seed;
      cfg.quant.reset();
      cfg.modulus.reset();
      CompareRow row;
      row.scheme = scheme.name();
      row.dataset = to_string(base.dataset.kind);
      row.seed = seed;
      try {
        TrainResult r = run_train(cfg, split);
        row.history = std::move(r.history);
        if (!row.history.empty()) {
          row.final_test_acc = row.history.back().test_acc;
          const auto best = std::max_element(row.history.begin(), row.history.end(),
                                             [](const auto& a, const auto& b) { return a.test_acc < b.test_acc; });
          row.best_epoch = best->epoch;
        }
      } catch (const nn::DivergenceError& e) {
        row.error = e.what();
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

std::string compare_csv(std::span<const CompareRow> rows) {
  std::string out = "scheme,dataset,seed,final_test_acc,best_epoch\n";
  for (const CompareRow& r : rows) {
    out += r.scheme + "," + r.dataset + "," + std::to_string(r.seed) + "," +
           (r.final_test_acc ? fmt_g(*r.final_test_acc) : std::string("diverged")) + "," +
           std::to_string(r.best_epoch) + "\n";
  }
  return out;
}

void write_compare_outputs(const fs::path& dir, std::span<const CompareRow> rows) {
  fs::create_directories(dir / "curves");
  write_file_atomic(dir / "compare.csv", compare_csv(rows));
  for (const CompareRow& r : rows) {
    write_file_atomic(dir / "curves" / (r.scheme + "_seed" + std::to_string(r.seed) + ".csv"),
                      nn::metrics_csv(r.history));
  }
}

InferReport run_infer(const fieldnn::QuantizedModel& qm, const data::Dataset& ds, std::uint64_t modulus,
                      bool allow_wrap, const nn::Model* float_model) {
  const field::Modulus m(modulus);
  InferReport rep;
  rep.samples = ds.size();
  rep.modulus = modulus;
  if (ds.size() == 0) return rep;
  const std::vector<std::int64_t> x = fieldnn::quantize_input(ds.images.data, qm.config().input_scale);
  const auto logits = fieldnn::field_forward_batch(qm, x, ds.size(), m, allow_wrap);
  std::vector<int> float_pred;
  if (float_model) {
    auto it = data::batches(ds, 500, 0, false);
    data::Batch b;
    while (it.next(b)) {
      const auto p = nn::predict(*float_model, b.images);
      float_pred.insert(float_pred.end(), p.begin(), p.end());
    }
  }
  std::size_t correct = 0, float_correct = 0, agree = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const int pred = fieldnn::argmax(logits[i]);
    correct += pred == ds.labels[i];
    if (float_model) {
      float_correct += float_pred[i] == ds.labels[i];
      agree += float_pred[i] == pred;
    }
  }
  const auto n = static_cast<double>(ds.size());
  rep.accuracy = static_cast<double>(correct) / n;
  if (float_model) {
    rep.float_accuracy = static_cast<double>(float_correct) / n;
    rep.agreement = static_cast<double>(agree) / n;
  }
  return rep;
}

}  // namespace fieldnet::experiment
