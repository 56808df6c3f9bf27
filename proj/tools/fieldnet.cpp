// fieldnet command-line tool: check, approx, train, compare, quantize, infer.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fieldnet/approx.hpp"
#include "fieldnet/experiment.hpp"
#include "fieldnet/fieldnn.hpp"
#include "fieldnet/serialize.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fieldnet;

namespace {

constexpr int kExitError = 1;
constexpr int kExitNotConverged = 3;

struct FunctionArg {
  std::string name;
  double c = 2.0;
};

std::function<double(double)> builtin(const FunctionArg& f) {
  if (f.name == "relu") return [](double x) { return approx::relu(x); };
  if (f.name == "scaled_relu") return [c = f.c](double x) { return approx::scaled_relu(x, c); };
  if (f.name == "abs") return [](double x) { return std::abs(x); };
  if (f.name == "square") return [](double x) { return x * x; };
  throw std::invalid_argument("unknown function '" + f.name + "' (expected relu, scaled_relu, abs or square)");
}

bool is_integer_poly_function(const FunctionArg& f) { return f.name == "square"; }

json poly_json(const approx::Polynomial& p) { return {{"coeffs", p.coeffs()}, {"string", approx::to_string(p)}}; }

void print(const json& j) { std::cout << j.dump(2) << "\n"; }

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) out.push_back(std::stoull(tok));
  }
  if (out.empty()) throw std::invalid_argument("--seeds: no seeds given");
  return out;
}

int cmd_check(const FunctionArg& f, const std::vector<double>& interval) {
  const approx::Interval iv(interval.at(0), interval.at(1));
  const auto fn = builtin(f);
  approx::ApproximabilityVerdict v;
  std::optional<approx::Polynomial> interpolant;
  std::string rule;
  const double alpha = iv.hi();
  if (iv.length() >= 4.0) {
    rule = "interval_length";
    v = approx::check_interval_length(iv, is_integer_poly_function(f));
  } else if (iv.lo() == -1.0 && iv.hi() == 1.0) {
    rule = "unit_interval";
    v = approx::check_approx_unit_interval(fn(-1.0), fn(0.0), fn(1.0));
    if (v.approximable) interpolant = approx::interpolate_deg2(fn(-1.0), fn(0.0), fn(1.0));
  } else if (iv.lo() == -alpha && approx::AlgebraicKernelSpecialCase::documented(alpha)) {
    rule = "algebraic_kernel";
    v = approx::check_kernel_special_case(alpha, fn);
  } else {
    rule = "none";
    v.approximable = false;
    v.reason = approx::Reason::Unknown;
    v.witness = "no decision rule covers this interval";
  }
  json out = {{"function", f.name},
              {"interval", {iv.lo(), iv.hi()}},
              {"approximable", v.approximable},
              {"reason", approx::to_string(v.reason)},
              {"rule", rule},
              {"witness", v.witness ? json(*v.witness) : json(nullptr)}};
  if (f.name == "scaled_relu") out["c"] = f.c;
  if (interpolant) out["interpolant"] = poly_json(*interpolant);
  print(out);
  return 0;
}

int cmd_approx(const FunctionArg& f, int degree, const std::vector<double>& interval, bool closed_form, bool integerize,
               const approx::RemezOptions& opts) {
  const approx::Interval iv(interval.at(0), interval.at(1));
  approx::MinimaxResult r;
  std::string method;
  if (closed_form) {
    if (f.name != "relu" || degree != 2 || iv.lo() != -iv.hi()) {
      throw std::invalid_argument("--closed-form is only available for relu, degree 2, on a symmetric interval");
    }
    r = approx::relu_minimax_deg2(iv.hi());
    method = "closed_form";
  } else {
    r = approx::remez(builtin(f), degree, iv, opts);
    method = "remez";
  }
  json out = poly_json(r.poly);
  out["function"] = f.name;
  out["degree"] = degree;
  out["interval"] = {iv.lo(), iv.hi()};
  out["method"] = method;
  out["error"] = r.error;
  out["ref_points"] = r.ref_points;
  out["iterations"] = r.iterations;
  out["converged"] = r.converged;
  if (integerize) {
    const approx::Polynomial scaled = approx::scale_to_integer(r.poly, 1.0);
    std::vector<double> c = scaled.coeffs();
    if (!c.empty()) c[0] = 0.0;
    bool integral = true;
    for (double& v : c) {
      const double rv = std::round(v);
      if (std::abs(v - rv) > 1e-6) integral = false;
    }
    if (integral) {
      for (double& v : c) v = std::round(v) + 0.0;
    }
    const approx::Polynomial ip(c);
    out["integerized"] = poly_json(ip);
    out["integerized"]["integer_coefficients"] = integral;
  }
  print(out);
  return r.converged ? 0 : kExitNotConverged;
}

experiment::ExperimentConfig base_config(const std::string& path, const std::string& arch, const std::string& dataset) {
  json j = path.empty() ? json::object() : json::parse(read_text_file(path));
  if (!arch.empty()) j["architecture"]["name"] = arch;
  if (!dataset.empty()) j["dataset"]["name"] = dataset;
  return experiment::config_from_json(j);
}

int cmd_train(const std::string& config_path, const std::string& output_dir, std::optional<std::uint64_t> seed,
              std::optional<int> epochs) {
  json j = json::parse(read_text_file(config_path));
  if (!output_dir.empty()) j["output_dir"] = output_dir;
  if (seed) j["train"]["seed"] = *seed;
  if (epochs) j["train"]["epochs"] = *epochs;
  const experiment::ExperimentConfig cfg = experiment::config_from_json(j);
  const data::Split split = experiment::load_dataset(cfg.dataset);
  const experiment::TrainResult r = experiment::run_train(cfg, split);
  experiment::write_train_outputs(cfg, r);
  json out = {{"output_dir", cfg.output_dir},
              {"scheme", cfg.scheme.name()},
              {"learning_rate", r.learning_rate},
              {"epochs", r.history.size()},
              {"final_test_acc", r.history.empty() ? 0.0 : r.history.back().test_acc}};
  if (cfg.quant) {
    json qmeta;
    std::optional<std::uint64_t> p;
    const auto qm = fieldnn::quantized_from_json(json::parse(read_text_file(fs::path(cfg.output_dir) / "qmodel.json")),
                                                 &p, &qmeta);
    out["required_bound"] = qm.required_bound().str();
    out["modulus"] = p ? json(*p) : json(nullptr);
  }
  print(out);
  return 0;
}

int cmd_compare(const std::string& config_path, const std::string& arch, const std::string& dataset,
                const std::string& seeds_arg, const std::string& schemes_arg, const std::string& output_dir) {
  experiment::ExperimentConfig cfg = base_config(config_path, arch, dataset);
  const long a = cfg.scheme.kind == experiment::SchemeKind::Poly ? cfg.scheme.a : 1;
  std::vector<experiment::Scheme> schemes;
  std::stringstream ss(schemes_arg);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) schemes.push_back(experiment::scheme_from_string(tok, a));
  }
  const std::vector<std::uint64_t> seeds =
      seeds_arg.empty() ? std::vector<std::uint64_t>{cfg.train.seed} : parse_seeds(seeds_arg);
  const data::Split split = experiment::load_dataset(cfg.dataset);
  const auto rows = experiment::run_compare(cfg, schemes, seeds, split);
  const std::string dir = output_dir.empty() ? cfg.output_dir : output_dir;
  if (!dir.empty()) {
    experiment::write_compare_outputs(dir, rows);
    json echoed = experiment::to_json(cfg);
    echoed["output_dir"] = dir;
    write_file_atomic(fs::path(dir) / "config.json", echoed.dump(2) + "\n");
  }
  std::cout << experiment::compare_csv(rows);
  for (const auto& r : rows) {
    if (!r.error.empty()) std::cerr << "warning: " << r.scheme << " seed " << r.seed << ": " << r.error << "\n";
  }
  return 0;
}

long model_poly_a(const nn::Model& model) {
  for (const auto& l : model.spec()) {
    if (const auto* act = std::get_if<nn::Activation>(&l); act && act->kind == nn::Activation::Kind::Poly) {
      return act->param;
    }
  }
  return 1;
}

int cmd_quantize(const std::string& model_path, std::int64_t scale, std::optional<std::int64_t> input_scale,
                 std::optional<long> a, bool fold, bool auto_prime, std::optional<std::uint64_t> modulus,
                 bool allow_wrap, std::string out_path) {
  json meta;
  const nn::Model model = nn::load_model(model_path, &meta);
  fieldnn::QuantConfig qc;
  qc.weight_scale = scale;
  qc.input_scale = input_scale.value_or(scale);
  qc.activation_a = a.value_or(model_poly_a(model));
  qc.fold_minimax_constant = fold;
  const fieldnn::QuantizedModel qm = fieldnn::quantize(model, qc);
  std::optional<std::uint64_t> p = modulus;
  if (auto_prime) p = fieldnn::auto_prime(qm);
  if (p) {
    const field::Modulus m(*p);
    if (!allow_wrap && qm.required_bound() > fieldnn::BigInt(m.half())) {
      throw fieldnn::ModulusTooSmall("modulus " + std::to_string(*p) + " is below 2 * required_bound + 1 = " +
                                     fieldnn::BigInt(2 * qm.required_bound() + 1).str() + "; pass --allow-wrap");
    }
  }
  if (out_path.empty()) out_path = (fs::path(model_path).parent_path() / "qmodel.json").string();
  const json qmeta = {{"config", meta.value("config", json(nullptr))},
                      {"source_model", fs::absolute(model_path).string()}};
  write_file_atomic(out_path, fieldnn::quantized_to_json(qm, p, qmeta).dump(2) + "\n");
  json layer_scales = json::array();
  for (const auto& s : qm.layer_scales()) layer_scales.push_back(s.str());
  print({{"output", out_path},
         {"required_bound", qm.required_bound().str()},
         {"modulus", p ? json(*p) : json(nullptr)},
         {"output_scale", qm.output_scale().str()},
         {"layer_scales", layer_scales}});
  return 0;
}

experiment::DatasetConfig infer_dataset(const std::string& spec, const json& qmeta, std::string& split_name) {
  std::string kind = spec;
  split_name = "test";
  if (const auto dash = spec.rfind('-'); dash != std::string::npos) {
    split_name = spec.substr(dash + 1);
    kind = spec.substr(0, dash);
  }
  if (split_name != "test" && split_name != "train") throw std::invalid_argument("--dataset: split must be train or test");
  experiment::DatasetConfig dc;
  const json cfg = qmeta.value("config", json(nullptr));
  if (cfg.is_object()) {
    const auto from_meta = experiment::config_from_json(cfg).dataset;
    if (kind.empty() || experiment::to_string(from_meta.kind) == kind) return from_meta;
  }
  if (kind.empty()) throw std::invalid_argument("--dataset: model file has no dataset metadata; name a dataset");
  json j = {{"dataset", {{"name", kind}}}};
  return experiment::config_from_json(j).dataset;
}

int cmd_infer(const std::string& qmodel_path, const std::string& dataset, std::optional<std::uint64_t> modulus,
              bool auto_prime, bool allow_wrap, std::string float_model, std::size_t limit) {
  std::optional<std::uint64_t> stored;
  json qmeta;
  const auto qm = fieldnn::quantized_from_json(json::parse(read_text_file(qmodel_path)), &stored, &qmeta);
  std::uint64_t p = 0;
  if (modulus) {
    p = *modulus;
  } else if (!auto_prime && stored) {
    p = *stored;
  } else {
    p = fieldnn::auto_prime(qm);
  }
  std::string split_name;
  const experiment::DatasetConfig dc = infer_dataset(dataset, qmeta, split_name);
  const data::Split split = experiment::load_dataset(dc);
  data::Dataset ds = split_name == "train" ? split.train : split.test;
  if (limit > 0 && limit < ds.size()) {
    std::vector<std::size_t> idx(limit);
    for (std::size_t i = 0; i < limit; ++i) idx[i] = i;
    data::Batch b = data::gather(ds, idx);
    ds.images = std::move(b.images);
    ds.labels = std::move(b.labels);
  }
  if (float_model.empty()) float_model = qmeta.value("source_model", std::string());
  std::optional<nn::Model> fm;
  if (!float_model.empty() && fs::exists(float_model)) fm = nn::load_model(float_model);
  const auto rep = experiment::run_infer(qm, ds, p, allow_wrap, fm ? &*fm : nullptr);
  print({{"dataset", experiment::to_string(dc.kind) + "-" + split_name},
         {"samples", rep.samples},
         {"accuracy", rep.accuracy},
         {"float_accuracy", fm ? json(rep.float_accuracy) : json(nullptr)},
         {"agreement", fm ? json(rep.agreement) : json(nullptr)},
         {"modulus", rep.modulus},
         {"required_bound", qm.required_bound().str()},
         {"wrapped", qm.required_bound() > fieldnn::BigInt(p / 2)}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Polynomial activations and exact finite-field inference"};
  app.require_subcommand(1);

  FunctionArg fn;
  std::vector<double> interval{-1.0, 1.0};
  auto* check = app.add_subcommand("check", "Decide integer-coefficient uniform approximability");
  check->add_option("function", fn.name, "relu, scaled_relu, abs or square")->required();
  check->add_option("--c", fn.c, "Scale of scaled_relu");
  check->add_option("--interval", interval, "Interval endpoints")->expected(2);

  int degree = 2;
  bool closed_form = false, integerize = false;
  approx::RemezOptions ropts;
  auto* approx_cmd = app.add_subcommand("approx", "Minimax polynomial approximation");
  approx_cmd->add_option("function", fn.name, "relu, scaled_relu, abs or square")->required();
  approx_cmd->add_option("--c", fn.c, "Scale of scaled_relu");
  approx_cmd->add_option("--degree", degree)->check(CLI::Range(0, 30));
  approx_cmd->add_option("--interval", interval)->expected(2);
  approx_cmd->add_flag("--closed-form", closed_form, "Closed-form ReLU quadratic instead of Remez");
  approx_cmd->add_flag("--integerize", integerize, "Scale to leading coefficient 1 and drop the constant");
  approx_cmd->add_option("--tol", ropts.tol);
  approx_cmd->add_option("--max-iter", ropts.max_iter);

  std::string config_path, output_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  auto* train = app.add_subcommand("train", "Train one model from an experiment config");
  train->add_option("config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--output-dir", output_dir);
  train->add_option("--seed", seed);
  train->add_option("--epochs", epochs);

  std::string arch, dataset, seeds_arg, schemes_arg = "relu,poly,quad";
  auto* compare = app.add_subcommand("compare", "Train relu, poly and quad on the same data");
  compare->add_option("config", config_path, "Experiment config (JSON)")->check(CLI::ExistingFile);
  compare->add_option("--arch", arch);
  compare->add_option("--dataset", dataset);
  compare->add_option("--seeds", seeds_arg, "Comma-separated seeds");
  compare->add_option("--schemes", schemes_arg);
  compare->add_option("--output-dir", output_dir);

  std::string model_path, out_path;
  std::int64_t scale = 256;
  std::optional<std::int64_t> input_scale;
  std::optional<long> a;
  bool fold = false, auto_prime = false, allow_wrap = false;
  std::optional<std::uint64_t> modulus;
  auto* quantize = app.add_subcommand("quantize", "Quantize a trained model for inference in F_p");
  quantize->add_option("model", model_path)->required()->check(CLI::ExistingFile);
  quantize->add_option("--scale", scale, "Weight scale (and input scale unless --input-scale)");
  quantize->add_option("--input-scale", input_scale);
  quantize->add_option("--a", a, "Activation coefficient (defaults to the model's)");
  quantize->add_flag("--fold-constant", fold, "Keep the a^2/8 minimax constant");
  quantize->add_flag("--auto-prime", auto_prime);
  quantize->add_option("--modulus", modulus);
  quantize->add_flag("--allow-wrap", allow_wrap);
  quantize->add_option("-o,--output", out_path);

  std::string float_model;
  std::size_t limit = 0;
  auto* infer = app.add_subcommand("infer", "Run exact inference in F_p over a dataset");
  infer->add_option("qmodel", model_path)->required()->check(CLI::ExistingFile);
  infer->add_option("--dataset", dataset, "<name>[-train|-test]; defaults to the training dataset's test split");
  infer->add_option("--modulus", modulus);
  infer->add_flag("--auto-prime", auto_prime);
  infer->add_flag("--allow-wrap", allow_wrap);
  infer->add_option("--float-model", float_model);
  infer->add_option("--limit", limit, "Use only the first N samples");

  CLI11_PARSE(app, argc, argv);

  try {
    if (check->parsed()) return cmd_check(fn, interval);
    if (approx_cmd->parsed()) return cmd_approx(fn, degree, interval, closed_form, integerize, ropts);
    if (train->parsed()) return cmd_train(config_path, output_dir, seed, epochs);
    if (compare->parsed()) return cmd_compare(config_path, arch, dataset, seeds_arg, schemes_arg, output_dir);
    if (quantize->parsed()) {
      return cmd_quantize(model_path, scale, input_scale, a, fold, auto_prime, modulus, allow_wrap, out_path);
    }
    if (infer->parsed()) return cmd_infer(model_path, dataset, modulus, auto_prime, allow_wrap, float_model, limit);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitError;
}
