#pragma once

// Experiment configuration and the train / compare / quantize / infer
// pipelines behind the command-line tool.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fieldnet/data.hpp"
#include "fieldnet/fieldnn.hpp"
#include "fieldnet/nn.hpp"

namespace fieldnet::experiment {

enum class DatasetKind { Cifar10, Cifar100, Blobs, Spirals };
enum class Normalization { UnitInterval, Standardize };

struct DatasetConfig {
  DatasetKind kind = DatasetKind::Blobs;
  /// CIFAR root; empty means $FIELDNET_DATA_DIR.
  std::string data_dir;
  /// CIFAR class-balanced subsets; 0 keeps the full split.
  std::size_t train_per_class = 0;
  std::size_t test_per_class = 0;
  Normalization normalization = Normalization::UnitInterval;
  // Synthetic sets.
  int classes = 2;
  int dims = 2;
  std::size_t n_train = 400;
  std::size_t n_test = 200;
  double turns = 2.0;
  double noise = 0.0;
  std::uint64_t seed = 0;
};

enum class Architecture { Mlp, CnnSmall, CnnLiu, Nin };

struct ArchitectureConfig {
  Architecture kind = Architecture::Mlp;
  /// Hidden widths for mlp.
  std::vector<std::size_t> hidden = {16, 16};
  /// Non-global pooling: nullopt picks the scheme default (max for relu,
  /// sum for poly and quad).
  std::optional<nn::PoolKind> pool;
};

enum class SchemeKind { ReLU, Poly, Quad };

struct Scheme {
  SchemeKind kind = SchemeKind::Poly;
  long a = 1;
  nn::Activation activation() const;
  std::string name() const;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  ArchitectureConfig architecture;
  Scheme scheme;
  nn::TrainConfig train;
  std::optional<fieldnn::QuantConfig> quant;
  /// With a quant section: the prime to use; nullopt picks one automatically.
  std::optional<std::uint64_t> modulus;
  std::string output_dir;

  /// Throws std::invalid_argument (relu with a quant section, a composite
  /// modulus, a bad train section, ...).
  void validate() const;
};

/// Architecture defaults for the train section: 150 epochs and lambda 5e-4
/// for cnn_liu, 160 epochs with 0.4x decay at 80 and 140 and lambda 3e-4 for
/// nin, 30 epochs otherwise.
nn::TrainConfig default_train_config(Architecture arch);

nlohmann::json to_json(const ExperimentConfig& config);
/// Missing keys take defaults; unknown keys are rejected.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

std::string to_string(DatasetKind k);
DatasetKind dataset_kind_from_string(const std::string& s);
std::string to_string(Architecture a);
Architecture architecture_from_string(const std::string& s);
Scheme scheme_from_string(const std::string& s, long a = 1);

/// Layer list for an architecture preset under a scheme.
std::vector<nn::LayerSpec> build_layers(const ArchitectureConfig& arch, const Scheme& scheme, const Shape& input_shape,
                                        int num_classes);

/// Directory from the config or $FIELDNET_DATA_DIR; nullopt when neither is set.
std::optional<std::filesystem::path> resolve_data_dir(const DatasetConfig& dc);
/// Loads, subsets and normalizes a dataset per the config.
data::Split load_dataset(const DatasetConfig& dc);

struct TrainResult {
  nn::Model model;
  std::vector<nn::EpochRecord> history;
  double learning_rate = 0.0;
};

/// Builds, initializes, optionally searches the learning rate, and trains.
TrainResult run_train(const ExperimentConfig& config, const data::Split& split);

/// Writes config.json (with defaults and the chosen learning rate),
/// model.json and metrics.csv into config.output_dir; with a quant section
/// also qmodel.json, whose modulus is null when no 64-bit prime covers the
/// required bound.
void write_train_outputs(const ExperimentConfig& config, const TrainResult& result);

struct CompareRow {
  std::string scheme;
  std::string dataset;
  std::uint64_t seed = 0;
  std::optional<double> final_test_acc;  // nullopt when training diverged
  int best_epoch = 0;
  std::string error;
  std::vector<nn::EpochRecord> history;
};

/// Runs every scheme for every seed on the same data and data order.
/// Divergence is recorded in the row and does not stop the other runs.
std::vector<CompareRow> run_compare(const ExperimentConfig& base, std::span<const Scheme> schemes,
                                    std::span<const std::uint64_t> seeds, const data::Split& split);

/// Columns scheme,dataset,seed,final_test_acc,best_epoch.
std::string compare_csv(std::span<const CompareRow> rows);

/// Writes compare.csv and curves/<scheme>_seed<k>.csv into `dir`.
void write_compare_outputs(const std::filesystem::path& dir, std::span<const CompareRow> rows);

/// Smallest prime >= 2 * required_bound + 1, or the configured modulus.
std::uint64_t choose_modulus(const fieldnn::QuantizedModel& qm, std::optional<std::uint64_t> requested);

struct InferReport {
  std::size_t samples = 0;
  double accuracy = 0.0;
  double float_accuracy = 0.0;
  double agreement = 0.0;
  std::uint64_t modulus = 0;
};

/// field_forward over every sample; agreement is measured against the float
/// model when one is given.
InferReport run_infer(const fieldnn::QuantizedModel& qm, const data::Dataset& ds, std::uint64_t modulus,
                      bool allow_wrap, const nn::Model* float_model);

}  // namespace fieldnet::experiment
