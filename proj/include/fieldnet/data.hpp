#pragma once

// Dataset ingestion (CIFAR-10/100 binary), normalization, class-balanced
// subsetting, batching, and small synthetic datasets.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fieldnet/tensor.hpp"

namespace fieldnet::data {

struct Dataset {
  Tensor images;  // (N, C, H, W) or (N, D)
  std::vector<int> labels;
  int num_classes = 0;
  std::string name;

  std::size_t size() const { return labels.size(); }
  /// Checks len(labels) == N and every label < num_classes.
  void validate() const;
};

struct Split {
  Dataset train;
  Dataset test;
};

inline constexpr std::size_t kCifarPixels = 3 * 32 * 32;
inline constexpr std::size_t kCifar10Record = 1 + kCifarPixels;
inline constexpr std::size_t kCifar100Record = 2 + kCifarPixels;
inline constexpr std::size_t kCifarRecordsPerBatch = 10000;

/// Parses raw CIFAR records. label_offset selects the label byte (0 for
/// CIFAR-10, 1 for the CIFAR-100 fine label); pixels are copied as 0..255.
Dataset parse_cifar_records(std::span<const std::uint8_t> bytes, std::size_t record_size, std::size_t label_offset,
                            int num_classes, std::string name);

/// Re-serializes a parsed CIFAR-10 dataset holding raw 0..255 pixel values.
std::vector<std::uint8_t> serialize_cifar10_records(const Dataset& ds);

/// data_batch_{1..5}.bin + test_batch.bin, each exactly 30,730,000 bytes.
Split load_cifar10(const std::filesystem::path& dir);
/// train.bin (50000 records) + test.bin (10000 records), 3074-byte records.
Split load_cifar100(const std::filesystem::path& dir);

enum class NormalizeMode { UnitInterval, PerChannelStandardize };

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

ChannelStats channel_stats(const Dataset& ds);

/// UnitInterval maps bytes via x / 127.5 - 1. PerChannelStandardize uses
/// `stats` (normally the training set's) or the dataset's own statistics.
Dataset normalize(const Dataset& ds, NormalizeMode mode, const std::optional<ChannelStats>& stats = std::nullopt);

/// Class-balanced deterministic subsample. Selection and output order depend
/// only on sample contents and the seed, not on the input order.
Dataset subset(const Dataset& ds, std::size_t n_per_class, std::uint64_t seed);

struct Batch {
  Tensor images;
  std::vector<int> labels;
};

Batch gather(const Dataset& ds, std::span<const std::size_t> indices);

/// Deterministic mini-batch stream; the last partial batch is kept.
class BatchIterator {
 public:
  BatchIterator(const Dataset& ds, std::size_t batch_size, std::uint64_t seed, bool shuffle);

  bool next(Batch& out);
  std::size_t num_batches() const;
  const std::vector<std::size_t>& order() const { return order_; }

 private:
  const Dataset* ds_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

BatchIterator batches(const Dataset& ds, std::size_t batch_size, std::uint64_t seed, bool shuffle);

/// Gaussian clusters (sigma 0.1, truncated at 0.2 per coordinate) around
/// fixed centers at 0.7 * (+-1, ..., +-1). Two classes use the diagonal pair.
Dataset synth_blobs(int classes, int dims, std::size_t n, std::uint64_t seed);

/// Two interleaved spirals in the unit disc.
Dataset synth_spirals(std::size_t n, double turns, double noise, std::uint64_t seed);

}  // namespace fieldnet::data
