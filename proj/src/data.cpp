#include "fieldnet/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace fieldnet::data {

namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::uint8_t> bytes(size);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  if (!in) throw std::runtime_error("short read on " + path.string());
  return bytes;
}

Dataset read_cifar_file(const fs::path& path, std::size_t record_size, std::size_t label_offset,
                        std::size_t expected_records, int num_classes, const std::string& name) {
  const std::vector<std::uint8_t> bytes = read_file(path);
  const std::size_t expected = record_size * expected_records;
  if (bytes.size() != expected) {
    throw std::runtime_error(path.string() + ": expected " + std::to_string(expected) + " bytes, found " +
                             std::to_string(bytes.size()));
  }
  return parse_cifar_records(bytes, record_size, label_offset, num_classes, name);
}

Dataset concat(std::vector<Dataset> parts, std::string name) {
  Dataset out;
  out.name = std::move(name);
  out.num_classes = parts.front().num_classes;
  Shape shape = parts.front().images.shape;
  shape[0] = 0;
  for (const Dataset& p : parts) shape[0] += p.size();
  out.images.shape = shape;
  out.images.data.reserve(shape_size(shape));
  for (Dataset& p : parts) {
    out.images.data.insert(out.images.data.end(), p.images.data.begin(), p.images.data.end());
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    p = Dataset{};
  }
  return out;
}

std::uint64_t content_hash(std::span<const double> row, int label) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto feed = [&](std::uint64_t word) {
    for (int b = 0; b < 8; ++b) {
      h ^= (word >> (8 * b)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  };
  for (double v : row) feed(std::bit_cast<std::uint64_t>(v == 0.0 ? 0.0 : v));
  feed(static_cast<std::uint64_t>(label));
  return h;
}

std::size_t channels_of(const Dataset& ds) { return ds.images.shape.size() == 4 ? ds.images.shape[1] : 1; }

}  // namespace

void Dataset::validate() const {
  if (images.shape.empty() || images.shape[0] != labels.size()) {
    throw std::invalid_argument("Dataset " + name + ": " + std::to_string(labels.size()) + " labels for images " +
                                shape_string(images.shape));
  }
  for (int l : labels) {
    if (l < 0 || l >= num_classes) {
      throw std::invalid_argument("Dataset " + name + ": label " + std::to_string(l) + " outside [0, " +
                                  std::to_string(num_classes) + ")");
    }
  }
}

Dataset parse_cifar_records(std::span<const std::uint8_t> bytes, std::size_t record_size, std::size_t label_offset,
                            int num_classes, std::string name) {
  if (record_size != kCifarPixels + label_offset + 1 || bytes.size() % record_size != 0) {
    throw std::runtime_error("CIFAR data: " + std::to_string(bytes.size()) + " bytes is not a whole number of " +
                             std::to_string(record_size) + "-byte records");
  }
  const std::size_t n = bytes.size() / record_size;
  Dataset ds;
  ds.name = std::move(name);
  ds.num_classes = num_classes;
  ds.images = Tensor({n, 3, 32, 32});
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * record_size;
    const int label = rec[label_offset];
    if (label >= num_classes) {
      throw std::runtime_error("CIFAR data: record " + std::to_string(i) + " has label " + std::to_string(label) +
                               " >= " + std::to_string(num_classes));
    }
    ds.labels[i] = label;
    const std::uint8_t* px = rec + label_offset + 1;
    double* dst = ds.images.data.data() + i * kCifarPixels;
    for (std::size_t k = 0; k < kCifarPixels; ++k) dst[k] = px[k];
  }
  return ds;
}

std::vector<std::uint8_t> serialize_cifar10_records(const Dataset& ds) {
  std::vector<std::uint8_t> out;
  out.reserve(ds.size() * kCifar10Record);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out.push_back(static_cast<std::uint8_t>(ds.labels[i]));
    for (double v : ds.images.row(i)) out.push_back(static_cast<std::uint8_t>(v));
  }
  return out;
}

Split load_cifar10(const fs::path& dir) {
  std::vector<Dataset> parts;
  for (int b = 1; b <= 5; ++b) {
    parts.push_back(read_cifar_file(dir / ("data_batch_" + std::to_string(b) + ".bin"), kCifar10Record, 0,
                                    kCifarRecordsPerBatch, 10, "cifar10-train"));
  }
  Split s;
  s.train = concat(std::move(parts), "cifar10-train");
  s.test = read_cifar_file(dir / "test_batch.bin", kCifar10Record, 0, kCifarRecordsPerBatch, 10, "cifar10-test");
  return s;
}

Split load_cifar100(const fs::path& dir) {
  Split s;
  s.train = read_cifar_file(dir / "train.bin", kCifar100Record, 1, 50000, 100, "cifar100-train");
  s.test = read_cifar_file(dir / "test.bin", kCifar100Record, 1, 10000, 100, "cifar100-test");
  return s;
}

ChannelStats channel_stats(const Dataset& ds) {
  const std::size_t c = channels_of(ds);
  const std::size_t n = ds.size();
  const std::size_t per = n == 0 ? 0 : ds.images.stride0() / c;
  ChannelStats st{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  const double count = static_cast<double>(n * per);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double* p = ds.images.data.data() + i * ds.images.stride0() + ch * per;
      for (std::size_t k = 0; k < per; ++k) sum += p[k];
    }
    const double mean = sum / count;
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double* p = ds.images.data.data() + i * ds.images.stride0() + ch * per;
      for (std::size_t k = 0; k < per; ++k) ss += (p[k] - mean) * (p[k] - mean);
    }
    st.mean[ch] = mean;
    st.stddev[ch] = std::sqrt(ss / count);
  }
  return st;
}

Dataset normalize(const Dataset& ds, NormalizeMode mode, const std::optional<ChannelStats>& stats) {
  Dataset out = ds;
  if (mode == NormalizeMode::UnitInterval) {
    for (double& v : out.images.data) v = std::clamp(v / 127.5 - 1.0, -1.0, 1.0);
    return out;
  }
  const ChannelStats st = stats ? *stats : channel_stats(ds);
  const std::size_t c = channels_of(ds);
  if (st.mean.size() != c) throw std::invalid_argument("normalize: channel statistics do not match dataset");
  const std::size_t per = ds.size() == 0 ? 0 : ds.images.stride0() / c;
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* p = out.images.data.data() + i * out.images.stride0() + ch * per;
      const double sd = st.stddev[ch] > 0.0 ? st.stddev[ch] : 1.0;
      for (std::size_t k = 0; k < per; ++k) p[k] = (p[k] - st.mean[ch]) / sd;
    }
  }
  return out;
}

Dataset subset(const Dataset& ds, std::size_t n_per_class, std::uint64_t seed) {
  struct Keyed {
    std::uint64_t key;
    std::size_t index;
  };
  std::vector<std::vector<Keyed>> by_class(static_cast<std::size_t>(ds.num_classes));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::uint64_t key = mix_seed(seed, content_hash(ds.images.row(i), ds.labels[i]));
    by_class[static_cast<std::size_t>(ds.labels[i])].push_back({key, i});
  }
  const auto by_key = [&](const Keyed& a, const Keyed& b) {
    if (a.key != b.key) return a.key < b.key;
    const auto ra = ds.images.row(a.index);
    const auto rb = ds.images.row(b.index);
    return std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end());
  };
  std::vector<Keyed> chosen;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& v = by_class[c];
    if (v.size() < n_per_class) {
      throw std::invalid_argument("subset: class " + std::to_string(c) + " has " + std::to_string(v.size()) +
                                  " samples, need " + std::to_string(n_per_class));
    }
    std::sort(v.begin(), v.end(), by_key);
    chosen.insert(chosen.end(), v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n_per_class));
  }
  std::sort(chosen.begin(), chosen.end(), by_key);
  std::vector<std::size_t> idx;
  idx.reserve(chosen.size());
  for (const Keyed& k : chosen) idx.push_back(k.index);
  Batch b = gather(ds, idx);
  Dataset out;
  out.images = std::move(b.images);
  out.labels = std::move(b.labels);
  out.num_classes = ds.num_classes;
  out.name = ds.name;
  return out;
}

Batch gather(const Dataset& ds, std::span<const std::size_t> indices) {
  Shape shape = ds.images.shape;
  shape[0] = indices.size();
  Batch b{Tensor(shape), {}};
  b.labels.reserve(indices.size());
  const std::size_t stride = ds.images.stride0();
  for (std::size_t j = 0; j < indices.size(); ++j) {
    const auto src = ds.images.row(indices[j]);
    std::copy(src.begin(), src.end(), b.images.data.begin() + static_cast<std::ptrdiff_t>(j * stride));
    b.labels.push_back(ds.labels[indices[j]]);
  }
  return b;
}

BatchIterator::BatchIterator(const Dataset& ds, std::size_t batch_size, std::uint64_t seed, bool shuffle)
    : ds_(&ds), batch_size_(batch_size), order_(ds.size()) {
  if (batch_size == 0) throw std::invalid_argument("batches: batch_size must be >= 1");
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  if (shuffle) {
    Rng rng(seed);
    rng.shuffle(order_);
  }
}

bool BatchIterator::next(Batch& out) {
  if (pos_ >= order_.size()) return false;
  const std::size_t end = std::min(pos_ + batch_size_, order_.size());
  out = gather(*ds_, std::span<const std::size_t>(order_).subspan(pos_, end - pos_));
  pos_ = end;
  return true;
}

std::size_t BatchIterator::num_batches() const { return (order_.size() + batch_size_ - 1) / batch_size_; }

BatchIterator batches(const Dataset& ds, std::size_t batch_size, std::uint64_t seed, bool shuffle) {
  return BatchIterator(ds, batch_size, seed, shuffle);
}

Dataset synth_blobs(int classes, int dims, std::size_t n, std::uint64_t seed) {
  if (classes < 2 || dims < 1 || n == 0) throw std::invalid_argument("synth_blobs: sizes must be positive");
  if (classes > 2 && (dims >= 31 || classes > (1 << dims))) {
    throw std::invalid_argument("synth_blobs: need classes <= 2^dims");
  }
  Rng rng(seed);
  Dataset ds;
  ds.name = "blobs";
  ds.num_classes = classes;
  ds.images = Tensor({n, static_cast<std::size_t>(dims)});
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % static_cast<std::size_t>(classes));
    ds.labels[i] = label;
    for (int d = 0; d < dims; ++d) {
      const bool positive = classes == 2 ? label == 1 : ((label >> d) & 1) != 0;
      double noise = rng.normal() * 0.1;
      while (std::abs(noise) > 0.2) noise = rng.normal() * 0.1;
      ds.images.data[i * static_cast<std::size_t>(dims) + static_cast<std::size_t>(d)] =
          std::clamp((positive ? 0.7 : -0.7) + noise, -1.0, 1.0);
    }
  }
  return ds;
}

Dataset synth_spirals(std::size_t n, double turns, double noise, std::uint64_t seed) {
  if (n == 0 || !(turns > 0.0) || noise < 0.0) throw std::invalid_argument("synth_spirals: bad parameters");
  Rng rng(seed);
  Dataset ds;
  ds.name = "spirals";
  ds.num_classes = 2;
  ds.images = Tensor({n, 2});
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    const double t = rng.uniform();
    const double r = 0.05 + 0.9 * t;
    const double theta = 2.0 * std::numbers::pi * turns * t + std::numbers::pi * label;
    const double nx = noise > 0.0 ? noise * rng.normal() : 0.0;
    const double ny = noise > 0.0 ? noise * rng.normal() : 0.0;
    ds.labels[i] = label;
    ds.images.data[2 * i] = std::clamp(r * std::cos(theta) + nx, -1.0, 1.0);
    ds.images.data[2 * i + 1] = std::clamp(r * std::sin(theta) + ny, -1.0, 1.0);
  }
  return ds;
}

}  // namespace fieldnet::data
