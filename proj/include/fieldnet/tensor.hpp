#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fieldnet {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& s);

/// Row-major dense tensor of 64-bit reals.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(shape_size(shape), fill) {}
  Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_size(shape) != data.size()) {
      throw std::invalid_argument("Tensor: shape " + shape_string(shape) + " does not match " +
                                  std::to_string(data.size()) + " values");
    }
  }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  /// Elements per leading index (e.g. one sample of an N-major batch).
  std::size_t stride0() const { return shape.empty() ? 0 : data.size() / shape[0]; }

  std::span<double> row(std::size_t n) { return {data.data() + n * stride0(), stride0()}; }
  std::span<const double> row(std::size_t n) const { return {data.data() + n * stride0(), stride0()}; }
};

/// SplitMix64-seeded xoshiro256** generator with portable uniform/normal
/// draws, so results do not depend on the standard library's distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next();
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::uint64_t s_[4];
};

std::uint64_t splitmix64(std::uint64_t& state);
/// Derives an independent seed from a base seed and a stream tag.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace fieldnet
