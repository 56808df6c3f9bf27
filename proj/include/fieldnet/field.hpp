#pragma once

// Prime-field arithmetic with centered-lift signed semantics.

#include <cstdint>
#include <span>
#include <vector>

namespace fieldnet::field {

/// Deterministic Miller-Rabin, exact for every 64-bit input.
bool is_prime(std::uint64_t n);

/// Smallest prime >= n. Throws std::overflow_error past the largest 64-bit prime.
std::uint64_t next_prime(std::uint64_t n);

class Modulus {
 public:
  /// Throws std::invalid_argument unless p is an odd prime.
  explicit Modulus(std::uint64_t p);

  std::uint64_t value() const { return p_; }
  /// (p - 1) / 2, the largest magnitude a centered residue can carry.
  std::uint64_t half() const { return p_ / 2; }

  friend bool operator==(const Modulus&, const Modulus&) = default;

 private:
  std::uint64_t p_;
};

class FieldElement {
 public:
  FieldElement() = default;
  /// Takes an already reduced residue; throws if value >= p.
  FieldElement(std::uint64_t value, const Modulus& m);

  std::uint64_t value() const { return value_; }

  friend bool operator==(const FieldElement&, const FieldElement&) = default;

 private:
  struct Unchecked {};
  FieldElement(std::uint64_t value, Unchecked) : value_(value) {}
  friend FieldElement make_reduced(std::uint64_t value);

  std::uint64_t value_ = 0;
};

/// v mod p with negatives mapped to p + v. Throws std::out_of_range when
/// |v| > (p - 1) / 2.
FieldElement encode(std::int64_t v, const Modulus& m);
/// Arbitrary 128-bit value reduced mod p, no range restriction.
FieldElement reduce(__int128 v, const Modulus& m);
/// Centered lift into [-(p-1)/2, (p-1)/2].
std::int64_t decode(FieldElement e, const Modulus& m);

FieldElement add(FieldElement a, FieldElement b, const Modulus& m);
FieldElement sub(FieldElement a, FieldElement b, const Modulus& m);
FieldElement mul(FieldElement a, FieldElement b, const Modulus& m);
FieldElement neg(FieldElement a, const Modulus& m);

/// Sum of a[i] * b[i]; throws std::invalid_argument on length mismatch.
FieldElement dot(std::span<const FieldElement> a, std::span<const FieldElement> b, const Modulus& m);

std::vector<FieldElement> encode_all(std::span<const std::int64_t> v, const Modulus& m);

/// Horner evaluation of sum coeffs[k] x^k in F_p.
FieldElement eval_int_poly_field(std::span<const std::int64_t> coeffs, FieldElement x, const Modulus& m);

}  // namespace fieldnet::field
