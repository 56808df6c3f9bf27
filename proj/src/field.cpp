#include "fieldnet/field.hpp"

#include <limits>
#include <stdexcept>
#include <string>

namespace fieldnet::field {

namespace {

using u128 = unsigned __int128;

std::uint64_t mulmod(std::uint64_t a, std::uint64_t b, std::uint64_t m) {
  return static_cast<std::uint64_t>(static_cast<u128>(a) * b % m);
}

std::uint64_t powmod(std::uint64_t base, std::uint64_t e, std::uint64_t m) {
  std::uint64_t r = 1 % m;
  base %= m;
  while (e != 0) {
    if (e & 1) r = mulmod(r, base, m);
    base = mulmod(base, base, m);
    e >>= 1;
  }
  return r;
}

}  // namespace

FieldElement make_reduced(std::uint64_t value) { return FieldElement(value, FieldElement::Unchecked{}); }

bool is_prime(std::uint64_t n) {
  if (n < 2) return false;
  static constexpr std::uint64_t kSmall[] = {2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37};
  for (std::uint64_t q : kSmall) {
    if (n % q == 0) return n == q;
  }
  std::uint64_t d = n - 1;
  int s = 0;
  while ((d & 1) == 0) {
    d >>= 1;
    ++s;
  }
  // These bases are a proven witness set for n < 3.3e24.
  for (std::uint64_t a : kSmall) {
    std::uint64_t x = powmod(a, d, n);
    if (x == 1 || x == n - 1) continue;
    bool composite = true;
    for (int r = 1; r < s; ++r) {
      x = mulmod(x, x, n);
      if (x == n - 1) {
        composite = false;
        break;
      }
    }
    if (composite) return false;
  }
  return true;
}

std::uint64_t next_prime(std::uint64_t n) {
  for (std::uint64_t c = n; ; ++c) {
    if (is_prime(c)) return c;
    if (c == std::numeric_limits<std::uint64_t>::max()) break;
  }
  throw std::overflow_error("next_prime: no 64-bit prime >= " + std::to_string(n));
}

Modulus::Modulus(std::uint64_t p) : p_(p) {
  if (p < 3 || (p & 1) == 0 || !is_prime(p)) {
    throw std::invalid_argument("Modulus: " + std::to_string(p) + " is not an odd prime");
  }
}

FieldElement::FieldElement(std::uint64_t value, const Modulus& m) : value_(value) {
  if (value >= m.value()) throw std::out_of_range("FieldElement: residue not reduced mod p");
}

FieldElement encode(std::int64_t v, const Modulus& m) {
  const std::uint64_t mag = v < 0 ? static_cast<std::uint64_t>(-(v + 1)) + 1 : static_cast<std::uint64_t>(v);
  if (mag > m.half()) {
    throw std::out_of_range("encode: |" + std::to_string(v) + "| exceeds (p-1)/2 = " + std::to_string(m.half()));
  }
  return make_reduced(v < 0 ? m.value() - mag : mag);
}

FieldElement reduce(__int128 v, const Modulus& m) {
  const bool negative = v < 0;
  const u128 mag = negative ? static_cast<u128>(-(v + 1)) + 1 : static_cast<u128>(v);
  const std::uint64_t r = static_cast<std::uint64_t>(mag % m.value());
  return make_reduced(negative && r != 0 ? m.value() - r : r);
}

std::int64_t decode(FieldElement e, const Modulus& m) {
  if (e.value() <= m.half()) return static_cast<std::int64_t>(e.value());
  return -static_cast<std::int64_t>(m.value() - e.value());
}

FieldElement add(FieldElement a, FieldElement b, const Modulus& m) {
  const std::uint64_t p = m.value();
  std::uint64_t s = a.value() + b.value();
  if (s < a.value() || s >= p) s -= p;
  return make_reduced(s);
}

FieldElement sub(FieldElement a, FieldElement b, const Modulus& m) {
  const std::uint64_t p = m.value();
  return make_reduced(a.value() >= b.value() ? a.value() - b.value() : a.value() + (p - b.value()));
}

FieldElement mul(FieldElement a, FieldElement b, const Modulus& m) {
  return make_reduced(mulmod(a.value(), b.value(), m.value()));
}

FieldElement neg(FieldElement a, const Modulus& m) {
  return make_reduced(a.value() == 0 ? 0 : m.value() - a.value());
}

FieldElement dot(std::span<const FieldElement> a, std::span<const FieldElement> b, const Modulus& m) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("dot: length mismatch " + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()));
  }
  const std::uint64_t p = m.value();
  u128 acc = 0;
  // Each product is < p^2 < 2^128; fold before the sum can overflow.
  const u128 limit = ~static_cast<u128>(0) - static_cast<u128>(p - 1) * (p - 1);
  for (std::size_t i = 0; i < a.size(); ++i) {
    acc += static_cast<u128>(a[i].value()) * b[i].value();
    if (acc >= limit) acc %= p;
  }
  return make_reduced(static_cast<std::uint64_t>(acc % p));
}

std::vector<FieldElement> encode_all(std::span<const std::int64_t> v, const Modulus& m) {
  std::vector<FieldElement> out;
  out.reserve(v.size());
  for (std::int64_t x : v) out.push_back(encode(x, m));
  return out;
}

FieldElement eval_int_poly_field(std::span<const std::int64_t> coeffs, FieldElement x, const Modulus& m) {
  FieldElement acc;
  for (std::size_t k = coeffs.size(); k-- > 0;) {
    acc = add(mul(acc, x, m), encode(coeffs[k], m), m);
  }
  return acc;
}

}  // namespace fieldnet::field
