#pragma once

// Polynomial approximation of ReLU-type activations: closed-form minimax,
// Remez exchange, degree-2 interpolation and the integer-coefficient
// approximability checks.

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace fieldnet::approx {

inline constexpr double kIntegerTolerance = 1e-9;

/// Closed interval [lo, hi] with lo < hi.
class Interval {
 public:
  Interval(double lo, double hi);
  static Interval symmetric(double a);

  double lo() const { return lo_; }
  double hi() const { return hi_; }
  double length() const { return hi_ - lo_; }
  double mid() const { return 0.5 * (lo_ + hi_); }
  bool contains(double x) const { return x >= lo_ && x <= hi_; }

 private:
  double lo_;
  double hi_;
};

/// Dense polynomial, coeffs()[k] is the coefficient of x^k. Trailing zeros
/// are trimmed so degree() is the true degree (0 for the zero polynomial).
class Polynomial {
 public:
  Polynomial() : coeffs_{0.0} {}
  explicit Polynomial(std::vector<double> coeffs, double tol_int = kIntegerTolerance);

  const std::vector<double>& coeffs() const { return coeffs_; }
  double coeff(std::size_t k) const { return k < coeffs_.size() ? coeffs_[k] : 0.0; }
  int degree() const { return static_cast<int>(coeffs_.size()) - 1; }
  double leading() const { return coeffs_.back(); }
  double tol_int() const { return tol_int_; }

  double operator()(double x) const;
  bool is_integer_poly() const;
  Polynomial scaled(double factor) const;

  friend bool operator==(const Polynomial& a, const Polynomial& b) { return a.coeffs_ == b.coeffs_; }

 private:
  std::vector<double> coeffs_;
  double tol_int_ = kIntegerTolerance;
};

double eval_poly(const Polynomial& p, double x);
std::string to_string(const Polynomial& p);

double relu(double x);
double scaled_relu(double x, double c);

struct MinimaxResult {
  Polynomial poly;
  double error = 0.0;
  std::vector<double> ref_points;
  int iterations = 0;
  bool converged = false;
};

enum class Reason {
  Ok,
  NotIntegerValued,
  ParityMismatch,
  IntervalTooLong,
  KernelInterpolantNotInteger,
  Unknown,
};

std::string to_string(Reason r);

struct ApproximabilityVerdict {
  bool approximable = false;
  Reason reason = Reason::Unknown;
  std::optional<std::string> witness;
};

/// Algebraic kernel of [-alpha, alpha] for the documented range
/// sqrt(2) <= alpha <= 1.563: {0} plus whichever of +-1, +-sqrt(2) lie inside.
class AlgebraicKernelSpecialCase {
 public:
  static constexpr double kAlphaMax = 1.563;

  explicit AlgebraicKernelSpecialCase(double alpha);

  static bool documented(double alpha);
  const std::vector<double>& points() const { return points_; }
  double alpha() const { return alpha_; }

 private:
  double alpha_;
  std::vector<double> points_;
};

/// Interpolant through (-1, f_neg1), (0, f_0), (1, f_1).
Polynomial interpolate_deg2(double f_neg1, double f_0, double f_1);

/// Newton-form interpolation through distinct nodes, returned in monomial form.
Polynomial interpolate(std::span<const double> xs, std::span<const double> ys);

ApproximabilityVerdict check_approx_unit_interval(double f_neg1, double f_0, double f_1,
                                                  double tol_int = kIntegerTolerance);

/// For intervals of length >= 4 only the integer polynomials themselves are
/// approximable. Throws std::invalid_argument on shorter intervals.
ApproximabilityVerdict check_interval_length(const Interval& iv, bool f_is_integer_poly);

/// Samples are (kernel point, f(point)) pairs; points are matched to the
/// kernel within 1e-12. Alpha outside the documented range yields Unknown.
ApproximabilityVerdict check_kernel_special_case(double alpha,
                                                 std::span<const std::pair<double, double>> f_samples,
                                                 double tol_int = kIntegerTolerance);
ApproximabilityVerdict check_kernel_special_case(double alpha, const std::function<double(double)>& f,
                                                 double tol_int = kIntegerTolerance);

/// Minimax quadratic for ReLU on [-a, a].
MinimaxResult relu_minimax_deg2(double a);

struct RemezOptions {
  double tol = 1e-9;
  int max_iter = 100;
  int grid_points = 4096;
};

/// Remez exchange from Chebyshev (second kind) nodes with single-point
/// exchange. Throws std::runtime_error if the levelling system is singular;
/// non-convergence is reported through MinimaxResult::converged.
MinimaxResult remez(const std::function<double(double)>& f, int degree, const Interval& iv,
                    const RemezOptions& opts = {});

/// p * (target_leading / leading(p)).
Polynomial scale_to_integer(const Polynomial& p, double target_leading);

/// x^2 + a x, a >= 1.
Polynomial poly_activation(long a);

}  // namespace fieldnet::approx
