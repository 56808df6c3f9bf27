#include "fieldnet/approx.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace fieldnet::approx {

namespace {

bool is_integer(double v, double tol) { return std::isfinite(v) && std::abs(v - std::round(v)) <= tol; }

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

// Chebyshev series in the normalized variable t in [-1, 1].
double clenshaw(std::span<const double> c, double t) {
  double b1 = 0.0, b2 = 0.0;
  for (std::size_t k = c.size(); k-- > 1;) {
    const double b0 = 2.0 * t * b1 - b2 + c[k];
    b2 = b1;
    b1 = b0;
  }
  return t * b1 - b2 + c[0];
}

// Chebyshev coefficients in t -> monomial coefficients in x, x = mid + half * t.
std::vector<double> chebyshev_to_monomial(std::span<const double> cheb, double mid, double half) {
  const std::size_t n = cheb.size();
  std::vector<std::vector<double>> basis(n, std::vector<double>(n, 0.0));
  basis[0][0] = 1.0;
  if (n > 1) basis[1][1] = 1.0;
  for (std::size_t k = 2; k < n; ++k) {
    for (std::size_t j = 0; j + 1 < n; ++j) basis[k][j + 1] += 2.0 * basis[k - 1][j];
    for (std::size_t j = 0; j < n; ++j) basis[k][j] -= basis[k - 2][j];
  }
  std::vector<double> in_t(n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t j = 0; j < n; ++j) in_t[j] += cheb[k] * basis[k][j];
  }
  // Substitute t = (x - mid) / half and expand binomially.
  std::vector<double> out(n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    if (in_t[k] == 0.0) continue;
    const double scale = in_t[k] / std::pow(half, static_cast<double>(k));
    double binom = 1.0;
    for (std::size_t j = 0; j <= k; ++j) {
      out[j] += scale * binom * std::pow(-mid, static_cast<double>(k - j));
      binom = binom * static_cast<double>(k - j) / static_cast<double>(j + 1);
    }
  }
  return out;
}

template <class F>
double golden_max(const F& g, double a, double b) {
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = b - inv_phi * (b - a);
  double d = a + inv_phi * (b - a);
  double gc = g(c), gd = g(d);
  for (int it = 0; it < 100 && (b - a) > 1e-15 * std::max(1.0, std::abs(a) + std::abs(b)); ++it) {
    if (gc >= gd) {
      b = d;
      d = c;
      gd = gc;
      c = b - inv_phi * (b - a);
      gc = g(c);
    } else {
      a = c;
      c = d;
      gc = gd;
      d = a + inv_phi * (b - a);
      gd = g(d);
    }
  }
  return gc >= gd ? c : d;
}

}  // namespace

Interval::Interval(double lo, double hi) : lo_(lo), hi_(hi) {
  if (!(std::isfinite(lo) && std::isfinite(hi) && lo < hi)) {
    throw std::invalid_argument("Interval: need finite lo < hi, got [" + fmt(lo) + ", " + fmt(hi) + "]");
  }
}

Interval Interval::symmetric(double a) {
  if (!(a > 0.0)) throw std::invalid_argument("Interval::symmetric: a must be positive");
  return Interval(-a, a);
}

Polynomial::Polynomial(std::vector<double> coeffs, double tol_int) : coeffs_(std::move(coeffs)), tol_int_(tol_int) {
  while (coeffs_.size() > 1 && coeffs_.back() == 0.0) coeffs_.pop_back();
  if (coeffs_.empty()) coeffs_.push_back(0.0);
}

double Polynomial::operator()(double x) const {
  double acc = 0.0;
  for (std::size_t k = coeffs_.size(); k-- > 0;) acc = acc * x + coeffs_[k];
  return acc;
}

bool Polynomial::is_integer_poly() const {
  return std::all_of(coeffs_.begin(), coeffs_.end(), [&](double c) { return is_integer(c, tol_int_); });
}

Polynomial Polynomial::scaled(double factor) const {
  std::vector<double> c = coeffs_;
  for (double& v : c) v *= factor;
  return Polynomial(std::move(c), tol_int_);
}

double eval_poly(const Polynomial& p, double x) { return p(x); }

std::string to_string(const Polynomial& p) {
  std::ostringstream os;
  os.precision(12);
  bool first = true;
  for (std::size_t k = p.coeffs().size(); k-- > 0;) {
    const double c = p.coeffs()[k];
    if (c == 0.0 && !(first && k == 0)) continue;
    if (!first) os << (c < 0 ? " - " : " + ");
    else if (c < 0) os << "-";
    const double mag = std::abs(c);
    if (k == 0 || mag != 1.0) os << mag;
    if (k >= 1) os << "x";
    if (k >= 2) os << "^" << k;
    first = false;
  }
  return os.str();
}

double relu(double x) { return std::max(x, 0.0); }
double scaled_relu(double x, double c) { return std::max(c * x, 0.0); }

std::string to_string(Reason r) {
  switch (r) {
    case Reason::Ok: return "OK";
    case Reason::NotIntegerValued: return "NotIntegerValued";
    case Reason::ParityMismatch: return "ParityMismatch";
    case Reason::IntervalTooLong: return "IntervalTooLong";
    case Reason::KernelInterpolantNotInteger: return "KernelInterpolantNotInteger";
    case Reason::Unknown: return "Unknown";
  }
  return "Unknown";
}

AlgebraicKernelSpecialCase::AlgebraicKernelSpecialCase(double alpha) : alpha_(alpha) {
  if (!documented(alpha)) {
    throw std::invalid_argument("no documented algebraic kernel for alpha = " + fmt(alpha));
  }
  const double r2 = std::numbers::sqrt2;
  for (double x : {-r2, -1.0, 0.0, 1.0, r2}) {
    if (std::abs(x) <= alpha + 1e-12) points_.push_back(x);
  }
}

bool AlgebraicKernelSpecialCase::documented(double alpha) {
  return alpha >= std::numbers::sqrt2 - 1e-12 && alpha <= kAlphaMax;
}

Polynomial interpolate_deg2(double f_neg1, double f_0, double f_1) {
  return Polynomial({f_0, (f_1 - f_neg1) / 2.0, (f_1 + f_neg1 - 2.0 * f_0) / 2.0});
}

Polynomial interpolate(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size() || xs.empty()) {
    throw std::invalid_argument("interpolate: need equally many (>0) nodes and values");
  }
  const std::size_t n = xs.size();
  std::vector<double> dd(ys.begin(), ys.end());
  for (std::size_t j = 1; j < n; ++j) {
    for (std::size_t i = n - 1; i >= j; --i) {
      const double h = xs[i] - xs[i - j];
      if (h == 0.0) throw std::invalid_argument("interpolate: repeated node");
      dd[i] = (dd[i] - dd[i - 1]) / h;
    }
  }
  // Horner on the Newton form: p = dd[n-1]; p = p*(x - x_k) + dd[k].
  std::vector<double> c{dd[n - 1]};
  for (std::size_t k = n - 1; k-- > 0;) {
    std::vector<double> next(c.size() + 1, 0.0);
    for (std::size_t j = 0; j < c.size(); ++j) {
      next[j + 1] += c[j];
      next[j] -= xs[k] * c[j];
    }
    next[0] += dd[k];
    c = std::move(next);
  }
  return Polynomial(std::move(c));
}

ApproximabilityVerdict check_approx_unit_interval(double f_neg1, double f_0, double f_1, double tol_int) {
  const std::pair<const char*, double> samples[] = {{"-1", f_neg1}, {"0", f_0}, {"1", f_1}};
  for (const auto& [at, v] : samples) {
    if (!is_integer(v, tol_int)) {
      return {false, Reason::NotIntegerValued, "f(" + std::string(at) + ") = " + fmt(v) + " is not an integer"};
    }
  }
  const long long lo = std::llround(f_neg1);
  const long long hi = std::llround(f_1);
  if ((lo - hi) % 2 != 0) {
    return {false, Reason::ParityMismatch,
            "f(-1) = " + std::to_string(lo) + " and f(1) = " + std::to_string(hi) + " differ in parity"};
  }
  return {true, Reason::Ok, std::nullopt};
}

ApproximabilityVerdict check_interval_length(const Interval& iv, bool f_is_integer_poly) {
  if (iv.length() < 4.0) {
    throw std::invalid_argument("check_interval_length: interval length " + fmt(iv.length()) + " < 4");
  }
  if (f_is_integer_poly) return {true, Reason::Ok, std::nullopt};
  return {false, Reason::IntervalTooLong,
          "interval of length " + fmt(iv.length()) + " admits only integer polynomials themselves"};
}

ApproximabilityVerdict check_kernel_special_case(double alpha,
                                                 std::span<const std::pair<double, double>> f_samples,
                                                 double tol_int) {
  if (!AlgebraicKernelSpecialCase::documented(alpha)) {
    return {false, Reason::Unknown, "no documented algebraic kernel for alpha = " + fmt(alpha)};
  }
  const AlgebraicKernelSpecialCase kernel(alpha);
  std::vector<double> ys;
  for (double x : kernel.points()) {
    auto it = std::find_if(f_samples.begin(), f_samples.end(),
                           [&](const auto& s) { return std::abs(s.first - x) <= 1e-12; });
    if (it == f_samples.end()) {
      throw std::invalid_argument("check_kernel_special_case: missing sample at kernel point " + fmt(x));
    }
    ys.push_back(it->second);
  }
  const Polynomial q = interpolate(kernel.points(), ys);
  const Polynomial q_tol(q.coeffs(), tol_int);
  if (q_tol.is_integer_poly()) return {true, Reason::Ok, std::nullopt};
  return {false, Reason::KernelInterpolantNotInteger, "kernel interpolant " + to_string(q) + " is not integral"};
}

ApproximabilityVerdict check_kernel_special_case(double alpha, const std::function<double(double)>& f,
                                                 double tol_int) {
  if (!AlgebraicKernelSpecialCase::documented(alpha)) {
    return {false, Reason::Unknown, "no documented algebraic kernel for alpha = " + fmt(alpha)};
  }
  std::vector<std::pair<double, double>> samples;
  const AlgebraicKernelSpecialCase kernel(alpha);
  for (double x : kernel.points()) samples.emplace_back(x, f(x));
  return check_kernel_special_case(alpha, samples, tol_int);
}

MinimaxResult relu_minimax_deg2(double a) {
  if (!(a > 0.0) || !std::isfinite(a)) throw std::invalid_argument("relu_minimax_deg2: a must be positive");
  MinimaxResult r;
  r.poly = Polynomial({a / 16.0, 0.5, 1.0 / (2.0 * a)});
  r.error = a / 16.0;
  r.ref_points = {-a, -a / 2.0, 0.0, a / 2.0, a};
  r.iterations = 0;
  r.converged = true;
  return r;
}

MinimaxResult remez(const std::function<double(double)>& f, int degree, const Interval& iv,
                    const RemezOptions& opts) {
  if (degree < 0) throw std::invalid_argument("remez: degree must be >= 0");
  if (!(opts.tol > 0.0)) throw std::invalid_argument("remez: tol must be positive");
  if (opts.grid_points < degree + 2) throw std::invalid_argument("remez: grid too coarse for degree");

  const int n = degree;
  const int m = n + 2;
  const double mid = iv.mid();
  const double half = 0.5 * iv.length();
  const auto to_x = [&](double t) { return mid + half * t; };
  const auto to_t = [&](double x) { return std::clamp((x - mid) / half, -1.0, 1.0); };

  // Chebyshev points of the second kind, ascending.
  std::vector<double> ref(m);
  for (int j = 0; j < m; ++j) {
    ref[j] = to_x(-std::cos(std::numbers::pi * j / (m - 1)));
  }

  std::vector<double> grid(opts.grid_points);
  for (int i = 0; i < opts.grid_points; ++i) {
    grid[i] = iv.lo() + iv.length() * static_cast<double>(i) / (opts.grid_points - 1);
  }

  std::vector<double> cheb(n + 1, 0.0);
  const auto err = [&](double x) { return f(x) - clenshaw(cheb, to_t(x)); };

  MinimaxResult result;
  double max_err = 0.0;
  for (int iter = 1; iter <= opts.max_iter; ++iter) {
    Eigen::MatrixXd A(m, m);
    Eigen::VectorXd rhs(m);
    for (int i = 0; i < m; ++i) {
      const double t = to_t(ref[i]);
      double tkm1 = 1.0, tk = t;
      for (int k = 0; k <= n; ++k) {
        if (k == 0) A(i, k) = 1.0;
        else if (k == 1) A(i, k) = t;
        else {
          const double tn = 2.0 * t * tk - tkm1;
          tkm1 = tk;
          tk = tn;
          A(i, k) = tn;
        }
      }
      A(i, n + 1) = (i % 2 == 0) ? 1.0 : -1.0;
      rhs(i) = f(ref[i]);
    }
    Eigen::FullPivLU<Eigen::MatrixXd> lu(A);
    lu.setThreshold(1e-13);
    if (!lu.isInvertible()) {
      throw std::runtime_error("remez: singular levelling system at iteration " + std::to_string(iter));
    }
    const Eigen::VectorXd sol = lu.solve(rhs);
    for (int k = 0; k <= n; ++k) cheb[k] = sol(k);
    const double levelled = std::abs(sol(n + 1));

    // Locate the global extremum of |error|: golden-section refinement of
    // every local peak on the dense grid.
    std::vector<double> e(grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) e[i] = std::abs(err(grid[i]));
    double x_star = grid.front();
    double best_abs = -1.0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      const bool peak = (i == 0 || e[i] >= e[i - 1]) && (i + 1 == grid.size() || e[i] >= e[i + 1]);
      if (!peak) continue;
      if (e[i] > best_abs) {
        best_abs = e[i];
        x_star = grid[i];
      }
      const double a = grid[i == 0 ? 0 : i - 1];
      const double b = grid[std::min(i + 1, grid.size() - 1)];
      const double refined = golden_max([&](double x) { return std::abs(err(x)); }, a, b);
      const double er = std::abs(err(refined));
      if (er > best_abs) {
        best_abs = er;
        x_star = refined;
      }
    }
    for (double r : ref) best_abs = std::max(best_abs, std::abs(err(r)));
    max_err = best_abs;

    result.iterations = iter;
    if (max_err - levelled <= opts.tol * levelled || max_err <= opts.tol) {
      result.converged = true;
      break;
    }

    // Single-point exchange preserving sign alternation.
    const auto sgn = [&](double x) { return err(x) >= 0.0; };
    const bool s = sgn(x_star);
    if (x_star < ref.front()) {
      if (s == sgn(ref.front())) {
        ref.front() = x_star;
      } else {
        ref.insert(ref.begin(), x_star);
        ref.pop_back();
      }
    } else if (x_star > ref.back()) {
      if (s == sgn(ref.back())) {
        ref.back() = x_star;
      } else {
        ref.push_back(x_star);
        ref.erase(ref.begin());
      }
    } else {
      const auto it = std::upper_bound(ref.begin(), ref.end(), x_star);
      const std::size_t hi = static_cast<std::size_t>(it - ref.begin());
      const std::size_t lo = hi - 1;
      if (s == sgn(ref[lo])) ref[lo] = x_star;
      else ref[hi] = x_star;
    }
  }

  result.poly = Polynomial(chebyshev_to_monomial(cheb, mid, half));
  result.error = max_err;
  result.ref_points = ref;
  return result;
}

Polynomial scale_to_integer(const Polynomial& p, double target_leading) {
  if (p.leading() == 0.0) throw std::invalid_argument("scale_to_integer: zero leading coefficient");
  return p.scaled(target_leading / p.leading());
}

Polynomial poly_activation(long a) {
  if (a < 1) throw std::invalid_argument("poly_activation: a must be a positive integer");
  return Polynomial({0.0, static_cast<double>(a), 1.0});
}

}  // namespace fieldnet::approx
