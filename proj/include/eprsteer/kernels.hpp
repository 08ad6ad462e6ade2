#pragma once

#include <cstddef>
#include <span>
#include <string>

// Hot numeric loops: entropy reductions and moment accumulation.  Scalar
// reference implementations always exist; AVX2+FMA variants are selected at
// runtime when the CPU supports them.  Tests assert scalar/SIMD equivalence.
namespace eprsteer::kernels {

enum class Backend { Auto, Scalar, Avx2 };

// Force a backend (tests, benchmarking).  Auto re-enables CPU detection.
// The EPRSTEER_KERNELS env var ("scalar" / "avx2" / "auto"), read once at
// startup, does the same without recompiling callers.
void set_backend(Backend b);

// Backend that will actually run, after CPU detection.
Backend active_backend();
std::string backend_name();

struct Moments {
    double sum = 0.0;
    double sum_sq = 0.0;
};

// sum and sum of squares of x
Moments moments(std::span<const double> x);

// sum and sum of squares of b[i] + sign*a[i]
Moments pair_moments(std::span<const double> a, std::span<const double> b, double sign);

// sum of x*log2(x), terms with x <= tiny contribute 0
double xlog2x_sum(std::span<const double> x);

// sum over i of f*log2(f) with f = a*x[i] + b*y[i]; the quadrature row kernel
double mix_xlog2x_sum(double a, std::span<const double> x,
                      double b, std::span<const double> y);

}  // namespace eprsteer::kernels
