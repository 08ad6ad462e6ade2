#include "eprsteer/kernels.hpp"

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>

#if defined(__x86_64__) || defined(_M_X64)
#include <immintrin.h>
#define EPRSTEER_X86 1
#else
#define EPRSTEER_X86 0
#endif

namespace eprsteer::kernels {

namespace {

// Values at or below this are treated as zero inside x*log2(x) sums.  The
// densities we integrate underflow long before this matters.
constexpr double kTiny = 1e-300;

std::atomic<Backend> g_requested{Backend::Auto};
std::atomic<bool> g_env_checked{false};

bool cpu_has_avx2() {
#if EPRSTEER_X86
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

void check_env_once() {
    bool expected = false;
    if (!g_env_checked.compare_exchange_strong(expected, true)) return;
    const char* v = std::getenv("EPRSTEER_KERNELS");
    if (!v) return;
    if (std::strcmp(v, "scalar") == 0) g_requested = Backend::Scalar;
    else if (std::strcmp(v, "avx2") == 0) g_requested = Backend::Avx2;
    else if (std::strcmp(v, "auto") == 0) g_requested = Backend::Auto;
}

bool use_avx2() {
    check_env_once();
    switch (g_requested.load()) {
        case Backend::Scalar: return false;
        case Backend::Avx2: return cpu_has_avx2();
        case Backend::Auto: default: return cpu_has_avx2();
    }
}

// ---------------------------------------------------------------- scalar --

Moments moments_scalar(std::span<const double> x) {
    Moments m;
    for (double v : x) {
        m.sum += v;
        m.sum_sq += v * v;
    }
    return m;
}

Moments pair_moments_scalar(std::span<const double> a, std::span<const double> b,
                            double sign) {
    Moments m;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double v = b[i] + sign * a[i];
        m.sum += v;
        m.sum_sq += v * v;
    }
    return m;
}

double xlog2x_sum_scalar(std::span<const double> x) {
    double s = 0.0;
    for (double v : x)
        if (v > kTiny) s += v * std::log2(v);
    return s;
}

double mix_xlog2x_sum_scalar(double a, std::span<const double> x,
                             double b, std::span<const double> y) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double f = a * x[i] + b * y[i];
        if (f > kTiny) s += f * std::log2(f);
    }
    return s;
}

// ------------------------------------------------------------------ avx2 --

#if EPRSTEER_X86

// log2 of four positive normal doubles.  Mantissa is reduced to
// [1/sqrt2, sqrt2) and log(m) evaluated as 2*atanh(r/(2+r)); odd series in
// s = r/(2+r) with s^2 <= 0.0295 converges past double precision by s^19.
__attribute__((target("avx2,fma")))
inline __m256d log2_pd(__m256d x) {
    const __m256d one = _mm256_set1_pd(1.0);
    const __m256i exp_mask = _mm256_set1_epi64x(0x7ffLL);
    const __m256i mant_mask = _mm256_set1_epi64x(0x000fffffffffffffLL);
    const __m256i one_bits = _mm256_set1_epi64x(0x3ff0000000000000LL);
    const __m256i magic = _mm256_set1_epi64x(0x4330000000000000LL);  // 2^52

    __m256i bits = _mm256_castpd_si256(x);
    __m256i ei = _mm256_and_si256(_mm256_srli_epi64(bits, 52), exp_mask);
    // int64 -> double for exponents in [0, 2047]
    __m256d e = _mm256_sub_pd(
        _mm256_castsi256_pd(_mm256_or_si256(ei, magic)),
        _mm256_castsi256_pd(magic));
    e = _mm256_sub_pd(e, _mm256_set1_pd(1023.0));

    __m256d m = _mm256_castsi256_pd(
        _mm256_or_si256(_mm256_and_si256(bits, mant_mask), one_bits));
    __m256d gt = _mm256_cmp_pd(m, _mm256_set1_pd(1.4142135623730951), _CMP_GT_OQ);
    m = _mm256_blendv_pd(m, _mm256_mul_pd(m, _mm256_set1_pd(0.5)), gt);
    e = _mm256_add_pd(e, _mm256_and_pd(gt, one));

    __m256d r = _mm256_sub_pd(m, one);
    __m256d s = _mm256_div_pd(r, _mm256_add_pd(r, _mm256_set1_pd(2.0)));
    __m256d t = _mm256_mul_pd(s, s);

    __m256d p = _mm256_set1_pd(1.0 / 19.0);
    p = _mm256_fmadd_pd(p, t, _mm256_set1_pd(1.0 / 17.0));
    p = _mm256_fmadd_pd(p, t, _mm256_set1_pd(1.0 / 15.0));
    p = _mm256_fmadd_pd(p, t, _mm256_set1_pd(1.0 / 13.0));
    p = _mm256_fmadd_pd(p, t, _mm256_set1_pd(1.0 / 11.0));
    p = _mm256_fmadd_pd(p, t, _mm256_set1_pd(1.0 / 9.0));
    p = _mm256_fmadd_pd(p, t, _mm256_set1_pd(1.0 / 7.0));
    p = _mm256_fmadd_pd(p, t, _mm256_set1_pd(1.0 / 5.0));
    p = _mm256_fmadd_pd(p, t, _mm256_set1_pd(1.0 / 3.0));

    __m256d s2 = _mm256_add_pd(s, s);
    __m256d logm = _mm256_fmadd_pd(_mm256_mul_pd(s2, t), p, s2);
    return _mm256_fmadd_pd(logm, _mm256_set1_pd(1.4426950408889634), e);
}

__attribute__((target("avx2,fma")))
inline double hsum(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    return _mm_cvtsd_f64(lo) + _mm_cvtsd_f64(_mm_unpackhi_pd(lo, lo));
}

__attribute__((target("avx2,fma")))
Moments moments_avx2(std::span<const double> x) {
    __m256d s = _mm256_setzero_pd(), ss = _mm256_setzero_pd();
    std::size_t i = 0, n = x.size();
    for (; i + 4 <= n; i += 4) {
        __m256d v = _mm256_loadu_pd(x.data() + i);
        s = _mm256_add_pd(s, v);
        ss = _mm256_fmadd_pd(v, v, ss);
    }
    Moments m{hsum(s), hsum(ss)};
    for (; i < n; ++i) {
        m.sum += x[i];
        m.sum_sq += x[i] * x[i];
    }
    return m;
}

__attribute__((target("avx2,fma")))
Moments pair_moments_avx2(std::span<const double> a, std::span<const double> b,
                          double sign) {
    __m256d sg = _mm256_set1_pd(sign);
    __m256d s = _mm256_setzero_pd(), ss = _mm256_setzero_pd();
    std::size_t i = 0, n = a.size();
    for (; i + 4 <= n; i += 4) {
        __m256d va = _mm256_loadu_pd(a.data() + i);
        __m256d vb = _mm256_loadu_pd(b.data() + i);
        __m256d v = _mm256_fmadd_pd(sg, va, vb);
        s = _mm256_add_pd(s, v);
        ss = _mm256_fmadd_pd(v, v, ss);
    }
    Moments m{hsum(s), hsum(ss)};
    for (; i < n; ++i) {
        double v = b[i] + sign * a[i];
        m.sum += v;
        m.sum_sq += v * v;
    }
    return m;
}

__attribute__((target("avx2,fma")))
double xlog2x_sum_avx2(std::span<const double> x) {
    const __m256d tiny = _mm256_set1_pd(kTiny);
    __m256d acc = _mm256_setzero_pd();
    std::size_t i = 0, n = x.size();
    for (; i + 4 <= n; i += 4) {
        __m256d v = _mm256_loadu_pd(x.data() + i);
        __m256d mask = _mm256_cmp_pd(v, tiny, _CMP_GT_OQ);
        // masked lanes are fed 1.0 so log2 stays finite, then zeroed
        __m256d safe = _mm256_blendv_pd(_mm256_set1_pd(1.0), v, mask);
        __m256d term = _mm256_mul_pd(v, log2_pd(safe));
        acc = _mm256_add_pd(acc, _mm256_and_pd(term, mask));
    }
    double s = hsum(acc);
    for (; i < n; ++i)
        if (x[i] > kTiny) s += x[i] * std::log2(x[i]);
    return s;
}

__attribute__((target("avx2,fma")))
double mix_xlog2x_sum_avx2(double a, std::span<const double> x,
                           double b, std::span<const double> y) {
    const __m256d va = _mm256_set1_pd(a), vb = _mm256_set1_pd(b);
    const __m256d tiny = _mm256_set1_pd(kTiny);
    __m256d acc = _mm256_setzero_pd();
    std::size_t i = 0, n = x.size();
    for (; i + 4 <= n; i += 4) {
        __m256d f = _mm256_fmadd_pd(va, _mm256_loadu_pd(x.data() + i),
                                    _mm256_mul_pd(vb, _mm256_loadu_pd(y.data() + i)));
        __m256d mask = _mm256_cmp_pd(f, tiny, _CMP_GT_OQ);
        __m256d safe = _mm256_blendv_pd(_mm256_set1_pd(1.0), f, mask);
        __m256d term = _mm256_mul_pd(f, log2_pd(safe));
        acc = _mm256_add_pd(acc, _mm256_and_pd(term, mask));
    }
    double s = hsum(acc);
    for (; i < n; ++i) {
        double f = a * x[i] + b * y[i];
        if (f > kTiny) s += f * std::log2(f);
    }
    return s;
}

#endif  // EPRSTEER_X86

}  // namespace

void set_backend(Backend b) {
    g_env_checked = true;  // explicit call overrides the env var
    g_requested = b;
}

Backend active_backend() {
    return use_avx2() ? Backend::Avx2 : Backend::Scalar;
}

std::string backend_name() {
    return active_backend() == Backend::Avx2 ? "avx2" : "scalar";
}

Moments moments(std::span<const double> x) {
#if EPRSTEER_X86
    if (use_avx2()) return moments_avx2(x);
#endif
    return moments_scalar(x);
}

Moments pair_moments(std::span<const double> a, std::span<const double> b,
                     double sign) {
#if EPRSTEER_X86
    if (use_avx2()) return pair_moments_avx2(a, b, sign);
#endif
    return pair_moments_scalar(a, b, sign);
}

double xlog2x_sum(std::span<const double> x) {
#if EPRSTEER_X86
    if (use_avx2()) return xlog2x_sum_avx2(x);
#endif
    return xlog2x_sum_scalar(x);
}

double mix_xlog2x_sum(double a, std::span<const double> x,
                      double b, std::span<const double> y) {
#if EPRSTEER_X86
    if (use_avx2()) return mix_xlog2x_sum_avx2(a, x, b, y);
#endif
    return mix_xlog2x_sum_scalar(a, x, b, y);
}

}  // namespace eprsteer::kernels
