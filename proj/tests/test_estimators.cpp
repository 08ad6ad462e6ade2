#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "eprsteer/biphoton.hpp"
#include "eprsteer/coincidence.hpp"
#include "eprsteer/errors.hpp"
#include "eprsteer/estimators.hpp"

using namespace eprsteer;

namespace {

struct McMoments {
    double mean = 0.0;
    double second = 0.0;
    double se_mean = 0.0;
    double se_second = 0.0;
};

// accumulate E[H], E[H²] and their standard errors from per-replica samples
McMoments mc_moments(const std::vector<double>& h) {
    McMoments m;
    double n = double(h.size());
    double s1 = 0.0, s2 = 0.0, s3 = 0.0, s4 = 0.0;
    for (double x : h) {
        s1 += x;
        s2 += x * x;
        s3 += x * x * x;
        s4 += x * x * x * x;
    }
    m.mean = s1 / n;
    m.second = s2 / n;
    double var_h = s2 / n - m.mean * m.mean;
    double var_h2 = s4 / n - m.second * m.second;
    m.se_mean = std::sqrt(std::max(var_h, 0.0) / n);
    m.se_second = std::sqrt(std::max(var_h2, 0.0) / n);
    return m;
}

// H(B|A) in bits of the renormalized cell-probability matrix
double conditional_bits_from_probs(const std::vector<double>& p, std::size_t na,
                                   std::size_t nb) {
    double mass = std::accumulate(p.begin(), p.end(), 0.0);
    double h_joint = 0.0, h_marg = 0.0;
    for (std::size_t ia = 0; ia < na; ++ia) {
        double row = 0.0;
        for (std::size_t ib = 0; ib < nb; ++ib) {
            double q = p[ia * nb + ib] / mass;
            row += q;
            if (q > 0.0) h_joint -= q * std::log2(q);
        }
        if (row > 0.0) h_marg -= row * std::log2(row);
    }
    return h_joint - h_marg;
}

ErrorCategory category_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.category();
    }
    FAIL("expected an eprsteer::Error");
    return ErrorCategory::Input;
}

}  // namespace

TEST_CASE("estimator names round trip") {
    for (Estimator e : {Estimator::Plugin, Estimator::Nsb, Estimator::Pym, Estimator::Ml})
        CHECK(estimator_from_name(estimator_name(e)) == e);
    CHECK(category_of([] { estimator_from_name("bayes"); }) == ErrorCategory::Format);
}

TEST_CASE("plugin entropy matches hand-computed values") {
    PluginOptions no_boot;
    no_boot.resamples = 0;

    std::vector<std::int64_t> uniform4 = {1, 1, 1, 1};
    EntropyEstimate e = plugin_entropy(uniform4, no_boot);
    CHECK(e.bits == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(e.sigma_bits == 0.0);
    CHECK(e.n_samples == 4);
    CHECK(e.support == 4);
    CHECK(e.estimator == Estimator::Plugin);

    std::vector<std::int64_t> two = {2, 0, 2};  // zeros are ignored
    CHECK(plugin_entropy(two, no_boot).bits == doctest::Approx(1.0).epsilon(1e-15));

    std::vector<std::int64_t> one = {0, 4, 0};
    CHECK(plugin_entropy(one, no_boot).bits == doctest::Approx(0.0));

    // H = 2 − (3·log2 3)/4 for counts (3,1)
    std::vector<std::int64_t> skew = {3, 1};
    double expect = 2.0 - 3.0 * std::log2(3.0) / 4.0;
    CHECK(plugin_entropy(skew, no_boot).bits == doctest::Approx(expect).epsilon(1e-14));

    std::vector<std::int64_t> empty = {0, 0};
    CHECK(category_of([&] { plugin_entropy(empty, no_boot); }) == ErrorCategory::Input);
    std::vector<std::int64_t> neg = {3, -1};
    CHECK(category_of([&] { plugin_entropy(neg, no_boot); }) == ErrorCategory::Input);
}

TEST_CASE("plugin bootstrap is deterministic in the seed and shrinks with N") {
    std::vector<std::int64_t> counts = {40, 25, 12, 9, 6, 5, 2, 1};

    PluginOptions a;
    a.resamples = 300;
    a.seed = 123;
    EntropyEstimate e1 = plugin_entropy(counts, a);
    EntropyEstimate e2 = plugin_entropy(counts, a);
    CHECK(e1.bits == e2.bits);
    CHECK(e1.sigma_bits == e2.sigma_bits);
    CHECK(e1.sigma_bits > 0.0);

    PluginOptions b = a;
    b.seed = 124;
    CHECK(plugin_entropy(counts, b).sigma_bits != e1.sigma_bits);

    // the multinomial-bootstrap spread should scale roughly like 1/√N
    std::vector<std::int64_t> big = counts;
    for (std::int64_t& c : big) c *= 100;
    double s_small = e1.sigma_bits;
    double s_big = plugin_entropy(big, a).sigma_bits;
    CHECK(s_big < s_small / 5.0);
    CHECK(s_big > s_small / 20.0);
}

TEST_CASE("lgamma_diff agrees with direct evaluation and a long-double oracle") {
    // small arguments: the naive difference is exact enough to compare against
    for (double x : {0.7, 3.7, 42.0, 9.9e5}) {
        for (double d : {0.25, 2.0, 17.0}) {
            double direct = std::lgamma(x + d) - std::lgamma(x);
            CHECK(detail::lgamma_diff(x, d) ==
                  doctest::Approx(direct).epsilon(1e-11));
        }
    }
    CHECK(detail::lgamma_diff(3.0, 0.0) == 0.0);

    // large arguments: a long-double oracle still cancels ~|lgamma(x)|·2^-64
    // absolute digits, so the tolerance has to track that floor
    for (double x : {9.9e7, 1.01e8, 1e10, 3e12}) {
        long double lx = std::lgamma(static_cast<long double>(x));
        for (double d : {0.5, 137.0, 4096.0}) {
            double ref = double(std::lgamma(static_cast<long double>(x) +
                                            static_cast<long double>(d)) - lx);
            double tol = std::max(2e-9 * std::abs(ref), double(lx) * 1e-18);
            CAPTURE(x);
            CAPTURE(d);
            CHECK(std::abs(detail::lgamma_diff(x, d) - ref) <= tol);
        }
    }
}

TEST_CASE("Dirichlet posterior entropy moments match gamma-sampling Monte Carlo") {
    struct Cfg {
        std::vector<std::int64_t> counts;
        std::size_t n_bins;
        double beta;
    };
    // second case has no empty cells, third is dominated by the prior
    std::vector<Cfg> cfgs = {
        {{7, 3, 1, 1}, 12, 0.35},
        {{5, 4, 2, 2, 1}, 5, 1.0},
        {{2, 1}, 40, 0.08},
    };

    std::mt19937_64 gen(20260823ULL);
    for (const Cfg& cfg : cfgs) {
        CAPTURE(cfg.n_bins);
        CAPTURE(cfg.beta);
        detail::PosteriorEntropyMoments pm =
            detail::dirichlet_posterior_entropy(cfg.counts, cfg.n_bins, cfg.beta);

        std::vector<double> a(cfg.n_bins, cfg.beta);
        for (std::size_t i = 0; i < cfg.counts.size(); ++i) a[i] += double(cfg.counts[i]);

        const std::size_t reps = 200000;
        std::vector<double> hs(reps);
        std::vector<double> g(cfg.n_bins);
        for (std::size_t r = 0; r < reps; ++r) {
            double tot = 0.0;
            for (std::size_t i = 0; i < cfg.n_bins; ++i) {
                std::gamma_distribution<double> gd(a[i], 1.0);
                g[i] = gd(gen);
                tot += g[i];
            }
            double h = 0.0;
            for (std::size_t i = 0; i < cfg.n_bins; ++i) {
                double p = g[i] / tot;
                if (p > 0.0) h -= p * std::log(p);
            }
            hs[r] = h;
        }
        McMoments mc = mc_moments(hs);

        CHECK(std::abs(pm.mean_nats - mc.mean) < 5.0 * mc.se_mean + 1e-12);
        CHECK(std::abs(pm.second_nats2 - mc.second) < 5.0 * mc.se_second + 1e-12);
        CHECK(pm.second_nats2 - pm.mean_nats * pm.mean_nats >= -1e-12);
    }

    // huge concentration pins the distribution at uniform
    std::vector<std::int64_t> none(16, 0);
    detail::PosteriorEntropyMoments flat =
        detail::dirichlet_posterior_entropy(none, 16, 1e7);
    CHECK(flat.mean_nats == doctest::Approx(std::log(16.0)).epsilon(1e-6));
    CHECK(flat.second_nats2 - flat.mean_nats * flat.mean_nats ==
          doctest::Approx(0.0).epsilon(1e-9));

    std::vector<std::int64_t> three = {1, 1, 1};
    CHECK(category_of([&] { detail::dirichlet_posterior_entropy(three, 2, 0.5); }) ==
          ErrorCategory::Input);
    CHECK(category_of([&] { detail::dirichlet_posterior_entropy(three, 4, 0.0); }) ==
          ErrorCategory::Domain);
}

TEST_CASE("Pitman-Yor prior entropy moments match stick-breaking Monte Carlo") {
    struct Cfg {
        double d, b;
        std::size_t reps;
        double trunc;
    };
    // heavier discounts give power-law sticks, so truncate earlier and
    // accept the coarser (still ~1e-7) tail bias
    std::vector<Cfg> cfgs = {
        {0.0, 2.0, 30000, 1e-10},
        {0.15, 1.5, 30000, 1e-10},
        {0.3, 0.8, 12000, 1e-8},
    };

    std::mt19937_64 gen(99120ULL);
    for (const Cfg& cfg : cfgs) {
        CAPTURE(cfg.d);
        CAPTURE(cfg.b);
        double mean = detail::py_prior_entropy_mean(cfg.d, cfg.b);
        double second = detail::py_prior_entropy_second(cfg.d, cfg.b);
        CHECK(second - mean * mean > 0.0);

        std::vector<double> hs(cfg.reps);
        for (std::size_t r = 0; r < cfg.reps; ++r) {
            double h = 0.0, mass = 1.0;
            int k = 1;
            while (mass > cfg.trunc && k < 200000) {
                std::gamma_distribution<double> ga(1.0 - cfg.d, 1.0);
                std::gamma_distribution<double> gb(cfg.b + double(k) * cfg.d, 1.0);
                double x = ga(gen), y = gb(gen);
                double v = x / (x + y);
                double p = mass * v;
                if (p > 0.0) h -= p * std::log(p);
                mass *= 1.0 - v;
                ++k;
            }
            hs[r] = h;
        }
        McMoments mc = mc_moments(hs);

        CHECK(std::abs(mean - mc.mean) < 5.0 * mc.se_mean + 1e-6);
        CHECK(std::abs(second - mc.second) < 5.0 * mc.se_second + 1e-6);
    }
}

TEST_CASE("nsb recovers abundant uniform data") {
    std::vector<std::int64_t> counts(64, 1000);
    EntropyEstimate e = nsb_entropy(counts, 64);
    CHECK(e.bits == doctest::Approx(6.0).epsilon(2e-3));
    CHECK(e.sigma_bits < 0.02);
    CHECK(e.sigma_bits > 0.0);
    CHECK(e.support == 64);
    CHECK(e.n_samples == 64000);
}

TEST_CASE("nsb corrects the plugin undersampling bias on a known support") {
    // 256 draws from a uniform over 1024 bins: plugin cannot even reach
    // log2(256) = 8 bits while the true entropy is 10
    std::mt19937_64 gen(31337ULL);
    std::uniform_int_distribution<std::size_t> bin(0, 1023);
    std::vector<std::int64_t> counts(1024, 0);
    for (int i = 0; i < 256; ++i) ++counts[bin(gen)];

    PluginOptions no_boot;
    no_boot.resamples = 0;
    double plug = plugin_entropy(counts, no_boot).bits;
    CHECK(plug < 8.0);

    EntropyEstimate e = nsb_entropy(counts, 1024);
    CHECK(std::abs(e.bits - 10.0) < std::abs(plug - 10.0) / 4.0);
    CHECK(std::abs(e.bits - 10.0) < 0.5);
    CHECK(e.sigma_bits > 0.0);
    // posterior spread should be consistent with the actual miss
    CHECK(std::abs(e.bits - 10.0) < 6.0 * e.sigma_bits);
}

TEST_CASE("nsb input validation") {
    std::vector<std::int64_t> c = {3, 2, 1};
    CHECK(category_of([&] { nsb_entropy(c, 1); }) == ErrorCategory::Input);
    CHECK(category_of([&] { nsb_entropy(c, 2); }) == ErrorCategory::Input);
    std::vector<std::int64_t> empty(8, 0);
    CHECK(category_of([&] { nsb_entropy(empty, 8); }) == ErrorCategory::Input);
}

TEST_CASE("pym recovers abundant uniform data without knowing the support") {
    std::vector<std::int64_t> counts(64, 1000);
    EntropyEstimate e = pym_entropy(counts);
    CHECK(e.bits == doctest::Approx(6.0).epsilon(5e-3));
    CHECK(e.sigma_bits < 0.05);
    CHECK(e.support == 0);
}

TEST_CASE("pym counteracts the plugin bias and covers the truth when undersampled") {
    std::mt19937_64 gen(4242ULL);
    std::uniform_int_distribution<std::size_t> bin(0, 1023);
    std::vector<std::int64_t> counts(1024, 0);
    for (int i = 0; i < 256; ++i) ++counts[bin(gen)];

    PluginOptions no_boot;
    no_boot.resamples = 0;
    double plug = plugin_entropy(counts, no_boot).bits;
    CHECK(plug < 8.1);  // severely biased down from the true 10 bits

    // With 256 draws in 1024 bins the point estimate cannot be sharp; what we
    // require is that the posterior pushes hard against the plugin bias, covers
    // the truth, and owns up to its spread instead of reporting false precision.
    EntropyEstimate e = pym_entropy(counts);
    CHECK(e.bits > plug + 0.5);
    CHECK(std::abs(e.bits - 10.0) <= 3.0 * e.sigma_bits);
    CHECK(e.sigma_bits > 0.3);
    CHECK(e.sigma_bits < 3.0);
}

TEST_CASE("pym rejects an all-singleton histogram") {
    std::vector<std::int64_t> singles(50, 1);
    CHECK(category_of([&] { pym_entropy(singles); }) == ErrorCategory::Accuracy);
}

TEST_CASE("ml conditional entropy recovers the parametric truth") {
    BiphotonState s{6.25, 7.75, 0.7};
    CalibratedCell cell = calibration_cells(31.0, 8.0, 800.0, 50.0);

    auto run_basis = [&](Basis basis, double delta) {
        GridSpec grid = GridSpec::centered(delta, 100);
        std::vector<CoincidenceEvent> ev = sample_pairs(s, basis, 200000, 77);
        JointHistogram hist = bin_events(ev, basis, grid, grid);

        std::vector<double> probs = cell_probabilities(s, basis, grid, grid);
        double truth = conditional_bits_from_probs(probs, grid.count, grid.count);

        // The fitted model carries a flat accidental floor while the source's
        // accidentals are a wide Gaussian, so at 30% accidentals the estimate
        // sits above the truth by a bounded model-mismatch offset.
        ConditionalEntropy ce = conditional_entropy(hist, Estimator::Ml);
        CAPTURE(basis_name(basis));
        CHECK(ce.bits > truth);
        CHECK(ce.bits - truth < 0.45);
        CHECK(ce.sigma_bits > 0.0);
        CHECK(ce.sigma_bits < 0.1);
        return hist;
    };

    JointHistogram pos = run_basis(Basis::Position, cell.dx_um);
    run_basis(Basis::Momentum, cell.dk_per_mm);

    // the joint fit should also recover the physical widths and the
    // correlated amplitude
    MlFit fit;
    ml_entropy(pos, MlOptions{}, &fit);
    CHECK(fit.cond_width == doctest::Approx(6.25).epsilon(0.05));
    CHECK(fit.beta > 0.0);  // q<1 leaves a real accidental floor

    // alpha estimates the correlated counts that landed inside the grid
    std::int64_t corr_in = 0;
    {
        std::vector<CoincidenceEvent> ev = sample_pairs(s, Basis::Position, 200000, 77);
        GridSpec grid = GridSpec::centered(cell.dx_um, 100);
        double lo = grid.origin, hi = grid.origin + grid.delta * double(grid.count);
        for (const CoincidenceEvent& e : ev)
            if (e.correlated && e.ax >= lo && e.ax < hi && e.bx >= lo && e.bx < hi)
                ++corr_in;
    }
    CHECK(fit.alpha == doctest::Approx(double(corr_in)).epsilon(0.15));

    // with few accidentals the parametric form matches the source and the
    // estimate converges onto the exact cell-probability entropy
    BiphotonState pure{6.25, 7.75, 0.95};
    GridSpec grid = GridSpec::centered(cell.dx_um, 100);
    std::vector<CoincidenceEvent> ev = sample_pairs(pure, Basis::Position, 200000, 77);
    JointHistogram hist = bin_events(ev, Basis::Position, grid, grid);
    std::vector<double> probs = cell_probabilities(pure, Basis::Position, grid, grid);
    double truth = conditional_bits_from_probs(probs, grid.count, grid.count);
    CHECK(std::abs(conditional_entropy(hist, Estimator::Ml).bits - truth) < 0.1);
}

TEST_CASE("ml 1-d estimate reproduces a discretized Gaussian marginal") {
    GridSpec grid = GridSpec::centered(3.875, 100);
    double mu = 3.2, sd = 27.0, n = 500000.0;

    std::vector<std::int64_t> counts(grid.count);
    std::vector<double> probs(grid.count);
    double mass = 0.0;
    for (std::size_t i = 0; i < grid.count; ++i) {
        double lo = (grid.low_edge(i) - mu) / (sd * std::sqrt(2.0));
        double hi = (grid.low_edge(i) + grid.delta - mu) / (sd * std::sqrt(2.0));
        probs[i] = 0.5 * (std::erf(hi) - std::erf(lo));
        counts[i] = std::llround(n * probs[i]);
        mass += probs[i];
    }
    double h_true = 0.0;
    for (double p : probs) {
        double q = p / mass;
        if (q > 0.0) h_true -= q * std::log2(q);
    }

    MlFit fit;
    EntropyEstimate e = ml_entropy_1d(counts, grid, MlOptions{}, &fit);
    CHECK(fit.center_a == doctest::Approx(mu).epsilon(0.01));
    CHECK(fit.marg_width == doctest::Approx(sd).epsilon(0.01));
    CHECK(e.bits == doctest::Approx(h_true).epsilon(0.005));
}

TEST_CASE("conditional entropy combines joint and marginal estimates") {
    // correlated-ish handmade table with repeated counts so every estimator
    // accepts it
    GridSpec g = GridSpec::centered(1.0, 4);
    JointHistogram hist;
    hist.basis = Basis::Position;
    hist.axis_a = g;
    hist.axis_b = g;
    hist.counts = {9, 3, 1, 0,   //
                   3, 9, 3, 1,   //
                   1, 3, 9, 3,   //
                   0, 1, 3, 9};
    for (std::int64_t c : hist.counts) hist.n_total += c;

    for (Estimator est : {Estimator::Plugin, Estimator::Nsb, Estimator::Pym}) {
        CAPTURE(estimator_name(est));
        ConditionalEntropy ce = conditional_entropy(hist, est);
        CHECK(ce.estimator == est);
        CHECK(ce.joint.estimator == est);
        CHECK(ce.bits == ce.joint.bits - ce.marginal.bits);
        CHECK(ce.sigma_bits == std::hypot(ce.joint.sigma_bits, ce.marginal.sigma_bits));
        CHECK(ce.joint.bits > ce.marginal.bits);  // 16 cells vs 4
    }
}
