#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include "eprsteer/biphoton.hpp"
#include "eprsteer/coincidence.hpp"
#include "eprsteer/errors.hpp"
#include "eprsteer/witness.hpp"

using namespace eprsteer;

namespace {

ErrorCategory category_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.category();
    }
    FAIL("expected an eprsteer::Error");
    return ErrorCategory::Input;
}

ConditionalEntropy fake_cond(Estimator est, double bits, double sigma) {
    ConditionalEntropy c;
    c.estimator = est;
    c.bits = bits;
    c.sigma_bits = sigma;
    return c;
}

}  // namespace

TEST_CASE("the two entropic margins are a fixed distance apart") {
    CHECK(eof_gap_bits() == doctest::Approx(1.0 / std::numbers::ln2 - 1.0).epsilon(1e-15));
    CHECK(eof_gap_bits() == doctest::Approx(0.4427).epsilon(1e-4));

    CellBound b = cell_bound(3.875, 4.86946861);
    for (double sig : {7.0, 8.822, 9.5}) {
        EntropicWitness w = entropic_witness(fake_cond(Estimator::Nsb, sig / 2, 0.02),
                                             fake_cond(Estimator::Nsb, sig / 2, 0.03), b);
        CHECK(std::abs((w.delta_i_bits - w.eof_bits) - eof_gap_bits()) < 1e-12);
    }
    CHECK(std::abs((b.steering_bits - b.eof_bits) - eof_gap_bits()) < 1e-12);
}

TEST_CASE("cell bound at the experimental cells") {
    CalibratedCell cell = calibration_cells(31.0, 8.0, 800.0, 50.0);
    CellBound b = cell_bound(cell.dx_um, cell.dk_per_mm);

    CHECK(b.product == doctest::Approx(3.875e-3 * 4.86946861).epsilon(1e-9));
    CHECK(b.steering_bits == doctest::Approx(8.822).epsilon(2e-4));
    CHECK(b.eof_bits == doctest::Approx(8.822 - 0.4427).epsilon(2e-4));
    CHECK_FALSE(b.vacuous);
    CHECK(b.sigma_bits == 0.0);
}

TEST_CASE("calibration uncertainty widens the band but never moves the center") {
    CellBound plain = cell_bound(3.875, 4.86946861);
    CellBound wide = cell_bound(3.875, 4.86946861, 0.01, 0.02);

    CHECK(wide.steering_bits == plain.steering_bits);
    CHECK(wide.eof_bits == plain.eof_bits);
    CHECK(wide.sigma_bits ==
          doctest::Approx(std::hypot(0.01, 0.02) / std::numbers::ln2).epsilon(1e-12));

    EntropicWitness wp = entropic_witness(fake_cond(Estimator::Pym, 3.9, 0.05),
                                          fake_cond(Estimator::Pym, 3.9, 0.05), plain);
    EntropicWitness ww = entropic_witness(fake_cond(Estimator::Pym, 3.9, 0.05),
                                          fake_cond(Estimator::Pym, 3.9, 0.05), wide);
    CHECK(ww.delta_i_bits == wp.delta_i_bits);
    CHECK(ww.delta_i_sigma > wp.delta_i_sigma);
    CHECK(ww.steering_significance < wp.steering_significance);

    CHECK(category_of([] { cell_bound(3.875, 4.87, -0.01, 0.0); }) ==
          ErrorCategory::Input);
}

TEST_CASE("a bound beyond the entropic limit is reported vacuous, not thrown") {
    // Δx·Δk = 10 > πe: no conditional entropy can ever dip below the bound
    CellBound b = cell_bound(1000.0, 10.0);
    CHECK(b.vacuous);
    CHECK(b.steering_bits < 0.0);

    EntropicWitness w = entropic_witness(fake_cond(Estimator::Plugin, 1.0, 0.01),
                                         fake_cond(Estimator::Plugin, 1.0, 0.01), b);
    CHECK(w.vacuous);
    CHECK(w.delta_i_bits < 0.0);
}

TEST_CASE("witness assembly, monotonicity, and estimator mixing") {
    CellBound b = cell_bound(3.875, 4.86946861);
    EntropicWitness w = entropic_witness(fake_cond(Estimator::Nsb, 4.0, 0.03),
                                         fake_cond(Estimator::Nsb, 3.8, 0.04), b);

    CHECK(w.estimator == Estimator::Nsb);
    CHECK(w.sigma_h_bits == doctest::Approx(7.8).epsilon(1e-12));
    CHECK(w.sigma_h_sigma == doctest::Approx(std::hypot(0.03, 0.04)).epsilon(1e-12));
    CHECK(w.delta_i_bits == doctest::Approx(b.steering_bits - 7.8).epsilon(1e-12));
    CHECK(w.delta_i_sigma == doctest::Approx(w.sigma_h_sigma).epsilon(1e-12));
    CHECK(w.steering_significance ==
          doctest::Approx(w.delta_i_bits / w.delta_i_sigma).epsilon(1e-12));
    CHECK_FALSE(w.eof_was_capped);

    // lower Σ_H must strictly raise both margins
    EntropicWitness lower = entropic_witness(fake_cond(Estimator::Nsb, 3.5, 0.03),
                                             fake_cond(Estimator::Nsb, 3.8, 0.04), b);
    CHECK(lower.delta_i_bits > w.delta_i_bits);
    CHECK(lower.eof_bits > w.eof_bits);

    CHECK(category_of([&] {
              entropic_witness(fake_cond(Estimator::Nsb, 4.0, 0.03),
                               fake_cond(Estimator::Pym, 3.8, 0.04), b);
          }) == ErrorCategory::Input);
}

TEST_CASE("eof lower bound is capped at the mode budget") {
    BiphotonState s{6.25, 7.75, 1.0};
    double cap = eof_cap(s);
    CHECK(cap == doctest::Approx(std::log2(schmidt_number(s))).epsilon(1e-15));
    CHECK(cap == doctest::Approx(3.3711).epsilon(1e-4));

    CellBound b = cell_bound(3.875, 4.86946861);
    EntropicWitness w = entropic_witness(fake_cond(Estimator::Ml, 1.0, 0.02),
                                         fake_cond(Estimator::Ml, 1.0, 0.02), b, cap);
    REQUIRE(w.eof_bits > cap);  // uncapped margin exceeds what K modes can carry
    CHECK(w.eof_was_capped);
    CHECK(w.eof_capped_bits == cap);

    // cap untouched when the margin is small
    EntropicWitness small = entropic_witness(fake_cond(Estimator::Ml, 4.0, 0.02),
                                             fake_cond(Estimator::Ml, 4.0, 0.02), b, cap);
    CHECK_FALSE(small.eof_was_capped);
    CHECK(small.eof_capped_bits == small.eof_bits);
}

TEST_CASE("eof cap closed forms") {
    // K = 1 at σκ = 1 (round state), one ebit at K = 2
    CHECK(eof_cap(BiphotonState{1000.0, 1.0, 1.0}) == doctest::Approx(0.0).epsilon(1e-12));
    double t = sigma_kappa_from_schmidt(2.0);
    CHECK(eof_cap(BiphotonState{1000.0 * t, 1.0, 1.0}) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("empirical variance product matches the analytic mixture value") {
    const std::size_t n = 100000;

    // pure state: deep in the steering region
    BiphotonState pure{6.25, 7.75, 1.0};
    auto pos = sample_pairs(pure, Basis::Position, n, 11);
    auto mom = sample_pairs(pure, Basis::Momentum, n, 12);
    ReidWitness w = reid_witness_empirical(pos, mom, 100);
    VarianceWitnessValue expect = variance_witness_analytic(pure);

    CHECK(w.n_position == std::int64_t(n));
    CHECK(w.n_momentum == std::int64_t(n));
    CHECK(w.pi_sigma > 0.0);
    CHECK(std::abs(w.pi - expect.pi) < 4.0 * w.pi_sigma);
    CHECK(w.significance > 100.0);  // (1/4 − Π)/σ with Π ≈ 2.35e-3

    // pure accidentals: Π ≈ K², nowhere near certification
    BiphotonState acc{6.25, 7.75, 0.0};
    ReidWitness wa = reid_witness_empirical(sample_pairs(acc, Basis::Position, n, 13),
                                            sample_pairs(acc, Basis::Momentum, n, 14), 100);
    VarianceWitnessValue ea = variance_witness_analytic(acc);
    double k = schmidt_number(acc);
    CHECK(ea.pi == doctest::Approx(k * k).epsilon(1e-9));
    CHECK(std::abs(wa.pi - ea.pi) < 4.0 * wa.pi_sigma);
    CHECK(wa.significance < 0.0);

    // same inputs, same seed: bootstrap is reproducible
    ReidWitness w2 = reid_witness_empirical(pos, mom, 100);
    CHECK(w2.pi == w.pi);
    CHECK(w2.pi_sigma == w.pi_sigma);
}

TEST_CASE("variance witness degenerate inputs") {
    CoincidenceEvent e{1.0, 2.0, 0.5, -0.5, true};
    std::vector<CoincidenceEvent> same(5, e);
    ReidWitness w = reid_witness_empirical(same, same, 50);
    CHECK(w.pi == 0.0);
    CHECK(w.significance == 0.0);

    std::vector<CoincidenceEvent> one(1, e);
    CHECK(category_of([&] { reid_witness_empirical(one, same, 50); }) ==
          ErrorCategory::Input);
    CHECK(category_of([&] { reid_witness_empirical(same, one, 50); }) ==
          ErrorCategory::Input);
}

TEST_CASE("analysis report: assembly, reid presence, failure capture") {
    BiphotonState s{6.25, 7.75, 0.9};
    GridSpec gx = GridSpec::centered(3.875, 100);
    GridSpec gk = GridSpec::centered(4.86946861, 100);
    auto pos = sample_pairs(s, Basis::Position, 5000, 21);
    auto mom = sample_pairs(s, Basis::Momentum, 5000, 22);
    JointHistogram hp = bin_events(pos, Basis::Position, gx, gx);
    JointHistogram hm = bin_events(mom, Basis::Momentum, gk, gk);

    AnalysisOptions opts;
    opts.estimators = {Estimator::Plugin, Estimator::Ml};
    opts.bound = cell_bound(3.875, 4.86946861);
    opts.eof_cap_bits = eof_cap(s);
    opts.reid_resamples = 50;

    WitnessReport rep = run_witness_analysis(hp, hm, &pos, &mom, opts);
    REQUIRE(rep.entropic.size() == 2);
    REQUIRE(rep.conditional_pos.size() == 2);
    REQUIRE(rep.conditional_mom.size() == 2);
    CHECK(rep.failures.empty());
    for (std::size_t i = 0; i < rep.entropic.size(); ++i) {
        const EntropicWitness& w = rep.entropic[i];
        CHECK(w.estimator == opts.estimators[i]);
        CHECK(w.sigma_h_bits == doctest::Approx(rep.conditional_pos[i].bits +
                                                rep.conditional_mom[i].bits).epsilon(1e-12));
        CHECK(w.delta_i_bits == doctest::Approx(opts.bound.steering_bits -
                                                w.sigma_h_bits).epsilon(1e-12));
    }
    CHECK(rep.have_reid);
    CHECK(rep.reid.n_position == 5000);

    // histogram-only path: the variance witness is skipped, not failed
    WitnessReport no_events = run_witness_analysis(hp, hm, nullptr, nullptr, opts);
    CHECK_FALSE(no_events.have_reid);
    CHECK(no_events.failures.empty());

    // an estimator that cannot run is recorded and the rest still complete
    std::vector<CoincidenceEvent> few(pos.begin(), pos.begin() + 3);
    JointHistogram tiny_p = bin_events(few, Basis::Position, gx, gx);
    std::vector<CoincidenceEvent> few_m(mom.begin(), mom.begin() + 3);
    JointHistogram tiny_m = bin_events(few_m, Basis::Momentum, gk, gk);
    AnalysisOptions opts2 = opts;
    opts2.estimators = {Estimator::Plugin, Estimator::Pym};
    WitnessReport broken = run_witness_analysis(tiny_p, tiny_m, nullptr, nullptr, opts2);
    CHECK(broken.entropic.size() == 1);
    REQUIRE(broken.failures.size() == 1);
    CHECK(broken.failures[0].first == std::string("pym"));
    CHECK_FALSE(broken.failures[0].second.empty());
}

TEST_CASE("nsb support sensitivity is reported on request") {
    BiphotonState s{6.25, 7.75, 0.8};
    GridSpec gx = GridSpec::centered(3.875, 100);
    GridSpec gk = GridSpec::centered(4.86946861, 100);
    auto pos = sample_pairs(s, Basis::Position, 3000, 31);
    auto mom = sample_pairs(s, Basis::Momentum, 3000, 32);
    JointHistogram hp = bin_events(pos, Basis::Position, gx, gx);
    JointHistogram hm = bin_events(mom, Basis::Momentum, gk, gk);

    AnalysisOptions opts;
    opts.estimators = {Estimator::Plugin};
    opts.bound = cell_bound(3.875, 4.86946861);
    opts.nsb_support_sensitivity = true;

    WitnessReport rep = run_witness_analysis(hp, hm, nullptr, nullptr, opts);
    REQUIRE(rep.have_nsb_sensitivity);
    // assuming the full grid instead of only the occupied cells can only push
    // the Bayesian estimate up
    CHECK(rep.nsb_support_sensitivity_bits > 0.0);
    CHECK(rep.nsb_support_sensitivity_bits < 2.0);

    AnalysisOptions quiet = opts;
    quiet.nsb_support_sensitivity = false;
    CHECK_FALSE(run_witness_analysis(hp, hm, nullptr, nullptr, quiet).have_nsb_sensitivity);
}

TEST_CASE("all estimators agree at the extremes of source purity") {
    GridSpec gx = GridSpec::centered(3.875, 100);
    GridSpec gk = GridSpec::centered(4.86946861, 100);
    AnalysisOptions opts;
    opts.estimators = {Estimator::Plugin, Estimator::Nsb, Estimator::Pym, Estimator::Ml};
    opts.bound = cell_bound(3.875, 4.86946861);

    // a clean source with 10^5 coincidences certifies under every estimator
    BiphotonState pure{6.25, 7.75, 1.0};
    auto pp = sample_pairs(pure, Basis::Position, 100000, 41);
    auto pm = sample_pairs(pure, Basis::Momentum, 100000, 42);
    WitnessReport clean = run_witness_analysis(bin_events(pp, Basis::Position, gx, gx),
                                               bin_events(pm, Basis::Momentum, gk, gk),
                                               nullptr, nullptr, opts);
    REQUIRE(clean.entropic.size() == 4);
    for (const EntropicWitness& w : clean.entropic) {
        CHECK(w.delta_i_bits > 0.0);
        CHECK(w.steering_significance > 3.0);
    }

    // pure accidentals: nobody certifies, however much data
    BiphotonState acc{6.25, 7.75, 0.0};
    auto ap = sample_pairs(acc, Basis::Position, 100000, 43);
    auto am = sample_pairs(acc, Basis::Momentum, 100000, 44);
    WitnessReport noise = run_witness_analysis(bin_events(ap, Basis::Position, gx, gx),
                                               bin_events(am, Basis::Momentum, gk, gk),
                                               nullptr, nullptr, opts);
    REQUIRE(noise.entropic.size() == 4);
    for (const EntropicWitness& w : noise.entropic) CHECK(w.delta_i_bits < 0.0);
}
