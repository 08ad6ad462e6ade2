#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numbers>
#include <vector>

#include "eprsteer/coincidence.hpp"
#include "eprsteer/errors.hpp"

using namespace eprsteer;

namespace {

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / double(v.size());
}

double var_of(const std::vector<double>& v) {
    double m = mean_of(v), s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return s / double(v.size() - 1);
}

}  // namespace

TEST_CASE("sampler reproduces the mixture variances") {
    BiphotonState s{6.25, 7.75, 0.6};
    const std::size_t n = 400000;
    VarianceWitnessValue expect = variance_witness_analytic(s);

    auto pos = sample_pairs(s, Basis::Position, n, 42);
    REQUIRE(pos.size() == n);
    std::vector<double> diff(n), ax(n);
    for (std::size_t i = 0; i < n; ++i) {
        diff[i] = pos[i].bx - pos[i].ax;
        ax[i] = pos[i].ax;
    }
    // Var estimates have relative sd ~ sqrt(2/n + kurtosis corrections); the
    // mixture is heavy-tailed relative to one Gaussian, so allow 5 x that
    double vd = var_of(diff);
    CHECK(std::abs(vd - expect.var_diff_pos_um2) < 5.0 * expect.var_diff_pos_um2 * std::sqrt(2.0 / double(n)) * 3.0);
    RotatedWidths w = rotated_widths(s, Basis::Position);
    double va = var_of(ax);
    CHECK(std::abs(va - w.sd_acc * w.sd_acc) < 5.0 * w.sd_acc * w.sd_acc * std::sqrt(2.0 / double(n)));

    auto mom = sample_pairs(s, Basis::Momentum, n, 42);
    std::vector<double> sum(n);
    for (std::size_t i = 0; i < n; ++i) sum[i] = mom[i].bx + mom[i].ax;
    double vs = var_of(sum);
    CHECK(std::abs(vs - expect.var_sum_mom_mm2) < 5.0 * expect.var_sum_mom_mm2 * std::sqrt(2.0 / double(n)) * 3.0);

    // both transverse axes share the component draw, so the herald axis is
    // correlated in exactly the same way as the analyzed axis
    std::vector<double> diffy(n);
    for (std::size_t i = 0; i < n; ++i) diffy[i] = pos[i].by - pos[i].ay;
    CHECK(std::abs(var_of(diffy) - expect.var_diff_pos_um2) <
          5.0 * expect.var_diff_pos_um2 * std::sqrt(2.0 / double(n)) * 3.0);
}

TEST_CASE("sampling is deterministic in the seed") {
    BiphotonState s{6.25, 7.75, 0.5};
    auto a = sample_pairs(s, Basis::Position, 64, 7);
    auto b = sample_pairs(s, Basis::Position, 64, 7);
    auto c = sample_pairs(s, Basis::Position, 64, 8);
    REQUIRE(a.size() == b.size());
    bool identical = true, different = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        identical = identical && a[i].ax == b[i].ax && a[i].by == b[i].by;
        different = different || a[i].ax != c[i].ax;
    }
    CHECK(identical);
    CHECK(different);
}

TEST_CASE("herald keep fractions: closed form and enrichment") {
    BiphotonState s{6.25, 7.75, 0.5};
    double t = s.sigma_kappa();
    HeraldFractions hf = herald_keep_fractions(s, 2.0);
    CHECK(hf.corr == doctest::Approx(std::erf(std::sqrt(2.0))).epsilon(1e-12));
    // accidental difference sd is sqrt(2)*sd_acc = sqrt(1+t^2)/kappa, so the
    // erf argument is W*sigma*kappa / sqrt(1+t^2) = W*t/sqrt(1+t^2)
    CHECK(hf.acc == doctest::Approx(std::erf(2.0 * t / std::sqrt(1.0 + t * t))).epsilon(1e-12));
    CHECK(hf.overall == doctest::Approx(0.5 * hf.corr + 0.5 * hf.acc).epsilon(1e-12));
    CHECK(hf.q_eff == doctest::Approx(0.5 * hf.corr / hf.overall).epsilon(1e-12));
    CHECK(hf.q_eff > 0.85);  // the window strongly enriches the correlated part

    const std::size_t n = 300000;
    for (Basis basis : {Basis::Position, Basis::Momentum}) {
        auto events = sample_pairs(s, basis, n, 99);
        HeraldStats stats;
        auto kept = herald_postselect(s, basis, events, 2.0, &stats);
        CHECK(stats.kept + stats.rejected == n);
        CHECK(stats.kept == kept.size());
        double se = std::sqrt(hf.overall * (1.0 - hf.overall) / double(n));
        CHECK(std::abs(stats.kept_fraction() - hf.overall) < 5.0 * se);

        std::size_t corr = 0;
        for (const auto& e : kept)
            if (e.correlated) ++corr;
        double q_emp = double(corr) / double(kept.size());
        double se_q = std::sqrt(hf.q_eff * (1.0 - hf.q_eff) / double(kept.size()));
        CHECK(std::abs(q_emp - hf.q_eff) < 5.0 * se_q);
    }
}

TEST_CASE("an infinite herald window keeps everything") {
    BiphotonState s{6.25, 7.75, 0.2};
    auto events = sample_pairs(s, Basis::Momentum, 1000, 3);
    HeraldStats stats;
    auto kept = herald_postselect(s, Basis::Momentum,
                                  events, std::numeric_limits<double>::infinity(), &stats);
    CHECK(kept.size() == events.size());
    CHECK(stats.rejected == 0);
    HeraldFractions hf = herald_keep_fractions(s, std::numeric_limits<double>::infinity());
    CHECK(hf.overall == doctest::Approx(1.0));
    CHECK(hf.q_eff == doctest::Approx(0.2));
}

TEST_CASE("binning puts events into the right cells and tallies strays") {
    GridSpec ga = GridSpec::centered(1.0, 4);  // edges at -2,-1,0,1,2
    GridSpec gb = GridSpec::centered(2.0, 3);  // edges at -3,-1,1,3
    std::vector<CoincidenceEvent> events = {
        {-1.5, 0, -2.0, 0},  // a-cell 0, b-cell 0
        {0.5, 0, 0.0, 0},    // a-cell 2, b-cell 1
        {1.99, 0, 2.5, 0},   // a-cell 3, b-cell 2
        {2.01, 0, 0.0, 0},   // a out of range
        {0.0, 0, -3.5, 0},   // b out of range
    };
    JointHistogram h = bin_events(events, Basis::Position, ga, gb);
    CHECK(h.n_total == 3);
    CHECK(h.n_out_of_range == 2);
    CHECK(h.at(0, 0) == 1);
    CHECK(h.at(2, 1) == 1);
    CHECK(h.at(3, 2) == 1);
    auto ma = h.marginal_a();
    auto mb = h.marginal_b();
    CHECK(ma.size() == 4);
    CHECK(mb.size() == 3);
    CHECK(ma[0] + ma[1] + ma[2] + ma[3] == 3);
    CHECK(mb[0] == 1);
    CHECK(mb[1] == 1);
    CHECK(mb[2] == 1);
}

TEST_CASE("empirical cell occupancies follow the model probabilities") {
    BiphotonState s{6.25, 7.75, 0.8};
    const std::size_t n = 200000;
    GridSpec g = GridSpec::centered(7.75, 24);  // coarse grid, decent per-cell counts
    auto events = sample_pairs(s, Basis::Position, n, 1234);
    JointHistogram h = bin_events(events, Basis::Position, g, g);
    auto p = cell_probabilities(s, Basis::Position, g, g);
    double in_grid = 0.0;
    for (double v : p) in_grid += v;

    double tv = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        double expect = double(h.n_total) * p[i] / in_grid;
        double obs = double(h.counts[i]);
        tv += std::abs(obs / double(h.n_total) - p[i] / in_grid);
        if (expect >= 25.0) CHECK(std::abs(obs - expect) < 6.0 * std::sqrt(expect));
    }
    CHECK(0.5 * tv < 0.05);
    // in-grid fraction itself agrees
    double se = std::sqrt(in_grid * (1.0 - in_grid) / double(n));
    CHECK(std::abs(double(h.n_total) / double(n) - in_grid) < 5.0 * se + 1e-4);
}

TEST_CASE("optics calibration maps the camera cell to both bases") {
    CalibratedCell c = calibration_cells(31.0, 8.0, 800.0, 50.0);
    CHECK(c.dx_um == doctest::Approx(3.875).epsilon(1e-14));
    // 2 pi (31 um / M=1) / (lambda f): independent arithmetic in SI
    double dk_si = 2.0 * std::numbers::pi * 31e-6 / (800e-9 * 50e-3);
    CHECK(c.dk_per_mm == doctest::Approx(dk_si * 1e-3).epsilon(1e-12));
    CHECK(c.dk_per_mm == doctest::Approx(4.86946861).epsilon(1e-8));
    CHECK_THROWS_AS(calibration_cells(-1.0, 8.0, 800.0, 50.0), Error);
}
