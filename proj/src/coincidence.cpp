#include "eprsteer/coincidence.hpp"

#include <cmath>
#include <limits>

#include "eprsteer/rng.hpp"

namespace eprsteer {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;

// stream ids for seed derivation; keep stable across releases
constexpr std::uint64_t kStreamPosition = 0x706f73ULL;  // "pos"
constexpr std::uint64_t kStreamMomentum = 0x6d6f6dULL;  // "mom"

}  // namespace

std::vector<CoincidenceEvent> sample_pairs(const BiphotonState& s, Basis basis,
                                           std::size_t n, std::uint64_t seed) {
    s.validate();
    RotatedWidths w = rotated_widths(s, basis);
    Rng rng(seed, basis == Basis::Position ? kStreamPosition : kStreamMomentum);

    std::vector<CoincidenceEvent> events;
    events.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        CoincidenceEvent ev;
        ev.correlated = rng.bernoulli(s.q);
        auto draw_pair = [&](double& a, double& b) {
            if (ev.correlated) {
                double u = rng.normal(0.0, w.sd_u);
                double v = rng.normal(0.0, w.sd_v);
                a = (u - v) * kInvSqrt2;
                b = (u + v) * kInvSqrt2;
            } else {
                a = rng.normal(0.0, w.sd_acc);
                b = rng.normal(0.0, w.sd_acc);
            }
        };
        draw_pair(ev.ax, ev.bx);
        draw_pair(ev.ay, ev.by);
        events.push_back(ev);
    }
    return events;
}

std::vector<CoincidenceEvent> herald_postselect(const BiphotonState& s, Basis basis,
                                                const std::vector<CoincidenceEvent>& events,
                                                double window_multiple,
                                                HeraldStats* stats) {
    s.validate();
    require(window_multiple > 0.0, ErrorCategory::Input,
            "herald window multiple must be positive");
    double half_window = basis == Basis::Position
                             ? window_multiple * s.sigma_um
                             : window_multiple * s.kappa_per_mm;

    std::vector<CoincidenceEvent> kept;
    kept.reserve(events.size());
    for (const CoincidenceEvent& ev : events) {
        double h = basis == Basis::Position ? ev.by - ev.ay : ev.by + ev.ay;
        if (std::abs(h) <= half_window) kept.push_back(ev);
    }
    if (stats) {
        stats->kept = kept.size();
        stats->rejected = events.size() - kept.size();
    }
    return kept;
}

HeraldFractions herald_keep_fractions(const BiphotonState& s, double window_multiple) {
    s.validate();
    require(window_multiple > 0.0, ErrorCategory::Input,
            "herald window multiple must be positive");
    HeraldFractions f;
    if (std::isinf(window_multiple)) {
        f.corr = f.acc = f.overall = 1.0;
        f.q_eff = s.q;
        return f;
    }
    double t = s.sigma_kappa();
    // herald coordinate ~ N(0, σ²) for the correlated part in either basis
    f.corr = std::erf(window_multiple * kInvSqrt2);
    f.acc = std::erf(window_multiple * t / std::sqrt(1.0 + t * t));
    f.overall = s.q * f.corr + (1.0 - s.q) * f.acc;
    f.q_eff = f.overall > 0.0 ? s.q * f.corr / f.overall : 0.0;
    return f;
}

std::vector<std::int64_t> JointHistogram::marginal_a() const {
    std::vector<std::int64_t> m(axis_a.count, 0);
    for (std::size_t ia = 0; ia < axis_a.count; ++ia)
        for (std::size_t ib = 0; ib < axis_b.count; ++ib)
            m[ia] += counts[ia * axis_b.count + ib];
    return m;
}

std::vector<std::int64_t> JointHistogram::marginal_b() const {
    std::vector<std::int64_t> m(axis_b.count, 0);
    for (std::size_t ia = 0; ia < axis_a.count; ++ia)
        for (std::size_t ib = 0; ib < axis_b.count; ++ib)
            m[ib] += counts[ia * axis_b.count + ib];
    return m;
}

JointHistogram bin_events(const std::vector<CoincidenceEvent>& events, Basis basis,
                          const GridSpec& axis_a, const GridSpec& axis_b) {
    axis_a.validate();
    axis_b.validate();
    JointHistogram h;
    h.basis = basis;
    h.axis_a = axis_a;
    h.axis_b = axis_b;
    h.counts.assign(axis_a.count * axis_b.count, 0);
    for (const CoincidenceEvent& ev : events) {
        long ia = axis_a.index(ev.ax);
        long ib = axis_b.index(ev.bx);
        if (ia < 0 || ib < 0) {
            ++h.n_out_of_range;
            continue;
        }
        ++h.counts[std::size_t(ia) * axis_b.count + std::size_t(ib)];
        ++h.n_total;
    }
    return h;
}

CalibratedCell calibration_cells(double delta_b_um, double magnification,
                                 double lambda_nm, double f_eff_mm) {
    require(delta_b_um > 0.0 && magnification > 0.0 && lambda_nm > 0.0 && f_eff_mm > 0.0,
            ErrorCategory::Input, "calibration parameters must be positive");
    double dx_um = delta_b_um / magnification;
    // 2π δ_b / (λ f_eff), expressed per mm
    double dk_per_mm = 2.0 * M_PI * (delta_b_um * 1e-6) /
                       ((lambda_nm * 1e-9) * (f_eff_mm * 1e-3)) * 1e-3;
    return CalibratedCell{dx_um, dk_per_mm};
}

}  // namespace eprsteer
