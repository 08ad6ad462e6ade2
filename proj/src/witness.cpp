#include "eprsteer/witness.hpp"

#include <cmath>
#include <numbers>
#include <utility>

#include "eprsteer/errors.hpp"
#include "eprsteer/kernels.hpp"
#include "eprsteer/rng.hpp"

namespace eprsteer {

namespace {

constexpr double kLn2 = std::numbers::ln2;

// unbiased variance from accumulated sum / sum of squares
double variance(const kernels::Moments& m, std::size_t n) {
    double mean = m.sum / double(n);
    return (m.sum_sq - double(n) * mean * mean) / double(n - 1);
}

}  // namespace

double eof_gap_bits() { return std::log2(std::numbers::e / 2.0); }

CellBound cell_bound(double dx_um, double dk_per_mm,
                     double calib_frac_m, double calib_frac_f) {
    require(dx_um > 0.0 && dk_per_mm > 0.0, ErrorCategory::Input,
            "cell sizes must be positive");
    require(calib_frac_m >= 0.0 && calib_frac_f >= 0.0, ErrorCategory::Input,
            "calibration uncertainties must be non-negative");
    CellBound b;
    b.dx_um = dx_um;
    b.dk_per_mm = dk_per_mm;
    b.product = dx_um * 1e-3 * dk_per_mm;
    b.steering_bits = std::log2(std::numbers::pi * std::numbers::e / b.product);
    b.eof_bits = b.steering_bits - eof_gap_bits();
    // Δx ∝ 1/M and Δk ∝ 1/f_eff enter the log bound additively
    b.sigma_bits = std::sqrt(calib_frac_m * calib_frac_m +
                             calib_frac_f * calib_frac_f) / kLn2;
    b.vacuous = b.steering_bits <= 0.0;
    return b;
}

double eof_cap(const BiphotonState& s) { return std::log2(schmidt_number(s)); }

EntropicWitness entropic_witness(const ConditionalEntropy& position,
                                 const ConditionalEntropy& momentum,
                                 const CellBound& bound, double cap_bits) {
    require(position.estimator == momentum.estimator, ErrorCategory::Input,
            "mixed estimators in one witness");
    EntropicWitness w;
    w.estimator = position.estimator;
    w.sigma_h_bits = position.bits + momentum.bits;
    w.sigma_h_sigma = std::hypot(position.sigma_bits, momentum.sigma_bits);
    w.delta_i_bits = bound.steering_bits - w.sigma_h_bits;
    w.delta_i_sigma = std::hypot(w.sigma_h_sigma, bound.sigma_bits);
    // eof = ΔI − log2(e/2) so the spacing of the two margins is exact
    w.eof_bits = w.delta_i_bits - eof_gap_bits();
    w.eof_sigma = w.delta_i_sigma;
    w.eof_was_capped = w.eof_bits > cap_bits;
    w.eof_capped_bits = w.eof_was_capped ? cap_bits : w.eof_bits;
    w.vacuous = bound.vacuous;
    if (w.delta_i_sigma > 0.0) {
        w.steering_significance = w.delta_i_bits / w.delta_i_sigma;
        w.eof_significance = w.eof_bits / w.eof_sigma;
    }
    return w;
}

ReidWitness reid_witness_empirical(const std::vector<CoincidenceEvent>& position_events,
                                   const std::vector<CoincidenceEvent>& momentum_events,
                                   std::size_t resamples, std::uint64_t seed) {
    require(position_events.size() >= 2 && momentum_events.size() >= 2,
            ErrorCategory::Input, "variance witness needs at least 2 events per basis");

    std::size_t np = position_events.size(), nm = momentum_events.size();
    std::vector<double> diff(np), sum(nm);
    for (std::size_t i = 0; i < np; ++i)
        diff[i] = position_events[i].bx - position_events[i].ax;
    for (std::size_t i = 0; i < nm; ++i)
        sum[i] = momentum_events[i].bx + momentum_events[i].ax;

    ReidWitness w;
    w.n_position = std::int64_t(np);
    w.n_momentum = std::int64_t(nm);
    w.var_diff_pos_um2 = variance(kernels::moments(diff), np);
    w.var_sum_mom_mm2 = variance(kernels::moments(sum), nm);
    w.pi = w.var_diff_pos_um2 * 1e-6 * w.var_sum_mom_mm2;

    if (resamples >= 2) {
        Rng rng(seed, 0x72767720ULL);
        double mean = 0.0, m2 = 0.0;
        for (std::size_t r = 0; r < resamples; ++r) {
            kernels::Moments mp{}, mm{};
            for (std::size_t i = 0; i < np; ++i) {
                double v = diff[rng.below(np)];
                mp.sum += v;
                mp.sum_sq += v * v;
            }
            for (std::size_t i = 0; i < nm; ++i) {
                double v = sum[rng.below(nm)];
                mm.sum += v;
                mm.sum_sq += v * v;
            }
            double pi = variance(mp, np) * 1e-6 * variance(mm, nm);
            double d = pi - mean;
            mean += d / double(r + 1);
            m2 += d * (pi - mean);
        }
        w.pi_sigma = std::sqrt(m2 / double(resamples - 1));
        if (w.pi_sigma > 0.0) w.significance = (0.25 - w.pi) / w.pi_sigma;
    }
    return w;
}

WitnessReport run_witness_analysis(const JointHistogram& pos_hist,
                                   const JointHistogram& mom_hist,
                                   const std::vector<CoincidenceEvent>* pos_events,
                                   const std::vector<CoincidenceEvent>* mom_events,
                                   const AnalysisOptions& opts) {
    WitnessReport rep;
    rep.bound = opts.bound;
    rep.eof_cap_bits = opts.eof_cap_bits;

    for (Estimator est : opts.estimators) {
        try {
            ConditionalEntropy cp = conditional_entropy(pos_hist, est, opts.est_opts_pos);
            ConditionalEntropy cm = conditional_entropy(mom_hist, est, opts.est_opts_mom);
            rep.entropic.push_back(entropic_witness(cp, cm, opts.bound, opts.eof_cap_bits));
            rep.conditional_pos.push_back(std::move(cp));
            rep.conditional_mom.push_back(std::move(cm));
        } catch (const Error& e) {
            rep.failures.emplace_back(estimator_name(est), e.what());
        }
    }

    if (pos_events && mom_events) {
        try {
            rep.reid = reid_witness_empirical(*pos_events, *mom_events, opts.reid_resamples,
                                              opts.reid_seed);
            rep.have_reid = true;
        } catch (const Error& e) {
            rep.failures.emplace_back("reid", e.what());
        }
    }

    if (opts.nsb_support_sensitivity) {
        try {
            std::size_t occupied = 0;
            for (std::int64_t c : pos_hist.counts)
                if (c > 0) ++occupied;
            std::size_t full = pos_hist.axis_a.count * pos_hist.axis_b.count;
            EntropyEstimate on_full =
                nsb_entropy(pos_hist.counts, full, opts.est_opts_pos.nsb);
            EntropyEstimate on_occupied =
                nsb_entropy(pos_hist.counts, occupied, opts.est_opts_pos.nsb);
            rep.nsb_support_sensitivity_bits = on_full.bits - on_occupied.bits;
            rep.have_nsb_sensitivity = true;
        } catch (const Error& e) {
            rep.failures.emplace_back("nsb-sensitivity", e.what());
        }
    }
    return rep;
}

}  // namespace eprsteer
