#pragma once

#include <cstdint>
#include <vector>

#include "eprsteer/biphoton.hpp"
#include "eprsteer/grid.hpp"

namespace eprsteer {

// One detected pair.  x is the analyzed transverse axis, y the orthogonal
// axis used for heralding.  Units follow the basis: µm or mm^-1.
// `correlated` is sampler truth for diagnostics; it is never serialized and
// nothing downstream may branch on it.
struct CoincidenceEvent {
    double ax, ay;
    double bx, by;
    bool correlated = false;
};

// Draw n pairs from the mixture.  The component (correlated vs accidental)
// is chosen once per pair and shared by both transverse axes; that shared
// label is what makes heralding on y enrich the x statistics.
std::vector<CoincidenceEvent> sample_pairs(const BiphotonState& s, Basis basis,
                                           std::size_t n, std::uint64_t seed);

struct HeraldStats {
    std::size_t kept = 0;
    std::size_t rejected = 0;
    double kept_fraction() const {
        std::size_t n = kept + rejected;
        return n == 0 ? 0.0 : double(kept) / double(n);
    }
};

// Keep events whose herald coordinate falls inside the window:
// |y_B − y_A| <= w·σ (position) or |y-axis k_B + k_A| <= w·κ (momentum).
// window_multiple = +inf keeps everything.
std::vector<CoincidenceEvent> herald_postselect(const BiphotonState& s, Basis basis,
                                                const std::vector<CoincidenceEvent>& events,
                                                double window_multiple,
                                                HeraldStats* stats = nullptr);

// Closed-form herald acceptance for each mixture component, and the
// resulting correlated fraction of the kept sample.  Identical for both
// bases (the dimensionless window is the same).
struct HeraldFractions {
    double corr;     // P(kept | correlated)
    double acc;      // P(kept | accidental)
    double overall;  // q·corr + (1−q)·acc
    double q_eff;    // correlated fraction after post-selection
};
HeraldFractions herald_keep_fractions(const BiphotonState& s, double window_multiple);

struct JointHistogram {
    Basis basis = Basis::Position;
    GridSpec axis_a;
    GridSpec axis_b;
    std::vector<std::int64_t> counts;  // row-major [ia*axis_b.count + ib]
    std::int64_t n_total = 0;          // events inside the grid
    std::int64_t n_out_of_range = 0;

    std::int64_t at(std::size_t ia, std::size_t ib) const {
        return counts[ia * axis_b.count + ib];
    }
    std::vector<std::int64_t> marginal_a() const;
    std::vector<std::int64_t> marginal_b() const;
};

// 2-D histogram of (ax, bx); events outside either axis are tallied, not binned
JointHistogram bin_events(const std::vector<CoincidenceEvent>& events, Basis basis,
                          const GridSpec& axis_a, const GridSpec& axis_b);

// Optics calibration: camera cell size δ_b mapped to object-plane position
// (divide by magnification) and far-field momentum (2π δ_b / (λ f_eff)).
struct CalibratedCell {
    double dx_um;
    double dk_per_mm;
};
CalibratedCell calibration_cells(double delta_b_um, double magnification,
                                 double lambda_nm, double f_eff_mm);

}  // namespace eprsteer
