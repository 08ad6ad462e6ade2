#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "eprsteer/estimators.hpp"

namespace eprsteer {

// Coarse-graining bounds fixed by the analysis cells.  Discrete conditional
// entropies certify steering when their sum stays below
// log2(πe/(Δx·Δk)) and bound entanglement of formation from
// log2(2π/(Δx·Δk)) = steering bound − log2(e/2).
struct CellBound {
    double dx_um = 0.0;
    double dk_per_mm = 0.0;
    double product = 0.0;              // Δx·Δk, dimensionless (mm · mm^-1)
    double steering_bits = 0.0;        // log2(πe / (Δx·Δk))
    double eof_bits = 0.0;             // steering_bits − log2(e/2)
    double sigma_bits = 0.0;           // calibration uncertainty of either bound
    bool vacuous = false;              // Δx·Δk ≥ πe: nothing can be certified
};

// difference of the two entropic bound constants, log2(e/2)
double eof_gap_bits();

// calib_frac_m / calib_frac_f: fractional 1σ uncertainties of the imaging
// magnification and effective focal length; they enter the two cell sizes
// linearly and the bounds through 1/ln2.
CellBound cell_bound(double dx_um, double dk_per_mm,
                     double calib_frac_m = 0.0, double calib_frac_f = 0.0);

// maximum entanglement of formation the model state can carry, log2(K) ebits
double eof_cap(const BiphotonState& s);

struct EntropicWitness {
    Estimator estimator = Estimator::Plugin;
    double sigma_h_bits = 0.0;   // H(X_B|X_A) + H(K_B|K_A), measured
    double sigma_h_sigma = 0.0;  // statistical part only
    double delta_i_bits = 0.0;   // steering margin: steering bound − Σ_H
    double delta_i_sigma = 0.0;  // statistical + calibration
    double eof_bits = 0.0;       // EOF lower bound: delta_i − log2(e/2)
    double eof_sigma = 0.0;
    double eof_capped_bits = 0.0;  // min(eof_bits, cap)
    bool eof_was_capped = false;
    bool vacuous = false;
    // signed significance in standard deviations; > 0 means the witness
    // points toward certification
    double steering_significance = 0.0;
    double eof_significance = 0.0;
};

EntropicWitness entropic_witness(const ConditionalEntropy& position,
                                 const ConditionalEntropy& momentum,
                                 const CellBound& bound,
                                 double cap_bits = std::numeric_limits<double>::infinity());

struct ReidWitness {
    double var_diff_pos_um2 = 0.0;  // Var(x_B − x_A)
    double var_sum_mom_mm2 = 0.0;   // Var(k_B + k_A)
    double pi = 0.0;                // dimensionless product
    double pi_sigma = 0.0;          // bootstrap s.d.
    double significance = 0.0;      // (1/4 − Π) / σ
    std::int64_t n_position = 0;
    std::int64_t n_momentum = 0;
};

// variance product from the event samples with event-bootstrap uncertainty
ReidWitness reid_witness_empirical(const std::vector<CoincidenceEvent>& position_events,
                                   const std::vector<CoincidenceEvent>& momentum_events,
                                   std::size_t resamples = 200,
                                   std::uint64_t seed = 0x72656964ULL);

// Everything the analyze stage certifies, ready for serialization.
struct WitnessReport {
    CellBound bound;
    double eof_cap_bits = std::numeric_limits<double>::infinity();
    std::vector<EntropicWitness> entropic;
    std::vector<ConditionalEntropy> conditional_pos;  // parallel to entropic
    std::vector<ConditionalEntropy> conditional_mom;
    bool have_reid = false;
    ReidWitness reid;
    // shift of the joint NSB estimate when the assumed support is shrunk
    // from the full grid to the occupied cells (position basis, bits)
    double nsb_support_sensitivity_bits = 0.0;
    bool have_nsb_sensitivity = false;
    // estimators that raised instead of producing a value: (name, message)
    std::vector<std::pair<std::string, std::string>> failures;
};

struct AnalysisOptions {
    std::vector<Estimator> estimators;
    // plugin bootstrap seeds inside these should already be derived per basis
    EstimatorOptions est_opts_pos;
    EstimatorOptions est_opts_mom;
    CellBound bound;
    double eof_cap_bits = std::numeric_limits<double>::infinity();
    std::size_t reid_resamples = 200;
    std::uint64_t reid_seed = 0x72656964ULL;
    bool nsb_support_sensitivity = false;
};

// Run every requested estimator on both bases and assemble the report.
// Estimators that raise are recorded under `failures` instead of aborting
// the others.  The variance witness needs raw events; pass nullptrs when
// only histograms exist and it is skipped.
WitnessReport run_witness_analysis(const JointHistogram& pos_hist,
                                   const JointHistogram& mom_hist,
                                   const std::vector<CoincidenceEvent>* pos_events,
                                   const std::vector<CoincidenceEvent>* mom_events,
                                   const AnalysisOptions& opts);

}  // namespace eprsteer
