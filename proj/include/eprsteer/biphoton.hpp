#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "eprsteer/grid.hpp"

namespace eprsteer {

enum class Basis { Position, Momentum };

const char* basis_name(Basis b);
Basis basis_from_name(const std::string& s);

// Two-photon Gaussian source with an uncorrelated background admixture.
// The pure part has difference-coordinate width sigma (position) and
// sum-coordinate width kappa (momentum); q is the weight of the correlated
// component, so q=1 is the pure state and q=0 pure accidentals.  The
// accidental component is the product of the arm marginals, which leaves
// the single-arm statistics independent of q.
struct BiphotonState {
    double sigma_um = 6.25;     // conditional position width, µm
    double kappa_per_mm = 7.75; // conditional momentum width, mm^-1
    double q = 1.0;             // correlated fraction, [0, 1]

    void validate() const;

    // dimensionless product σκ; < 1 means position-correlated regime
    double sigma_kappa() const { return sigma_um * 1e-3 * kappa_per_mm; }
};

// K = (σκ + 1/(σκ)) / 2
double schmidt_number(const BiphotonState& s);

// inverse of schmidt_number on the σκ <= 1 branch
double sigma_kappa_from_schmidt(double k);

// Gaussian widths of the mixture written in rotated coordinates
// u = (a+b)/√2, v = (b−a)/√2.  Units: µm (Position), mm^-1 (Momentum).
// The correlated part factorizes as N(u; sd_u)·N(v; sd_v); the accidental
// part is isotropic N(u; sd_acc)·N(v; sd_acc).  sd_acc is also the arm
// marginal width in unrotated coordinates.
struct RotatedWidths {
    double sd_u;
    double sd_v;
    double sd_acc;
};
RotatedWidths rotated_widths(const BiphotonState& s, Basis basis);

// joint coincidence density P(a, b); normalized to 1 over the plane.
// Position: a, b in µm, density per µm².  Momentum: mm^-1, per mm^-2.
double joint_density(const BiphotonState& s, Basis basis, double a, double b);

// single-arm density p(x); same for either arm and independent of q
double marginal_density(const BiphotonState& s, Basis basis, double x);

// Controls the trapezoidal entropy quadrature.  Each axis spans
// ±half_width_sds of its widest Gaussian component and is sampled with at
// least points_per_sd nodes per narrowest component (never fewer than
// min_points per axis).  Violating tail_tolerance or exceeding max_points
// raises an Accuracy error rather than returning a degraded estimate.
struct QuadratureSpec {
    double half_width_sds = 8.0;
    double points_per_sd = 2.5;
    std::size_t min_points = 512;
    std::size_t max_points = 16384;
    double tail_tolerance = 1e-8;

    void validate() const;
};

// Differential entropies of the mixture in self-consistent units
// (mm for position, mm^-1 for momentum) so the two bases can be summed.
struct DifferentialEntropies {
    double h_joint_pos_bits;
    double h_marg_pos_bits;
    double h_joint_mom_bits;
    double h_marg_mom_bits;

    double conditional_pos_bits() const { return h_joint_pos_bits - h_marg_pos_bits; }
    double conditional_mom_bits() const { return h_joint_mom_bits - h_marg_mom_bits; }
    // Σ_h = h(x_B|x_A) + h(k_B|k_A)
    double sigma_h_bits() const { return conditional_pos_bits() + conditional_mom_bits(); }
};

DifferentialEntropies differential_entropy_sum(const BiphotonState& s,
                                               const QuadratureSpec& quad = {});

// Product of mixture variances Var(x_B−x_A)·Var(k_B+k_A), dimensionless.
// Values below 1/4 witness steering.
struct VarianceWitnessValue {
    double var_diff_pos_um2;  // Var(x_B − x_A), µm²
    double var_sum_mom_mm2;   // Var(k_B + k_A), mm^-2
    double pi;                // product in dimensionless units
};
VarianceWitnessValue variance_witness_analytic(const BiphotonState& s);

// Probability mass of each grid cell under the joint density, row-major
// [ia*grid_b.count + ib], not renormalized (mass outside the grid is simply
// missing).  Optional center offsets shift the density before integrating.
// Gauss-Legendre order `gl_order` per axis per cell.
std::vector<double> cell_probabilities(const BiphotonState& s, Basis basis,
                                       const GridSpec& grid_a, const GridSpec& grid_b,
                                       double center_a = 0.0, double center_b = 0.0,
                                       int gl_order = 12);

// Discrete analogue of differential_entropy_sum on finite grids: Shannon
// entropies of the renormalized cell probabilities.  This is the ground
// truth that histogram estimators are judged against.
struct CoarseEntropies {
    double h_joint_pos_bits;
    double h_marg_pos_bits;
    double h_joint_mom_bits;
    double h_marg_mom_bits;

    double sigma_h_bits() const {
        return (h_joint_pos_bits - h_marg_pos_bits) + (h_joint_mom_bits - h_marg_mom_bits);
    }
};
CoarseEntropies coarse_entropy_sum(const BiphotonState& s,
                                   const GridSpec& grid_x, const GridSpec& grid_k,
                                   int gl_order = 12);

// Σ_h and Π over a (K, q) sweep; the raw material for the witness-map plot.
struct WitnessMap {
    std::vector<double> schmidt_axis;
    std::vector<double> q_axis;
    std::vector<double> sigma_h_bits;  // row-major [ik*q_axis.size() + iq]
    std::vector<double> reid_pi;

    // contour levels separating the certified regions
    static double steering_level_bits();  // log2(π e)
    static double eof_level_bits();       // log2(2 π)
    static double reid_level();           // 1/4
};

WitnessMap witness_map(double k_min, double k_max, std::size_t nk,
                       double q_min, double q_max, std::size_t nq,
                       const QuadratureSpec& quad = {});

}  // namespace eprsteer
