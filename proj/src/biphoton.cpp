#include "eprsteer/biphoton.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "eprsteer/kernels.hpp"

namespace eprsteer {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kTwoPiE = 2.0 * kPi * std::numbers::e;
constexpr double kTiny = 1e-300;

double normal_pdf(double x, double sd) {
    double z = x / sd;
    return std::exp(-0.5 * z * z) / (sd * std::sqrt(2.0 * kPi));
}

double normal_cdf(double x, double sd) {
    return 0.5 * std::erfc(-x / (sd * std::sqrt(2.0)));
}

// differential entropy of N(0, sd^2) in bits
double gaussian_entropy_bits(double sd) {
    return 0.5 * std::log2(kTwoPiE * sd * sd);
}

// One quadrature axis: node values of both mixture components.
struct Axis {
    std::vector<double> corr;
    std::vector<double> acc;
    double step = 0.0;
};

Axis build_axis(double sd_corr, double sd_acc, const QuadratureSpec& quad) {
    double wide = std::max(sd_corr, sd_acc);
    double narrow = std::min(sd_corr, sd_acc);
    double half = quad.half_width_sds * wide;

    for (double sd : {sd_corr, sd_acc}) {
        double excluded = std::erfc(half / (sd * std::sqrt(2.0)));
        require(excluded <= quad.tail_tolerance, ErrorCategory::Accuracy,
                "quadrature span excludes too much tail mass; widen half_width_sds");
    }

    double step0 = narrow / quad.points_per_sd;
    auto n = std::size_t(std::ceil(2.0 * half / step0)) + 1;
    n = std::max(n, quad.min_points);
    require(n <= quad.max_points, ErrorCategory::Accuracy,
            "quadrature axis would exceed max_points; scale separation too large");

    Axis ax;
    ax.step = 2.0 * half / double(n - 1);
    ax.corr.resize(n);
    ax.acc.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        double x = -half + ax.step * double(i);
        ax.corr[i] = normal_pdf(x, sd_corr);
        ax.acc[i] = normal_pdf(x, sd_acc);
    }
    return ax;
}

// -∫∫ P log2 P over the rotated plane by trapezoid on the axis grids.
// P(u,v) = q·corr_u·corr_v + (1−q)·acc_u·acc_v.
double joint_entropy_bits(double q, const Axis& au, const Axis& av) {
    std::size_t nu = au.corr.size(), nv = av.corr.size();
    auto edge_term = [&](double a, double b, std::size_t j) {
        double f = a * av.corr[j] + b * av.acc[j];
        return f > kTiny ? f * std::log2(f) : 0.0;
    };
    double total = 0.0;
    for (std::size_t i = 0; i < nu; ++i) {
        double a = q * au.corr[i];
        double b = (1.0 - q) * au.acc[i];
        double row = kernels::mix_xlog2x_sum(a, av.corr, b, av.acc);
        row -= 0.5 * (edge_term(a, b, 0) + edge_term(a, b, nv - 1));
        double wi = (i == 0 || i == nu - 1) ? 0.5 : 1.0;
        total += wi * row;
    }
    return -total * au.step * av.step;
}

// widths in self-consistent units: mm for position, mm^-1 for momentum
RotatedWidths consistent_widths(const BiphotonState& s, Basis basis) {
    RotatedWidths w = rotated_widths(s, basis);
    if (basis == Basis::Position) {
        w.sd_u *= 1e-3;
        w.sd_v *= 1e-3;
        w.sd_acc *= 1e-3;
    }
    return w;
}

// Legendre nodes/weights on [-1, 1] by Newton iteration
void gauss_legendre(int n, std::vector<double>& nodes, std::vector<double>& weights) {
    nodes.assign(n, 0.0);
    weights.assign(n, 0.0);
    for (int i = 0; i < (n + 1) / 2; ++i) {
        double x = std::cos(kPi * (double(i) + 0.75) / (double(n) + 0.5));
        double dp = 0.0;
        for (int it = 0; it < 100; ++it) {
            double p0 = 1.0, p1 = x;
            for (int k = 2; k <= n; ++k) {
                double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / double(k);
                p0 = p1;
                p1 = p2;
            }
            dp = double(n) * (x * p1 - p0) / (x * x - 1.0);
            double dx = p1 / dp;
            x -= dx;
            if (std::abs(dx) < 1e-15) break;
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = weights[n - 1 - i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
}

}  // namespace

const char* basis_name(Basis b) {
    return b == Basis::Position ? "position" : "momentum";
}

Basis basis_from_name(const std::string& s) {
    if (s == "position") return Basis::Position;
    if (s == "momentum") return Basis::Momentum;
    fail(ErrorCategory::Format, "unknown basis '" + s + "'");
}

void BiphotonState::validate() const {
    require(std::isfinite(sigma_um) && sigma_um > 0.0, ErrorCategory::Domain,
            "sigma must be positive and finite");
    require(std::isfinite(kappa_per_mm) && kappa_per_mm > 0.0, ErrorCategory::Domain,
            "kappa must be positive and finite");
    require(std::isfinite(q) && q >= 0.0 && q <= 1.0, ErrorCategory::Domain,
            "correlated fraction q must lie in [0, 1]");
}

double schmidt_number(const BiphotonState& s) {
    s.validate();
    double t = s.sigma_kappa();
    return 0.5 * (t + 1.0 / t);
}

double sigma_kappa_from_schmidt(double k) {
    require(std::isfinite(k) && k >= 1.0, ErrorCategory::Domain,
            "Schmidt number must be >= 1");
    return k - std::sqrt(k * k - 1.0);
}

RotatedWidths rotated_widths(const BiphotonState& s, Basis basis) {
    s.validate();
    double t = s.sigma_kappa();
    double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    if (basis == Basis::Position) {
        double kappa_per_um = s.kappa_per_mm * 1e-3;
        return RotatedWidths{
            inv_sqrt2 / kappa_per_um,                       // sum coordinate, wide
            s.sigma_um * inv_sqrt2,                         // difference, narrow
            std::sqrt(1.0 + t * t) / (2.0 * kappa_per_um),  // marginal
        };
    }
    double sigma_mm = s.sigma_um * 1e-3;
    return RotatedWidths{
        s.kappa_per_mm * inv_sqrt2,                  // sum coordinate, narrow
        inv_sqrt2 / sigma_mm,                        // difference, wide
        std::sqrt(1.0 + t * t) / (2.0 * sigma_mm),   // marginal
    };
}

double joint_density(const BiphotonState& s, Basis basis, double a, double b) {
    RotatedWidths w = rotated_widths(s, basis);
    double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    double u = (a + b) * inv_sqrt2;
    double v = (b - a) * inv_sqrt2;
    double corr = normal_pdf(u, w.sd_u) * normal_pdf(v, w.sd_v);
    double acc = normal_pdf(u, w.sd_acc) * normal_pdf(v, w.sd_acc);
    return s.q * corr + (1.0 - s.q) * acc;
}

double marginal_density(const BiphotonState& s, Basis basis, double x) {
    return normal_pdf(x, rotated_widths(s, basis).sd_acc);
}

void QuadratureSpec::validate() const {
    require(half_width_sds > 0.0 && points_per_sd > 0.0, ErrorCategory::Input,
            "quadrature widths must be positive");
    require(min_points >= 2 && max_points >= min_points, ErrorCategory::Input,
            "quadrature point bounds inconsistent");
}

DifferentialEntropies differential_entropy_sum(const BiphotonState& s,
                                               const QuadratureSpec& quad) {
    s.validate();
    quad.validate();
    DifferentialEntropies out{};
    for (Basis basis : {Basis::Position, Basis::Momentum}) {
        RotatedWidths w = consistent_widths(s, basis);
        Axis au = build_axis(w.sd_u, w.sd_acc, quad);
        Axis av = build_axis(w.sd_v, w.sd_acc, quad);
        double h_joint = joint_entropy_bits(s.q, au, av);
        double h_marg = gaussian_entropy_bits(w.sd_acc);
        if (basis == Basis::Position) {
            out.h_joint_pos_bits = h_joint;
            out.h_marg_pos_bits = h_marg;
        } else {
            out.h_joint_mom_bits = h_joint;
            out.h_marg_mom_bits = h_marg;
        }
    }
    return out;
}

VarianceWitnessValue variance_witness_analytic(const BiphotonState& s) {
    s.validate();
    double t = s.sigma_kappa();
    double sigma_mm = s.sigma_um * 1e-3;
    double k = s.kappa_per_mm;
    double var_diff_mm2 =
        s.q * sigma_mm * sigma_mm + (1.0 - s.q) * (1.0 + t * t) / (2.0 * k * k);
    double var_sum_mm2 =
        s.q * k * k + (1.0 - s.q) * (1.0 + t * t) / (2.0 * sigma_mm * sigma_mm);
    return VarianceWitnessValue{
        var_diff_mm2 * 1e6,
        var_sum_mm2,
        var_diff_mm2 * var_sum_mm2,
    };
}

std::vector<double> cell_probabilities(const BiphotonState& s, Basis basis,
                                       const GridSpec& grid_a, const GridSpec& grid_b,
                                       double center_a, double center_b, int gl_order) {
    s.validate();
    grid_a.validate();
    grid_b.validate();
    require(gl_order >= 2 && gl_order <= 64, ErrorCategory::Input,
            "gl_order out of range [2, 64]");

    RotatedWidths w = rotated_widths(s, basis);
    double cu = w.sd_u, cv = w.sd_v;

    std::vector<double> ref_nodes, ref_weights;
    gauss_legendre(gl_order, ref_nodes, ref_weights);

    // per-axis node coordinates (density already shifted by the center)
    auto axis_nodes = [&](const GridSpec& g, double center) {
        std::vector<double> xs(g.count * gl_order);
        for (std::size_t i = 0; i < g.count; ++i)
            for (int k = 0; k < gl_order; ++k)
                xs[i * gl_order + k] =
                    g.center(i) + 0.5 * g.delta * ref_nodes[k] - center;
        return xs;
    };
    std::vector<double> xa = axis_nodes(grid_a, center_a);
    std::vector<double> xb = axis_nodes(grid_b, center_b);

    // accidental part separates; integrate it exactly per axis
    auto axis_acc_mass = [&](const GridSpec& g, double center) {
        std::vector<double> m(g.count);
        for (std::size_t i = 0; i < g.count; ++i)
            m[i] = normal_cdf(g.low_edge(i) + g.delta - center, w.sd_acc) -
                   normal_cdf(g.low_edge(i) - center, w.sd_acc);
        return m;
    };
    std::vector<double> acc_a = axis_acc_mass(grid_a, center_a);
    std::vector<double> acc_b = axis_acc_mass(grid_b, center_b);

    double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    double norm = 1.0 / (2.0 * kPi * cu * cv);
    std::vector<double> out(grid_a.count * grid_b.count);
    for (std::size_t ia = 0; ia < grid_a.count; ++ia) {
        for (std::size_t ib = 0; ib < grid_b.count; ++ib) {
            double corr = 0.0;
            if (s.q > 0.0) {
                for (int p = 0; p < gl_order; ++p) {
                    double a = xa[ia * gl_order + p];
                    double row = 0.0;
                    for (int r = 0; r < gl_order; ++r) {
                        double b = xb[ib * gl_order + r];
                        double u = (a + b) * inv_sqrt2;
                        double v = (b - a) * inv_sqrt2;
                        double zu = u / cu, zv = v / cv;
                        row += ref_weights[r] * std::exp(-0.5 * (zu * zu + zv * zv));
                    }
                    corr += ref_weights[p] * row;
                }
                corr *= norm * 0.25 * grid_a.delta * grid_b.delta;
            }
            out[ia * grid_b.count + ib] =
                s.q * corr + (1.0 - s.q) * acc_a[ia] * acc_b[ib];
        }
    }
    return out;
}

CoarseEntropies coarse_entropy_sum(const BiphotonState& s,
                                   const GridSpec& grid_x, const GridSpec& grid_k,
                                   int gl_order) {
    CoarseEntropies out{};
    for (Basis basis : {Basis::Position, Basis::Momentum}) {
        const GridSpec& g = basis == Basis::Position ? grid_x : grid_k;
        std::vector<double> p = cell_probabilities(s, basis, g, g, 0.0, 0.0, gl_order);
        double total = kernels::moments(p).sum;
        require(total > 0.5, ErrorCategory::Accuracy,
                "grid captures less than half of the density; widen it");
        for (double& v : p) v /= total;

        std::vector<double> marg(g.count, 0.0);
        for (std::size_t ia = 0; ia < g.count; ++ia)
            for (std::size_t ib = 0; ib < g.count; ++ib)
                marg[ia] += p[ia * g.count + ib];

        double h_joint = -kernels::xlog2x_sum(p);
        double h_marg = -kernels::xlog2x_sum(marg);
        if (basis == Basis::Position) {
            out.h_joint_pos_bits = h_joint;
            out.h_marg_pos_bits = h_marg;
        } else {
            out.h_joint_mom_bits = h_joint;
            out.h_marg_mom_bits = h_marg;
        }
    }
    return out;
}

double WitnessMap::steering_level_bits() { return std::log2(kPi * std::numbers::e); }
double WitnessMap::eof_level_bits() { return std::log2(2.0 * kPi); }
double WitnessMap::reid_level() { return 0.25; }

WitnessMap witness_map(double k_min, double k_max, std::size_t nk,
                       double q_min, double q_max, std::size_t nq,
                       const QuadratureSpec& quad) {
    require(nk >= 2 && nq >= 2, ErrorCategory::Input,
            "witness map needs at least 2 samples per axis");
    require(k_min >= 1.0 && k_max > k_min, ErrorCategory::Domain,
            "Schmidt axis must satisfy 1 <= k_min < k_max");
    require(q_min >= 0.0 && q_max <= 1.0 && q_max > q_min, ErrorCategory::Domain,
            "q axis must satisfy 0 <= q_min < q_max <= 1");

    WitnessMap map;
    map.schmidt_axis.resize(nk);
    map.q_axis.resize(nq);
    for (std::size_t i = 0; i < nk; ++i)
        map.schmidt_axis[i] = k_min + (k_max - k_min) * double(i) / double(nk - 1);
    for (std::size_t j = 0; j < nq; ++j)
        map.q_axis[j] = q_min + (q_max - q_min) * double(j) / double(nq - 1);

    map.sigma_h_bits.resize(nk * nq);
    map.reid_pi.resize(nk * nq);
    for (std::size_t i = 0; i < nk; ++i) {
        double t = sigma_kappa_from_schmidt(map.schmidt_axis[i]);
        // the map depends only on (σκ, q); pick κ = 1 mm^-1 for the sweep
        BiphotonState st{t * 1e3, 1.0, 0.0};
        for (std::size_t j = 0; j < nq; ++j) {
            st.q = map.q_axis[j];
            map.sigma_h_bits[i * nq + j] = differential_entropy_sum(st, quad).sigma_h_bits();
            map.reid_pi[i * nq + j] = variance_witness_analytic(st).pi;
        }
    }
    return map;
}

}  // namespace eprsteer
