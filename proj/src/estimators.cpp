#include "eprsteer/estimators.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <map>
#include <numbers>

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

#include "eprsteer/kernels.hpp"
#include "eprsteer/rng.hpp"

namespace eprsteer {

namespace {

constexpr double kLog2E = std::numbers::log2e;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double digamma(double x) { return boost::math::digamma(x); }
double trigamma(double x) { return boost::math::trigamma(x); }

using detail::lgamma_diff;

struct CountStats {
    std::int64_t n = 0;          // total samples
    std::int64_t occupied = 0;   // bins with at least one count
    // distinct nonzero count values and how many bins carry each
    std::vector<std::pair<std::int64_t, std::int64_t>> multiplicity;
};

CountStats count_stats(std::span<const std::int64_t> counts) {
    CountStats cs;
    std::map<std::int64_t, std::int64_t> mult;
    for (std::int64_t c : counts) {
        require(c >= 0, ErrorCategory::Input, "negative histogram count");
        if (c == 0) continue;
        cs.n += c;
        ++cs.occupied;
        ++mult[c];
    }
    cs.multiplicity.assign(mult.begin(), mult.end());
    return cs;
}

std::vector<double> log_spaced(double lo, double hi, std::size_t n) {
    std::vector<double> v(n);
    double llo = std::log(lo), lhi = std::log(hi);
    for (std::size_t i = 0; i < n; ++i)
        v[i] = std::exp(llo + (lhi - llo) * double(i) / double(n - 1));
    return v;
}

// ----------------------------------------------------------------- plugin --

double plugin_bits(std::span<const std::int64_t> counts, std::int64_t n) {
    double s = 0.0;
    for (std::int64_t c : counts)
        if (c > 0) s += double(c) * std::log2(double(c));
    return std::log2(double(n)) - s / double(n);
}

// ------------------------------------------------- Dirichlet entropy law --

struct Group {
    double a;     // Dirichlet parameter of each bin in the group
    double mult;  // number of identical bins
};

struct EntropyMoments {
    double mean = 0.0;    // nats
    double second = 0.0;  // nats²
};

// Posterior mean and second moment of the Shannon entropy of p ~ Dir(a).
// Grouping identical parameters keeps this O(#distinct counts).
EntropyMoments dirichlet_entropy_moments(const std::vector<Group>& groups) {
    double a0 = 0.0;
    for (const Group& g : groups) a0 += g.mult * g.a;

    EntropyMoments out;
    double mean_sum = 0.0;
    for (const Group& g : groups)
        if (g.a > 0.0) mean_sum += g.mult * g.a * digamma(g.a + 1.0);
    out.mean = digamma(a0 + 1.0) - mean_sum / a0;

    double psi02 = digamma(a0 + 2.0);
    double tri02 = trigamma(a0 + 2.0);
    double sa = 0.0, sa2 = 0.0, ssq = 0.0, self = 0.0;
    for (const Group& g : groups) {
        if (g.a <= 0.0) continue;
        double j = digamma(g.a + 1.0) - psi02;
        sa += g.mult * g.a * j;
        sa2 += g.mult * g.a * g.a * j * j;
        ssq += g.mult * g.a * g.a;
        double k = digamma(g.a + 2.0) - psi02;
        self += g.mult * g.a * (g.a + 1.0) * (k * k + trigamma(g.a + 2.0) - tri02);
    }
    double cross = sa * sa - sa2 - tri02 * (a0 * a0 - ssq);
    out.second = (cross + self) / (a0 * (a0 + 1.0));
    return out;
}

// --------------------------------------------------------------- NSB core --

struct WeightedMoments {
    std::vector<double> logw;
    std::vector<double> mean;
    std::vector<double> second;

    // combine nodes into a posterior estimate; returns effective node count
    double reduce(double& mean_out, double& var_out) const {
        double mx = kNegInf;
        for (double lw : logw) mx = std::max(mx, lw);
        require(std::isfinite(mx), ErrorCategory::Accuracy,
                "posterior evidence vanished on every quadrature node");
        double sw = 0.0, sw2 = 0.0, sm = 0.0, s2 = 0.0;
        for (std::size_t i = 0; i < logw.size(); ++i) {
            if (logw[i] == kNegInf) continue;
            double w = std::exp(logw[i] - mx);
            sw += w;
            sw2 += w * w;
            sm += w * mean[i];
            s2 += w * second[i];
        }
        mean_out = sm / sw;
        var_out = std::max(0.0, s2 / sw - mean_out * mean_out);
        return sw * sw / sw2;
    }
};

// log marginal likelihood of the counts under a symmetric Dir(β) prior on
// n_bins cells, up to count-independent constants
double nsb_log_evidence(const CountStats& cs, double n_bins, double beta) {
    double le = -lgamma_diff(n_bins * beta, double(cs.n));
    for (auto [v, m] : cs.multiplicity)
        le += double(m) * lgamma_diff(beta, double(v));
    return le;
}

EntropyMoments nsb_node_moments(const CountStats& cs, std::size_t n_bins, double beta) {
    std::vector<Group> groups;
    groups.reserve(cs.multiplicity.size() + 1);
    for (auto [v, m] : cs.multiplicity)
        groups.push_back({double(v) + beta, double(m)});
    double empty = double(n_bins) - double(cs.occupied);
    if (empty > 0.0 && beta > 0.0) groups.push_back({beta, empty});
    return dirichlet_entropy_moments(groups);
}

WeightedMoments nsb_sweep(const CountStats& cs, std::size_t n_bins,
                          const std::vector<double>& betas) {
    double a = double(n_bins);
    WeightedMoments wm;
    std::size_t n = betas.size();
    wm.logw.resize(n);
    wm.mean.resize(n);
    wm.second.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        double beta = betas[i];
        // prior flat in ξ(β) = ψ(Aβ+1) − ψ(β+1); trapezoid in ln β
        double dxi = a * trigamma(a * beta + 1.0) - trigamma(beta + 1.0);
        double lo = i == 0 ? betas[0] : betas[i - 1];
        double hi = i + 1 == n ? betas[n - 1] : betas[i + 1];
        double dlnb = 0.5 * (std::log(hi) - std::log(lo));
        if (dxi <= 0.0 || dlnb <= 0.0) {
            wm.logw[i] = kNegInf;
            continue;
        }
        wm.logw[i] = nsb_log_evidence(cs, a, beta) + std::log(dxi) +
                     std::log(beta) + std::log(dlnb);
        EntropyMoments em = nsb_node_moments(cs, n_bins, beta);
        wm.mean[i] = em.mean;
        wm.second[i] = em.second;
    }
    return wm;
}

// --------------------------------------------------- Pitman-Yor moments --

inline double py_prior_mean(double d, double b) { return detail::py_prior_entropy_mean(d, b); }
inline double py_prior_second(double d, double b) { return detail::py_prior_entropy_second(d, b); }

// log EPPF of the observed partition under PY(d, α), up to constants
double py_log_evidence(const CountStats& cs, double d, double alpha) {
    double k1 = double(cs.occupied);
    double le;
    if (k1 <= 1.0) {
        le = 0.0;
    } else if (d < 1e-12) {
        if (alpha <= 0.0) return kNegInf;
        le = (k1 - 1.0) * std::log(alpha);
    } else {
        le = (k1 - 1.0) * std::log(d) + lgamma_diff(alpha / d + 1.0, k1 - 1.0);
    }
    le -= lgamma_diff(alpha + 1.0, double(cs.n) - 1.0);
    double lg1d = std::lgamma(1.0 - d);
    for (auto [v, m] : cs.multiplicity)
        le += double(m) * (std::lgamma(double(v) - d) - lg1d);
    return le;
}

// posterior entropy mean and second moment given counts under PY(d, α)
EntropyMoments py_node_moments(const CountStats& cs, double d, double alpha) {
    double a_r = alpha + double(cs.occupied) * d;  // continuous remainder mass
    std::vector<Group> groups;
    groups.reserve(cs.multiplicity.size() + 1);
    for (auto [v, m] : cs.multiplicity)
        groups.push_back({double(v) - d, double(m)});
    groups.push_back({a_r, 1.0});

    EntropyMoments top = dirichlet_entropy_moments(groups);

    double a0 = 0.0;
    for (const Group& g : groups) a0 += g.mult * g.a;

    // E[p_r · H_top] and E[p_r²] over the same Dirichlet
    double psi02 = digamma(a0 + 2.0);
    double cross_sum = 0.0;
    for (auto [v, m] : cs.multiplicity) {
        double a = double(v) - d;
        cross_sum += double(m) * a * a_r * (digamma(a + 1.0) - psi02);
    }
    double e_r_htop, e_r2;
    if (a_r > 0.0) {
        cross_sum += a_r * (a_r + 1.0) * (digamma(a_r + 2.0) - psi02);
        e_r_htop = -cross_sum / (a0 * (a0 + 1.0));
        e_r2 = a_r * (a_r + 1.0) / (a0 * (a0 + 1.0));
    } else {
        e_r_htop = 0.0;
        e_r2 = 0.0;
    }

    double hp_mean = a_r > 0.0 ? py_prior_mean(d, a_r) : 0.0;
    double hp_second = a_r > 0.0 ? py_prior_second(d, a_r) : 0.0;

    EntropyMoments out;
    out.mean = top.mean + (a_r / a0) * hp_mean;
    out.second = top.second + 2.0 * e_r_htop * hp_mean + e_r2 * hp_second;
    return out;
}

// inverse digamma by Newton
double inverse_digamma(double y) {
    double x = y >= -2.22 ? std::exp(y) + 0.5 : -1.0 / (y - digamma(1.0));
    for (int i = 0; i < 40; ++i) {
        double dx = (digamma(x) - y) / trigamma(x);
        x -= dx;
        if (x <= 0.0) x = 1e-12;
        if (std::abs(dx) < 1e-13 * (1.0 + std::abs(x))) break;
    }
    return x;
}

struct PyNode {
    double d;
    double alpha;
    bool valid;
};

// map (h, γ) to (d, α): γ·h of the prior-mean entropy comes from the
// discount, the rest from the concentration
PyNode py_params(double h, double gamma, double d_max) {
    PyNode node{0.0, 0.0, true};
    double from_d = gamma * h;
    double psi1 = digamma(1.0);
    if (from_d > 0.0) {
        double one_minus_d = inverse_digamma(psi1 - from_d);
        node.d = 1.0 - one_minus_d;
        if (node.d < 0.0) node.d = 0.0;
        if (node.d > d_max) node.valid = false;
    }
    node.alpha = inverse_digamma(psi1 + (1.0 - gamma) * h) - 1.0;
    if (node.alpha < 0.0) node.alpha = 0.0;
    return node;
}

WeightedMoments pym_sweep(const CountStats& cs, const std::vector<double>& hs,
                          std::size_t g_nodes, double d_max) {
    WeightedMoments wm;
    std::size_t nh = hs.size();
    wm.logw.assign(nh * g_nodes, kNegInf);
    wm.mean.assign(nh * g_nodes, 0.0);
    wm.second.assign(nh * g_nodes, 0.0);
    for (std::size_t i = 0; i < nh; ++i) {
        double h = hs[i];
        double lo = i == 0 ? hs[0] : hs[i - 1];
        double hi = i + 1 == nh ? hs[nh - 1] : hs[i + 1];
        double dh = 0.5 * (hi - lo);
        if (dh <= 0.0) continue;
        for (std::size_t j = 0; j < g_nodes; ++j) {
            double gamma = (double(j) + 0.5) / double(g_nodes);
            PyNode node = py_params(h, gamma, d_max);
            if (!node.valid) continue;
            double le = py_log_evidence(cs, node.d, node.alpha);
            if (le == kNegInf) continue;
            std::size_t idx = i * g_nodes + j;
            // flat prior in (h, γ): weight is just the cell area
            wm.logw[idx] = le + std::log(dh / double(g_nodes));
            EntropyMoments em = py_node_moments(cs, node.d, node.alpha);
            wm.mean[idx] = em.mean;
            wm.second[idx] = em.second;
        }
    }
    return wm;
}

// refinement window around the evidence peak of a 1-d sweep axis
std::pair<double, double> peak_window(const std::vector<double>& axis,
                                      const std::vector<double>& logw,
                                      std::size_t stride, double drop) {
    double mx = kNegInf;
    for (double lw : logw) mx = std::max(mx, lw);
    std::size_t n = axis.size();
    std::size_t lo = n, hi = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double row = kNegInf;
        for (std::size_t j = 0; j < stride; ++j)
            row = std::max(row, logw[i * stride + j]);
        if (row > mx - drop) {
            lo = std::min(lo, i);
            hi = std::max(hi, i);
        }
    }
    lo = lo > 0 ? lo - 1 : 0;
    hi = hi + 1 < n ? hi + 1 : n - 1;
    double a = axis[lo], b = axis[hi];
    if (b <= a * (1.0 + 1e-9)) {
        a *= 0.5;
        b *= 2.0;
    }
    return {a, b};
}

// ------------------------------------------------ Gaussian profile fits --

struct Gauss1DFit {
    double amp = 0.0;
    double center = 0.0;
    double width = 0.0;
    double offset = 0.0;
    bool converged = false;
};

// Levenberg-Marquardt on amp·exp(−(x−c)²/(2w²)) + offset
Gauss1DFit fit_gaussian_profile(std::span<const double> x, std::span<const double> y) {
    std::size_t n = x.size();
    Gauss1DFit f;
    if (n < 5) return f;

    double ymin = y[0], ymax = y[0];
    std::size_t imax = 0;
    for (std::size_t i = 1; i < n; ++i) {
        ymin = std::min(ymin, y[i]);
        if (y[i] > ymax) {
            ymax = y[i];
            imax = i;
        }
    }
    f.offset = ymin;
    f.amp = std::max(ymax - ymin, 1e-12);
    f.center = x[imax];
    double wsum = 0.0, wvar = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double w = std::max(y[i] - f.offset, 0.0);
        wsum += w;
        wvar += w * (x[i] - f.center) * (x[i] - f.center);
    }
    f.width = wsum > 0.0 ? std::sqrt(wvar / wsum) : (x[n - 1] - x[0]) / 6.0;
    if (!(f.width > 0.0)) f.width = (x[n - 1] - x[0]) / 6.0;

    double lambda = 1e-3;
    auto chi2 = [&](const Gauss1DFit& g) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double z = (x[i] - g.center) / g.width;
            double r = g.amp * std::exp(-0.5 * z * z) + g.offset - y[i];
            s += r * r;
        }
        return s;
    };
    double best = chi2(f);
    for (int iter = 0; iter < 200; ++iter) {
        double jtj[4][4] = {};
        double jtr[4] = {};
        for (std::size_t i = 0; i < n; ++i) {
            double z = (x[i] - f.center) / f.width;
            double e = std::exp(-0.5 * z * z);
            double r = f.amp * e + f.offset - y[i];
            double jac[4] = {e, f.amp * e * z / f.width,
                             f.amp * e * z * z / f.width, 1.0};
            for (int p = 0; p < 4; ++p) {
                jtr[p] += jac[p] * r;
                for (int r2 = 0; r2 < 4; ++r2) jtj[p][r2] += jac[p] * jac[r2];
            }
        }
        double m[4][5];
        for (int p = 0; p < 4; ++p) {
            for (int r2 = 0; r2 < 4; ++r2)
                m[p][r2] = jtj[p][r2] + (p == r2 ? lambda * (jtj[p][p] + 1e-12) : 0.0);
            m[p][4] = -jtr[p];
        }
        // Gaussian elimination with partial pivoting
        bool singular = false;
        for (int col = 0; col < 4; ++col) {
            int piv = col;
            for (int r2 = col + 1; r2 < 4; ++r2)
                if (std::abs(m[r2][col]) > std::abs(m[piv][col])) piv = r2;
            if (std::abs(m[piv][col]) < 1e-30) {
                singular = true;
                break;
            }
            std::swap(m[piv], m[col]);
            for (int r2 = 0; r2 < 4; ++r2) {
                if (r2 == col) continue;
                double fac = m[r2][col] / m[col][col];
                for (int c2 = col; c2 < 5; ++c2) m[r2][c2] -= fac * m[col][c2];
            }
        }
        if (singular) break;
        Gauss1DFit trial = f;
        trial.amp += m[0][4] / m[0][0];
        trial.center += m[1][4] / m[1][1];
        trial.width += m[2][4] / m[2][2];
        trial.offset += m[3][4] / m[3][3];
        trial.width = std::abs(trial.width);
        if (!(trial.width > 1e-12)) trial.width = f.width;
        double c = chi2(trial);
        if (c < best) {
            double rel = (best - c) / (best + 1e-30);
            f = trial;
            best = c;
            lambda = std::max(lambda * 0.3, 1e-12);
            if (rel < 1e-12) {
                f.converged = true;
                break;
            }
        } else {
            lambda *= 10.0;
            if (lambda > 1e12) break;
        }
    }
    f.converged = std::isfinite(f.amp + f.center + f.width + f.offset) &&
                  f.width > 0.0;
    return f;
}

// Ridge cross-section model: narrow correlated Gaussian on top of the broad
// accidental hump (itself Gaussian in the difference/sum coordinate), sharing
// one center, plus a constant offset.  Returns the narrow width; falls back
// to the single-Gaussian fit when the second component is degenerate.
struct RidgeFit {
    double center = 0.0;
    double width = 0.0;
    bool converged = false;
};

RidgeFit fit_ridge_profile(const std::vector<double>& x, const std::vector<double>& y,
                           double min_width) {
    Gauss1DFit single = fit_gaussian_profile(x, y);
    RidgeFit out{single.center, single.width, single.converged};
    if (!single.converged) return out;

    std::size_t n = x.size();

    // broad-component seed from the offset-subtracted second moment; the
    // converged single-Gaussian width tracks the narrow ridge, not the hump
    double ymin = y[0];
    for (double v : y) ymin = std::min(ymin, v);
    double wsum = 0.0, mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double w = std::max(y[i] - ymin, 0.0);
        wsum += w;
        mu += w * x[i];
    }
    mu = wsum > 0.0 ? mu / wsum : single.center;
    double mvar = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        mvar += std::max(y[i] - ymin, 0.0) * (x[i] - mu) * (x[i] - mu);
    double moment_sd = wsum > 0.0 ? std::sqrt(mvar / wsum) : 3.0 * single.width;

    // p = {a1, c, w1, a2, w2, off}
    double p[6] = {0.0, single.center, 0.75 * single.width,
                   0.0, std::max(3.0 * single.width, moment_sd), single.offset};
    {
        // amplitudes and offset are linear: seed them by least squares at the
        // initial centers/widths
        double g[3][4] = {};
        for (std::size_t i = 0; i < n; ++i) {
            double z1 = (x[i] - p[1]) / p[2], z2 = (x[i] - p[1]) / p[4];
            double b[3] = {std::exp(-0.5 * z1 * z1), std::exp(-0.5 * z2 * z2), 1.0};
            for (int a = 0; a < 3; ++a) {
                g[a][3] += b[a] * y[i];
                for (int c = 0; c < 3; ++c) g[a][c] += b[a] * b[c];
            }
        }
        for (int col = 0; col < 3; ++col) {
            int piv = col;
            for (int r2 = col + 1; r2 < 3; ++r2)
                if (std::abs(g[r2][col]) > std::abs(g[piv][col])) piv = r2;
            if (std::abs(g[piv][col]) < 1e-30) break;
            std::swap(g[piv], g[col]);
            for (int r2 = 0; r2 < 3; ++r2) {
                if (r2 == col) continue;
                double fac = g[r2][col] / g[col][col];
                for (int c2 = col; c2 < 4; ++c2) g[r2][c2] -= fac * g[col][c2];
            }
        }
        if (g[0][0] != 0.0 && g[1][1] != 0.0 && g[2][2] != 0.0) {
            p[0] = g[0][3] / g[0][0];
            p[3] = g[1][3] / g[1][1];
            p[5] = g[2][3] / g[2][2];
        }
        if (!(p[0] > 0.0)) p[0] = 0.8 * single.amp;
        if (!(p[3] > 0.0)) p[3] = 0.05 * single.amp;
    }
    auto chi2 = [&](const double* q) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double z1 = (x[i] - q[1]) / q[2], z2 = (x[i] - q[1]) / q[4];
            double r = q[0] * std::exp(-0.5 * z1 * z1) +
                       q[3] * std::exp(-0.5 * z2 * z2) + q[5] - y[i];
            s += r * r;
        }
        return s;
    };
    double single_chi2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double z = (x[i] - single.center) / single.width;
        double r = single.amp * std::exp(-0.5 * z * z) + single.offset - y[i];
        single_chi2 += r * r;
    }

    double best = chi2(p);
    double lambda = 1e-3;
    bool improved = false;
    for (int iter = 0; iter < 300; ++iter) {
        double jtj[6][6] = {};
        double jtr[6] = {};
        for (std::size_t i = 0; i < n; ++i) {
            double z1 = (x[i] - p[1]) / p[2], z2 = (x[i] - p[1]) / p[4];
            double e1 = std::exp(-0.5 * z1 * z1), e2 = std::exp(-0.5 * z2 * z2);
            double r = p[0] * e1 + p[3] * e2 + p[5] - y[i];
            double jac[6] = {e1,
                             p[0] * e1 * z1 / p[2] + p[3] * e2 * z2 / p[4],
                             p[0] * e1 * z1 * z1 / p[2],
                             e2,
                             p[3] * e2 * z2 * z2 / p[4],
                             1.0};
            for (int a = 0; a < 6; ++a) {
                jtr[a] += jac[a] * r;
                for (int b = 0; b < 6; ++b) jtj[a][b] += jac[a] * jac[b];
            }
        }
        double m[6][7];
        for (int a = 0; a < 6; ++a) {
            for (int b = 0; b < 6; ++b)
                m[a][b] = jtj[a][b] + (a == b ? lambda * (jtj[a][a] + 1e-12) : 0.0);
            m[a][6] = -jtr[a];
        }
        bool singular = false;
        for (int col = 0; col < 6; ++col) {
            int piv = col;
            for (int r2 = col + 1; r2 < 6; ++r2)
                if (std::abs(m[r2][col]) > std::abs(m[piv][col])) piv = r2;
            if (std::abs(m[piv][col]) < 1e-30) {
                singular = true;
                break;
            }
            std::swap(m[piv], m[col]);
            for (int r2 = 0; r2 < 6; ++r2) {
                if (r2 == col) continue;
                double fac = m[r2][col] / m[col][col];
                for (int c2 = col; c2 < 7; ++c2) m[r2][c2] -= fac * m[col][c2];
            }
        }
        if (singular) break;
        double trial[6];
        for (int a = 0; a < 6; ++a) trial[a] = p[a] + m[a][6] / m[a][a];
        trial[2] = std::abs(trial[2]);
        trial[4] = std::abs(trial[4]);
        if (!(trial[2] > 1e-12)) trial[2] = p[2];
        if (!(trial[4] > 1e-12)) trial[4] = p[4];
        double c = chi2(trial);
        if (c < best) {
            double rel = (best - c) / (best + 1e-30);
            for (int a = 0; a < 6; ++a) p[a] = trial[a];
            best = c;
            improved = true;
            lambda = std::max(lambda * 0.3, 1e-12);
            if (rel < 1e-12) break;
        } else {
            lambda *= 10.0;
            if (lambda > 1e12) break;
        }
    }

    bool finite = true;
    for (double v : p) finite = finite && std::isfinite(v);
    if (!improved || !finite || best >= single_chi2) return out;

    double a_narrow = p[2] <= p[4] ? p[0] : p[3];
    double w_narrow = std::min(p[2], p[4]);
    // a vanishing or sub-cell narrow component means there is no resolvable
    // ridge on top of the hump; keep the single-Gaussian width instead
    if (a_narrow < 0.02 * (std::abs(p[0]) + std::abs(p[3])) || w_narrow < min_width)
        return out;
    out.center = p[1];
    out.width = w_narrow;
    return out;
}

// ----------------------------------------------- Poisson amplitude fit --

struct PoissonAmpFit {
    double alpha = 0.0;
    double beta = 0.0;
    double var_alpha = 0.0;
    double var_beta = 0.0;
    double cov_ab = 0.0;
    std::size_t iterations = 0;
};

PoissonAmpFit fit_poisson_amplitudes(std::span<const std::int64_t> counts,
                                     std::span<const double> tmpl,
                                     const MlOptions& opts) {
    std::size_t c = counts.size();
    double n_total = 0.0;
    for (std::int64_t v : counts) n_total += double(v);
    double beta_floor = 1e-12 * (n_total / double(c) + 1.0);

    PoissonAmpFit fit;
    fit.alpha = 0.9 * n_total;
    fit.beta = std::max(0.1 * n_total / double(c), beta_floor);

    auto loglike = [&](double a, double b) {
        double ll = -(a + b * double(c));  // ΣT = 1
        for (std::size_t i = 0; i < c; ++i)
            if (counts[i] > 0) ll += double(counts[i]) * std::log(a * tmpl[i] + b);
        return ll;
    };

    double ll = loglike(fit.alpha, fit.beta);
    bool converged = false;
    for (std::size_t iter = 0; iter < opts.max_iter; ++iter) {
        fit.iterations = iter + 1;
        double ga = -1.0, gb = -double(c);
        double haa = 0.0, hab = 0.0, hbb = 0.0;
        for (std::size_t i = 0; i < c; ++i) {
            if (counts[i] == 0) continue;
            double lam = fit.alpha * tmpl[i] + fit.beta;
            double w = double(counts[i]) / lam;
            ga += w * tmpl[i];
            gb += w;
            double w2 = w / lam;
            haa += w2 * tmpl[i] * tmpl[i];
            hab += w2 * tmpl[i];
            hbb += w2;
        }
        // Active-set Newton: a parameter pinned to its boundary with the
        // gradient pointing outward is dropped from the system, otherwise
        // the clamped 2-D step is not an ascent direction and the
        // backtracking line search stalls.
        bool alpha_pinned = fit.alpha <= 0.0 && ga <= 0.0;
        bool beta_pinned = fit.beta <= beta_floor * (1.0 + 1e-9) && gb <= 0.0;
        if (alpha_pinned && beta_pinned) {
            converged = true;
            break;
        }
        double da, db;
        if (alpha_pinned) {
            da = 0.0;
            db = gb / (hbb + 1e-300);
        } else if (beta_pinned) {
            da = ga / (haa + 1e-300);
            db = 0.0;
        } else {
            double det = haa * hbb - hab * hab;
            if (det > 1e-30 * (haa * hbb + 1e-30)) {
                da = (hbb * ga - hab * gb) / det;
                db = (haa * gb - hab * ga) / det;
            } else {
                // degenerate curvature; fall back to a gradient step
                double scale = 1.0 / (haa + hbb + 1e-30);
                da = ga * scale;
                db = gb * scale;
            }
        }
        double step = 1.0;
        double na = fit.alpha, nb = fit.beta, nll = ll;
        for (int bt = 0; bt < 60; ++bt) {
            na = std::max(fit.alpha + step * da, 0.0);
            nb = std::max(fit.beta + step * db, beta_floor);
            nll = loglike(na, nb);
            if (nll >= ll - 1e-12 * std::abs(ll)) break;
            step *= 0.5;
        }
        double move = std::abs(na - fit.alpha) / (std::abs(fit.alpha) + 1.0) +
                      std::abs(nb - fit.beta) / (std::abs(fit.beta) + 1.0);
        fit.alpha = na;
        fit.beta = nb;
        ll = nll;
        if (move < opts.rel_tol) {
            converged = true;
            break;
        }
    }
    require(converged, ErrorCategory::Fit,
            "Poisson amplitude fit did not converge");

    // expected Fisher information at the optimum
    double iaa = 0.0, iab = 0.0, ibb = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
        double lam = fit.alpha * tmpl[i] + fit.beta;
        iaa += tmpl[i] * tmpl[i] / lam;
        iab += tmpl[i] / lam;
        ibb += 1.0 / lam;
    }
    double det = iaa * ibb - iab * iab;
    if (det > 0.0) {
        fit.var_alpha = ibb / det;
        fit.var_beta = iaa / det;
        fit.cov_ab = -iab / det;
    }
    return fit;
}

struct RateEntropy {
    double bits;
    double sigma_bits;
};

// entropy of p_c = λ_c / Λ with λ = α·T + β, plus delta-method uncertainty
RateEntropy rate_entropy(const PoissonAmpFit& fit, std::span<const double> tmpl) {
    std::size_t c = tmpl.size();
    std::vector<double> ones(c, 1.0);
    double lam_tot = fit.alpha + fit.beta * double(c);
    double s_bits = kernels::mix_xlog2x_sum(fit.alpha, tmpl, fit.beta, ones);
    double s_nats = s_bits / kLog2E;  // Σ λ ln λ
    double h_nats = std::log(lam_tot) - s_nats / lam_tot;

    double sa = 0.0, sb = 0.0;  // Σ λ' (ln λ + 1)
    for (std::size_t i = 0; i < c; ++i) {
        double lam = fit.alpha * tmpl[i] + fit.beta;
        double l = lam > 0.0 ? std::log(lam) + 1.0 : 0.0;
        sa += tmpl[i] * l;
        sb += l;
    }
    double inv = 1.0 / lam_tot;
    double da = inv - (sa * lam_tot - s_nats) * inv * inv;
    double db = double(c) * inv - (sb * lam_tot - s_nats * double(c)) * inv * inv;
    double var = da * da * fit.var_alpha + db * db * fit.var_beta +
                 2.0 * da * db * fit.cov_ab;
    return RateEntropy{h_nats * kLog2E, std::sqrt(std::max(var, 0.0)) * kLog2E};
}

std::vector<double> as_doubles(std::span<const std::int64_t> v) {
    return std::vector<double>(v.begin(), v.end());
}

}  // namespace

const char* estimator_name(Estimator e) {
    switch (e) {
        case Estimator::Plugin: return "plugin";
        case Estimator::Nsb: return "nsb";
        case Estimator::Pym: return "pym";
        case Estimator::Ml: return "ml";
    }
    return "?";
}

Estimator estimator_from_name(const std::string& s) {
    if (s == "plugin") return Estimator::Plugin;
    if (s == "nsb") return Estimator::Nsb;
    if (s == "pym") return Estimator::Pym;
    if (s == "ml") return Estimator::Ml;
    fail(ErrorCategory::Format, "unknown estimator '" + s + "'");
}

EntropyEstimate plugin_entropy(std::span<const std::int64_t> counts,
                               const PluginOptions& opts) {
    CountStats cs = count_stats(counts);
    require(cs.n > 0, ErrorCategory::Input, "plugin entropy of an empty histogram");

    EntropyEstimate est;
    est.estimator = Estimator::Plugin;
    est.n_samples = cs.n;
    est.support = counts.size();
    est.bits = plugin_bits(counts, cs.n);

    if (opts.resamples >= 2) {
        std::vector<std::int64_t> occ;
        occ.reserve(cs.occupied);
        for (std::int64_t c : counts)
            if (c > 0) occ.push_back(c);

        // multinomial resampling via sorted uniform spacings: one pass of
        // exponential gaps per resample instead of N binary searches
        std::size_t n = std::size_t(cs.n);
        std::vector<double> gaps(n + 1);
        std::vector<std::int64_t> resampled(occ.size());
        Rng rng(opts.seed, 0x706c7567ULL);
        double mean = 0.0, m2 = 0.0;
        for (std::size_t r = 0; r < opts.resamples; ++r) {
            double total = 0.0;
            for (std::size_t i = 0; i <= n; ++i) {
                gaps[i] = rng.exponential(1.0);
                total += gaps[i];
            }
            std::fill(resampled.begin(), resampled.end(), 0);
            double cum = 0.0;
            std::size_t bin = 0;
            double threshold = double(occ[0]) / double(cs.n) * total;
            std::int64_t cum_count = occ[0];
            for (std::size_t i = 0; i < n; ++i) {
                cum += gaps[i];
                while (cum >= threshold && bin + 1 < occ.size()) {
                    ++bin;
                    cum_count += occ[bin];
                    threshold = double(cum_count) / double(cs.n) * total;
                }
                ++resampled[bin];
            }
            double h = plugin_bits(resampled, cs.n);
            double d = h - mean;
            mean += d / double(r + 1);
            m2 += d * (h - mean);
        }
        est.sigma_bits = std::sqrt(m2 / double(opts.resamples - 1));
    }
    return est;
}

EntropyEstimate nsb_entropy(std::span<const std::int64_t> counts, std::size_t n_bins,
                            const NsbOptions& opts) {
    CountStats cs = count_stats(counts);
    require(cs.n > 0, ErrorCategory::Input, "nsb entropy of an empty histogram");
    require(n_bins >= 2, ErrorCategory::Input, "nsb needs a support of at least 2 bins");
    require(std::int64_t(n_bins) >= cs.occupied, ErrorCategory::Input,
            "nsb support smaller than the number of occupied bins");
    require(opts.coarse_nodes >= 16 && opts.nodes >= 64, ErrorCategory::Input,
            "nsb needs at least 64 quadrature nodes");

    std::vector<double> coarse = log_spaced(opts.beta_min, opts.beta_max, opts.coarse_nodes);
    WeightedMoments wm = nsb_sweep(cs, n_bins, coarse);

    auto [lo, hi] = peak_window(coarse, wm.logw, 1, 35.0);
    WeightedMoments fine = nsb_sweep(cs, n_bins, log_spaced(lo, hi, opts.nodes));

    double mean, var;
    double neff = fine.reduce(mean, var);
    require(neff >= opts.min_effective_nodes, ErrorCategory::Accuracy,
            "nsb posterior collapsed onto too few quadrature nodes");

    EntropyEstimate est;
    est.estimator = Estimator::Nsb;
    est.n_samples = cs.n;
    est.support = n_bins;
    est.bits = mean * kLog2E;
    est.sigma_bits = std::sqrt(var) * kLog2E;
    return est;
}

EntropyEstimate pym_entropy(std::span<const std::int64_t> counts,
                            const PymOptions& opts) {
    CountStats cs = count_stats(counts);
    require(cs.n > 0, ErrorCategory::Input, "pym entropy of an empty histogram");
    if (cs.occupied == cs.n)
        fail(ErrorCategory::Accuracy,
             "pym posterior is improper without repeated counts (N=" +
                 std::to_string(cs.n) + ", occupied=" + std::to_string(cs.occupied) +
                 "); collect coincidences or coarsen the grid");

    double h_max = std::log(1e4 * double(cs.n));
    std::vector<double> coarse_h = log_spaced(opts.h_min, h_max, opts.coarse_h_nodes);
    WeightedMoments wm = pym_sweep(cs, coarse_h, opts.coarse_g_nodes, opts.d_max);

    auto [lo, hi] = peak_window(coarse_h, wm.logw, opts.coarse_g_nodes, 30.0);
    hi = std::min(hi, h_max);
    std::vector<double> fine_h = log_spaced(lo, hi, opts.h_nodes);
    WeightedMoments fine = pym_sweep(cs, fine_h, opts.g_nodes, opts.d_max);

    // evidence still rising at the top of the prior-entropy axis means the
    // truncation, not the data, would set the answer
    if (hi >= h_max * (1.0 - 1e-9)) {
        std::size_t arg = 0;
        for (std::size_t i = 1; i < fine.logw.size(); ++i)
            if (fine.logw[i] > fine.logw[arg]) arg = i;
        require(arg / opts.g_nodes + 1 < opts.h_nodes, ErrorCategory::Accuracy,
                "pym evidence never peaked within the prior-entropy range; data "
                "look coincidence-free");
    }

    double mean, var;
    double neff = fine.reduce(mean, var);
    // a sharply peaked evidence can underfill one refinement pass; keep
    // zooming onto the peak until the quadrature resolves it
    for (int pass = 0; pass < 6 && neff < opts.min_effective_nodes; ++pass) {
        auto [l2, h2] = peak_window(fine_h, fine.logw, opts.g_nodes, 12.0);
        h2 = std::min(h2, h_max);
        if (h2 - l2 >= (hi - lo) * 0.9) break;
        lo = l2;
        hi = h2;
        fine_h = log_spaced(lo, hi, opts.h_nodes);
        fine = pym_sweep(cs, fine_h, opts.g_nodes, opts.d_max);
        neff = fine.reduce(mean, var);
    }
    require(neff >= opts.min_effective_nodes, ErrorCategory::Accuracy,
            "pym posterior collapsed onto too few quadrature nodes");

    EntropyEstimate est;
    est.estimator = Estimator::Pym;
    est.n_samples = cs.n;
    est.support = 0;  // support-free by construction
    est.bits = mean * kLog2E;
    est.sigma_bits = std::sqrt(var) * kLog2E;
    return est;
}

EntropyEstimate ml_entropy(const JointHistogram& hist, const MlOptions& opts,
                           MlFit* fit_out) {
    require(hist.n_total > 0, ErrorCategory::Input, "ml entropy of an empty histogram");
    const GridSpec& ga = hist.axis_a;
    const GridSpec& gb = hist.axis_b;
    require(std::abs(ga.delta - gb.delta) < 1e-9 * ga.delta, ErrorCategory::Input,
            "ml requires equal cell sizes on both axes");

    // marginal shape fits give centers and the marginal width
    auto fit_axis = [&](const std::vector<std::int64_t>& m, const GridSpec& g) {
        std::vector<double> xs(g.count), ys(m.begin(), m.end());
        for (std::size_t i = 0; i < g.count; ++i) xs[i] = g.center(i);
        return fit_gaussian_profile(xs, ys);
    };
    Gauss1DFit fa = fit_axis(hist.marginal_a(), ga);
    Gauss1DFit fb = fit_axis(hist.marginal_b(), gb);
    require(fa.converged && fb.converged, ErrorCategory::Fit,
            "marginal shape fit failed");
    double s_marg = 0.5 * (fa.width + fb.width);

    // conditional width from the ridge profile: difference coordinate for
    // position (correlation), sum coordinate for momentum (anti-correlation)
    std::size_t na = ga.count, nb = gb.count;
    bool use_diff = hist.basis == Basis::Position;
    std::size_t nprof = na + nb - 1;
    std::vector<double> px(nprof), py(nprof, 0.0);
    for (std::size_t ia = 0; ia < na; ++ia)
        for (std::size_t ib = 0; ib < nb; ++ib) {
            std::size_t k = use_diff ? (nb - 1 - ib) + ia : ia + ib;
            py[k] += double(hist.at(ia, ib));
        }
    for (std::size_t k = 0; k < nprof; ++k) {
        // coordinate of the profile bin: a−b (difference) or a+b (sum)
        double idx = double(k) - (use_diff ? double(nb - 1) : 0.0);
        px[k] = use_diff ? (ga.center(0) - gb.center(0)) + idx * ga.delta
                         : (ga.center(0) + gb.center(0)) + idx * ga.delta;
    }
    RidgeFit fprof = fit_ridge_profile(px, py, 0.5 * ga.delta);
    require(fprof.converged, ErrorCategory::Fit, "ridge profile fit failed");

    // undo the cell-quantization variance picked up by fitting point-model
    // Gaussians to binned data (difference/sum of two binned coordinates
    // carries 2·Δ²/12, a marginal carries Δ²/12); the template integrates the
    // continuous density over cells, so it must not inherit it
    double d2 = ga.delta * ga.delta;
    double w_cond = std::sqrt(
        std::max(fprof.width * fprof.width - d2 / 6.0, 0.0625 * d2));
    s_marg = std::sqrt(std::max(s_marg * s_marg - d2 / 12.0, 0.0625 * d2));

    // template: pure correlated state with the fitted widths
    double conj = 4.0 * s_marg * s_marg - w_cond * w_cond;
    conj = std::max(conj, 0.25 * s_marg * s_marg);  // degenerate shape guard
    double narrow = w_cond, wide = 1.0 / std::sqrt(conj);
    BiphotonState tmpl_state;
    if (hist.basis == Basis::Position) {
        tmpl_state = BiphotonState{narrow, wide * 1e3, 1.0};
    } else {
        tmpl_state = BiphotonState{wide * 1e3, narrow, 1.0};
    }
    std::vector<double> tmpl = cell_probabilities(tmpl_state, hist.basis, ga, gb,
                                                  fa.center, fb.center, opts.gl_order);
    double tsum = kernels::moments(tmpl).sum;
    require(tsum > 0.0, ErrorCategory::Fit, "ml template vanished on the grid");
    for (double& t : tmpl) t /= tsum;

    PoissonAmpFit fit = fit_poisson_amplitudes(hist.counts, tmpl, opts);
    RateEntropy re = rate_entropy(fit, tmpl);

    if (fit_out) {
        fit_out->alpha = fit.alpha;
        fit_out->beta = fit.beta;
        fit_out->alpha_sigma = std::sqrt(std::max(fit.var_alpha, 0.0));
        fit_out->beta_sigma = std::sqrt(std::max(fit.var_beta, 0.0));
        fit_out->center_a = fa.center;
        fit_out->center_b = fb.center;
        fit_out->cond_width = w_cond;
        fit_out->marg_width = s_marg;
        fit_out->iterations = fit.iterations;
    }

    EntropyEstimate est;
    est.estimator = Estimator::Ml;
    est.n_samples = hist.n_total;
    est.support = na * nb;
    est.bits = re.bits;
    est.sigma_bits = re.sigma_bits;
    return est;
}

EntropyEstimate ml_entropy_1d(std::span<const std::int64_t> counts, const GridSpec& grid,
                              const MlOptions& opts, MlFit* fit_out) {
    grid.validate();
    require(counts.size() == grid.count, ErrorCategory::Input,
            "marginal count vector does not match the grid");
    std::int64_t n = 0;
    for (std::int64_t c : counts) n += c;
    require(n > 0, ErrorCategory::Input, "ml entropy of an empty histogram");

    std::vector<double> xs(grid.count);
    for (std::size_t i = 0; i < grid.count; ++i) xs[i] = grid.center(i);
    std::vector<double> ys = as_doubles(counts);
    Gauss1DFit g = fit_gaussian_profile(xs, ys);
    require(g.converged, ErrorCategory::Fit, "marginal shape fit failed");
    // strip the binning variance before re-integrating over cells
    double width = std::sqrt(std::max(g.width * g.width - grid.delta * grid.delta / 12.0,
                                      0.0625 * grid.delta * grid.delta));

    // cell-integrated Gaussian template
    std::vector<double> tmpl(grid.count);
    double inv = 1.0 / (width * std::sqrt(2.0));
    for (std::size_t i = 0; i < grid.count; ++i) {
        double lo = (grid.low_edge(i) - g.center) * inv;
        double hi = (grid.low_edge(i) + grid.delta - g.center) * inv;
        tmpl[i] = 0.5 * (std::erf(hi) - std::erf(lo));
    }
    double tsum = kernels::moments(tmpl).sum;
    require(tsum > 0.0, ErrorCategory::Fit, "ml template vanished on the grid");
    for (double& t : tmpl) t /= tsum;

    PoissonAmpFit fit = fit_poisson_amplitudes(counts, tmpl, opts);
    RateEntropy re = rate_entropy(fit, tmpl);

    if (fit_out) {
        fit_out->alpha = fit.alpha;
        fit_out->beta = fit.beta;
        fit_out->alpha_sigma = std::sqrt(std::max(fit.var_alpha, 0.0));
        fit_out->beta_sigma = std::sqrt(std::max(fit.var_beta, 0.0));
        fit_out->center_a = g.center;
        fit_out->marg_width = width;
        fit_out->iterations = fit.iterations;
    }

    EntropyEstimate est;
    est.estimator = Estimator::Ml;
    est.n_samples = n;
    est.support = grid.count;
    est.bits = re.bits;
    est.sigma_bits = re.sigma_bits;
    return est;
}

ConditionalEntropy conditional_entropy(const JointHistogram& hist, Estimator est,
                                       const EstimatorOptions& opts) {
    require(hist.n_total > 0, ErrorCategory::Input,
            "conditional entropy of an empty histogram");
    std::vector<std::int64_t> marg = hist.marginal_a();
    std::size_t a_joint = hist.axis_a.count * hist.axis_b.count;

    ConditionalEntropy out;
    out.estimator = est;
    switch (est) {
        case Estimator::Plugin: {
            PluginOptions po = opts.plugin;
            out.joint = plugin_entropy(hist.counts, po);
            po.seed ^= 0x6d617267ULL;
            out.marginal = plugin_entropy(marg, po);
            break;
        }
        case Estimator::Nsb:
            out.joint = nsb_entropy(hist.counts, a_joint, opts.nsb);
            out.marginal = nsb_entropy(marg, hist.axis_a.count, opts.nsb);
            break;
        case Estimator::Pym:
            out.joint = pym_entropy(hist.counts, opts.pym);
            out.marginal = pym_entropy(marg, opts.pym);
            break;
        case Estimator::Ml:
            out.joint = ml_entropy(hist, opts.ml);
            out.marginal = ml_entropy_1d(marg, hist.axis_a, opts.ml);
            break;
    }
    out.bits = out.joint.bits - out.marginal.bits;
    out.sigma_bits = std::hypot(out.joint.sigma_bits, out.marginal.sigma_bits);
    return out;
}

namespace detail {

double lgamma_diff(double x, double delta) {
    if (delta == 0.0) return 0.0;
    if (x < 1e6)
        return std::lgamma(x + delta) - std::lgamma(x);
    // Stirling on both terms; the naive difference loses digits once the
    // individual lgamma values dwarf their difference
    double xd = x + delta;
    return (x - 0.5) * std::log1p(delta / x) + delta * std::log(xd) - delta -
           delta / (12.0 * x * xd);
}

PosteriorEntropyMoments dirichlet_posterior_entropy(std::span<const std::int64_t> counts,
                                                    std::size_t n_bins, double beta) {
    require(beta > 0.0, ErrorCategory::Domain, "Dirichlet pseudocount must be positive");
    CountStats cs = count_stats(counts);
    require(n_bins >= std::size_t(cs.occupied), ErrorCategory::Input,
            "support smaller than the number of occupied cells");
    EntropyMoments em = nsb_node_moments(cs, n_bins, beta);
    return {em.mean, em.second};
}

double py_prior_entropy_mean(double d, double b) {
    return digamma(1.0 + b) - digamma(1.0 - d);
}

// second moment via the size-biased stick-breaking representation
double py_prior_entropy_second(double d, double b) {
    double a = 1.0 - d;
    double s1 = 1.0 + b;       // Beta(1−d, b+d) parameter sum
    double s2 = 1.0 + b + d;   // Beta(1−d, b+2d) parameter sum
    double q1 = b + d;
    double self = (a / s1) * (std::pow(digamma(a + 1.0) - digamma(s1 + 1.0), 2) +
                              trigamma(a + 1.0) - trigamma(s1 + 1.0));
    double e_lnx_given_rest = digamma(a) - digamma(s1 + 1.0);
    double cross1 = (q1 / s1) * (e_lnx_given_rest * (digamma(q1 + 1.0) - digamma(s1 + 1.0)) -
                                 trigamma(s1 + 1.0));
    double cross2 = (q1 / s1) * e_lnx_given_rest * (digamma(a) - digamma(s2));
    return self + cross1 + cross2;
}

}  // namespace detail

}  // namespace eprsteer
