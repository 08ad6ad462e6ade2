#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "eprsteer/coincidence.hpp"

namespace eprsteer {

enum class Estimator { Plugin, Nsb, Pym, Ml };

const char* estimator_name(Estimator e);
Estimator estimator_from_name(const std::string& s);

struct EntropyEstimate {
    double bits = 0.0;
    double sigma_bits = 0.0;  // one posterior/bootstrap standard deviation
    Estimator estimator = Estimator::Plugin;
    std::int64_t n_samples = 0;
    std::size_t support = 0;  // nominal bin count the estimate assumed
};

struct PluginOptions {
    std::size_t resamples = 200;
    std::uint64_t seed = 0x626f6f74ULL;
};

struct NsbOptions {
    std::size_t coarse_nodes = 160;  // first sweep over the concentration axis
    std::size_t nodes = 512;         // refined pass around the evidence peak
    double beta_min = 1e-10;
    double beta_max = 1e12;
    double min_effective_nodes = 8.0;
};

struct PymOptions {
    std::size_t coarse_h_nodes = 64;
    std::size_t coarse_g_nodes = 32;
    std::size_t h_nodes = 96;
    std::size_t g_nodes = 64;
    double h_min = 0.01;   // prior-mean entropy axis, nats
    double d_max = 0.95;   // discount cap keeping the EPPF finite
    double min_effective_nodes = 8.0;
};

struct MlOptions {
    std::size_t max_iter = 200;
    double rel_tol = 1e-8;
    int gl_order = 8;
};

struct EstimatorOptions {
    PluginOptions plugin;
    NsbOptions nsb;
    PymOptions pym;
    MlOptions ml;
};

// Empirical plugin (maximum-likelihood) entropy with multinomial-bootstrap
// uncertainty.  Biased low in the undersampled regime; kept as the baseline
// everything else is compared against.
EntropyEstimate plugin_entropy(std::span<const std::int64_t> counts,
                               const PluginOptions& opts = {});

// Dirichlet-mixture Bayesian estimate for a known support of n_bins cells
// (occupied or not).  Posterior mean and s.d. under a prior flat in the
// a-priori expected entropy, integrated over the concentration by
// log-spaced trapezoid nodes with refinement around the evidence peak.
EntropyEstimate nsb_entropy(std::span<const std::int64_t> counts, std::size_t n_bins,
                            const NsbOptions& opts = {});

// Pitman-Yor-mixture estimate for unknown/countable support.  Hyperprior is
// flat in (expected prior entropy h, tail-weight fraction γ); evidence via
// the exchangeable partition probability, posterior entropy moments in
// closed form per node.
EntropyEstimate pym_entropy(std::span<const std::int64_t> counts,
                            const PymOptions& opts = {});

// Two-stage parametric estimate: least-squares Gaussian shape fit
// (marginals plus the difference/sum profile), then Poisson maximum
// likelihood for the correlated amplitude and flat accidental floor on
// λ_c = α·T_c + β.  Entropy and its Fisher/delta-method uncertainty come
// from the fitted rates.
struct MlFit {
    double alpha = 0.0;  // expected correlated counts inside the grid
    double beta = 0.0;   // accidental floor per cell
    double alpha_sigma = 0.0;
    double beta_sigma = 0.0;
    double center_a = 0.0;
    double center_b = 0.0;
    double cond_width = 0.0;  // fitted conditional (ridge) width
    double marg_width = 0.0;  // fitted marginal width
    std::size_t iterations = 0;
};

EntropyEstimate ml_entropy(const JointHistogram& hist, const MlOptions& opts = {},
                           MlFit* fit_out = nullptr);

// 1-D counterpart used for marginals: Gaussian template on a single axis.
EntropyEstimate ml_entropy_1d(std::span<const std::int64_t> counts, const GridSpec& grid,
                              const MlOptions& opts = {}, MlFit* fit_out = nullptr);

// H(B|A) = H(A,B) − H(A) with the same estimator on both terms; the two
// uncertainties combine in quadrature (their covariance is ignored).
struct ConditionalEntropy {
    EntropyEstimate joint;
    EntropyEstimate marginal;
    double bits = 0.0;
    double sigma_bits = 0.0;
    Estimator estimator = Estimator::Plugin;
};

ConditionalEntropy conditional_entropy(const JointHistogram& hist, Estimator est,
                                       const EstimatorOptions& opts = {});

// Building blocks of the Bayesian estimators, exposed so they can be checked
// against independent oracles.  Not a stable interface.
namespace detail {

// lgamma(x + delta) − lgamma(x) without catastrophic cancellation at huge x
double lgamma_diff(double x, double delta);

struct PosteriorEntropyMoments {
    double mean_nats = 0.0;
    double second_nats2 = 0.0;  // E[H²], nats²
};

// Entropy moments of the Dir(counts + beta) posterior on n_bins cells; cells
// beyond the occupied ones carry the bare pseudocount beta.
PosteriorEntropyMoments dirichlet_posterior_entropy(std::span<const std::int64_t> counts,
                                                    std::size_t n_bins, double beta);

// mean / second moment (nats) of the entropy of one Pitman-Yor(d, b) draw
double py_prior_entropy_mean(double d, double b);
double py_prior_entropy_second(double d, double b);

}  // namespace detail

}  // namespace eprsteer
