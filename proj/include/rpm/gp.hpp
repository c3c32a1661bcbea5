#pragma once

#include <utility>
#include <vector>

#include "rpm/graph.hpp"
#include "rpm/nn.hpp"
#include "rpm/rng.hpp"
#include "rpm/tensor.hpp"

// Deep-kernel Gaussian-process machinery over the 3x3 latent grid. Every
// function here treats one latent dimension at a time: callers hand in that
// dimension's row/column locations. The feature network is shared across
// dimensions; per-dimension behaviour comes from the locations themselves.
namespace rpm::gp {

struct KernelNetConfig {
    int input_dim = 8;             // 2 * d_loc
    std::vector<int> hidden{32, 64, 64, 64};
    int output_dim = 8;
};

// MLP mapping a concatenated (row, col) location to kernel features, ReLU
// hidden activations and a bounded tanh output.
class KernelNet {
public:
    KernelNet() = default;
    KernelNet(nn::ParamStore& ps, const std::string& prefix, KernelNetConfig cfg);

    ad::Var apply(ad::Graph& g, ad::Var locations) const;  // [n, input_dim] -> [n, output_dim]
    void forward_plain(const double* in, double* out) const;
    Tensor forward_plain_batch(const Tensor& locations) const;  // [n, in] -> [n, out]

    const KernelNetConfig& config() const { return cfg_; }

private:
    KernelNetConfig cfg_;
    std::vector<nn::Linear> layers_;
};

// Kernel hyperparameters are stored as logs to keep the output scale and
// bandwidth positive.
struct GpParams {
    ad::Param* log_output_scale = nullptr;  // log l
    ad::Param* log_bandwidth = nullptr;     // log sigma
    KernelNet net;

    // Relative jitter: eps = jitter_rel * l^2, escalated by 10x up to
    // jitter_rel_max * l^2 when a factorization fails.
    double jitter_rel = 1e-6;
    double jitter_rel_max = 1e-2;

    static GpParams create(nn::ParamStore& ps, KernelNetConfig cfg);

    double output_scale() const { return std::exp(log_output_scale->value[0]); }
    double output_var() const { return std::exp(2.0 * log_output_scale->value[0]); }
    double bandwidth() const { return std::exp(log_bandwidth->value[0]); }
    double base_jitter() const { return jitter_rel * output_var(); }
};

// One latent dimension's locations: rows[3, d_loc], cols[3, d_loc]. Cell
// k = 3*i + j carries the concatenation (rows[i], cols[j]).
struct LocationGrid {
    Tensor rows;
    Tensor cols;

    LocationGrid() = default;
    LocationGrid(Tensor r, Tensor c);
    int loc_dim() const { return rows.dim(1); }
    // [9, 2*d_loc] in cell order.
    Tensor flatten() const;
};

// kappa(a, b) = l^2 exp(-||g(a) - g(b)||^2 / (2 sigma^2)).
double kernel_eval(const double* loc_a, const double* loc_b, const GpParams& params);

// Full 9x9 grid covariance with jitter already added to the diagonal.
// jitter_out reports the jitter that made the factorization succeed.
Tensor build_covariance(const LocationGrid& grid, const GpParams& params,
                        double* jitter_out = nullptr);

// Draws one 3x3 panel of latent values: z = L u with K + eps I = L L^T.
Tensor panel_sampling(const LocationGrid& grid, const GpParams& params, Rng& rng);

// Eq.-6-style noise-free conditional, generalized to arbitrary location sets
// and target subsets.
struct GpConditional {
    Tensor obs_cov;    // C (jittered) [o,o]
    Tensor cross_cov;  // R [o,t]
    Tensor observed;   // t [o]
    Tensor prior_var;  // d [t]
    Tensor mean;       // mu [t]
    Tensor cov;        // posterior covariance [t,t], symmetrized, diag >= 0
    double jitter = 0.0;

    double var(int i) const { return cov.at2(i, i); }
};

GpConditional gp_condition(const Tensor& locations, const GpParams& params,
                           const std::vector<int>& observed, const std::vector<double>& values,
                           const std::vector<int>& targets);

inline GpConditional gp_conditional(const LocationGrid& grid, const GpParams& params,
                                    const std::vector<int>& observed,
                                    const std::vector<double>& values,
                                    const std::vector<int>& targets) {
    return gp_condition(grid.flatten(), params, observed, values, targets);
}

// GP prior marginal at one cell: mean 0, variance kappa(loc_k, loc_k).
std::pair<double, double> marginal_prior_params(const LocationGrid& grid, const GpParams& params,
                                                int cell);

// Conditions an explicit joint Gaussian (mean, cov) on observed coordinates;
// returns the posterior over the remaining coordinates in their original
// relative order. Jitter is added to the observed block diagonal.
void condition_joint(const Tensor& mean, const Tensor& cov, const std::vector<int>& observed,
                     const std::vector<double>& values, double jitter, Tensor& post_mean,
                     Tensor& post_cov);

// ---------------------------------------------------------------------------
// Graph builders (training path). Shapes mirror the plain functions; all are
// differentiable with respect to locations and kernel parameters.
// ---------------------------------------------------------------------------
namespace graph {

// l^2 and sigma^2 as scalar graph nodes.
struct KernelScalars {
    ad::Var l_sq;
    ad::Var sigma_sq;
};
KernelScalars kernel_scalars(ad::Graph& g, const GpParams& params);

// features [n, f] -> kernel matrix [n, m] against features2 [m, f].
ad::Var kernel_matrix(ad::Graph& g, ad::Var feats_a, ad::Var feats_b, const KernelScalars& ks);

// Chooses the jitter level that factorizes K's value (escalating from the
// base), then emits graph nodes for chol(K + rel * l^2 * I). The jitter keeps
// its l^2 dependence inside the graph so gradients stay exact.
ad::Var jittered_cholesky(ad::Graph& g, ad::Var k, const KernelScalars& ks,
                          const GpParams& params, double* jitter_out);

// Conditional of the last index given the first o = n-1 (grid order): the
// training-time inference path. K is the full [n, n] kernel matrix node.
struct ConditionalMoments {
    ad::Var mean;  // [1]
    ad::Var var;   // [1], clamped to >= var_floor
};
ConditionalMoments conditional_last(ad::Graph& g, ad::Var k, ad::Var t_observed,
                                    const KernelScalars& ks, const GpParams& params);

// z = L u for a constant standard-normal draw u[9]; returns [9].
ad::Var sample_from_cholesky(ad::Graph& g, ad::Var chol_lower, const Tensor& u);

}  // namespace graph

}  // namespace rpm::gp
