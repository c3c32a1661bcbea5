#pragma once

#include "json.hpp"
#include "rpm/model.hpp"

// The training objective: reconstruction likelihood, location KL, and the
// marginal-matching latent KL, combined as elbo = recon - beta * kl_lambda -
// gamma * kl_z_marginal.
namespace rpm::objective {

struct LossBreakdown {
    double recon = 0.0;
    double kl_lambda = 0.0;
    double kl_z_marginal = 0.0;
    double elbo = 0.0;
    double beta = 0.0;
    double gamma = 0.0;

    nlohmann::json to_json() const {
        return {{"recon", recon},
                {"kl_lambda", kl_lambda},
                {"kl_z_marginal", kl_z_marginal},
                {"elbo", elbo}};
    }
};

// Closed-form KL between diagonal Gaussians, summed over dimensions.
// Variances are plain (not log); nonpositive entries are contract errors.
double gaussian_kl_diag(const std::vector<double>& q_mean, const std::vector<double>& q_var,
                        const std::vector<double>& p_mean, const std::vector<double>& p_var);

// Gaussian log-likelihood of x under means x_hat with isotropic variance
// sigma_x^2, constant term included.
double recon_loglik(const std::vector<double>& x, const std::vector<double>& x_hat,
                    double sigma_x);

struct ElboOptions {
    bool training = true;
    // Test hook: detaches the predicted answer code so no gradient flows back
    // through the GP conditional.
    bool freeze_answer_path = false;
};

struct ElboVars {
    ad::Var recon;
    ad::Var kl_lambda;
    ad::Var kl_z_marginal;
    ad::Var elbo;       // recon - beta*kl_lambda - gamma*kl_z_marginal
    ad::Var loss;       // -elbo / batch (optimization target)
    LossBreakdown breakdown(const ad::Graph& g, double beta, double gamma, int batch) const;
};

// Builds the per-batch ELBO graph over panels [B,9,H,W] in [0,1]. Random
// draws come from `rng` in a fixed order (content u, row u, col u, answer u),
// so the value is a deterministic function of (panels, params, rng state).
ElboVars elbo_graph(ad::Graph& g, model::LatentModel& model, const Tensor& panels, double beta,
                    double gamma, Rng& rng, const ElboOptions& opts = {});

// Per-cell beta-VAE objective (standard-normal prior, no GP terms); the
// returned kl_z_marginal is the per-cell prior KL and kl_lambda is zero.
ElboVars beta_vae_elbo_graph(ad::Graph& g, model::LatentModel& model, const Tensor& panels,
                             double beta, Rng& rng, const ElboOptions& opts = {});

// Convenience: single panel (or batch) value without gradients.
LossBreakdown elbo(model::LatentModel& model, const Tensor& panels, double beta, double gamma,
                   Rng& rng, const ElboOptions& opts = {});

}  // namespace rpm::objective
