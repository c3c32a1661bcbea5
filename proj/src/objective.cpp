#include "rpm/objective.hpp"

#include <cmath>

#include "rpm/common.hpp"

namespace rpm::objective {

using ad::Graph;
using ad::Var;

double gaussian_kl_diag(const std::vector<double>& q_mean, const std::vector<double>& q_var,
                        const std::vector<double>& p_mean, const std::vector<double>& p_var) {
    const std::size_t n = q_mean.size();
    if (q_var.size() != n || p_mean.size() != n || p_var.size() != n)
        throw ContractError("gaussian_kl_diag: length mismatch");
    double kl = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!(q_var[i] > 0.0) || !(p_var[i] > 0.0))
            throw ContractError("gaussian_kl_diag: variances must be positive");
        const double dm = q_mean[i] - p_mean[i];
        kl += 0.5 * (std::log(p_var[i] / q_var[i]) + (q_var[i] + dm * dm) / p_var[i] - 1.0);
    }
    return kl;
}

double recon_loglik(const std::vector<double>& x, const std::vector<double>& x_hat,
                    double sigma_x) {
    if (x.size() != x_hat.size()) throw ContractError("recon_loglik: shape mismatch");
    const double var = sigma_x * sigma_x;
    double ss = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x[i] - x_hat[i];
        ss += d * d;
    }
    const double n = static_cast<double>(x.size());
    return -0.5 * n * std::log(2.0 * M_PI * var) - 0.5 * ss / var;
}

namespace {

// KL(N(m, e^lv) || N(0, pv)) summed over a tensor, with a constant prior
// variance.
Var kl_to_const_prior(Graph& g, Var mean, Var log_var, double prior_var) {
    Var term = g.mul_scalar(g.add(g.exp_(log_var), g.square(mean)), 1.0 / prior_var);
    Var s = g.sub(g.sum(term), g.sum(log_var));
    const double numel = static_cast<double>(g.val(mean).numel());
    return g.mul_scalar(g.add_scalar(s, numel * (std::log(prior_var) - 1.0)), 0.5);
}

// Same with the prior variance as a scalar graph node (the GP marginal l^2).
Var kl_to_scalar_prior(Graph& g, Var mean, Var log_var, Var prior_var) {
    Var term = g.scale_div(g.add(g.exp_(log_var), g.square(mean)), prior_var);
    Var s = g.sub(g.sum(term), g.sum(log_var));
    const double numel = static_cast<double>(g.val(mean).numel());
    Var log_pv = g.log_(prior_var);
    Var c = g.mul_scalar(g.reshape(log_pv, Shape{1}), numel);
    return g.mul_scalar(g.add_scalar(g.add(s, c), -numel), 0.5);
}

Var gaussian_recon(Graph& g, Var decoded, const Tensor& target, double sigma_x) {
    Var diff = g.sub(decoded, g.constant(target));
    const double var = sigma_x * sigma_x;
    Var ss = g.mul_scalar(g.sum(g.square(diff)), -0.5 / var);
    const double n = static_cast<double>(target.numel());
    return g.add_scalar(ss, -0.5 * n * std::log(2.0 * M_PI * var));
}

Tensor draw_gauss(Rng& rng, Shape shape) {
    Tensor t(std::move(shape));
    rng.fill_gauss(t.data(), t.numel());
    return t;
}

}  // namespace

LossBreakdown ElboVars::breakdown(const Graph& g, double beta, double gamma, int batch) const {
    LossBreakdown b;
    const double inv = 1.0 / static_cast<double>(batch);
    b.recon = g.val(recon)[0] * inv;
    b.kl_lambda = g.val(kl_lambda)[0] * inv;
    b.kl_z_marginal = g.val(kl_z_marginal)[0] * inv;
    b.elbo = g.val(elbo)[0] * inv;
    b.beta = beta;
    b.gamma = gamma;
    return b;
}

ElboVars elbo_graph(Graph& g, model::LatentModel& model, const Tensor& panels, double beta,
                    double gamma, Rng& rng, const ElboOptions& opts) {
    const auto& cfg = model.config();
    if (cfg.beta_vae) throw ContractError("elbo_graph: model is in beta-VAE mode");
    if (panels.ndim() != 4 || panels.dim(1) != 9 || panels.dim(2) != cfg.image_size)
        throw ContractError("elbo_graph expects panels [B,9,H,W]");
    const int B = panels.dim(0);
    const int H = cfg.image_size, W = cfg.image_size;
    const int D = cfg.d_z, dl = cfg.d_loc;
    const std::size_t hw = static_cast<std::size_t>(H) * W;

    // Fixed draw order: content, rows, cols, answer.
    const Tensor u_z = draw_gauss(rng, {B * 8, D});
    const Tensor u_row = draw_gauss(rng, {B, 3, D, dl});
    const Tensor u_col = draw_gauss(rng, {B, 3, D, dl});
    const Tensor u_ans = draw_gauss(rng, {B, D});

    // Context cells (first 8 per panel) and full panels as constants.
    Tensor ctx(Shape{B * 8, 1, H, W});
    for (int b = 0; b < B; ++b)
        std::copy(panels.data() + static_cast<std::size_t>(b) * 9 * hw,
                  panels.data() + (static_cast<std::size_t>(b) * 9 + 8) * hw,
                  ctx.data() + static_cast<std::size_t>(b) * 8 * hw);
    Var ctx_v = g.constant(std::move(ctx));

    auto content = model.encode_content_g(g, ctx_v, 8, opts.training);
    Var z_ctx = g.add(content.mean,
                      g.mul(g.exp_(g.mul_scalar(content.log_var, 0.5)), g.constant(u_z)));

    std::vector<std::uint8_t> mask(static_cast<std::size_t>(B) * 8, 1);
    auto locs = model.encode_locations_g(g, ctx_v, 8, mask, opts.training);
    Var lam_row = g.add(locs.row_mean,
                        g.mul(g.exp_(g.mul_scalar(locs.row_log_var, 0.5)), g.constant(u_row)));
    Var lam_col = g.add(locs.col_mean,
                        g.mul(g.exp_(g.mul_scalar(locs.col_log_var, 0.5)), g.constant(u_col)));

    // Kernel features over every (panel, dimension, cell) location.
    auto ks = gp::graph::kernel_scalars(g, model.gp());
    Var all_locs = g.assemble_cell_locations(lam_row, lam_col);  // [B*D*9, 2dl]
    Var feats = model.gp().net.apply(g, all_locs);

    // Per (panel, dimension): conditional of the answer cell given the rest.
    std::vector<Var> z_rows;
    z_rows.reserve(static_cast<std::size_t>(B) * 2);
    for (int b = 0; b < B; ++b) {
        std::vector<Var> answer_dims;
        answer_dims.reserve(static_cast<std::size_t>(D));
        Var z_ctx_b = g.slice0(z_ctx, b * 8, (b + 1) * 8);
        for (int d = 0; d < D; ++d) {
            Var feats_bd = g.slice0(feats, (b * D + d) * 9, (b * D + d + 1) * 9);
            Var k = gp::graph::kernel_matrix(g, feats_bd, feats_bd, ks);
            Var t_obs = g.select_col(z_ctx_b, d);
            auto cm = gp::graph::conditional_last(g, k, t_obs, ks, model.gp());
            Var z33 = g.add(cm.mean, g.mul_scalar(g.sqrt_(cm.var),
                                                  u_ans[static_cast<std::size_t>(b) * D + d]));
            if (opts.freeze_answer_path) z33 = g.constant(g.val(z33));
            answer_dims.push_back(g.reshape(z33, Shape{1}));
        }
        z_rows.push_back(z_ctx_b);
        z_rows.push_back(g.reshape(g.concat0(answer_dims), Shape{1, D}));
    }
    Var z_all = g.concat0(z_rows);  // [B*9, D], panel-major with the answer last

    Var decoded = model.decode_g(g, z_all, 9, opts.training);

    ElboVars out;
    out.recon = gaussian_recon(g, decoded, panels.reshaped({B * 9, 1, H, W}), cfg.sigma_x);
    Var kl_row = kl_to_const_prior(g, locs.row_mean, locs.row_log_var,
                                   cfg.sigma_lambda * cfg.sigma_lambda);
    Var kl_col = kl_to_const_prior(g, locs.col_mean, locs.col_log_var,
                                   cfg.sigma_lambda * cfg.sigma_lambda);
    out.kl_lambda = g.add(kl_row, kl_col);
    // Marginal matching: the GP prior marginal at every context cell is
    // N(0, l^2) for the RBF diagonal.
    out.kl_z_marginal = kl_to_scalar_prior(g, content.mean, content.log_var, ks.l_sq);

    out.elbo = g.sub(out.recon, g.add(g.mul_scalar(out.kl_lambda, beta),
                                      g.mul_scalar(out.kl_z_marginal, gamma)));
    out.loss = g.mul_scalar(out.elbo, -1.0 / static_cast<double>(B));
    return out;
}

ElboVars beta_vae_elbo_graph(Graph& g, model::LatentModel& model, const Tensor& panels,
                             double beta, Rng& rng, const ElboOptions& opts) {
    const auto& cfg = model.config();
    if (panels.ndim() != 4 || panels.dim(1) != 9)
        throw ContractError("beta_vae_elbo_graph expects panels [B,9,H,W]");
    const int B = panels.dim(0);
    const int H = cfg.image_size, W = cfg.image_size;
    const int D = cfg.d_z;

    const Tensor u_z = draw_gauss(rng, {B * 9, D});
    Tensor cells = panels.reshaped({B * 9, 1, H, W});
    Var cells_v = g.constant(cells);

    auto content = model.encode_content_g(g, cells_v, 9, opts.training);
    Var z = g.add(content.mean,
                  g.mul(g.exp_(g.mul_scalar(content.log_var, 0.5)), g.constant(u_z)));
    Var decoded = model.decode_g(g, z, 9, opts.training);

    ElboVars out;
    out.recon = gaussian_recon(g, decoded, cells, cfg.sigma_x);
    out.kl_z_marginal = kl_to_const_prior(g, content.mean, content.log_var, 1.0);
    out.kl_lambda = g.scalar(0.0);
    out.elbo = g.sub(out.recon, g.mul_scalar(out.kl_z_marginal, beta));
    out.loss = g.mul_scalar(out.elbo, -1.0 / static_cast<double>(B));
    return out;
}

LossBreakdown elbo(model::LatentModel& model, const Tensor& panels, double beta, double gamma,
                   Rng& rng, const ElboOptions& opts) {
    Tensor p = panels;
    if (p.ndim() == 3) p = p.reshaped({1, p.dim(0), p.dim(1), p.dim(2)});
    Graph g(false);
    ElboVars v = model.config().beta_vae ? beta_vae_elbo_graph(g, model, p, beta, rng, opts)
                                         : elbo_graph(g, model, p, beta, gamma, rng, opts);
    return v.breakdown(g, beta, gamma, p.dim(0));
}

}  // namespace rpm::objective
