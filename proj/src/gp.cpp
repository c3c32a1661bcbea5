#include "rpm/gp.hpp"

#include <cmath>
#include <cstring>

#include "rpm/common.hpp"
#include "rpm/smallmat.hpp"

namespace rpm::gp {

KernelNet::KernelNet(nn::ParamStore& ps, const std::string& prefix, KernelNetConfig cfg)
    : cfg_(std::move(cfg)) {
    int in = cfg_.input_dim;
    for (std::size_t i = 0; i < cfg_.hidden.size(); ++i) {
        layers_.emplace_back(ps, prefix + ".fc" + std::to_string(i), in, cfg_.hidden[i]);
        in = cfg_.hidden[i];
    }
    layers_.emplace_back(ps, prefix + ".out", in, cfg_.output_dim);
}

ad::Var KernelNet::apply(ad::Graph& g, ad::Var locations) const {
    ad::Var h = locations;
    for (std::size_t i = 0; i + 1 < layers_.size(); ++i) h = g.relu_(layers_[i].apply(g, h));
    return g.tanh_(layers_.back().apply(g, h));
}

void KernelNet::forward_plain(const double* in, double* out) const {
    std::vector<double> cur(in, in + cfg_.input_dim);
    std::vector<double> next;
    for (std::size_t li = 0; li < layers_.size(); ++li) {
        const Tensor& w = layers_[li].w->value;
        const Tensor& b = layers_[li].b->value;
        const int fo = w.dim(0), fi = w.dim(1);
        next.assign(static_cast<std::size_t>(fo), 0.0);
        for (int o = 0; o < fo; ++o) {
            double s = b[static_cast<std::size_t>(o)];
            for (int i = 0; i < fi; ++i) s += w.at2(o, i) * cur[static_cast<std::size_t>(i)];
            next[static_cast<std::size_t>(o)] =
                (li + 1 < layers_.size()) ? (s > 0.0 ? s : 0.0) : std::tanh(s);
        }
        cur.swap(next);
    }
    std::memcpy(out, cur.data(), cur.size() * sizeof(double));
}

Tensor KernelNet::forward_plain_batch(const Tensor& locations) const {
    const int n = locations.dim(0);
    Tensor out(Shape{n, cfg_.output_dim});
    for (int i = 0; i < n; ++i)
        forward_plain(locations.data() + static_cast<std::size_t>(i) * cfg_.input_dim,
                      out.data() + static_cast<std::size_t>(i) * cfg_.output_dim);
    return out;
}

GpParams GpParams::create(nn::ParamStore& ps, KernelNetConfig cfg) {
    GpParams p;
    p.log_output_scale = &ps.add("kernel.output_scale.log", Shape{1});
    p.log_bandwidth = &ps.add("kernel.bandwidth.log", Shape{1});
    p.net = KernelNet(ps, "kernel.net", std::move(cfg));
    return p;
}

LocationGrid::LocationGrid(Tensor r, Tensor c) : rows(std::move(r)), cols(std::move(c)) {
    if (rows.ndim() != 2 || cols.ndim() != 2 || rows.dim(0) != 3 || cols.dim(0) != 3 ||
        rows.dim(1) != cols.dim(1))
        throw ContractError("LocationGrid expects rows[3,d] and cols[3,d]");
}

Tensor LocationGrid::flatten() const {
    const int dl = loc_dim();
    Tensor out(Shape{kCells, 2 * dl});
    for (int k = 0; k < kCells; ++k) {
        const int i = cell_row(k), j = cell_col(k);
        std::memcpy(out.data() + static_cast<std::size_t>(k) * 2 * dl,
                    rows.data() + static_cast<std::size_t>(i) * dl, dl * sizeof(double));
        std::memcpy(out.data() + static_cast<std::size_t>(k) * 2 * dl + dl,
                    cols.data() + static_cast<std::size_t>(j) * dl, dl * sizeof(double));
    }
    return out;
}

namespace {

void check_finite(const double* p, int n, const char* what) {
    for (int i = 0; i < n; ++i)
        if (!std::isfinite(p[i])) throw NumericalError(std::string(what) + " has non-finite entries");
}

double kernel_from_features(const double* fa, const double* fb, int f, double l_var,
                            double sigma_sq) {
    double d = 0.0;
    for (int i = 0; i < f; ++i) {
        const double t = fa[i] - fb[i];
        d += t * t;
    }
    return l_var * std::exp(-d / (2.0 * sigma_sq));
}

Tensor kernel_matrix_plain(const Tensor& fa, const Tensor& fb, double l_var, double sigma_sq) {
    const int m = fa.dim(0), n = fb.dim(0), f = fa.dim(1);
    Tensor k(Shape{m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            k.at2(i, j) = kernel_from_features(fa.data() + static_cast<std::size_t>(i) * f,
                                               fb.data() + static_cast<std::size_t>(j) * f, f,
                                               l_var, sigma_sq);
    return k;
}

Tensor cholesky_with_escalation(const Tensor& k, const GpParams& params, double* jitter_out) {
    const double l_var = params.output_var();
    double eps = params.jitter_rel * l_var;
    const double eps_max = params.jitter_rel_max * l_var;
    while (true) {
        Tensor a = k;
        for (int i = 0; i < a.dim(0); ++i) a.at2(i, i) += eps;
        Tensor l = a;
        if (la::cholesky_lower_inplace(l)) {
            if (jitter_out) *jitter_out = eps;
            return l;
        }
        if (eps >= eps_max) {
            double dmin = a.at2(0, 0), dmax = dmin;
            for (int i = 1; i < a.dim(0); ++i) {
                dmin = std::min(dmin, a.at2(i, i));
                dmax = std::max(dmax, a.at2(i, i));
            }
            throw NumericalError("covariance factorization failed at jitter " +
                                 std::to_string(eps) + " (diag range [" + std::to_string(dmin) +
                                 ", " + std::to_string(dmax) + "])");
        }
        eps *= 10.0;
    }
}

}  // namespace

double kernel_eval(const double* loc_a, const double* loc_b, const GpParams& params) {
    const int in = params.net.config().input_dim;
    check_finite(loc_a, in, "kernel location");
    check_finite(loc_b, in, "kernel location");
    const int f = params.net.config().output_dim;
    std::vector<double> fa(static_cast<std::size_t>(f)), fb(static_cast<std::size_t>(f));
    params.net.forward_plain(loc_a, fa.data());
    params.net.forward_plain(loc_b, fb.data());
    const double sigma = params.bandwidth();
    return kernel_from_features(fa.data(), fb.data(), f, params.output_var(), sigma * sigma);
}

Tensor build_covariance(const LocationGrid& grid, const GpParams& params, double* jitter_out) {
    const Tensor locs = grid.flatten();
    check_finite(locs.data(), static_cast<int>(locs.numel()), "grid locations");
    const Tensor feats = params.net.forward_plain_batch(locs);
    const double sigma = params.bandwidth();
    Tensor k = kernel_matrix_plain(feats, feats, params.output_var(), sigma * sigma);
    double eps = 0.0;
    (void)cholesky_with_escalation(k, params, &eps);
    for (int i = 0; i < kCells; ++i) k.at2(i, i) += eps;
    if (jitter_out) *jitter_out = eps;
    return k;
}

Tensor panel_sampling(const LocationGrid& grid, const GpParams& params, Rng& rng) {
    const Tensor locs = grid.flatten();
    const Tensor feats = params.net.forward_plain_batch(locs);
    const double sigma = params.bandwidth();
    Tensor k = kernel_matrix_plain(feats, feats, params.output_var(), sigma * sigma);
    Tensor l = cholesky_with_escalation(k, params, nullptr);
    double u[kCells];
    rng.fill_gauss(u, kCells);
    Tensor z(Shape{kGridSide, kGridSide});
    for (int i = 0; i < kCells; ++i) {
        double s = 0.0;
        for (int j = 0; j <= i; ++j) s += l.at2(i, j) * u[j];
        z[static_cast<std::size_t>(i)] = s;
    }
    return z;
}

GpConditional gp_condition(const Tensor& locations, const GpParams& params,
                           const std::vector<int>& observed, const std::vector<double>& values,
                           const std::vector<int>& targets) {
    if (observed.empty()) throw ContractError("gp_condition: observed set is empty");
    if (observed.size() != values.size())
        throw ContractError("gp_condition: observed/values size mismatch");
    if (targets.empty()) throw ContractError("gp_condition: target set is empty");
    for (int o : observed)
        for (int t : targets)
            if (o == t) throw ContractError("gp_condition: observed and target sets overlap");

    check_finite(locations.data(), static_cast<int>(locations.numel()), "locations");
    for (double v : values)
        if (!std::isfinite(v)) throw NumericalError("gp_condition: non-finite observed value");

    const int n_obs = static_cast<int>(observed.size());
    const int n_tgt = static_cast<int>(targets.size());
    const Tensor feats = params.net.forward_plain_batch(locations);
    const int f = feats.dim(1);
    const double sigma = params.bandwidth();
    const double sigma_sq = sigma * sigma;
    const double l_var = params.output_var();

    auto feat_row = [&](int idx) { return feats.data() + static_cast<std::size_t>(idx) * f; };

    GpConditional out;
    out.obs_cov = Tensor(Shape{n_obs, n_obs});
    for (int a = 0; a < n_obs; ++a)
        for (int b = 0; b < n_obs; ++b)
            out.obs_cov.at2(a, b) =
                kernel_from_features(feat_row(observed[a]), feat_row(observed[b]), f, l_var, sigma_sq);
    out.cross_cov = Tensor(Shape{n_obs, n_tgt});
    for (int a = 0; a < n_obs; ++a)
        for (int b = 0; b < n_tgt; ++b)
            out.cross_cov.at2(a, b) =
                kernel_from_features(feat_row(observed[a]), feat_row(targets[b]), f, l_var, sigma_sq);
    Tensor k_tt(Shape{n_tgt, n_tgt});
    for (int a = 0; a < n_tgt; ++a)
        for (int b = 0; b < n_tgt; ++b)
            k_tt.at2(a, b) =
                kernel_from_features(feat_row(targets[a]), feat_row(targets[b]), f, l_var, sigma_sq);

    Tensor l = cholesky_with_escalation(out.obs_cov, params, &out.jitter);
    for (int i = 0; i < n_obs; ++i) out.obs_cov.at2(i, i) += out.jitter;

    out.observed = Tensor(Shape{n_obs});
    for (int i = 0; i < n_obs; ++i) out.observed[static_cast<std::size_t>(i)] = values[i];
    out.prior_var = Tensor(Shape{n_tgt});
    for (int i = 0; i < n_tgt; ++i) out.prior_var[static_cast<std::size_t>(i)] = k_tt.at2(i, i);

    Tensor alpha(Shape{n_obs, 1});
    for (int i = 0; i < n_obs; ++i) alpha.at2(i, 0) = values[static_cast<std::size_t>(i)];
    la::trisolve_lower_mat(l, alpha);
    Tensor v = out.cross_cov;
    la::trisolve_lower_mat(l, v);

    out.mean = Tensor(Shape{n_tgt});
    for (int t = 0; t < n_tgt; ++t) {
        double s = 0.0;
        for (int i = 0; i < n_obs; ++i) s += v.at2(i, t) * alpha.at2(i, 0);
        out.mean[static_cast<std::size_t>(t)] = s;
    }
    out.cov = Tensor(Shape{n_tgt, n_tgt});
    for (int a = 0; a < n_tgt; ++a)
        for (int b = 0; b < n_tgt; ++b) {
            double s = 0.0;
            for (int i = 0; i < n_obs; ++i) s += v.at2(i, a) * v.at2(i, b);
            out.cov.at2(a, b) = k_tt.at2(a, b) - s;
        }
    for (int a = 0; a < n_tgt; ++a)
        for (int b = a + 1; b < n_tgt; ++b) {
            const double m = 0.5 * (out.cov.at2(a, b) + out.cov.at2(b, a));
            out.cov.at2(a, b) = m;
            out.cov.at2(b, a) = m;
        }
    for (int a = 0; a < n_tgt; ++a)
        if (out.cov.at2(a, a) < 0.0) out.cov.at2(a, a) = 0.0;
    return out;
}

std::pair<double, double> marginal_prior_params(const LocationGrid& grid, const GpParams& params,
                                                int cell) {
    if (cell < 0 || cell >= kCells) throw ContractError("marginal_prior_params: bad cell index");
    const Tensor locs = grid.flatten();
    const double* loc = locs.data() + static_cast<std::size_t>(cell) * locs.dim(1);
    return {0.0, kernel_eval(loc, loc, params)};
}

void condition_joint(const Tensor& mean, const Tensor& cov, const std::vector<int>& observed,
                     const std::vector<double>& values, double jitter, Tensor& post_mean,
                     Tensor& post_cov) {
    const int n = mean.dim(0);
    std::vector<bool> is_obs(static_cast<std::size_t>(n), false);
    for (int o : observed) is_obs[static_cast<std::size_t>(o)] = true;
    std::vector<int> rest;
    for (int i = 0; i < n; ++i)
        if (!is_obs[static_cast<std::size_t>(i)]) rest.push_back(i);
    const int no = static_cast<int>(observed.size());
    const int nr = static_cast<int>(rest.size());

    Tensor c(Shape{no, no});
    for (int a = 0; a < no; ++a)
        for (int b = 0; b < no; ++b) c.at2(a, b) = cov.at2(observed[a], observed[b]);
    for (int a = 0; a < no; ++a) c.at2(a, a) += jitter;
    Tensor l = c;
    if (!la::cholesky_lower_inplace(l)) throw NumericalError("condition_joint: factorization failed");

    Tensor r(Shape{no, nr});
    for (int a = 0; a < no; ++a)
        for (int b = 0; b < nr; ++b) r.at2(a, b) = cov.at2(observed[a], rest[b]);

    Tensor resid(Shape{no, 1});
    for (int a = 0; a < no; ++a)
        resid.at2(a, 0) = values[static_cast<std::size_t>(a)] - mean[static_cast<std::size_t>(observed[a])];
    la::trisolve_lower_mat(l, resid);
    Tensor v = r;
    la::trisolve_lower_mat(l, v);

    post_mean = Tensor(Shape{nr});
    for (int t = 0; t < nr; ++t) {
        double s = mean[static_cast<std::size_t>(rest[t])];
        for (int a = 0; a < no; ++a) s += v.at2(a, t) * resid.at2(a, 0);
        post_mean[static_cast<std::size_t>(t)] = s;
    }
    post_cov = Tensor(Shape{nr, nr});
    for (int a = 0; a < nr; ++a)
        for (int b = 0; b < nr; ++b) {
            double s = cov.at2(rest[a], rest[b]);
            for (int i = 0; i < no; ++i) s -= v.at2(i, a) * v.at2(i, b);
            post_cov.at2(a, b) = s;
        }
    for (int a = 0; a < nr; ++a)
        for (int b = a + 1; b < nr; ++b) {
            const double m = 0.5 * (post_cov.at2(a, b) + post_cov.at2(b, a));
            post_cov.at2(a, b) = m;
            post_cov.at2(b, a) = m;
        }
}

namespace graph {

KernelScalars kernel_scalars(ad::Graph& g, const GpParams& params) {
    KernelScalars ks;
    ks.l_sq = g.exp_(g.mul_scalar(g.param(*params.log_output_scale), 2.0));
    ks.sigma_sq = g.exp_(g.mul_scalar(g.param(*params.log_bandwidth), 2.0));
    return ks;
}

ad::Var kernel_matrix(ad::Graph& g, ad::Var feats_a, ad::Var feats_b, const KernelScalars& ks) {
    ad::Var d = g.pairwise_sqdist(feats_a, feats_b);
    ad::Var scaled = g.scale_div(d, g.mul_scalar(ks.sigma_sq, 2.0));
    return g.scale(g.exp_(g.neg(scaled)), ks.l_sq);
}

ad::Var jittered_cholesky(ad::Graph& g, ad::Var k, const KernelScalars& ks,
                          const GpParams& params, double* jitter_out) {
    const Tensor& kv = g.val(k);
    const double l_var = params.output_var();
    double rel = params.jitter_rel;
    while (true) {
        Tensor trial = kv;
        for (int i = 0; i < trial.dim(0); ++i) trial.at2(i, i) += rel * l_var;
        Tensor l = trial;
        if (la::cholesky_lower_inplace(l)) break;
        if (rel >= params.jitter_rel_max)
            throw NumericalError("jittered_cholesky: factorization failed at jitter " +
                                 std::to_string(rel * l_var));
        rel *= 10.0;
    }
    if (jitter_out) *jitter_out = rel * l_var;
    const int n = kv.dim(0);
    Tensor eye(Shape{n, n});
    for (int i = 0; i < n; ++i) eye.at2(i, i) = 1.0;
    ad::Var jitter_mat = g.scale(g.constant(eye), g.mul_scalar(ks.l_sq, rel));
    return g.cholesky(g.add(k, jitter_mat));
}

ConditionalMoments conditional_last(ad::Graph& g, ad::Var k, ad::Var t_observed,
                                    const KernelScalars& ks, const GpParams& params) {
    const int n = g.val(k).dim(0);
    const int o = n - 1;
    if (g.val(t_observed).numel() != static_cast<std::size_t>(o))
        throw ContractError("conditional_last: observed vector size mismatch");
    ad::Var k_obs_rows = g.slice0(k, 0, o);  // [o, n]
    ad::Var k_oo = g.slice_axis(k_obs_rows, o, n, 1, 0, o);
    ad::Var k_ot = g.slice_axis(k_obs_rows, o, n, 1, o, n);  // [o,1,1]
    ad::Var l = jittered_cholesky(g, g.reshape(k_oo, Shape{o, o}), ks, params, nullptr);
    ad::Var alpha = g.trisolve_lower(l, g.reshape(t_observed, Shape{o, 1}));
    ad::Var v = g.trisolve_lower(l, g.reshape(k_ot, Shape{o, 1}));
    ad::Var va = g.reshape(alpha, Shape{o});
    ad::Var vv = g.reshape(v, Shape{o});
    ConditionalMoments out;
    out.mean = g.dot(vv, va);
    ad::Var var_raw = g.sub(g.reshape(ks.l_sq, Shape{1}), g.dot(vv, vv));
    // Variance floor at the jitter scale, kept differentiable:
    // max(a, floor) = floor + relu(a - floor).
    ad::Var floor = g.reshape(g.mul_scalar(ks.l_sq, params.jitter_rel), Shape{1});
    out.var = g.add(floor, g.relu_(g.sub(var_raw, floor)));
    return out;
}

ad::Var sample_from_cholesky(ad::Graph& g, ad::Var chol_lower, const Tensor& u) {
    return g.matvec(chol_lower, g.constant(u));
}

}  // namespace graph

}  // namespace rpm::gp
