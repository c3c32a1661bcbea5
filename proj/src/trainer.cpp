#include "rpm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace rpm::train {

namespace fs = std::filesystem;

nlohmann::json TrainConfig::to_json() const {
    return {{"learning_rate", learning_rate},
            {"batch_size", batch_size},
            {"max_epochs", max_epochs},
            {"max_steps", max_steps},
            {"seed", seed},
            {"beta", beta},
            {"gamma", gamma},
            {"model", model.to_json()},
            {"dataset_dir", dataset_dir},
            {"out_dir", out_dir},
            {"val_cadence_epochs", val_cadence_epochs},
            {"early_stop_patience", early_stop_patience},
            {"micro_batch", micro_batch}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.learning_rate = j.value("learning_rate", 1e-4);
    c.batch_size = j.value("batch_size", 256);
    c.max_epochs = j.value("max_epochs", 200);
    c.max_steps = j.value("max_steps", 0);
    c.seed = j.value("seed", std::uint64_t{0});
    c.beta = j.value("beta", 30.0);
    c.gamma = j.value("gamma", 30.0);
    if (j.contains("model")) c.model = model::ModelConfig::from_json(j["model"]);
    c.dataset_dir = j.value("dataset_dir", std::string{});
    c.out_dir = j.value("out_dir", std::string{});
    c.val_cadence_epochs = j.value("val_cadence_epochs", 1);
    c.early_stop_patience = j.value("early_stop_patience", 20);
    c.micro_batch = j.value("micro_batch", 16);
    return c;
}

Adam::Adam(nn::ParamStore& store, double lr, double beta1, double beta2, double eps)
    : store_(&store), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto* p : store_->params()) {
        m_.emplace_back(p->value.shape());
        v_.emplace_back(p->value.shape());
    }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    auto params = store_->params();
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        ad::Param& p = *params[pi];
        Tensor& m = m_[pi];
        Tensor& v = v_[pi];
        for (std::size_t i = 0; i < p.value.numel(); ++i) {
            const double g = p.grad[i];
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
            p.value[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
        }
    }
}

void Adam::save(std::vector<std::pair<std::string, Tensor>>& out, nlohmann::json& state) const {
    auto params = store_->params();
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        out.emplace_back("adam.m." + params[pi]->name, m_[pi]);
        out.emplace_back("adam.v." + params[pi]->name, v_[pi]);
    }
    state["adam"] = {{"t", t_}, {"lr", lr_}, {"beta1", beta1_}, {"beta2", beta2_}, {"eps", eps_}};
}

void Adam::load(const std::vector<std::pair<std::string, Tensor>>& tensors,
                const nlohmann::json& state) {
    const auto& a = state.at("adam");
    t_ = a.at("t").get<int>();
    lr_ = a.at("lr").get<double>();
    beta1_ = a.at("beta1").get<double>();
    beta2_ = a.at("beta2").get<double>();
    eps_ = a.at("eps").get<double>();
    auto params = store_->params();
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        bool found_m = false, found_v = false;
        for (const auto& [name, t] : tensors) {
            if (name == "adam.m." + params[pi]->name) {
                m_[pi] = t;
                found_m = true;
            } else if (name == "adam.v." + params[pi]->name) {
                v_[pi] = t;
                found_v = true;
            }
        }
        if (!found_m || !found_v)
            throw IoError("checkpoint lacks optimizer state for " + params[pi]->name);
    }
}

Tensor panels_tensor(const gen::PanelDataset& ds, const std::vector<int>& indices) {
    const int hw = ds.height * ds.width;
    Tensor out(Shape{static_cast<int>(indices.size()), 9, ds.height, ds.width});
    double* dst = out.data();
    for (int idx : indices) {
        const std::uint8_t* src = ds.panel(idx);
        for (int i = 0; i < 9 * hw; ++i) *dst++ = src[i] / 255.0;
    }
    return out;
}

namespace {

struct RngStateJson {
    static nlohmann::json dump(const Rng& r) {
        auto s = r.save_state();
        return std::vector<std::uint64_t>(s.begin(), s.end());
    }
    static void load(Rng& r, const nlohmann::json& j) {
        auto v = j.get<std::vector<std::uint64_t>>();
        std::array<std::uint64_t, 6> s;
        std::copy(v.begin(), v.end(), s.begin());
        r.load_state(s);
    }
};

// One optimizer step over `batch` panels in fixed micro-batch chunks.
// Returns the batch-mean loss breakdown.
objective::LossBreakdown batch_step(model::LatentModel& model, const Tensor& batch,
                                    const TrainConfig& cfg, Rng& sample_rng, bool beta_vae) {
    const int B = batch.dim(0);
    const int chunk = std::max(1, cfg.micro_batch);
    model.store().zero_grad();
    double recon = 0, kl_lam = 0, klz = 0, elbo_sum = 0;
    for (int b0 = 0; b0 < B; b0 += chunk) {
        const int bc = std::min(chunk, B - b0);
        Tensor sub(Shape{bc, 9, batch.dim(2), batch.dim(3)});
        const std::size_t panel_sz = batch.numel() / static_cast<std::size_t>(B);
        std::copy(batch.data() + b0 * panel_sz, batch.data() + (b0 + bc) * panel_sz, sub.data());
        ad::Graph g;
        objective::ElboVars v =
            beta_vae ? objective::beta_vae_elbo_graph(g, model, sub, cfg.beta, sample_rng)
                     : objective::elbo_graph(g, model, sub, cfg.beta, cfg.gamma, sample_rng);
        // Rescale so accumulated gradients equal the full-batch mean.
        ad::Var scaled = g.mul_scalar(v.loss, static_cast<double>(bc) / B);
        g.backward(scaled);
        recon += g.val(v.recon)[0];
        kl_lam += g.val(v.kl_lambda)[0];
        klz += g.val(v.kl_z_marginal)[0];
        elbo_sum += g.val(v.elbo)[0];
    }
    objective::LossBreakdown out;
    out.recon = recon / B;
    out.kl_lambda = kl_lam / B;
    out.kl_z_marginal = klz / B;
    out.elbo = elbo_sum / B;
    out.beta = cfg.beta;
    out.gamma = cfg.gamma;
    if (!std::isfinite(out.elbo))
        throw NumericalError("non-finite training loss; breakdown: " + out.to_json().dump());
    return out;
}

double validation_elbo(model::LatentModel& model, const gen::PanelDataset& val,
                       const TrainConfig& cfg, std::uint64_t step, bool beta_vae) {
    Rng rng = Rng::derive(cfg.seed, "validation", step);
    const int chunk = std::max(1, cfg.micro_batch);
    double total = 0.0;
    objective::ElboOptions opts;
    opts.training = false;
    for (int b0 = 0; b0 < val.n; b0 += chunk) {
        const int bc = std::min(chunk, val.n - b0);
        std::vector<int> idx(static_cast<std::size_t>(bc));
        for (int i = 0; i < bc; ++i) idx[static_cast<std::size_t>(i)] = b0 + i;
        Tensor sub = panels_tensor(val, idx);
        ad::Graph g(false);
        objective::ElboVars v =
            beta_vae ? objective::beta_vae_elbo_graph(g, model, sub, cfg.beta, rng, opts)
                     : objective::elbo_graph(g, model, sub, cfg.beta, cfg.gamma, rng, opts);
        total += g.val(v.elbo)[0];
    }
    return total / val.n;
}

struct LoopState {
    int epoch = 0;
    int step = 0;
    int vals_since_best = 0;
    double best_val_elbo = -std::numeric_limits<double>::infinity();
    int best_val_step = 0;
    bool stop = false;
};

TrainResult run_loop(model::LatentModel& model, Adam& adam, Rng& data_rng, Rng& sample_rng,
                     const TrainConfig& cfg, LoopState st, bool append_logs) {
    const bool beta_vae = cfg.model.beta_vae;
    gen::PanelDataset tr = gen::load_panels(cfg.dataset_dir + "/train.panels");
    gen::PanelDataset va = gen::load_panels(cfg.dataset_dir + "/val.panels");

    fs::create_directories(cfg.out_dir);
    {
        std::ofstream cf(cfg.out_dir + "/config.json");
        cf << cfg.to_json().dump(2) << "\n";
    }
    const std::string metrics_path = cfg.out_dir + "/metrics.jsonl";
    const std::string val_path = cfg.out_dir + "/val.jsonl";
    std::ofstream mf(metrics_path, append_logs ? std::ios::app : std::ios::trunc);
    std::ofstream vf(val_path, append_logs ? std::ios::app : std::ios::trunc);
    if (!mf || !vf) throw IoError("cannot open metrics logs under " + cfg.out_dir);

    const std::string best_path = cfg.out_dir + "/best.ckpt";
    const std::string last_path = cfg.out_dir + "/last.ckpt";

    auto save_state = [&](const std::string& path) {
        model::TrainingState ts;
        ts.present = true;
        adam.save(ts.extra_tensors, ts.state);
        ts.state["loop"] = {{"epoch", st.epoch},
                            {"step", st.step},
                            {"vals_since_best", st.vals_since_best},
                            {"best_val_elbo", st.best_val_elbo},
                            {"best_val_step", st.best_val_step}};
        ts.state["rng"] = {{"data", RngStateJson::dump(data_rng)},
                           {"sample", RngStateJson::dump(sample_rng)}};
        ts.state["config"] = cfg.to_json();
        model::save_checkpoint(path, model, &ts);
    };

    auto validate_and_checkpoint = [&]() {
        const double ve = validation_elbo(model, va, cfg, static_cast<std::uint64_t>(st.step),
                                          beta_vae);
        vf << nlohmann::json{{"step", st.step}, {"val_elbo", ve}}.dump() << "\n";
        vf.flush();
        if (ve > st.best_val_elbo) {
            st.best_val_elbo = ve;
            st.best_val_step = st.step;
            st.vals_since_best = 0;
            model::save_checkpoint(best_path, model, nullptr);
        } else if (++st.vals_since_best >= cfg.early_stop_patience) {
            st.stop = true;
        }
        save_state(last_path);
    };

    while (st.epoch < cfg.max_epochs && !st.stop) {
        std::vector<int> order(static_cast<std::size_t>(tr.n));
        for (int i = 0; i < tr.n; ++i) order[static_cast<std::size_t>(i)] = i;
        data_rng.shuffle(order);
        int consumed = 0;
        for (int b0 = 0; b0 < tr.n && !st.stop; b0 += cfg.batch_size) {
            const int bc = std::min(cfg.batch_size, tr.n - b0);
            std::vector<int> idx(order.begin() + b0, order.begin() + b0 + bc);
            Tensor batch = panels_tensor(tr, idx);
            objective::LossBreakdown lb = batch_step(model, batch, cfg, sample_rng, beta_vae);
            ++st.step;
            adam.step();
            consumed = b0 + bc;
            nlohmann::json row = lb.to_json();
            row["step"] = st.step;
            mf << row.dump() << "\n";
            if (cfg.max_steps > 0 && st.step >= cfg.max_steps) st.stop = true;
        }
        mf.flush();
        // Epoch counts only when the pass finished; checkpoints therefore sit
        // on epoch boundaries and a resumed run bit-matches an uninterrupted
        // one.
        const bool epoch_done = consumed >= tr.n;
        if (epoch_done) ++st.epoch;
        if ((epoch_done && st.epoch % cfg.val_cadence_epochs == 0) || st.stop ||
            st.epoch == cfg.max_epochs)
            validate_and_checkpoint();
    }
    if (st.best_val_step == 0 && st.step > 0 &&
        st.best_val_elbo == -std::numeric_limits<double>::infinity())
        validate_and_checkpoint();

    TrainResult res;
    res.best_checkpoint = best_path;
    res.last_checkpoint = last_path;
    res.metrics_path = metrics_path;
    res.val_metrics_path = val_path;
    res.best_val_elbo = st.best_val_elbo;
    res.best_val_step = st.best_val_step;
    res.steps = st.step;
    return res;
}

}  // namespace

TrainResult train(const TrainConfig& cfg) {
    if (cfg.dataset_dir.empty() || cfg.out_dir.empty())
        throw ConfigError("train: dataset_dir and out_dir are required");
    model::LatentModel model(cfg.model);
    Rng init_rng = Rng::derive(cfg.seed, "init");
    model.init_params(init_rng);
    Adam adam(model.store(), cfg.learning_rate);
    Rng data_rng = Rng::derive(cfg.seed, "data");
    Rng sample_rng = Rng::derive(cfg.seed, "sample");
    return run_loop(model, adam, data_rng, sample_rng, cfg, LoopState{}, /*append=*/false);
}

TrainResult resume(const std::string& checkpoint_path, const nlohmann::json& overrides) {
    model::TrainingState ts;
    auto model = model::load_checkpoint(checkpoint_path, &ts);
    if (!ts.present) throw IoError("checkpoint has no training state: " + checkpoint_path);
    TrainConfig cfg = TrainConfig::from_json(ts.state.at("config"));
    Adam adam(model->store(), cfg.learning_rate);
    adam.load(ts.extra_tensors, ts.state);
    if (overrides.contains("learning_rate")) {
        cfg.learning_rate = overrides["learning_rate"].get<double>();
        adam.set_learning_rate(cfg.learning_rate);
    }
    if (overrides.contains("max_epochs")) cfg.max_epochs = overrides["max_epochs"].get<int>();
    if (overrides.contains("max_steps")) cfg.max_steps = overrides["max_steps"].get<int>();
    Rng data_rng, sample_rng;
    RngStateJson::load(data_rng, ts.state.at("rng").at("data"));
    RngStateJson::load(sample_rng, ts.state.at("rng").at("sample"));
    LoopState st;
    const auto& loop = ts.state.at("loop");
    st.epoch = loop.at("epoch").get<int>();
    st.step = loop.at("step").get<int>();
    st.vals_since_best = loop.at("vals_since_best").get<int>();
    st.best_val_elbo = loop.at("best_val_elbo").get<double>();
    st.best_val_step = loop.at("best_val_step").get<int>();
    return run_loop(*model, adam, data_rng, sample_rng, cfg, st, /*append=*/true);
}

nlohmann::json GradCheckReport::to_json() const {
    nlohmann::json gs = nlohmann::json::array();
    for (const auto& g : groups)
        gs.push_back({{"group", g.name}, {"max_rel_err", g.max_rel_err}, {"checked", g.checked}});
    return {{"groups", gs}, {"overall", overall}};
}

GradCheckReport grad_check(const GradCheckConfig& cfg) {
    model::LatentModel model(cfg.model);
    Rng init = Rng::derive(cfg.seed, "gradcheck.init");
    model.init_params(init);
    Rng data = Rng::derive(cfg.seed, "gradcheck.data");
    Tensor panels(Shape{cfg.batch, 9, cfg.model.image_size, cfg.model.image_size});
    for (std::size_t i = 0; i < panels.numel(); ++i) panels[i] = data.uniform();

    const std::uint64_t eval_seed = cfg.seed + 101;
    auto value = [&]() {
        ad::Graph g(false);
        Rng r(eval_seed);
        auto v = cfg.model.beta_vae
                     ? objective::beta_vae_elbo_graph(g, model, panels, cfg.beta, r)
                     : objective::elbo_graph(g, model, panels, cfg.beta, cfg.gamma, r);
        return g.val(v.loss)[0];
    };
    model.store().zero_grad();
    {
        ad::Graph g;
        Rng r(eval_seed);
        auto v = cfg.model.beta_vae
                     ? objective::beta_vae_elbo_graph(g, model, panels, cfg.beta, r)
                     : objective::elbo_graph(g, model, panels, cfg.beta, cfg.gamma, r);
        g.backward(v.loss);
    }

    auto group_of = [](const std::string& name) { return name.substr(0, name.find('.')); };
    if (!cfg.corrupt_group.empty()) {
        for (auto* p : model.store().params())
            if (group_of(p->name) == cfg.corrupt_group)
                for (std::size_t i = 0; i < p->grad.numel(); ++i) p->grad[i] += cfg.corrupt_amount;
    }

    auto compute_grad_at = [&](ad::Param& p, std::size_t i) {
        model.store().zero_grad();
        ad::Graph g;
        Rng r(eval_seed);
        auto v = cfg.model.beta_vae
                     ? objective::beta_vae_elbo_graph(g, model, panels, cfg.beta, r)
                     : objective::elbo_graph(g, model, panels, cfg.beta, cfg.gamma, r);
        g.backward(v.loss);
        double an = p.grad[i];
        if (!cfg.corrupt_group.empty() && group_of(p.name) == cfg.corrupt_group)
            an += cfg.corrupt_amount;
        return an;
    };

    auto fd_ladder_err = [&](ad::Param& p, std::size_t i, double an) {
        const double orig = p.value[i];
        const double scale = std::max(1.0, std::abs(orig));
        double err = std::numeric_limits<double>::infinity();
        for (const double h : {cfg.h_scale * scale, 10.0 * cfg.h_scale * scale,
                               100.0 * cfg.h_scale * scale, 300.0 * cfg.h_scale * scale}) {
            p.value[i] = orig + h;
            const double fp = value();
            p.value[i] = orig - h;
            const double fm = value();
            p.value[i] = orig;
            const double fd = (fp - fm) / (2 * h);
            err = std::min(err, std::abs(fd - an) / std::max({1e-5, std::abs(fd), std::abs(an)}));
            if (err <= 1e-4) break;
        }
        return err;
    };

    GradCheckReport rep;
    Rng pick = Rng::derive(cfg.seed, "gradcheck.pick");
    for (auto* p : model.store().params()) {
        const std::string gname = group_of(p->name);
        GradCheckReport::Group* grp = nullptr;
        for (auto& g : rep.groups)
            if (g.name == gname) grp = &g;
        if (!grp) {
            rep.groups.push_back({gname, 0.0, 0});
            grp = &rep.groups.back();
        }
        const std::size_t n = p->value.numel();
        std::vector<std::size_t> to_check;
        if (cfg.checks_per_group <= 0 || static_cast<std::size_t>(cfg.checks_per_group) >= n) {
            for (std::size_t i = 0; i < n; ++i) to_check.push_back(i);
        } else {
            for (int c = 0; c < cfg.checks_per_group; ++c)
                to_check.push_back(static_cast<std::size_t>(pick.uniform_index(n)));
        }
        for (std::size_t i : to_check) {
            const double an = p->grad[i];
            double err;
            if (cfg.self_check) {
                err = 0.0;  // detector sanity: comparing a gradient to itself
            } else {
                // Central differences over a ladder of step sizes: small steps
                // resolve high-curvature parameters (the GP solve), larger
                // steps lift tiny-gradient parameters out of the rounding
                // noise of the O(1e2) loss.
                err = fd_ladder_err(*p, i, an);
                if (err > 1e-3 && cfg.corrupt_group.empty()) {
                    // The coordinate may straddle a ReLU kink or a jitter
                    // escalation boundary, where no central difference can
                    // resolve the one-sided derivative. Re-verify the same
                    // backward code at nudged points with freshly computed
                    // analytic gradients; a genuine backward bug fails at
                    // every nearby point, a kink does not.
                    const double orig = p->value[i];
                    const double scale = std::max(1.0, std::abs(orig));
                    for (const double shift : {1e-3 * scale, -1e-3 * scale}) {
                        p->value[i] = orig + shift;
                        const double an_shift = compute_grad_at(*p, i);
                        err = std::min(err, fd_ladder_err(*p, i, an_shift));
                        p->value[i] = orig;
                        if (err <= 1e-4) break;
                    }
                    // Restore the gradient state for subsequent coordinates.
                    const double dummy = compute_grad_at(*p, i);
                    (void)dummy;
                }
            }
            grp->max_rel_err = std::max(grp->max_rel_err, err);
            ++grp->checked;
        }
    }
    for (const auto& g : rep.groups) rep.overall = std::max(rep.overall, g.max_rel_err);
    return rep;
}

}  // namespace rpm::train
