#include "rpm/model.hpp"

#include <cmath>

#include "rpm/common.hpp"

namespace rpm::model {

void ModelConfig::validate() const {
    if (d_z <= 0 || d_loc <= 0) throw ConfigError("d_z and d_loc must be positive");
    if (!(sigma_lambda > 0.0) || !(sigma_x > 0.0))
        throw ConfigError("sigma_lambda and sigma_x must be positive");
    if (image_size != 64 && image_size != 8)
        throw ConfigError("image_size must be 64 or 8 (the shrunken test stack)");
}

nlohmann::json ModelConfig::to_json() const {
    return {{"d_z", d_z},          {"d_loc", d_loc},           {"sigma_lambda", sigma_lambda},
            {"sigma_x", sigma_x},  {"image_size", image_size}, {"beta_vae", beta_vae}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.d_z = j.value("d_z", 5);
    c.d_loc = j.value("d_loc", 4);
    c.sigma_lambda = j.value("sigma_lambda", 1.0);
    c.sigma_x = j.value("sigma_x", 0.1);
    c.image_size = j.value("image_size", 64);
    c.beta_vae = j.value("beta_vae", false);
    c.validate();
    return c;
}

LatentModel::LatentModel(ModelConfig cfg) { build(std::move(cfg)); }

void LatentModel::build(ModelConfig cfg) {
    cfg.validate();
    cfg_ = cfg;
    const int D = cfg_.d_z;
    const int dl = cfg_.d_loc;

    std::vector<ConvSpec> content, loc_trunk;
    std::vector<ConvSpec> dec;  // for deconvs: out_ch, k, stride, pad
    int loc_fc_hidden = 0;
    gp::KernelNetConfig knet;
    knet.input_dim = 2 * dl;

    if (cfg_.image_size == 64) {
        content = {{32, 4, 2, 1, true},
                   {32, 4, 2, 1, true},
                   {64, 4, 2, 1, true},
                   {128, 4, 2, 1, true},
                   {256, 4, 1, 0, true}};
        loc_trunk = {{32, 4, 2, 1, true},
                     {32, 4, 2, 1, true},
                     {32, 4, 2, 1, true},
                     {32, 4, 2, 1, true},
                     {32, 4, 1, 0, true}};
        dec = {{256, 1, 1, 0, true},
               {64, 4, 1, 0, true},
               {32, 4, 2, 1, true},
               {32, 4, 2, 1, true},
               {32, 4, 2, 1, true},
               {1, 4, 2, 1, false}};
        loc_fc_hidden = 128;
        knet.hidden = {32, 64, 64, 64};
    } else {
        // 8x8 stack: same layer types, shrunken widths and depths.
        content = {{16, 4, 2, 1, true}, {32, 4, 2, 1, true}, {32, 2, 1, 0, true}};
        loc_trunk = {{16, 4, 2, 1, true}, {16, 4, 2, 1, true}, {16, 2, 1, 0, true}};
        dec = {{32, 1, 1, 0, true}, {32, 2, 1, 0, true}, {16, 4, 2, 1, true}, {1, 4, 2, 1, false}};
        loc_fc_hidden = 32;
        knet.hidden = {16, 16};
    }

    int in_ch = 1;
    for (std::size_t i = 0; i < content.size(); ++i) {
        const auto& cs = content[i];
        content_convs_.emplace_back(store_, "content.conv" + std::to_string(i), in_ch, cs.out_ch,
                                    cs.k, cs.stride, cs.pad, /*bias=*/!cs.bn);
        content_bns_.emplace_back(store_, "content.bn" + std::to_string(i), cs.out_ch);
        in_ch = cs.out_ch;
    }
    content_out_ = nn::Conv2d(store_, "content.out", in_ch, 2 * D, 1, 1, 0, /*bias=*/true);

    if (!cfg_.beta_vae) {
        in_ch = 1;
        for (std::size_t i = 0; i < loc_trunk.size(); ++i) {
            const auto& cs = loc_trunk[i];
            loc_convs_.emplace_back(store_, "location.conv" + std::to_string(i), in_ch, cs.out_ch,
                                    cs.k, cs.stride, cs.pad, /*bias=*/!cs.bn);
            loc_bns_.emplace_back(store_, "location.bn" + std::to_string(i), cs.out_ch);
            in_ch = cs.out_ch;
        }
        loc_feat_dim_ = in_ch;
        const int head_out = 6 * D * dl;  // 3 grid lines x (mean, log-variance)
        loc_row_fc1_ = nn::Linear(store_, "location.row.fc1", loc_feat_dim_, loc_fc_hidden);
        loc_row_fc2_ = nn::Linear(store_, "location.row.fc2", loc_fc_hidden, head_out);
        loc_col_fc1_ = nn::Linear(store_, "location.col.fc1", loc_feat_dim_, loc_fc_hidden);
        loc_col_fc2_ = nn::Linear(store_, "location.col.fc2", loc_fc_hidden, head_out);
    }

    int dec_in = D;
    for (std::size_t i = 0; i < dec.size(); ++i) {
        const auto& cs = dec[i];
        dec_deconvs_.emplace_back(store_, "decoder.deconv" + std::to_string(i), dec_in, cs.out_ch,
                                  cs.k, cs.stride, cs.pad, /*bias=*/!cs.bn);
        if (cs.bn) dec_bns_.emplace_back(store_, "decoder.bn" + std::to_string(i), cs.out_ch);
        dec_in = cs.out_ch;
    }

    if (!cfg_.beta_vae) gp_params_ = gp::GpParams::create(store_, knet);
}

LatentModel::ContentStats LatentModel::encode_content_g(ad::Graph& g, ad::Var images,
                                                        int bn_group, bool training) const {
    const int N = g.val(images).dim(0);
    ad::Var h = images;
    for (std::size_t i = 0; i < content_convs_.size(); ++i) {
        h = content_convs_[i].apply(g, h);
        h = content_bns_[i].apply(g, h, bn_group, training);
        h = g.relu_(h);
    }
    h = content_out_.apply(g, h);  // [N, 2D, 1, 1]
    const int D = cfg_.d_z;
    ad::Var flat = g.reshape(h, Shape{N, 2 * D});
    ContentStats out;
    out.mean = g.reshape(g.slice_axis(flat, N, 2 * D, 1, 0, D), Shape{N, D});
    out.log_var = g.reshape(g.slice_axis(flat, N, 2 * D, 1, D, 2 * D), Shape{N, D});
    return out;
}

LatentModel::LocationStats LatentModel::encode_locations_g(
    ad::Graph& g, ad::Var images, int group, const std::vector<std::uint8_t>& mask,
    bool training) const {
    if (cfg_.beta_vae) throw ContractError("location encoder disabled in beta-VAE mode");
    bool any = false;
    for (auto m : mask) any = any || m;
    if (!any) throw ContractError("encode_locations: empty context mask");
    const int N = g.val(images).dim(0);
    ad::Var h = images;
    for (std::size_t i = 0; i < loc_convs_.size(); ++i) {
        h = loc_convs_[i].apply(g, h);
        h = loc_bns_[i].apply(g, h, group, training);
        h = g.relu_(h);
    }
    ad::Var feat = g.reshape(h, Shape{N, loc_feat_dim_});
    ad::Var pooled = g.mean_pool_groups(feat, group, mask);  // [B, F]
    const int B = N / group;
    const int D = cfg_.d_z, dl = cfg_.d_loc;

    auto head = [&](const nn::Linear& fc1, const nn::Linear& fc2, ad::Var& mean_out,
                    ad::Var& log_var_out) {
        ad::Var z = g.relu_(fc1.apply(g, pooled));
        ad::Var stats = fc2.apply(g, z);  // [B, 3*2*D*dl]
        // Layout [B, 3, 2, D*dl]: statistic index 0 = mean, 1 = log-variance.
        mean_out = g.reshape(g.slice_axis(stats, B * 3, 2, D * dl, 0, 1), Shape{B, 3, D, dl});
        log_var_out = g.reshape(g.slice_axis(stats, B * 3, 2, D * dl, 1, 2), Shape{B, 3, D, dl});
    };
    LocationStats out;
    head(loc_row_fc1_, loc_row_fc2_, out.row_mean, out.row_log_var);
    head(loc_col_fc1_, loc_col_fc2_, out.col_mean, out.col_log_var);
    return out;
}

ad::Var LatentModel::decode_g(ad::Graph& g, ad::Var z, int bn_group, bool training) const {
    const int N = g.val(z).dim(0);
    ad::Var h = g.reshape(z, Shape{N, cfg_.d_z, 1, 1});
    std::size_t bn_idx = 0;
    for (std::size_t i = 0; i < dec_deconvs_.size(); ++i) {
        h = dec_deconvs_[i].apply(g, h);
        if (i + 1 < dec_deconvs_.size()) {
            h = dec_bns_[bn_idx++].apply(g, h, bn_group, training);
            h = g.relu_(h);
        } else {
            h = g.sigmoid_(h);
        }
    }
    return h;
}

// ---------------------------------------------------------------------------
// Plain evaluation paths
// ---------------------------------------------------------------------------

namespace {

Tensor cells_to_tensor(const std::vector<std::vector<double>>& cells, int image_size) {
    const std::size_t hw = static_cast<std::size_t>(image_size) * image_size;
    Tensor t(Shape{static_cast<int>(cells.size()), 1, image_size, image_size});
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (cells[i].size() != hw) throw ContractError("cell image has the wrong shape");
        std::copy(cells[i].begin(), cells[i].end(), t.data() + i * hw);
    }
    return t;
}

}  // namespace

void LatentModel::encode_cells(const std::vector<std::vector<double>>& cells, Tensor& mean,
                               Tensor& log_var) const {
    ad::Graph g(false);
    ad::Var images = g.constant(cells_to_tensor(cells, cfg_.image_size));
    auto stats = encode_content_g(g, images, static_cast<int>(cells.size()), false);
    mean = g.val(stats.mean);
    log_var = g.val(stats.log_var);
}

std::vector<std::vector<double>> LatentModel::decode_codes(const Tensor& z) const {
    ad::Graph g(false);
    ad::Var imgs = decode_g(g, g.constant(z), z.dim(0), false);
    const std::size_t hw = static_cast<std::size_t>(cfg_.image_size) * cfg_.image_size;
    std::vector<std::vector<double>> out(static_cast<std::size_t>(z.dim(0)));
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i].assign(g.val(imgs).data() + i * hw, g.val(imgs).data() + (i + 1) * hw);
    }
    return out;
}

LatentModel::Inference LatentModel::infer_missing_cells(
    const std::vector<std::vector<double>>& images, const std::array<bool, 9>& mask,
    Rng& rng) const {
    if (cfg_.beta_vae)
        throw ContractError("infer_missing_cells requires the GP model, not beta-VAE mode");
    if (images.size() != 9) throw ContractError("infer_missing_cells expects 9 cell slots");
    std::vector<int> avail, missing;
    for (int k = 0; k < 9; ++k) (mask[static_cast<std::size_t>(k)] ? avail : missing).push_back(k);
    if (avail.empty()) throw ContractError("infer_missing_cells: no available cells");
    if (missing.empty()) throw ContractError("infer_missing_cells: nothing to predict");

    const int D = cfg_.d_z, dl = cfg_.d_loc;

    // Content codes for available cells (reparameterized samples).
    std::vector<std::vector<double>> avail_cells;
    for (int k : avail) avail_cells.push_back(images[static_cast<std::size_t>(k)]);
    Tensor z_mean, z_log_var;
    encode_cells(avail_cells, z_mean, z_log_var);
    Tensor z_obs(z_mean.shape());
    for (std::size_t i = 0; i < z_obs.numel(); ++i)
        z_obs[i] = z_mean[i] + std::exp(0.5 * z_log_var[i]) * rng.gauss();

    // Location posterior from the masked context (all nine slots fed, missing
    // cells zeroed and masked out of the pooling).
    std::vector<std::vector<double>> slots(9);
    const std::size_t hw = static_cast<std::size_t>(cfg_.image_size) * cfg_.image_size;
    std::vector<std::uint8_t> pool_mask(9, 0);
    for (int k = 0; k < 9; ++k) {
        if (mask[static_cast<std::size_t>(k)]) {
            slots[static_cast<std::size_t>(k)] = images[static_cast<std::size_t>(k)];
            pool_mask[static_cast<std::size_t>(k)] = 1;
        } else {
            slots[static_cast<std::size_t>(k)].assign(hw, 0.0);
        }
    }
    Tensor row_mean, row_lv, col_mean, col_lv;
    {
        ad::Graph g(false);
        ad::Var imgs = g.constant(cells_to_tensor(slots, cfg_.image_size));
        auto stats = encode_locations_g(g, imgs, 9, pool_mask, false);
        row_mean = g.val(stats.row_mean).reshaped(Shape{3, D, dl});
        row_lv = g.val(stats.row_log_var).reshaped(Shape{3, D, dl});
        col_mean = g.val(stats.col_mean).reshaped(Shape{3, D, dl});
        col_lv = g.val(stats.col_log_var).reshaped(Shape{3, D, dl});
    }
    Inference out;
    out.row_locations = Tensor(Shape{3, D, dl});
    out.col_locations = Tensor(Shape{3, D, dl});
    for (std::size_t i = 0; i < row_mean.numel(); ++i)
        out.row_locations[i] = row_mean[i] + std::exp(0.5 * row_lv[i]) * rng.gauss();
    for (std::size_t i = 0; i < col_mean.numel(); ++i)
        out.col_locations[i] = col_mean[i] + std::exp(0.5 * col_lv[i]) * rng.gauss();
    out.observed_z = z_obs;

    // Per-dimension GP conditioning; point predictions decode the posterior
    // mean of z.
    Tensor z_pred(Shape{static_cast<int>(missing.size()), D});
    std::vector<CellPosterior> posts(missing.size());
    for (int d = 0; d < D; ++d) {
        Tensor rows(Shape{3, dl}), cols(Shape{3, dl});
        for (int i = 0; i < 3; ++i)
            for (int t = 0; t < dl; ++t) {
                rows.at2(i, t) = out.row_locations[(static_cast<std::size_t>(i) * D + d) * dl + t];
                cols.at2(i, t) = out.col_locations[(static_cast<std::size_t>(i) * D + d) * dl + t];
            }
        gp::LocationGrid grid(rows, cols);
        std::vector<double> values;
        for (std::size_t a = 0; a < avail.size(); ++a) values.push_back(z_obs.at2(static_cast<int>(a), d));
        auto cond = gp::gp_conditional(grid, gp_params_, avail, values, missing);
        for (std::size_t t = 0; t < missing.size(); ++t) {
            z_pred.at2(static_cast<int>(t), d) = cond.mean[t];
            posts[t].z_mean.push_back(cond.mean[t]);
            posts[t].z_var.push_back(cond.var(static_cast<int>(t)));
        }
    }
    auto decoded = decode_codes(z_pred);
    for (std::size_t t = 0; t < missing.size(); ++t) {
        posts[t].cell = missing[t];
        posts[t].image = std::move(decoded[t]);
    }
    out.predictions = std::move(posts);
    return out;
}

std::vector<std::vector<double>> LatentModel::generate_panel(Rng& rng) const {
    const int D = cfg_.d_z, dl = cfg_.d_loc;
    Tensor z(Shape{9, D});
    if (cfg_.beta_vae) {
        for (std::size_t i = 0; i < z.numel(); ++i) z[i] = rng.gauss();
    } else {
        Tensor rows(Shape{3, D, dl}), cols(Shape{3, D, dl});
        for (std::size_t i = 0; i < rows.numel(); ++i) rows[i] = cfg_.sigma_lambda * rng.gauss();
        for (std::size_t i = 0; i < cols.numel(); ++i) cols[i] = cfg_.sigma_lambda * rng.gauss();
        for (int d = 0; d < D; ++d) {
            Tensor r(Shape{3, dl}), c(Shape{3, dl});
            for (int i = 0; i < 3; ++i)
                for (int t = 0; t < dl; ++t) {
                    r.at2(i, t) = rows[(static_cast<std::size_t>(i) * D + d) * dl + t];
                    c.at2(i, t) = cols[(static_cast<std::size_t>(i) * D + d) * dl + t];
                }
            gp::LocationGrid grid(r, c);
            Tensor zd = gp::panel_sampling(grid, gp_params_, rng);
            for (int k = 0; k < 9; ++k) z.at2(k, d) = zd[static_cast<std::size_t>(k)];
        }
    }
    return decode_codes(z);
}

std::vector<std::vector<double>> LatentModel::interpolate_panel(
    const std::vector<std::vector<double>>& images, int m) const {
    if (m < 3) throw ContractError("interpolate_panel requires m >= 3");
    if (cfg_.beta_vae) throw ContractError("interpolation requires the GP model");
    const int D = cfg_.d_z, dl = cfg_.d_loc;

    Tensor z_mean, z_lv;
    encode_cells(images, z_mean, z_lv);

    Tensor row_mean(Shape{3, D, dl}), col_mean(Shape{3, D, dl});
    {
        ad::Graph g(false);
        ad::Var imgs = g.constant(cells_to_tensor(images, cfg_.image_size));
        std::vector<std::uint8_t> mask(9, 1);
        auto stats = encode_locations_g(g, imgs, 9, mask, false);
        row_mean = g.val(stats.row_mean).reshaped(Shape{3, D, dl});
        col_mean = g.val(stats.col_mean).reshaped(Shape{3, D, dl});
    }

    Tensor z_out(Shape{m * m, D});
    for (int d = 0; d < D; ++d) {
        // Interpolated axis locations anchored at inferred lines 1 and 3.
        auto axis_loc = [&](const Tensor& ax, int line, int t) {
            return ax[(static_cast<std::size_t>(line) * D + d) * dl + t];
        };
        Tensor locs(Shape{9 + m * m, 2 * dl});
        for (int k = 0; k < 9; ++k) {
            const int i = cell_row(k), j = cell_col(k);
            for (int t = 0; t < dl; ++t) {
                locs.at2(k, t) = axis_loc(row_mean, i, t);
                locs.at2(k, dl + t) = axis_loc(col_mean, j, t);
            }
        }
        for (int a = 0; a < m; ++a) {
            const double ta = static_cast<double>(a) / (m - 1);
            for (int b = 0; b < m; ++b) {
                const double tb = static_cast<double>(b) / (m - 1);
                const int idx = 9 + a * m + b;
                for (int t = 0; t < dl; ++t) {
                    locs.at2(idx, t) =
                        (1.0 - ta) * axis_loc(row_mean, 0, t) + ta * axis_loc(row_mean, 2, t);
                    locs.at2(idx, dl + t) =
                        (1.0 - tb) * axis_loc(col_mean, 0, t) + tb * axis_loc(col_mean, 2, t);
                }
            }
        }
        std::vector<int> observed{0, 1, 2, 3, 4, 5, 6, 7, 8};
        std::vector<int> targets;
        for (int t = 0; t < m * m; ++t) targets.push_back(9 + t);
        std::vector<double> values;
        for (int k = 0; k < 9; ++k) values.push_back(z_mean.at2(k, d));
        auto cond = gp::gp_condition(locs, gp_params_, observed, values, targets);
        for (int t = 0; t < m * m; ++t) z_out.at2(t, d) = cond.mean[static_cast<std::size_t>(t)];
    }
    return decode_codes(z_out);
}

}  // namespace rpm::model
