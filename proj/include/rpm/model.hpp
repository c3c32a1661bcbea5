#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "rpm/gp.hpp"
#include "rpm/graph.hpp"
#include "rpm/nn.hpp"
#include "rpm/rng.hpp"

namespace rpm::model {

struct ModelConfig {
    int d_z = 5;     // latent dimensions D
    int d_loc = 4;   // per-axis location dimension
    double sigma_lambda = 1.0;
    double sigma_x = 0.1;
    int image_size = 64;   // 64 (paper stack) or 8 (shrunken stack, same layer types)
    bool beta_vae = false; // standard-normal per-cell prior, no location/kernel nets

    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

// The four networks plus kernel hyperparameters, owned through one ParamStore.
class LatentModel {
public:
    explicit LatentModel(ModelConfig cfg);
    LatentModel(LatentModel&&) = default;
    LatentModel& operator=(LatentModel&&) = default;

    const ModelConfig& config() const { return cfg_; }
    nn::ParamStore& store() { return store_; }
    const nn::ParamStore& store() const { return store_; }
    gp::GpParams& gp() { return gp_params_; }
    const gp::GpParams& gp() const { return gp_params_; }

    void init_params(Rng& rng) { store_.init_params(rng); }

    // --- Graph builders -----------------------------------------------------
    struct ContentStats {
        ad::Var mean;     // [N, D]
        ad::Var log_var;  // [N, D]
    };
    // images [N,1,H,W]; bn_group: samples per batch-norm statistics group.
    ContentStats encode_content_g(ad::Graph& g, ad::Var images, int bn_group, bool training) const;

    struct LocationStats {
        ad::Var row_mean, row_log_var;  // [B,3,D,d_loc]
        ad::Var col_mean, col_log_var;  // [B,3,D,d_loc]
    };
    // images [N,1,H,W] grouped into panels of `group` cells; mask[N] marks the
    // cells that participate in the pooled context.
    LocationStats encode_locations_g(ad::Graph& g, ad::Var images, int group,
                                     const std::vector<std::uint8_t>& mask, bool training) const;

    // z [N,D] -> images [N,1,H,W] in (0,1).
    ad::Var decode_g(ad::Graph& g, ad::Var z, int bn_group, bool training) const;

    // --- Plain evaluation paths (no gradients, batch-norm running stats) ----
    struct CellPosterior {
        int cell = 0;
        std::vector<double> z_mean;  // [D]
        std::vector<double> z_var;   // [D]
        std::vector<double> image;   // [H*W], decoded from z_mean
    };
    struct Inference {
        std::vector<CellPosterior> predictions;      // one per missing cell
        Tensor observed_z;                           // [n_avail, D] sampled codes
        Tensor row_locations, col_locations;         // [3, D, d_loc] sampled
    };
    // images: [9, H*W] cell-major (missing cells may hold anything); mask[9].
    Inference infer_missing_cells(const std::vector<std::vector<double>>& images,
                                  const std::array<bool, 9>& mask, Rng& rng) const;

    // Samples a novel panel from the generative chain.
    std::vector<std::vector<double>> generate_panel(Rng& rng) const;

    // m x m grid decoded at locations interpolated between the inferred
    // corner rows/columns. Uses posterior means throughout.
    std::vector<std::vector<double>> interpolate_panel(
        const std::vector<std::vector<double>>& images, int m) const;

    // Eval-mode content encoding of a batch of cells: means and log-vars.
    void encode_cells(const std::vector<std::vector<double>>& cells, Tensor& mean,
                      Tensor& log_var) const;
    // Eval-mode decode of a batch of codes [N, D] -> [N, H*W].
    std::vector<std::vector<double>> decode_codes(const Tensor& z) const;

    int image_size() const { return cfg_.image_size; }

private:
    struct ConvSpec {
        int out_ch, k, stride, pad;
        bool bn;
    };
    void build(ModelConfig cfg);

    ModelConfig cfg_;
    nn::ParamStore store_;

    std::vector<nn::Conv2d> content_convs_;
    std::vector<nn::BatchNorm2d> content_bns_;
    nn::Conv2d content_out_;

    std::vector<nn::Conv2d> loc_convs_;
    std::vector<nn::BatchNorm2d> loc_bns_;
    nn::Linear loc_row_fc1_, loc_row_fc2_;
    nn::Linear loc_col_fc1_, loc_col_fc2_;
    int loc_feat_dim_ = 0;

    std::vector<nn::ConvTranspose2d> dec_deconvs_;
    std::vector<nn::BatchNorm2d> dec_bns_;

    gp::GpParams gp_params_;
};

// ---------------------------------------------------------------------------
// Checkpoint container: "RPGC" | u32 version | u32 header_len | header JSON |
// raw little-endian f64 payload | u32 crc32(header+payload). Loads verify the
// CRC before touching any state.
// ---------------------------------------------------------------------------
struct TrainingState {
    bool present = false;
    std::vector<std::pair<std::string, Tensor>> extra_tensors;  // optimizer moments
    nlohmann::json state;                                       // counters, rng states
};

void save_checkpoint(const std::string& path, const LatentModel& model,
                     const TrainingState* training = nullptr);
std::unique_ptr<LatentModel> load_checkpoint(const std::string& path,
                                             TrainingState* training = nullptr);

}  // namespace rpm::model
