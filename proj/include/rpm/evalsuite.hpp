#pragma once

#include <array>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "rpm/model.hpp"
#include "rpm/panelgen.hpp"

// Evaluation protocols: varying-position MSE, multi-cell prediction reports,
// disentanglement scores, selection accuracy, and latent traversals.
namespace rpm::eval {

struct MetricReport {
    std::string metric;
    double value = 0.0;
    double std_dev = 0.0;
    int n_repeats = 1;
    std::string config_digest;

    nlohmann::json to_json() const {
        return {{"metric", metric},       {"value", value},
                {"std", std_dev},         {"n_repeats", n_repeats},
                {"config_digest", config_digest}};
    }
};

// A painter fills the masked-out cells of a panel: `cells` holds all nine
// ground-truth images, `mask` marks the visible ones, and the result carries
// one predicted image per hidden cell in ascending cell order. Painters other
// than the oracle must not read hidden cells.
using Painter = std::function<std::vector<std::vector<double>>(
    const std::vector<std::vector<double>>& cells, const std::array<bool, 9>& mask, Rng& rng)>;

Painter model_painter(const model::LatentModel& m);
Painter oracle_painter();                  // returns the hidden ground truth
Painter constant_painter(double value);    // uniform constant prediction

// Mean over panels and positions of per-pixel squared prediction error,
// hiding each of the nine cells in turn. Repeats rerun with derived eval
// seeds and feed the reported std.
MetricReport varying_position_mse(const Painter& painter, const gen::PanelDataset& ds,
                                  int n_panels, int repeats, std::uint64_t seed);

// Composite figure for a single panel and mask: predictions outlined, sidecar
// per-hidden-cell MSE values.
struct MultiCellReport {
    std::vector<int> hidden_cells;
    std::vector<double> cell_mse;
    std::string png_path;
    nlohmann::json to_json() const;
};
MultiCellReport multi_cell_report(const model::LatentModel& m,
                                  const std::vector<std::vector<double>>& cells,
                                  const std::array<bool, 9>& mask, const std::string& png_path,
                                  std::uint64_t seed);

// ---------------------------------------------------------------------------
// Disentanglement metrics over a concept-conditioned image oracle.
// ---------------------------------------------------------------------------
struct ConceptSample {
    std::map<std::string, double> concepts;
    std::vector<double> image;
};
// Batch encoder: samples -> latent rows [n, dim]. Encoders that read only the
// concept values clear needs_images, which lets the metric protocols skip
// rendering entirely.
struct Encoder {
    std::function<Tensor(const std::vector<ConceptSample>&)> fn;
    bool needs_images = true;
};

Encoder model_encoder(const model::LatentModel& m);
// Reads the concept values directly (one latent dimension per concept).
Encoder ground_truth_encoder(const gen::DatasetSpec& spec);
// Deterministic pseudo-random codes independent of the concepts.
Encoder noise_encoder(int dim);
// Fixed random linear projection of the pixels.
Encoder random_projection_encoder(const gen::DatasetSpec& spec, int dim, std::uint64_t seed);

struct FactorVaeOptions {
    int n_train = 1000;
    int batch = 512;
    int n_eval = 500;
    int norm_pool = 1000;
    int repeats = 5;
    std::uint64_t seed = 0;
};
MetricReport factor_vae_score(const Encoder& enc, const gen::DatasetSpec& spec,
                              const FactorVaeOptions& opt = {});
// Raw votes of one protocol run: (latent dim, fixed concept index) pairs.
std::vector<std::pair<int, int>> factor_vae_votes(const Encoder& enc,
                                                  const gen::DatasetSpec& spec, int n_votes,
                                                  int batch, int norm_pool, std::uint64_t seed);

struct SapOptions {
    int n_pairs = 10000;
    int repeats = 5;
    std::uint64_t seed = 0;
};
MetricReport sap_score(const Encoder& enc, const gen::DatasetSpec& spec,
                       const SapOptions& opt = {});
// The full R^2 matrix [latent dim x concept] of one run, for dimension maps.
Tensor sap_r2_matrix(const Encoder& enc, const gen::DatasetSpec& spec, int n_pairs,
                     std::uint64_t seed, std::vector<std::string>* concept_names = nullptr);

// ---------------------------------------------------------------------------
// Selection tasks
// ---------------------------------------------------------------------------
MetricReport selection_accuracy(const Painter& painter, const gen::SelectionDataset& ds,
                                int repeats, std::uint64_t seed);
MetricReport selection_accuracy_random(const gen::SelectionDataset& ds, int repeats,
                                       std::uint64_t seed);

// ---------------------------------------------------------------------------
// Latent traversal: for each dimension, sweep an additive offset over
// [lo, hi] around the base image's code and decode. Returns rows of images
// and writes an optional PNG grid.
// ---------------------------------------------------------------------------
struct TraversalGrid {
    int dims = 0;
    int steps = 0;
    std::vector<std::vector<double>> images;  // dims*steps, row-major
};
TraversalGrid traverse_latents(const model::LatentModel& m, const std::vector<double>& base_image,
                               double lo, double hi, int steps, const std::string& png_path = "");

std::string config_digest(const nlohmann::json& j);

}  // namespace rpm::eval
