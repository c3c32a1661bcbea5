#pragma once

#include <optional>
#include <string>

#include "json.hpp"
#include "rpm/model.hpp"
#include "rpm/objective.hpp"
#include "rpm/panelgen.hpp"

namespace rpm::train {

struct TrainConfig {
    double learning_rate = 1e-4;
    int batch_size = 256;
    int max_epochs = 200;
    int max_steps = 0;  // 0: epoch-driven; otherwise stop after this many steps
    std::uint64_t seed = 0;
    double beta = 30.0;
    double gamma = 30.0;
    model::ModelConfig model;
    std::string dataset_dir;
    std::string out_dir;
    int val_cadence_epochs = 1;
    int early_stop_patience = 20;  // validation evaluations without improvement
    // Gradient-accumulation chunk; fixed so runs are reproducible regardless
    // of memory pressure.
    int micro_batch = 16;

    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainResult {
    std::string best_checkpoint;
    std::string last_checkpoint;
    std::string metrics_path;
    std::string val_metrics_path;
    double best_val_elbo = 0.0;
    int best_val_step = 0;
    int steps = 0;
};

// Adam with shape-matched first/second moments per parameter.
class Adam {
public:
    Adam(nn::ParamStore& store, double lr, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8);
    void step();
    void set_learning_rate(double lr) { lr_ = lr; }
    double learning_rate() const { return lr_; }
    int steps_taken() const { return t_; }

    // Serialization into checkpoint training-state tensors.
    void save(std::vector<std::pair<std::string, Tensor>>& out, nlohmann::json& state) const;
    void load(const std::vector<std::pair<std::string, Tensor>>& tensors,
              const nlohmann::json& state);

private:
    nn::ParamStore* store_;
    double lr_, beta1_, beta2_, eps_;
    int t_ = 0;
    std::vector<Tensor> m_, v_;
};

TrainResult train(const TrainConfig& cfg);

// Continues a run from a last.ckpt written by train(). Recognized override
// keys: learning_rate, max_epochs, max_steps; they take effect from the next
// step onward and land in the rewritten config.json.
TrainResult resume(const std::string& checkpoint_path,
                   const nlohmann::json& overrides = nlohmann::json::object());

// ---------------------------------------------------------------------------
// Analytic-vs-finite-difference gradient audit on the shrunken configuration.
// ---------------------------------------------------------------------------
struct GradCheckConfig {
    std::uint64_t seed = 0;
    int batch = 1;
    // 0 sweeps every parameter; otherwise a deterministic subsample per group.
    int checks_per_group = 0;
    double beta = 2.0;
    double gamma = 1.5;
    double h_scale = 1e-5;
    model::ModelConfig model;  // defaults to the 8x8 / D=2 / d_loc=2 stack
    // Test hooks: corrupt one group's analytic gradient to prove the detector
    // fires; self_check compares the analytic gradient against itself and must
    // report exactly zero.
    std::string corrupt_group;
    double corrupt_amount = 0.5;
    bool self_check = false;

    GradCheckConfig() {
        model.image_size = 8;
        model.d_z = 2;
        model.d_loc = 2;
    }
};

struct GradCheckReport {
    struct Group {
        std::string name;
        double max_rel_err = 0.0;
        std::size_t checked = 0;
    };
    std::vector<Group> groups;
    double overall = 0.0;

    nlohmann::json to_json() const;
};

GradCheckReport grad_check(const GradCheckConfig& cfg);

// Shared helper: panels [b..b+count) from a dataset as a [count,9,H,W] tensor
// of [0,1] doubles.
Tensor panels_tensor(const gen::PanelDataset& ds, const std::vector<int>& indices);

}  // namespace rpm::train
