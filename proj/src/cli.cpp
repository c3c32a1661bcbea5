#include "rpm/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "rpm/evalsuite.hpp"
#include "rpm/image_io.hpp"
#include "rpm/trainer.hpp"

namespace rpm::cli {

namespace {

namespace fs = std::filesystem;

std::string output_root() {
    const char* env = std::getenv("RPM_GP_HOME");
    return env && *env ? env : ".";
}

// Per-dataset hyperparameter presets: beta, gamma, d_z.
struct HyperPreset {
    double beta, gamma;
    int d_z;
};
HyperPreset hyper_preset(const std::string& dataset_name) {
    if (dataset_name == "circle") return {20.0, 20.0, 5};
    if (dataset_name == "complex_polygon" || dataset_name == "complex_circle")
        return {50.0, 50.0, 10};
    if (dataset_name == "position_polygon" || dataset_name == "position_circle")
        return {30.0, 30.0, 10};
    return {30.0, 30.0, 5};  // polygon, square, custom
}

gen::DatasetSpec resolve_spec(const std::string& preset, const std::string& spec_config) {
    if (!spec_config.empty()) {
        std::ifstream f(spec_config);
        if (!f) throw IoError("cannot open spec config: " + spec_config);
        nlohmann::json j;
        f >> j;
        return gen::DatasetSpec::from_json(j);
    }
    return gen::DatasetSpec::preset(preset.empty() ? "polygon" : preset);
}

void write_json(const std::string& path, const nlohmann::json& j) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path);
    f << j.dump(2) << "\n";
}

nlohmann::json load_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    nlohmann::json j;
    f >> j;
    return j;
}

std::vector<std::vector<double>> dataset_panel_cells(const gen::PanelDataset& ds, int p) {
    std::vector<std::vector<double>> cells(9);
    for (int k = 0; k < 9; ++k) cells[static_cast<std::size_t>(k)] = ds.cell_f64(p, k);
    return cells;
}

// ---------------------------------------------------------------------------
// Subcommand wiring
// ---------------------------------------------------------------------------

void add_gen_data(CLI::App& app) {
    auto* cmd = app.add_subcommand("gen-data", "Generate a panel dataset (train/val/test)");
    auto preset = std::make_shared<std::string>("polygon");
    auto spec_config = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto sizes = std::make_shared<gen::SplitSizes>(gen::SplitSizes{500, 1000, 10000});
    auto seed = std::make_shared<std::uint64_t>(0);
    cmd->add_option("--preset", *preset, "Built-in dataset preset (polygon, circle)")
        ->default_str("polygon");
    cmd->add_option("--spec-config", *spec_config, "Dataset spec JSON (overrides --preset)");
    cmd->add_option("--train", sizes->train, "Training panels")->default_val(500);
    cmd->add_option("--val", sizes->val, "Validation panels")->default_val(1000);
    cmd->add_option("--test", sizes->test, "Test panels")->default_val(10000);
    cmd->add_option("--seed", *seed, "Dataset seed")->default_val(0);
    cmd->add_option("--out", *out, "Output directory (default: $RPM_GP_HOME/data/<name>)");
    cmd->callback([=]() {
        gen::DatasetSpec spec = resolve_spec(*preset, *spec_config);
        std::string dir = out->empty() ? output_root() + "/data/" + spec.name : *out;
        gen::generate_dataset(spec, *sizes, *seed, dir);
        write_json(dir + "/generate.json", {{"sizes", {{"train", sizes->train},
                                                       {"val", sizes->val},
                                                       {"test", sizes->test}}},
                                            {"seed", *seed},
                                            {"spec", spec.to_json()}});
        std::cout << "dataset written to " << dir << "\n";
    });
}

void add_gen_selection(CLI::App& app) {
    auto* cmd = app.add_subcommand("gen-selection", "Generate 8-candidate selection panels");
    auto preset = std::make_shared<std::string>("polygon");
    auto spec_config = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto split = std::make_shared<std::string>("test");
    auto count = std::make_shared<int>(1000);
    auto seed = std::make_shared<std::uint64_t>(0);
    cmd->add_option("--preset", *preset, "Built-in dataset preset")->default_str("polygon");
    cmd->add_option("--spec-config", *spec_config, "Dataset spec JSON (overrides --preset)");
    cmd->add_option("--count", *count, "Number of selection panels")->default_val(1000);
    cmd->add_option("--split", *split, "Split name for the output file")->default_str("test");
    cmd->add_option("--seed", *seed, "Seed")->default_val(0);
    cmd->add_option("--out", *out, "Output directory");
    cmd->callback([=]() {
        gen::DatasetSpec spec = resolve_spec(*preset, *spec_config);
        std::string dir = out->empty() ? output_root() + "/data/" + spec.name : *out;
        gen::generate_selection_split(spec, *count, *seed, *split, dir);
        write_json(dir + "/generate-selection-" + *split + ".json",
                   {{"count", *count}, {"seed", *seed}, {"split", *split}, {"spec", spec.to_json()}});
        std::cout << "selection split written to " << dir << "/" << *split << ".selections\n";
    });
}

struct TrainArgs {
    std::string data, out, config, resume_ckpt, preset;
    train::TrainConfig cfg;
    bool beta_vae = false;
    // Track which flags the user actually passed for the precedence rules.
    CLI::Option *o_beta = nullptr, *o_gamma = nullptr, *o_dz = nullptr, *o_dloc = nullptr,
                *o_lr = nullptr, *o_batch = nullptr, *o_epochs = nullptr, *o_steps = nullptr,
                *o_seed = nullptr, *o_micro = nullptr, *o_cadence = nullptr, *o_patience = nullptr,
                *o_image = nullptr;
};

void add_train(CLI::App& app) {
    auto* cmd = app.add_subcommand("train", "Train a model (or resume a run)");
    auto a = std::make_shared<TrainArgs>();
    cmd->add_option("--data", a->data, "Dataset directory");
    cmd->add_option("--out", a->out, "Run directory (default: $RPM_GP_HOME/runs/<name>-s<seed>)");
    cmd->add_option("--config", a->config, "Training config JSON (flags override it)");
    cmd->add_option("--preset", a->preset,
                    "Hyperparameter preset name; defaults to the dataset spec name");
    cmd->add_option("--resume", a->resume_ckpt, "Continue from a last.ckpt");
    a->o_beta = cmd->add_option("--beta", a->cfg.beta, "Location KL weight");
    a->o_gamma = cmd->add_option("--gamma", a->cfg.gamma, "Marginal KL weight");
    a->o_dz = cmd->add_option("--dz", a->cfg.model.d_z, "Latent dimensions");
    a->o_dloc = cmd->add_option("--dloc", a->cfg.model.d_loc, "Location dimensions per axis");
    a->o_image = cmd->add_option("--image-size", a->cfg.model.image_size, "Cell resolution");
    a->o_lr = cmd->add_option("--learning-rate", a->cfg.learning_rate, "Adam learning rate");
    a->o_batch = cmd->add_option("--batch-size", a->cfg.batch_size, "Panels per step");
    a->o_epochs = cmd->add_option("--epochs", a->cfg.max_epochs, "Maximum epochs");
    a->o_steps = cmd->add_option("--max-steps", a->cfg.max_steps, "Stop after N steps (0 = off)");
    a->o_seed = cmd->add_option("--seed", a->cfg.seed, "Run seed");
    a->o_micro = cmd->add_option("--micro-batch", a->cfg.micro_batch, "Gradient chunk size");
    a->o_cadence = cmd->add_option("--val-cadence", a->cfg.val_cadence_epochs,
                                   "Validate every N epochs");
    a->o_patience = cmd->add_option("--patience", a->cfg.early_stop_patience,
                                    "Early-stop patience (validation rounds)");
    cmd->add_flag("--beta-vae", a->beta_vae, "Train the per-cell beta-VAE baseline");
    cmd->callback([a]() {
        if (!a->resume_ckpt.empty()) {
            nlohmann::json overrides = nlohmann::json::object();
            if (a->o_lr->count()) overrides["learning_rate"] = a->cfg.learning_rate;
            if (a->o_epochs->count()) overrides["max_epochs"] = a->cfg.max_epochs;
            if (a->o_steps->count()) overrides["max_steps"] = a->cfg.max_steps;
            auto res = train::resume(a->resume_ckpt, overrides);
            std::cout << "resumed to step " << res.steps << "; best val elbo "
                      << res.best_val_elbo << " at step " << res.best_val_step << "\n";
            return;
        }
        if (a->data.empty()) throw ConfigError("train: --data is required");
        train::TrainConfig cfg;
        // Precedence: preset defaults, then config file, then explicit flags.
        gen::DatasetSpec spec = gen::load_spec(a->data);
        const HyperPreset hp = hyper_preset(a->preset.empty() ? spec.name : a->preset);
        cfg.beta = hp.beta;
        cfg.gamma = hp.gamma;
        cfg.model.d_z = hp.d_z;
        cfg.model.image_size = spec.image_size;
        if (!a->config.empty()) cfg = train::TrainConfig::from_json(load_json_file(a->config));
        if (a->o_beta->count()) cfg.beta = a->cfg.beta;
        if (a->o_gamma->count()) cfg.gamma = a->cfg.gamma;
        if (a->o_dz->count()) cfg.model.d_z = a->cfg.model.d_z;
        if (a->o_dloc->count()) cfg.model.d_loc = a->cfg.model.d_loc;
        if (a->o_image->count()) cfg.model.image_size = a->cfg.model.image_size;
        if (a->o_lr->count()) cfg.learning_rate = a->cfg.learning_rate;
        if (a->o_batch->count()) cfg.batch_size = a->cfg.batch_size;
        if (a->o_epochs->count()) cfg.max_epochs = a->cfg.max_epochs;
        if (a->o_steps->count()) cfg.max_steps = a->cfg.max_steps;
        if (a->o_seed->count()) cfg.seed = a->cfg.seed;
        if (a->o_micro->count()) cfg.micro_batch = a->cfg.micro_batch;
        if (a->o_cadence->count()) cfg.val_cadence_epochs = a->cfg.val_cadence_epochs;
        if (a->o_patience->count()) cfg.early_stop_patience = a->cfg.early_stop_patience;
        cfg.model.beta_vae = a->beta_vae;
        cfg.dataset_dir = a->data;
        cfg.out_dir = !a->out.empty()
                          ? a->out
                          : output_root() + "/runs/" + spec.name + "-s" + std::to_string(cfg.seed);
        auto res = train::train(cfg);
        std::cout << "trained " << res.steps << " steps; best val elbo " << res.best_val_elbo
                  << " at step " << res.best_val_step << "\nbest checkpoint: "
                  << res.best_checkpoint << "\n";
    });
}

void add_eval(CLI::App& app) {
    auto* cmd = app.add_subcommand("eval", "Evaluate a trained model");
    auto metric = std::make_shared<std::string>("mse");
    auto model_path = std::make_shared<std::string>();
    auto data = std::make_shared<std::string>();
    auto split = std::make_shared<std::string>("test");
    auto out = std::make_shared<std::string>();
    auto n_panels = std::make_shared<int>(1000);
    auto repeats = std::make_shared<int>(5);
    auto seed = std::make_shared<std::uint64_t>(0);
    cmd->add_option("--metric", *metric, "mse | factor | sap | selection | all")
        ->default_str("mse");
    cmd->add_option("--model", *model_path, "Checkpoint path")->required();
    cmd->add_option("--data", *data, "Dataset directory")->required();
    cmd->add_option("--split", *split, "Split to evaluate")->default_str("test");
    cmd->add_option("--n-panels", *n_panels, "Panel budget for MSE")->default_val(1000);
    cmd->add_option("--repeats", *repeats, "Evaluation repeats (std)")->default_val(5);
    cmd->add_option("--seed", *seed, "Evaluation seed")->default_val(0);
    cmd->add_option("--out", *out, "Directory for metric JSON files");
    cmd->callback([=]() {
        auto model = model::load_checkpoint(*model_path, nullptr);
        gen::DatasetSpec spec = gen::load_spec(*data);
        std::vector<eval::MetricReport> reports;
        auto want = [&](const char* name) { return *metric == name || *metric == "all"; };
        if (want("mse")) {
            auto ds = gen::load_panels(*data + "/" + *split + ".panels");
            reports.push_back(eval::varying_position_mse(eval::model_painter(*model), ds,
                                                         *n_panels, *repeats, *seed));
        }
        if (want("factor")) {
            eval::FactorVaeOptions o;
            o.repeats = *repeats;
            o.seed = *seed;
            reports.push_back(eval::factor_vae_score(eval::model_encoder(*model), spec, o));
        }
        if (want("sap")) {
            eval::SapOptions o;
            o.repeats = *repeats;
            o.seed = *seed;
            reports.push_back(eval::sap_score(eval::model_encoder(*model), spec, o));
        }
        if (want("selection")) {
            auto sel = gen::load_selections(*data + "/" + *split + ".selections");
            reports.push_back(
                eval::selection_accuracy(eval::model_painter(*model), sel, *repeats, *seed));
        }
        if (reports.empty()) throw ConfigError("unknown metric: " + *metric);
        for (const auto& r : reports) {
            std::cout << r.to_json().dump() << "\n";
            if (!out->empty()) {
                fs::create_directories(*out);
                write_json(*out + "/" + r.metric + ".json", r.to_json());
            }
        }
    });
}

void add_predict(CLI::App& app) {
    auto* cmd = app.add_subcommand("predict", "Paint hidden cells of a panel");
    auto model_path = std::make_shared<std::string>();
    auto data = std::make_shared<std::string>();
    auto split = std::make_shared<std::string>("test");
    auto panel = std::make_shared<int>(0);
    auto hide = std::make_shared<std::vector<int>>();
    auto out = std::make_shared<std::string>("prediction.png");
    auto seed = std::make_shared<std::uint64_t>(0);
    cmd->add_option("--model", *model_path, "Checkpoint path")->required();
    cmd->add_option("--data", *data, "Dataset directory")->required();
    cmd->add_option("--split", *split, "Split")->default_str("test");
    cmd->add_option("--panel", *panel, "Panel index")->default_val(0);
    cmd->add_option("--hide", *hide, "Cell indices (0..8) to hide; default 8");
    cmd->add_option("--seed", *seed, "Seed")->default_val(0);
    cmd->add_option("--out", *out, "Output PNG path")->default_str("prediction.png");
    cmd->callback([=]() {
        auto model = model::load_checkpoint(*model_path, nullptr);
        auto ds = gen::load_panels(*data + "/" + *split + ".panels");
        if (*panel < 0 || *panel >= ds.n) throw ConfigError("panel index out of range");
        std::array<bool, 9> mask;
        mask.fill(true);
        if (hide->empty()) hide->push_back(8);
        for (int h : *hide) {
            if (h < 0 || h > 8) throw ConfigError("--hide expects indices in 0..8");
            mask[static_cast<std::size_t>(h)] = false;
        }
        auto rep = eval::multi_cell_report(*model, dataset_panel_cells(ds, *panel), mask, *out,
                                           *seed);
        write_json(*out + ".json", rep.to_json());
        std::cout << rep.to_json().dump() << "\n";
    });
}

void add_sample(CLI::App& app) {
    auto* cmd = app.add_subcommand("sample", "Sample novel panels from the generative model");
    auto model_path = std::make_shared<std::string>();
    auto count = std::make_shared<int>(4);
    auto out = std::make_shared<std::string>("samples");
    auto seed = std::make_shared<std::uint64_t>(0);
    cmd->add_option("--model", *model_path, "Checkpoint path")->required();
    cmd->add_option("--count", *count, "Panels to sample")->default_val(4);
    cmd->add_option("--seed", *seed, "Seed")->default_val(0);
    cmd->add_option("--out", *out, "Output directory")->default_str("samples");
    cmd->callback([=]() {
        auto model = model::load_checkpoint(*model_path, nullptr);
        fs::create_directories(*out);
        for (int i = 0; i < *count; ++i) {
            Rng rng = Rng::derive(*seed, "sample", static_cast<std::uint64_t>(i));
            auto panel = model->generate_panel(rng);
            img::TileGrid grid(3, 3, model->image_size(), 4);
            for (int k = 0; k < 9; ++k) grid.place(k / 3, k % 3, panel[static_cast<std::size_t>(k)]);
            grid.save(*out + "/panel" + std::to_string(i) + ".png");
        }
        write_json(*out + "/sample.json", {{"count", *count}, {"seed", *seed}});
        std::cout << *count << " panels written to " << *out << "\n";
    });
}

void add_interpolate(CLI::App& app) {
    auto* cmd = app.add_subcommand("interpolate", "Interpolate a panel onto an m x m grid");
    auto model_path = std::make_shared<std::string>();
    auto data = std::make_shared<std::string>();
    auto split = std::make_shared<std::string>("test");
    auto panel = std::make_shared<int>(0);
    auto m = std::make_shared<int>(5);
    auto out = std::make_shared<std::string>("interpolation.png");
    cmd->add_option("--model", *model_path, "Checkpoint path")->required();
    cmd->add_option("--data", *data, "Dataset directory")->required();
    cmd->add_option("--split", *split, "Split")->default_str("test");
    cmd->add_option("--panel", *panel, "Panel index")->default_val(0);
    cmd->add_option("--m", *m, "Grid resolution")->default_val(5);
    cmd->add_option("--out", *out, "Output PNG path")->default_str("interpolation.png");
    cmd->callback([=]() {
        auto model = model::load_checkpoint(*model_path, nullptr);
        auto ds = gen::load_panels(*data + "/" + *split + ".panels");
        if (*panel < 0 || *panel >= ds.n) throw ConfigError("panel index out of range");
        auto cells = model->interpolate_panel(dataset_panel_cells(ds, *panel), *m);
        img::TileGrid grid(*m, *m, model->image_size(), 3);
        for (int r = 0; r < *m; ++r)
            for (int c = 0; c < *m; ++c)
                grid.place(r, c, cells[static_cast<std::size_t>(r) * *m + c]);
        grid.save(*out);
        std::cout << "interpolated grid written to " << *out << "\n";
    });
}

void add_traverse(CLI::App& app) {
    auto* cmd = app.add_subcommand("traverse", "Latent traversal rows for one cell image");
    auto model_path = std::make_shared<std::string>();
    auto data = std::make_shared<std::string>();
    auto split = std::make_shared<std::string>("test");
    auto panel = std::make_shared<int>(0);
    auto cell = std::make_shared<int>(0);
    auto lo = std::make_shared<double>(-1.5);
    auto hi = std::make_shared<double>(1.5);
    auto steps = std::make_shared<int>(7);
    auto out = std::make_shared<std::string>("traversal.png");
    cmd->add_option("--model", *model_path, "Checkpoint path")->required();
    cmd->add_option("--data", *data, "Dataset directory")->required();
    cmd->add_option("--split", *split, "Split")->default_str("test");
    cmd->add_option("--panel", *panel, "Panel index")->default_val(0);
    cmd->add_option("--cell", *cell, "Cell index 0..8")->default_val(0);
    cmd->add_option("--lo", *lo, "Sweep start")->default_val(-1.5);
    cmd->add_option("--hi", *hi, "Sweep end")->default_val(1.5);
    cmd->add_option("--steps", *steps, "Sweep steps")->default_val(7);
    cmd->add_option("--out", *out, "Output PNG path")->default_str("traversal.png");
    cmd->callback([=]() {
        auto model = model::load_checkpoint(*model_path, nullptr);
        auto ds = gen::load_panels(*data + "/" + *split + ".panels");
        if (*panel < 0 || *panel >= ds.n) throw ConfigError("panel index out of range");
        if (*cell < 0 || *cell > 8) throw ConfigError("cell index out of range");
        auto grid = eval::traverse_latents(*model, ds.cell_f64(*panel, *cell), *lo, *hi, *steps,
                                           *out);
        std::cout << "traversal grid (" << grid.dims << " x " << grid.steps << ") written to "
                  << *out << "\n";
    });
}

void add_grad_check(CLI::App& app) {
    auto* cmd = app.add_subcommand("grad-check",
                                   "Finite-difference audit of the elbo gradients");
    auto checks = std::make_shared<int>(0);
    auto seed = std::make_shared<std::uint64_t>(0);
    auto tol = std::make_shared<double>(1e-3);
    cmd->add_option("--checks", *checks, "Checks per parameter group (0 = every parameter)")
        ->default_val(0);
    cmd->add_option("--seed", *seed, "Seed")->default_val(0);
    cmd->add_option("--tol", *tol, "Failure threshold on the max relative error")
        ->default_val(1e-3);
    cmd->callback([=]() {
        train::GradCheckConfig cfg;
        cfg.checks_per_group = *checks;
        cfg.seed = *seed;
        auto rep = train::grad_check(cfg);
        std::cout << rep.to_json().dump(2) << "\n";
        if (rep.overall > *tol)
            throw NumericalError("gradient check failed: max relative error " +
                                 std::to_string(rep.overall));
    });
}

void add_report(CLI::App& app) {
    auto* cmd = app.add_subcommand("report", "Bundle metric JSONs into a Markdown summary");
    auto run = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    cmd->add_option("--run", *run, "Run directory containing metric JSON files")->required();
    cmd->add_option("--out", *out, "Output Markdown path (default: <run>/report.md)");
    cmd->callback([=]() {
        const std::string target = out->empty() ? *run + "/report.md" : *out;
        std::ofstream f(target);
        if (!f) throw IoError("cannot open " + target);
        f << "# Run report\n\n";
        f << "| metric | value | std | repeats |\n|---|---|---|---|\n";
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(*run))
            if (e.path().extension() == ".json") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        int metrics = 0;
        for (const auto& p : files) {
            nlohmann::json j = load_json_file(p.string());
            if (!j.contains("metric")) continue;
            f << "| " << j["metric"].get<std::string>() << " | " << j["value"] << " | "
              << j["std"] << " | " << j["n_repeats"] << " |\n";
            ++metrics;
        }
        if (fs::exists(*run + "/val.jsonl")) {
            std::ifstream vf(*run + "/val.jsonl");
            std::string line, last;
            double best = -1e300;
            while (std::getline(vf, line)) {
                if (line.empty()) continue;
                best = std::max(best, nlohmann::json::parse(line)["val_elbo"].get<double>());
                last = line;
            }
            f << "\nBest validation elbo: " << best << "\n";
        }
        f << "\n" << metrics << " metric(s) collected.\n";
        std::cout << "report written to " << target << "\n";
    });
}

}  // namespace

int run(int argc, const char* const* argv) {
    CLI::App app{"GP-prior latent variable model for RPM panel painting"};
    app.require_subcommand(1);
    add_gen_data(app);
    add_gen_selection(app);
    add_train(app);
    add_eval(app);
    add_predict(app);
    add_sample(app);
    add_interpolate(app);
    add_traverse(app);
    add_grad_check(app);
    add_report(app);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace rpm::cli
