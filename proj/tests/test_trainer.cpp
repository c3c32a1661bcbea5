#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "rpm/trainer.hpp"
#include "test_util.hpp"

using namespace rpm;
using train::GradCheckConfig;
using train::TrainConfig;

namespace {

namespace fs = std::filesystem;

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("rpmtr_" + tag);
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

TrainConfig tiny_train_config(const std::string& data_dir, const std::string& out_dir) {
    TrainConfig cfg;
    cfg.model.image_size = 8;
    cfg.model.d_z = 2;
    cfg.model.d_loc = 2;
    cfg.learning_rate = 3e-4;
    cfg.batch_size = 10;
    cfg.micro_batch = 10;
    cfg.beta = 2.0;
    cfg.gamma = 2.0;
    cfg.seed = 5;
    cfg.dataset_dir = data_dir;
    cfg.out_dir = out_dir;
    return cfg;
}

std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream f(path);
    REQUIRE(f.good());
    std::vector<std::string> lines;
    std::string l;
    while (std::getline(f, l))
        if (!l.empty()) lines.push_back(l);
    return lines;
}

}  // namespace

TEST_CASE("training is deterministic and the smoke run improves the elbo") {
    TempDir data("data");
    testutil::make_tiny_dataset(data.path.string(), 50, 10, 10, 3);

    TempDir out_a("runa"), out_b("runb");
    TrainConfig cfg = tiny_train_config(data.path.string(), out_a.path.string());
    cfg.max_epochs = 100;
    cfg.max_steps = 500;
    auto res_a = train::train(cfg);
    CHECK(res_a.steps == 500);

    cfg.out_dir = out_b.path.string();
    auto res_b = train::train(cfg);

    // Identical config and seed give byte-identical metric logs.
    auto la = read_lines(res_a.metrics_path);
    auto lb = read_lines(res_b.metrics_path);
    REQUIRE(la.size() == lb.size());
    CHECK(la == lb);
    CHECK(read_lines(res_a.val_metrics_path) == read_lines(res_b.val_metrics_path));

    // Metric rows are strictly increasing in step and carry the breakdown.
    int prev = 0;
    double ma_early = 0, ma_late = 0;
    for (std::size_t i = 0; i < la.size(); ++i) {
        auto row = nlohmann::json::parse(la[i]);
        CHECK(row["step"].get<int>() == prev + 1);
        prev = row["step"];
        for (const char* k : {"recon", "kl_lambda", "kl_z_marginal", "elbo"}) CHECK(row.contains(k));
        const double e = row["elbo"].get<double>();
        if (row["step"] >= 31 && row["step"] <= 50) ma_early += e / 20.0;
        if (row["step"] >= 481) ma_late += e / 20.0;
    }
    // 20-step moving average of the elbo rises over the smoke run.
    CHECK(ma_late > ma_early);

    // Best checkpoint is the argmax of the logged validation elbos.
    double best = -1e300;
    int best_step = 0;
    for (const auto& l : read_lines(res_a.val_metrics_path)) {
        auto row = nlohmann::json::parse(l);
        if (row["val_elbo"].get<double>() > best) {
            best = row["val_elbo"];
            best_step = row["step"];
        }
    }
    CHECK(res_a.best_val_elbo == best);
    CHECK(res_a.best_val_step == best_step);
    CHECK(fs::exists(res_a.best_checkpoint));
}

TEST_CASE("resume bit-matches an uninterrupted run from an epoch boundary") {
    TempDir data("rdata");
    testutil::make_tiny_dataset(data.path.string(), 20, 8, 8, 4);

    // Uninterrupted: 6 epochs (2 steps per epoch at batch 10 over 20 panels).
    TempDir out_full("full"), out_half("half");
    TrainConfig cfg = tiny_train_config(data.path.string(), out_full.path.string());
    cfg.max_epochs = 6;
    auto full = train::train(cfg);
    CHECK(full.steps == 12);

    cfg.out_dir = out_half.path.string();
    cfg.max_epochs = 3;
    auto half = train::train(cfg);
    CHECK(half.steps == 6);
    auto resumed = train::resume(half.last_checkpoint, {{"max_epochs", 6}});
    CHECK(resumed.steps == 12);

    auto lf = read_lines(full.metrics_path);
    auto lr = read_lines(resumed.metrics_path);
    REQUIRE(lf.size() == lr.size());
    CHECK(lf == lr);

    // The rewritten config carries a learning-rate override from the next run.
    auto resumed2 = train::resume(resumed.last_checkpoint,
                                  {{"max_epochs", 7}, {"learning_rate", 9e-4}});
    CHECK(resumed2.steps == 14);
    std::ifstream cf(out_half.path / "config.json");
    nlohmann::json cj;
    cf >> cj;
    CHECK(cj["learning_rate"].get<double>() == 9e-4);
}

TEST_CASE("resume refuses checkpoints without training state") {
    TempDir data("ndata");
    testutil::make_tiny_dataset(data.path.string(), 10, 5, 5, 6);
    TempDir out("nout");
    TrainConfig cfg = tiny_train_config(data.path.string(), out.path.string());
    cfg.max_epochs = 1;
    auto res = train::train(cfg);
    CHECK_THROWS_AS(train::resume(res.best_checkpoint), IoError);  // model-only file
}

TEST_CASE("diverged training aborts with a numerical error") {
    TempDir data("xdata");
    testutil::make_tiny_dataset(data.path.string(), 10, 5, 5, 7);
    TempDir out("xout");
    TrainConfig cfg = tiny_train_config(data.path.string(), out.path.string());
    cfg.learning_rate = 1e9;  // drives the kernel scale to overflow
    cfg.max_epochs = 50;
    CHECK_THROWS_AS(train::train(cfg), NumericalError);
}

TEST_CASE("grad_check: clean pass, self-check zero, corruption detected") {
    GradCheckConfig cfg;
    cfg.checks_per_group = 5;
    auto rep = train::grad_check(cfg);
    CHECK(rep.groups.size() >= 4);
    for (const auto& g : rep.groups) {
        CAPTURE(g.name);
        CHECK(g.max_rel_err <= 1e-3);
        CHECK(g.checked > 0);
    }

    GradCheckConfig self = cfg;
    self.self_check = true;
    auto rep_self = train::grad_check(self);
    CHECK(rep_self.overall == 0.0);

    GradCheckConfig bad = cfg;
    bad.corrupt_group = "decoder";
    auto rep_bad = train::grad_check(bad);
    double decoder_err = 0;
    for (const auto& g : rep_bad.groups)
        if (g.name == "decoder") decoder_err = g.max_rel_err;
    CHECK(decoder_err > 1e-1);
}
