#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "rpm/panelgen.hpp"

using namespace rpm;
using namespace rpm::gen;

namespace {

std::vector<char> slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return std::vector<char>((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        path = std::filesystem::temp_directory_path() / ("rpmgen_" + tag);
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

double cell_mse(const std::uint8_t* a, const std::uint8_t* b, std::size_t n) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = (a[i] - static_cast<double>(b[i])) / 255.0;
        s += d * d;
    }
    return s / static_cast<double>(n);
}

}  // namespace

TEST_CASE("progress rows have constant steps of at least min_step") {
    DatasetSpec spec = DatasetSpec::preset("polygon");
    Rng rng(1);
    int seen_progress = 0;
    for (int t = 0; t < 500; ++t) {
        PanelBlueprint bp = sample_rule_instance(spec, rng);
        CHECK(check_blueprint(bp, spec) == "");
        if (bp.rule_instance.rule != Rule::Progress) continue;
        ++seen_progress;
        const auto& name = bp.rule_instance.chosen[0];
        const bool horiz = bp.rule_instance.direction == Direction::Horizontal;
        for (int line = 0; line < 3; ++line) {
            const double v0 = horiz ? bp.value(name, line, 0) : bp.value(name, 0, line);
            const double v1 = horiz ? bp.value(name, line, 1) : bp.value(name, 1, line);
            const double v2 = horiz ? bp.value(name, line, 2) : bp.value(name, 2, line);
            CHECK(std::abs((v2 - v1) - (v1 - v0)) < 1e-9);
            CHECK(std::abs(v1 - v0) >= spec.concept_spec(name).min_step - 1e-12);
        }
    }
    CHECK(seen_progress > 100);
}

TEST_CASE("multiprogress always chooses at least two concepts") {
    DatasetSpec spec = DatasetSpec::preset("circle");
    Rng rng(2);
    int seen_multi = 0;
    for (int t = 0; t < 10000; ++t) {
        PanelBlueprint bp = sample_rule_instance(spec, rng);
        if (bp.rule_instance.rule == Rule::Multiprogress) {
            ++seen_multi;
            CHECK(bp.rule_instance.chosen.size() >= 2);
        }
    }
    CHECK(seen_multi > 3000);
}

TEST_CASE("direction ratio is near one half over 10000 blueprints") {
    DatasetSpec spec = DatasetSpec::preset("polygon");
    Rng rng(3);
    int horizontal = 0;
    const int n = 10000;
    for (int t = 0; t < n; ++t) {
        PanelBlueprint bp = sample_rule_instance(spec, rng);
        if (bp.rule_instance.direction == Direction::Horizontal) ++horizontal;
    }
    const double ratio = static_cast<double>(horizontal) / n;
    CHECK(ratio >= 0.47);
    CHECK(ratio <= 0.53);
}

TEST_CASE("transposing a horizontal blueprint yields a valid vertical one") {
    DatasetSpec spec = DatasetSpec::preset("polygon");
    Rng rng(4);
    int checked = 0;
    for (int t = 0; t < 200 && checked < 50; ++t) {
        PanelBlueprint bp = sample_rule_instance(spec, rng);
        if (bp.rule_instance.direction != Direction::Horizontal) continue;
        ++checked;
        PanelBlueprint tr = bp;
        tr.rule_instance.direction = Direction::Vertical;
        for (auto& [name, grid] : tr.concept_grid) {
            auto orig = grid;
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j)
                    grid[static_cast<std::size_t>(cell_index(i, j))] =
                        orig[static_cast<std::size_t>(cell_index(j, i))];
        }
        CHECK(check_blueprint(tr, spec) == "");
    }
    CHECK(checked == 50);
}

TEST_CASE("infeasible spec raises a configuration error naming the concept") {
    DatasetSpec spec = DatasetSpec::preset("polygon");
    spec.concepts[0].min_step = 0.6;  // > width/2: no 3-step progression fits
    try {
        Rng rng(5);
        sample_rule_instance(spec, rng);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("size") != std::string::npos);
    }
}

TEST_CASE("render_cell is deterministic and rejects unknown concepts") {
    DatasetSpec spec = DatasetSpec::preset("polygon");
    std::map<std::string, double> cv{{"size", 0.5}, {"grayscale", 0.3}, {"rotation", 0.1}};
    auto a = render_cell(cv, spec);
    auto b = render_cell(cv, spec);
    CHECK(a == b);
    cv["wobble"] = 0.5;
    CHECK_THROWS_AS(render_cell(cv, spec), ConfigError);
}

TEST_CASE("grayscale extremes map to near-black and near-max fill") {
    DatasetSpec spec = DatasetSpec::preset("polygon");
    auto interior_mean = [&](double gray) {
        std::map<std::string, double> cv{{"size", 1.0}, {"grayscale", gray}, {"rotation", 0.0}};
        auto img = render_cell(cv, spec);
        // Interior probe: pixels well inside the largest triangle.
        double s = 0;
        int n = 0;
        for (int r = 28; r < 36; ++r)
            for (int c = 28; c < 36; ++c) {
                s += img[static_cast<std::size_t>(r) * 64 + c];
                ++n;
            }
        return s / n;
    };
    const double lo = interior_mean(0.0);
    const double hi = interior_mean(1.0);
    CHECK(lo < hi);
    CHECK(std::abs(lo - 0.0) < 0.05);
    CHECK(std::abs(hi - 0.9) < 0.05);
}

TEST_CASE("polygon size maps monotonically to ink area") {
    DatasetSpec spec = DatasetSpec::preset("polygon");
    double prev = -1.0;
    for (double size : {0.0, 0.25, 0.5, 0.75, 1.0}) {
        std::map<std::string, double> cv{{"size", size}, {"grayscale", 0.0}, {"rotation", 0.2}};
        auto img = render_cell(cv, spec);
        double ink = 0;
        for (double v : img) ink += 1.0 - v;
        CHECK(ink > prev);
        prev = ink;
    }
}

TEST_CASE("circle sector at arc pi covers the analytic area") {
    DatasetSpec spec = DatasetSpec::preset("circle");
    // size value whose arc is exactly pi: pi/6 + v*(3pi/2 - pi/6) = pi.
    const double v = (M_PI - M_PI / 6.0) / (1.5 * M_PI - M_PI / 6.0);
    std::map<std::string, double> cv{{"position", 0.35}, {"size", v}};
    auto img = render_cell(cv, spec);
    // Count dark pixels strictly inside radius 21: only the sector band
    // (12..24) lives there, clear of the outline ring (22..24).
    int dark = 0;
    for (int r = 0; r < 64; ++r)
        for (int c = 0; c < 64; ++c) {
            const double dx = c + 0.5 - 32.0;
            const double dy = r + 0.5 - 32.0;
            if (dx * dx + dy * dy >= 21.0 * 21.0) continue;
            if (img[static_cast<std::size_t>(r) * 64 + c] < 0.5) ++dark;
        }
    const double analytic = 0.5 * M_PI * (21.0 * 21.0 - 12.0 * 12.0);
    CHECK(std::abs(dark - analytic) / analytic < 0.03);
}

TEST_CASE("dataset generation: counts, determinism, and invariant checks") {
    TempDir tmp("ds");
    DatasetSpec spec = DatasetSpec::preset("polygon");
    SplitSizes sizes{30, 10, 20};
    generate_dataset(spec, sizes, 7, tmp.path.string());

    auto train = load_panels((tmp.path / "train.panels").string(),
                             (tmp.path / "train.meta.jsonl").string());
    CHECK(train.n == 30);
    CHECK(train.height == 64);
    auto test = load_panels((tmp.path / "test.panels").string());
    CHECK(test.n == 20);

    DatasetSpec round = load_spec(tmp.path.string());
    CHECK(round.name == spec.name);
    CHECK(round.concepts.size() == spec.concepts.size());

    // Regeneration with the same seed is byte-identical.
    TempDir tmp2("ds2");
    generate_dataset(spec, sizes, 7, tmp2.path.string());
    for (const char* f : {"train.panels", "val.panels", "test.panels", "train.meta.jsonl"})
        CHECK(slurp((tmp.path / f).string()) == slurp((tmp2.path / f).string()));

    // A different seed is not.
    TempDir tmp3("ds3");
    generate_dataset(spec, sizes, 8, tmp3.path.string());
    CHECK(slurp((tmp.path / "train.panels").string()) !=
          slurp((tmp3.path / "train.panels").string()));

    // Metadata reproduces the blueprint; images are a function of it.
    for (int p = 0; p < train.n; ++p) {
        const auto& meta = train.meta[static_cast<std::size_t>(p)];
        PanelBlueprint bp;
        bp.rule_instance.rule = rule_from_string(meta["rule"].get<std::string>());
        bp.rule_instance.direction = direction_from_string(meta["direction"].get<std::string>());
        bp.rule_instance.chosen = meta["chosen_concepts"].get<std::vector<std::string>>();
        for (const auto& [name, rows] : meta["concept_grid"].items())
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j)
                    bp.concept_grid[name][static_cast<std::size_t>(cell_index(i, j))] =
                        rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)].get<double>();
        CHECK(check_blueprint(bp, spec) == "");
        Panel re = render_panel(bp, spec);
        CHECK(std::equal(re.images.begin(), re.images.end(), train.panel(p)));
    }

    CHECK_THROWS_AS(generate_dataset(spec, SplitSizes{0, 1, 1}, 7, tmp.path.string()),
                    ConfigError);
}

TEST_CASE("pixel bytes load back as [0,1] values") {
    TempDir tmp("px");
    DatasetSpec spec = DatasetSpec::preset("circle");
    generate_dataset(spec, SplitSizes{2, 1, 1}, 3, tmp.path.string());
    auto ds = load_panels((tmp.path / "train.panels").string());
    auto cell = ds.cell_f64(0, 4);
    for (double v : cell) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("selection panels: exact answer, separation, oracle accuracy") {
    DatasetSpec spec = DatasetSpec::preset("polygon");
    const std::size_t hw = 64 * 64;
    int correct = 0;
    const int n = 300;
    for (int t = 0; t < n; ++t) {
        Rng rng(1000 + static_cast<std::uint64_t>(t));
        PanelBlueprint bp = sample_rule_instance(spec, rng);
        SelectionPanel sp = make_selection_panel(bp, spec, rng);
        // The answer candidate is pixel-identical to the hidden cell.
        CHECK(std::equal(sp.candidate(sp.answer_index), sp.candidate(sp.answer_index) + hw,
                         sp.context.cell(8)));
        // All pairwise candidate MSEs clear the threshold.
        for (int a = 0; a < 8; ++a)
            for (int b = a + 1; b < 8; ++b)
                CHECK(cell_mse(sp.candidate(a), sp.candidate(b), hw) >= spec.distractor.min_mse);
        // Oracle predictor: argmin MSE against the ground-truth image.
        int best = -1;
        double best_mse = 1e18;
        for (int c = 0; c < 8; ++c) {
            const double m = cell_mse(sp.candidate(c), sp.context.cell(8), hw);
            if (m < best_mse) {
                best_mse = m;
                best = c;
            }
        }
        if (best == sp.answer_index) ++correct;
    }
    CHECK(correct == n);
}

TEST_CASE("selection split file round trip") {
    TempDir tmp("sel");
    DatasetSpec spec = DatasetSpec::preset("circle");
    generate_selection_split(spec, 5, 11, "test", tmp.path.string());
    auto ds = load_selections((tmp.path / "test.selections").string());
    CHECK(ds.n == 5);
    for (int p = 0; p < 5; ++p) {
        CHECK(ds.answers[static_cast<std::size_t>(p)] < 8);
        const std::size_t hw = static_cast<std::size_t>(ds.height) * ds.width;
        CHECK(std::equal(ds.candidate(p, ds.answers[static_cast<std::size_t>(p)]),
                         ds.candidate(p, ds.answers[static_cast<std::size_t>(p)]) + hw,
                         ds.cell(p, 8)));
    }
}

TEST_CASE("config file specs load and validate") {
    for (const char* name : {"square", "complex_polygon", "complex_circle", "position_polygon",
                             "position_circle"}) {
        const std::string path = std::string(RPM_SOURCE_DIR) + "/configs/" + name + ".json";
        std::ifstream f(path);
        REQUIRE(f.good());
        nlohmann::json j;
        f >> j;
        DatasetSpec spec = DatasetSpec::from_json(j);
        Rng rng(9);
        for (int t = 0; t < 50; ++t) {
            PanelBlueprint bp = sample_rule_instance(spec, rng);
            CHECK(check_blueprint(bp, spec) == "");
            if (t == 0) {
                Panel p = render_panel(bp, spec);  // renderer accepts every concept
                CHECK(p.images.size() == 9 * 64 * 64);
            }
        }
    }
}
