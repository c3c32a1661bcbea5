#include "rpm/panelgen.hpp"

#include <algorithm>
#include <cmath>

namespace rpm::gen {

std::string to_string(Rule r) {
    switch (r) {
        case Rule::Progress: return "progress";
        case Rule::Biprogress: return "biprogress";
        case Rule::Multiprogress: return "multiprogress";
    }
    throw ContractError("bad rule enum");
}

std::string to_string(Direction d) {
    return d == Direction::Horizontal ? "horizontal" : "vertical";
}

Rule rule_from_string(const std::string& s) {
    if (s == "progress") return Rule::Progress;
    if (s == "biprogress") return Rule::Biprogress;
    if (s == "multiprogress") return Rule::Multiprogress;
    throw ConfigError("unknown rule: " + s);
}

Direction direction_from_string(const std::string& s) {
    if (s == "horizontal") return Direction::Horizontal;
    if (s == "vertical") return Direction::Vertical;
    throw ConfigError("unknown direction: " + s);
}

void ConceptSpec::validate() const {
    if (!(low < high)) throw ConfigError("concept " + name + ": range.low must be < range.high");
    if (kind == ConceptKind::Changeable) {
        if (!(min_step > 0.0) || !(min_step < width() / 2.0))
            throw ConfigError("concept " + name +
                              ": min_step must lie in (0, (high-low)/2) for a 3-step progression");
    }
}

const ConceptSpec& DatasetSpec::concept_spec(const std::string& n) const {
    for (const auto& c : concepts)
        if (c.name == n) return c;
    throw ConfigError("unknown concept: " + n);
}

std::vector<const ConceptSpec*> DatasetSpec::changeable() const {
    std::vector<const ConceptSpec*> out;
    for (const auto& c : concepts)
        if (c.kind == ConceptKind::Changeable) out.push_back(&c);
    return out;
}

double DatasetSpec::renderer_param(const std::string& key, double fallback) const {
    auto it = renderer_params.find(key);
    return it == renderer_params.end() ? fallback : it->second;
}

void DatasetSpec::validate() const {
    if (rules.empty()) throw ConfigError("dataset " + name + ": rule set is empty");
    if (changeable().empty()) throw ConfigError("dataset " + name + ": no changeable concepts");
    for (const auto& c : concepts) c.validate();
    const bool has_multi =
        std::find(rules.begin(), rules.end(), Rule::Multiprogress) != rules.end();
    if (has_multi && changeable().size() < 2)
        throw ConfigError("dataset " + name + ": multiprogress needs >= 2 changeable concepts");
    const bool has_bi = std::find(rules.begin(), rules.end(), Rule::Biprogress) != rules.end();
    if (has_bi)
        for (const auto* c : changeable())
            if (!(c->min_step <= c->width() / 4.0))
                throw ConfigError("concept " + c->name +
                                  ": biprogress needs min_step <= (high-low)/4");
    if (image_size <= 0) throw ConfigError("image_size must be positive");
}

nlohmann::json DatasetSpec::to_json() const {
    nlohmann::json j;
    j["name"] = name;
    j["renderer"] = renderer;
    j["renderer_params"] = renderer_params;
    j["image_size"] = image_size;
    j["concepts"] = nlohmann::json::array();
    for (const auto& c : concepts) {
        j["concepts"].push_back({{"name", c.name},
                                 {"kind", c.kind == ConceptKind::Changeable ? "changeable"
                                                                            : "unchangeable"},
                                 {"low", c.low},
                                 {"high", c.high},
                                 {"min_step", c.min_step}});
    }
    j["rules"] = nlohmann::json::array();
    for (Rule r : rules) j["rules"].push_back(to_string(r));
    j["unchangeable_per_cell"] = unchangeable_per_cell;
    j["distractor"] = {{"min_mse", distractor.min_mse}, {"max_retries", distractor.max_retries}};
    return j;
}

DatasetSpec DatasetSpec::from_json(const nlohmann::json& j) {
    DatasetSpec s;
    s.name = j.at("name").get<std::string>();
    s.renderer = j.at("renderer").get<std::string>();
    if (j.contains("renderer_params"))
        s.renderer_params = j["renderer_params"].get<std::map<std::string, double>>();
    s.image_size = j.value("image_size", 64);
    for (const auto& cj : j.at("concepts")) {
        ConceptSpec c;
        c.name = cj.at("name").get<std::string>();
        const std::string kind = cj.at("kind").get<std::string>();
        if (kind == "changeable")
            c.kind = ConceptKind::Changeable;
        else if (kind == "unchangeable")
            c.kind = ConceptKind::Unchangeable;
        else
            throw ConfigError("unknown concept kind: " + kind);
        c.low = cj.value("low", 0.0);
        c.high = cj.value("high", 1.0);
        c.min_step = cj.value("min_step", 0.15);
        s.concepts.push_back(c);
    }
    for (const auto& rj : j.at("rules")) s.rules.push_back(rule_from_string(rj.get<std::string>()));
    s.unchangeable_per_cell = j.value("unchangeable_per_cell", false);
    if (j.contains("distractor")) {
        s.distractor.min_mse = j["distractor"].value("min_mse", 1e-3);
        s.distractor.max_retries = j["distractor"].value("max_retries", 100);
    }
    s.validate();
    return s;
}

DatasetSpec DatasetSpec::preset(const std::string& name) {
    DatasetSpec s;
    if (name == "polygon") {
        s.name = "polygon";
        s.renderer = "polygon";
        s.renderer_params["n_sides"] = 3;
        s.concepts = {{"size", ConceptKind::Changeable, 0.0, 1.0, 0.15},
                      {"grayscale", ConceptKind::Changeable, 0.0, 1.0, 0.15},
                      {"rotation", ConceptKind::Unchangeable, 0.0, 1.0, 0.15}};
        s.rules = {Rule::Progress, Rule::Biprogress};
    } else if (name == "circle") {
        s.name = "circle";
        s.renderer = "circle";
        s.concepts = {{"position", ConceptKind::Changeable, 0.0, 1.0, 0.15},
                      {"size", ConceptKind::Changeable, 0.0, 1.0, 0.15}};
        s.rules = {Rule::Progress, Rule::Multiprogress};
    } else {
        throw ConfigError("unknown preset: " + name + " (built-ins: polygon, circle)");
    }
    s.validate();
    return s;
}

bool RuleInstance::chose(const std::string& name) const {
    return std::find(chosen.begin(), chosen.end(), name) != chosen.end();
}

namespace {

// Start/step for one line such that start + k*step stays in range for
// k in {0,1,2} and |step| >= min_step.
RuleInstance::Progression sample_progression(const ConceptSpec& c, Rng& rng) {
    RuleInstance::Progression p;
    for (int line = 0; line < 3; ++line) {
        const double mag = rng.uniform(c.min_step, c.width() / 2.0);
        const double step = rng.uniform() < 0.5 ? mag : -mag;
        const double lo = step > 0.0 ? c.low : c.low - 2.0 * step;
        const double hi = step > 0.0 ? c.high - 2.0 * step : c.high;
        p.start[static_cast<std::size_t>(line)] = rng.uniform(lo, hi);
        p.step[static_cast<std::size_t>(line)] = step;
    }
    return p;
}

RuleInstance::BiProgression sample_biprogression(const ConceptSpec& c, Rng& rng) {
    RuleInstance::BiProgression b;
    const double w = c.width();
    const double mag_r = rng.uniform(c.min_step, w / 2.0 - c.min_step);
    const double mag_c = rng.uniform(c.min_step, w / 2.0 - mag_r);
    b.row_step = rng.uniform() < 0.5 ? mag_r : -mag_r;
    b.col_step = rng.uniform() < 0.5 ? mag_c : -mag_c;
    const double lo = c.low - std::min(0.0, 2.0 * b.row_step) - std::min(0.0, 2.0 * b.col_step);
    const double hi = c.high - std::max(0.0, 2.0 * b.row_step) - std::max(0.0, 2.0 * b.col_step);
    b.corner = rng.uniform(lo, hi);
    return b;
}

}  // namespace

PanelBlueprint sample_rule_instance(const DatasetSpec& spec, Rng& rng) {
    spec.validate();
    const auto changeable = spec.changeable();

    PanelBlueprint bp;
    bp.dataset_id = spec.name;
    RuleInstance& ri = bp.rule_instance;
    ri.rule = spec.rules[static_cast<std::size_t>(rng.uniform_index(spec.rules.size()))];

    if (ri.rule == Rule::Multiprogress) {
        // Uniform subset size in [2, |changeable|], then a uniform subset.
        const std::size_t n = changeable.size();
        const std::size_t count = 2 + rng.uniform_index(n - 1);
        std::vector<const ConceptSpec*> pool = changeable;
        rng.shuffle(pool);
        for (std::size_t i = 0; i < count; ++i) ri.chosen.push_back(pool[i]->name);
        std::sort(ri.chosen.begin(), ri.chosen.end());
    } else {
        ri.chosen.push_back(
            changeable[static_cast<std::size_t>(rng.uniform_index(changeable.size()))]->name);
    }

    // Canonical horizontal build: chosen concepts progress along each row.
    for (const std::string& name : ri.chosen) {
        const ConceptSpec& c = spec.concept_spec(name);
        if (ri.rule == Rule::Biprogress)
            ri.biprogressions[name] = sample_biprogression(c, rng);
        else
            ri.progressions[name] = sample_progression(c, rng);
    }

    for (const auto& c : spec.concepts) {
        auto& grid = bp.concept_grid[c.name];
        if (ri.chose(c.name)) {
            if (ri.rule == Rule::Biprogress) {
                const auto& b = ri.biprogressions[c.name];
                for (int i = 0; i < 3; ++i)
                    for (int j = 0; j < 3; ++j)
                        grid[static_cast<std::size_t>(cell_index(i, j))] =
                            b.corner + i * b.col_step + j * b.row_step;
            } else {
                const auto& p = ri.progressions[c.name];
                for (int i = 0; i < 3; ++i)
                    for (int j = 0; j < 3; ++j)
                        grid[static_cast<std::size_t>(cell_index(i, j))] =
                            p.start[static_cast<std::size_t>(i)] +
                            j * p.step[static_cast<std::size_t>(i)];
            }
        } else if (c.kind == ConceptKind::Unchangeable && spec.unchangeable_per_cell) {
            for (int k = 0; k < kCells; ++k)
                grid[static_cast<std::size_t>(k)] = rng.uniform(c.low, c.high);
        } else {
            // Fixed within each row, resampled across rows.
            for (int i = 0; i < 3; ++i) {
                const double v = rng.uniform(c.low, c.high);
                for (int j = 0; j < 3; ++j) grid[static_cast<std::size_t>(cell_index(i, j))] = v;
            }
        }
    }

    // Transpose with probability one half to produce vertical rules.
    if (rng.uniform() < 0.5) {
        ri.direction = Direction::Vertical;
        for (auto& [name, grid] : bp.concept_grid) {
            std::array<double, 9> t = grid;
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j)
                    grid[static_cast<std::size_t>(cell_index(i, j))] =
                        t[static_cast<std::size_t>(cell_index(j, i))];
        }
    } else {
        ri.direction = Direction::Horizontal;
    }
    return bp;
}

std::string check_blueprint(const PanelBlueprint& bp, const DatasetSpec& spec, double tol) {
    const bool horizontal = bp.rule_instance.direction == Direction::Horizontal;
    auto grid_at = [&](const std::array<double, 9>& g, int line, int pos) {
        // For horizontal rules, a "line" is a row and `pos` walks columns;
        // transposed for vertical rules.
        return horizontal ? g[static_cast<std::size_t>(cell_index(line, pos))]
                          : g[static_cast<std::size_t>(cell_index(pos, line))];
    };
    for (const auto& c : spec.concepts) {
        auto it = bp.concept_grid.find(c.name);
        if (it == bp.concept_grid.end()) return "missing concept " + c.name;
        const auto& g = it->second;
        for (double v : g)
            if (v < c.low - tol || v > c.high + tol)
                return "concept " + c.name + " out of range";
        const bool chosen = bp.rule_instance.chose(c.name);
        for (int line = 0; line < 3; ++line) {
            const double d0 = grid_at(g, line, 1) - grid_at(g, line, 0);
            const double d1 = grid_at(g, line, 2) - grid_at(g, line, 1);
            if (chosen) {
                if (std::abs(d1 - d0) > tol)
                    return "concept " + c.name + " not isometric along the rule direction";
                if (std::abs(d0) + tol < c.min_step)
                    return "concept " + c.name + " step below min_step";
            } else if (!(c.kind == ConceptKind::Unchangeable && spec.unchangeable_per_cell)) {
                if (std::abs(d0) > tol || std::abs(d1) > tol)
                    return "concept " + c.name + " not fixed within its line";
            }
        }
        if (chosen && bp.rule_instance.rule == Rule::Biprogress) {
            // Both orientations must progress isometrically.
            for (int line = 0; line < 3; ++line) {
                const double e0 = grid_at(g, 1, line) - grid_at(g, 0, line);
                const double e1 = grid_at(g, 2, line) - grid_at(g, 1, line);
                if (std::abs(e1 - e0) > tol)
                    return "concept " + c.name + " not isometric across lines (biprogress)";
            }
        }
    }
    // Rule arity.
    const std::size_t n_chosen = bp.rule_instance.chosen.size();
    if (bp.rule_instance.rule == Rule::Multiprogress ? n_chosen < 2 : n_chosen != 1)
        return "rule arity violated";
    return {};
}

std::uint64_t panel_stream_seed(std::uint64_t dataset_seed, const std::string& split,
                                std::uint64_t index) {
    std::uint64_t sm = dataset_seed ^ 0x6a09e667f3bcc909ULL;
    std::uint64_t mix = splitmix64(sm);
    for (std::uint64_t t : {hash_string(split), index}) {
        sm ^= t + 0x9e3779b97f4a7c15ULL + (mix << 6) + (mix >> 2);
        mix = splitmix64(sm);
    }
    return mix;
}

Panel render_panel(const PanelBlueprint& bp, const DatasetSpec& spec) {
    Panel p;
    p.blueprint = bp;
    p.image_size = spec.image_size;
    const std::size_t cell_px = static_cast<std::size_t>(spec.image_size) * spec.image_size;
    p.images.resize(9 * cell_px);
    for (int k = 0; k < kCells; ++k) {
        std::map<std::string, double> cv;
        for (const auto& [name, grid] : bp.concept_grid) cv[name] = grid[static_cast<std::size_t>(k)];
        const std::vector<double> img = render_cell(cv, spec);
        for (std::size_t i = 0; i < cell_px; ++i)
            p.images[static_cast<std::size_t>(k) * cell_px + i] =
                static_cast<std::uint8_t>(std::lround(img[i] * 255.0));
    }
    return p;
}

namespace {

double mse_u8(const std::uint8_t* a, const std::uint8_t* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = (static_cast<double>(a[i]) - static_cast<double>(b[i])) / 255.0;
        s += d * d;
    }
    return s / static_cast<double>(n);
}

}  // namespace

SelectionPanel make_selection_panel(const PanelBlueprint& bp, const DatasetSpec& spec, Rng& rng) {
    SelectionPanel sp;
    sp.context = render_panel(bp, spec);
    const std::size_t cell_px = static_cast<std::size_t>(spec.image_size) * spec.image_size;
    sp.candidates.resize(8 * cell_px);

    // The answer cell's concept values.
    std::map<std::string, double> answer_cv;
    for (const auto& [name, grid] : bp.concept_grid) answer_cv[name] = grid[8];
    const auto changeable = spec.changeable();

    std::vector<std::vector<std::uint8_t>> images;
    images.reserve(8);
    {
        std::vector<std::uint8_t> gt(sp.context.cell(8), sp.context.cell(8) + cell_px);
        images.push_back(std::move(gt));
    }

    int retries = 0;
    while (images.size() < 8) {
        // Perturb a uniformly chosen nonempty subset of changeable concepts by
        // at least min_step each.
        std::map<std::string, double> cv = answer_cv;
        std::vector<std::size_t> subset;
        for (std::size_t i = 0; i < changeable.size(); ++i) subset.push_back(i);
        rng.shuffle(subset);
        const std::size_t count = 1 + rng.uniform_index(changeable.size());
        for (std::size_t s = 0; s < count; ++s) {
            const ConceptSpec& c = *changeable[subset[s]];
            const double old = answer_cv[c.name];
            double v = old;
            for (int tries = 0; tries < 64 && std::abs(v - old) < c.min_step; ++tries)
                v = rng.uniform(c.low, c.high);
            if (std::abs(v - old) < c.min_step)
                v = old + (old - c.low > c.high - old ? -c.min_step : c.min_step);
            cv[c.name] = v;
        }
        const std::vector<double> img = render_cell(cv, spec);
        std::vector<std::uint8_t> q(cell_px);
        for (std::size_t i = 0; i < cell_px; ++i)
            q[i] = static_cast<std::uint8_t>(std::lround(img[i] * 255.0));
        bool separated = true;
        for (const auto& other : images)
            if (mse_u8(q.data(), other.data(), cell_px) < spec.distractor.min_mse) {
                separated = false;
                break;
            }
        if (separated) {
            images.push_back(std::move(q));
        } else if (++retries > spec.distractor.max_retries) {
            throw GenerationError("could not separate 8 selection candidates after " +
                                  std::to_string(retries - 1) + " retries");
        }
    }

    // Shuffle candidate order; remember where the ground truth landed.
    std::vector<int> order{0, 1, 2, 3, 4, 5, 6, 7};
    rng.shuffle(order);
    for (int c = 0; c < 8; ++c) {
        const int src = order[static_cast<std::size_t>(c)];
        if (src == 0) sp.answer_index = c;
        std::copy(images[static_cast<std::size_t>(src)].begin(),
                  images[static_cast<std::size_t>(src)].end(),
                  sp.candidates.begin() + static_cast<std::size_t>(c) * cell_px);
    }
    return sp;
}

}  // namespace rpm::gen
