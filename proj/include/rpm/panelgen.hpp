#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "rpm/common.hpp"
#include "rpm/rng.hpp"

// Procedural generation of RPM-like panels with continuously changing visual
// concepts, plus the bit-exact on-disk dataset format.
namespace rpm::gen {

// Distractor construction could not satisfy the separation threshold.
struct GenerationError : std::runtime_error {
    explicit GenerationError(const std::string& msg)
        : std::runtime_error("generation error: " + msg) {}
};

enum class ConceptKind { Changeable, Unchangeable };
enum class Rule { Progress, Biprogress, Multiprogress };
enum class Direction { Horizontal, Vertical };

std::string to_string(Rule r);
std::string to_string(Direction d);
Rule rule_from_string(const std::string& s);
Direction direction_from_string(const std::string& s);

struct ConceptSpec {
    std::string name;
    ConceptKind kind = ConceptKind::Changeable;
    double low = 0.0;
    double high = 1.0;
    double min_step = 0.15;

    double width() const { return high - low; }
    void validate() const;
};

struct DistractorPolicy {
    double min_mse = 1e-3;
    int max_retries = 100;
};

struct DatasetSpec {
    std::string name;
    std::string renderer;  // polygon | circle | complex_polygon | complex_circle
    std::map<std::string, double> renderer_params;
    int image_size = 64;
    std::vector<ConceptSpec> concepts;
    std::vector<Rule> rules;
    bool unchangeable_per_cell = false;
    DistractorPolicy distractor;

    const ConceptSpec& concept_spec(const std::string& n) const;
    std::vector<const ConceptSpec*> changeable() const;
    double renderer_param(const std::string& key, double fallback) const;
    void validate() const;

    nlohmann::json to_json() const;
    static DatasetSpec from_json(const nlohmann::json& j);
    // Built-in presets: "polygon" (triangle) and "circle". Other variants load
    // from config files.
    static DatasetSpec preset(const std::string& name);
};

struct RuleInstance {
    Rule rule = Rule::Progress;
    Direction direction = Direction::Horizontal;
    std::vector<std::string> chosen;  // nonempty subset of changeable concepts

    // Per chosen concept, the per-line start/step pattern in canonical
    // (pre-transpose) orientation; biprogress uses the corner anchoring.
    struct Progression {
        std::array<double, 3> start{};
        std::array<double, 3> step{};
    };
    struct BiProgression {
        double corner = 0.0;
        double row_step = 0.0;  // step along a row (between columns)
        double col_step = 0.0;  // step down a column (between rows)
    };
    std::map<std::string, Progression> progressions;
    std::map<std::string, BiProgression> biprogressions;

    bool chose(const std::string& name) const;
};

struct PanelBlueprint {
    // concept name -> 9 values in cell order k = 3*i + j.
    std::map<std::string, std::array<double, 9>> concept_grid;
    RuleInstance rule_instance;
    std::string dataset_id;
    std::uint64_t stream_seed = 0;

    double value(const std::string& name, int row, int col) const {
        return concept_grid.at(name)[static_cast<std::size_t>(cell_index(row, col))];
    }
};

struct Panel {
    std::vector<std::uint8_t> images;  // 9 * H * W bytes, cell-major
    PanelBlueprint blueprint;
    int image_size = 64;

    const std::uint8_t* cell(int k) const {
        return images.data() + static_cast<std::size_t>(k) * image_size * image_size;
    }
};

struct SelectionPanel {
    Panel context;                          // cell 8 is the hidden ground truth
    std::vector<std::uint8_t> candidates;   // 8 * H * W
    int answer_index = 0;

    const std::uint8_t* candidate(int c) const {
        return candidates.data() +
               static_cast<std::size_t>(c) * context.image_size * context.image_size;
    }
};

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

PanelBlueprint sample_rule_instance(const DatasetSpec& spec, Rng& rng);

// One 64x64 (image_size) grayscale cell in [0,1], 4x supersampled.
std::vector<double> render_cell(const std::map<std::string, double>& concepts,
                                const DatasetSpec& spec);

Panel render_panel(const PanelBlueprint& blueprint, const DatasetSpec& spec);

SelectionPanel make_selection_panel(const PanelBlueprint& blueprint, const DatasetSpec& spec,
                                    Rng& rng);

// Validates the isometric-step / fixed-in-line / range invariants. Returns an
// empty string when the blueprint passes, otherwise a description.
std::string check_blueprint(const PanelBlueprint& blueprint, const DatasetSpec& spec,
                            double tol = 1e-9);

// Per-panel stream derivation shared by generation and regeneration checks.
std::uint64_t panel_stream_seed(std::uint64_t dataset_seed, const std::string& split,
                                std::uint64_t index);

// ---------------------------------------------------------------------------
// On-disk format
// ---------------------------------------------------------------------------

struct SplitSizes {
    int train = 0;
    int val = 0;
    int test = 0;
};

// Writes {train,val,test}.panels + .meta.jsonl + spec.json under dir.
void generate_dataset(const DatasetSpec& spec, const SplitSizes& sizes, std::uint64_t seed,
                      const std::string& dir);

// Writes {split}.selections (+ {split}.selections.meta.jsonl) under dir.
void generate_selection_split(const DatasetSpec& spec, int count, std::uint64_t seed,
                              const std::string& split, const std::string& dir);

struct PanelDataset {
    int n = 0, height = 0, width = 0;
    std::vector<std::uint8_t> data;  // n * 9 * h * w
    std::vector<nlohmann::json> meta;

    const std::uint8_t* panel(int p) const {
        return data.data() + static_cast<std::size_t>(p) * 9 * height * width;
    }
    const std::uint8_t* cell(int p, int k) const {
        return panel(p) + static_cast<std::size_t>(k) * height * width;
    }
    // Cell pixels scaled to [0,1].
    std::vector<double> cell_f64(int p, int k) const;
};

struct SelectionDataset {
    int n = 0, height = 0, width = 0;
    std::vector<std::uint8_t> cells;       // n * 9 * h * w
    std::vector<std::uint8_t> candidates;  // n * 8 * h * w
    std::vector<std::uint8_t> answers;     // n

    const std::uint8_t* cell(int p, int k) const {
        return cells.data() + (static_cast<std::size_t>(p) * 9 + k) * height * width;
    }
    const std::uint8_t* candidate(int p, int c) const {
        return candidates.data() + (static_cast<std::size_t>(p) * 8 + c) * height * width;
    }
};

PanelDataset load_panels(const std::string& panels_path, const std::string& meta_path = "");
SelectionDataset load_selections(const std::string& path);
DatasetSpec load_spec(const std::string& dataset_dir);

}  // namespace rpm::gen
