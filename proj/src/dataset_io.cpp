#include <cstring>
#include <filesystem>
#include <fstream>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "rpm/panelgen.hpp"

namespace rpm::gen {

namespace {

constexpr char kMagic[4] = {'R', 'P', 'M', 'G'};
constexpr std::uint32_t kFormatVersion = 1;

void put_u32(std::ofstream& f, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    f.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::ifstream& f, const std::string& path) {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    if (!f) throw IoError("truncated header in " + path);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_header(std::ofstream& f, std::uint32_t n, std::uint32_t h, std::uint32_t w) {
    f.write(kMagic, 4);
    put_u32(f, kFormatVersion);
    put_u32(f, n);
    put_u32(f, h);
    put_u32(f, w);
}

void read_header(std::ifstream& f, const std::string& path, std::uint32_t& n, std::uint32_t& h,
                 std::uint32_t& w) {
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("bad magic in " + path + " (expected RPMG)");
    const std::uint32_t version = get_u32(f, path);
    if (version != kFormatVersion)
        throw IoError("unsupported format version " + std::to_string(version) + " in " + path);
    n = get_u32(f, path);
    h = get_u32(f, path);
    w = get_u32(f, path);
}

nlohmann::json blueprint_meta(const PanelBlueprint& bp) {
    nlohmann::json grid;
    for (const auto& [name, values] : bp.concept_grid) {
        nlohmann::json rows = nlohmann::json::array();
        for (int i = 0; i < 3; ++i) {
            nlohmann::json row = nlohmann::json::array();
            for (int j = 0; j < 3; ++j) row.push_back(values[static_cast<std::size_t>(cell_index(i, j))]);
            rows.push_back(row);
        }
        grid[name] = rows;
    }
    return nlohmann::json{{"rule", to_string(bp.rule_instance.rule)},
                          {"direction", to_string(bp.rule_instance.direction)},
                          {"chosen_concepts", bp.rule_instance.chosen},
                          {"concept_grid", grid},
                          {"seed", bp.stream_seed}};
}

void generate_split(const DatasetSpec& spec, int count, std::uint64_t seed,
                    const std::string& split, const std::string& dir) {
    namespace fs = std::filesystem;
    const std::size_t panel_bytes = static_cast<std::size_t>(9) * spec.image_size * spec.image_size;
    std::vector<std::uint8_t> all(static_cast<std::size_t>(count) * panel_bytes);
    std::vector<std::string> metas(static_cast<std::size_t>(count));

    // Each panel owns a stream derived from (seed, split, index): parallel
    // generation is byte-identical to sequential.
#pragma omp parallel for schedule(static)
    for (int i = 0; i < count; ++i) {
        const std::uint64_t ps = panel_stream_seed(seed, split, static_cast<std::uint64_t>(i));
        Rng rng(ps);
        PanelBlueprint bp = sample_rule_instance(spec, rng);
        bp.stream_seed = ps;
        Panel p = render_panel(bp, spec);
        std::copy(p.images.begin(), p.images.end(),
                  all.begin() + static_cast<std::size_t>(i) * panel_bytes);
        metas[static_cast<std::size_t>(i)] = blueprint_meta(bp).dump();
    }

    const fs::path panels_path = fs::path(dir) / (split + ".panels");
    std::ofstream pf(panels_path, std::ios::binary);
    if (!pf) throw IoError("cannot open " + panels_path.string());
    write_header(pf, static_cast<std::uint32_t>(count), static_cast<std::uint32_t>(spec.image_size),
                 static_cast<std::uint32_t>(spec.image_size));
    pf.write(reinterpret_cast<const char*>(all.data()), static_cast<std::streamsize>(all.size()));
    if (!pf) throw IoError("write failed: " + panels_path.string());

    const fs::path meta_path = fs::path(dir) / (split + ".meta.jsonl");
    std::ofstream mf(meta_path, std::ios::binary);
    if (!mf) throw IoError("cannot open " + meta_path.string());
    for (const auto& m : metas) mf << m << "\n";
    if (!mf) throw IoError("write failed: " + meta_path.string());
}

}  // namespace

void generate_dataset(const DatasetSpec& spec, const SplitSizes& sizes, std::uint64_t seed,
                      const std::string& dir) {
    spec.validate();
    if (sizes.train <= 0 || sizes.val <= 0 || sizes.test <= 0)
        throw ConfigError("split sizes must be positive");
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());

    generate_split(spec, sizes.train, seed, "train", dir);
    generate_split(spec, sizes.val, seed, "val", dir);
    generate_split(spec, sizes.test, seed, "test", dir);

    const fs::path spec_path = fs::path(dir) / "spec.json";
    std::ofstream sf(spec_path, std::ios::binary);
    if (!sf) throw IoError("cannot open " + spec_path.string());
    sf << spec.to_json().dump(2) << "\n";
    if (!sf) throw IoError("write failed: " + spec_path.string());
}

void generate_selection_split(const DatasetSpec& spec, int count, std::uint64_t seed,
                              const std::string& split, const std::string& dir) {
    spec.validate();
    if (count <= 0) throw ConfigError("selection count must be positive");
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());

    const std::size_t hw = static_cast<std::size_t>(spec.image_size) * spec.image_size;
    const std::size_t rec_bytes = 9 * hw + 8 * hw + 1;
    std::vector<std::uint8_t> all(static_cast<std::size_t>(count) * rec_bytes);
    std::vector<std::string> metas(static_cast<std::size_t>(count));

#pragma omp parallel for schedule(static)
    for (int i = 0; i < count; ++i) {
        const std::uint64_t ps =
            panel_stream_seed(seed, "selection." + split, static_cast<std::uint64_t>(i));
        Rng rng(ps);
        PanelBlueprint bp = sample_rule_instance(spec, rng);
        bp.stream_seed = ps;
        SelectionPanel sp = make_selection_panel(bp, spec, rng);
        std::uint8_t* dst = all.data() + static_cast<std::size_t>(i) * rec_bytes;
        std::copy(sp.context.images.begin(), sp.context.images.end(), dst);
        std::copy(sp.candidates.begin(), sp.candidates.end(), dst + 9 * hw);
        dst[17 * hw] = static_cast<std::uint8_t>(sp.answer_index);
        metas[static_cast<std::size_t>(i)] = blueprint_meta(bp).dump();
    }

    const fs::path path = fs::path(dir) / (split + ".selections");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    write_header(f, static_cast<std::uint32_t>(count), static_cast<std::uint32_t>(spec.image_size),
                 static_cast<std::uint32_t>(spec.image_size));
    f.write(reinterpret_cast<const char*>(all.data()), static_cast<std::streamsize>(all.size()));
    if (!f) throw IoError("write failed: " + path.string());

    const fs::path meta_path = fs::path(dir) / (split + ".selections.meta.jsonl");
    std::ofstream mf(meta_path, std::ios::binary);
    if (!mf) throw IoError("cannot open " + meta_path.string());
    for (const auto& m : metas) mf << m << "\n";
    if (!mf) throw IoError("write failed: " + meta_path.string());
}

PanelDataset load_panels(const std::string& panels_path, const std::string& meta_path) {
    std::ifstream f(panels_path, std::ios::binary);
    if (!f) throw IoError("cannot open " + panels_path);
    std::uint32_t n, h, w;
    read_header(f, panels_path, n, h, w);
    PanelDataset ds;
    ds.n = static_cast<int>(n);
    ds.height = static_cast<int>(h);
    ds.width = static_cast<int>(w);
    ds.data.resize(static_cast<std::size_t>(n) * 9 * h * w);
    f.read(reinterpret_cast<char*>(ds.data.data()), static_cast<std::streamsize>(ds.data.size()));
    if (!f) throw IoError("truncated panel data in " + panels_path);

    if (!meta_path.empty()) {
        std::ifstream mf(meta_path);
        if (!mf) throw IoError("cannot open " + meta_path);
        std::string line;
        while (std::getline(mf, line)) {
            if (line.empty()) continue;
            ds.meta.push_back(nlohmann::json::parse(line));
        }
        if (ds.meta.size() != static_cast<std::size_t>(ds.n))
            throw IoError("metadata count mismatch in " + meta_path);
    }
    return ds;
}

std::vector<double> PanelDataset::cell_f64(int p, int k) const {
    const std::uint8_t* src = cell(p, k);
    std::vector<double> out(static_cast<std::size_t>(height) * width);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = src[i] / 255.0;
    return out;
}

SelectionDataset load_selections(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::uint32_t n, h, w;
    read_header(f, path, n, h, w);
    SelectionDataset ds;
    ds.n = static_cast<int>(n);
    ds.height = static_cast<int>(h);
    ds.width = static_cast<int>(w);
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    ds.cells.resize(static_cast<std::size_t>(n) * 9 * hw);
    ds.candidates.resize(static_cast<std::size_t>(n) * 8 * hw);
    ds.answers.resize(static_cast<std::size_t>(n));
    for (std::uint32_t i = 0; i < n; ++i) {
        f.read(reinterpret_cast<char*>(ds.cells.data() + static_cast<std::size_t>(i) * 9 * hw),
               static_cast<std::streamsize>(9 * hw));
        f.read(reinterpret_cast<char*>(ds.candidates.data() + static_cast<std::size_t>(i) * 8 * hw),
               static_cast<std::streamsize>(8 * hw));
        char a;
        f.read(&a, 1);
        ds.answers[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(a);
    }
    if (!f) throw IoError("truncated selection data in " + path);
    return ds;
}

DatasetSpec load_spec(const std::string& dataset_dir) {
    namespace fs = std::filesystem;
    const fs::path p = fs::path(dataset_dir) / "spec.json";
    std::ifstream f(p);
    if (!f) throw IoError("cannot open " + p.string());
    nlohmann::json j;
    f >> j;
    return DatasetSpec::from_json(j);
}

}  // namespace rpm::gen
