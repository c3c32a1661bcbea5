#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "rpm/panelgen.hpp"

// Shared helpers for the trainer / evaluation tests: miniature datasets made
// by box-downsampling real 64x64 renders to 8x8 so the shrunken model stack
// trains in seconds.
namespace rpm::testutil {

inline std::vector<std::uint8_t> downsample8(const std::uint8_t* src64) {
    std::vector<std::uint8_t> out(64);
    for (int r = 0; r < 8; ++r)
        for (int c = 0; c < 8; ++c) {
            int acc = 0;
            for (int i = 0; i < 8; ++i)
                for (int j = 0; j < 8; ++j) acc += src64[(r * 8 + i) * 64 + c * 8 + j];
            out[static_cast<std::size_t>(r) * 8 + c] = static_cast<std::uint8_t>((acc + 32) / 64);
        }
    return out;
}

inline void write_rpmg(const std::string& path, int n, int h, int w,
                       const std::vector<std::uint8_t>& data) {
    std::ofstream f(path, std::ios::binary);
    auto u32 = [&](std::uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                              static_cast<unsigned char>((v >> 8) & 0xff),
                              static_cast<unsigned char>((v >> 16) & 0xff),
                              static_cast<unsigned char>((v >> 24) & 0xff)};
        f.write(reinterpret_cast<const char*>(b), 4);
    };
    f.write("RPMG", 4);
    u32(1);
    u32(static_cast<std::uint32_t>(n));
    u32(static_cast<std::uint32_t>(h));
    u32(static_cast<std::uint32_t>(w));
    f.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
}

// Polygon panels rendered at 64 and shrunk to 8x8, written as train/val/test
// splits under dir.
inline void make_tiny_dataset(const std::string& dir, int n_train, int n_val, int n_test,
                              std::uint64_t seed) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    gen::DatasetSpec spec = gen::DatasetSpec::preset("polygon");
    auto make_split = [&](const std::string& split, int count) {
        std::vector<std::uint8_t> data;
        data.reserve(static_cast<std::size_t>(count) * 9 * 64);
        for (int i = 0; i < count; ++i) {
            Rng rng(gen::panel_stream_seed(seed, split, static_cast<std::uint64_t>(i)));
            gen::PanelBlueprint bp = gen::sample_rule_instance(spec, rng);
            gen::Panel p = gen::render_panel(bp, spec);
            for (int k = 0; k < 9; ++k) {
                auto small = downsample8(p.cell(k));
                data.insert(data.end(), small.begin(), small.end());
            }
        }
        write_rpmg(dir + "/" + split + ".panels", count, 8, 8, data);
    };
    make_split("train", n_train);
    make_split("val", n_val);
    make_split("test", n_test);
}

}  // namespace rpm::testutil
