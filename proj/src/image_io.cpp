#include "rpm/image_io.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <zlib.h>

#include "rpm/common.hpp"

namespace rpm::img {

namespace {

void put_u32be(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>((v >> 24) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>(v & 0xff));
}

void put_chunk(std::string& out, const char type[4], const std::string& data) {
    put_u32be(out, static_cast<std::uint32_t>(data.size()));
    const std::size_t start = out.size();
    out.append(type, 4);
    out += data;
    std::uint32_t crc = static_cast<std::uint32_t>(
        crc32(0, reinterpret_cast<const Bytef*>(out.data() + start), static_cast<uInt>(4 + data.size())));
    put_u32be(out, crc);
}

void write_png(const std::string& path, const std::vector<std::uint8_t>& pixels, int width,
               int height, int channels) {
    if (pixels.size() != static_cast<std::size_t>(width) * height * channels)
        throw ContractError("png: pixel buffer size mismatch");
    std::string ihdr;
    put_u32be(ihdr, static_cast<std::uint32_t>(width));
    put_u32be(ihdr, static_cast<std::uint32_t>(height));
    ihdr.push_back(8);                                   // bit depth
    ihdr.push_back(channels == 1 ? 0 : 2);               // gray / truecolor
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);

    // Raw scanlines with filter byte 0.
    std::string raw;
    raw.reserve(static_cast<std::size_t>(height) * (1 + static_cast<std::size_t>(width) * channels));
    for (int r = 0; r < height; ++r) {
        raw.push_back(0);
        raw.append(reinterpret_cast<const char*>(pixels.data() +
                                                 static_cast<std::size_t>(r) * width * channels),
                   static_cast<std::size_t>(width) * channels);
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::string idat(bound, '\0');
    if (compress2(reinterpret_cast<Bytef*>(idat.data()), &bound,
                  reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()),
                  9) != Z_OK)
        throw IoError("png: deflate failed for " + path);
    idat.resize(bound);

    std::string blob = "\x89PNG\r\n\x1a\n";
    put_chunk(blob, "IHDR", ihdr);
    put_chunk(blob, "IDAT", idat);
    put_chunk(blob, "IEND", "");

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!f) throw IoError("write failed: " + path);
}

}  // namespace

void write_png_gray(const std::string& path, const std::vector<std::uint8_t>& pixels, int width,
                    int height) {
    write_png(path, pixels, width, height, 1);
}

void write_png_rgb(const std::string& path, const std::vector<std::uint8_t>& rgb, int width,
                   int height) {
    write_png(path, rgb, width, height, 3);
}

TileGrid::TileGrid(int rows, int cols, int tile, int pad)
    : rows_(rows), cols_(cols), tile_(tile), pad_(pad) {
    width_ = cols_ * tile_ + (cols_ + 1) * pad_;
    height_ = rows_ * tile_ + (rows_ + 1) * pad_;
    rgb_.assign(static_cast<std::size_t>(width_) * height_ * 3, 255);
}

void TileGrid::place(int row, int col, const std::vector<double>& tile_gray, bool highlight) {
    if (tile_gray.size() != static_cast<std::size_t>(tile_) * tile_)
        throw ContractError("TileGrid: tile size mismatch");
    const int y0 = pad_ + row * (tile_ + pad_);
    const int x0 = pad_ + col * (tile_ + pad_);
    for (int y = 0; y < tile_; ++y)
        for (int x = 0; x < tile_; ++x) {
            const double v = std::min(1.0, std::max(0.0, tile_gray[static_cast<std::size_t>(y) * tile_ + x]));
            const auto g = static_cast<std::uint8_t>(std::lround(v * 255.0));
            const std::size_t off =
                (static_cast<std::size_t>(y0 + y) * width_ + (x0 + x)) * 3;
            rgb_[off] = rgb_[off + 1] = rgb_[off + 2] = g;
        }
    if (highlight) {
        // Red border two pixels wide, drawn in the padding ring.
        for (int t = 1; t <= 2; ++t) {
            for (int x = x0 - t; x < x0 + tile_ + t; ++x) {
                for (int y : {y0 - t, y0 + tile_ - 1 + t}) {
                    if (x < 0 || x >= width_ || y < 0 || y >= height_) continue;
                    const std::size_t off = (static_cast<std::size_t>(y) * width_ + x) * 3;
                    rgb_[off] = 220;
                    rgb_[off + 1] = 30;
                    rgb_[off + 2] = 30;
                }
            }
            for (int y = y0 - t; y < y0 + tile_ + t; ++y) {
                for (int x : {x0 - t, x0 + tile_ - 1 + t}) {
                    if (x < 0 || x >= width_ || y < 0 || y >= height_) continue;
                    const std::size_t off = (static_cast<std::size_t>(y) * width_ + x) * 3;
                    rgb_[off] = 220;
                    rgb_[off + 1] = 30;
                    rgb_[off + 2] = 30;
                }
            }
        }
    }
}

void TileGrid::save(const std::string& path) const { write_png_rgb(path, rgb_, width_, height_); }

}  // namespace rpm::img
