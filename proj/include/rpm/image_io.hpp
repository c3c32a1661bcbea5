#pragma once

#include <cstdint>
#include <string>
#include <vector>

// Minimal PNG output (8-bit grayscale / RGB, zlib-deflated) and grid
// composition for figure emission.
namespace rpm::img {

void write_png_gray(const std::string& path, const std::vector<std::uint8_t>& pixels, int width,
                    int height);
void write_png_rgb(const std::string& path, const std::vector<std::uint8_t>& rgb, int width,
                   int height);

// Grid of equally sized grayscale tiles with optional per-tile highlight
// borders, composed into one RGB image.
class TileGrid {
public:
    TileGrid(int rows, int cols, int tile, int pad = 2);

    // tile pixels in [0,1], row-major tile*tile.
    void place(int row, int col, const std::vector<double>& tile_gray, bool highlight = false);
    void save(const std::string& path) const;

    int width() const { return width_; }
    int height() const { return height_; }

private:
    int rows_, cols_, tile_, pad_, width_, height_;
    std::vector<std::uint8_t> rgb_;
};

}  // namespace rpm::img
