#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "epiguide/guides.hpp"
#include "epiguide/matrix.hpp"

namespace epiguide {

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major

  std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

inline constexpr std::uint8_t kSeparator = 255;

// Lays out an s²×s² cell map as an s×s grid of s×s patches: patch (r, c)
// shows row r*s+c of the map. 1-px separators; values min-max normalized
// over the whole map to 0..255 (a constant map renders as 0).
GrayImage render_cell_map(const Matrix& map, int s);
GrayImage render_guide(const EpipolarGuide& guide, Direction direction);

// Plain (P2) PGM, maxval 255.
std::string to_pgm(const GrayImage& image);
void write_pgm(const std::filesystem::path& path, const GrayImage& image);

}  // namespace epiguide
