#pragma once

#include <cstdint>
#include <vector>

#include "epiguide/geometry.hpp"

namespace epiguide {

// s x s feature grid laid over a width x height image. Cells are flattened
// row-major: cell (r, c) has index r * s + c.
struct GridSpec {
  int s = 7;
  int width = 224;
  int height = 224;

  GridSpec() = default;
  GridSpec(int s, int width, int height);

  int cells() const { return s * s; }
  double cell_width() const { return static_cast<double>(width) / s; }
  double cell_height() const { return static_cast<double>(height) / s; }
  Vec2 cell_center(int index) const;
  // Cell containing `pixel`, or -1 outside the image. Pixels on the right or
  // bottom border belong to the last cell.
  int cell_of(const Vec2& pixel) const;

  bool operator==(const GridSpec&) const = default;
};

// Binary indicator maps for both attention directions. g12 has one row per
// cell of grid1 and one column per cell of grid2; g21 is the reverse.
struct EpipolarGuide {
  GridSpec grid1;
  GridSpec grid2;
  std::vector<std::uint8_t> g12;
  std::vector<std::uint8_t> g21;

  std::uint8_t at12(int i, int j) const { return g12[static_cast<std::size_t>(i) * grid2.cells() + j]; }
  std::uint8_t at21(int i, int j) const { return g21[static_cast<std::size_t>(i) * grid1.cells() + j]; }
  // Fraction of ones over both maps.
  double positive_fraction() const;
};

enum class Direction { OneToTwo, TwoToOne };

// True unless all four corners of the closed rectangle lie strictly on one side of the line.
bool line_hits_rect(const EpipolarLine& line, double x0, double y0, double x1, double y1);

// Rows are independent, so they are filled in parallel.
EpipolarGuide rasterize_guide(const FundamentalMatrix& f, const GridSpec& grid1,
                              const GridSpec& grid2);
// Single-threaded reference with the same output.
EpipolarGuide rasterize_guide_serial(const FundamentalMatrix& f, const GridSpec& grid1,
                                     const GridSpec& grid2);

std::vector<int> epipolar_sets(const EpipolarGuide& guide, Direction direction, int i);

}  // namespace epiguide
