#include "epiguide/viz.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "epiguide/dataio.hpp"
#include "epiguide/error.hpp"

namespace epiguide {

GrayImage render_cell_map(const Matrix& map, int s) {
  if (s < 1) throw Error(ErrorCode::InvalidArgument, "grid size must be >= 1");
  const int cells = s * s;
  if (map.rows() != cells || map.cols() != cells) {
    throw Error(ErrorCode::ShapeMismatch, "map must be s^2 x s^2");
  }
  const auto [lo_it, hi_it] = std::minmax_element(map.values().begin(), map.values().end());
  const double lo = *lo_it, range = *hi_it - *lo_it;

  GrayImage img;
  img.width = img.height = s * s + s - 1;
  img.pixels.assign(static_cast<std::size_t>(img.width) * img.height, kSeparator);
  for (int i = 0; i < cells; ++i) {
    const int x0 = (i % s) * (s + 1), y0 = (i / s) * (s + 1);
    for (int j = 0; j < cells; ++j) {
      const double v = range > 0.0 ? (map(i, j) - lo) / range : 0.0;
      const int x = x0 + j % s, y = y0 + j / s;
      img.pixels[static_cast<std::size_t>(y) * img.width + x] =
          static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  }
  return img;
}

GrayImage render_guide(const EpipolarGuide& guide, Direction direction) {
  const int cells = guide.grid1.cells();
  if (guide.grid2.cells() != cells) throw Error(ErrorCode::ShapeMismatch, "grids differ in size");
  const auto& g = direction == Direction::OneToTwo ? guide.g12 : guide.g21;
  Matrix m(cells, cells);
  for (int i = 0; i < cells; ++i) {
    for (int j = 0; j < cells; ++j) m(i, j) = g[static_cast<std::size_t>(i) * cells + j];
  }
  return render_cell_map(m, guide.grid1.s);
}

std::string to_pgm(const GrayImage& image) {
  std::ostringstream out;
  out << "P2\n" << image.width << ' ' << image.height << "\n255\n";
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      out << static_cast<int>(image.at(x, y)) << (x + 1 == image.width ? '\n' : ' ');
    }
  }
  return out.str();
}

void write_pgm(const std::filesystem::path& path, const GrayImage& image) {
  write_text(path, to_pgm(image));
}

}  // namespace epiguide
