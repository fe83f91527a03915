#include "epiguide/guides.hpp"

#include <algorithm>
#include <cmath>

#include "epiguide/error.hpp"

namespace epiguide {

namespace {

void rasterize_row(const FundamentalMatrix& f, const GridSpec& src, const GridSpec& dst, int i,
                   std::uint8_t* row) {
  std::fill(row, row + dst.cells(), std::uint8_t{0});
  EpipolarLine line;
  try {
    line = epipolar_line(f, src.cell_center(i));
  } catch (const Error& e) {
    if (e.code() == ErrorCode::ZeroLine) return;
    throw;
  }
  const double cw = dst.cell_width(), ch = dst.cell_height();
  for (int r = 0; r < dst.s; ++r) {
    for (int c = 0; c < dst.s; ++c) {
      if (line_hits_rect(line, c * cw, r * ch, (c + 1) * cw, (r + 1) * ch)) {
        row[r * dst.s + c] = 1;
      }
    }
  }
}

void fill_map(const FundamentalMatrix& f, const GridSpec& src, const GridSpec& dst,
              std::vector<std::uint8_t>& out, bool parallel) {
  out.assign(static_cast<std::size_t>(src.cells()) * dst.cells(), 0);
  const int n = src.cells();
  const int stride = dst.cells();
  if (parallel) {
#pragma omp parallel for schedule(static) if (n * stride > 4096)
    for (int i = 0; i < n; ++i) rasterize_row(f, src, dst, i, out.data() + static_cast<std::size_t>(i) * stride);
  } else {
    for (int i = 0; i < n; ++i) rasterize_row(f, src, dst, i, out.data() + static_cast<std::size_t>(i) * stride);
  }
}

EpipolarGuide build(const FundamentalMatrix& f, const GridSpec& grid1, const GridSpec& grid2,
                    bool parallel) {
  EpipolarGuide g{grid1, grid2, {}, {}};
  fill_map(f, grid1, grid2, g.g12, parallel);
  fill_map(f.transposed(), grid2, grid1, g.g21, parallel);
  return g;
}

}  // namespace

GridSpec::GridSpec(int s_, int width_, int height_) : s(s_), width(width_), height(height_) {
  if (s < 1 || width < 1 || height < 1) {
    throw Error(ErrorCode::InvalidArgument, "grid side and image size must be positive");
  }
}

Vec2 GridSpec::cell_center(int index) const {
  const int r = index / s, c = index % s;
  return {(c + 0.5) * cell_width(), (r + 0.5) * cell_height()};
}

int GridSpec::cell_of(const Vec2& p) const {
  if (!(p.x() >= 0.0 && p.x() <= width && p.y() >= 0.0 && p.y() <= height)) return -1;
  const int c = std::min(s - 1, static_cast<int>(p.x() / cell_width()));
  const int r = std::min(s - 1, static_cast<int>(p.y() / cell_height()));
  return r * s + c;
}

double EpipolarGuide::positive_fraction() const {
  const auto ones = std::count(g12.begin(), g12.end(), 1) + std::count(g21.begin(), g21.end(), 1);
  return static_cast<double>(ones) / static_cast<double>(g12.size() + g21.size());
}

bool line_hits_rect(const EpipolarLine& line, double x0, double y0, double x1, double y1) {
  const double d[4] = {line.signed_distance({x0, y0}), line.signed_distance({x1, y0}),
                       line.signed_distance({x0, y1}), line.signed_distance({x1, y1})};
  const bool all_pos = d[0] > 0 && d[1] > 0 && d[2] > 0 && d[3] > 0;
  const bool all_neg = d[0] < 0 && d[1] < 0 && d[2] < 0 && d[3] < 0;
  return !(all_pos || all_neg);
}

EpipolarGuide rasterize_guide(const FundamentalMatrix& f, const GridSpec& grid1,
                              const GridSpec& grid2) {
  return build(f, grid1, grid2, true);
}

EpipolarGuide rasterize_guide_serial(const FundamentalMatrix& f, const GridSpec& grid1,
                                     const GridSpec& grid2) {
  return build(f, grid1, grid2, false);
}

std::vector<int> epipolar_sets(const EpipolarGuide& guide, Direction direction, int i) {
  const bool fwd = direction == Direction::OneToTwo;
  const int rows = fwd ? guide.grid1.cells() : guide.grid2.cells();
  const int cols = fwd ? guide.grid2.cells() : guide.grid1.cells();
  if (i < 0 || i >= rows) {
    throw Error(ErrorCode::IndexOutOfRange, "cell index " + std::to_string(i) + " out of range");
  }
  const auto& map = fwd ? guide.g12 : guide.g21;
  std::vector<int> out;
  for (int j = 0; j < cols; ++j) {
    if (map[static_cast<std::size_t>(i) * cols + j]) out.push_back(j);
  }
  return out;
}

}  // namespace epiguide
