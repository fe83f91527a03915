#include "epiguide/losses.hpp"

#include <cmath>

#include "epiguide/error.hpp"

namespace epiguide {

namespace {

void check_shapes(const Matrix& a12, const Matrix& a21, const EpipolarGuide& guide) {
  const int n1 = guide.grid1.cells(), n2 = guide.grid2.cells();
  if (a12.rows() != n1 || a12.cols() != n2 || a21.rows() != n2 || a21.cols() != n1) {
    throw Error(ErrorCode::ShapeMismatch, "attention maps do not match the guide grids");
  }
}

struct Partial {
  double zero = 0.0;
  double max = 0.0;
};

Partial epi_direction(const Matrix& a, const std::vector<std::uint8_t>& g, Matrix& grad) {
  Partial p;
  grad = Matrix(a.rows(), a.cols());
  const std::size_t n = a.size();
  for (std::size_t k = 0; k < n; ++k) {
    const int y = g[k];
    const BceTerm t = bce_with_logit(a.data()[k], y);
    (y ? p.max : p.zero) += t.value;
    grad.data()[k] = t.derivative;
  }
  return p;
}

Partial max_epi_direction(const Matrix& a, const std::vector<std::uint8_t>& g, Matrix& grad) {
  Partial p;
  grad = Matrix(a.rows(), a.cols());
  for (int i = 0; i < a.rows(); ++i) {
    int best = -1;
    for (int j = 0; j < a.cols(); ++j) {
      const std::size_t k = static_cast<std::size_t>(i) * a.cols() + j;
      if (g[k]) {
        if (best < 0 || a(i, j) > a(i, best)) best = j;
      } else {
        const BceTerm t = bce_with_logit(a(i, j), 0);
        p.zero += t.value;
        grad(i, j) = t.derivative;
      }
    }
    if (best >= 0) {
      const BceTerm t = bce_with_logit(a(i, best), 1);
      p.max += t.value;
      grad(i, best) = t.derivative;
    }
  }
  return p;
}

template <typename DirectionFn>
LossResult combine(const Matrix& a12, const Matrix& a21, const EpipolarGuide& guide,
                   Reduction reduction, DirectionFn fn) {
  check_shapes(a12, a21, guide);
  LossResult out;
  const Partial p12 = fn(a12, guide.g12, out.grad12);
  const Partial p21 = fn(a21, guide.g21, out.grad21);
  out.zero_part = p12.zero + p21.zero;
  out.max_part = p12.max + p21.max;
  out.value = out.zero_part + out.max_part;
  if (reduction == Reduction::Mean) {
    const double scale = 1.0 / static_cast<double>(a12.size() + a21.size());
    out.value *= scale;
    out.zero_part *= scale;
    out.max_part *= scale;
    for (double& v : out.grad12.values()) v *= scale;
    for (double& v : out.grad21.values()) v *= scale;
  }
  return out;
}

}  // namespace

BceTerm bce_with_logit(double logit, int label) {
  const double y = label ? 1.0 : 0.0;
  const double value = std::max(logit, 0.0) - logit * y + std::log1p(std::exp(-std::abs(logit)));
  // Sigmoid evaluated on the side that cannot overflow.
  const double sig = logit >= 0.0 ? 1.0 / (1.0 + std::exp(-logit))
                                  : std::exp(logit) / (1.0 + std::exp(logit));
  return {value, sig - y};
}

LossResult epipolar_loss(const Matrix& a12, const Matrix& a21, const EpipolarGuide& guide,
                         Reduction reduction) {
  return combine(a12, a21, guide, reduction, epi_direction);
}

LossResult max_epipolar_loss(const Matrix& a12, const Matrix& a21, const EpipolarGuide& guide,
                             Reduction reduction) {
  return combine(a12, a21, guide, reduction, max_epi_direction);
}

}  // namespace epiguide
