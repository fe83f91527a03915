#include "epiguide/geometry.hpp"

#include <Eigen/LU>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "epiguide/error.hpp"

namespace epiguide {

namespace {

Mat3 skew(const Vec3& v) {
  Mat3 s;
  s << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
       -v.y(), v.x(), 0.0;
  return s;
}

// Unit baseline axis C2 - C1.
Vec3 baseline_axis(const CameraView& view1, const CameraView& view2) {
  const Vec3 b = view2.center() - view1.center();
  const double scale = std::max({1.0, view1.translation().norm(), view2.translation().norm()});
  if (b.norm() <= 1e-9 * scale) {
    throw Error(ErrorCode::DegenerateBaseline, "camera centers coincide");
  }
  return b.normalized();
}

double plane_angle(const Vec3& axis, const Vec3& ray, const Vec3& ref_ray) {
  const Vec3 n = axis.cross(ray);
  const Vec3 n_ref = axis.cross(ref_ray);
  if (n.norm() <= 1e-12 * ray.norm() || n_ref.norm() <= 1e-12 * ref_ray.norm()) {
    throw Error(ErrorCode::EpipolePixel, "viewing ray is parallel to the baseline");
  }
  double angle = std::atan2(axis.dot(n_ref.cross(n)), n_ref.dot(n));
  if (angle <= -std::numbers::pi) angle = std::numbers::pi;
  return angle;
}

}  // namespace

CameraView::CameraView(const Mat3& rotation, const Vec3& translation, const Mat3& intrinsics,
                       int width, int height)
    : rotation_(rotation),
      translation_(translation),
      intrinsics_(intrinsics),
      width_(width),
      height_(height) {
  if ((rotation.transpose() * rotation - Mat3::Identity()).norm() >= 1e-9 ||
      rotation.determinant() <= 0.0) {
    throw Error(ErrorCode::InvalidArgument, "rotation is not a proper orthonormal matrix");
  }
  if (!(intrinsics(0, 0) > 0.0) || !(intrinsics(1, 1) > 0.0) || intrinsics(2, 2) != 1.0 ||
      intrinsics(1, 0) != 0.0 || intrinsics(2, 0) != 0.0 || intrinsics(2, 1) != 0.0) {
    throw Error(ErrorCode::InvalidArgument, "intrinsics must be upper triangular with K22 = 1");
  }
  if (width <= 0 || height <= 0) {
    throw Error(ErrorCode::InvalidArgument, "image size must be positive");
  }
  if (!translation.allFinite()) {
    throw Error(ErrorCode::InvalidArgument, "translation is not finite");
  }
}

double CameraView::depth(const Vec3& world) const {
  return (rotation_ * world + translation_).z();
}

Vec2 CameraView::project(const Vec3& world) const {
  const Vec3 h = intrinsics_ * (rotation_ * world + translation_);
  return h.hnormalized();
}

Vec3 CameraView::ray_direction(const Vec2& pixel) const {
  const Vec3 cam = intrinsics_.inverse() * pixel.homogeneous();
  return rotation_.transpose() * cam;
}

bool CameraView::in_image(const Vec2& pixel) const {
  return pixel.x() >= 0.0 && pixel.x() <= width_ && pixel.y() >= 0.0 && pixel.y() <= height_;
}

CameraView CameraView::look_at(const Vec3& eye, const Vec3& target, const Vec3& up,
                               const Mat3& intrinsics, int width, int height) {
  const Vec3 z = (target - eye).normalized();
  const Vec3 x = z.cross(-up).normalized();
  const Vec3 y = z.cross(x);
  Mat3 r;
  r.row(0) = x.transpose();
  r.row(1) = y.transpose();
  r.row(2) = z.transpose();
  return CameraView(r, -r * eye, intrinsics, width, height);
}

Mat3 canonicalize(const Mat3& m) {
  const double norm = m.norm();
  if (!(norm > 0.0) || !std::isfinite(norm)) {
    throw Error(ErrorCode::InvalidArgument, "fundamental matrix must be finite and nonzero");
  }
  Mat3 out = m / norm;
  Eigen::Index r = 0, c = 0;
  out.cwiseAbs().maxCoeff(&r, &c);
  if (out(r, c) < 0.0) out = -out;
  return out;
}

Mat3 enforce_rank2(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Vec3 sigma = svd.singularValues();
  sigma(2) = 0.0;
  return svd.matrixU() * sigma.asDiagonal() * svd.matrixV().transpose();
}

double rank_ratio(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m);
  const Vec3 sigma = svd.singularValues();
  return sigma(2) / sigma(0);
}

FundamentalMatrix::FundamentalMatrix(const Mat3& m) : m_(canonicalize(m)) {}

double FundamentalMatrix::residual(const Vec2& x1, const Vec2& x2) const {
  return x2.homogeneous().dot(m_ * x1.homogeneous());
}

Mat3 CropTransform::matrix() const {
  Mat3 t;
  t << scale_x, 0.0, -scale_x * offset_x,
       0.0, scale_y, -scale_y * offset_y,
       0.0, 0.0, 1.0;
  return t;
}

Vec2 CropTransform::apply(const Vec2& p) const {
  return {scale_x * (p.x() - offset_x), scale_y * (p.y() - offset_y)};
}

CropTransform CropTransform::then(const CropTransform& next) const {
  // next(this(x)) = next.s * (s * (x - o) - next.o) = (s * next.s) * (x - (o + next.o / s))
  return {offset_x + next.offset_x / scale_x, offset_y + next.offset_y / scale_y,
          scale_x * next.scale_x, scale_y * next.scale_y};
}

FundamentalMatrix relative_fundamental(const CameraView& view1, const CameraView& view2) {
  const Mat3 r_rel = view2.rotation() * view1.rotation().transpose();
  const Vec3 t_rel = view2.translation() - r_rel * view1.translation();
  const double scale =
      std::max({1.0, view1.translation().norm(), view2.translation().norm()});
  if (t_rel.norm() <= 1e-9 * scale) {
    throw Error(ErrorCode::DegenerateBaseline, "relative translation is zero");
  }
  const Mat3 e = skew(t_rel) * r_rel;
  const Mat3 f = view2.intrinsics().inverse().transpose() * e * view1.intrinsics().inverse();
  return FundamentalMatrix(f);
}

EpipolarLine epipolar_line(const FundamentalMatrix& f, const Vec2& point) {
  if (!point.allFinite()) {
    throw Error(ErrorCode::InvalidArgument, "point is not finite");
  }
  const Vec3 l = f.matrix() * point.homogeneous();
  const double n = std::hypot(l.x(), l.y());
  if (n < 1e-12) {
    throw Error(ErrorCode::ZeroLine, "point maps to a degenerate line (epipole)");
  }
  return {l.x() / n, l.y() / n, l.z() / n};
}

FundamentalMatrix adjust_fundamental_for_crop(const FundamentalMatrix& f,
                                              const CropTransform& crop1,
                                              const CropTransform& crop2) {
  if (!(crop1.scale_x > 0.0 && crop1.scale_y > 0.0 && crop2.scale_x > 0.0 &&
        crop2.scale_y > 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "crop scales must be positive");
  }
  const Mat3 t1_inv = crop1.matrix().inverse();
  const Mat3 t2_inv = crop2.matrix().inverse();
  return FundamentalMatrix(t2_inv.transpose() * f.matrix() * t1_inv);
}

double epipolar_plane_angle(const CameraView& view1, const CameraView& view2, const Vec2& pixel,
                            const Vec2& ref_pixel) {
  const Vec3 axis = baseline_axis(view1, view2);
  return plane_angle(axis, view1.ray_direction(pixel), view1.ray_direction(ref_pixel));
}

double epipolar_plane_angle_view2(const CameraView& view1, const CameraView& view2,
                                  const Vec2& pixel, const Vec2& ref_pixel) {
  const Vec3 axis = baseline_axis(view1, view2);
  return plane_angle(axis, view2.ray_direction(pixel), view1.ray_direction(ref_pixel));
}

FundamentalMatrix random_rank2_matrix(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Mat3 m;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) m(r, c) = normal(rng);
  }
  return FundamentalMatrix(enforce_rank2(m));
}

}  // namespace epiguide
