#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <cstdint>

namespace epiguide {

using Mat3 = Eigen::Matrix3d;
using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;

// Pinhole camera with world-to-camera extrinsics: x ~ K (R X + t).
class CameraView {
 public:
  CameraView(const Mat3& rotation, const Vec3& translation, const Mat3& intrinsics,
             int width, int height);

  const Mat3& rotation() const { return rotation_; }
  const Vec3& translation() const { return translation_; }
  const Mat3& intrinsics() const { return intrinsics_; }
  int width() const { return width_; }
  int height() const { return height_; }

  Vec3 center() const { return -rotation_.transpose() * translation_; }
  // Depth along the optical axis and pixel coordinates of a world point.
  double depth(const Vec3& world) const;
  Vec2 project(const Vec3& world) const;
  // World-frame direction of the viewing ray through `pixel` (unnormalized).
  Vec3 ray_direction(const Vec2& pixel) const;
  bool in_image(const Vec2& pixel) const;

  // Camera at `eye` looking at `target`, image y axis pointing along -up.
  static CameraView look_at(const Vec3& eye, const Vec3& target, const Vec3& up,
                            const Mat3& intrinsics, int width, int height);

 private:
  Mat3 rotation_;
  Vec3 translation_;
  Mat3 intrinsics_;
  int width_;
  int height_;
};

// Rank-2 matrix with x2^T F x1 = 0 for corresponding pixels. Always stored in
// canonical form: unit Frobenius norm, largest-magnitude entry positive.
class FundamentalMatrix {
 public:
  // Canonicalizes `m`. Rank is not enforced here; see enforce_rank2.
  explicit FundamentalMatrix(const Mat3& m);

  const Mat3& matrix() const { return m_; }
  FundamentalMatrix transposed() const { return FundamentalMatrix(m_.transpose()); }
  // Algebraic residual x2^T F x1 in homogeneous pixel coordinates.
  double residual(const Vec2& x1, const Vec2& x2) const;

  bool operator==(const FundamentalMatrix& other) const { return m_ == other.m_; }

 private:
  Mat3 m_;
};

Mat3 canonicalize(const Mat3& m);
Mat3 enforce_rank2(const Mat3& m);
double rank_ratio(const Mat3& m);  // sigma_min / sigma_max

struct EpipolarLine {
  double a = 0.0;
  double b = 0.0;
  double c = 0.0;

  double signed_distance(const Vec2& p) const { return a * p.x() + b * p.y() + c; }
};

// Pixels removed at the left/top, then a resize by (scale_x, scale_y):
// x' = scale * (x - offset).
struct CropTransform {
  double offset_x = 0.0;
  double offset_y = 0.0;
  double scale_x = 1.0;
  double scale_y = 1.0;

  Mat3 matrix() const;
  Vec2 apply(const Vec2& p) const;
  // Crop `*this` followed by `next`, as one transform.
  CropTransform then(const CropTransform& next) const;
};

FundamentalMatrix relative_fundamental(const CameraView& view1, const CameraView& view2);

// Line in image 2 for a pixel of image 1. Use f.transposed() for the reverse direction.
EpipolarLine epipolar_line(const FundamentalMatrix& f, const Vec2& point);

FundamentalMatrix adjust_fundamental_for_crop(const FundamentalMatrix& f,
                                              const CropTransform& crop1,
                                              const CropTransform& crop2);

// Signed rotation about the baseline between the epipolar plane through
// `ref_pixel` and the one through `pixel`, both pixels of view1. Result in (-pi, pi].
double epipolar_plane_angle(const CameraView& view1, const CameraView& view2,
                            const Vec2& pixel, const Vec2& ref_pixel);
// Same plane family, with `pixel` taken from view2 and `ref_pixel` from view1.
double epipolar_plane_angle_view2(const CameraView& view1, const CameraView& view2,
                                  const Vec2& pixel, const Vec2& ref_pixel);

FundamentalMatrix random_rank2_matrix(std::uint64_t seed);

}  // namespace epiguide
