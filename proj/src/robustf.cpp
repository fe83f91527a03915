#include "epiguide/robustf.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "epiguide/error.hpp"

namespace epiguide {

namespace {

// Similarity taking a point set to zero mean and RMS distance sqrt(2).
Mat3 hartley_transform(std::span<const Vec2> pts) {
  Vec2 mean = Vec2::Zero();
  for (const auto& p : pts) mean += p;
  mean /= static_cast<double>(pts.size());
  double sq = 0.0;
  for (const auto& p : pts) sq += (p - mean).squaredNorm();
  const double rms = std::sqrt(sq / static_cast<double>(pts.size()));
  if (!(rms > 0.0)) {
    throw Error(ErrorCode::DegenerateConfiguration, "all points coincide");
  }
  const double s = std::sqrt(2.0) / rms;
  Mat3 t;
  t << s, 0.0, -s * mean.x(),
       0.0, s, -s * mean.y(),
       0.0, 0.0, 1.0;
  return t;
}

bool collinear(std::span<const Vec2> pts, const Mat3& t) {
  Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
  for (const auto& p : pts) {
    const Vec2 q = (t * p.homogeneous()).hnormalized();
    cov += q * q.transpose();
  }
  cov /= static_cast<double>(pts.size());
  const Eigen::Vector2d ev = Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d>(cov).eigenvalues();
  return ev(0) < 1e-12 * ev(1);
}

double mean_error(const std::vector<double>& err, const std::vector<std::uint8_t>& mask) {
  double sum = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < err.size(); ++i) {
    if (mask[i]) {
      sum += err[i];
      ++n;
    }
  }
  return n ? sum / n : INFINITY;
}

int score(const Mat3& f, std::span<const Correspondence> pairs, double threshold,
          std::vector<double>& err, std::vector<std::uint8_t>& mask) {
  int count = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    double e = INFINITY;
    try {
      e = sampson_error(f, pairs[i]);
    } catch (const Error&) {
    }
    err[i] = e;
    mask[i] = e <= threshold;
    count += mask[i];
  }
  return count;
}

// Linear 8-point solve in Hartley-normalized coordinates. `weights` (optional)
// scales each equation; rank 2 is enforced before denormalizing.
Mat3 solve_eight_point(std::span<const Correspondence> pairs, std::span<const double> weights) {
  const std::size_t n = pairs.size();
  if (n < 8) {
    throw Error(ErrorCode::InsufficientPoints,
                "need at least 8 correspondences, got " + std::to_string(n));
  }
  std::vector<Vec2> p1(n), p2(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(pairs[i].x1) || !std::isfinite(pairs[i].y1) ||
        !std::isfinite(pairs[i].x2) || !std::isfinite(pairs[i].y2)) {
      throw Error(ErrorCode::InvalidArgument, "non-finite correspondence");
    }
    p1[i] = {pairs[i].x1, pairs[i].y1};
    p2[i] = {pairs[i].x2, pairs[i].y2};
  }
  const Mat3 t1 = hartley_transform(p1);
  const Mat3 t2 = hartley_transform(p2);
  if (collinear(p1, t1) || collinear(p2, t2)) {
    throw Error(ErrorCode::DegenerateConfiguration, "points are collinear");
  }

  Eigen::Matrix<double, Eigen::Dynamic, 9> a(static_cast<Eigen::Index>(std::max<std::size_t>(n, 9)), 9);
  a.setZero();
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 x = t1 * p1[i].homogeneous();
    const Vec3 y = t2 * p2[i].homogeneous();
    const double w = weights.empty() ? 1.0 : weights[i];
    a.row(static_cast<Eigen::Index>(i)) << y.x() * x.x(), y.x() * x.y(), y.x(),
        y.y() * x.x(), y.y() * x.y(), y.y(), x.x(), x.y(), 1.0;
    a.row(static_cast<Eigen::Index>(i)) *= w;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const Eigen::VectorXd sigma = svd.singularValues();
  if (!(sigma(7) > 0.0) || sigma(0) / sigma(7) > 1e12) {
    throw Error(ErrorCode::DegenerateConfiguration, "design matrix is ill-conditioned");
  }
  const Eigen::VectorXd v = svd.matrixV().col(8);
  Mat3 f;
  f << v(0), v(1), v(2), v(3), v(4), v(5), v(6), v(7), v(8);
  f = enforce_rank2(f);
  return t2.transpose() * f * t1;
}

// Iteratively reweighted refit on the inliers of `f`: each equation is
// divided by its Sampson gradient norm under the previous estimate, so the
// linear solve approximates the geometric error instead of the algebraic one.
Mat3 sampson_refit(const Mat3& f0, std::span<const Correspondence> inliers) {
  Mat3 f = f0;
  std::vector<double> w(inliers.size());
  for (int round = 0; round < 5; ++round) {
    for (std::size_t i = 0; i < inliers.size(); ++i) {
      const Vec3 x(inliers[i].x1, inliers[i].y1, 1.0), y(inliers[i].x2, inliers[i].y2, 1.0);
      const Vec3 fx = f * x, fty = f.transpose() * y;
      const double g = fx.head<2>().squaredNorm() + fty.head<2>().squaredNorm();
      w[i] = g > 0.0 ? 1.0 / std::sqrt(g) : 0.0;
    }
    f = solve_eight_point(inliers, w);
    f /= f.norm();
  }
  return f;
}

}  // namespace

FundamentalMatrix normalized_eight_point(std::span<const Correspondence> pairs) {
  return FundamentalMatrix(solve_eight_point(pairs, {}));
}

double sampson_error(const Mat3& f, const Correspondence& c) {
  const Vec3 x(c.x1, c.y1, 1.0), y(c.x2, c.y2, 1.0);
  const Vec3 fx = f * x;
  const Vec3 fty = f.transpose() * y;
  const double denom = fx.x() * fx.x() + fx.y() * fx.y() + fty.x() * fty.x() + fty.y() * fty.y();
  if (!(denom > 0.0)) {
    throw Error(ErrorCode::ZeroDenominator, "both points sit at their epipoles");
  }
  const double r = y.dot(fx);
  return r * r / denom;
}

double sampson_error(const FundamentalMatrix& f, const Correspondence& c) {
  return sampson_error(f.matrix(), c);
}

RobustEstimate ransac_fundamental(std::span<const Correspondence> pairs,
                                  const RansacOptions& options) {
  const std::size_t n = pairs.size();
  if (n < 8) {
    throw Error(ErrorCode::InsufficientPoints,
                "need at least 8 correspondences, got " + std::to_string(n));
  }
  if (options.iterations < 1) {
    throw Error(ErrorCode::InvalidArgument, "iterations must be >= 1");
  }
  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> order(n);
  std::vector<Correspondence> sample(8);
  std::vector<double> err(n);
  std::vector<std::uint8_t> mask(n);

  bool found = false;
  Mat3 best_f = Mat3::Zero();
  std::vector<std::uint8_t> best_mask(n, 0);
  int best_count = -1;
  double best_mean = INFINITY;

  for (int it = 0; it < options.iterations; ++it) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t k = 0; k < 8; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, n - 1);
      std::swap(order[k], order[pick(rng)]);
      sample[k] = pairs[order[k]];
    }
    Mat3 f;
    try {
      f = normalized_eight_point(sample).matrix();
    } catch (const Error&) {
      continue;
    }
    const int count = score(f, pairs, options.threshold_px2, err, mask);
    const double mean = mean_error(err, mask);
    if (count > best_count || (count == best_count && mean < best_mean)) {
      found = true;
      best_f = f;
      best_count = count;
      best_mean = mean;
      best_mask = mask;
    }
  }
  if (!found) {
    throw Error(ErrorCode::NoModelFound, "every minimal sample was degenerate");
  }

  // Local refinement: refit on the current inliers until the count stops growing.
  for (int round = 0; round < 5 && best_count >= 8; ++round) {
    std::vector<Correspondence> inliers;
    for (std::size_t i = 0; i < n; ++i) {
      if (best_mask[i]) inliers.push_back(pairs[i]);
    }
    Mat3 refit;
    try {
      refit = sampson_refit(best_f, inliers);
    } catch (const Error&) {
      break;
    }
    const int count = score(refit, pairs, options.threshold_px2, err, mask);
    const double mean = mean_error(err, mask);
    if (count < best_count || (count == best_count && !(mean < best_mean))) break;
    best_f = refit;
    best_count = count;
    best_mean = mean;
    best_mask = mask;
  }

  RobustEstimate out{FundamentalMatrix(best_f), best_mask, best_count, false};
  out.reliable = reliability_gate(static_cast<long>(n), best_count);
  return out;
}

bool reliability_gate(long n_matches, long n_inliers) {
  if (n_matches < 0 || n_inliers < 0 || n_inliers > n_matches) {
    throw Error(ErrorCode::InvalidCounts, "need 0 <= inliers <= matches");
  }
  return n_matches > 20 && 5 * n_inliers > n_matches;
}

}  // namespace epiguide
