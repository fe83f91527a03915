#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "epiguide/geometry.hpp"

namespace epiguide {

struct Correspondence {
  double x1, y1;  // image 1
  double x2, y2;  // image 2
};

using Correspondences = std::vector<Correspondence>;

struct RobustEstimate {
  FundamentalMatrix f;
  std::vector<std::uint8_t> inlier_mask;
  int inlier_count = 0;
  bool reliable = false;
};

// Hartley-normalized linear estimate with rank 2 enforced. Needs at least 8
// pairs and a well-conditioned design matrix.
FundamentalMatrix normalized_eight_point(std::span<const Correspondence> pairs);

// First-order geometric residual in px^2.
double sampson_error(const Mat3& f, const Correspondence& pair);
double sampson_error(const FundamentalMatrix& f, const Correspondence& pair);

struct RansacOptions {
  int iterations = 2000;
  double threshold_px2 = 1.0;
  std::uint64_t seed = 0;
};

// Minimal 8-point samples scored by Sampson inlier count (ties: lower mean
// inlier error), then Sampson-reweighted refits on the inlier set while the count grows.
RobustEstimate ransac_fundamental(std::span<const Correspondence> pairs,
                                  const RansacOptions& options = {});

// Pseudo-geometry is usable only with more than 20 matches and more than
// 0.2 x matches inliers.
bool reliability_gate(long n_matches, long n_inliers);

}  // namespace epiguide
