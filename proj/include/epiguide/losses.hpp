#pragma once

#include "epiguide/guides.hpp"
#include "epiguide/matrix.hpp"

namespace epiguide {

enum class Reduction { Sum, Mean };

struct BceTerm {
  double value;
  double derivative;  // d value / d logit
};

// Binary cross-entropy of sigmoid(logit) against a {0,1} label, in the
// overflow-free form max(a,0) - a*y + log(1 + exp(-|a|)).
BceTerm bce_with_logit(double logit, int label);

struct LossResult {
  double value = 0.0;
  Matrix grad12;  // dL/dA12
  Matrix grad21;  // dL/dA21
  // Split of `value` into zero-label terms and row-max terms (max-epipolar only;
  // for the plain loss zero_part holds the zero-label share and max_part the rest).
  double zero_part = 0.0;
  double max_part = 0.0;
};

// Sum over every entry of both raw-logit maps of BCE(sigmoid(a), guide). Mean
// reduction divides value and gradients by the total entry count of both maps.
LossResult epipolar_loss(const Matrix& a12, const Matrix& a21, const EpipolarGuide& guide,
                         Reduction reduction = Reduction::Mean);

// Zero-label BCE off the epipolar lines plus, for each row with a non-empty
// line, BCE(sigmoid(max logit on the line), 1). The max term's gradient goes
// to the argmax entry only; ties resolve to the lowest column.
LossResult max_epipolar_loss(const Matrix& a12, const Matrix& a21, const EpipolarGuide& guide,
                             Reduction reduction = Reduction::Mean);

}  // namespace epiguide
