#pragma once

#include "epiguide/matrix.hpp"

// Dense products used by the reranker. The default versions run Eigen GEMM on
// fixed 32-row output blocks, spread across OpenMP threads once the product is
// large enough to pay for it, so results do not depend on the thread count.
// The `serial` namespace holds plain reference loops; the two agree to
// rounding, not bit for bit.
namespace epiguide::kernels {

// out = a * b
void matmul(const Matrix& a, const Matrix& b, Matrix& out);
// out = a * b^T
void matmul_nt(const Matrix& a, const Matrix& b, Matrix& out);
// out += a^T * b
void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& out);
// Row-wise softmax of scale * in, scale > 0.
void softmax_rows(const Matrix& in, double scale, Matrix& out);

int max_threads();
void set_threads(int n);

namespace serial {
void matmul(const Matrix& a, const Matrix& b, Matrix& out);
void matmul_nt(const Matrix& a, const Matrix& b, Matrix& out);
void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& out);
void softmax_rows(const Matrix& in, double scale, Matrix& out);
}  // namespace serial

}  // namespace epiguide::kernels
