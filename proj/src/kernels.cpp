#include "epiguide/kernels.hpp"

#include <omp.h>

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

#include "epiguide/error.hpp"

namespace epiguide::kernels {

namespace {

constexpr long kParallelWork = 1L << 16;
// Fixed row blocks keep results independent of the thread count.
constexpr int kRowChunk = 32;

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMajor> view(const Matrix& m) { return {m.data(), m.rows(), m.cols()}; }

auto rows_of(Matrix& m, int r0, int rows) {
  return Eigen::Map<RowMajor>(m.data() + static_cast<long>(r0) * m.cols(), rows, m.cols());
}
auto rows_of(const Matrix& m, int r0, int rows) {
  return Eigen::Map<const RowMajor>(m.data() + static_cast<long>(r0) * m.cols(), rows, m.cols());
}

int chunk_count(int rows) { return (rows + kRowChunk - 1) / kRowChunk; }

void check(bool ok, const char* what) {
  if (!ok) throw Error(ErrorCode::ShapeMismatch, what);
}

// Reference version with scalar std::exp.
void softmax_row(const double* in, double scale, double* out, int n) {
  double mx = -INFINITY;
  for (int j = 0; j < n; ++j) mx = std::max(mx, scale * in[j]);
  double sum = 0.0;
  for (int j = 0; j < n; ++j) {
    out[j] = std::exp(scale * in[j] - mx);
    sum += out[j];
  }
  const double inv = 1.0 / sum;
  for (int j = 0; j < n; ++j) out[j] *= inv;
}

void softmax_row_vec(const double* in, double scale, double* out, int n) {
  Eigen::Map<const Eigen::ArrayXd> x(in, n);
  Eigen::Map<Eigen::ArrayXd> y(out, n);
  y = (scale * x - scale * x.maxCoeff()).exp();
  y *= 1.0 / y.sum();
}

}  // namespace

int max_threads() { return omp_get_max_threads(); }
void set_threads(int n) { omp_set_num_threads(std::max(1, n)); }

void matmul(const Matrix& a, const Matrix& b, Matrix& out) {
  check(a.cols() == b.rows(), "matmul: inner dimensions differ");
  if (out.rows() != a.rows() || out.cols() != b.cols()) out = Matrix(a.rows(), b.cols());
  const auto B = view(b);
  const int chunks = chunk_count(a.rows());
  const long work = static_cast<long>(a.rows()) * a.cols() * b.cols();
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (int c = 0; c < chunks; ++c) {
    const int r0 = c * kRowChunk, rows = std::min(kRowChunk, a.rows() - r0);
    rows_of(out, r0, rows).noalias() = rows_of(a, r0, rows) * B;
  }
}

void matmul_nt(const Matrix& a, const Matrix& b, Matrix& out) {
  check(a.cols() == b.cols(), "matmul_nt: inner dimensions differ");
  if (out.rows() != a.rows() || out.cols() != b.rows()) out = Matrix(a.rows(), b.rows());
  const auto B = view(b);
  const int chunks = chunk_count(a.rows());
  const long work = static_cast<long>(a.rows()) * a.cols() * b.rows();
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (int c = 0; c < chunks; ++c) {
    const int r0 = c * kRowChunk, rows = std::min(kRowChunk, a.rows() - r0);
    rows_of(out, r0, rows).noalias() = rows_of(a, r0, rows) * B.transpose();
  }
}

void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  check(a.rows() == b.rows(), "matmul_tn_acc: inner dimensions differ");
  check(out.rows() == a.cols() && out.cols() == b.cols(), "matmul_tn_acc: output shape");
  const auto A = view(a);
  const auto B = view(b);
  const int chunks = chunk_count(a.cols());
  const long work = static_cast<long>(a.cols()) * a.rows() * b.cols();
  // Output row i is column i of a, so chunks of a's columns own disjoint output rows.
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (int c = 0; c < chunks; ++c) {
    const int r0 = c * kRowChunk, rows = std::min(kRowChunk, a.cols() - r0);
    rows_of(out, r0, rows).noalias() += A.middleCols(r0, rows).transpose() * B;
  }
}

void softmax_rows(const Matrix& in, double scale, Matrix& out) {
  if (!out.same_shape(in)) out = Matrix(in.rows(), in.cols());
  const long work = static_cast<long>(in.rows()) * in.cols() * 16;
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (int i = 0; i < in.rows(); ++i) {
    softmax_row_vec(in.row(i).data(), scale, out.row(i).data(), in.cols());
  }
}

namespace serial {

void matmul(const Matrix& a, const Matrix& b, Matrix& out) {
  check(a.cols() == b.rows(), "matmul: inner dimensions differ");
  out = Matrix(a.rows(), b.cols());
  for (int i = 0; i < a.rows(); ++i) {
    for (int j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (int k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      out(i, j) = acc;
    }
  }
}

void matmul_nt(const Matrix& a, const Matrix& b, Matrix& out) {
  check(a.cols() == b.cols(), "matmul_nt: inner dimensions differ");
  out = Matrix(a.rows(), b.rows());
  for (int i = 0; i < a.rows(); ++i) {
    for (int j = 0; j < b.rows(); ++j) {
      double acc = 0.0;
      for (int k = 0; k < a.cols(); ++k) acc += a(i, k) * b(j, k);
      out(i, j) = acc;
    }
  }
}

void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  check(a.rows() == b.rows(), "matmul_tn_acc: inner dimensions differ");
  check(out.rows() == a.cols() && out.cols() == b.cols(), "matmul_tn_acc: output shape");
  for (int i = 0; i < a.cols(); ++i) {
    for (int j = 0; j < b.cols(); ++j) {
      double acc = out(i, j);
      for (int k = 0; k < a.rows(); ++k) acc += a(k, i) * b(k, j);
      out(i, j) = acc;
    }
  }
}

void softmax_rows(const Matrix& in, double scale, Matrix& out) {
  out = Matrix(in.rows(), in.cols());
  for (int i = 0; i < in.rows(); ++i) {
    softmax_row(in.row(i).data(), scale, out.row(i).data(), in.cols());
  }
}

}  // namespace serial

}  // namespace epiguide::kernels
