#include "mstar/kernels.hpp"

#include <cmath>
#include <stdexcept>

namespace mstar::kernels {

namespace {

constexpr long kParallelFlops = 1 << 16;

void check_mm(const Mat& A, const Mat& B, int ak, int bk, const char* what) {
  if (ak != bk) throw std::invalid_argument(std::string(what) + ": inner dim mismatch");
  (void)A;
  (void)B;
}

// Row body shared by the reference and OpenMP paths: C[i] = sum_k A[i][k]*B[k].
inline void matmul_row(const Mat& A, const Mat& B, Mat& C, int i, bool acc) {
  double* ci = C.row(i);
  if (!acc)
    for (int j = 0; j < C.cols; ++j) ci[j] = 0.0;
  const double* ai = A.row(i);
  for (int k = 0; k < A.cols; ++k) {
    const double aik = ai[k];
    const double* bk = B.row(k);
    for (int j = 0; j < C.cols; ++j) ci[j] += aik * bk[j];
  }
}

inline void matmul_nt_row(const Mat& A, const Mat& B, Mat& C, int i, bool acc) {
  const double* ai = A.row(i);
  double* ci = C.row(i);
  for (int j = 0; j < C.cols; ++j) {
    const double* bj = B.row(j);
    double s = 0.0;
    for (int k = 0; k < A.cols; ++k) s += ai[k] * bj[k];
    if (acc)
      ci[j] += s;
    else
      ci[j] = s;
  }
}

// Output row k of A^T*B: C[k] = sum_i A[i][k]*B[i].
inline void matmul_tn_row(const Mat& A, const Mat& B, Mat& C, int k, bool acc) {
  double* ck = C.row(k);
  if (!acc)
    for (int j = 0; j < C.cols; ++j) ck[j] = 0.0;
  for (int i = 0; i < A.rows; ++i) {
    const double aik = A(i, k);
    const double* bi = B.row(i);
    for (int j = 0; j < C.cols; ++j) ck[j] += aik * bi[j];
  }
}

inline void softmax_row(Mat& X, int i) {
  double* x = X.row(i);
  double mx = x[0];
  for (int j = 1; j < X.cols; ++j) mx = std::max(mx, x[j]);
  double sum = 0.0;
  for (int j = 0; j < X.cols; ++j) {
    x[j] = std::exp(x[j] - mx);
    sum += x[j];
  }
  const double inv = 1.0 / sum;
  for (int j = 0; j < X.cols; ++j) x[j] *= inv;
}

}  // namespace

void matmul_ref(const Mat& A, const Mat& B, Mat& C) {
  check_mm(A, B, A.cols, B.rows, "matmul");
  C = Mat(A.rows, B.cols);
  for (int i = 0; i < A.rows; ++i) matmul_row(A, B, C, i, false);
}

void matmul(const Mat& A, const Mat& B, Mat& C) {
  check_mm(A, B, A.cols, B.rows, "matmul");
  C = Mat(A.rows, B.cols);
  const long flops = 2L * A.rows * A.cols * B.cols;
#pragma omp parallel for schedule(static) if (flops > kParallelFlops)
  for (int i = 0; i < A.rows; ++i) matmul_row(A, B, C, i, false);
}

void matmul_acc(const Mat& A, const Mat& B, Mat& C) {
  check_mm(A, B, A.cols, B.rows, "matmul_acc");
  if (C.rows != A.rows || C.cols != B.cols) throw std::invalid_argument("matmul_acc: C shape");
  const long flops = 2L * A.rows * A.cols * B.cols;
#pragma omp parallel for schedule(static) if (flops > kParallelFlops)
  for (int i = 0; i < A.rows; ++i) matmul_row(A, B, C, i, true);
}

void matmul_nt_ref(const Mat& A, const Mat& B, Mat& C) {
  check_mm(A, B, A.cols, B.cols, "matmul_nt");
  C = Mat(A.rows, B.rows);
  for (int i = 0; i < A.rows; ++i) matmul_nt_row(A, B, C, i, false);
}

void matmul_nt(const Mat& A, const Mat& B, Mat& C) {
  check_mm(A, B, A.cols, B.cols, "matmul_nt");
  C = Mat(A.rows, B.rows);
  const long flops = 2L * A.rows * A.cols * B.rows;
#pragma omp parallel for schedule(static) if (flops > kParallelFlops)
  for (int i = 0; i < A.rows; ++i) matmul_nt_row(A, B, C, i, false);
}

void matmul_nt_acc(const Mat& A, const Mat& B, Mat& C) {
  check_mm(A, B, A.cols, B.cols, "matmul_nt_acc");
  if (C.rows != A.rows || C.cols != B.rows) throw std::invalid_argument("matmul_nt_acc: C shape");
  const long flops = 2L * A.rows * A.cols * B.rows;
#pragma omp parallel for schedule(static) if (flops > kParallelFlops)
  for (int i = 0; i < A.rows; ++i) matmul_nt_row(A, B, C, i, true);
}

void matmul_tn_ref(const Mat& A, const Mat& B, Mat& C) {
  check_mm(A, B, A.rows, B.rows, "matmul_tn");
  C = Mat(A.cols, B.cols);
  for (int k = 0; k < A.cols; ++k) matmul_tn_row(A, B, C, k, false);
}

void matmul_tn(const Mat& A, const Mat& B, Mat& C) {
  check_mm(A, B, A.rows, B.rows, "matmul_tn");
  C = Mat(A.cols, B.cols);
  const long flops = 2L * A.rows * A.cols * B.cols;
#pragma omp parallel for schedule(static) if (flops > kParallelFlops)
  for (int k = 0; k < A.cols; ++k) matmul_tn_row(A, B, C, k, false);
}

void matmul_tn_acc(const Mat& A, const Mat& B, Mat& C) {
  check_mm(A, B, A.rows, B.rows, "matmul_tn_acc");
  if (C.rows != A.cols || C.cols != B.cols) throw std::invalid_argument("matmul_tn_acc: C shape");
  const long flops = 2L * A.rows * A.cols * B.cols;
#pragma omp parallel for schedule(static) if (flops > kParallelFlops)
  for (int k = 0; k < A.cols; ++k) matmul_tn_row(A, B, C, k, true);
}

void softmax_rows_ref(Mat& X) {
  for (int i = 0; i < X.rows; ++i) softmax_row(X, i);
}

void softmax_rows(Mat& X) {
  const long work = 4L * X.rows * X.cols;
#pragma omp parallel for schedule(static) if (work > kParallelFlops)
  for (int i = 0; i < X.rows; ++i) softmax_row(X, i);
}

}  // namespace mstar::kernels
