// Dense-algebra kernels backing the autograd ops.
//
// Each kernel has a serial reference body (*_ref) and an OpenMP variant that
// partitions work by output row with the same per-row arithmetic, so the two
// produce bitwise-identical results for any thread count. Tests compare them
// directly; bench/ times them against each other.
#pragma once

#include "mstar/mat.hpp"

namespace mstar::kernels {

// C = A * B
void matmul_ref(const Mat& A, const Mat& B, Mat& C);
void matmul(const Mat& A, const Mat& B, Mat& C);

// C = A * B^T
void matmul_nt_ref(const Mat& A, const Mat& B, Mat& C);
void matmul_nt(const Mat& A, const Mat& B, Mat& C);

// C = A^T * B
void matmul_tn_ref(const Mat& A, const Mat& B, Mat& C);
void matmul_tn(const Mat& A, const Mat& B, Mat& C);

// Accumulating variants (C += ...), used by backward passes.
void matmul_acc(const Mat& A, const Mat& B, Mat& C);
void matmul_nt_acc(const Mat& A, const Mat& B, Mat& C);
void matmul_tn_acc(const Mat& A, const Mat& B, Mat& C);

// In-place row softmax with max subtraction.
void softmax_rows_ref(Mat& X);
void softmax_rows(Mat& X);

}  // namespace mstar::kernels
