// Multi-instance matching: cosine similarity between word embeddings and
// vision slots, zero-padding to square, Hungarian assignment with a
// lexicographic tie-break, and plain-value scoring helpers for inference.
#pragma once

#include <utility>
#include <vector>

#include "mstar/mat.hpp"

namespace mstar::mim {

// Entry (i,j) = cos(e_i, v_j). Throws on zero-norm rows.
Mat cosine_matrix(const Mat& e_rows, const Mat& v_rows);

// Zero-pads to side max(rows, cols); the original block stays top-left.
Mat pad_square(const Mat& m);

struct Assignment {
  std::vector<std::pair<int, int>> pairs;  // (row, col), rows 0..real_rows-1
  double objective = 0.0;                  // total value over the real pairs
};

// Maximum-weight perfect matching on a square matrix; reports only the first
// real_rows rows. Among equal-objective optima the returned pair list is
// lexicographically smallest. Deterministic.
Assignment hungarian_assign(const Mat& square, int real_rows);

// Inference-time word score: best cosine over slots (the 1 x S Hungarian
// case collapses to the max).
double max_cosine(const Mat& e, int e_row, const Mat& slots);

}  // namespace mstar::mim
