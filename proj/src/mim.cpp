// Multi-instance matching. The assignment solver runs the O(n^3)
// shortest-augmenting-path algorithm on negated values to get optimal dual
// potentials, then re-selects the matching greedily inside the tight-edge
// graph so equal-objective optima resolve to the lexicographically smallest
// pair list.
#include "mstar/mim.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

#include "mstar/encoders.hpp"

namespace mstar::mim {
namespace {

constexpr double kNormFloor = 1e-12;

std::vector<double> row_norms(const Mat& m, const char* who) {
  std::vector<double> out(m.rows);
  for (int i = 0; i < m.rows; ++i) {
    double s = 0.0;
    for (int j = 0; j < m.cols; ++j) s += m(i, j) * m(i, j);
    out[i] = std::sqrt(s);
    if (!std::isfinite(out[i]))
      throw std::invalid_argument(std::string(who) + ": rows must be finite");
    if (out[i] < kNormFloor) throw std::invalid_argument(std::string(who) + ": zero-norm row");
  }
  return out;
}

// Can every row in [first_free, n) still be matched to an unused column using
// only tight edges? col_taken marks columns fixed by the greedy prefix.
bool rest_matchable(const std::vector<std::vector<char>>& tight, const std::vector<char>& col_taken,
                    int first_free) {
  const int n = static_cast<int>(tight.size());
  std::vector<int> col_of(n, -1);  // column -> row inside this check
  std::vector<char> seen(n);
  std::function<bool(int)> kuhn = [&](int r) -> bool {
    for (int j = 0; j < n; ++j) {
      if (col_taken[j] || seen[j] || !tight[r][j]) continue;
      seen[j] = 1;
      if (col_of[j] < 0 || kuhn(col_of[j])) {
        col_of[j] = r;
        return true;
      }
    }
    return false;
  };
  for (int r = first_free; r < n; ++r) {
    std::fill(seen.begin(), seen.end(), 0);
    if (!kuhn(r)) return false;
  }
  return true;
}

}  // namespace

Mat cosine_matrix(const Mat& e_rows, const Mat& v_rows) {
  if (e_rows.cols != v_rows.cols)
    throw std::invalid_argument("cosine_matrix: width mismatch");
  const std::vector<double> en = row_norms(e_rows, "cosine_matrix");
  const std::vector<double> vn = row_norms(v_rows, "cosine_matrix");
  Mat out(e_rows.rows, v_rows.rows);
  for (int i = 0; i < e_rows.rows; ++i)
    for (int j = 0; j < v_rows.rows; ++j) {
      double dot = 0.0;
      for (int k = 0; k < e_rows.cols; ++k) dot += e_rows(i, k) * v_rows(j, k);
      out(i, j) = dot / (en[i] * vn[j]);
    }
  return out;
}

Mat pad_square(const Mat& m) {
  const int side = std::max(m.rows, m.cols);
  if (side == m.rows && side == m.cols) return m;
  Mat out(side, side);
  for (int i = 0; i < m.rows; ++i)
    for (int j = 0; j < m.cols; ++j) out(i, j) = m(i, j);
  return out;
}

Assignment hungarian_assign(const Mat& square, int real_rows) {
  const int n = square.rows;
  if (square.cols != n) throw std::invalid_argument("hungarian_assign: matrix not square");
  if (real_rows < 0 || real_rows > n)
    throw std::invalid_argument("hungarian_assign: bad real_rows");
  // NaN costs would break the augmenting-path comparisons below.
  for (double v : square.a)
    if (!std::isfinite(v)) throw std::invalid_argument("hungarian_assign: entries must be finite");
  Assignment out;
  if (n == 0) return out;

  // Maximize value == minimize cost = -value. 1-based arrays; index 0 is the
  // virtual source column of the augmenting path.
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  auto cost = [&](int i, int j) { return -square(i - 1, j - 1); };
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = -1;
      double delta = kInf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0, j) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  // Complementary slackness: some perfect matching exists among edges whose
  // reduced cost is ~0. Re-match greedily there, smallest column first, so
  // ties in the objective come out deterministic.
  double scale = 1.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) scale = std::max(scale, std::abs(square(i, j)));
  const double eps = 1e-9 * scale;
  std::vector<std::vector<char>> tight(n, std::vector<char>(n, 0));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      tight[i][j] = std::abs(cost(i + 1, j + 1) - u[i + 1] - v[j + 1]) <= eps;

  std::vector<int> row_to_col(n, -1);
  std::vector<char> col_taken(n, 0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (col_taken[j] || !tight[i][j]) continue;
      col_taken[j] = 1;
      if (rest_matchable(tight, col_taken, i + 1)) {
        row_to_col[i] = j;
        break;
      }
      col_taken[j] = 0;
    }
    if (row_to_col[i] < 0)
      throw std::logic_error("hungarian_assign: tight graph lost its perfect matching");
  }

  for (int i = 0; i < real_rows; ++i) {
    out.pairs.emplace_back(i, row_to_col[i]);
    out.objective += square(i, row_to_col[i]);
  }
  return out;
}

double max_cosine(const Mat& e, int e_row, const Mat& slots) {
  if (e_row < 0 || e_row >= e.rows) throw std::invalid_argument("max_cosine: bad row");
  if (e.cols != slots.cols) throw std::invalid_argument("max_cosine: width mismatch");
  if (slots.rows == 0) throw std::invalid_argument("max_cosine: no slots");
  double en = 0.0;
  for (int k = 0; k < e.cols; ++k) en += e(e_row, k) * e(e_row, k);
  en = std::sqrt(en);
  if (en < kNormFloor) throw std::invalid_argument("max_cosine: zero-norm row");
  double best = -2.0;  // cosines live in [-1, 1]
  for (int j = 0; j < slots.rows; ++j) {
    double dot = 0.0, sn = 0.0;
    for (int k = 0; k < e.cols; ++k) {
      dot += e(e_row, k) * slots(j, k);
      sn += slots(j, k) * slots(j, k);
    }
    sn = std::sqrt(sn);
    if (sn < kNormFloor) throw std::invalid_argument("max_cosine: zero-norm slot");
    best = std::max(best, dot / (en * sn));
  }
  return best;
}

}  // namespace mstar::mim

namespace mstar {

NodeP Model::aggregate_multiword(Binds& b, const NodeP& e_m, const NodeP& ev) const {
  Graph& g = *b.g;
  if (e_m->val.cols != cfg_.d || ev->val.cols != cfg_.d)
    throw std::invalid_argument("aggregate_multiword: width mismatch");
  if (e_m->val.rows == 0) return g.leaf(Mat(0, cfg_.d));
  NodeP slots = ops::l2norm_rows(g, ev);
  NodeP kk = ops::add_rowvec(g, ops::matmul(g, slots, param(b, "mim.attn.Wk")),
                             param(b, "mim.attn.bk"));
  NodeP vv = ops::add_rowvec(g, ops::matmul(g, slots, param(b, "mim.attn.Wv")),
                             param(b, "mim.attn.bv"));
  NodeP e1 = ops::add(g, e_m, attn(b, "mim.attn", ln(b, "mim.ln_q", e_m), kk, vv,
                                   nullptr, nullptr));
  return ops::add(g, e1, ffn(b, "mim.ffn", ln(b, "mim.ln_ffn", e1)));
}

}  // namespace mstar
