// Every autograd op is validated against central finite differences of a
// scalar loss built from it. The loss contracts the op output with a fixed
// random weight vector so permutation/transposition bugs cannot cancel out.
#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"
#include "mstar/graph.hpp"
#include "mstar/mat.hpp"

using namespace mstar;

namespace {

// Contracts y (any shape) with fixed pseudo-random weights into a 1x1 node.
NodeP weigh(Graph& g, const NodeP& y, uint64_t seed) {
  std::vector<std::pair<int, int>> ij;
  for (int i = 0; i < y->val.rows; ++i)
    for (int j = 0; j < y->val.cols; ++j) ij.emplace_back(i, j);
  NodeP col = ops::select_entries(g, y, ij);
  Rng rng(seed);
  NodeP w = g.leaf(randn(static_cast<int>(ij.size()), 1, 1.0, rng), false);
  return ops::matmul(g, ops::transpose(g, col), w);
}

using Builder = std::function<NodeP(Graph&, std::vector<NodeP>&)>;

// Checks d(loss)/d(param) for every entry of every param against central
// differences. The builder must be deterministic in the leaf values.
void check_grads(std::vector<Mat> inits, const Builder& build, double h = 1e-5,
                 double tol = 1e-6) {
  Graph g(true);
  std::vector<NodeP> leaves;
  for (const Mat& m : inits) leaves.push_back(g.leaf(m, true));
  NodeP root = build(g, leaves);
  REQUIRE(root->val.rows == 1);
  REQUIRE(root->val.cols == 1);
  g.backward(root);

  auto eval = [&](const std::vector<Mat>& vals) {
    Graph g2(false);
    std::vector<NodeP> ls;
    for (const Mat& m : vals) ls.push_back(g2.leaf(m, false));
    return build(g2, ls)->val(0, 0);
  };

  for (size_t p = 0; p < inits.size(); ++p) {
    const Mat& analytic = leaves[p]->grad;
    for (size_t idx = 0; idx < inits[p].a.size(); ++idx) {
      std::vector<Mat> vals = inits;
      vals[p].a[idx] += h;
      const double fp = eval(vals);
      vals[p].a[idx] -= 2 * h;
      const double fm = eval(vals);
      const double fd = (fp - fm) / (2 * h);
      const double an = analytic.empty() ? 0.0 : analytic.a[idx];
      CHECK(std::abs(an - fd) <= tol * std::max(1.0, std::abs(fd)));
    }
  }
}

Mat rmat(int r, int c, uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  return randn(r, c, sd, rng);
}

}  // namespace

TEST_CASE("grad: matmul and matmul_nt") {
  check_grads({rmat(3, 4, 1), rmat(4, 5, 2)}, [](Graph& g, std::vector<NodeP>& v) {
    return weigh(g, ops::matmul(g, v[0], v[1]), 101);
  });
  check_grads({rmat(3, 4, 3), rmat(5, 4, 4)}, [](Graph& g, std::vector<NodeP>& v) {
    return weigh(g, ops::matmul_nt(g, v[0], v[1]), 102);
  });
}

TEST_CASE("grad: add, add_rowvec, scale, mul_scalar_node") {
  check_grads({rmat(3, 4, 5), rmat(3, 4, 6)}, [](Graph& g, std::vector<NodeP>& v) {
    return weigh(g, ops::add(g, v[0], v[1]), 103);
  });
  check_grads({rmat(3, 4, 7), rmat(1, 4, 8)}, [](Graph& g, std::vector<NodeP>& v) {
    return weigh(g, ops::add_rowvec(g, v[0], v[1]), 104);
  });
  check_grads({rmat(3, 4, 9)}, [](Graph& g, std::vector<NodeP>& v) {
    return weigh(g, ops::scale(g, v[0], -1.7), 105);
  });
  check_grads({rmat(3, 4, 10), rmat(1, 1, 11)}, [](Graph& g, std::vector<NodeP>& v) {
    return weigh(g, ops::mul_scalar_node(g, v[0], v[1]), 106);
  });
}

TEST_CASE("grad: pointwise tanh, gelu, exp") {
  check_grads({rmat(3, 5, 12)}, [](Graph& g, std::vector<NodeP>& v) {
    return weigh(g, ops::tanh_op(g, v[0]), 107);
  });
  check_grads({rmat(3, 5, 13)}, [](Graph& g, std::vector<NodeP>& v) {
    return weigh(g, ops::gelu(g, v[0]), 108);
  });
  check_grads({rmat(3, 5, 14, 0.5)}, [](Graph& g, std::vector<NodeP>& v) {
    return weigh(g, ops::exp_op(g, v[0]), 109);
  });
}

TEST_CASE("grad: layer_norm over input, gamma, beta") {
  check_grads({rmat(4, 6, 15), rmat(1, 6, 16), rmat(1, 6, 17)},
              [](Graph& g, std::vector<NodeP>& v) {
                return weigh(g, ops::layer_norm(g, v[0], v[1], v[2]), 110);
              });
}

TEST_CASE("grad: softmax_rows") {
  check_grads({rmat(3, 5, 18)}, [](Graph& g, std::vector<NodeP>& v) {
    return weigh(g, ops::softmax_rows(g, v[0]), 111);
  });
}

TEST_CASE("grad: concat_rows and slice_rows") {
  check_grads({rmat(2, 4, 19), rmat(3, 4, 20)}, [](Graph& g, std::vector<NodeP>& v) {
    NodeP fixed = g.leaf(rmat(1, 4, 21), false);
    NodeP cat = ops::concat_rows(g, {v[0], fixed, v[1]});
    return weigh(g, ops::slice_rows(g, cat, 1, 4), 112);
  });
}

TEST_CASE("grad: mean_rows and l2norm_rows") {
  check_grads({rmat(4, 3, 22)}, [](Graph& g, std::vector<NodeP>& v) {
    return weigh(g, ops::mean_rows(g, v[0]), 113);
  });
  check_grads({rmat(4, 3, 23)}, [](Graph& g, std::vector<NodeP>& v) {
    return weigh(g, ops::l2norm_rows(g, v[0]), 114);
  });
}

TEST_CASE("grad: gather_rows with repeated indices accumulates") {
  check_grads({rmat(5, 3, 24)}, [](Graph& g, std::vector<NodeP>& v) {
    return weigh(g, ops::gather_rows(g, v[0], {4, 0, 4, 2, 0}), 115);
  });
}

TEST_CASE("grad: select_entries with repeated entries accumulates") {
  check_grads({rmat(3, 3, 25)}, [](Graph& g, std::vector<NodeP>& v) {
    std::vector<std::pair<int, int>> ij = {{0, 0}, {2, 1}, {0, 0}, {1, 2}};
    return weigh(g, ops::select_entries(g, v[0], ij), 116);
  });
}

TEST_CASE("grad: row_max routes to the argmax entry") {
  check_grads({rmat(4, 5, 26)}, [](Graph& g, std::vector<NodeP>& v) {
    return weigh(g, ops::row_max(g, v[0]), 117);
  });
}

TEST_CASE("grad: transpose") {
  check_grads({rmat(3, 5, 27)}, [](Graph& g, std::vector<NodeP>& v) {
    return weigh(g, ops::transpose(g, v[0]), 118);
  });
}

TEST_CASE("grad: stack_scalars") {
  check_grads({rmat(2, 3, 28)}, [](Graph& g, std::vector<NodeP>& v) {
    std::vector<NodeP> cells;
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 3; ++j)
        cells.push_back(ops::select_entries(g, v[0], {{i, j}}));
    // reversed layout so stacking is not the identity map
    std::reverse(cells.begin(), cells.end());
    return weigh(g, ops::stack_scalars(g, cells, 3, 2), 119);
  });
}

TEST_CASE("grad: interp_grid upsample and identity") {
  check_grads({rmat(4 * 5, 3, 29)}, [](Graph& g, std::vector<NodeP>& v) {
    return weigh(g, ops::interp_grid(g, v[0], 4, 5, 7, 6), 120);
  });
  Graph g;
  NodeP a = g.leaf(rmat(3 * 3, 2, 30));
  NodeP b = ops::interp_grid(g, a, 3, 3, 3, 3);
  for (size_t i = 0; i < a->val.a.size(); ++i)
    CHECK(b->val.a[i] == doctest::Approx(a->val.a[i]).epsilon(1e-12));
}

TEST_CASE("grad: ce_softmax_rows against one-hot and soft targets") {
  Mat onehot(4, 6);
  onehot(0, 2) = 1;
  onehot(1, 0) = 1;
  onehot(2, 5) = 1;
  onehot(3, 3) = 1;
  check_grads({rmat(4, 6, 31)}, [onehot](Graph& g, std::vector<NodeP>& v) {
    return ops::ce_softmax_rows(g, v[0], onehot);
  });
  Mat soft(3, 4);
  soft(0, 1) = 0.5;
  soft(0, 3) = 0.5;
  soft(1, 0) = 1.0;
  soft(2, 0) = 1.0 / 3;
  soft(2, 2) = 1.0 / 3;
  soft(2, 3) = 1.0 / 3;
  check_grads({rmat(3, 4, 32)}, [soft](Graph& g, std::vector<NodeP>& v) {
    return ops::ce_softmax_rows(g, v[0], soft);
  });
}

TEST_CASE("grad: attention_core with and without key bias") {
  check_grads({rmat(3, 8, 33), rmat(5, 8, 34), rmat(5, 8, 35)},
              [](Graph& g, std::vector<NodeP>& v) {
                auto att = ops::attention_core(g, v[0], v[1], v[2], 2);
                return weigh(g, att.out, 121);
              });
  Mat bias(1, 5);
  bias(0, 1) = -1e4;
  bias(0, 3) = -1e4;
  check_grads({rmat(3, 8, 36), rmat(5, 8, 37), rmat(5, 8, 38)},
              [bias](Graph& g, std::vector<NodeP>& v) {
                auto att = ops::attention_core(g, v[0], v[1], v[2], 2, &bias);
                return weigh(g, att.out, 122);
              });
}

TEST_CASE("attention_core probs are row-stochastic and bias kills masked keys") {
  Graph g;
  NodeP q = g.leaf(rmat(3, 8, 39));
  NodeP k = g.leaf(rmat(5, 8, 40));
  NodeP v = g.leaf(rmat(5, 8, 41));
  Mat bias(1, 5);
  bias(0, 2) = -1e4;
  auto att = ops::attention_core(g, q, k, v, 2, &bias);
  const Mat& P = *att.probs;
  REQUIRE(P.rows == 2 * 3);
  REQUIRE(P.cols == 5);
  for (int i = 0; i < P.rows; ++i) {
    double s = 0.0;
    for (int j = 0; j < P.cols; ++j) s += P(i, j);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(P(i, 2) == 0.0);  // -1e4 logit underflows to exactly zero
  }
}

TEST_CASE("graph API errors") {
  Graph g;
  NodeP a = g.leaf(rmat(2, 3, 42), true);
  CHECK_THROWS_AS(g.backward(a), std::invalid_argument);  // non-scalar root
  CHECK_THROWS_AS(ops::l2norm_rows(g, g.leaf(Mat(2, 3))), std::invalid_argument);
  CHECK_THROWS_AS(ops::add(g, a, g.leaf(Mat(3, 2))), std::invalid_argument);
  Graph off(false);
  NodeP b = off.leaf(rmat(2, 2, 43), true);
  CHECK_FALSE(b->needs_grad);  // grad-disabled graphs never track
}

TEST_CASE("second backward on a fresh graph matches the first (no state leakage)") {
  auto run = [](double bump) {
    Graph g;
    NodeP x = g.leaf(rmat(3, 3, 44), true);
    x->val(0, 0) += bump;
    NodeP y = ops::softmax_rows(g, ops::tanh_op(g, x));
    NodeP loss = weigh(g, y, 123);
    g.backward(loss);
    return x->grad;
  };
  Mat g1 = run(0.0), g2 = run(0.0);
  REQUIRE(g1.same_shape(g2));
  for (size_t i = 0; i < g1.a.size(); ++i) CHECK(g1.a[i] == g2.a[i]);
}
