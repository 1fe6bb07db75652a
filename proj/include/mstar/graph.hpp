// Tape-based reverse-mode autodiff over Mat. Nodes are appended to a Graph in
// creation order; backward() walks the tape in reverse. Gradients are lazily
// allocated, so untouched subgraphs cost nothing on the way back.
#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "mstar/mat.hpp"

namespace mstar {

struct Node {
  Mat val;
  Mat grad;  // empty until first contribution
  bool needs_grad = false;
  std::function<void()> back;

  void accumulate(const Mat& g) {
    if (grad.empty()) grad = Mat(val.rows, val.cols);
    grad.add(g);
  }
  // Direct accumulation target, allocating on demand.
  Mat& grad_buf() {
    if (grad.empty()) grad = Mat(val.rows, val.cols);
    return grad;
  }
};

using NodeP = std::shared_ptr<Node>;

class Graph {
 public:
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  NodeP leaf(Mat v, bool needs_grad = false) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    n->needs_grad = needs_grad && grad_enabled_;
    tape_.push_back(n);
    return n;
  }

  void adopt(const NodeP& n) { tape_.push_back(n); }

  // Seeds d(root)/d(root) = 1 and propagates through the tape. root must be 1x1.
  void backward(const NodeP& root);

  size_t node_count() const { return tape_.size(); }

 private:
  std::vector<NodeP> tape_;
  bool grad_enabled_;
};

namespace ops {

NodeP matmul(Graph& g, const NodeP& a, const NodeP& b);
NodeP matmul_nt(Graph& g, const NodeP& a, const NodeP& b);  // a * b^T
NodeP add(Graph& g, const NodeP& a, const NodeP& b);
NodeP add_rowvec(Graph& g, const NodeP& a, const NodeP& v);  // v broadcast over rows
NodeP scale(Graph& g, const NodeP& a, double c);
NodeP mul_scalar_node(Graph& g, const NodeP& a, const NodeP& s);  // s is 1x1
NodeP tanh_op(Graph& g, const NodeP& a);
NodeP gelu(Graph& g, const NodeP& a);
NodeP exp_op(Graph& g, const NodeP& a);
NodeP layer_norm(Graph& g, const NodeP& a, const NodeP& gamma, const NodeP& beta);
NodeP softmax_rows(Graph& g, const NodeP& a);
NodeP concat_rows(Graph& g, const std::vector<NodeP>& parts);
NodeP slice_rows(Graph& g, const NodeP& a, int r0, int len);
NodeP mean_rows(Graph& g, const NodeP& a);
NodeP l2norm_rows(Graph& g, const NodeP& a);  // throws on near-zero rows
NodeP gather_rows(Graph& g, const NodeP& table, const std::vector<int>& idx);
NodeP select_entries(Graph& g, const NodeP& a, const std::vector<std::pair<int, int>>& ij);
NodeP row_max(Graph& g, const NodeP& a);  // subgradient via first argmax
NodeP transpose(Graph& g, const NodeP& a);
NodeP stack_scalars(Graph& g, const std::vector<NodeP>& cells, int rows, int cols);
// Bilinear resampling of a (r0*c0)xD grid-of-rows to (r1*c1)xD.
NodeP interp_grid(Graph& g, const NodeP& a, int r0, int c0, int r1, int c1);
// Mean cross-entropy over rows of softmax(logits) against fixed target rows.
NodeP ce_softmax_rows(Graph& g, const NodeP& logits, const Mat& targets);

// Multi-head scaled-dot attention over already-projected q/k/v. key_bias, when
// present, is a 1 x n_keys additive logit bias (shared across heads and query
// rows). probs holds the post-softmax weights of all heads stacked as
// (heads*m) x n, row-stochastic by construction.
struct AttnOut {
  NodeP out;
  std::shared_ptr<Mat> probs;
};
AttnOut attention_core(Graph& g, const NodeP& q, const NodeP& k, const NodeP& v, int heads,
                       const Mat* key_bias = nullptr);

}  // namespace ops
}  // namespace mstar
