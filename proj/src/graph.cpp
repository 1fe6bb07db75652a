#include "mstar/graph.hpp"

#include <cmath>
#include <stdexcept>

#include "mstar/kernels.hpp"

namespace mstar {

void Graph::backward(const NodeP& root) {
  if (root->val.rows != 1 || root->val.cols != 1)
    throw std::invalid_argument("backward: root must be a scalar node");
  root->grad_buf()(0, 0) = 1.0;
  for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
    Node* n = it->get();
    if (n->back && !n->grad.empty()) n->back();
  }
}

namespace ops {
namespace {

constexpr double inv_sqrt2 = 0.7071067811865476;
constexpr double inv_sqrt2pi = 0.3989422804014327;

NodeP fresh(Graph& g, Mat val, bool needs_grad) {
  auto n = std::make_shared<Node>();
  n->val = std::move(val);
  n->needs_grad = needs_grad && g.grad_enabled();
  g.adopt(n);
  return n;
}

bool any_grad(std::initializer_list<const NodeP*> ps) {
  for (const NodeP* p : ps)
    if ((*p)->needs_grad) return true;
  return false;
}

}  // namespace

NodeP matmul(Graph& g, const NodeP& a, const NodeP& b) {
  Mat c;
  kernels::matmul(a->val, b->val, c);
  NodeP out = fresh(g, std::move(c), any_grad({&a, &b}));
  if (out->needs_grad) {
    Node* o = out.get();
    out->back = [o, a, b]() {
      if (a->needs_grad) kernels::matmul_nt_acc(o->grad, b->val, a->grad_buf());
      if (b->needs_grad) kernels::matmul_tn_acc(a->val, o->grad, b->grad_buf());
    };
  }
  return out;
}

NodeP matmul_nt(Graph& g, const NodeP& a, const NodeP& b) {
  Mat c;
  kernels::matmul_nt(a->val, b->val, c);
  NodeP out = fresh(g, std::move(c), any_grad({&a, &b}));
  if (out->needs_grad) {
    Node* o = out.get();
    out->back = [o, a, b]() {
      if (a->needs_grad) kernels::matmul_acc(o->grad, b->val, a->grad_buf());
      if (b->needs_grad) kernels::matmul_tn_acc(o->grad, a->val, b->grad_buf());
    };
  }
  return out;
}

NodeP add(Graph& g, const NodeP& a, const NodeP& b) {
  if (!a->val.same_shape(b->val)) throw std::invalid_argument("add: shape mismatch");
  Mat c = a->val;
  c.add(b->val);
  NodeP out = fresh(g, std::move(c), any_grad({&a, &b}));
  if (out->needs_grad) {
    Node* o = out.get();
    out->back = [o, a, b]() {
      if (a->needs_grad) a->accumulate(o->grad);
      if (b->needs_grad) b->accumulate(o->grad);
    };
  }
  return out;
}

NodeP add_rowvec(Graph& g, const NodeP& a, const NodeP& v) {
  if (v->val.rows != 1 || v->val.cols != a->val.cols)
    throw std::invalid_argument("add_rowvec: bias must be 1 x cols");
  Mat c = a->val;
  for (int i = 0; i < c.rows; ++i) {
    double* ci = c.row(i);
    for (int j = 0; j < c.cols; ++j) ci[j] += v->val(0, j);
  }
  NodeP out = fresh(g, std::move(c), any_grad({&a, &v}));
  if (out->needs_grad) {
    Node* o = out.get();
    out->back = [o, a, v]() {
      if (a->needs_grad) a->accumulate(o->grad);
      if (v->needs_grad) {
        Mat& gv = v->grad_buf();
        for (int i = 0; i < o->grad.rows; ++i) {
          const double* gi = o->grad.row(i);
          for (int j = 0; j < o->grad.cols; ++j) gv(0, j) += gi[j];
        }
      }
    };
  }
  return out;
}

NodeP scale(Graph& g, const NodeP& a, double c) {
  Mat m = a->val;
  for (double& x : m.a) x *= c;
  NodeP out = fresh(g, std::move(m), a->needs_grad);
  if (out->needs_grad) {
    Node* o = out.get();
    out->back = [o, a, c]() {
      Mat& ga = a->grad_buf();
      for (size_t i = 0; i < ga.a.size(); ++i) ga.a[i] += c * o->grad.a[i];
    };
  }
  return out;
}

NodeP mul_scalar_node(Graph& g, const NodeP& a, const NodeP& s) {
  if (s->val.rows != 1 || s->val.cols != 1)
    throw std::invalid_argument("mul_scalar_node: s must be 1x1");
  const double sv = s->val(0, 0);
  Mat m = a->val;
  for (double& x : m.a) x *= sv;
  NodeP out = fresh(g, std::move(m), any_grad({&a, &s}));
  if (out->needs_grad) {
    Node* o = out.get();
    out->back = [o, a, s, sv]() {
      if (a->needs_grad) {
        Mat& ga = a->grad_buf();
        for (size_t i = 0; i < ga.a.size(); ++i) ga.a[i] += sv * o->grad.a[i];
      }
      if (s->needs_grad) {
        double acc = 0.0;
        for (size_t i = 0; i < a->val.a.size(); ++i) acc += a->val.a[i] * o->grad.a[i];
        s->grad_buf()(0, 0) += acc;
      }
    };
  }
  return out;
}

NodeP tanh_op(Graph& g, const NodeP& a) {
  Mat m = a->val;
  for (double& x : m.a) x = std::tanh(x);
  NodeP out = fresh(g, std::move(m), a->needs_grad);
  if (out->needs_grad) {
    Node* o = out.get();
    out->back = [o, a]() {
      Mat& ga = a->grad_buf();
      for (size_t i = 0; i < ga.a.size(); ++i) {
        const double y = o->val.a[i];
        ga.a[i] += (1.0 - y * y) * o->grad.a[i];
      }
    };
  }
  return out;
}

NodeP gelu(Graph& g, const NodeP& a) {
  Mat m = a->val;
  for (double& x : m.a) x = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
  NodeP out = fresh(g, std::move(m), a->needs_grad);
  if (out->needs_grad) {
    Node* o = out.get();
    out->back = [o, a]() {
      Mat& ga = a->grad_buf();
      for (size_t i = 0; i < ga.a.size(); ++i) {
        const double x = a->val.a[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        ga.a[i] += (cdf + x * pdf) * o->grad.a[i];
      }
    };
  }
  return out;
}

NodeP exp_op(Graph& g, const NodeP& a) {
  Mat m = a->val;
  for (double& x : m.a) x = std::exp(x);
  NodeP out = fresh(g, std::move(m), a->needs_grad);
  if (out->needs_grad) {
    Node* o = out.get();
    out->back = [o, a]() {
      Mat& ga = a->grad_buf();
      for (size_t i = 0; i < ga.a.size(); ++i) ga.a[i] += o->val.a[i] * o->grad.a[i];
    };
  }
  return out;
}

NodeP layer_norm(Graph& g, const NodeP& a, const NodeP& gamma, const NodeP& beta) {
  constexpr double eps = 1e-6;
  const int n = a->val.cols;
  if (gamma->val.cols != n || beta->val.cols != n || gamma->val.rows != 1 || beta->val.rows != 1)
    throw std::invalid_argument("layer_norm: gamma/beta must be 1 x cols");
  Mat y(a->val.rows, n);
  auto xhat = std::make_shared<Mat>(a->val.rows, n);
  auto inv_std = std::make_shared<std::vector<double>>(a->val.rows);
  for (int i = 0; i < a->val.rows; ++i) {
    const double* x = a->val.row(i);
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += x[j];
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= n;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (int j = 0; j < n; ++j) {
      const double xh = (x[j] - mu) * is;
      (*xhat)(i, j) = xh;
      y(i, j) = gamma->val(0, j) * xh + beta->val(0, j);
    }
  }
  NodeP out = fresh(g, std::move(y), any_grad({&a, &gamma, &beta}));
  if (out->needs_grad) {
    Node* o = out.get();
    out->back = [o, a, gamma, beta, xhat, inv_std]() {
      const int n = o->val.cols;
      for (int i = 0; i < o->val.rows; ++i) {
        const double* gy = o->grad.row(i);
        if (gamma->needs_grad || beta->needs_grad) {
          Mat* gg = gamma->needs_grad ? &gamma->grad_buf() : nullptr;
          Mat* gb = beta->needs_grad ? &beta->grad_buf() : nullptr;
          for (int j = 0; j < n; ++j) {
            if (gg) (*gg)(0, j) += gy[j] * (*xhat)(i, j);
            if (gb) (*gb)(0, j) += gy[j];
          }
        }
        if (a->needs_grad) {
          double m1 = 0.0, m2 = 0.0;
          for (int j = 0; j < n; ++j) {
            const double dxh = gy[j] * gamma->val(0, j);
            m1 += dxh;
            m2 += dxh * (*xhat)(i, j);
          }
          m1 /= n;
          m2 /= n;
          Mat& ga = a->grad_buf();
          const double is = (*inv_std)[i];
          for (int j = 0; j < n; ++j) {
            const double dxh = gy[j] * gamma->val(0, j);
            ga(i, j) += is * (dxh - m1 - (*xhat)(i, j) * m2);
          }
        }
      }
    };
  }
  return out;
}

NodeP softmax_rows(Graph& g, const NodeP& a) {
  Mat y = a->val;
  kernels::softmax_rows(y);
  NodeP out = fresh(g, std::move(y), a->needs_grad);
  if (out->needs_grad) {
    Node* o = out.get();
    out->back = [o, a]() {
      Mat& ga = a->grad_buf();
      for (int i = 0; i < o->val.rows; ++i) {
        const double* y = o->val.row(i);
        const double* gy = o->grad.row(i);
        double dot = 0.0;
        for (int j = 0; j < o->val.cols; ++j) dot += y[j] * gy[j];
        for (int j = 0; j < o->val.cols; ++j) ga(i, j) += y[j] * (gy[j] - dot);
      }
    };
  }
  return out;
}

NodeP concat_rows(Graph& g, const std::vector<NodeP>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  const int cols = parts[0]->val.cols;
  int rows = 0;
  bool ng = false;
  for (const auto& p : parts) {
    if (p->val.cols != cols) throw std::invalid_argument("concat_rows: col mismatch");
    rows += p->val.rows;
    ng = ng || p->needs_grad;
  }
  Mat c(rows, cols);
  int r = 0;
  for (const auto& p : parts) {
    for (int i = 0; i < p->val.rows; ++i, ++r)
      for (int j = 0; j < cols; ++j) c(r, j) = p->val(i, j);
  }
  NodeP out = fresh(g, std::move(c), ng);
  if (out->needs_grad) {
    Node* o = out.get();
    auto ps = parts;
    out->back = [o, ps]() {
      int r = 0;
      for (const auto& p : ps) {
        if (p->needs_grad) {
          Mat& gp = p->grad_buf();
          for (int i = 0; i < p->val.rows; ++i)
            for (int j = 0; j < p->val.cols; ++j) gp(i, j) += o->grad(r + i, j);
        }
        r += p->val.rows;
      }
    };
  }
  return out;
}

NodeP slice_rows(Graph& g, const NodeP& a, int r0, int len) {
  if (r0 < 0 || len < 0 || r0 + len > a->val.rows)
    throw std::invalid_argument("slice_rows: out of range");
  Mat c(len, a->val.cols);
  for (int i = 0; i < len; ++i)
    for (int j = 0; j < a->val.cols; ++j) c(i, j) = a->val(r0 + i, j);
  NodeP out = fresh(g, std::move(c), a->needs_grad);
  if (out->needs_grad) {
    Node* o = out.get();
    out->back = [o, a, r0, len]() {
      Mat& ga = a->grad_buf();
      for (int i = 0; i < len; ++i)
        for (int j = 0; j < o->val.cols; ++j) ga(r0 + i, j) += o->grad(i, j);
    };
  }
  return out;
}

NodeP mean_rows(Graph& g, const NodeP& a) {
  const int m = a->val.rows, n = a->val.cols;
  if (m == 0) throw std::invalid_argument("mean_rows: empty input");
  Mat c(1, n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) c(0, j) += a->val(i, j);
  for (int j = 0; j < n; ++j) c(0, j) /= m;
  NodeP out = fresh(g, std::move(c), a->needs_grad);
  if (out->needs_grad) {
    Node* o = out.get();
    out->back = [o, a, m, n]() {
      Mat& ga = a->grad_buf();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) ga(i, j) += o->grad(0, j) / m;
    };
  }
  return out;
}

NodeP l2norm_rows(Graph& g, const NodeP& a) {
  const int m = a->val.rows, n = a->val.cols;
  Mat y(m, n);
  auto norms = std::make_shared<std::vector<double>>(m);
  for (int i = 0; i < m; ++i) {
    const double* x = a->val.row(i);
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += x[j] * x[j];
    const double nrm = std::sqrt(s);
    if (nrm < 1e-12) throw std::invalid_argument("l2norm_rows: zero-norm vector");
    (*norms)[i] = nrm;
    for (int j = 0; j < n; ++j) y(i, j) = x[j] / nrm;
  }
  NodeP out = fresh(g, std::move(y), a->needs_grad);
  if (out->needs_grad) {
    Node* o = out.get();
    out->back = [o, a, norms]() {
      Mat& ga = a->grad_buf();
      for (int i = 0; i < o->val.rows; ++i) {
        const double* y = o->val.row(i);
        const double* gy = o->grad.row(i);
        double dot = 0.0;
        for (int j = 0; j < o->val.cols; ++j) dot += y[j] * gy[j];
        const double inv = 1.0 / (*norms)[i];
        for (int j = 0; j < o->val.cols; ++j) ga(i, j) += inv * (gy[j] - y[j] * dot);
      }
    };
  }
  return out;
}

NodeP gather_rows(Graph& g, const NodeP& table, const std::vector<int>& idx) {
  const int n = table->val.cols;
  Mat c(static_cast<int>(idx.size()), n);
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= table->val.rows)
      throw std::invalid_argument("gather_rows: index out of range");
    for (int j = 0; j < n; ++j) c(static_cast<int>(i), j) = table->val(idx[i], j);
  }
  NodeP out = fresh(g, std::move(c), table->needs_grad);
  if (out->needs_grad) {
    Node* o = out.get();
    out->back = [o, table, idx]() {
      Mat& gt = table->grad_buf();
      for (size_t i = 0; i < idx.size(); ++i)
        for (int j = 0; j < o->val.cols; ++j) gt(idx[i], j) += o->grad(static_cast<int>(i), j);
    };
  }
  return out;
}

NodeP select_entries(Graph& g, const NodeP& a, const std::vector<std::pair<int, int>>& ij) {
  Mat c(static_cast<int>(ij.size()), 1);
  for (size_t p = 0; p < ij.size(); ++p) {
    auto [i, j] = ij[p];
    if (i < 0 || i >= a->val.rows || j < 0 || j >= a->val.cols)
      throw std::invalid_argument("select_entries: index out of range");
    c(static_cast<int>(p), 0) = a->val(i, j);
  }
  NodeP out = fresh(g, std::move(c), a->needs_grad);
  if (out->needs_grad) {
    Node* o = out.get();
    out->back = [o, a, ij]() {
      Mat& ga = a->grad_buf();
      for (size_t p = 0; p < ij.size(); ++p)
        ga(ij[p].first, ij[p].second) += o->grad(static_cast<int>(p), 0);
    };
  }
  return out;
}

NodeP row_max(Graph& g, const NodeP& a) {
  const int m = a->val.rows, n = a->val.cols;
  if (n == 0) throw std::invalid_argument("row_max: empty rows");
  Mat c(m, 1);
  auto arg = std::make_shared<std::vector<int>>(m);
  for (int i = 0; i < m; ++i) {
    const double* x = a->val.row(i);
    int best = 0;
    for (int j = 1; j < n; ++j)
      if (x[j] > x[best]) best = j;
    (*arg)[i] = best;
    c(i, 0) = x[best];
  }
  NodeP out = fresh(g, std::move(c), a->needs_grad);
  if (out->needs_grad) {
    Node* o = out.get();
    out->back = [o, a, arg]() {
      Mat& ga = a->grad_buf();
      for (int i = 0; i < o->val.rows; ++i) ga(i, (*arg)[i]) += o->grad(i, 0);
    };
  }
  return out;
}

NodeP transpose(Graph& g, const NodeP& a) {
  Mat c(a->val.cols, a->val.rows);
  for (int i = 0; i < a->val.rows; ++i)
    for (int j = 0; j < a->val.cols; ++j) c(j, i) = a->val(i, j);
  NodeP out = fresh(g, std::move(c), a->needs_grad);
  if (out->needs_grad) {
    Node* o = out.get();
    out->back = [o, a]() {
      Mat& ga = a->grad_buf();
      for (int i = 0; i < o->val.rows; ++i)
        for (int j = 0; j < o->val.cols; ++j) ga(j, i) += o->grad(i, j);
    };
  }
  return out;
}

NodeP stack_scalars(Graph& g, const std::vector<NodeP>& cells, int rows, int cols) {
  if (static_cast<int>(cells.size()) != rows * cols)
    throw std::invalid_argument("stack_scalars: cell count mismatch");
  Mat c(rows, cols);
  bool ng = false;
  for (int i = 0; i < rows * cols; ++i) {
    if (cells[i]->val.rows != 1 || cells[i]->val.cols != 1)
      throw std::invalid_argument("stack_scalars: cells must be 1x1");
    c.a[i] = cells[i]->val(0, 0);
    ng = ng || cells[i]->needs_grad;
  }
  NodeP out = fresh(g, std::move(c), ng);
  if (out->needs_grad) {
    Node* o = out.get();
    auto cs = cells;
    out->back = [o, cs]() {
      for (size_t i = 0; i < cs.size(); ++i)
        if (cs[i]->needs_grad) cs[i]->grad_buf()(0, 0) += o->grad.a[i];
    };
  }
  return out;
}

NodeP interp_grid(Graph& g, const NodeP& a, int r0, int c0, int r1, int c1) {
  if (a->val.rows != r0 * c0) throw std::invalid_argument("interp_grid: source grid mismatch");
  const int dim = a->val.cols;
  // One (source index, weight) quad per target cell.
  struct Tap {
    int src;
    double w;
  };
  auto taps = std::make_shared<std::vector<std::array<Tap, 4>>>();
  taps->resize(static_cast<size_t>(r1) * c1);
  for (int i = 0; i < r1; ++i) {
    const double sy = (r1 == 1) ? 0.0 : static_cast<double>(i) * (r0 - 1) / (r1 - 1);
    const int y0 = static_cast<int>(sy);
    const int y1 = std::min(y0 + 1, r0 - 1);
    const double fy = sy - y0;
    for (int j = 0; j < c1; ++j) {
      const double sx = (c1 == 1) ? 0.0 : static_cast<double>(j) * (c0 - 1) / (c1 - 1);
      const int x0 = static_cast<int>(sx);
      const int x1 = std::min(x0 + 1, c0 - 1);
      const double fx = sx - x0;
      (*taps)[static_cast<size_t>(i) * c1 + j] = {
          Tap{y0 * c0 + x0, (1 - fy) * (1 - fx)}, Tap{y0 * c0 + x1, (1 - fy) * fx},
          Tap{y1 * c0 + x0, fy * (1 - fx)}, Tap{y1 * c0 + x1, fy * fx}};
    }
  }
  Mat c(r1 * c1, dim);
  for (int t = 0; t < r1 * c1; ++t) {
    double* ct = c.row(t);
    for (const Tap& tp : (*taps)[t]) {
      const double* src = a->val.row(tp.src);
      for (int j = 0; j < dim; ++j) ct[j] += tp.w * src[j];
    }
  }
  NodeP out = fresh(g, std::move(c), a->needs_grad);
  if (out->needs_grad) {
    Node* o = out.get();
    out->back = [o, a, taps]() {
      Mat& ga = a->grad_buf();
      for (int t = 0; t < o->val.rows; ++t) {
        const double* gt = o->grad.row(t);
        for (const Tap& tp : (*taps)[t]) {
          double* dst = ga.row(tp.src);
          for (int j = 0; j < o->val.cols; ++j) dst[j] += tp.w * gt[j];
        }
      }
    };
  }
  return out;
}

NodeP ce_softmax_rows(Graph& g, const NodeP& logits, const Mat& targets) {
  if (!logits->val.same_shape(targets))
    throw std::invalid_argument("ce_softmax_rows: target shape mismatch");
  const int m = logits->val.rows;
  if (m == 0) throw std::invalid_argument("ce_softmax_rows: empty batch");
  auto probs = std::make_shared<Mat>(logits->val);
  kernels::softmax_rows(*probs);
  double loss = 0.0;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < targets.cols; ++j)
      if (targets(i, j) != 0.0) loss -= targets(i, j) * std::log(std::max((*probs)(i, j), 1e-300));
  Mat out(1, 1);
  out(0, 0) = loss / m;
  NodeP node = fresh(g, std::move(out), logits->needs_grad);
  if (node->needs_grad) {
    Node* o = node.get();
    Mat tgt = targets;
    node->back = [o, logits, probs, tgt, m]() {
      const double s = o->grad(0, 0) / m;
      Mat& gl = logits->grad_buf();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < tgt.cols; ++j) gl(i, j) += s * ((*probs)(i, j) - tgt(i, j));
    };
  }
  return node;
}

AttnOut attention_core(Graph& g, const NodeP& q, const NodeP& k, const NodeP& v, int heads,
                       const Mat* key_bias) {
  const int m = q->val.rows, n = k->val.rows, d = q->val.cols;
  if (k->val.cols != d || v->val.cols != d)
    throw std::invalid_argument("attention_core: width mismatch");
  if (d % heads != 0) throw std::invalid_argument("attention_core: width not divisible by heads");
  if (key_bias && (key_bias->rows != 1 || key_bias->cols != n))
    throw std::invalid_argument("attention_core: key_bias must be 1 x n_keys");
  const int dh = d / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  auto probs = std::make_shared<Mat>(heads * m, n);
  Mat out_val(m, d);
  for (int h = 0; h < heads; ++h) {
    const int off = h * dh;
    for (int i = 0; i < m; ++i) {
      double* p = probs->row(h * m + i);
      const double* qi = q->val.row(i) + off;
      for (int j = 0; j < n; ++j) {
        const double* kj = k->val.row(j) + off;
        double s = 0.0;
        for (int t = 0; t < dh; ++t) s += qi[t] * kj[t];
        p[j] = s * inv_scale + (key_bias ? (*key_bias)(0, j) : 0.0);
      }
      // softmax over keys
      double mx = p[0];
      for (int j = 1; j < n; ++j) mx = std::max(mx, p[j]);
      double sum = 0.0;
      for (int j = 0; j < n; ++j) {
        p[j] = std::exp(p[j] - mx);
        sum += p[j];
      }
      const double inv = 1.0 / sum;
      for (int j = 0; j < n; ++j) p[j] *= inv;
      double* oi = out_val.row(i) + off;
      for (int t = 0; t < dh; ++t) oi[t] = 0.0;
      for (int j = 0; j < n; ++j) {
        const double pj = p[j];
        const double* vj = v->val.row(j) + off;
        for (int t = 0; t < dh; ++t) oi[t] += pj * vj[t];
      }
    }
  }
  NodeP out = fresh(g, std::move(out_val), any_grad({&q, &k, &v}));
  if (out->needs_grad) {
    Node* o = out.get();
    out->back = [o, q, k, v, probs, heads, dh, inv_scale]() {
      const int m = q->val.rows, n = k->val.rows;
      Mat* gq = q->needs_grad ? &q->grad_buf() : nullptr;
      Mat* gk = k->needs_grad ? &k->grad_buf() : nullptr;
      Mat* gv = v->needs_grad ? &v->grad_buf() : nullptr;
      std::vector<double> dp(n), ds(n);
      for (int h = 0; h < heads; ++h) {
        const int off = h * dh;
        for (int i = 0; i < m; ++i) {
          const double* p = probs->row(h * m + i);
          const double* go = o->grad.row(i) + off;
          // dV += P^T dO ; dP = dO V^T
          double dot = 0.0;
          for (int j = 0; j < n; ++j) {
            const double* vj = v->val.row(j) + off;
            double s = 0.0;
            for (int t = 0; t < dh; ++t) s += go[t] * vj[t];
            dp[j] = s;
            dot += s * p[j];
            if (gv) {
              double* gvj = gv->row(j) + off;
              for (int t = 0; t < dh; ++t) gvj[t] += p[j] * go[t];
            }
          }
          if (!gq && !gk) continue;
          for (int j = 0; j < n; ++j) ds[j] = p[j] * (dp[j] - dot) * inv_scale;
          const double* qi = q->val.row(i) + off;
          double* gqi = gq ? gq->row(i) + off : nullptr;
          for (int j = 0; j < n; ++j) {
            const double dsj = ds[j];
            if (dsj == 0.0) continue;
            const double* kj = k->val.row(j) + off;
            if (gqi)
              for (int t = 0; t < dh; ++t) gqi[t] += dsj * kj[t];
            if (gk) {
              double* gkj = gk->row(j) + off;
              for (int t = 0; t < dh; ++t) gkj[t] += dsj * qi[t];
            }
          }
        }
      }
    };
  }
  return {out, probs};
}

}  // namespace ops
}  // namespace mstar
