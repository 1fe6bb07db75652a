// Objective assembly. The score matrix keeps the discrete choices (Hungarian
// assignment, row argmax, negative draws) out of the tape: they pick which
// cosine cells enter the losses, and gradients flow through the picked cells
// only.
#include "mstar/objective.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "mstar/mim.hpp"

namespace mstar {
namespace {

NodeP cell_at(Graph& g, const NodeP& m, int i, int j) {
  return ops::select_entries(g, m, {{i, j}});
}

}  // namespace

ImagePass forward_image(const Model& m, Binds& b, const Image& img) {
  const int p = m.config().patch;
  if (img.w % p != 0 || img.h % p != 0)
    throw std::invalid_argument("forward_image: image not patch-aligned");
  NodeP f = m.encode_image(b, img);
  NodeP f_d = m.project(b, f);
  ImagePass out;
  out.kv = m.make_kv(b, f_d);
  PveOut pve = m.progressive_embed(b, f_d, img.h / p, img.w / p, m.config().T, &out.kv);
  out.ev = pve.ev;
  out.trace = std::move(pve.trace);
  return out;
}

BatchScores batch_scores(const Model& m, Binds& b, const std::vector<BatchQuery>& queries,
                         const std::vector<ImagePass>& images) {
  Graph& g = *b.g;
  const int R = static_cast<int>(queries.size());
  const int B = static_cast<int>(images.size());
  if (R == 0 || B == 0) throw std::invalid_argument("batch_scores: empty batch");
  for (const BatchQuery& q : queries)
    if (q.positive < 0 || q.positive >= B)
      throw std::invalid_argument("batch_scores: positive index out of range");

  std::vector<NodeP> emb(R);
  for (int r = 0; r < R; ++r) emb[r] = m.encode_text(b, queries[r].style, queries[r].text);

  std::vector<NodeP> cells(static_cast<size_t>(R) * B);
  BatchScores out;
  out.positive.resize(R);
  for (int r = 0; r < R; ++r) out.positive[r] = queries[r].positive;

  if (!m.config().mim_on) {
    // Ablated matching: every row scores against the mean-pooled slots.
    NodeP e_n = ops::l2norm_rows(g, ops::concat_rows(g, emb));
    for (int j = 0; j < B; ++j) {
      NodeP pooled = ops::l2norm_rows(g, ops::mean_rows(g, images[j].ev));
      NodeP col = ops::matmul_nt(g, e_n, pooled);  // R x 1
      for (int r = 0; r < R; ++r) cells[static_cast<size_t>(r) * B + j] = cell_at(g, col, r, 0);
    }
    out.scores = ops::stack_scalars(g, cells, R, B);
    return out;
  }

  std::vector<int> wrows, mrows;  // global row index per branch
  for (int r = 0; r < R; ++r) (multiword_style(queries[r].style) ? mrows : wrows).push_back(r);

  NodeP e_word_n, e_multi, e_multi_n;
  if (!wrows.empty()) {
    std::vector<NodeP> parts;
    for (int r : wrows) parts.push_back(emb[r]);
    e_word_n = ops::l2norm_rows(g, ops::concat_rows(g, parts));
  }
  if (!mrows.empty()) {
    std::vector<NodeP> parts;
    for (int r : mrows) parts.push_back(emb[r]);
    e_multi = ops::concat_rows(g, parts);
    e_multi_n = ops::l2norm_rows(g, e_multi);
  }

  for (int j = 0; j < B; ++j) {
    if (!wrows.empty()) {
      NodeP slots_n = ops::l2norm_rows(g, images[j].ev);
      NodeP wc = ops::matmul_nt(g, e_word_n, slots_n);  // N_w x S cosines
      NodeP rm = ops::row_max(g, wc);
      // Joint assignment over this image's own word queries.
      std::vector<int> local;
      for (size_t l = 0; l < wrows.size(); ++l)
        if (queries[wrows[l]].positive == j) local.push_back(static_cast<int>(l));
      std::vector<int> assigned(wrows.size(), -1);
      if (!local.empty()) {
        Mat v(static_cast<int>(local.size()), wc->val.cols);
        for (int i = 0; i < v.rows; ++i)
          for (int c = 0; c < v.cols; ++c) v(i, c) = wc->val(local[i], c);
        mim::Assignment asg = mim::hungarian_assign(mim::pad_square(v), v.rows);
        for (const auto& [row, col] : asg.pairs) assigned[local[row]] = col;
      }
      for (size_t l = 0; l < wrows.size(); ++l) {
        const size_t at = static_cast<size_t>(wrows[l]) * B + j;
        cells[at] = assigned[l] >= 0 ? cell_at(g, wc, static_cast<int>(l), assigned[l])
                                     : cell_at(g, rm, static_cast<int>(l), 0);
      }
    }
    if (!mrows.empty()) {
      NodeP evt_n = ops::l2norm_rows(g, m.aggregate_multiword(b, e_multi, images[j].ev));
      NodeP cm = ops::matmul_nt(g, evt_n, e_multi_n);  // diag = per-row cosines
      for (size_t l = 0; l < mrows.size(); ++l)
        cells[static_cast<size_t>(mrows[l]) * B + j] =
            cell_at(g, cm, static_cast<int>(l), static_cast<int>(l));
    }
  }
  out.scores = ops::stack_scalars(g, cells, R, B);
  return out;
}

ContrastiveParts contrastive_loss(Graph& g, const NodeP& scores, const std::vector<int>& positive,
                                  double alpha, const NodeP& logit_scale) {
  const int R = scores->val.rows, B = scores->val.cols;
  if (R == 0 || B == 0) throw std::invalid_argument("contrastive_loss: empty batch");
  if (static_cast<int>(positive.size()) != R)
    throw std::invalid_argument("contrastive_loss: one positive per row required");
  if (logit_scale->val.rows != 1 || logit_scale->val.cols != 1)
    throw std::invalid_argument("contrastive_loss: logit_scale must be 1x1");
  for (int p : positive)
    if (p < 0 || p >= B) throw std::invalid_argument("contrastive_loss: positive out of range");

  NodeP scaled = ops::mul_scalar_node(g, scores, ops::exp_op(g, logit_scale));

  Mat t2v(R, B);
  for (int r = 0; r < R; ++r) t2v(r, positive[r]) = 1.0;
  Mat v2t(B, R);
  for (int j = 0; j < B; ++j) {
    int count = 0;
    for (int p : positive) count += p == j;
    if (count == 0) throw std::invalid_argument("contrastive_loss: image without positive query");
    for (int r = 0; r < R; ++r)
      if (positive[r] == j) v2t(j, r) = 1.0 / count;
  }

  ContrastiveParts out;
  out.l_t2v = ops::ce_softmax_rows(g, scaled, t2v);
  out.l_v2t = ops::ce_softmax_rows(g, ops::transpose(g, scaled), v2t);
  out.l_c = ops::add(g, ops::scale(g, out.l_t2v, alpha), out.l_v2t);
  return out;
}

NodeP itm_ce(Graph& g, const NodeP& logits, const std::vector<int>& labels) {
  const int P = logits->val.rows;
  if (P == 0) throw std::invalid_argument("itm_ce: empty batch");
  if (logits->val.cols != 2) throw std::invalid_argument("itm_ce: logits must be P x 2");
  if (static_cast<int>(labels.size()) != P)
    throw std::invalid_argument("itm_ce: one label per pair required");
  Mat targets(P, 2);
  for (int i = 0; i < P; ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw std::invalid_argument("itm_ce: bad label");
    targets(i, labels[i]) = 1.0;
  }
  return ops::ce_softmax_rows(g, logits, targets);
}

StepLoss step_loss(const Model& m, Binds& b, const std::vector<BatchQuery>& queries,
                   const std::vector<ImagePass>& images, Rng& rng) {
  Graph& g = *b.g;
  BatchScores bs = batch_scores(m, b, queries, images);
  ContrastiveParts parts =
      contrastive_loss(g, bs.scores, bs.positive, m.config().alpha, m.param(b, "logit_scale"));

  const int R = bs.scores->val.rows;
  const double escale = std::exp(m.param(b, "logit_scale")->val(0, 0));
  std::vector<NodeP> logits;
  std::vector<int> labels;
  for (int r = 0; r < R; ++r) {
    const int j = bs.positive[r];
    logits.push_back(m.itm_logits(b, images[j].kv, queries[r].style, queries[r].text));
    labels.push_back(1);
    // Hard negative for image j: a query of another image, drawn by the
    // softmaxed scaled column scores.
    std::vector<int> pool;
    double top = -std::numeric_limits<double>::infinity();
    for (int r2 = 0; r2 < R; ++r2)
      if (bs.positive[r2] != j) {
        pool.push_back(r2);
        top = std::max(top, bs.scores->val(r2, j) * escale);
      }
    if (pool.empty()) continue;  // single-image batch: no mismatch available
    double z = 0.0;
    std::vector<double> w(pool.size());
    for (size_t i = 0; i < pool.size(); ++i)
      z += w[i] = std::exp(bs.scores->val(pool[i], j) * escale - top);
    double u = rng.uniform(0.0, z);
    int pick = pool.back();
    for (size_t i = 0; i < pool.size(); ++i) {
      if (u < w[i]) {
        pick = pool[i];
        break;
      }
      u -= w[i];
    }
    logits.push_back(m.itm_logits(b, images[j].kv, queries[pick].style, queries[pick].text));
    labels.push_back(0);
  }
  NodeP l_m = itm_ce(g, ops::concat_rows(g, logits), labels);

  StepLoss out;
  out.total = ops::add(g, parts.l_c, l_m);
  out.values.alpha = m.config().alpha;
  out.values.l_t2v = parts.l_t2v->val(0, 0);
  out.values.l_v2t = parts.l_v2t->val(0, 0);
  out.values.l_c = parts.l_c->val(0, 0);
  out.values.l_m = l_m->val(0, 0);
  out.values.total = out.total->val(0, 0);
  return out;
}

}  // namespace mstar
