// Progressive vision embedding: the masked self-attention refinement and the
// T-step embed loop that concatenates per-step query embeddings.
#include <stdexcept>

#include "mstar/encoders.hpp"

namespace mstar {

NodeP Model::salient_attention_shift(Binds& b, const NodeP& f_d, const BinaryMask& m,
                                     int* degenerate_counter) const {
  Graph& g = *b.g;
  const int L = f_d->val.rows;
  if (m.grid.rows * m.grid.cols != L)
    throw std::invalid_argument("salient_attention_shift: mask/grid shape mismatch");
  Mat bias(1, L);
  bool any_open = false;
  for (int i = 0; i < L; ++i) {
    const double v = m.grid.a[i];
    if (v != 0.0 && v != 1.0)
      throw std::invalid_argument("salient_attention_shift: mask is not strictly binary");
    if (v == 1.0)
      any_open = true;
    else
      bias(0, i) = -1e4;
  }
  const Mat* bias_ptr = &bias;
  if (!any_open) {  // nothing attendable: degrade to unmasked attention
    bias_ptr = nullptr;
    if (degenerate_counter) ++*degenerate_counter;
  }
  NodeP h = ln(b, "sas.ln", f_d);
  NodeP kk = ops::add_rowvec(g, ops::matmul(g, h, param(b, "sas.attn.Wk")),
                             param(b, "sas.attn.bk"));
  NodeP vv = ops::add_rowvec(g, ops::matmul(g, h, param(b, "sas.attn.Wv")),
                             param(b, "sas.attn.bv"));
  NodeP out = attn(b, "sas.attn", h, kk, vv, bias_ptr, nullptr);
  return ops::add(g, f_d, out);
}

PveOut Model::progressive_embed(Binds& b, const NodeP& f_d, int grid_rows, int grid_cols,
                                int T, const KvCache* kv0) const {
  if (T < 0) throw std::invalid_argument("progressive_embed: T must be >= 0");
  if (f_d->val.rows != grid_rows * grid_cols)
    throw std::invalid_argument("progressive_embed: grid shape mismatch");
  PveOut po;
  std::vector<NodeP> steps;
  NodeP f = f_d;
  KvCache kv_local;
  const KvCache* kv = kv0;
  if (!kv) {
    kv_local = make_kv(b, f);
    kv = &kv_local;
  }
  VisionStep vs = embed_vision(b, *kv, grid_rows, grid_cols);
  vs.cmap.step = 0;
  steps.push_back(vs.e);
  po.trace.maps.push_back(vs.cmap);
  for (int t = 1; t <= T; ++t) {
    BinaryMask sal = binarize_sigma(po.trace.maps.back(), cfg_.sigma);
    BinaryMask m = invert_mask(sal);
    m.step = t - 1;
    po.trace.masks.push_back(m);
    f = salient_attention_shift(b, f, m, &po.trace.degenerate_mask_steps);
    kv_local = make_kv(b, f);
    VisionStep v2 = embed_vision(b, kv_local, grid_rows, grid_cols);
    v2.cmap.step = t;
    steps.push_back(v2.e);
    po.trace.maps.push_back(v2.cmap);
  }
  po.ev = steps.size() == 1 ? steps[0] : ops::concat_rows(*b.g, steps);
  return po;
}

}  // namespace mstar
