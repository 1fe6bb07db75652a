// The model: vision encoder phi, projector, multi-modal encoder psi (vision /
// text / joint modes), the ITM head, the progressive-embedding loop, and the
// multi-word aggregation branch. All forward passes build autograd graphs.
#pragma once

#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "mstar/graph.hpp"
#include "mstar/image_io.hpp"
#include "mstar/mask.hpp"
#include "mstar/params.hpp"
#include "mstar/tokenizer.hpp"

namespace mstar {

struct ModelConfig {
  int D = 128;        // vision-encoder width
  int d = 64;         // shared embedding width
  int patch = 8;      // pixels per patch side
  int Q = 16;         // learnable query tokens
  int T = 1;          // progressive-embedding steps
  int psi_blocks = 4;
  int heads = 4;
  int phi_blocks = 1;
  int ffn_mult = 2;
  int base_res = 64;       // resolution the positional grid is stored at
  int max_text_len = 64;
  double alpha = 1.5;            // contrastive t2v weight
  double temperature_init = 0.07;
  SigmaConfig sigma;
  bool instructions_on = true;
  bool mim_on = true;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  void validate() const;
};

// Per-graph view of the parameters: leaves are created on first use so frozen
// or unused tensors never enter the tape with gradients enabled.
struct Binds {
  Graph* g = nullptr;
  bool train = false;
  std::set<std::string> frozen_prefixes;
  std::map<std::string, NodeP> leaves;
};

struct VisionStep {
  NodeP e;           // Q x d embeddings for this step
  AttentionMap cmap; // mean cross-attention map on the patch grid
};

struct PveTrace {
  std::vector<AttentionMap> maps;   // C_0 .. C_T
  std::vector<BinaryMask> masks;    // M_0 .. M_{T-1} (attention permission)
  int degenerate_mask_steps = 0;    // steps where the mask was all-zero
};

struct PveOut {
  NodeP ev;  // (T+1)*Q x d slots, step t at rows [t*Q, (t+1)*Q)
  PveTrace trace;
};

// Cross-attention keys/values of psi for one image, computed once per graph
// and shared between the vision pass and every joint-mode (ITM) pass.
struct KvCache {
  std::vector<std::pair<NodeP, NodeP>> per_block;  // (k, v) per psi block
};

class Model {
 public:
  Model(const ModelConfig& cfg, uint64_t seed);              // fresh init
  Model(const ModelConfig& cfg, ParamMap params);            // from checkpoint

  const ModelConfig& config() const { return cfg_; }
  ParamMap& params() { return params_; }
  const ParamMap& params() const { return params_; }
  uint64_t fingerprint() const { return model_fingerprint(cfg_.to_json(), params_); }

  Binds bind(Graph& g, bool train, std::set<std::string> frozen_prefixes = {}) const;
  NodeP param(Binds& b, const std::string& name) const;
  // Gradients of every bound trainable leaf, keyed by tensor name.
  std::map<std::string, Mat> collect_grads(const Binds& b) const;

  // Raster -> L x (patch*patch*3) rows of [0,1] pixel values, row-major grid.
  Mat patchify(const Image& img) const;

  // phi: patch embedding + interpolated positional grid + transformer blocks.
  NodeP encode_image(Binds& b, const Image& img) const;
  // Two-layer MLP aligning width D to d.
  NodeP project(Binds& b, const NodeP& f) const;

  KvCache make_kv(Binds& b, const NodeP& f_d) const;
  // psi vision mode: learnable queries cross-attend to the patch features.
  VisionStep embed_vision(Binds& b, const KvCache& kv, int grid_rows, int grid_cols) const;
  // psi text mode: instruction-prefixed stream, embedding read at SUM.
  NodeP encode_text(Binds& b, QueryStyle style, const std::string& query) const;
  // psi joint mode: text tokens also cross-attend to image features; returns
  // (mismatch, match) logits pooled over the query-character outputs.
  NodeP itm_logits(Binds& b, const KvCache& kv, QueryStyle style,
                   const std::string& query) const;

  // Defined with the progressive-embedding code: masked self-attention with a
  // key bias at M=0, and the T-step embed loop.
  NodeP salient_attention_shift(Binds& b, const NodeP& f_d, const BinaryMask& m,
                                int* degenerate_counter = nullptr) const;
  // kv0, when supplied, must be make_kv of f_d and is reused for step 0 so ITM
  // passes over the same image can share it.
  PveOut progressive_embed(Binds& b, const NodeP& f_d, int grid_rows, int grid_cols, int T,
                           const KvCache* kv0 = nullptr) const;

  // Defined with the matching code: one cross-attention layer + FFN over the
  // (normalized) vision slots, queried by the multi-word embeddings.
  NodeP aggregate_multiword(Binds& b, const NodeP& e_m, const NodeP& ev) const;

 private:
  NodeP attn(Binds& b, const std::string& prefix, const NodeP& q_in, const NodeP& k_in,
             const NodeP& v_in, const Mat* key_bias, std::shared_ptr<Mat>* probs) const;
  NodeP ffn(Binds& b, const std::string& prefix, const NodeP& x) const;
  NodeP ln(Binds& b, const std::string& prefix, const NodeP& x) const;
  // Shared psi stack; kv == nullptr skips the cross-attention sublayer (text
  // mode). probs, when given, collects every cross-attention head's rows.
  NodeP psi_forward(Binds& b, NodeP x, const KvCache* kv,
                    std::vector<std::shared_ptr<Mat>>* probs) const;
  NodeP text_stream(Binds& b, QueryStyle style, const std::string& query, const KvCache* kv,
                    int* sum_pos, int* query_len) const;

  ModelConfig cfg_;
  ParamMap params_;
};

}  // namespace mstar
