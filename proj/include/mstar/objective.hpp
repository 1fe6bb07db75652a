// Training objective: the batch score matrix (per-branch query-vs-image
// scores), the dual contrastive loss with alpha-weighting, the two-class
// matching loss over positives plus sampled hard negatives, and their sum.
#pragma once

#include <string>
#include <vector>

#include "mstar/encoders.hpp"

namespace mstar {

struct LossBreakdown {
  double l_t2v = 0.0;
  double l_v2t = 0.0;
  double l_c = 0.0;
  double l_m = 0.0;
  double total = 0.0;
  double alpha = 0.0;
};

// One text row of the batch; positive is its home image index. The style
// picks the scoring branch (multiword_style -> aggregation).
struct BatchQuery {
  QueryStyle style = QueryStyle::word;
  std::string text;
  int positive = 0;
};

// Per-image forward products shared by the score matrix and the ITM passes.
struct ImagePass {
  KvCache kv;
  NodeP ev;  // (T+1)*Q x d slots
  PveTrace trace;
};

ImagePass forward_image(const Model& m, Binds& b, const Image& img);

struct BatchScores {
  NodeP scores;               // R x B
  std::vector<int> positive;  // per row
};

// Word rows score every image by max-over-slot cosine, with the per-image
// Hungarian-assigned cosine substituted at the home column; multi-item rows
// score cos(aggregated, text) per image. With the matching branch disabled
// every row scores against the mean-pooled slots instead.
BatchScores batch_scores(const Model& m, Binds& b, const std::vector<BatchQuery>& queries,
                         const std::vector<ImagePass>& images);

struct ContrastiveParts {
  NodeP l_t2v;
  NodeP l_v2t;
  NodeP l_c;
};

// scaled = scores * exp(logit_scale); rows -> one-hot CE, columns -> the
// normalized multi-hot CE; l_c = alpha * l_t2v + l_v2t.
ContrastiveParts contrastive_loss(Graph& g, const NodeP& scores, const std::vector<int>& positive,
                                  double alpha, const NodeP& logit_scale);

// Mean two-class cross-entropy; logits columns are (mismatch, match) and
// labels[i] is the correct column. Errors on an empty batch.
NodeP itm_ce(Graph& g, const NodeP& logits, const std::vector<int>& labels);

struct StepLoss {
  NodeP total;  // 1x1
  LossBreakdown values;
};

// Full objective for one batch: contrastive over batch_scores plus ITM over
// one positive and one hard negative per row. The negative query for a row's
// home image is drawn from rows of other images proportionally to the
// softmaxed scaled column scores; rng drives only that draw.
StepLoss step_loss(const Model& m, Binds& b, const std::vector<BatchQuery>& queries,
                   const std::vector<ImagePass>& images, Rng& rng);

}  // namespace mstar
