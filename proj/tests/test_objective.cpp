// Training objective: contrastive identities against hand-rolled
// cross-entropy, ITM two-class loss, the score matrix's branch dispatch and
// home-column substitution, finite-difference gradients, and step_loss
// bookkeeping.
#include <cmath>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "mstar/mim.hpp"
#include "mstar/objective.hpp"

using namespace mstar;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig c;
  c.D = 16;
  c.d = 8;
  c.patch = 8;
  c.Q = 4;
  c.T = 1;
  c.psi_blocks = 2;
  c.heads = 2;
  c.phi_blocks = 1;
  c.ffn_mult = 2;
  c.base_res = 16;
  c.max_text_len = 32;
  return c;
}

Image pattern_image(int side, int shift) {
  Image im(side, side);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      uint8_t* p = im.at(x, y);
      p[0] = static_cast<uint8_t>((x * 7 + y * 13 + shift) % 256);
      p[1] = static_cast<uint8_t>((x * 31 + y * 3 + shift * 5) % 256);
      p[2] = static_cast<uint8_t>((x + y * 17 + shift * 11) % 256);
    }
  return im;
}

// Independent mean row-wise softmax cross-entropy.
double ce_rows_ref(const Mat& logits, const Mat& targets) {
  double total = 0;
  for (int r = 0; r < logits.rows; ++r) {
    double mx = logits(r, 0);
    for (int j = 1; j < logits.cols; ++j) mx = std::max(mx, logits(r, j));
    double z = 0;
    for (int j = 0; j < logits.cols; ++j) z += std::exp(logits(r, j) - mx);
    for (int j = 0; j < logits.cols; ++j)
      if (targets(r, j) != 0.0)
        total -= targets(r, j) * (logits(r, j) - mx - std::log(z));
  }
  return total / logits.rows;
}

double cos_rows(const Mat& a, int i, const Mat& b, int j) {
  double dot = 0, na = 0, nb = 0;
  for (int k = 0; k < a.cols; ++k) {
    dot += a(i, k) * b(j, k);
    na += a(i, k) * a(i, k);
    nb += b(j, k) * b(j, k);
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

TEST_CASE("a uniform two-by-two batch lands on the closed-form constant") {
  Graph g(false);
  NodeP scores = g.leaf(Mat(2, 2, 0.42));
  Mat s(1, 1);
  s(0, 0) = 0.7;
  NodeP ls = g.leaf(std::move(s));
  ContrastiveParts parts = contrastive_loss(g, scores, {0, 1}, 1.5, ls);
  CHECK(parts.l_t2v->val(0, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(parts.l_v2t->val(0, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(parts.l_c->val(0, 0) == doctest::Approx(2.5 * std::log(2.0)).epsilon(1e-12));
  CHECK(parts.l_c->val(0, 0) == doctest::Approx(1.7329).epsilon(1e-3));
}

TEST_CASE("contrastive parts match a hand computation with multi-hot columns") {
  Mat raw(3, 2);
  raw(0, 0) = 0.9;
  raw(0, 1) = -0.2;
  raw(1, 0) = 0.1;
  raw(1, 1) = 0.6;
  raw(2, 0) = 0.5;
  raw(2, 1) = 0.4;
  const std::vector<int> pos = {0, 1, 0};
  const double lsv = 0.3, alpha = 1.5;
  Graph g(false);
  Mat s(1, 1);
  s(0, 0) = lsv;
  ContrastiveParts parts = contrastive_loss(g, g.leaf(raw), pos, alpha, g.leaf(std::move(s)));

  Mat scaled = raw;
  for (double& v : scaled.a) v *= std::exp(lsv);
  Mat t2v(3, 2);
  for (int r = 0; r < 3; ++r) t2v(r, pos[static_cast<size_t>(r)]) = 1.0;
  Mat scaled_t(2, 3), v2t(2, 3);
  for (int r = 0; r < 3; ++r)
    for (int j = 0; j < 2; ++j) scaled_t(j, r) = scaled(r, j);
  v2t(0, 0) = 0.5;
  v2t(0, 2) = 0.5;  // image 0 owns rows 0 and 2
  v2t(1, 1) = 1.0;
  const double want_t2v = ce_rows_ref(scaled, t2v);
  const double want_v2t = ce_rows_ref(scaled_t, v2t);
  CHECK(parts.l_t2v->val(0, 0) == doctest::Approx(want_t2v).epsilon(1e-12));
  CHECK(parts.l_v2t->val(0, 0) == doctest::Approx(want_v2t).epsilon(1e-12));
  CHECK(parts.l_c->val(0, 0) ==
        doctest::Approx(alpha * want_t2v + want_v2t).epsilon(1e-12));
}

TEST_CASE("contrastive loss is invariant to a constant score shift") {
  Rng rng(501);
  Mat raw(4, 3);
  for (double& v : raw.a) v = rng.uniform(-1.0, 1.0);
  const std::vector<int> pos = {0, 1, 2, 1};
  Mat s(1, 1);
  s(0, 0) = 0.9;
  Graph g(false);
  ContrastiveParts a = contrastive_loss(g, g.leaf(raw), pos, 1.5, g.leaf(s));
  Mat shifted = raw;
  for (double& v : shifted.a) v += 5.0;
  ContrastiveParts b = contrastive_loss(g, g.leaf(shifted), pos, 1.5, g.leaf(s));
  CHECK(a.l_t2v->val(0, 0) == doctest::Approx(b.l_t2v->val(0, 0)).epsilon(1e-10));
  CHECK(a.l_v2t->val(0, 0) == doctest::Approx(b.l_v2t->val(0, 0)).epsilon(1e-10));
}

TEST_CASE("well-separated scores drive the contrastive loss to zero") {
  Mat raw(2, 2);
  raw(0, 0) = 10.0;
  raw(0, 1) = -10.0;
  raw(1, 0) = -10.0;
  raw(1, 1) = 10.0;
  Graph g(false);
  ContrastiveParts parts = contrastive_loss(g, g.leaf(raw), {0, 1}, 1.5, g.leaf(Mat(1, 1)));
  CHECK(parts.l_c->val(0, 0) < 1e-6);
}

TEST_CASE("contrastive loss validates its inputs") {
  Graph g(false);
  NodeP ok = g.leaf(Mat(2, 2, 0.1));
  NodeP ls = g.leaf(Mat(1, 1));
  CHECK_THROWS_AS(contrastive_loss(g, ok, {0}, 1.5, ls), std::invalid_argument);
  CHECK_THROWS_AS(contrastive_loss(g, ok, {0, 2}, 1.5, ls), std::invalid_argument);
  // both positives on image 0 leaves image 1 without a positive query
  CHECK_THROWS_AS(contrastive_loss(g, ok, {0, 0}, 1.5, ls), std::invalid_argument);
  CHECK_THROWS_AS(contrastive_loss(g, ok, {0, 1}, 1.5, g.leaf(Mat(1, 2))),
                  std::invalid_argument);
}

TEST_CASE("contrastive gradients agree with finite differences") {
  Mat raw(3, 2);
  Rng rng(502);
  for (double& v : raw.a) v = rng.uniform(-1.0, 1.0);
  const std::vector<int> pos = {0, 1, 1};
  const double lsv = 0.4;

  auto value = [&](const Mat& sc, double ls) {
    Graph g(false);
    Mat s(1, 1);
    s(0, 0) = ls;
    return contrastive_loss(g, g.leaf(sc), pos, 1.5, g.leaf(std::move(s)))
        .l_c->val(0, 0);
  };

  Graph g;
  NodeP leaf = g.leaf(raw, true);
  Mat s(1, 1);
  s(0, 0) = lsv;
  NodeP ls = g.leaf(std::move(s), true);
  g.backward(contrastive_loss(g, leaf, pos, 1.5, ls).l_c);

  const double h = 1e-6;
  for (size_t i = 0; i < raw.a.size(); ++i) {
    Mat xp = raw, xm = raw;
    xp.a[i] += h;
    xm.a[i] -= h;
    const double fd = (value(xp, lsv) - value(xm, lsv)) / (2 * h);
    CHECK(leaf->grad.a[i] == doctest::Approx(fd).epsilon(1e-6));
  }
  const double fd_ls = (value(raw, lsv + h) - value(raw, lsv - h)) / (2 * h);
  CHECK(ls->grad(0, 0) == doctest::Approx(fd_ls).epsilon(1e-6));
}

TEST_CASE("itm_ce covers the saturated, uniform, and hand-computed cases") {
  Graph g(false);
  Mat sep(1, 2);
  sep(0, 0) = -20.0;
  sep(0, 1) = 20.0;
  CHECK(itm_ce(g, g.leaf(sep), {1})->val(0, 0) < 1e-8);
  CHECK(itm_ce(g, g.leaf(sep), {0})->val(0, 0) == doctest::Approx(40.0).epsilon(1e-6));
  CHECK(itm_ce(g, g.leaf(Mat(1, 2)), {0})->val(0, 0) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  Mat three(3, 2);
  three(0, 0) = 0.3;
  three(0, 1) = -0.1;
  three(1, 0) = -2.0;
  three(1, 1) = 1.0;
  three(2, 0) = 0.0;
  three(2, 1) = 0.5;
  const std::vector<int> labels = {1, 0, 1};
  Mat targets(3, 2);
  for (int i = 0; i < 3; ++i) targets(i, labels[static_cast<size_t>(i)]) = 1.0;
  CHECK(itm_ce(g, g.leaf(three), labels)->val(0, 0) ==
        doctest::Approx(ce_rows_ref(three, targets)).epsilon(1e-12));

  CHECK_THROWS_AS(itm_ce(g, g.leaf(Mat(0, 2)), {}), std::invalid_argument);
  CHECK_THROWS_AS(itm_ce(g, g.leaf(Mat(1, 3)), {0}), std::invalid_argument);
  CHECK_THROWS_AS(itm_ce(g, g.leaf(Mat(2, 2)), {0}), std::invalid_argument);
  CHECK_THROWS_AS(itm_ce(g, g.leaf(Mat(1, 2)), {2}), std::invalid_argument);
}

TEST_CASE("itm_ce gradients agree with finite differences") {
  Mat raw(3, 2);
  Rng rng(503);
  for (double& v : raw.a) v = rng.uniform(-2.0, 2.0);
  const std::vector<int> labels = {1, 0, 1};
  auto value = [&](const Mat& l) {
    Graph g(false);
    return itm_ce(g, g.leaf(l), labels)->val(0, 0);
  };
  Graph g;
  NodeP leaf = g.leaf(raw, true);
  g.backward(itm_ce(g, leaf, labels));
  const double h = 1e-6;
  for (size_t i = 0; i < raw.a.size(); ++i) {
    Mat xp = raw, xm = raw;
    xp.a[i] += h;
    xm.a[i] -= h;
    CHECK(leaf->grad.a[i] ==
          doctest::Approx((value(xp) - value(xm)) / (2 * h)).epsilon(1e-6));
  }
}

TEST_CASE("forward_image produces the slot stack and validates alignment") {
  const ModelConfig c = tiny_cfg();
  Model m(c, 41);
  Graph g(false);
  Binds b = m.bind(g, false);
  ImagePass ip = forward_image(m, b, pattern_image(16, 0));
  CHECK(ip.ev->val.rows == (c.T + 1) * c.Q);
  CHECK(ip.ev->val.cols == c.d);
  CHECK(ip.kv.per_block.size() == static_cast<size_t>(c.psi_blocks));
  CHECK(ip.trace.maps.size() == static_cast<size_t>(c.T + 1));
  Image off(20, 20);
  CHECK_THROWS_AS(forward_image(m, b, off), std::invalid_argument);
}

TEST_CASE("batch_scores dispatches branches and substitutes the home column") {
  const ModelConfig c = tiny_cfg();
  Model m(c, 43);
  Graph g(false);
  Binds b = m.bind(g, false);
  std::vector<ImagePass> images;
  images.push_back(forward_image(m, b, pattern_image(16, 0)));
  images.push_back(forward_image(m, b, pattern_image(16, 90)));

  const std::vector<BatchQuery> queries = {
      {QueryStyle::word, "cat", 0},        {QueryStyle::word, "dog", 0},
      {QueryStyle::word, "owl", 1},        {QueryStyle::semantic, "a sign that says cat", 0},
      {QueryStyle::phrase, "red cat", 1},  {QueryStyle::combined, "dog owl", 1},
  };
  BatchScores bs = batch_scores(m, b, queries, images);
  REQUIRE(bs.scores->val.rows == 6);
  REQUIRE(bs.scores->val.cols == 2);
  CHECK(bs.positive == std::vector<int>{0, 0, 1, 0, 1, 1});

  // reproduce the expected cells from the public pieces
  std::vector<int> wrows, mrows;
  for (int r = 0; r < 6; ++r)
    (multiword_style(queries[static_cast<size_t>(r)].style) ? mrows : wrows).push_back(r);
  REQUIRE(wrows == std::vector<int>{0, 1, 2, 3});
  REQUIRE(mrows == std::vector<int>{4, 5});

  Mat we(4, c.d), me(2, c.d);
  for (size_t l = 0; l < wrows.size(); ++l) {
    const BatchQuery& q = queries[static_cast<size_t>(wrows[l])];
    const Mat e = m.encode_text(b, q.style, q.text)->val;
    for (int k = 0; k < c.d; ++k) we(static_cast<int>(l), k) = e(0, k);
  }
  for (size_t l = 0; l < mrows.size(); ++l) {
    const BatchQuery& q = queries[static_cast<size_t>(mrows[l])];
    const Mat e = m.encode_text(b, q.style, q.text)->val;
    for (int k = 0; k < c.d; ++k) me(static_cast<int>(l), k) = e(0, k);
  }

  for (int j = 0; j < 2; ++j) {
    const Mat cosm = mim::cosine_matrix(we, images[static_cast<size_t>(j)].ev->val);
    std::vector<int> local;
    for (size_t l = 0; l < wrows.size(); ++l)
      if (queries[static_cast<size_t>(wrows[l])].positive == j)
        local.push_back(static_cast<int>(l));
    std::vector<int> assigned(wrows.size(), -1);
    if (!local.empty()) {
      Mat sub(static_cast<int>(local.size()), cosm.cols);
      for (int i = 0; i < sub.rows; ++i)
        for (int k = 0; k < sub.cols; ++k) sub(i, k) = cosm(local[static_cast<size_t>(i)], k);
      const mim::Assignment asg = mim::hungarian_assign(mim::pad_square(sub), sub.rows);
      for (const auto& [row, col] : asg.pairs) assigned[static_cast<size_t>(local[static_cast<size_t>(row)])] = col;
    }
    for (size_t l = 0; l < wrows.size(); ++l) {
      double want;
      if (assigned[l] >= 0) {
        want = cosm(static_cast<int>(l), assigned[l]);
      } else {
        want = -2;
        for (int k = 0; k < cosm.cols; ++k) want = std::max(want, cosm(static_cast<int>(l), k));
      }
      CHECK(bs.scores->val(wrows[l], j) == doctest::Approx(want).epsilon(1e-12));
    }
    // aggregation branch: cos(aggregated query view, raw text embedding)
    Graph g2(false);
    Binds b2 = m.bind(g2, false);
    const Mat agg =
        m.aggregate_multiword(b2, g2.leaf(me), g2.leaf(images[static_cast<size_t>(j)].ev->val))
            ->val;
    for (size_t l = 0; l < mrows.size(); ++l)
      CHECK(bs.scores->val(mrows[l], j) ==
            doctest::Approx(cos_rows(agg, static_cast<int>(l), me, static_cast<int>(l)))
                .epsilon(1e-12));
  }

  CHECK_THROWS_AS(batch_scores(m, b, {}, images), std::invalid_argument);
  CHECK_THROWS_AS(batch_scores(m, b, {{QueryStyle::word, "cat", 2}}, images),
                  std::invalid_argument);
}

TEST_CASE("disabling the matching branch scores against mean-pooled slots") {
  ModelConfig c = tiny_cfg();
  c.mim_on = false;
  Model m(c, 47);
  Graph g(false);
  Binds b = m.bind(g, false);
  std::vector<ImagePass> images;
  images.push_back(forward_image(m, b, pattern_image(16, 3)));
  const std::vector<BatchQuery> queries = {{QueryStyle::word, "cat", 0},
                                           {QueryStyle::combined, "dog owl", 0}};
  BatchScores bs = batch_scores(m, b, queries, images);
  const Mat& ev = images[0].ev->val;
  Mat pooled(1, c.d);
  for (int r = 0; r < ev.rows; ++r)
    for (int k = 0; k < c.d; ++k) pooled(0, k) += ev(r, k) / ev.rows;
  for (int r = 0; r < 2; ++r) {
    const Mat e = m.encode_text(b, queries[static_cast<size_t>(r)].style,
                                queries[static_cast<size_t>(r)].text)
                      ->val;
    CHECK(bs.scores->val(r, 0) == doctest::Approx(cos_rows(e, 0, pooled, 0)).epsilon(1e-12));
  }
}

TEST_CASE("step_loss totals add up, stay deterministic, and reach every tower") {
  const ModelConfig c = tiny_cfg();
  Model m(c, 53);
  std::vector<BatchQuery> queries = {{QueryStyle::word, "cat", 0},
                                     {QueryStyle::word, "dog", 1},
                                     {QueryStyle::combined, "cat dog", 0},
                                     {QueryStyle::phrase, "big owl", 1}};
  LossBreakdown first;
  for (int rep = 0; rep < 2; ++rep) {
    Graph g;
    Binds b = m.bind(g, true);
    std::vector<ImagePass> images;
    images.push_back(forward_image(m, b, pattern_image(16, 1)));
    images.push_back(forward_image(m, b, pattern_image(16, 2)));
    Rng rng(99);
    StepLoss sl = step_loss(m, b, queries, images, rng);
    CHECK(sl.values.total == sl.values.l_c + sl.values.l_m);
    CHECK(sl.values.l_c == sl.values.alpha * sl.values.l_t2v + sl.values.l_v2t);
    CHECK(sl.values.alpha == c.alpha);
    CHECK(std::isfinite(sl.values.total));
    CHECK(sl.values.l_m > 0.0);
    if (rep == 0) {
      first = sl.values;
      g.backward(sl.total);
      const auto grads = m.collect_grads(b);
      CHECK(grads.count("logit_scale") == 1);
      CHECK(grads.count("phi.patch.W") == 1);
      CHECK(grads.count("tok.embed") == 1);
      CHECK(grads.count("itm.W") == 1);
      CHECK(grads.count("psi.queries") == 1);
      CHECK(grads.count("mim.attn.Wq") == 1);
    } else {
      CHECK(sl.values.total == first.total);
      CHECK(sl.values.l_m == first.l_m);
    }
  }

  // a single-image batch skips the mismatch pairs but still trains
  Graph g;
  Binds b = m.bind(g, true);
  std::vector<ImagePass> one;
  one.push_back(forward_image(m, b, pattern_image(16, 4)));
  std::vector<BatchQuery> q1 = {{QueryStyle::word, "cat", 0}, {QueryStyle::word, "dog", 0}};
  Rng rng(1);
  StepLoss sl = step_loss(m, b, q1, one, rng);
  CHECK(std::isfinite(sl.values.total));
  CHECK(sl.values.l_m > 0.0);
}
