#include "mstar/encoders.hpp"

#include <cmath>
#include <stdexcept>

namespace mstar {

nlohmann::json ModelConfig::to_json() const {
  return {{"D", D},
          {"d", d},
          {"patch", patch},
          {"Q", Q},
          {"T", T},
          {"psi_blocks", psi_blocks},
          {"heads", heads},
          {"phi_blocks", phi_blocks},
          {"ffn_mult", ffn_mult},
          {"base_res", base_res},
          {"max_text_len", max_text_len},
          {"alpha", alpha},
          {"temperature_init", temperature_init},
          {"sigma",
           {{"low_threshold", sigma.low_threshold},
            {"marker_threshold", sigma.marker_threshold},
            {"min_component_area", sigma.min_component_area}}},
          {"instructions_on", instructions_on},
          {"mim_on", mim_on},
          {"alphabet", "ascii32-126+sum"}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  const std::set<std::string> known = {
      "D",        "d",          "patch",        "Q",           "T",
      "psi_blocks", "heads",    "phi_blocks",   "ffn_mult",    "base_res",
      "max_text_len", "alpha",  "temperature_init", "sigma",   "instructions_on",
      "mim_on",   "alphabet"};
  for (const auto& [key, val] : j.items()) {
    (void)val;
    if (!known.count(key))
      throw std::invalid_argument("ModelConfig: unknown key '" + key + "'");
  }
  c.D = j.value("D", c.D);
  c.d = j.value("d", c.d);
  c.patch = j.value("patch", c.patch);
  c.Q = j.value("Q", c.Q);
  c.T = j.value("T", c.T);
  c.psi_blocks = j.value("psi_blocks", c.psi_blocks);
  c.heads = j.value("heads", c.heads);
  c.phi_blocks = j.value("phi_blocks", c.phi_blocks);
  c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
  c.base_res = j.value("base_res", c.base_res);
  c.max_text_len = j.value("max_text_len", c.max_text_len);
  c.alpha = j.value("alpha", c.alpha);
  c.temperature_init = j.value("temperature_init", c.temperature_init);
  if (j.contains("sigma")) {
    const auto& s = j.at("sigma");
    c.sigma.low_threshold = s.value("low_threshold", c.sigma.low_threshold);
    c.sigma.marker_threshold = s.value("marker_threshold", c.sigma.marker_threshold);
    c.sigma.min_component_area = s.value("min_component_area", c.sigma.min_component_area);
  }
  c.instructions_on = j.value("instructions_on", c.instructions_on);
  c.mim_on = j.value("mim_on", c.mim_on);
  c.validate();
  return c;
}

void ModelConfig::validate() const {
  if (D < 1 || d < 1 || patch < 1 || Q < 1 || T < 0 || psi_blocks < 1 || heads < 1 ||
      phi_blocks < 1 || ffn_mult < 1)
    throw std::invalid_argument("ModelConfig: non-positive dimension");
  if (D % heads != 0 || d % heads != 0)
    throw std::invalid_argument("ModelConfig: widths must divide the head count");
  if (base_res % patch != 0)
    throw std::invalid_argument("ModelConfig: base_res must be divisible by patch");
  if (max_text_len < 8) throw std::invalid_argument("ModelConfig: max_text_len too small");
  if (alpha <= 0 || temperature_init <= 0)
    throw std::invalid_argument("ModelConfig: alpha and temperature_init must be positive");
  sigma.validate();
}

namespace {

enum class Init { weight, bias, ln_gain, scalar_ln_inv_temp };

}  // namespace

Model::Model(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const double sd = 0.02;
  auto put = [&](const std::string& name, int r, int c, Init kind) {
    switch (kind) {
      case Init::weight:
        params_.emplace(name, randn(r, c, sd, rng));
        break;
      case Init::bias:
        params_.emplace(name, Mat(r, c));
        break;
      case Init::ln_gain:
        params_.emplace(name, Mat(r, c, 1.0));
        break;
      case Init::scalar_ln_inv_temp: {
        Mat m(1, 1);
        m(0, 0) = std::log(1.0 / cfg_.temperature_init);
        params_.emplace(name, std::move(m));
        break;
      }
    }
  };
  auto put_ln = [&](const std::string& prefix, int w) {
    put(prefix + ".g", 1, w, Init::ln_gain);
    put(prefix + ".b", 1, w, Init::bias);
  };
  auto put_attn = [&](const std::string& prefix, int w) {
    for (const char* n : {"Wq", "Wk", "Wv", "Wo"}) put(prefix + "." + n, w, w, Init::weight);
    for (const char* n : {"bq", "bk", "bv", "bo"}) put(prefix + "." + n, 1, w, Init::bias);
  };
  auto put_ffn = [&](const std::string& prefix, int w) {
    put(prefix + ".W1", w, w * cfg_.ffn_mult, Init::weight);
    put(prefix + ".b1", 1, w * cfg_.ffn_mult, Init::bias);
    put(prefix + ".W2", w * cfg_.ffn_mult, w, Init::weight);
    put(prefix + ".b2", 1, w, Init::bias);
  };

  const int L0 = (cfg_.base_res / cfg_.patch) * (cfg_.base_res / cfg_.patch);
  put("phi.patch.W", cfg_.patch * cfg_.patch * 3, cfg_.D, Init::weight);
  put("phi.patch.b", 1, cfg_.D, Init::bias);
  put("phi.pos", L0, cfg_.D, Init::weight);
  for (int i = 0; i < cfg_.phi_blocks; ++i) {
    const std::string p = "phi.b" + std::to_string(i);
    put_ln(p + ".ln1", cfg_.D);
    put_attn(p + ".attn", cfg_.D);
    put_ln(p + ".ln2", cfg_.D);
    put_ffn(p + ".ffn", cfg_.D);
  }
  put_ln("phi.ln_f", cfg_.D);

  put("proj.W1", cfg_.D, cfg_.D, Init::weight);
  put("proj.b1", 1, cfg_.D, Init::bias);
  put("proj.W2", cfg_.D, cfg_.d, Init::weight);
  put("proj.b2", 1, cfg_.d, Init::bias);

  put("psi.queries", cfg_.Q, cfg_.d, Init::weight);
  for (int i = 0; i < cfg_.psi_blocks; ++i) {
    const std::string p = "psi.b" + std::to_string(i);
    put_ln(p + ".ln1", cfg_.d);
    put_attn(p + ".self", cfg_.d);
    put_ln(p + ".ln_x", cfg_.d);
    put_ln(p + ".ln_kv", cfg_.d);
    put_attn(p + ".cross", cfg_.d);
    put_ln(p + ".ln2", cfg_.d);
    put_ffn(p + ".ffn", cfg_.d);
  }
  put_ln("psi.ln_f", cfg_.d);

  put("tok.embed", tokenizer::kVocabSize, cfg_.d, Init::weight);
  put("tok.pos", cfg_.max_text_len, cfg_.d, Init::weight);
  put("itm.W", cfg_.d, 2, Init::weight);
  put("itm.b", 1, 2, Init::bias);

  put_ln("sas.ln", cfg_.d);
  put_attn("sas.attn", cfg_.d);

  put_ln("mim.ln_q", cfg_.d);
  put_attn("mim.attn", cfg_.d);
  put_ln("mim.ln_ffn", cfg_.d);
  put_ffn("mim.ffn", cfg_.d);

  put("logit_scale", 1, 1, Init::scalar_ln_inv_temp);
}

Model::Model(const ModelConfig& cfg, ParamMap params) : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
  // Sanity: a fresh model with the same config must have the same tensor set.
  Model fresh(cfg_, 0);
  if (fresh.params_.size() != params_.size())
    throw std::invalid_argument("Model: checkpoint tensor set does not match config");
  for (const auto& [name, t] : fresh.params_) {
    auto it = params_.find(name);
    if (it == params_.end() || !it->second.same_shape(t))
      throw std::invalid_argument("Model: checkpoint tensor missing or misshapen: " + name);
  }
}

Binds Model::bind(Graph& g, bool train, std::set<std::string> frozen_prefixes) const {
  Binds b;
  b.g = &g;
  b.train = train;
  b.frozen_prefixes = std::move(frozen_prefixes);
  return b;
}

NodeP Model::param(Binds& b, const std::string& name) const {
  auto it = b.leaves.find(name);
  if (it != b.leaves.end()) return it->second;
  auto pit = params_.find(name);
  if (pit == params_.end()) throw std::logic_error("Model: unknown parameter " + name);
  bool frozen = false;
  for (const std::string& pre : b.frozen_prefixes)
    if (name.rfind(pre, 0) == 0) frozen = true;
  NodeP leaf = b.g->leaf(pit->second, b.train && !frozen);
  b.leaves.emplace(name, leaf);
  return leaf;
}

std::map<std::string, Mat> Model::collect_grads(const Binds& b) const {
  std::map<std::string, Mat> out;
  for (const auto& [name, leaf] : b.leaves)
    if (leaf->needs_grad && !leaf->grad.empty()) out.emplace(name, leaf->grad);
  return out;
}

Mat Model::patchify(const Image& img) const {
  const int p = cfg_.patch;
  if (img.w <= 0 || img.h <= 0 || img.w % p != 0 || img.h % p != 0)
    throw std::invalid_argument("patchify: image dimensions must be divisible by patch size");
  const int gr = img.h / p, gc = img.w / p;
  // Per-image channel standardization: solid-background patches map to the
  // zero vector, so the embedding is driven by rendered content instead of a
  // shared background direction. The floor keeps flat images from amplifying
  // sensor-level jitter.
  constexpr double kPixSdFloor = 0.05;
  double mean[3] = {0, 0, 0}, var[3] = {0, 0, 0};
  const double npx = static_cast<double>(img.w) * img.h;
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      const uint8_t* pix = img.at(x, y);
      for (int c = 0; c < 3; ++c) mean[c] += pix[c] / 255.0;
    }
  for (int c = 0; c < 3; ++c) mean[c] /= npx;
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      const uint8_t* pix = img.at(x, y);
      for (int c = 0; c < 3; ++c) {
        const double dv = pix[c] / 255.0 - mean[c];
        var[c] += dv * dv;
      }
    }
  double sd[3];
  for (int c = 0; c < 3; ++c) sd[c] = std::max(std::sqrt(var[c] / npx), kPixSdFloor);

  Mat out(gr * gc, p * p * 3);
  for (int pr = 0; pr < gr; ++pr)
    for (int pc = 0; pc < gc; ++pc) {
      double* row = out.row(pr * gc + pc);
      int k = 0;
      for (int py = 0; py < p; ++py)
        for (int px = 0; px < p; ++px) {
          const uint8_t* pix = img.at(pc * p + px, pr * p + py);
          for (int c = 0; c < 3; ++c) row[k++] = (pix[c] / 255.0 - mean[c]) / sd[c];
        }
    }
  return out;
}

NodeP Model::ln(Binds& b, const std::string& prefix, const NodeP& x) const {
  return ops::layer_norm(*b.g, x, param(b, prefix + ".g"), param(b, prefix + ".b"));
}

NodeP Model::ffn(Binds& b, const std::string& prefix, const NodeP& x) const {
  Graph& g = *b.g;
  NodeP h = ops::add_rowvec(g, ops::matmul(g, x, param(b, prefix + ".W1")),
                            param(b, prefix + ".b1"));
  h = ops::gelu(g, h);
  return ops::add_rowvec(g, ops::matmul(g, h, param(b, prefix + ".W2")),
                         param(b, prefix + ".b2"));
}

NodeP Model::attn(Binds& b, const std::string& prefix, const NodeP& q_in, const NodeP& k_in,
                  const NodeP& v_in, const Mat* key_bias,
                  std::shared_ptr<Mat>* probs) const {
  Graph& g = *b.g;
  NodeP q = ops::add_rowvec(g, ops::matmul(g, q_in, param(b, prefix + ".Wq")),
                            param(b, prefix + ".bq"));
  NodeP k = k_in;
  NodeP v = v_in;
  auto out = ops::attention_core(g, q, k, v, cfg_.heads, key_bias);
  if (probs) *probs = out.probs;
  return ops::add_rowvec(g, ops::matmul(g, out.out, param(b, prefix + ".Wo")),
                         param(b, prefix + ".bo"));
}

NodeP Model::encode_image(Binds& b, const Image& img) const {
  Graph& g = *b.g;
  const int p = cfg_.patch;
  const int gr = img.h / p, gc = img.w / p;
  NodeP x = g.leaf(patchify(img));
  x = ops::add_rowvec(g, ops::matmul(g, x, param(b, "phi.patch.W")), param(b, "phi.patch.b"));
  const int bg = cfg_.base_res / p;
  NodeP pos = param(b, "phi.pos");
  if (gr != bg || gc != bg) pos = ops::interp_grid(g, pos, bg, bg, gr, gc);
  x = ops::add(g, x, pos);
  for (int i = 0; i < cfg_.phi_blocks; ++i) {
    const std::string pre = "phi.b" + std::to_string(i);
    NodeP h = ln(b, pre + ".ln1", x);
    NodeP kk = ops::add_rowvec(g, ops::matmul(g, h, param(b, pre + ".attn.Wk")),
                               param(b, pre + ".attn.bk"));
    NodeP vv = ops::add_rowvec(g, ops::matmul(g, h, param(b, pre + ".attn.Wv")),
                               param(b, pre + ".attn.bv"));
    x = ops::add(g, x, attn(b, pre + ".attn", h, kk, vv, nullptr, nullptr));
    x = ops::add(g, x, ffn(b, pre + ".ffn", ln(b, pre + ".ln2", x)));
  }
  return ln(b, "phi.ln_f", x);
}

NodeP Model::project(Binds& b, const NodeP& f) const {
  Graph& g = *b.g;
  if (f->val.cols != cfg_.D) throw std::invalid_argument("project: input width mismatch");
  NodeP h =
      ops::add_rowvec(g, ops::matmul(g, f, param(b, "proj.W1")), param(b, "proj.b1"));
  h = ops::gelu(g, h);
  return ops::add_rowvec(g, ops::matmul(g, h, param(b, "proj.W2")), param(b, "proj.b2"));
}

KvCache Model::make_kv(Binds& b, const NodeP& f_d) const {
  Graph& g = *b.g;
  if (f_d->val.cols != cfg_.d) throw std::invalid_argument("make_kv: feature width mismatch");
  KvCache cache;
  for (int i = 0; i < cfg_.psi_blocks; ++i) {
    const std::string pre = "psi.b" + std::to_string(i);
    NodeP h = ln(b, pre + ".ln_kv", f_d);
    NodeP k = ops::add_rowvec(g, ops::matmul(g, h, param(b, pre + ".cross.Wk")),
                              param(b, pre + ".cross.bk"));
    NodeP v = ops::add_rowvec(g, ops::matmul(g, h, param(b, pre + ".cross.Wv")),
                              param(b, pre + ".cross.bv"));
    cache.per_block.emplace_back(k, v);
  }
  return cache;
}

NodeP Model::psi_forward(Binds& b, NodeP x, const KvCache* kv,
                         std::vector<std::shared_ptr<Mat>>* probs) const {
  Graph& g = *b.g;
  for (int i = 0; i < cfg_.psi_blocks; ++i) {
    const std::string pre = "psi.b" + std::to_string(i);
    NodeP h = ln(b, pre + ".ln1", x);
    NodeP kk = ops::add_rowvec(g, ops::matmul(g, h, param(b, pre + ".self.Wk")),
                               param(b, pre + ".self.bk"));
    NodeP vv = ops::add_rowvec(g, ops::matmul(g, h, param(b, pre + ".self.Wv")),
                               param(b, pre + ".self.bv"));
    x = ops::add(g, x, attn(b, pre + ".self", h, kk, vv, nullptr, nullptr));
    if (kv) {
      std::shared_ptr<Mat> pr;
      NodeP hx = ln(b, pre + ".ln_x", x);
      NodeP out = attn(b, pre + ".cross", hx, kv->per_block[i].first,
                       kv->per_block[i].second, nullptr, probs ? &pr : nullptr);
      if (probs) probs->push_back(pr);
      x = ops::add(g, x, out);
    }
    x = ops::add(g, x, ffn(b, pre + ".ffn", ln(b, pre + ".ln2", x)));
  }
  return ln(b, "psi.ln_f", x);
}

VisionStep Model::embed_vision(Binds& b, const KvCache& kv, int grid_rows,
                               int grid_cols) const {
  std::vector<std::shared_ptr<Mat>> probs;
  NodeP x = psi_forward(b, param(b, "psi.queries"), &kv, &probs);
  const int L = grid_rows * grid_cols;
  VisionStep out;
  out.e = x;
  out.cmap.grid = Mat(grid_rows, grid_cols);
  long rows_total = 0;
  for (const auto& p : probs) {
    if (p->cols != L) throw std::logic_error("embed_vision: attention width mismatch");
    for (int r = 0; r < p->rows; ++r) {
      const double* row = p->row(r);
      for (int j = 0; j < L; ++j) out.cmap.grid.a[j] += row[j];
    }
    rows_total += p->rows;
  }
  for (double& v : out.cmap.grid.a) v /= static_cast<double>(rows_total);
  return out;
}

NodeP Model::text_stream(Binds& b, QueryStyle style, const std::string& query,
                         const KvCache* kv, int* sum_pos, int* query_len) const {
  Graph& g = *b.g;
  const std::string instr = tokenizer::instruction_for(style, cfg_.instructions_on);
  int sp = 0;
  const std::vector<int> ids = tokenizer::encode(instr, query, &sp);
  if (static_cast<int>(ids.size()) > cfg_.max_text_len)
    throw std::invalid_argument("text_stream: stream longer than max_text_len");
  if (sum_pos) *sum_pos = sp;
  if (query_len) *query_len = static_cast<int>(query.size());
  NodeP x = ops::gather_rows(g, param(b, "tok.embed"), ids);
  NodeP pos = ops::slice_rows(g, param(b, "tok.pos"), 0, static_cast<int>(ids.size()));
  x = ops::add(g, x, pos);
  return psi_forward(b, x, kv, nullptr);
}

NodeP Model::encode_text(Binds& b, QueryStyle style, const std::string& query) const {
  int sp = 0;
  NodeP x = text_stream(b, style, query, nullptr, &sp, nullptr);
  return ops::slice_rows(*b.g, x, sp, 1);
}

NodeP Model::itm_logits(Binds& b, const KvCache& kv, QueryStyle style,
                        const std::string& query) const {
  Graph& g = *b.g;
  int sp = 0, qlen = 0;
  NodeP x = text_stream(b, style, query, &kv, &sp, &qlen);
  NodeP pooled = ops::mean_rows(g, ops::slice_rows(g, x, sp + 1, qlen));
  return ops::add_rowvec(g, ops::matmul(g, pooled, param(b, "itm.W")), param(b, "itm.b"));
}

}  // namespace mstar
