// Training loop. All randomness (init, batch order, query picks, negative
// draws) flows from the config seed, so a (config, data) pair replays to the
// same metrics file byte for byte.
#include "mstar/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>

namespace mstar {

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json stages_j = nlohmann::json::array();
  for (const StageConfig& s : stages)
    stages_j.push_back({{"resolution", s.resolution},
                        {"lr", s.lr},
                        {"warmup", s.warmup},
                        {"steps", s.steps},
                        {"freeze_vision", s.freeze_vision}});
  return {{"model", model.to_json()},
          {"train",
           {{"stages", stages_j},
            {"batch_size", batch_size},
            {"queries_per_image", queries_per_image},
            {"word_anchor", word_anchor},
            {"weight_decay", weight_decay},
            {"seed", seed}}}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  for (const auto& [key, val] : j.items()) {
    (void)val;
    if (key != "model" && key != "train")
      throw std::invalid_argument("TrainConfig: unknown key '" + key + "'");
  }
  if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
  if (j.contains("train")) {
    const auto& t = j.at("train");
    const std::set<std::string> known = {"stages",      "batch_size", "queries_per_image",
                                         "word_anchor", "weight_decay", "seed"};
    for (const auto& [key, val] : t.items()) {
      (void)val;
      if (!known.count(key))
        throw std::invalid_argument("TrainConfig: unknown key 'train." + key + "'");
    }
    if (t.contains("stages")) {
      c.stages.clear();
      for (const auto& sj : t.at("stages")) {
        const std::set<std::string> sknown = {"resolution", "lr", "warmup", "steps",
                                              "freeze_vision"};
        for (const auto& [key, val] : sj.items()) {
          (void)val;
          if (!sknown.count(key))
            throw std::invalid_argument("TrainConfig: unknown key 'stages." + key + "'");
        }
        StageConfig s;
        s.resolution = sj.value("resolution", s.resolution);
        s.lr = sj.value("lr", s.lr);
        s.warmup = sj.value("warmup", s.warmup);
        s.steps = sj.value("steps", s.steps);
        s.freeze_vision = sj.value("freeze_vision", s.freeze_vision);
        c.stages.push_back(s);
      }
    }
    c.batch_size = t.value("batch_size", c.batch_size);
    c.queries_per_image = t.value("queries_per_image", c.queries_per_image);
    c.word_anchor = t.value("word_anchor", c.word_anchor);
    c.weight_decay = t.value("weight_decay", c.weight_decay);
    c.seed = t.value("seed", c.seed);
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::from_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("TrainConfig: cannot open " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("TrainConfig: parse error in " + path + ": " + e.what());
  }
  return from_json(j);
}

void TrainConfig::validate() const {
  model.validate();
  if (stages.empty()) throw std::invalid_argument("TrainConfig: at least one stage required");
  for (const StageConfig& s : stages) {
    if (s.resolution <= 0 || s.resolution % model.patch != 0)
      throw std::invalid_argument("TrainConfig: stage resolution not patch-aligned");
    if (s.lr <= 0.0 || s.steps < 0 || s.warmup < 0)
      throw std::invalid_argument("TrainConfig: bad stage schedule");
  }
  if (batch_size < 1 || queries_per_image < 1)
    throw std::invalid_argument("TrainConfig: batch_size and queries_per_image must be >= 1");
  if (weight_decay < 0.0) throw std::invalid_argument("TrainConfig: negative weight_decay");
}

namespace {

// The largest value exp(logit_scale) may reach after an update (the usual
// contrastive-scale cap of 100).
const double kMaxLogitScale = std::log(100.0);

struct StepSample {
  std::vector<int> image_idx;       // batch slots -> image index
  std::vector<BatchQuery> queries;  // positive refers to batch slot
};

StepSample draw_batch(const DatasetManifest& data, const std::vector<std::vector<int>>& cand,
                      const std::vector<int>& pool,
                      const std::vector<std::set<std::string>>& word_sets, int batch_size, int qpi,
                      bool word_anchor, Rng& rng) {
  const int n = static_cast<int>(pool.size());
  const int want = std::min(batch_size, n);
  StepSample s;
  // Shuffle the usable images, then take the first `want` whose word sets are
  // pairwise disjoint. Sharing a word across batch images would turn a true
  // match into an in-batch "negative" and teach score equalization.
  std::vector<int> perm(pool);
  rng.shuffle(perm);
  std::set<std::string> taken;
  for (int idx : perm) {
    if (static_cast<int>(s.image_idx.size()) == want) break;
    bool clash = false;
    for (const std::string& w : word_sets[idx])
      if (taken.count(w)) {
        clash = true;
        break;
      }
    if (clash) continue;
    taken.insert(word_sets[idx].begin(), word_sets[idx].end());
    s.image_idx.push_back(idx);
  }
  const int bsz = static_cast<int>(s.image_idx.size());
  for (int j = 0; j < bsz; ++j) {
    const int img = s.image_idx[j];
    std::vector<int> picks = cand[img];
    rng.shuffle(picks);
    const auto& words = data.images[img].words;
    for (int k = 0; k < qpi; ++k) {
      BatchQuery q;
      q.positive = j;
      if ((k == 0 && word_anchor && !words.empty()) || picks.empty()) {
        // Anchor the image at one of its rendered words (always a true
        // positive); also the fallback when no manifest query covers it.
        q.style = QueryStyle::word;
        q.text = words[rng.randint(0, static_cast<int>(words.size()) - 1)];
      } else {
        const QueryRecord& rec =
            data.queries[picks[k < static_cast<int>(picks.size())
                                   ? k
                                   : rng.randint(0, static_cast<int>(picks.size()) - 1)]];
        q.style = rec.style;
        q.text = query_text(rec);
      }
      s.queries.push_back(std::move(q));
    }
  }
  return s;
}

}  // namespace

Model model_from_checkpoint(const Checkpoint& ck, int* resolution) {
  const nlohmann::json& model_j = ck.config.contains("model") ? ck.config.at("model") : ck.config;
  ModelConfig cfg = ModelConfig::from_json(model_j);
  if (resolution) *resolution = ck.config.value("resolution", cfg.base_res);
  return Model(cfg, ck.params);
}

TrainResult train(const TrainConfig& cfg, const DatasetManifest& data,
                  const std::string& data_root, const std::string& out_dir) {
  cfg.validate();
  if (data.images.empty()) throw std::invalid_argument("train: empty dataset");
  std::filesystem::create_directories(out_dir);

  Model model(cfg.model, cfg.seed);
  Rng rng(cfg.seed * 0x9e3779b97f4a7c15ULL + 1);  // decoupled from the init stream
  AdamW opt;
  opt.weight_decay = cfg.weight_decay;

  // Native rasters once; per-stage working copies at the stage resolution.
  std::vector<Image> native;
  native.reserve(data.images.size());
  for (const ImageRecord& rec : data.images) native.push_back(read_ppm(data_root + "/" + rec.path));

  // Queries indexed by the images they cover.
  std::map<int, int> img_pos;
  for (size_t i = 0; i < data.images.size(); ++i) img_pos[data.images[i].id] = static_cast<int>(i);
  std::vector<std::vector<int>> cand(data.images.size());
  for (size_t qi = 0; qi < data.queries.size(); ++qi)
    for (int id : data.queries[qi].positives) {
      auto it = img_pos.find(id);
      if (it != img_pos.end()) cand[it->second].push_back(static_cast<int>(qi));
    }

  // An image with neither a covering query nor any rendered word cannot
  // anchor a positive pair; keep such blanks out of the sampling pool.
  std::vector<int> pool;
  for (size_t i = 0; i < data.images.size(); ++i)
    if (!cand[i].empty() || !data.images[i].words.empty()) pool.push_back(static_cast<int>(i));
  if (pool.empty()) throw std::invalid_argument("train: no image has a usable training query");
  std::vector<std::set<std::string>> word_sets(data.images.size());
  for (size_t i = 0; i < data.images.size(); ++i)
    word_sets[i].insert(data.images[i].words.begin(), data.images[i].words.end());

  std::ofstream metrics(out_dir + "/metrics.jsonl");
  if (!metrics) throw std::runtime_error("train: cannot open " + out_dir + "/metrics.jsonl");

  TrainResult result;
  ParamMap last_good = model.params();
  int global_step = 0;
  for (size_t si = 0; si < cfg.stages.size(); ++si) {
    const StageConfig& stage = cfg.stages[si];
    std::vector<Image> scaled;
    scaled.reserve(native.size());
    for (const Image& img : native)
      scaled.push_back(img.w == stage.resolution && img.h == stage.resolution
                           ? img
                           : resize_bilinear(img, stage.resolution, stage.resolution));

    const std::set<std::string> frozen =
        stage.freeze_vision ? std::set<std::string>{"phi.", "proj."} : std::set<std::string>{};
    for (int step = 0; step < stage.steps; ++step) {
      const double lr =
          stage.warmup > 0 && step < stage.warmup ? stage.lr * (step + 1) / stage.warmup : stage.lr;
      StepSample sample = draw_batch(data, cand, pool, word_sets, cfg.batch_size,
                                     cfg.queries_per_image, cfg.word_anchor, rng);

      Graph g(true);
      Binds b = model.bind(g, true, frozen);
      std::vector<ImagePass> passes;
      int degenerate = 0;
      StepLoss sl;
      bool bad = false;
      try {
        for (int idx : sample.image_idx) {
          passes.push_back(forward_image(model, b, scaled[idx]));
          degenerate += passes.back().trace.degenerate_mask_steps;
        }
        sl = step_loss(model, b, sample.queries, passes, rng);
        bad = !std::isfinite(sl.values.total);
      } catch (const std::invalid_argument& e) {
        // Overflowing parameters surface as finiteness or zero-norm guards
        // inside the forward kernels; treat those as divergence. Structural
        // errors (shapes, indices, malformed queries) stay loud.
        const std::string what = e.what();
        if (what.find("finite") == std::string::npos && what.find("zero-norm") == std::string::npos)
          throw;
        bad = true;
      }
      if (!bad) {
        g.backward(sl.total);
        opt.step(model.params(), model.collect_grads(b), lr);
        Mat& ls = model.params().at("logit_scale");
        ls(0, 0) = std::min(ls(0, 0), kMaxLogitScale);
        for (const auto& [name, t] : model.params())
          if (!t.all_finite()) {
            (void)name;
            bad = true;
            break;
          }
      }
      if (bad) {
        model.params() = last_good;
        const std::string path = out_dir + "/last_good.ckpt";
        save_checkpoint(path, {{"model", model.config().to_json()}, {"resolution", stage.resolution}},
                        model.params());
        metrics << nlohmann::json{{"event", "divergence_abort"}, {"step", global_step}}.dump()
                << "\n";
        result.diverged = true;
        result.final_checkpoint = path;
        return result;
      }

      last_good = model.params();
      result.last = sl.values;
      metrics << nlohmann::json{{"step", global_step},
                                {"stage", si},
                                {"lr", lr},
                                {"l_t2v", sl.values.l_t2v},
                                {"l_v2t", sl.values.l_v2t},
                                {"l_c", sl.values.l_c},
                                {"l_m", sl.values.l_m},
                                {"total", sl.values.total},
                                {"degenerate_mask_steps", degenerate}}
                       .dump()
              << "\n";
      ++global_step;
      ++result.steps_done;
    }
    const std::string path = out_dir + "/stage" + std::to_string(si + 1) + ".ckpt";
    save_checkpoint(path, {{"model", model.config().to_json()}, {"resolution", stage.resolution}},
                    model.params());
    result.checkpoints.push_back(path);
    result.final_checkpoint = path;
  }
  return result;
}

std::vector<AblateRow> ablate(const TrainConfig& base, const std::vector<AblateVariant>& variants,
                              const std::vector<uint64_t>& seeds,
                              const DatasetManifest& train_data, const DatasetManifest& test_data,
                              const std::string& data_root, const std::string& out_dir) {
  if (variants.empty() || seeds.empty())
    throw std::invalid_argument("ablate: variants and seeds must be non-empty");
  std::vector<AblateRow> rows;
  for (const AblateVariant& v : variants) {
    for (uint64_t seed : seeds) {
      TrainConfig cfg = base;
      cfg.seed = seed;
      cfg.model.instructions_on = v.instructions_on;
      cfg.model.mim_on = v.mim_on;
      cfg.model.T = v.T;
      const std::string run_dir = out_dir + "/" + v.name + "_seed" + std::to_string(seed);
      TrainResult tr = train(cfg, train_data, data_root, run_dir);
      int res = 0;
      Model m = model_from_checkpoint(load_checkpoint(tr.final_checkpoint), &res);
      CorpusIndex idx = build_index(m, test_data, data_root, res);
      AblateRow row;
      row.name = v.name;
      row.seed = seed;
      row.report = evaluate(&m, &idx, test_data, data_root, Scorer::model);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

}  // namespace mstar
