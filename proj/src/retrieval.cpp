// Retrieval and evaluation. Ranking is value-level math over the stored
// slots; only the aggregation branch and the reranker run model passes, all
// with gradients off.
#include "mstar/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>

#include "json.hpp"
#include "mstar/mim.hpp"
#include "mstar/objective.hpp"

namespace mstar {
namespace {

constexpr char kMagic[] = "MSTARIDX1\n";

void sort_ranked(std::vector<RankedItem>& items) {
  std::sort(items.begin(), items.end(), [](const RankedItem& a, const RankedItem& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
}

Image load_scene(const std::string& data_root, const std::string& rel_path, int resolution) {
  Image img = read_ppm(data_root + "/" + rel_path);
  if (img.w != resolution || img.h != resolution)
    img = resize_bilinear(img, resolution, resolution);
  return img;
}

}  // namespace

void save_index(const CorpusIndex& idx, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_index: cannot open " + path);
  nlohmann::json header = {{"version", 1},         {"fingerprint", idx.fingerprint},
                           {"S", idx.S},           {"d", idx.d},
                           {"resolution", idx.resolution}, {"count", idx.ids.size()},
                           {"ids", idx.ids}};
  f << kMagic << header.dump() << "\n";
  for (const Mat& m : idx.slots)
    f.write(reinterpret_cast<const char*>(m.a.data()),
            static_cast<std::streamsize>(m.a.size() * sizeof(double)));
  if (!f) throw std::runtime_error("save_index: short write to " + path);
}

CorpusIndex load_index(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_index: cannot open " + path);
  std::string magic(sizeof(kMagic) - 1, '\0');
  f.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (magic != kMagic) throw std::runtime_error("load_index: bad magic in " + path);
  std::string line;
  if (!std::getline(f, line)) throw std::runtime_error("load_index: missing header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("load_index: bad header in " + path + ": " + e.what());
  }
  if (header.value("version", 0) != 1)
    throw std::runtime_error("load_index: unsupported version in " + path);
  CorpusIndex idx;
  idx.fingerprint = header.at("fingerprint").get<uint64_t>();
  idx.S = header.at("S").get<int>();
  idx.d = header.at("d").get<int>();
  idx.resolution = header.at("resolution").get<int>();
  idx.ids = header.at("ids").get<std::vector<int>>();
  if (idx.ids.size() != header.at("count").get<size_t>())
    throw std::runtime_error("load_index: id count mismatch in " + path);
  for (size_t i = 0; i < idx.ids.size(); ++i) {
    Mat m(idx.S, idx.d);
    f.read(reinterpret_cast<char*>(m.a.data()),
           static_cast<std::streamsize>(m.a.size() * sizeof(double)));
    if (f.gcount() != static_cast<std::streamsize>(m.a.size() * sizeof(double)))
      throw std::runtime_error("load_index: truncated slots in " + path);
    idx.slots.push_back(std::move(m));
  }
  return idx;
}

CorpusIndex build_index(const Model& m, const DatasetManifest& manifest,
                        const std::string& data_root, int resolution,
                        const std::string& dump_attn_dir) {
  const ModelConfig& cfg = m.config();
  if (resolution <= 0 || resolution % cfg.patch != 0)
    throw std::invalid_argument("build_index: resolution not patch-aligned");
  CorpusIndex idx;
  idx.fingerprint = m.fingerprint();
  idx.S = (cfg.T + 1) * cfg.Q;
  idx.d = cfg.d;
  idx.resolution = resolution;
  for (const ImageRecord& rec : manifest.images) {
    try {
      Image img = load_scene(data_root, rec.path, resolution);
      Graph g(false);
      Binds b = m.bind(g, false);
      ImagePass pass = forward_image(m, b, img);
      Mat slots = pass.ev->val;
      for (int i = 0; i < slots.rows; ++i) {
        double n = 0.0;
        for (int j = 0; j < slots.cols; ++j) n += slots(i, j) * slots(i, j);
        n = std::sqrt(n);
        if (n < 1e-12) throw std::runtime_error("zero-norm slot");
        for (int j = 0; j < slots.cols; ++j) slots(i, j) /= n;
      }
      if (!dump_attn_dir.empty()) {
        for (size_t t = 0; t < pass.trace.maps.size(); ++t) {
          char name[64];
          std::snprintf(name, sizeof(name), "/attn_%06d_t%d.pgm", rec.id, static_cast<int>(t));
          write_pgm(dump_attn_dir + name, pass.trace.maps[t].grid);
        }
      }
      idx.ids.push_back(rec.id);
      idx.slots.push_back(std::move(slots));
    } catch (const std::exception& e) {
      throw std::runtime_error("build_index: image " + std::to_string(rec.id) + ": " + e.what());
    }
  }
  return idx;
}

RankedList rank(const Model& m, const QueryRecord& q, const CorpusIndex& idx, int query_id) {
  if (m.fingerprint() != idx.fingerprint)
    throw std::runtime_error("rank: index was built by a different model");
  const int B = static_cast<int>(idx.ids.size());
  RankedList out;
  out.query_id = query_id;
  out.stage = RankStage::initial;
  Graph g(false);
  Binds b = m.bind(g, false);
  const std::string text = query_text(q);
  NodeP e = m.encode_text(b, q.style, text);
  if (multiword_style(q.style) && m.config().mim_on) {
    NodeP e_n = ops::l2norm_rows(g, e);
    for (int j = 0; j < B; ++j) {
      NodeP ev = g.leaf(idx.slots[j]);
      NodeP evt_n = ops::l2norm_rows(g, m.aggregate_multiword(b, e, ev));
      const NodeP cm = ops::matmul_nt(g, evt_n, e_n);
      out.items.push_back({idx.ids[j], cm->val(0, 0)});
    }
  } else if (!m.config().mim_on) {
    // Ablated matching scores against the mean-pooled slots.
    for (int j = 0; j < B; ++j) {
      Mat pooled(1, idx.d);
      for (int i = 0; i < idx.S; ++i)
        for (int k = 0; k < idx.d; ++k) pooled(0, k) += idx.slots[j](i, k) / idx.S;
      out.items.push_back({idx.ids[j], mim::max_cosine(e->val, 0, pooled)});
    }
  } else {
    for (int j = 0; j < B; ++j)
      out.items.push_back({idx.ids[j], mim::max_cosine(e->val, 0, idx.slots[j])});
  }
  sort_ranked(out.items);
  return out;
}

int rerank_k(int corpus_size, double p) {
  if (corpus_size <= 0) throw std::invalid_argument("rerank_k: empty corpus");
  if (p <= 0.0 || p > 1.0) throw std::invalid_argument("rerank_k: fraction out of (0, 1]");
  return std::max(1, static_cast<int>(std::ceil(p * corpus_size)));
}

RankedList rerank(const Model& m, const QueryRecord& q, const RankedList& initial, double p,
                  const DatasetManifest& manifest, const std::string& data_root,
                  int resolution) {
  const int n = static_cast<int>(initial.items.size());
  const int k = std::min(rerank_k(n, p), n);
  std::map<int, const ImageRecord*> by_id;
  for (const ImageRecord& rec : manifest.images) by_id[rec.id] = &rec;
  const std::string text = query_text(q);

  RankedList out = initial;
  out.stage = RankStage::reranked;
  out.reranked_k = k;
  for (int i = 0; i < k; ++i) {
    const int id = initial.items[i].id;
    auto it = by_id.find(id);
    if (it == by_id.end())
      throw std::runtime_error("rerank: image " + std::to_string(id) + " not in manifest");
    Image img = load_scene(data_root, it->second->path, resolution);
    Graph g(false);
    Binds b = m.bind(g, false);
    KvCache kv = m.make_kv(b, m.project(b, m.encode_image(b, img)));
    const NodeP logits = m.itm_logits(b, kv, q.style, text);
    // Match probability, computed stably from the logit gap.
    out.items[i].score = 1.0 / (1.0 + std::exp(logits->val(0, 0) - logits->val(0, 1)));
  }
  std::sort(out.items.begin(), out.items.begin() + k,
            [](const RankedItem& a, const RankedItem& b) {
              if (a.score != b.score) return a.score > b.score;
              return a.id < b.id;
            });
  return out;
}

double average_precision(const std::vector<int>& ranked_ids, const std::set<int>& relevant) {
  if (relevant.empty()) throw std::invalid_argument("average_precision: no relevant ids");
  std::set<int> seen;
  int hits = 0;
  double sum = 0.0;
  for (size_t r = 0; r < ranked_ids.size(); ++r) {
    const int id = ranked_ids[r];
    if (!relevant.count(id) || !seen.insert(id).second) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(r + 1);
  }
  return hits ? sum / hits : 0.0;
}

int levenshtein(const std::string& a, const std::string& b) {
  const int n = static_cast<int>(a.size()), m = static_cast<int>(b.size());
  std::vector<int> prev(m + 1), cur(m + 1);
  for (int j = 0; j <= m; ++j) prev[j] = j;
  for (int i = 1; i <= n; ++i) {
    cur[0] = i;
    for (int j = 1; j <= m; ++j) {
      const int sub = prev[j - 1] + (a[i - 1] != b[j - 1]);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

double edit_distance_score(const std::vector<std::string>& query_words,
                           const std::vector<std::string>& spotted) {
  if (query_words.empty()) return 0.0;
  double sum = 0.0;
  for (const std::string& w : query_words) {
    double best = 0.0;
    for (const std::string& s : spotted) {
      const size_t denom = std::max(w.size(), s.size());
      const double sim = denom == 0 ? 1.0 : 1.0 - static_cast<double>(levenshtein(w, s)) / denom;
      best = std::max(best, sim);
    }
    sum += best;
  }
  return sum / query_words.size();
}

Scorer scorer_from_name(const std::string& name) {
  if (name == "model") return Scorer::model;
  if (name == "oracle") return Scorer::oracle;
  if (name == "edit") return Scorer::edit;
  throw std::invalid_argument("unknown scorer: " + name);
}

const char* scorer_name(Scorer s) {
  switch (s) {
    case Scorer::model: return "model";
    case Scorer::oracle: return "oracle";
    case Scorer::edit: return "edit";
  }
  return "?";
}

EvalReport evaluate(const Model* m, const CorpusIndex* idx, const DatasetManifest& test,
                    const std::string& data_root, Scorer scorer, bool do_rerank,
                    double rerank_frac) {
  if (scorer == Scorer::model && (!m || !idx))
    throw std::invalid_argument("evaluate: model scorer needs a model and an index");
  if (do_rerank && scorer != Scorer::model)
    throw std::invalid_argument("evaluate: rerank applies to the model scorer only");

  EvalReport rep;
  rep.scorer = scorer;
  rep.reranked = do_rerank;
  std::map<QueryStyle, std::pair<double, int>> acc;  // style -> (sum AP, n)
  for (size_t qi = 0; qi < test.queries.size(); ++qi) {
    const QueryRecord& q = test.queries[qi];
    const std::set<int> rel(q.positives.begin(), q.positives.end());
    if (rel.empty()) {
      std::fprintf(stderr, "evaluate: query %zu has no positives, skipped\n", qi);
      ++rep.skipped;
      continue;
    }
    std::vector<RankedItem> items;
    if (scorer == Scorer::model) {
      RankedList list = rank(*m, q, *idx, static_cast<int>(qi));
      if (do_rerank)
        list = rerank(*m, q, list, rerank_frac, test, data_root, idx->resolution);
      items = std::move(list.items);
    } else {
      for (const ImageRecord& rec : test.images) {
        const double s = scorer == Scorer::oracle
                             ? (rel.count(rec.id) ? 1.0 : 0.0)
                             : edit_distance_score(query_words(q), rec.words);
        items.push_back({rec.id, s});
      }
      sort_ranked(items);
    }
    std::vector<int> ids;
    for (const RankedItem& it : items) ids.push_back(it.id);
    auto& [sum, n] = acc[q.style];
    sum += average_precision(ids, rel);
    n += 1;
  }
  for (const auto& [style, sn] : acc) {
    EvalRow row;
    row.style = style;
    row.queries = sn.second;
    row.map = sn.first / sn.second;
    rep.rows.push_back(row);
    rep.overall += row.map;
  }
  if (!rep.rows.empty()) rep.overall /= static_cast<double>(rep.rows.size());
  return rep;
}

}  // namespace mstar
