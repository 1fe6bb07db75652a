// Retrieval: precomputed slot index, cosine ranking with id tie-break,
// match-probability reranking of the top fraction, MAP evaluation per query
// style, and the normalized-edit-distance baseline.
#pragma once

#include <set>
#include <string>
#include <vector>

#include "mstar/encoders.hpp"
#include "mstar/synthgen.hpp"

namespace mstar {

struct CorpusIndex {
  uint64_t fingerprint = 0;  // of the model that produced the slots
  int S = 0;                 // slots per image
  int d = 0;
  int resolution = 0;        // indexing side in pixels
  std::vector<int> ids;
  std::vector<Mat> slots;    // per image, S x d with unit rows
};

void save_index(const CorpusIndex& idx, const std::string& path);
CorpusIndex load_index(const std::string& path);

// Embeds every manifest image at `resolution` with gradients off. A non-empty
// dump_attn_dir gets one attention heatmap per image and embed step.
CorpusIndex build_index(const Model& m, const DatasetManifest& manifest,
                        const std::string& data_root, int resolution,
                        const std::string& dump_attn_dir = "");

struct RankedItem {
  int id = 0;
  double score = 0.0;
};

enum class RankStage { initial, reranked };

struct RankedList {
  int query_id = 0;
  RankStage stage = RankStage::initial;
  int reranked_k = 0;  // prefix length reordered by rerank
  std::vector<RankedItem> items;
};

// Scores every index image through the query's branch and sorts descending,
// ascending id on ties. Errors if the model does not match the index.
RankedList rank(const Model& m, const QueryRecord& q, const CorpusIndex& idx, int query_id = 0);

int rerank_k(int corpus_size, double p);  // max(1, ceil(p * size))

// Re-scores the top-K items by ITM match probability and reorders only that
// prefix; the tail keeps its initial order and scores.
RankedList rerank(const Model& m, const QueryRecord& q, const RankedList& initial,
                  double p, const DatasetManifest& manifest, const std::string& data_root,
                  int resolution);

// AP = mean over relevant ranks r_k of k / r_k; empty relevance set errors.
double average_precision(const std::vector<int>& ranked_ids, const std::set<int>& relevant);

int levenshtein(const std::string& a, const std::string& b);

// Per word: best 1 - lev/max(len) over spotted strings; multi-word queries
// average their per-word scores; empty spotted scores 0.
double edit_distance_score(const std::vector<std::string>& query_words,
                           const std::vector<std::string>& spotted);

enum class Scorer { model, oracle, edit };
Scorer scorer_from_name(const std::string& name);  // throws on unknown scorer
const char* scorer_name(Scorer s);

struct EvalRow {
  QueryStyle style = QueryStyle::word;
  int queries = 0;
  double map = 0.0;
};

struct EvalReport {
  Scorer scorer = Scorer::model;
  bool reranked = false;
  std::vector<EvalRow> rows;  // one per style present, style enum order
  double overall = 0.0;       // unweighted mean of the per-style MAPs
  int skipped = 0;            // queries with no positive in the corpus
};

// Ranks every manifest query against the manifest's images and reports MAP
// per style. model/index may be null for the oracle and edit scorers.
EvalReport evaluate(const Model* m, const CorpusIndex* idx, const DatasetManifest& test,
                    const std::string& data_root, Scorer scorer, bool do_rerank = false,
                    double rerank_frac = 0.02);

}  // namespace mstar
