// Synthetic scene-text generation: seeded rendering of word layouts onto
// colored canvases, query derivation in all four styles, and the line-
// delimited corpus manifest.
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mstar/image_io.hpp"
#include "mstar/tokenizer.hpp"

namespace mstar {

struct WordPlacement {
  std::string text;
  int x = 0;      // top-left pixel
  int y = 0;
  int scale = 1;  // integer glyph magnification
  int color = 0;  // text palette index
};

struct SceneSpec {
  int canvas = 64;
  std::vector<WordPlacement> words;
  int background = 0;  // background palette index
  bool noise = false;  // per-pixel brightness jitter, drawn from seed
  uint64_t seed = 0;
};

struct RenderedScene {
  Image image;
  std::vector<std::string> words;  // ground truth, placement order
};

// Palettes: dark backgrounds, bright text, so every word is high-contrast.
int background_palette_size();
const std::array<uint8_t, 3>& background_color(int i);
const char* background_color_name(int i);
int text_palette_size();
const std::array<uint8_t, 3>& text_color(int i);

// Pure function of the spec; throws a placement error naming the word when it
// does not fit the canvas at its scale.
RenderedScene render_scene(const SceneSpec& spec);

struct QueryRecord {
  QueryStyle style = QueryStyle::word;
  std::string text;                // word / phrase / semantic styles
  std::vector<std::string> items;  // combined style, canonical sorted order
  std::vector<int> positives;      // sorted unique image ids
};

// Text fed to the encoder: `text`, or the space-joined items for combined.
std::string query_text(const QueryRecord& q);

// Word-level view for per-word scoring: items when present, otherwise the
// whitespace-split text.
std::vector<std::string> query_words(const QueryRecord& q);

struct ImageRecord {
  int id = 0;
  std::string path;  // relative to the manifest's directory
  std::vector<std::string> words;
  std::vector<std::string> phrases;  // contiguous sequences rendered on one line
  std::string caption;               // templated semantic caption
  std::string bg;                    // background color name
};

struct DatasetManifest {
  std::string split = "train";
  std::vector<ImageRecord> images;
  std::vector<QueryRecord> queries;
};

// All k-subsets (k_min..k_max) of the words at least min_chars long,
// deduplicated and canonicalized (each subset sorted, result sorted).
std::vector<std::vector<std::string>> build_combined_queries(
    const std::vector<std::string>& words, int min_chars = 3, int k_min = 2, int k_max = 4);

// Top-n queries of the style by positive count, ties broken lexicographically
// by query text. Fewer than n candidates: returns all and sets *too_few.
std::vector<QueryRecord> select_frequent_queries(const DatasetManifest& m, QueryStyle style,
                                                 int n, bool* too_few = nullptr);

void emit_manifest(const DatasetManifest& m, const std::string& path);
DatasetManifest load_manifest(const std::string& path);  // parse errors carry line numbers

struct GenConfig {
  int train_images = 1500;
  int test_images = 300;
  int vocab = 100;
  int canvas = 64;
  int min_words = 2;
  int max_words = 4;
  double phrase_prob = 0.35;        // chance an image carries a rendered phrase
  double scale2_prob = 0.2;         // chance a short word doubles its glyph scale
  double noise_prob = 0.5;
  double subset_decoy_prob = 0.25;  // chance an image reuses a strict subset of
                                    // the previous image's words (hard negatives
                                    // for combined queries)
  bool salience_skew = false;       // first word large, the rest small
  int word_query_top_n = 0;         // 0 keeps every word query
  int combined_cap_per_image = 2;
  uint64_t seed = 1;

  static GenConfig from_json_file(const std::string& path);
};

struct Corpus {
  DatasetManifest train;
  DatasetManifest test;
};

// Renders both splits under out_dir (images/ + one manifest file per split)
// and returns the manifests. Fully determined by cfg.
Corpus make_corpus(const GenConfig& cfg, const std::string& out_dir);

// Deterministic pseudo-word vocabulary (unique, lowercase, 3-7 letters).
std::vector<std::string> make_vocab(int n, uint64_t seed);

}  // namespace mstar
