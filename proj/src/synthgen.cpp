#include "mstar/synthgen.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <set>
#include <stdexcept>

#include "json.hpp"
#include "mstar/font5x7.hpp"

namespace mstar {

namespace {

struct NamedColor {
  const char* name;
  std::array<uint8_t, 3> rgb;
};

const NamedColor kBackgrounds[] = {
    {"black", {12, 12, 12}},   {"navy", {18, 24, 64}},  {"forest", {16, 48, 24}},
    {"maroon", {72, 20, 20}},  {"slate", {52, 56, 64}}, {"brown", {68, 46, 22}},
};

const std::array<uint8_t, 3> kTextColors[] = {
    {240, 240, 240}, {240, 220, 60}, {80, 220, 230},
    {120, 230, 90},  {240, 150, 50}, {235, 130, 180},
};

int word_width_px(const std::string& w, int scale) {
  // 5px glyph + 1px gap per character, no trailing gap.
  return (6 * static_cast<int>(w.size()) - 1) * scale;
}

}  // namespace

int background_palette_size() { return static_cast<int>(std::size(kBackgrounds)); }

const std::array<uint8_t, 3>& background_color(int i) {
  if (i < 0 || i >= background_palette_size())
    throw std::invalid_argument("background_color: index out of range");
  return kBackgrounds[i].rgb;
}

const char* background_color_name(int i) {
  if (i < 0 || i >= background_palette_size())
    throw std::invalid_argument("background_color_name: index out of range");
  return kBackgrounds[i].name;
}

int text_palette_size() { return static_cast<int>(std::size(kTextColors)); }

const std::array<uint8_t, 3>& text_color(int i) {
  if (i < 0 || i >= text_palette_size())
    throw std::invalid_argument("text_color: index out of range");
  return kTextColors[i];
}

RenderedScene render_scene(const SceneSpec& spec) {
  if (spec.canvas <= 0) throw std::invalid_argument("render_scene: non-positive canvas");
  if (spec.background < 0 || spec.background >= background_palette_size())
    throw std::invalid_argument("render_scene: background palette index out of range");
  RenderedScene out;
  out.image = Image(spec.canvas, spec.canvas);
  const auto& bg = kBackgrounds[spec.background].rgb;
  for (int y = 0; y < spec.canvas; ++y)
    for (int x = 0; x < spec.canvas; ++x) {
      uint8_t* p = out.image.at(x, y);
      p[0] = bg[0];
      p[1] = bg[1];
      p[2] = bg[2];
    }
  if (spec.noise) {
    Rng rng(spec.seed);
    for (uint8_t& b : out.image.pix) {
      const int v = static_cast<int>(b) + rng.randint(-10, 10);
      b = static_cast<uint8_t>(std::clamp(v, 0, 255));
    }
  }
  for (const WordPlacement& wp : spec.words) {
    if (wp.text.empty()) throw std::invalid_argument("render_scene: empty word");
    if (wp.color < 0 || wp.color >= text_palette_size())
      throw std::invalid_argument("render_scene: text palette index out of range");
    if (wp.scale < 1) throw std::invalid_argument("render_scene: scale must be >= 1");
    const int w = word_width_px(wp.text, wp.scale);
    const int h = font5x7::kGlyphH * wp.scale;
    if (wp.x < 0 || wp.y < 0 || wp.x + w > spec.canvas || wp.y + h > spec.canvas)
      throw std::runtime_error("render_scene: word '" + wp.text +
                               "' does not fit the canvas at its position/scale");
    const auto& fg = kTextColors[wp.color];
    for (size_t ci = 0; ci < wp.text.size(); ++ci) {
      const font5x7::Glyph* g = font5x7::glyph(wp.text[ci]);
      if (!g)
        throw std::invalid_argument("render_scene: unrenderable character in '" + wp.text + "'");
      const int gx = wp.x + static_cast<int>(ci) * 6 * wp.scale;
      for (int r = 0; r < font5x7::kGlyphH; ++r)
        for (int c = 0; c < font5x7::kGlyphW; ++c) {
          if (!((*g)[r] >> (font5x7::kGlyphW - 1 - c) & 1)) continue;
          for (int dy = 0; dy < wp.scale; ++dy)
            for (int dx = 0; dx < wp.scale; ++dx) {
              uint8_t* p = out.image.at(gx + c * wp.scale + dx, wp.y + r * wp.scale + dy);
              p[0] = fg[0];
              p[1] = fg[1];
              p[2] = fg[2];
            }
        }
    }
    out.words.push_back(wp.text);
  }
  return out;
}

std::string query_text(const QueryRecord& q) {
  if (q.style != QueryStyle::combined) return q.text;
  std::string t;
  for (size_t i = 0; i < q.items.size(); ++i) {
    if (i) t += ' ';
    t += q.items[i];
  }
  return t;
}

std::vector<std::string> query_words(const QueryRecord& q) {
  if (!q.items.empty()) return q.items;
  std::vector<std::string> out;
  std::string cur;
  for (char c : q.text + " ") {
    if (c == ' ') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  return out;
}

std::vector<std::vector<std::string>> build_combined_queries(
    const std::vector<std::string>& words, int min_chars, int k_min, int k_max) {
  if (words.empty()) throw std::invalid_argument("build_combined_queries: empty word list");
  std::vector<std::string> pool;
  for (const std::string& w : words)
    if (static_cast<int>(w.size()) >= min_chars) pool.push_back(w);
  std::sort(pool.begin(), pool.end());
  pool.erase(std::unique(pool.begin(), pool.end()), pool.end());

  std::vector<std::vector<std::string>> out;
  const int m = static_cast<int>(pool.size());
  std::vector<std::string> cur;
  // Depth-first subset enumeration in lexicographic order of the sorted pool.
  std::function<void(int)> rec = [&](int start) {
    const int k = static_cast<int>(cur.size());
    if (k >= k_min && k <= k_max) out.push_back(cur);
    if (k == k_max) return;
    for (int i = start; i < m; ++i) {
      cur.push_back(pool[i]);
      rec(i + 1);
      cur.pop_back();
    }
  };
  rec(0);
  return out;
}

std::vector<QueryRecord> select_frequent_queries(const DatasetManifest& m, QueryStyle style,
                                                 int n, bool* too_few) {
  if (n < 0) throw std::invalid_argument("select_frequent_queries: negative n");
  std::vector<const QueryRecord*> cand;
  for (const QueryRecord& q : m.queries)
    if (q.style == style) cand.push_back(&q);
  std::sort(cand.begin(), cand.end(), [](const QueryRecord* a, const QueryRecord* b) {
    if (a->positives.size() != b->positives.size())
      return a->positives.size() > b->positives.size();
    return query_text(*a) < query_text(*b);
  });
  if (too_few) *too_few = static_cast<int>(cand.size()) < n;
  if (static_cast<int>(cand.size()) > n) cand.resize(n);
  std::vector<QueryRecord> out;
  out.reserve(cand.size());
  for (const QueryRecord* q : cand) out.push_back(*q);
  return out;
}

namespace {

using nlohmann::json;

void validate_manifest(const DatasetManifest& m, const std::string& where) {
  std::set<int> ids;
  for (const ImageRecord& im : m.images)
    if (!ids.insert(im.id).second)
      throw std::invalid_argument(where + ": duplicate image id " + std::to_string(im.id));
  for (const QueryRecord& q : m.queries) {
    if (q.positives.empty())
      throw std::invalid_argument(where + ": query '" + query_text(q) + "' has no positives");
    for (int id : q.positives)
      if (!ids.count(id))
        throw std::invalid_argument(where + ": query '" + query_text(q) +
                                    "' references missing image id " + std::to_string(id));
    if (q.style == QueryStyle::word && q.text.size() < 3)
      throw std::invalid_argument(where + ": word query '" + q.text + "' shorter than 3 chars");
    if (q.style == QueryStyle::combined) {
      std::set<std::string> uniq(q.items.begin(), q.items.end());
      if (q.items.size() < 2 || q.items.size() > 4 || uniq.size() != q.items.size())
        throw std::invalid_argument(where + ": combined query '" + query_text(q) +
                                    "' must hold 2-4 distinct words");
    }
  }
}

}  // namespace

void emit_manifest(const DatasetManifest& m, const std::string& path) {
  validate_manifest(m, "emit_manifest");
  std::ofstream f(path);
  if (!f) throw std::runtime_error("emit_manifest: cannot open " + path);
  json meta = {{"kind", "meta"},
               {"id", 0},
               {"payload", {{"split", m.split}, {"version", 1}}}};
  f << meta.dump() << "\n";
  for (const ImageRecord& im : m.images) {
    json rec = {{"kind", "image"},
                {"id", im.id},
                {"payload",
                 {{"path", im.path},
                  {"words", im.words},
                  {"phrases", im.phrases},
                  {"caption", im.caption},
                  {"bg", im.bg}}}};
    f << rec.dump() << "\n";
  }
  int qid = 0;
  for (const QueryRecord& q : m.queries) {
    json rec = {{"kind", "query"},
                {"id", qid++},
                {"payload",
                 {{"style", style_name(q.style)},
                  {"text", q.text},
                  {"items", q.items},
                  {"positives", q.positives}}}};
    f << rec.dump() << "\n";
  }
  if (!f) throw std::runtime_error("emit_manifest: short write to " + path);
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_manifest: cannot open " + path);
  DatasetManifest m;
  std::string line;
  int lineno = 0;
  std::set<int> query_ids;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw std::runtime_error("load_manifest: parse error at " + path + ":" +
                               std::to_string(lineno) + ": " + e.what());
    }
    try {
      const std::string kind = rec.at("kind").get<std::string>();
      const json& p = rec.at("payload");
      if (kind == "meta") {
        m.split = p.at("split").get<std::string>();
      } else if (kind == "image") {
        ImageRecord im;
        im.id = rec.at("id").get<int>();
        im.path = p.at("path").get<std::string>();
        im.words = p.at("words").get<std::vector<std::string>>();
        im.phrases = p.at("phrases").get<std::vector<std::string>>();
        im.caption = p.at("caption").get<std::string>();
        im.bg = p.at("bg").get<std::string>();
        m.images.push_back(std::move(im));
      } else if (kind == "query") {
        if (!query_ids.insert(rec.at("id").get<int>()).second)
          throw std::runtime_error("duplicate query id");
        QueryRecord q;
        q.style = style_from_name(p.at("style").get<std::string>());
        q.text = p.at("text").get<std::string>();
        q.items = p.at("items").get<std::vector<std::string>>();
        q.positives = p.at("positives").get<std::vector<int>>();
        m.queries.push_back(std::move(q));
      } else {
        throw std::runtime_error("unknown record kind '" + kind + "'");
      }
    } catch (const json::exception& e) {
      throw std::runtime_error("load_manifest: bad record at " + path + ":" +
                               std::to_string(lineno) + ": " + e.what());
    } catch (const std::runtime_error& e) {
      throw std::runtime_error("load_manifest: bad record at " + path + ":" +
                               std::to_string(lineno) + ": " + e.what());
    }
  }
  validate_manifest(m, "load_manifest(" + path + ")");
  return m;
}

GenConfig GenConfig::from_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("GenConfig: cannot open " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw std::runtime_error("GenConfig: parse error in " + path + ": " + e.what());
  }
  GenConfig c;
  const std::set<std::string> known = {
      "train_images", "test_images",       "vocab",           "canvas",
      "min_words",    "max_words",         "phrase_prob",     "scale2_prob",
      "noise_prob",   "subset_decoy_prob", "salience_skew",   "word_query_top_n",
      "combined_cap_per_image",            "seed"};
  for (const auto& [key, val] : j.items()) {
    (void)val;
    if (!known.count(key)) throw std::invalid_argument("GenConfig: unknown key '" + key + "'");
  }
  c.train_images = j.value("train_images", c.train_images);
  c.test_images = j.value("test_images", c.test_images);
  c.vocab = j.value("vocab", c.vocab);
  c.canvas = j.value("canvas", c.canvas);
  c.min_words = j.value("min_words", c.min_words);
  c.max_words = j.value("max_words", c.max_words);
  c.phrase_prob = j.value("phrase_prob", c.phrase_prob);
  c.scale2_prob = j.value("scale2_prob", c.scale2_prob);
  c.noise_prob = j.value("noise_prob", c.noise_prob);
  c.subset_decoy_prob = j.value("subset_decoy_prob", c.subset_decoy_prob);
  c.salience_skew = j.value("salience_skew", c.salience_skew);
  c.word_query_top_n = j.value("word_query_top_n", c.word_query_top_n);
  c.combined_cap_per_image = j.value("combined_cap_per_image", c.combined_cap_per_image);
  c.seed = j.value("seed", c.seed);
  if (c.train_images < 0 || c.test_images < 0 || c.vocab < 1 || c.canvas < 16)
    throw std::invalid_argument("GenConfig: out-of-range field in " + path);
  return c;
}

std::vector<std::string> make_vocab(int n, uint64_t seed) {
  Rng rng(seed);
  std::set<std::string> seen;
  std::vector<std::string> out;
  while (static_cast<int>(out.size()) < n) {
    const int len = rng.randint(3, 7);
    std::string w;
    for (int i = 0; i < len; ++i) w.push_back(static_cast<char>('a' + rng.randint(0, 25)));
    if (seen.insert(w).second) out.push_back(w);
  }
  return out;
}

namespace {

// Patch-cell occupancy tracker: words are laid out on the 8px grid so every
// placement starts at a patch boundary.
struct Layout {
  int cells;  // per side
  std::vector<char> busy;

  explicit Layout(int canvas) : cells(canvas / 8), busy(static_cast<size_t>(cells) * cells, 0) {}

  bool free_rect(int cx, int cy, int w, int h) const {
    if (cx < 0 || cy < 0 || cx + w > cells || cy + h > cells) return false;
    for (int y = cy; y < cy + h; ++y)
      for (int x = cx; x < cx + w; ++x)
        if (busy[static_cast<size_t>(y) * cells + x]) return false;
    return true;
  }
  void occupy(int cx, int cy, int w, int h) {
    for (int y = cy; y < cy + h; ++y)
      for (int x = cx; x < cx + w; ++x) busy[static_cast<size_t>(y) * cells + x] = 1;
  }
};

// Places a one-line strip of words (uniform scale). Returns false if no free
// slot was found; on success appends placements and advances the layout.
bool place_strip(Layout& lay, std::vector<WordPlacement>& placed,
                 const std::vector<std::string>& strip, int scale, int color, Rng& rng) {
  int width = 0;
  for (size_t i = 0; i < strip.size(); ++i) {
    if (i) width += 6 * scale;  // inter-word gap = one glyph cell
    width += word_width_px(strip[i], scale);
  }
  const int wcells = (width + 1 + 7) / 8;  // 1px left margin
  const int hcells = scale;                // 7*scale <= 8*scale
  if (wcells > lay.cells || hcells > lay.cells) return false;
  for (int attempt = 0; attempt < 24; ++attempt) {
    const int cy = rng.randint(0, lay.cells - hcells);
    const int cx = rng.randint(0, lay.cells - wcells);
    if (!lay.free_rect(cx, cy, wcells, hcells)) continue;
    lay.occupy(cx, cy, wcells, hcells);
    int x = cx * 8 + 1;
    const int y = cy * 8 + (8 * hcells - 7 * scale) / 2;
    for (const std::string& w : strip) {
      placed.push_back({w, x, y, scale, color});
      x += word_width_px(w, scale) + 6 * scale;
    }
    return true;
  }
  return false;
}

struct CaptionInfo {
  std::string word;
  std::string bg;  // empty for the word-only template
};

DatasetManifest gen_split(const GenConfig& cfg, const std::vector<std::string>& vocab,
                          const std::string& split, int n_images, int id_base,
                          const std::string& out_dir, Rng& rng) {
  DatasetManifest m;
  m.split = split;
  std::vector<std::string> short_words;  // fit two-per-line at scale 1
  for (const std::string& w : vocab)
    if (w.size() <= 4) short_words.push_back(w);

  std::map<std::string, CaptionInfo> captions;
  std::vector<std::string> prev_words;

  for (int i = 0; i < n_images; ++i) {
    const int id = id_base + i;
    SceneSpec spec;
    spec.canvas = cfg.canvas;
    spec.background = rng.randint(0, background_palette_size() - 1);
    spec.noise = rng.uniform(0, 1) < cfg.noise_prob;
    spec.seed = rng.next();

    ImageRecord rec;
    rec.id = id;
    rec.bg = background_color_name(spec.background);

    // Word set: fresh sample, or a strict subset of the previous image's words
    // so combined queries get hard negatives.
    std::vector<std::string> chosen;
    if (prev_words.size() >= 2 && rng.uniform(0, 1) < cfg.subset_decoy_prob) {
      chosen = prev_words;
      rng.shuffle(chosen);
      chosen.resize(prev_words.size() - 1);
    } else {
      const int want = rng.randint(cfg.min_words, cfg.max_words);
      std::set<std::string> uniq;
      while (static_cast<int>(uniq.size()) < want)
        uniq.insert(vocab[rng.randint(0, static_cast<int>(vocab.size()) - 1)]);
      chosen.assign(uniq.begin(), uniq.end());
      rng.shuffle(chosen);
    }

    Layout lay(cfg.canvas);
    bool want_phrase = rng.uniform(0, 1) < cfg.phrase_prob;
    for (size_t wi = 0; wi < chosen.size(); ++wi) {
      const std::string& w = chosen[wi];
      const int color = rng.randint(0, text_palette_size() - 1);
      int scale = 1;
      if (cfg.salience_skew)
        scale = (wi == 0) ? 2 : 1;
      else if (w.size() <= 4 && rng.uniform(0, 1) < cfg.scale2_prob)
        scale = 2;

      // A phrase consumes this word plus the next short word on one line.
      if (want_phrase && wi + 1 < chosen.size() && scale == 1 && w.size() <= 4 &&
          chosen[wi + 1].size() <= 4) {
        std::vector<std::string> strip = {w, chosen[wi + 1]};
        if (place_strip(lay, spec.words, strip, 1, color, rng)) {
          rec.words.push_back(strip[0]);
          rec.words.push_back(strip[1]);
          rec.phrases.push_back(strip[0] + " " + strip[1]);
          ++wi;
          want_phrase = false;
          continue;
        }
      }
      if (!place_strip(lay, spec.words, {w}, scale, color, rng) && scale == 2)
        place_strip(lay, spec.words, {w}, 1, color, rng);  // retry small
    }

    RenderedScene scene = render_scene(spec);
    // rec.words for phrase members were appended above; add the rest in
    // placement order without duplicating them.
    {
      std::set<std::string> have(rec.words.begin(), rec.words.end());
      for (const std::string& w : scene.words)
        if (!have.count(w)) {
          rec.words.push_back(w);
          have.insert(w);
        }
    }
    prev_words = rec.words;

    // Semantic caption.
    if (!rec.words.empty()) {
      const std::string& w = rec.words[static_cast<size_t>(
          rng.randint(0, static_cast<int>(rec.words.size()) - 1))];
      if (rng.randint(0, 1) == 0) {
        rec.caption = "a sign that says " + w;
        captions.emplace(rec.caption, CaptionInfo{w, ""});
      } else {
        rec.caption = w + " written on a " + rec.bg + " background";
        captions.emplace(rec.caption, CaptionInfo{w, rec.bg});
      }
    }

    char name[64];
    std::snprintf(name, sizeof(name), "images/img_%06d.ppm", id);
    rec.path = name;
    write_ppm(out_dir + "/" + rec.path, scene.image);
    m.images.push_back(std::move(rec));
  }

  // ---- queries ----
  // word: every vocabulary word that appears somewhere.
  std::map<std::string, std::vector<int>> word_pos;
  std::map<std::string, std::vector<int>> phrase_pos;
  for (const ImageRecord& im : m.images) {
    for (const std::string& w : im.words) word_pos[w].push_back(im.id);
    for (const std::string& p : im.phrases) phrase_pos[p].push_back(im.id);
  }
  for (auto& [w, pos] : word_pos) {
    if (w.size() < 3) continue;
    QueryRecord q;
    q.style = QueryStyle::word;
    q.text = w;
    q.positives = pos;
    m.queries.push_back(std::move(q));
  }
  if (cfg.word_query_top_n > 0) {
    DatasetManifest tmp = m;
    std::vector<QueryRecord> kept =
        select_frequent_queries(tmp, QueryStyle::word, cfg.word_query_top_n);
    m.queries.erase(std::remove_if(m.queries.begin(), m.queries.end(),
                                   [](const QueryRecord& q) {
                                     return q.style == QueryStyle::word;
                                   }),
                    m.queries.end());
    for (QueryRecord& q : kept) m.queries.push_back(std::move(q));
  }
  for (auto& [p, pos] : phrase_pos) {
    QueryRecord q;
    q.style = QueryStyle::phrase;
    q.text = p;
    q.positives = pos;
    m.queries.push_back(std::move(q));
  }

  // combined: capped per-image word subsets, deduplicated, positives = every
  // image containing all members.
  std::set<std::vector<std::string>> combos;
  for (const ImageRecord& im : m.images) {
    if (im.words.size() < 2) continue;
    auto all = build_combined_queries(im.words);
    rng.shuffle(all);
    for (size_t k = 0; k < all.size() && k < static_cast<size_t>(cfg.combined_cap_per_image);
         ++k)
      combos.insert(all[k]);
  }
  for (const auto& items : combos) {
    QueryRecord q;
    q.style = QueryStyle::combined;
    q.items = items;
    for (const ImageRecord& im : m.images) {
      const std::set<std::string> have(im.words.begin(), im.words.end());
      bool ok = true;
      for (const std::string& w : items)
        if (!have.count(w)) {
          ok = false;
          break;
        }
      if (ok) q.positives.push_back(im.id);
    }
    if (!q.positives.empty()) m.queries.push_back(std::move(q));
  }

  // semantic: positives are every image satisfying the caption's predicate.
  for (const auto& [text, info] : captions) {
    QueryRecord q;
    q.style = QueryStyle::semantic;
    q.text = text;
    for (const ImageRecord& im : m.images) {
      if (!info.bg.empty() && im.bg != info.bg) continue;
      if (std::find(im.words.begin(), im.words.end(), info.word) == im.words.end()) continue;
      q.positives.push_back(im.id);
    }
    if (!q.positives.empty()) m.queries.push_back(std::move(q));
  }
  return m;
}

}  // namespace

Corpus make_corpus(const GenConfig& cfg, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(out_dir) / "images");
  Rng rng(cfg.seed);
  const std::vector<std::string> vocab = make_vocab(cfg.vocab, rng.next());
  Corpus c;
  c.train = gen_split(cfg, vocab, "train", cfg.train_images, 0, out_dir, rng);
  c.test = gen_split(cfg, vocab, "test", cfg.test_images, cfg.train_images, out_dir, rng);
  emit_manifest(c.train, out_dir + "/train_manifest.jsonl");
  emit_manifest(c.test, out_dir + "/test_manifest.jsonl");
  return c;
}

}  // namespace mstar
