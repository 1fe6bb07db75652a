// Synthetic corpus: deterministic rendering, query derivation with a
// subset-count oracle, manifest round-trips, and validation errors.
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "doctest.h"
#include "mstar/synthgen.hpp"

using namespace mstar;
namespace fs = std::filesystem;

namespace {

std::string tmp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

// Independent binomial oracle for the expected number of k-subsets.
long long n_choose_k(int n, int k) {
  if (k < 0 || k > n) return 0;
  long long r = 1;
  for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

int count_rgb(const Image& im, const std::array<uint8_t, 3>& c) {
  int n = 0;
  for (size_t i = 0; i + 2 < im.pix.size(); i += 3)
    if (im.pix[i] == c[0] && im.pix[i + 1] == c[1] && im.pix[i + 2] == c[2]) ++n;
  return n;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return std::string(std::istreambuf_iterator<char>(f), {});
}

bool same_query(const QueryRecord& a, const QueryRecord& b) {
  return a.style == b.style && a.text == b.text && a.items == b.items &&
         a.positives == b.positives;
}

}  // namespace

TEST_CASE("render_scene is a pure function of the spec") {
  SceneSpec spec;
  spec.canvas = 48;
  spec.background = 2;
  spec.noise = true;
  spec.seed = 99;
  spec.words = {{"abc", 1, 1, 1, 0}, {"kw9", 1, 20, 2, 3}};
  const RenderedScene a = render_scene(spec);
  const RenderedScene b = render_scene(spec);
  CHECK(a.image.pix == b.image.pix);
  CHECK(a.words == std::vector<std::string>{"abc", "kw9"});
  spec.seed = 100;  // different noise draw
  const RenderedScene c = render_scene(spec);
  CHECK(a.image.pix != c.image.pix);
}

TEST_CASE("render_scene paints glyphs inside the word box only") {
  SceneSpec spec;
  spec.canvas = 32;
  spec.background = 0;
  spec.words = {{"abc", 1, 1, 1, 0}};
  const RenderedScene s = render_scene(spec);
  const auto& fg = text_color(0);
  const auto& bg = background_color(0);
  int inside = 0, outside = 0;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      const uint8_t* p = s.image.at(x, y);
      const bool is_fg = p[0] == fg[0] && p[1] == fg[1] && p[2] == fg[2];
      const bool in_box = x >= 1 && x < 1 + 17 && y >= 1 && y < 1 + 7;  // 6*3-1 wide
      if (is_fg && in_box) ++inside;
      if (is_fg && !in_box) ++outside;
      if (!in_box) CHECK((p[0] == bg[0] && p[1] == bg[1] && p[2] == bg[2]));
    }
  CHECK(inside > 0);
  CHECK(outside == 0);
}

TEST_CASE("doubling the glyph scale quadruples the painted area") {
  SceneSpec s1;
  s1.canvas = 48;
  s1.words = {{"ab", 1, 1, 1, 2}};
  SceneSpec s2 = s1;
  s2.words = {{"ab", 1, 1, 2, 2}};
  const int a1 = count_rgb(render_scene(s1).image, text_color(2));
  const int a2 = count_rgb(render_scene(s2).image, text_color(2));
  CHECK(a1 > 0);
  CHECK(a2 == 4 * a1);
}

TEST_CASE("render_scene rejects bad specs") {
  SceneSpec spec;
  spec.canvas = 32;
  spec.words = {{"abcdefghij", 0, 0, 2, 0}};  // 118px wide at scale 2
  try {
    render_scene(spec);
    CHECK(false);
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("abcdefghij") != std::string::npos);
  }
  spec.words = {{"", 0, 0, 1, 0}};
  CHECK_THROWS_AS(render_scene(spec), std::invalid_argument);
  spec.words = {{"ok", 0, 0, 1, text_palette_size()}};
  CHECK_THROWS_AS(render_scene(spec), std::invalid_argument);
  spec.words = {{"ok", 0, 0, 0, 0}};
  CHECK_THROWS_AS(render_scene(spec), std::invalid_argument);
  spec.words = {{"A!", 0, 0, 1, 0}};  // no glyphs outside a-z 0-9 space
  CHECK_THROWS_AS(render_scene(spec), std::invalid_argument);
  spec.words.clear();
  spec.background = background_palette_size();
  CHECK_THROWS_AS(render_scene(spec), std::invalid_argument);
  spec.background = 0;
  spec.canvas = 0;
  CHECK_THROWS_AS(render_scene(spec), std::invalid_argument);
  CHECK_THROWS_AS(background_color(-1), std::invalid_argument);
  CHECK_THROWS_AS(text_color(text_palette_size()), std::invalid_argument);
}

TEST_CASE("build_combined_queries matches the binomial count and is canonical") {
  const std::vector<std::string> words = {"delta", "alpha", "echo", "bravo", "carol"};
  const auto subs = build_combined_queries(words);  // min 3 chars, k in 2..4
  const long long expect = n_choose_k(5, 2) + n_choose_k(5, 3) + n_choose_k(5, 4);
  CHECK(static_cast<long long>(subs.size()) == expect);
  std::set<std::vector<std::string>> seen;
  for (const auto& s : subs) {
    CHECK(s.size() >= 2);
    CHECK(s.size() <= 4);
    CHECK(std::is_sorted(s.begin(), s.end()));
    CHECK(seen.insert(s).second);  // no duplicates
  }
  CHECK(std::is_sorted(subs.begin(), subs.end()));

  // Short words and duplicates drop out of the pool before enumeration.
  const auto small = build_combined_queries({"aa", "longword", "bb", "longword", "other"});
  CHECK(static_cast<long long>(small.size()) == n_choose_k(2, 2));
  CHECK(small[0] == std::vector<std::string>{"longword", "other"});

  // Wider k range on a bigger pool.
  std::vector<std::string> ten;
  for (int i = 0; i < 10; ++i) ten.push_back("word" + std::to_string(i));
  const auto wide = build_combined_queries(ten, 3, 1, 3);
  CHECK(static_cast<long long>(wide.size()) ==
        n_choose_k(10, 1) + n_choose_k(10, 2) + n_choose_k(10, 3));

  CHECK_THROWS_AS(build_combined_queries({}), std::invalid_argument);
}

TEST_CASE("select_frequent_queries ranks by positives then text") {
  DatasetManifest m;
  for (int id = 0; id < 5; ++id) {
    ImageRecord im;
    im.id = id;
    m.images.push_back(im);
  }
  auto add = [&](QueryStyle st, const std::string& text, std::vector<int> pos) {
    QueryRecord q;
    q.style = st;
    q.text = text;
    q.positives = std::move(pos);
    m.queries.push_back(std::move(q));
  };
  add(QueryStyle::word, "zebra", {0, 1});
  add(QueryStyle::word, "apple", {0, 1});        // ties zebra, wins on text
  add(QueryStyle::word, "mango", {0, 1, 2});     // most positives
  add(QueryStyle::word, "kiwi", {4});
  add(QueryStyle::phrase, "be fe", {0, 1, 2, 3});  // other style, ignored

  bool too_few = true;
  auto top = select_frequent_queries(m, QueryStyle::word, 3, &too_few);
  CHECK(!too_few);
  REQUIRE(top.size() == 3);
  CHECK(top[0].text == "mango");
  CHECK(top[1].text == "apple");
  CHECK(top[2].text == "zebra");

  auto all = select_frequent_queries(m, QueryStyle::word, 10, &too_few);
  CHECK(too_few);
  CHECK(all.size() == 4);
  CHECK(select_frequent_queries(m, QueryStyle::semantic, 2, &too_few).empty());
  CHECK(too_few);
  CHECK_THROWS_AS(select_frequent_queries(m, QueryStyle::word, -1), std::invalid_argument);
}

TEST_CASE("query_text joins items and query_words splits text") {
  QueryRecord w;
  w.style = QueryStyle::word;
  w.text = "hello";
  CHECK(query_text(w) == "hello");
  CHECK(query_words(w) == std::vector<std::string>{"hello"});

  QueryRecord c;
  c.style = QueryStyle::combined;
  c.items = {"ant", "bee", "cow"};
  CHECK(query_text(c) == "ant bee cow");
  CHECK(query_words(c) == c.items);

  QueryRecord s;
  s.style = QueryStyle::semantic;
  s.text = "a  sign that  says hi";  // double spaces collapse
  CHECK(query_words(s) ==
        std::vector<std::string>{"a", "sign", "that", "says", "hi"});
}

TEST_CASE("manifest survives an emit/load round-trip") {
  DatasetManifest m;
  m.split = "test";
  for (int id = 3; id < 6; ++id) {
    ImageRecord im;
    im.id = id;
    im.path = "images/img_" + std::to_string(id) + ".ppm";
    im.words = {"one", "two"};
    im.phrases = (id == 3) ? std::vector<std::string>{"one two"} : std::vector<std::string>{};
    im.caption = "a sign that says one";
    im.bg = "navy";
    m.images.push_back(im);
  }
  QueryRecord qw;
  qw.style = QueryStyle::word;
  qw.text = "one";
  qw.positives = {3, 4, 5};
  QueryRecord qc;
  qc.style = QueryStyle::combined;
  qc.items = {"one", "two"};
  qc.positives = {3, 5};
  QueryRecord qs;
  qs.style = QueryStyle::semantic;
  qs.text = "a sign that says one";
  qs.positives = {4};
  m.queries = {qw, qc, qs};

  const std::string dir = tmp_dir("mstar_manifest_rt");
  const std::string path = dir + "/m.jsonl";
  emit_manifest(m, path);
  const DatasetManifest r = load_manifest(path);
  CHECK(r.split == "test");
  REQUIRE(r.images.size() == 3);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(r.images[i].id == m.images[i].id);
    CHECK(r.images[i].path == m.images[i].path);
    CHECK(r.images[i].words == m.images[i].words);
    CHECK(r.images[i].phrases == m.images[i].phrases);
    CHECK(r.images[i].caption == m.images[i].caption);
    CHECK(r.images[i].bg == m.images[i].bg);
  }
  REQUIRE(r.queries.size() == 3);
  for (size_t i = 0; i < 3; ++i) CHECK(same_query(r.queries[i], m.queries[i]));
  fs::remove_all(dir);
}

TEST_CASE("manifest validation and parse errors carry context") {
  const std::string dir = tmp_dir("mstar_manifest_err");
  DatasetManifest m;
  ImageRecord im;
  im.id = 1;
  m.images = {im, im};  // duplicate id
  CHECK_THROWS_AS(emit_manifest(m, dir + "/x.jsonl"), std::invalid_argument);

  m.images.pop_back();
  QueryRecord q;
  q.style = QueryStyle::word;
  q.text = "word";
  m.queries = {q};  // no positives
  CHECK_THROWS_AS(emit_manifest(m, dir + "/x.jsonl"), std::invalid_argument);
  m.queries[0].positives = {7};  // missing image id
  CHECK_THROWS_AS(emit_manifest(m, dir + "/x.jsonl"), std::invalid_argument);
  m.queries[0].positives = {1};
  m.queries[0].text = "ab";  // short word query
  CHECK_THROWS_AS(emit_manifest(m, dir + "/x.jsonl"), std::invalid_argument);
  m.queries[0].style = QueryStyle::combined;
  m.queries[0].text.clear();
  m.queries[0].items = {"dup", "dup"};  // not distinct
  CHECK_THROWS_AS(emit_manifest(m, dir + "/x.jsonl"), std::invalid_argument);

  // Hand-written streams exercise the loader paths.
  auto write_lines = [&](const std::string& name, const std::vector<std::string>& lines) {
    std::ofstream f(dir + "/" + name);
    for (const auto& l : lines) f << l << "\n";
    return dir + "/" + name;
  };
  const std::string meta = R"({"kind":"meta","id":0,"payload":{"split":"train","version":1}})";
  try {
    load_manifest(write_lines("garbage.jsonl", {meta, "not json"}));
    CHECK(false);
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find(":2") != std::string::npos);
  }
  CHECK_THROWS_WITH_AS(
      load_manifest(write_lines("kind.jsonl",
                                {meta, R"({"kind":"blob","id":0,"payload":{}})"})),
      doctest::Contains("unknown record kind"), std::runtime_error);
  const std::string img =
      R"({"kind":"image","id":0,"payload":{"path":"p.ppm","words":["abc"],"phrases":[],"caption":"","bg":"black"}})";
  const std::string qline =
      R"({"kind":"query","id":0,"payload":{"style":"word","text":"abc","items":[],"positives":[0]}})";
  CHECK_THROWS_WITH_AS(load_manifest(write_lines("dupq.jsonl", {meta, img, qline, qline})),
                       doctest::Contains("duplicate query id"), std::runtime_error);
  CHECK_THROWS_AS(load_manifest(dir + "/missing.jsonl"), std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("make_vocab yields unique lowercase words, reproducibly") {
  const auto v = make_vocab(40, 5);
  CHECK(v.size() == 40);
  std::set<std::string> uniq(v.begin(), v.end());
  CHECK(uniq.size() == 40);
  for (const auto& w : v) {
    CHECK(w.size() >= 3);
    CHECK(w.size() <= 7);
    for (char c : w) CHECK((c >= 'a' && c <= 'z'));
  }
  CHECK(make_vocab(40, 5) == v);
  CHECK(make_vocab(40, 6) != v);
}

TEST_CASE("make_corpus writes a consistent, reproducible corpus") {
  GenConfig cfg;
  cfg.train_images = 6;
  cfg.test_images = 3;
  cfg.vocab = 12;
  cfg.canvas = 64;
  cfg.seed = 7;
  const std::string d1 = tmp_dir("mstar_corpus_a");
  const Corpus c = make_corpus(cfg, d1);

  REQUIRE(c.train.images.size() == 6);
  REQUIRE(c.test.images.size() == 3);
  for (int i = 0; i < 6; ++i) CHECK(c.train.images[i].id == i);
  for (int i = 0; i < 3; ++i) CHECK(c.test.images[i].id == 6 + i);
  for (const auto& split : {c.train, c.test}) {
    for (const ImageRecord& im : split.images) {
      CHECK(fs::exists(d1 + "/" + im.path));
      CHECK(!im.words.empty());
      CHECK(!im.caption.empty());
    }
    bool saw_word = false;
    for (const QueryRecord& q : split.queries) {
      CHECK(!q.positives.empty());
      CHECK(std::is_sorted(q.positives.begin(), q.positives.end()));
      saw_word = saw_word || q.style == QueryStyle::word;
    }
    CHECK(saw_word);
  }
  // load_manifest accepts what make_corpus emitted
  const DatasetManifest back = load_manifest(d1 + "/train_manifest.jsonl");
  CHECK(back.images.size() == c.train.images.size());
  CHECK(back.queries.size() == c.train.queries.size());

  // byte-identical re-run
  const std::string d2 = tmp_dir("mstar_corpus_b");
  make_corpus(cfg, d2);
  CHECK(slurp(d1 + "/train_manifest.jsonl") == slurp(d2 + "/train_manifest.jsonl"));
  CHECK(slurp(d1 + "/test_manifest.jsonl") == slurp(d2 + "/test_manifest.jsonl"));
  CHECK(slurp(d1 + "/" + c.train.images[0].path) == slurp(d2 + "/" + c.train.images[0].path));

  // word_query_top_n keeps exactly the most frequent word queries
  GenConfig capped = cfg;
  capped.word_query_top_n = 3;
  const std::string d3 = tmp_dir("mstar_corpus_c");
  const Corpus cc = make_corpus(capped, d3);
  std::vector<QueryRecord> kept;
  for (const QueryRecord& q : cc.train.queries)
    if (q.style == QueryStyle::word) kept.push_back(q);
  const auto want = select_frequent_queries(c.train, QueryStyle::word, 3);
  REQUIRE(kept.size() == want.size());
  for (size_t i = 0; i < kept.size(); ++i) CHECK(same_query(kept[i], want[i]));

  fs::remove_all(d1);
  fs::remove_all(d2);
  fs::remove_all(d3);
}

TEST_CASE("GenConfig json loading validates keys and ranges") {
  const std::string dir = tmp_dir("mstar_gencfg");
  auto write = [&](const std::string& name, const std::string& body) {
    std::ofstream f(dir + "/" + name);
    f << body;
    return dir + "/" + name;
  };
  const GenConfig c = GenConfig::from_json_file(
      write("ok.json", R"({"train_images": 10, "vocab": 25, "salience_skew": true})"));
  CHECK(c.train_images == 10);
  CHECK(c.test_images == 300);  // default survives
  CHECK(c.vocab == 25);
  CHECK(c.salience_skew);
  CHECK_THROWS_AS(GenConfig::from_json_file(write("bad1.json", R"({"vocabx": 3})")),
                  std::invalid_argument);
  CHECK_THROWS_AS(GenConfig::from_json_file(write("bad2.json", R"({"canvas": 8})")),
                  std::invalid_argument);
  CHECK_THROWS_AS(GenConfig::from_json_file(write("bad3.json", "{nope")), std::runtime_error);
  CHECK_THROWS_AS(GenConfig::from_json_file(dir + "/absent.json"), std::runtime_error);
  fs::remove_all(dir);
}
