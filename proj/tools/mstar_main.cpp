// mstar: desk-scale scene-text retrieval pipeline. Subcommands cover corpus
// generation, training, indexing, querying, evaluation, and ablations. Exit
// codes: 0 success, 1 operational error, 2 invalid arguments. Reports carry
// no timestamps, so a fixed seed reproduces them byte for byte.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mstar/retrieval.hpp"
#include "mstar/synthgen.hpp"
#include "mstar/trainer.hpp"

namespace {

using namespace mstar;

void write_json(const std::string& path, const nlohmann::json& j) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  f << j.dump(2) << "\n";
}

std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s + sep) {
    if (c == sep) {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  return out;
}

nlohmann::json manifest_stats(const DatasetManifest& m) {
  std::map<std::string, int> per_style;
  for (const QueryRecord& q : m.queries) per_style[style_name(q.style)]++;
  return {{"images", m.images.size()},
          {"queries", m.queries.size()},
          {"queries_per_style", per_style}};
}

nlohmann::json report_json(const EvalReport& rep) {
  nlohmann::json rows = nlohmann::json::array();
  for (const EvalRow& r : rep.rows)
    rows.push_back({{"style", style_name(r.style)}, {"queries", r.queries}, {"map", r.map}});
  return {{"scorer", scorer_name(rep.scorer)},
          {"reranked", rep.reranked},
          {"rows", rows},
          {"overall", rep.overall},
          {"skipped", rep.skipped}};
}

void print_report(const EvalReport& rep) {
  std::printf("scorer=%s reranked=%s\n", scorer_name(rep.scorer), rep.reranked ? "yes" : "no");
  std::printf("%-10s %8s %8s\n", "style", "queries", "map");
  for (const EvalRow& r : rep.rows)
    std::printf("%-10s %8d %8.4f\n", style_name(r.style), r.queries, r.map);
  std::printf("%-10s %8s %8.4f\n", "overall", "-", rep.overall);
  if (rep.skipped) std::printf("skipped queries: %d\n", rep.skipped);
}

struct CommonArgs {
  std::string config, out, checkpoint, index, data = ".";
  std::string manifest = "test_manifest.jsonl";
  std::string style = "word", query, scorer = "model", dump_attn, toggles = "pve,mim";
  std::string seeds;
  uint64_t seed = 0;
  bool seed_set = false;
  bool rerank = false;
  double rerank_frac = 0.02;
  int resolution = 0;
  int top = 10;
};

DatasetManifest load_split(const CommonArgs& a) {
  return load_manifest(a.data + "/" + a.manifest);
}

int run_gen(const CommonArgs& a) {
  GenConfig cfg = a.config.empty() ? GenConfig{} : GenConfig::from_json_file(a.config);
  if (a.seed_set) cfg.seed = a.seed;
  Corpus corpus = make_corpus(cfg, a.out);
  nlohmann::json rep = {{"seed", cfg.seed},
                        {"train", manifest_stats(corpus.train)},
                        {"test", manifest_stats(corpus.test)}};
  write_json(a.out + "/gen_report.json", rep);
  std::printf("generated %zu train / %zu test images under %s\n", corpus.train.images.size(),
              corpus.test.images.size(), a.out.c_str());
  for (const char* split : {"train", "test"})
    for (const auto& [style, n] : rep.at(split).at("queries_per_style").items())
      std::printf("  %s %s queries: %d\n", split, style.c_str(), n.get<int>());
  return 0;
}

int run_train(const CommonArgs& a) {
  TrainConfig cfg = TrainConfig::from_json_file(a.config);
  if (a.seed_set) cfg.seed = a.seed;
  CommonArgs src = a;
  if (a.manifest == "test_manifest.jsonl") src.manifest = "train_manifest.jsonl";
  DatasetManifest data = load_split(src);
  TrainResult res = train(cfg, data, a.data, a.out);
  if (res.diverged) {
    std::fprintf(stderr, "training diverged after %d steps; last good parameters kept at %s\n",
                 res.steps_done, res.final_checkpoint.c_str());
    return 1;
  }
  std::printf("trained %d steps; final losses total=%.4f l_c=%.4f l_m=%.4f\n", res.steps_done,
              res.last.total, res.last.l_c, res.last.l_m);
  std::printf("checkpoint: %s\nmetrics: %s/metrics.jsonl\n", res.final_checkpoint.c_str(),
              a.out.c_str());
  return 0;
}

int run_index(const CommonArgs& a) {
  int res = 0;
  Model m = model_from_checkpoint(load_checkpoint(a.checkpoint), &res);
  if (a.resolution > 0) res = a.resolution;
  if (!a.dump_attn.empty()) std::filesystem::create_directories(a.dump_attn);
  DatasetManifest manifest = load_split(a);
  CorpusIndex idx = build_index(m, manifest, a.data, res, a.dump_attn);
  const auto parent = std::filesystem::path(a.out).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  save_index(idx, a.out);
  std::printf("indexed %zu images at %dpx (%d slots each): %s\n", idx.ids.size(), res, idx.S,
              a.out.c_str());
  return 0;
}

QueryRecord make_query(const CommonArgs& a) {
  QueryRecord q;
  q.style = style_from_name(a.style);
  q.text = a.query;
  if (q.style == QueryStyle::combined) q.items = split_list(a.query, ' ');
  return q;
}

int run_search(const CommonArgs& a) {
  Model m = model_from_checkpoint(load_checkpoint(a.checkpoint));
  CorpusIndex idx = load_index(a.index);
  QueryRecord q = make_query(a);
  RankedList list = rank(m, q, idx);
  if (a.rerank) {
    DatasetManifest manifest = load_split(a);
    list = rerank(m, q, list, a.rerank_frac, manifest, a.data, idx.resolution);
  }
  const int n = a.top > 0 ? std::min<int>(a.top, list.items.size())
                          : static_cast<int>(list.items.size());
  std::printf("%-6s %-8s %-10s %s\n", "rank", "id", "score", "stage");
  nlohmann::json rows = nlohmann::json::array();
  for (int i = 0; i < n; ++i) {
    const char* stage = i < list.reranked_k ? "reranked" : "initial";
    std::printf("%-6d %-8d %-10.6f %s\n", i + 1, list.items[i].id, list.items[i].score, stage);
    rows.push_back({{"rank", i + 1},
                    {"id", list.items[i].id},
                    {"score", list.items[i].score},
                    {"stage", stage}});
  }
  if (!a.out.empty())
    write_json(a.out, {{"query", query_text(q)},
                       {"style", style_name(q.style)},
                       {"reranked_k", list.reranked_k},
                       {"results", rows}});
  return 0;
}

int run_eval(const CommonArgs& a) {
  const Scorer scorer = scorer_from_name(a.scorer);
  DatasetManifest manifest = load_split(a);
  EvalReport rep;
  if (scorer == Scorer::model) {
    Model m = model_from_checkpoint(load_checkpoint(a.checkpoint));
    CorpusIndex idx = load_index(a.index);
    rep = evaluate(&m, &idx, manifest, a.data, scorer, a.rerank, a.rerank_frac);
  } else {
    rep = evaluate(nullptr, nullptr, manifest, a.data, scorer, false, a.rerank_frac);
  }
  print_report(rep);
  if (!a.out.empty()) write_json(a.out, report_json(rep));
  return 0;
}

int run_ablate(const CommonArgs& a) {
  TrainConfig base = TrainConfig::from_json_file(a.config);
  std::vector<std::string> toggles = split_list(a.toggles, ',');
  for (const std::string& t : toggles)
    if (t != "pve" && t != "mim" && t != "instructions")
      throw std::invalid_argument("unknown toggle: " + t);
  std::vector<uint64_t> seeds;
  for (const std::string& s : split_list(a.seeds, ',')) seeds.push_back(std::stoull(s));
  if (seeds.empty()) seeds.push_back(a.seed_set ? a.seed : base.seed);

  std::vector<AblateVariant> variants;
  for (unsigned mask = 0; mask < (1u << toggles.size()); ++mask) {
    AblateVariant v;
    v.T = base.model.T;
    std::string name;
    for (size_t i = 0; i < toggles.size(); ++i) {
      const bool off = mask & (1u << i);
      if (!name.empty()) name += ',';
      name += toggles[i] + (off ? "=off" : "=on");
      if (off && toggles[i] == "pve") v.T = 0;
      if (off && toggles[i] == "mim") v.mim_on = false;
      if (off && toggles[i] == "instructions") v.instructions_on = false;
    }
    v.name = name.empty() ? "full" : name;
    variants.push_back(std::move(v));
  }

  CommonArgs train_src = a;
  train_src.manifest = "train_manifest.jsonl";
  DatasetManifest train_data = load_split(train_src);
  DatasetManifest test_data = load_split(a);
  std::vector<AblateRow> rows = ablate(base, variants, seeds, train_data, test_data, a.data, a.out);

  // Per-variant summary: mean MAP per style over seeds.
  std::printf("%-40s %8s", "variant", "overall");
  std::vector<QueryStyle> styles;
  for (const AblateRow& r : rows)
    for (const EvalRow& er : r.report.rows)
      if (std::find(styles.begin(), styles.end(), er.style) == styles.end())
        styles.push_back(er.style);
  for (QueryStyle s : styles) std::printf(" %8s", style_name(s));
  std::printf("\n");
  nlohmann::json runs = nlohmann::json::array();
  for (const AblateVariant& v : variants) {
    double overall = 0.0;
    std::map<QueryStyle, std::pair<double, int>> per;
    int n = 0;
    for (const AblateRow& r : rows)
      if (r.name == v.name) {
        overall += r.report.overall;
        ++n;
        for (const EvalRow& er : r.report.rows) {
          per[er.style].first += er.map;
          per[er.style].second += 1;
        }
        runs.push_back({{"variant", r.name}, {"seed", r.seed}, {"report", report_json(r.report)}});
      }
    std::printf("%-40s %8.4f", v.name.c_str(), overall / std::max(1, n));
    for (QueryStyle s : styles) {
      const auto it = per.find(s);
      if (it == per.end())
        std::printf(" %8s", "-");
      else
        std::printf(" %8.4f", it->second.first / it->second.second);
    }
    std::printf("\n");
  }
  write_json(a.out + "/ablate_report.json", {{"seeds", seeds}, {"runs", runs}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale scene-text retrieval pipeline"};
  app.require_subcommand(1);
  CommonArgs a;

  CLI::App* gen = app.add_subcommand("gen", "render a synthetic corpus with manifests");
  gen->add_option("--config", a.config, "generator config (JSON)")->check(CLI::ExistingFile);
  gen->add_option("--seed", a.seed, "override the config seed");
  gen->add_option("--out", a.out, "output corpus directory")->required();

  CLI::App* tr = app.add_subcommand("train", "train a model on a generated corpus");
  tr->add_option("--config", a.config, "training config (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  tr->add_option("--seed", a.seed, "override the config seed");
  tr->add_option("--data", a.data, "corpus directory from gen")->required();
  tr->add_option("--manifest", a.manifest, "manifest file name under --data");
  tr->add_option("--out", a.out, "run directory for checkpoints and metrics")->required();

  CLI::App* ix = app.add_subcommand("index", "embed a corpus split into a slot index");
  ix->add_option("--checkpoint", a.checkpoint, "trained checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  ix->add_option("--data", a.data, "corpus directory")->required();
  ix->add_option("--manifest", a.manifest, "manifest file name under --data");
  ix->add_option("--out", a.out, "index file path")->required();
  ix->add_option("--resolution", a.resolution, "indexing side in pixels (0 = from checkpoint)");
  ix->add_option("--dump-attn", a.dump_attn, "directory for attention heatmap dumps");

  CLI::App* se = app.add_subcommand("search", "rank a corpus index for one query");
  se->add_option("--checkpoint", a.checkpoint, "trained checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  se->add_option("--index", a.index, "index file from `index`")
      ->required()
      ->check(CLI::ExistingFile);
  se->add_option("--query", a.query, "query text")->required();
  se->add_option("--style", a.style, "query style: word|phrase|combined|semantic");
  se->add_flag("--rerank", a.rerank, "rerank the top fraction by match probability");
  se->add_option("--rerank-frac", a.rerank_frac, "fraction of the corpus to rerank");
  se->add_option("--data", a.data, "corpus directory (needed with --rerank)");
  se->add_option("--manifest", a.manifest, "manifest file name under --data");
  se->add_option("--top", a.top, "rows to print (0 = all)");
  se->add_option("--out", a.out, "machine-readable result path (JSON)");

  CLI::App* ev = app.add_subcommand("eval", "mean average precision per query style");
  ev->add_option("--checkpoint", a.checkpoint, "trained checkpoint (model scorer)")
      ->check(CLI::ExistingFile);
  ev->add_option("--index", a.index, "index file (model scorer)")->check(CLI::ExistingFile);
  ev->add_option("--data", a.data, "corpus directory")->required();
  ev->add_option("--manifest", a.manifest, "manifest file name under --data");
  ev->add_option("--scorer", a.scorer, "scorer: model|oracle|edit");
  ev->add_flag("--rerank", a.rerank, "rerank before scoring (model scorer)");
  ev->add_option("--rerank-frac", a.rerank_frac, "fraction of the corpus to rerank");
  ev->add_option("--out", a.out, "machine-readable report path (JSON)");

  CLI::App* ab = app.add_subcommand("ablate", "train and evaluate toggled variants");
  ab->add_option("--config", a.config, "training config (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  ab->add_option("--data", a.data, "corpus directory")->required();
  ab->add_option("--out", a.out, "output directory for runs and the report")->required();
  ab->add_option("--toggles", a.toggles, "comma list of pve,mim,instructions");
  ab->add_option("--seeds", a.seeds, "comma list of training seeds");
  ab->add_option("--seed", a.seed, "single training seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  a.seed_set = gen->count("--seed") || tr->count("--seed") || ab->count("--seed");

  try {
    if (gen->parsed()) return run_gen(a);
    if (tr->parsed()) return run_train(a);
    if (ix->parsed()) return run_index(a);
    if (se->parsed()) return run_search(a);
    if (ev->parsed()) return run_eval(a);
    if (ab->parsed()) return run_ablate(a);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
