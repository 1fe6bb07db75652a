// Staged-resolution trainer: warmup learning rates, AdamW, per-step metrics
// lines, per-stage checkpoints, divergence abort to the last good parameters,
// and the ablation driver that retrains toggled variants on shared seeds.
#pragma once

#include <string>
#include <vector>

#include "mstar/objective.hpp"
#include "mstar/retrieval.hpp"
#include "mstar/synthgen.hpp"

namespace mstar {

struct StageConfig {
  int resolution = 64;
  double lr = 1e-3;
  int warmup = 100;  // steps of linear warmup from 0
  int steps = 400;
  bool freeze_vision = false;  // pins the vision tower and projector
};

struct TrainConfig {
  ModelConfig model;
  std::vector<StageConfig> stages;
  int batch_size = 8;
  int queries_per_image = 2;
  bool word_anchor = true;  // first drawn query per image is one of its words
  double weight_decay = 0.0;
  uint64_t seed = 1;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  static TrainConfig from_json_file(const std::string& path);
  void validate() const;
};

struct TrainResult {
  bool diverged = false;
  int steps_done = 0;
  LossBreakdown last;
  std::vector<std::string> checkpoints;  // one per completed stage
  std::string final_checkpoint;          // last stage, or the abort snapshot
};

// Runs the staged schedule over the manifest's images, writing metrics.jsonl
// and stage checkpoints under out_dir. Deterministic given (config, data).
TrainResult train(const TrainConfig& cfg, const DatasetManifest& data,
                  const std::string& data_root, const std::string& out_dir);

// Trainer checkpoints store {"model": ..., "resolution": R}; bare model
// configs load too. resolution, when given, receives the stored value (or the
// model's base resolution as the fallback).
Model model_from_checkpoint(const Checkpoint& ck, int* resolution = nullptr);

struct AblateVariant {
  std::string name;
  bool instructions_on = true;
  bool mim_on = true;
  int T = 1;
};

struct AblateRow {
  std::string name;
  uint64_t seed = 0;
  EvalReport report;
};

// Trains every (variant, seed) pair on the shared corpus and evaluates MAP
// per style on the test split; rows come out variant-major, seed-minor.
std::vector<AblateRow> ablate(const TrainConfig& base, const std::vector<AblateVariant>& variants,
                              const std::vector<uint64_t>& seeds,
                              const DatasetManifest& train_data, const DatasetManifest& test_data,
                              const std::string& data_root, const std::string& out_dir);

}  // namespace mstar
