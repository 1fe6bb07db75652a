// Named parameter tensors, the AdamW optimizer, and the self-describing
// checkpoint container (JSON header + raw little-endian doubles).
#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "json.hpp"
#include "mstar/mat.hpp"

namespace mstar {

using ParamMap = std::map<std::string, Mat>;  // ordered => deterministic walks

struct AdamW {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled; applied uniformly when non-zero
  int64_t t = 0;
  std::map<std::string, Mat> m, v;

  // Applies one update with the given learning rate. Parameters without an
  // entry in grads (frozen or unused this step) are left untouched.
  void step(ParamMap& params, const std::map<std::string, Mat>& grads, double lr);
};

// Fingerprint over the config dump and every tensor's name/shape/bytes.
uint64_t model_fingerprint(const nlohmann::json& config, const ParamMap& params);

struct Checkpoint {
  nlohmann::json config;
  ParamMap params;
  uint64_t fingerprint = 0;
};

void save_checkpoint(const std::string& path, const nlohmann::json& config,
                     const ParamMap& params);
// Verifies the stored fingerprint against the recomputed one.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace mstar
