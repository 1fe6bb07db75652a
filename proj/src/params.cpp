#include "mstar/params.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace mstar {

void AdamW::step(ParamMap& params, const std::map<std::string, Mat>& grads, double lr) {
  ++t;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    const Mat& g = git->second;
    if (!g.same_shape(p)) throw std::invalid_argument("AdamW: grad shape mismatch for " + name);
    Mat& mm = m.try_emplace(name, p.rows, p.cols).first->second;
    Mat& vv = v.try_emplace(name, p.rows, p.cols).first->second;
    for (size_t i = 0; i < p.a.size(); ++i) {
      mm.a[i] = beta1 * mm.a[i] + (1.0 - beta1) * g.a[i];
      vv.a[i] = beta2 * vv.a[i] + (1.0 - beta2) * g.a[i] * g.a[i];
      const double mhat = mm.a[i] / bc1;
      const double vhat = vv.a[i] / bc2;
      p.a[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p.a[i]);
    }
  }
}

uint64_t model_fingerprint(const nlohmann::json& config, const ParamMap& params) {
  const std::string cfg = config.dump();
  uint64_t h = fnv1a64(cfg.data(), cfg.size());
  for (const auto& [name, t] : params) {
    h = fnv1a64(name.data(), name.size(), h);
    const int dims[2] = {t.rows, t.cols};
    h = fnv1a64(dims, sizeof(dims), h);
    h = fnv1a64(t.a.data(), t.a.size() * sizeof(double), h);
  }
  return h;
}

namespace {
constexpr char kMagic[] = "MSTARCKPT1\n";
}

void save_checkpoint(const std::string& path, const nlohmann::json& config,
                     const ParamMap& params) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, t] : params)
    tensors.push_back({{"name", name}, {"rows", t.rows}, {"cols", t.cols}});
  nlohmann::json header = {{"version", 1},
                           {"fingerprint", model_fingerprint(config, params)},
                           {"config", config},
                           {"tensors", tensors}};
  f << kMagic << header.dump() << "\n";
  for (const auto& [name, t] : params) {
    (void)name;
    f.write(reinterpret_cast<const char*>(t.a.data()),
            static_cast<std::streamsize>(t.a.size() * sizeof(double)));
  }
  if (!f) throw std::runtime_error("save_checkpoint: short write to " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::string magic(sizeof(kMagic) - 1, '\0');
  f.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (magic != kMagic) throw std::runtime_error("load_checkpoint: bad magic in " + path);
  std::string line;
  if (!std::getline(f, line)) throw std::runtime_error("load_checkpoint: missing header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("load_checkpoint: bad header in " + path + ": " + e.what());
  }
  if (header.value("version", 0) != 1)
    throw std::runtime_error("load_checkpoint: unsupported version in " + path);
  Checkpoint ck;
  ck.config = header.at("config");
  for (const auto& t : header.at("tensors")) {
    const std::string name = t.at("name").get<std::string>();
    Mat m(t.at("rows").get<int>(), t.at("cols").get<int>());
    f.read(reinterpret_cast<char*>(m.a.data()),
           static_cast<std::streamsize>(m.a.size() * sizeof(double)));
    if (f.gcount() != static_cast<std::streamsize>(m.a.size() * sizeof(double)))
      throw std::runtime_error("load_checkpoint: truncated tensor " + name + " in " + path);
    ck.params.emplace(name, std::move(m));
  }
  ck.fingerprint = header.at("fingerprint").get<uint64_t>();
  if (ck.fingerprint != model_fingerprint(ck.config, ck.params))
    throw std::runtime_error("load_checkpoint: fingerprint mismatch (corrupt file?) " + path);
  return ck;
}

}  // namespace mstar
