#include "mstar/mask.hpp"

#include <cmath>
#include <queue>
#include <stdexcept>

namespace mstar {

void SigmaConfig::validate() const {
  if (!(low_threshold > 0.0 && low_threshold < marker_threshold && marker_threshold <= 1.0))
    throw std::invalid_argument("SigmaConfig: need 0 < low_threshold < marker_threshold <= 1");
  if (min_component_area < 1)
    throw std::invalid_argument("SigmaConfig: min_component_area must be >= 1");
}

namespace {

struct HeapEntry {
  double c;
  int idx;
  // Max-heap on attention value; ties resolve to the smallest index.
  bool operator<(const HeapEntry& o) const {
    if (c != o.c) return c < o.c;
    return idx > o.idx;
  }
};

}  // namespace

BinaryMask binarize_sigma(const AttentionMap& c, const SigmaConfig& cfg) {
  cfg.validate();
  const Mat& g = c.grid;
  if (g.empty()) throw std::invalid_argument("binarize_sigma: empty attention map");
  const int R = g.rows, C = g.cols, n = R * C;
  double mx = g.a[0], mn = g.a[0];
  for (double v : g.a) {
    if (!(std::isfinite(v)) || v < 0.0)
      throw std::invalid_argument("binarize_sigma: entries must be finite and non-negative");
    mx = std::max(mx, v);
    mn = std::min(mn, v);
  }
  BinaryMask out;
  out.step = c.step;
  out.grid = Mat(R, C);
  if (mn == mx) {  // uniform map: everything is salient by the stated tie rule
    out.grid.fill(1.0);
    return out;
  }

  const double low = cfg.low_threshold * mx;
  const double marker = cfg.marker_threshold * mx;
  // label: -1 unassigned, 0 background, >=1 foreground basin
  std::vector<int> label(n, -1);
  for (int i = 0; i < n; ++i)
    if (g.a[i] < low) label[i] = 0;

  const int dr[4] = {-1, 1, 0, 0};
  const int dc[4] = {0, 0, -1, 1};
  auto neighbors = [&](int i, auto&& fn) {
    const int r = i / C, cc = i % C;
    for (int k = 0; k < 4; ++k) {
      const int nr = r + dr[k], nc = cc + dc[k];
      if (nr >= 0 && nr < R && nc >= 0 && nc < C) fn(nr * C + nc);
    }
  };

  // Seed markers: connected regions of marker-bright cells, labelled in scan
  // order so labelling is deterministic.
  std::vector<char> seed(n, 0);
  int next_label = 1;
  for (int i = 0; i < n; ++i) {
    if (g.a[i] < marker || label[i] != -1) continue;
    const int lab = next_label++;
    std::queue<int> bfs;
    bfs.push(i);
    label[i] = lab;
    seed[i] = 1;
    while (!bfs.empty()) {
      const int u = bfs.front();
      bfs.pop();
      neighbors(u, [&](int v) {
        if (label[v] == -1 && g.a[v] >= marker) {
          label[v] = lab;
          seed[v] = 1;
          bfs.push(v);
        }
      });
    }
  }

  // Priority flood of the middle band: repeatedly take the unlabelled frontier
  // cell with the highest attention (ties: smallest index) and give it the
  // label of its strongest labelled neighbour (ties: smallest index).
  std::priority_queue<HeapEntry> heap;
  for (int i = 0; i < n; ++i) {
    if (label[i] != -1) continue;
    bool frontier = false;
    neighbors(i, [&](int v) { frontier = frontier || label[v] != -1; });
    if (frontier) heap.push({g.a[i], i});
  }
  while (!heap.empty()) {
    const HeapEntry e = heap.top();
    heap.pop();
    if (label[e.idx] != -1) continue;
    int best = -1;
    double best_c = -1.0;
    neighbors(e.idx, [&](int v) {
      if (label[v] == -1) return;
      if (g.a[v] > best_c || (g.a[v] == best_c && v < best)) {
        best_c = g.a[v];
        best = v;
      }
    });
    if (best < 0) continue;  // unreachable: pushed cells always had a labelled neighbour
    label[e.idx] = label[best];
    neighbors(e.idx, [&](int v) {
      if (label[v] == -1) heap.push({g.a[v], v});
    });
  }

  for (int i = 0; i < n; ++i) out.grid.a[i] = label[i] >= 1 ? 1.0 : 0.0;

  // Component cleanup: drop foreground components below the area floor unless
  // they contain a marker seed (seeded patches must stay salient).
  if (cfg.min_component_area > 1) {
    std::vector<char> vis(n, 0);
    for (int i = 0; i < n; ++i) {
      if (vis[i] || out.grid.a[i] != 1.0) continue;
      std::vector<int> comp;
      std::queue<int> bfs;
      bfs.push(i);
      vis[i] = 1;
      bool has_seed = false;
      while (!bfs.empty()) {
        const int u = bfs.front();
        bfs.pop();
        comp.push_back(u);
        has_seed = has_seed || seed[u];
        neighbors(u, [&](int v) {
          if (!vis[v] && out.grid.a[v] == 1.0) {
            vis[v] = 1;
            bfs.push(v);
          }
        });
      }
      if (static_cast<int>(comp.size()) < cfg.min_component_area && !has_seed)
        for (int u : comp) out.grid.a[u] = 0.0;
    }
  }
  return out;
}

BinaryMask invert_mask(const BinaryMask& s) {
  BinaryMask out;
  out.step = s.step;
  out.grid = Mat(s.grid.rows, s.grid.cols);
  for (size_t i = 0; i < s.grid.a.size(); ++i) {
    const double v = s.grid.a[i];
    if (v != 0.0 && v != 1.0)
      throw std::invalid_argument("invert_mask: input is not strictly binary");
    out.grid.a[i] = 1.0 - v;
  }
  return out;
}

}  // namespace mstar
