// Attention-map binarization: coarse low-threshold filter, marker-based
// watershed on the negated map, connected-component cleanup; plus the mask
// inversion that turns salience into attention permission (1 = attendable).
#pragma once

#include <vector>

#include "mstar/mat.hpp"

namespace mstar {

struct AttentionMap {
  Mat grid;  // rows x cols over the patch grid, non-negative
  int step = 0;
};

struct BinaryMask {
  Mat grid;  // entries exactly 0.0 or 1.0
  int step = 0;
};

struct SigmaConfig {
  double low_threshold = 0.25;     // fraction of max, coarse filter
  double marker_threshold = 0.6;   // fraction of max, watershed seeds
  int min_component_area = 1;

  void validate() const;  // 0 < low < marker <= 1, area >= 1
};

// Salience mask sigma(C): 1 on bright basins claimed by marker-seeded
// watershed, 0 on the coarse-filtered background. Uniform maps are entirely
// salient. Deterministic; invariant to positive rescaling of C.
BinaryMask binarize_sigma(const AttentionMap& c, const SigmaConfig& cfg);

// Elementwise 1 - S. Throws on non-binary input.
BinaryMask invert_mask(const BinaryMask& s);

}  // namespace mstar
