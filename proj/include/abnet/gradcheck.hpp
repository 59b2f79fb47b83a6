#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "abnet/tensor.hpp"

namespace abnet {

// Compares reverse-mode gradients of a scalar-valued closure against central
// finite differences.  The closure must rebuild its forward pass from the
// current leaf values on every call; pass tape==nullptr for value-only runs.
//
// Relative error per coordinate: |analytic - numeric| / max(1e-8, |analytic| + |numeric|).

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_leaf;
  int worst_index = -1;
  int coords_checked = 0;
};

// leaves must all have requires_grad set.  coords_per_leaf < 0 checks every
// coordinate; otherwise a deterministic random subset of that size.
GradCheckResult finite_diff_check(const std::function<Tensor(Tape*)>& f,
                                  const std::vector<std::pair<std::string, Tensor>>& leaves,
                                  double epsilon, int coords_per_leaf = -1,
                                  std::uint64_t seed = 0x5eedULL);

}  // namespace abnet
