#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "abnet/backbone.hpp"
#include "abnet/tensor.hpp"

namespace abnet {

// Learnable transform bank: one fixed identity plus K trainable 3x4 matrices
// (the top three rows of a 4x4 affine matrix whose bottom row stays 0,0,0,1).
struct AffineBank {
  std::vector<Tensor> matrices;  // K entries of shape [12], row-major 3x4
  bool spatial_only = false;     // restrict the transform to the x/y plane

  int k() const { return (int)matrices.size(); }
  std::vector<std::pair<std::string, Tensor>> named_params() const;
};

// identity plus zero-mean uniform perturbation of scale 0.05
AffineBank init_bank(int k, std::uint64_t seed, bool spatial_only = false);

// Inverse warp: each output cell at normalized coordinates in [-1,1]^3 over
// (x: width, y: height, z: channel) samples the input at A*(x,y,z,1) with
// trilinear interpolation; grid corners outside the volume contribute zero.
// Differentiable in the feature values and the 12 matrix entries.
Tensor apply_affine(const Tensor& feature, const Tensor& matrix, bool spatial_only, Tape* tape);

// family member 0 is the untouched source; member k is apply_affine with A_k
struct AugmentedFamily {
  std::vector<Tensor> members;
  int learned_begin = 1;  // members[learned_begin..] came from the learnable bank
};

AugmentedFamily augment_family(const Tensor& feature, const AffineBank& bank, Tape* tape);

}  // namespace abnet
