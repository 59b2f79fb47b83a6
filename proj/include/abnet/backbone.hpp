#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "abnet/image.hpp"
#include "abnet/saliency.hpp"
#include "abnet/tensor.hpp"

namespace abnet {

// conv -> batchnorm -> relu, the basic block shared by the backbone and the
// comparison heads
struct ConvBlock {
  Tensor kernels, bias, gamma, beta;
  BatchNormState bn;
  int padding = 1;

  void init(int in_channels, int out_channels, int padding_, std::mt19937_64& rng);
  Tensor forward(const Tensor& input, bool train, Tape* tape);
  std::vector<std::pair<std::string, Tensor>> named_params(const std::string& prefix);
};

struct FeatureMap {
  Tensor map;        // [C, H_f, W_f]
  int source = -1;   // -1 global, otherwise patch index
};

struct FeatureSet {
  FeatureMap global;
  std::vector<FeatureMap> patches;  // exactly n_patches when patches are in use
};

// four basic convolution blocks, 64 channels each, 2x2 max-pool after the
// first two; paddings 0,0,1,1 so an 84x84 input lands on 19x19
struct Backbone {
  static constexpr int kChannels = 64;
  ConvBlock block1, block2, block3, block4;

  void init(std::mt19937_64& rng);
  Tensor embed(const Tensor& image_chw, bool train, Tape* tape);
  std::vector<std::pair<std::string, Tensor>> named_params();

  // spatial size after the conv/pool chain; throws below the minimum input
  static int feature_dim(int input_size);
};

// crop + bilinear-resize every patch to the full input size, then embed with
// the shared backbone parameters
FeatureSet embed_set(Backbone& backbone, const Image& image, const PatchSet& patches,
                     int input_size, bool train, Tape* tape);

}  // namespace abnet
