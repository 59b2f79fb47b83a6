#pragma once

#include <random>
#include <string>
#include <vector>

#include "abnet/augment.hpp"
#include "abnet/backbone.hpp"
#include "abnet/tensor.hpp"

namespace abnet {

// three dense layers over the pooled triplet: relu, relu, sigmoid
struct AttentionMlp {
  Tensor w1, b1, w2, b2, w3, b3;
  void init(int in_dim, std::mt19937_64& rng);
  Tensor forward(const Tensor& pooled_triplet, Tape* tape);  // scalar in (0,1)
  std::vector<std::pair<std::string, Tensor>> named_params();
};

// merging module gamma: basic conv block(s) over the stacked similarity group,
// flattened, then two dense layers
struct MergeHead {
  ConvBlock block;
  ConvBlock block2;  // only used in the two-block variant
  Tensor w1, b1, w2, b2;
  bool two_blocks = false;
  bool output_sigmoid = true;

  void init(int in_channels, int map_h, int map_w, bool two_blocks_, bool output_sigmoid_,
            std::mt19937_64& rng);
  Tensor forward(const Tensor& stacked_maps, bool train, Tape* tape);  // scalar
  std::vector<std::pair<std::string, Tensor>> named_params();
};

struct ComparatorParams {
  ConvBlock g;  // per-variant pair comparison
  ConvBlock h;  // accumulation over the family, followed by a 2x2 pool
  AttentionMlp attention;
  MergeHead merge;
  bool attention_whole_image = false;  // attention triplet uses global features

  std::vector<std::pair<std::string, Tensor>> named_params();
};

struct SimilarityMap {
  Tensor map;  // [C_m, H_m, W_m]
  int support_patch = -1, query_patch = -1;  // -1,-1 for the global map
};

struct SimilarityGroup {
  SimilarityMap global;
  std::vector<SimilarityMap> locals;  // n^2 entries, row-major (support i, query j)
  std::vector<Tensor> weights;        // scalar per local map; empty when re-weighting is off
  int n = 0;
};

// query-first channel concatenation of one comparison pair
Tensor pair_tensor(const Tensor& query_map, const Tensor& support_variant, Tape* tape);

// g applied to every family member independently, concatenated, then h + pool
Tensor similarity_map(const Tensor& query_map, const AugmentedFamily& support_family,
                      ComparatorParams& params, bool train, Tape* tape);

// one global map plus n^2 locals with attention weights (Eq. 7/8 structure)
SimilarityGroup build_group(const FeatureSet& support, const FeatureSet& query,
                            const AffineBank& bank, ComparatorParams& params, bool train,
                            Tape* tape);

Tensor attention_weight(const Tensor& support_feat, const Tensor& query_feat,
                        const Tensor& similarity, ComparatorParams& params, Tape* tape);

// weighted locals and the global map stacked in channel order, then gamma
Tensor merge_score(const SimilarityGroup& group, ComparatorParams& params, bool train, Tape* tape);

struct Classification {
  int predicted_class = -1;
  std::vector<double> class_scores;
};

// per-class arithmetic mean of pair scores, argmax with lowest-index ties
Classification classify_from_scores(const std::vector<std::vector<double>>& scores_per_class);

}  // namespace abnet
