#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "abnet/augment.hpp"
#include "abnet/backbone.hpp"
#include "abnet/comparator.hpp"
#include "abnet/saliency.hpp"
#include "abnet/tensor.hpp"

namespace abnet {

struct ModelConfig {
  int image_size = 32;
  int n_patches = 5;
  int k_affine = 4;
  bool use_la = true;
  bool use_sp = true;
  bool use_lr = true;
  bool use_handcrafted_aug = false;
  bool affine_spatial_only = false;
  bool attention_whole_image = false;
  bool gamma_two_blocks = false;
  bool gamma_output_sigmoid = true;

  int family_size() const {
    return 1 + (use_handcrafted_aug ? 4 : 0) + (use_la ? k_affine : 0);
  }
  int group_size() const { return 1 + (use_sp ? n_patches * n_patches : 0); }
};

// Embedded support image with its augmented families, reused across every
// query of an episode.
struct SupportContext {
  FeatureSet features;
  AugmentedFamily global_family;
  std::vector<AugmentedFamily> patch_families;  // per support patch when SP is on
};

struct PairScore {
  Tensor o;                     // scalar overall similarity
  std::vector<Tensor> weights;  // attention gates used for this pair (LR only)
};

class Model {
 public:
  void init(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  Backbone& backbone() { return backbone_; }
  AffineBank& bank() { return bank_; }
  ComparatorParams& comparator() { return cmp_; }
  int feature_size() const { return feature_size_; }
  int map_size() const { return feature_size_ / 2; }

  // embeds the image (and its patches when SP is on) and applies the
  // configured augmentations to every support feature map
  SupportContext build_support_context(const Image& image, const PatchSet* patches, bool train,
                                       Tape* tape);
  FeatureSet build_query_features(const Image& image, const PatchSet* patches, bool train,
                                  Tape* tape);

  PairScore score_pair(const SupportContext& support, const FeatureSet& query, bool train,
                       Tape* tape);

  std::vector<std::pair<std::string, Tensor>> named_params();
  std::vector<Tensor> bank_params();
  std::vector<Tensor> non_bank_params();
  std::vector<std::pair<std::string, std::vector<double>*>> named_state();  // bn running stats

  void randomize_weights(std::uint64_t seed);  // scrambles every parameter

 private:
  AugmentedFamily build_family(const Image& raster, const Tensor& identity_map, bool train,
                               Tape* tape);
  ModelConfig cfg_;
  Backbone backbone_;
  AffineBank bank_;
  ComparatorParams cmp_;
  int feature_size_ = 0;
};

// versioned flat-text checkpoint: parameters, batchnorm state, optimizer
// moments and the next training episode; byte-stable given identical state
void save_checkpoint(const std::string& path, Model& model, const Adam* opt,
                     std::int64_t next_episode);
// returns the stored next-episode counter; opt may be null to skip optimizer
// state (evaluation only)
std::int64_t load_checkpoint(const std::string& path, Model& model, Adam* opt);

}  // namespace abnet
