#include "abnet/comparator.hpp"

#include <cmath>
#include <stdexcept>

namespace abnet {

namespace {

Tensor kaiming_dense(int out_dim, int in_dim, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, std::sqrt(2.0 / in_dim));
  Tensor w = Tensor::zeros({out_dim, in_dim});
  for (std::int64_t i = 0; i < w.size(); ++i) w.data()[i] = d(rng);
  w.set_requires_grad(true);
  return w;
}

Tensor grad_bias(int n) {
  Tensor b = Tensor::zeros({n});
  b.set_requires_grad(true);
  return b;
}

}  // namespace

void AttentionMlp::init(int in_dim, std::mt19937_64& rng) {
  w1 = kaiming_dense(64, in_dim, rng);
  b1 = grad_bias(64);
  w2 = kaiming_dense(32, 64, rng);
  b2 = grad_bias(32);
  w3 = kaiming_dense(1, 32, rng);
  b3 = grad_bias(1);
}

Tensor AttentionMlp::forward(const Tensor& pooled_triplet, Tape* tape) {
  Tensor h = relu(dense(pooled_triplet, w1, b1, tape), tape);
  h = relu(dense(h, w2, b2, tape), tape);
  return sigmoid(dense(h, w3, b3, tape), tape);
}

std::vector<std::pair<std::string, Tensor>> AttentionMlp::named_params() {
  return {{"attention.w1", w1}, {"attention.b1", b1}, {"attention.w2", w2},
          {"attention.b2", b2}, {"attention.w3", w3}, {"attention.b3", b3}};
}

void MergeHead::init(int in_channels, int map_h, int map_w, bool two_blocks_,
                     bool output_sigmoid_, std::mt19937_64& rng) {
  two_blocks = two_blocks_;
  output_sigmoid = output_sigmoid_;
  block.init(in_channels, Backbone::kChannels, 1, rng);
  if (two_blocks) block2.init(Backbone::kChannels, Backbone::kChannels, 1, rng);
  const int flat = Backbone::kChannels * map_h * map_w;
  w1 = kaiming_dense(64, flat, rng);
  b1 = grad_bias(64);
  w2 = kaiming_dense(1, 64, rng);
  b2 = grad_bias(1);
}

Tensor MergeHead::forward(const Tensor& stacked_maps, bool train, Tape* tape) {
  Tensor h = block.forward(stacked_maps, train, tape);
  if (two_blocks) h = block2.forward(h, train, tape);
  Tensor flat = reshape(h, {(int)h.size()}, tape);
  Tensor d = relu(dense(flat, w1, b1, tape), tape);
  Tensor o = dense(d, w2, b2, tape);
  return output_sigmoid ? sigmoid(o, tape) : o;
}

std::vector<std::pair<std::string, Tensor>> MergeHead::named_params() {
  std::vector<std::pair<std::string, Tensor>> out = block.named_params("merge.block");
  if (two_blocks)
    for (auto& [n, t] : block2.named_params("merge.block2")) out.emplace_back(n, t);
  out.emplace_back("merge.w1", w1);
  out.emplace_back("merge.b1", b1);
  out.emplace_back("merge.w2", w2);
  out.emplace_back("merge.b2", b2);
  return out;
}

std::vector<std::pair<std::string, Tensor>> ComparatorParams::named_params() {
  std::vector<std::pair<std::string, Tensor>> out = g.named_params("g");
  for (auto& [n, t] : h.named_params("h")) out.emplace_back(n, t);
  for (auto& [n, t] : attention.named_params()) out.emplace_back(n, t);
  for (auto& [n, t] : merge.named_params()) out.emplace_back(n, t);
  return out;
}

Tensor pair_tensor(const Tensor& query_map, const Tensor& support_variant, Tape* tape) {
  if (query_map.shape() != support_variant.shape())
    throw std::invalid_argument("pair_tensor: feature shapes differ");
  return concat_channels({query_map, support_variant}, tape);
}

Tensor similarity_map(const Tensor& query_map, const AugmentedFamily& support_family,
                      ComparatorParams& params, bool train, Tape* tape) {
  std::vector<Tensor> per_variant;
  per_variant.reserve(support_family.members.size());
  for (const Tensor& variant : support_family.members)
    per_variant.push_back(params.g.forward(pair_tensor(query_map, variant, tape), train, tape));
  Tensor stacked = concat_channels(per_variant, tape);
  return maxpool2d(params.h.forward(stacked, train, tape), tape);
}

Tensor attention_weight(const Tensor& support_feat, const Tensor& query_feat,
                        const Tensor& similarity, ComparatorParams& params, Tape* tape) {
  Tensor pooled = concat_flat({global_avg_pool(support_feat, tape),
                               global_avg_pool(query_feat, tape),
                               global_avg_pool(similarity, tape)},
                              tape);
  return params.attention.forward(pooled, tape);
}

SimilarityGroup build_group(const FeatureSet& support, const FeatureSet& query,
                            const AffineBank& bank, ComparatorParams& params, bool train,
                            Tape* tape) {
  if (support.patches.size() != query.patches.size())
    throw std::invalid_argument("build_group: support and query patch counts differ");
  SimilarityGroup group;
  group.n = (int)support.patches.size();

  AugmentedFamily global_family = augment_family(support.global.map, bank, tape);
  group.global.map = similarity_map(query.global.map, global_family, params, train, tape);

  for (int i = 0; i < group.n; ++i) {
    AugmentedFamily fam = augment_family(support.patches[i].map, bank, tape);
    for (int j = 0; j < group.n; ++j) {
      SimilarityMap m;
      m.support_patch = i;
      m.query_patch = j;
      m.map = similarity_map(query.patches[j].map, fam, params, train, tape);
      const Tensor& sf =
          params.attention_whole_image ? support.global.map : support.patches[i].map;
      const Tensor& qf = params.attention_whole_image ? query.global.map : query.patches[j].map;
      group.weights.push_back(attention_weight(sf, qf, m.map, params, tape));
      group.locals.push_back(std::move(m));
    }
  }
  return group;
}

Tensor merge_score(const SimilarityGroup& group, ComparatorParams& params, bool train,
                   Tape* tape) {
  std::vector<Tensor> stacked;
  stacked.reserve(group.locals.size() + 1);
  for (std::size_t i = 0; i < group.locals.size(); ++i) {
    if (i < group.weights.size())
      stacked.push_back(mul_scalar(group.weights[i], group.locals[i].map, tape));
    else
      stacked.push_back(group.locals[i].map);  // re-weighting disabled: unit gate
  }
  stacked.push_back(group.global.map);
  return params.merge.forward(concat_channels(stacked, tape), train, tape);
}

Classification classify_from_scores(const std::vector<std::vector<double>>& scores_per_class) {
  Classification result;
  for (const auto& scores : scores_per_class) {
    if (scores.empty())
      throw std::invalid_argument("classify: a class has no support scores");
    double mean = 0.0;
    for (double s : scores) mean += s;
    result.class_scores.push_back(mean / scores.size());
  }
  for (std::size_t c = 0; c < result.class_scores.size(); ++c)
    if (result.predicted_class < 0 ||
        result.class_scores[c] > result.class_scores[result.predicted_class])
      result.predicted_class = (int)c;
  return result;
}

}  // namespace abnet
