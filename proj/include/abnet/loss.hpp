#pragma once

#include <vector>

#include "abnet/augment.hpp"
#include "abnet/tensor.hpp"

namespace abnet {

struct LossBreakdown {
  double cls = 0.0, att = 0.0, aug = 0.0, total = 0.0;
  double lambda_att = 0.1, lambda_aug = 0.1;
  double s_att = 1.0, s_aug = 1.0;
};

// P = sigmoid(o)
Tensor prob_score(const Tensor& o, Tape* tape);
double prob_score(double o);

// mean over all (query, support) pairs of (P - 1[same class])^2
Tensor loss_cls(const Tensor& probs_flat, const std::vector<int>& query_labels,
                const std::vector<int>& support_labels, Tape* tape);

// (s_att / n^2) * sum |alpha(i,j)|
Tensor loss_att(const Tensor& weights_flat, double s_att, Tape* tape);

// (s_aug / (B*C)) * sum over same-class pairs and learned variants of
// ||f(I_q) - f_k(I_s)||^2; zero when no same-class pair or no learned variant
Tensor loss_aug(const std::vector<Tensor>& query_globals,
                const std::vector<AugmentedFamily>& support_families,
                const std::vector<int>& query_labels, const std::vector<int>& support_labels,
                double s_aug, Tape* tape);

// total = cls + lambda_att*att + lambda_aug*aug, composed in that order
Tensor total_loss(const Tensor& cls, const Tensor& att, const Tensor& aug, double lambda_att,
                  double lambda_aug, Tape* tape, LossBreakdown* breakdown);

}  // namespace abnet
