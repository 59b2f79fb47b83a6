#include "abnet/loss.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

namespace abnet {

Tensor prob_score(const Tensor& o, Tape* tape) { return sigmoid(o, tape); }
double prob_score(double o) { return 1.0 / (1.0 + std::exp(-o)); }

Tensor loss_cls(const Tensor& probs_flat, const std::vector<int>& query_labels,
                const std::vector<int>& support_labels, Tape* tape) {
  const std::size_t b = query_labels.size(), c = support_labels.size();
  if ((std::size_t)probs_flat.size() != b * c)
    throw std::invalid_argument("loss_cls: " + std::to_string(probs_flat.size()) +
                                " probabilities for " + std::to_string(b) + "x" +
                                std::to_string(c) + " pairs");
  const std::set<int> qset(query_labels.begin(), query_labels.end());
  const std::set<int> sset(support_labels.begin(), support_labels.end());
  if (qset != sset)
    throw std::invalid_argument("loss_cls: query and support label sets differ");
  std::vector<double> targets(b * c);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < c; ++j)
      targets[i * c + j] = query_labels[i] == support_labels[j] ? 1.0 : 0.0;
  return mse_vs_targets(probs_flat, targets, tape);
}

Tensor loss_att(const Tensor& weights_flat, double s_att, Tape* tape) {
  return scale(mean_abs(weights_flat, tape), s_att, tape);
}

Tensor loss_aug(const std::vector<Tensor>& query_globals,
                const std::vector<AugmentedFamily>& support_families,
                const std::vector<int>& query_labels, const std::vector<int>& support_labels,
                double s_aug, Tape* tape) {
  if (query_globals.size() != query_labels.size() ||
      support_families.size() != support_labels.size())
    throw std::invalid_argument("loss_aug: label count mismatch");
  const std::size_t b = query_globals.size(), c = support_families.size();
  Tensor acc;
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      if (query_labels[i] != support_labels[j]) continue;
      const AugmentedFamily& fam = support_families[j];
      for (std::size_t k = fam.learned_begin; k < fam.members.size(); ++k) {
        Tensor term = sq_diff_sum(query_globals[i], fam.members[k], tape);
        acc = acc.defined() ? add(acc, term, tape) : term;
      }
    }
  if (!acc.defined()) return Tensor::zeros({1});
  return scale(acc, s_aug / (double)(b * c), tape);
}

Tensor total_loss(const Tensor& cls, const Tensor& att, const Tensor& aug, double lambda_att,
                  double lambda_aug, Tape* tape, LossBreakdown* breakdown) {
  Tensor total = weighted_sum3(cls, att, aug, lambda_att, lambda_aug, tape);
  if (breakdown) {
    breakdown->cls = cls.scalar();
    breakdown->att = att.scalar();
    breakdown->aug = aug.scalar();
    breakdown->total = total.scalar();
    breakdown->lambda_att = lambda_att;
    breakdown->lambda_aug = lambda_aug;
  }
  return total;
}

}  // namespace abnet
