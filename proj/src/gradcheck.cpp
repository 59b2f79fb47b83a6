#include "abnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace abnet {

GradCheckResult finite_diff_check(const std::function<Tensor(Tape*)>& f,
                                  const std::vector<std::pair<std::string, Tensor>>& leaves,
                                  double epsilon, int coords_per_leaf, std::uint64_t seed) {
  for (const auto& [name, leaf] : leaves)
    if (!leaf.requires_grad())
      throw std::invalid_argument("finite_diff_check: leaf '" + name + "' lacks requires_grad");

  // analytic pass
  for (const auto& [name, leaf] : leaves) const_cast<Tensor&>(leaf).zero_grad();
  Tape tape;
  Tensor loss = f(&tape);
  tape.backward(loss);
  std::vector<std::vector<double>> analytic;
  for (const auto& [name, leaf] : leaves)
    analytic.emplace_back(leaf.grad(), leaf.grad() + leaf.size());

  std::mt19937_64 rng(seed);
  GradCheckResult res;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor leaf = leaves[li].second;
    const std::int64_t n = leaf.size();
    std::vector<std::int64_t> coords(n);
    std::iota(coords.begin(), coords.end(), 0);
    if (coords_per_leaf >= 0 && (std::int64_t)coords_per_leaf < n) {
      for (int i = 0; i < coords_per_leaf; ++i) {
        std::uniform_int_distribution<std::int64_t> pick(i, n - 1);
        std::swap(coords[i], coords[pick(rng)]);
      }
      coords.resize(coords_per_leaf);
    }
    for (std::int64_t ci : coords) {
      double* x = leaf.data() + ci;
      const double saved = *x;
      *x = saved + epsilon;
      const double up = f(nullptr).scalar();
      *x = saved - epsilon;
      const double down = f(nullptr).scalar();
      *x = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double a = analytic[li][ci];
      const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      ++res.coords_checked;
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_leaf = leaves[li].first;
        res.worst_index = (int)ci;
      }
    }
  }
  return res;
}

}  // namespace abnet
