#include "sptn/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <vector>

#include "sptn/error.hpp"

namespace sptn {

double auc(const Vector& scores, const Eigen::VectorXi& labels) {
  if (scores.size() != labels.size()) throw DimensionError("auc: label count", static_cast<long>(scores.size()), static_cast<long>(labels.size()));
  if (!scores.allFinite()) throw DomainError("auc: scores must be finite");
  const auto n = static_cast<std::size_t>(scores.size());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[static_cast<Eigen::Index>(a)] < scores[static_cast<Eigen::Index>(b)];
  });
  double rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[static_cast<Eigen::Index>(order[j])] == scores[static_cast<Eigen::Index>(order[i])]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      const int label = labels[static_cast<Eigen::Index>(order[k])];
      if (label != 0 && label != 1) throw InvalidArgument("auc: labels must be 0 or 1");
      if (label == 1) {
        rank_sum += midrank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw InvalidArgument("auc: undefined unless both classes are present");
  const double p = static_cast<double>(n_pos);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(n_neg));
}

double mean_loglik(const Vector& logpdf) {
  if (logpdf.size() == 0) throw InvalidArgument("mean_loglik: empty input");
  return logpdf.mean();
}

}  // namespace sptn
