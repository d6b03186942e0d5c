#pragma once

#include <Eigen/Core>

#include "sptn/unitary.hpp"

namespace sptn {

/// Area under the ROC curve by the Mann-Whitney rank statistic, ties
/// receiving midranks. Higher scores indicate label 1. Throws InvalidArgument
/// when only one class is present.
double auc(const Vector& scores, const Eigen::VectorXi& labels);

/// (1/n) sum_i log p(x_i); non-finite if any term is.
double mean_loglik(const Vector& logpdf);

}  // namespace sptn
