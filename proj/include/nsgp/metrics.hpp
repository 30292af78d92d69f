#pragma once

#include <cstddef>
#include <vector>

#include "nsgp/linalg.hpp"

namespace nsgp {

double rmse(const Vector& pred_mean, const Vector& targets);

/// Per-point -log N(y_i; mu_i, var_i).
Vector pointwise_nlpd(const Vector& mean, const Vector& variance, const Vector& targets);
/// Mean of pointwise_nlpd.
double nlpd(const Vector& mean, const Vector& variance, const Vector& targets);

/// Per-point -log of the equal-weight mixture of Gaussian components
/// (columns), via log-mean-exp.
Vector pointwise_nlpd_mixture(const Matrix& means, const Matrix& variances, const Vector& targets);
double nlpd_mixture(const Matrix& means, const Matrix& variances, const Vector& targets);

/// Change of variables for a model of z = log y scored on y: adds log y_i.
/// Requires strictly positive y.
Vector lognormal_jacobian(const Vector& targets);

struct MeanStderr {
    double mean = 0.0;
    double stderr_ = 0.0;  ///< sample sd (n-1) / sqrt(n); 0 for a single value
    std::size_t count = 0;
};
MeanStderr mean_stderr(const std::vector<double>& values);

struct RegimeMetric {
    int regime = 0;
    std::size_t count = 0;
    double mse = 0.0;
    double rmse = 0.0;
    double nlpd = 0.0;
};

/// Breakdown by label; rows with label < 0 are skipped.
std::vector<RegimeMetric> regime_metrics(const Vector& squared_error, const Vector& pointwise_nlpd,
                                         const std::vector<int>& labels);

}  // namespace nsgp
