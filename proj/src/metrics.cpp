#include "nsgp/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "nsgp/errors.hpp"
#include "overloaded.hpp"

namespace nsgp {

namespace {

void require_same(Index a, Index b, const char* what) {
    if (a != b)
        throw DimensionMismatch(std::string(what) + ": " + std::to_string(a) + " predictions for " + std::to_string(b) +
                                " targets");
    if (a == 0) throw DimensionMismatch(std::string(what) + ": no points");
}

}  // namespace

double rmse(const Vector& pred_mean, const Vector& targets) {
    require_same(pred_mean.size(), targets.size(), "rmse");
    return std::sqrt((pred_mean - targets).squaredNorm() / static_cast<double>(targets.size()));
}

Vector pointwise_nlpd(const Vector& mean, const Vector& variance, const Vector& targets) {
    require_same(mean.size(), targets.size(), "nlpd");
    require_same(variance.size(), targets.size(), "nlpd");
    Vector out(targets.size());
    for (Index i = 0; i < targets.size(); ++i) {
        if (!(variance(i) > 0.0)) throw InvalidArgument("nlpd needs strictly positive predictive variances");
        const double r = targets(i) - mean(i);
        out(i) = 0.5 * detail::kLog2Pi + 0.5 * std::log(variance(i)) + 0.5 * r * r / variance(i);
    }
    return out;
}

double nlpd(const Vector& mean, const Vector& variance, const Vector& targets) {
    return pointwise_nlpd(mean, variance, targets).mean();
}

Vector pointwise_nlpd_mixture(const Matrix& means, const Matrix& variances, const Vector& targets) {
    require_same(means.rows(), targets.size(), "nlpd_mixture");
    if (variances.rows() != means.rows() || variances.cols() != means.cols() || means.cols() == 0)
        throw DimensionMismatch("nlpd_mixture: component shapes disagree");
    const double log_j = std::log(static_cast<double>(means.cols()));
    Vector out(targets.size());
    Vector logp(means.cols());
    for (Index i = 0; i < targets.size(); ++i) {
        for (Index j = 0; j < means.cols(); ++j) {
            const double v = variances(i, j);
            if (!(v > 0.0)) throw InvalidArgument("nlpd needs strictly positive predictive variances");
            const double r = targets(i) - means(i, j);
            logp(j) = -0.5 * detail::kLog2Pi - 0.5 * std::log(v) - 0.5 * r * r / v;
        }
        const double top = logp.maxCoeff();
        out(i) = -(top + std::log((logp.array() - top).exp().sum()) - log_j);
    }
    return out;
}

double nlpd_mixture(const Matrix& means, const Matrix& variances, const Vector& targets) {
    return pointwise_nlpd_mixture(means, variances, targets).mean();
}

Vector lognormal_jacobian(const Vector& targets) {
    if ((targets.array() <= 0.0).any()) throw NonPositiveTarget("log-space scoring needs strictly positive targets");
    return targets.array().log().matrix();
}

MeanStderr mean_stderr(const std::vector<double>& values) {
    MeanStderr out;
    out.count = values.size();
    if (values.empty()) return out;
    double sum = 0.0;
    for (double v : values) sum += v;
    out.mean = sum / static_cast<double>(values.size());
    if (values.size() > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - out.mean) * (v - out.mean);
        const double n = static_cast<double>(values.size());
        out.stderr_ = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
    }
    return out;
}

std::vector<RegimeMetric> regime_metrics(const Vector& squared_error, const Vector& pointwise_nlpd,
                                         const std::vector<int>& labels) {
    if (static_cast<std::size_t>(squared_error.size()) != labels.size() || pointwise_nlpd.size() != squared_error.size())
        throw DimensionMismatch("regime_metrics: per-point arrays and labels disagree in length");
    std::map<int, RegimeMetric> acc;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0) continue;
        RegimeMetric& m = acc[labels[i]];
        m.regime = labels[i];
        ++m.count;
        m.mse += squared_error(static_cast<Index>(i));
        m.nlpd += pointwise_nlpd(static_cast<Index>(i));
    }
    std::vector<RegimeMetric> out;
    for (auto& [label, m] : acc) {
        m.mse /= static_cast<double>(m.count);
        m.nlpd /= static_cast<double>(m.count);
        m.rmse = std::sqrt(m.mse);
        out.push_back(m);
    }
    return out;
}

}  // namespace nsgp
