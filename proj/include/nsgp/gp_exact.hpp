#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nsgp/kernels.hpp"
#include "nsgp/latent_fields.hpp"
#include "nsgp/linalg.hpp"
#include "nsgp/optim.hpp"

namespace nsgp {

enum class TargetTransform { none, log };

std::string to_string(TargetTransform t);
TargetTransform transform_from_string(const std::string& s);

/// Exact GP regression model. `fields[i]` backs every Fgk/Mgk node that
/// references field id i; fields are anchored on the distinct training
/// inputs restricted to the field's input dims.
struct GpModel {
    KernelSpec kernel;
    double noise_variance = 1.0;
    Matrix train_inputs;
    Vector train_targets;
    std::vector<LatentField> fields;
    TargetTransform target_transform = TargetTransform::none;

    void validate() const;
};

/// Creates one field per referenced id, anchored at the distinct rows of
/// `x` over that field's dims. Fgk nodes get a lengthscale field at the
/// prior mean; Mgk nodes a matrix field with small random H.
std::vector<LatentField> make_fields(const KernelSpec& k, const Matrix& x, std::uint64_t seed);

/// Latent context at arbitrary inputs: anchor values where a row coincides
/// with an anchor, the conditional mean elsewhere.
LatentContext context_for(const GpModel& m, const Matrix& x);

double log_marginal_likelihood(const GpModel& m);

/// log N(y | 0, K + s2 I) + sum of latent field log priors.
double map_objective(const GpModel& m);
/// map_objective for a model whose only latent field kind is lengthscale / matrix.
double map_objective_fgk(const GpModel& m);
double map_objective_mgk(const GpModel& m);

/// Sum over fields of their log prior densities.
double field_log_prior(const GpModel& m);

// ---- parameter vector -----------------------------------------------------
//
// Layout: kernel log-hyperparameters (trainable ones, pre-order), log noise
// variance, then per field: FGK log-lengthscales column-major, or MGK H
// column-major followed by softplus-inverse(Omega).

Vector pack_params(const GpModel& m);
GpModel unpack_params(const GpModel& m, const Vector& theta);
std::vector<std::string> param_names(const GpModel& m);

/// Objective value and, when grad is non-null, its gradient w.r.t. the
/// packed parameters. `include_prior` false gives the plain LML.
double map_objective_grad(const GpModel& m, Vector* grad, bool include_prior = true);

/// Negated MAP objective for minimize().
Objective negative_map_objective(const GpModel& m, bool include_prior = true);

// ---- prediction -----------------------------------------------------------

struct PredictiveDistribution {
    Vector mean;
    Vector variance;
    Matrix covariance;   ///< filled only when requested
    bool lognormal = false;
    /// Mixture components (Monte-Carlo predictive only), one column per draw.
    Matrix component_means;
    Matrix component_variances;
};

struct PredictOptions {
    bool full_covariance = false;
    bool include_noise = false;  ///< add the noise variance (predicting observations)
};

PredictiveDistribution posterior_predictive(const GpModel& m, const Matrix& x_star, const PredictOptions& opts = {});
/// Same, with an explicit latent context at x_star.
PredictiveDistribution posterior_predictive(const GpModel& m, const Matrix& x_star, const LatentContext& ctx_star,
                                            const PredictOptions& opts = {});

/// Monte-Carlo predictive over conditional draws of every matrix field:
/// field i uses seed + i. Returns the two-moment mixture summary plus the
/// per-draw components.
PredictiveDistribution predictive_mc(const GpModel& m, const Matrix& x_star, int draws, std::uint64_t seed,
                                     const PredictOptions& opts = {});

struct LognormalPrediction {
    Vector median;
    std::vector<double> probabilities;
    Matrix quantiles;  ///< n x probabilities.size()
};

/// Quantiles exp(mu + sigma * Phi^{-1}(p)) of log-normal marginals.
LognormalPrediction lognormal_quantiles(const Vector& mean_z, const Vector& var_z, const std::vector<double>& probs);

/// Predicts a log-target model; z = shift + scale * (normalised model output).
LognormalPrediction lognormal_predict(const GpModel& m, const Matrix& x_star, const std::vector<double>& probs,
                                      double z_shift = 0.0, double z_scale = 1.0);

// ---- fitting --------------------------------------------------------------

/// Whitens each field's parameter block by its prior root; `offset` is the
/// index of the first field parameter in the packed vector.
Preconditioner field_preconditioner(const GpModel& m, Index offset);

struct ExactFit {
    GpModel model;
    TrainTrace trace;
    double objective = 0.0;  ///< final MAP objective (maximised)
};

/// Maximises the MAP objective (or the LML when the kernel has no latent fields).
ExactFit fit_exact(const GpModel& init, const OptimConfig& config);

}  // namespace nsgp
