#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nsgp/gp_exact.hpp"

namespace nsgp {

/// Inducing-point model. The latent fields in `base` are anchored at the
/// inducing inputs (restricted to each field's dims) and hold the
/// latent-at-inducing values.
struct SparseModel {
    GpModel base;
    Matrix inducing;  ///< Z, M x input columns

    void validate() const;
};

/// Z from k-means centroids of the training inputs (M clusters, seeded);
/// fields get their fixed priors from the training inputs and start at the
/// prior mean (lengthscale) or small random H (matrix).
SparseModel make_sparse_model(const KernelSpec& k, const Matrix& x, const Vector& y, double noise_variance, int m,
                              std::uint64_t seed);

/// Latent context at arbitrary inputs for a sparse model: anchor values on
/// exact matches with Z, the conditional mean from the Z anchors elsewhere.
LatentContext sparse_context(const SparseModel& m, const Matrix& x);

struct SparseGrams {
    LatentContext ctx_x;
    LatentContext ctx_z;
    Vector k_nn_diag;
    Matrix k_nn;  ///< only when requested
    Matrix k_nm;
    Matrix k_mm;
};

/// Z -> latent at Z -> extrapolated fields at X -> Gram blocks.
SparseGrams dynamic_forward_pass(const SparseModel& m, bool full_k_nn = false);

struct ElboTerms {
    double log_likelihood = 0.0;  ///< log N(y | 0, Q + s2 I)
    double trace_term = 0.0;      ///< tr(K_nn - Q_nn), >= 0 in exact arithmetic
    double elbo = 0.0;            ///< log_likelihood - trace_term / (2 s2)
};

ElboTerms elbo_terms(const SparseModel& m);

/// Titsias bound, O(N M^2).
double collapsed_elbo(const SparseModel& m);

/// Bound plus the latent field log prior at the inducing anchors.
double sparse_objective(const SparseModel& m);

// Layout: kernel log-hyperparameters, log noise variance, Z column-major,
// then the fields as in the exact model.
Vector pack_params(const SparseModel& m);
SparseModel unpack_params(const SparseModel& m, const Vector& theta);
std::vector<std::string> param_names(const SparseModel& m);

double sparse_objective_grad(const SparseModel& m, Vector* grad, bool include_prior = true);
Objective negative_sparse_objective(const SparseModel& m, bool include_prior = true);

/// Clamps Z to the bounding box of the training inputs expanded by 10%.
Projection inducing_projection(const SparseModel& m);

struct SparseFit {
    SparseModel model;
    TrainTrace trace;
    double objective = 0.0;
};

SparseFit sparse_fit(const SparseModel& init, const OptimConfig& config);

PredictiveDistribution sparse_predictive(const SparseModel& m, const Matrix& x_star, const PredictOptions& opts = {});

}  // namespace nsgp
