#pragma once

#include <cstdint>
#include <variant>
#include <vector>

#include "nsgp/kernels.hpp"
#include "nsgp/linalg.hpp"

namespace nsgp {

/// Log-lengthscales are clamped to this magnitude before exponentiation.
inline constexpr double kLogLengthscaleClamp = 20.0;

/// Per-dimension log-lengthscale process of a factorised Gibbs kernel,
/// defined by its values at anchor inputs and a fixed GP prior
/// log l_d ~ N(prior_mean_d, K_l).
struct LengthscaleField {
    Matrix anchors;              ///< N x D, in field coordinates
    Matrix log_values;           ///< N x D, column d holds log l_d at the anchors
    Vector prior_mean;           ///< D
    KernelSpec prior_kernel;     ///< stationary, over field coordinates 0..D-1
    std::vector<int> input_dims; ///< model input columns the field reads
};

/// Matrix-variate latent process H ~ MN(0, K_h, Psi) driving
/// Sigma(x) = softplus((h h^T)^2) + diag(Omega).
struct MatrixField {
    Matrix anchors;              ///< N x D
    Matrix h;                    ///< N x D, rows h(x_i)
    KernelSpec row_kernel;       ///< produces K_h
    Matrix col_cov;              ///< Psi, D x D
    Vector omega;                ///< D positive diagonal entries
    std::vector<int> input_dims;
};

using LatentField = std::variant<LengthscaleField, MatrixField>;

int field_dims(const LatentField& f);
const Matrix& field_anchors(const LatentField& f);
const std::vector<int>& field_input_dims(const LatentField& f);
LatentField with_anchors(const LatentField& f, Matrix anchors);

/// Columns `dims` of x.
Matrix select_columns(const Matrix& x, const std::vector<int>& dims);

/// Distinct rows of x (first-seen order) and, per row of x, its anchor index.
struct UniqueRows {
    Matrix rows;
    std::vector<Index> index;
};
UniqueRows unique_rows(const Matrix& x);

// ---- defaults for the fixed field prior -----------------------------------

/// SE-ARD with variance `variance` and lengthscale `range_fraction` x the
/// anchor range per dimension.
KernelSpec default_field_kernel(const Matrix& anchors, double range_fraction = 0.2, double variance = 1.0);
/// log of the median pairwise Euclidean distance between anchors.
double default_log_lengthscale_mean(const Matrix& anchors);

LengthscaleField make_lengthscale_field(const Matrix& anchors, std::vector<int> input_dims);
/// H initialised i.i.d. N(0, init_sd^2) from `seed`; Psi = I, Omega = omega0.
MatrixField make_matrix_field(const Matrix& anchors, std::vector<int> input_dims, std::uint64_t seed,
                              double init_sd = 0.1, double omega0 = 0.1);

// ---- MGK parameterisation -------------------------------------------------

double softplus(double x);
double sigmoid(double x);
/// Inverse of softplus for positive y.
double softplus_inverse(double y);

/// softplus applied elementwise to (h h^T) squared elementwise, plus diag(omega).
SmallMatrix sigma_from_h(const SmallVector& h, const SmallVector& omega);

/// Chain rule through sigma_from_h: given G = dL/dSigma (entries treated as
/// independent), returns dL/dh; dL/domega_d is G(d, d).
SmallVector sigma_from_h_backward(const SmallVector& h, const SmallMatrix& g);

// ---- densities ------------------------------------------------------------

/// log MN(H; 0, K_h, Psi).
double matnorm_logpdf(const Matrix& h, const Matrix& k_h, const Matrix& psi);

struct MatNormGrad {
    double value = 0.0;
    Matrix d_h;    ///< dlogp/dH
    Matrix d_k;    ///< dlogp/dK_h
};
MatNormGrad matnorm_logpdf_grad(const Matrix& h, const CholeskyFactor& k_h, const CholeskyFactor& psi);

/// log N(v; mean, K) for a factor of K.
double mvn_logpdf(const Vector& v, const Vector& mean, const CholeskyFactor& k);

/// Sum over dimensions of log N(log l_d; mu_d, K_l) at the anchors.
double lengthscale_prior_logpdf(const LengthscaleField& f);

// ---- evaluation and extrapolation -----------------------------------------

/// Square root of the prior covariance of the field's packed parameters
/// (log-lengthscales, or H followed by the Omega block, which maps to identity).
Matrix prior_root(const LatentField& f);

/// Latent context for kernel evaluation at the anchors themselves.
FieldContext context_at_anchors(const LatentField& f);
/// Context at field-space inputs via the conditional mean.
FieldContext context_at(const LatentField& f, const Matrix& x_field);

/// Positive lengthscales exp(mu + K_*l K_l^{-1} (l_hat - mu)) at x_star.
Matrix extrapolate_lengthscale(const LengthscaleField& f, const Matrix& x_star);
Matrix extrapolate_log_lengthscale(const LengthscaleField& f, const Matrix& x_star);

/// H* = K_*h K_h^{-1} H.
Matrix extrapolate_h(const MatrixField& f, const Matrix& x_star);
/// vec(H*) = (Psi (x) K_*h)(Psi (x) K_h)^{-1} vec(H), evaluated densely.
Matrix extrapolate_h_kron(const MatrixField& f, const Matrix& x_star);

/// Conditional mean and row covariance of H* given the anchors.
struct ConditionalH {
    Matrix mean;
    Matrix row_cov;
};
ConditionalH conditional_h(const MatrixField& f, const Matrix& x_star);

/// J draws from MN(mean, row_cov, Psi); deterministic for a given seed.
std::vector<Matrix> sample_conditional_h(const MatrixField& f, const Matrix& x_star, int count, std::uint64_t seed);

// ---- prior predictive -----------------------------------------------------

struct PriorSamplingConfig {
    double field_lengthscale = 1.0;  ///< latent prior kernel lengthscale (fixed)
    double field_variance = 1.0;
    double field_mean = 0.0;         ///< prior mean of log l
    double omega = 0.1;              ///< MGK diagonal offset
};

struct PriorDraws {
    Matrix f;                         ///< n x count function values
    std::vector<Matrix> field_values; ///< per draw, n x D: l(x) (FGK) or diag Sigma(x) (MGK)
};

/// Draws latent fields from their priors over the grid, then f ~ N(0, K + jitter).
/// Each Fgk/Mgk node reads its field over its own active dims.
PriorDraws sample_prior_functions(const KernelSpec& k, const Matrix& grid, int count, std::uint64_t seed,
                                  const PriorSamplingConfig& cfg = {});

}  // namespace nsgp
