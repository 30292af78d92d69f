#pragma once

#include <Eigen/Core>

namespace nsgp {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Base diagonal jitter for kernel Gram matrices.
inline constexpr double kGramJitter = 1e-6;
/// Base diagonal jitter for small (D x D) latent algebra.
inline constexpr double kSmallJitter = 1e-8;
/// Number of escalations (x10 each) attempted after the jitter-free try.
inline constexpr int kMaxJitterRetries = 6;

/// Lower Cholesky factor of (A + jitter_used * I).
struct CholeskyFactor {
    Matrix lower;
    double jitter_used = 0.0;

    [[nodiscard]] Index size() const { return lower.rows(); }
};

/// Factorizes a symmetric PSD matrix. The input is symmetrized first; the
/// first attempt adds no jitter, then base_jitter, escalating x10 per retry.
/// Throws NotPositiveDefinite once the retries are exhausted.
CholeskyFactor cholesky_psd(const Matrix& a, double base_jitter = kGramJitter);

/// X with (A + jitter I) X = B.
Matrix solve_chol(const CholeskyFactor& f, const Matrix& b);
Vector solve_chol(const CholeskyFactor& f, const Vector& b);

/// L^{-1} B (forward substitution only).
Matrix solve_lower(const CholeskyFactor& f, const Matrix& b);
Vector solve_lower(const CholeskyFactor& f, const Vector& b);

/// (A + jitter I)^{-1}, symmetric.
Matrix inverse_chol(const CholeskyFactor& f);

double log_det_chol(const CholeskyFactor& f);

Matrix kron(const Matrix& a, const Matrix& b);

/// K_star_x (K_xx)^{-1} values.
Matrix gaussian_cond_mean(const Matrix& k_star_x, const CholeskyFactor& f_xx, const Matrix& values);
Vector gaussian_cond_mean(const Matrix& k_star_x, const CholeskyFactor& f_xx, const Vector& values);

/// vec(): column stacking, and its inverse.
Vector vec(const Matrix& m);
Matrix unvec(const Vector& v, Index rows, Index cols);

}  // namespace nsgp
