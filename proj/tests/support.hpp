#pragma once

// Random instance generators and dense reference computations shared by the
// test suites. Oracles here use plain Eigen decompositions and loops, never
// the library's factorisation helpers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "nsgp/gp_exact.hpp"
#include "nsgp/gp_sparse.hpp"
#include "nsgp/kernels.hpp"
#include "nsgp/latent_fields.hpp"
#include "nsgp/linalg.hpp"

namespace nsgp::test {

using Gen = std::mt19937_64;

inline double uniform(Gen& g, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(g); }
inline int uniform_int(Gen& g, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(g); }

inline Matrix uniform_matrix(Gen& g, Index rows, Index cols, double lo, double hi) {
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j) m(i, j) = uniform(g, lo, hi);
    return m;
}

inline Vector normal_vector(Gen& g, Index n, double sd = 1.0) {
    std::normal_distribution<double> z(0.0, sd);
    Vector v(n);
    for (Index i = 0; i < n; ++i) v(i) = z(g);
    return v;
}

inline Matrix normal_matrix(Gen& g, Index rows, Index cols, double sd = 1.0) {
    std::normal_distribution<double> z(0.0, sd);
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j) m(i, j) = z(g);
    return m;
}

/// A A^T / d + min_eig I.
inline Matrix random_spd(Gen& g, Index d, double min_eig = 0.1) {
    const Matrix a = normal_matrix(g, d, d);
    return a * a.transpose() / static_cast<double>(d) + min_eig * Matrix::Identity(d, d);
}

inline SmallMatrix random_small_spd(Gen& g, Index d, double min_eig = 0.1) {
    const Matrix s = random_spd(g, d, min_eig);
    return SmallMatrix(s);
}

inline std::vector<int> iota_dims(Index d) {
    std::vector<int> dims(static_cast<std::size_t>(d));
    for (Index i = 0; i < d; ++i) dims[static_cast<std::size_t>(i)] = static_cast<int>(i);
    return dims;
}

inline std::vector<double> random_lengthscales(Gen& g, Index d, double lo = 0.3, double hi = 2.0) {
    std::vector<double> l(static_cast<std::size_t>(d));
    for (auto& v : l) v = uniform(g, lo, hi);
    return l;
}

/// log N(v; mean, cov) through an LDLT of the dense covariance.
inline double dense_gaussian_logpdf(const Vector& v, const Vector& mean, const Matrix& cov) {
    const Eigen::LDLT<Matrix> ldlt(cov);
    const Vector r = v - mean;
    const double logdet = ldlt.vectorD().array().log().sum();
    return -0.5 * r.dot(ldlt.solve(r)) - 0.5 * logdet - 0.5 * static_cast<double>(v.size()) * std::log(2.0 * std::numbers::pi);
}

/// Dense SE-ARD Gram by explicit loops.
inline Matrix dense_se_gram(const Matrix& a, const Matrix& b, double variance, const std::vector<double>& ls) {
    Matrix k(a.rows(), b.rows());
    for (Index i = 0; i < a.rows(); ++i)
        for (Index j = 0; j < b.rows(); ++j) {
            double s = 0.0;
            for (Index d = 0; d < a.cols(); ++d) {
                const double r = (a(i, d) - b(j, d)) / ls[static_cast<std::size_t>(d)];
                s += r * r;
            }
            k(i, j) = variance * std::exp(-0.5 * s);
        }
    return k;
}

/// Exact model with an SE-ARD kernel on random inputs and targets.
inline GpModel random_se_model(Gen& g, Index n, Index d) {
    GpModel m;
    m.kernel = KernelSpec::se_ard(uniform(g, 0.5, 2.0), random_lengthscales(g, d), iota_dims(d));
    m.noise_variance = uniform(g, 0.05, 0.5);
    m.train_inputs = uniform_matrix(g, n, d, 0.0, 3.0);
    m.train_targets = normal_vector(g, n);
    return m;
}

/// Exact model with constant * FGK and a perturbed lengthscale field.
inline GpModel random_fgk_model(Gen& g, Index n, Index d) {
    GpModel m;
    m.kernel = KernelSpec::constant(uniform(g, 0.5, 2.0)) * KernelSpec::fgk(0, iota_dims(d));
    m.noise_variance = uniform(g, 0.05, 0.5);
    m.train_inputs = uniform_matrix(g, n, d, 0.0, 3.0);
    m.train_targets = normal_vector(g, n);
    m.fields = make_fields(m.kernel, m.train_inputs, g());
    auto& f = std::get<LengthscaleField>(m.fields[0]);
    f.log_values.array() += normal_matrix(g, f.log_values.rows(), f.log_values.cols(), 0.3).array();
    return m;
}

/// Exact model with constant * MGK and a random H.
inline GpModel random_mgk_model(Gen& g, Index n, Index d) {
    GpModel m;
    m.kernel = KernelSpec::constant(uniform(g, 0.5, 2.0)) * KernelSpec::mgk(0, iota_dims(d));
    m.noise_variance = uniform(g, 0.05, 0.5);
    m.train_inputs = uniform_matrix(g, n, d, 0.0, 3.0);
    m.train_targets = normal_vector(g, n);
    m.fields = make_fields(m.kernel, m.train_inputs, g());
    auto& f = std::get<MatrixField>(m.fields[0]);
    f.h = normal_matrix(g, f.h.rows(), f.h.cols(), 0.7);
    for (Index k = 0; k < f.omega.size(); ++k) f.omega(k) = uniform(g, 0.05, 0.5);
    return m;
}

/// Prefactor |Si|^1/4 |Sj|^1/4 |(Si + Sj)/2|^-1/2 by dense determinants.
inline double mgk_prefactor(const SmallMatrix& si, const SmallMatrix& sj) {
    const Matrix a(si), b(sj);
    return std::pow(a.determinant(), 0.25) * std::pow(b.determinant(), 0.25) /
           std::sqrt(((a + b) / 2.0).determinant());
}

/// Independent trapezoid estimate of the normalised Gaussian-product
/// integral; comparable with exp{-d^T (Si + Sj)^-1 d}.
inline double product_integral_exponent(const Vector& xi, const Vector& xj, const SmallMatrix& si, const SmallMatrix& sj) {
    const Index d = xi.size();
    const Matrix pi = Matrix(si).inverse();
    const Matrix pj = Matrix(sj).inverse();
    const Matrix cov = (2.0 * (pi + pj)).inverse();
    const Vector centre = (pi + pj).inverse() * (pi * xi + pj * xj);
    const int n = d == 1 ? 4001 : 401;
    Vector lo(d), step(d);
    for (Index k = 0; k < d; ++k) {
        const double half = 10.0 * std::sqrt(cov(k, k));
        lo(k) = centre(k) - half;
        step(k) = 2.0 * half / (n - 1);
    }
    auto f = [&](const Vector& a) {
        const Vector ri = xi - a, rj = xj - a;
        return std::exp(-ri.dot(pi * ri) - rj.dot(pj * rj));
    };
    double total = 0.0;
    Vector a(d);
    if (d == 1) {
        for (int i = 0; i < n; ++i) {
            a(0) = lo(0) + i * step(0);
            total += (i == 0 || i == n - 1 ? 0.5 : 1.0) * f(a);
        }
        total *= step(0);
    } else {
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                a(0) = lo(0) + i * step(0);
                a(1) = lo(1) + j * step(1);
                total += (i == 0 || i == n - 1 ? 0.5 : 1.0) * (j == 0 || j == n - 1 ? 0.5 : 1.0) * f(a);
            }
        total *= step(0) * step(1);
    }
    // Each factor is (2 pi)^{D/2} |S/2|^{1/2} N(a; x, S/2).
    const double two_pi = 2.0 * std::numbers::pi;
    const double norm_i = std::pow(two_pi, d / 2.0) * std::sqrt((Matrix(si) / 2.0).determinant());
    const double norm_j = std::pow(two_pi, d / 2.0) * std::sqrt((Matrix(sj) / 2.0).determinant());
    const Matrix s = (Matrix(si) + Matrix(sj)) / 2.0;
    // N(xi; xj, S) = (2 pi)^{-D/2} |S|^{-1/2} exp{-d^T (Si + Sj)^-1 d}.
    return total / (norm_i * norm_j) * std::pow(two_pi, d / 2.0) * std::sqrt(s.determinant());
}

inline MatrixField random_matrix_field(Gen& g, Index n, Index d) {
    MatrixField f = make_matrix_field(uniform_matrix(g, n, d, 0.0, 3.0), iota_dims(d), g());
    f.h = normal_matrix(g, n, d, 0.8);
    f.col_cov = random_spd(g, d, 0.3);
    return f;
}

// Z placed beside training rows so every coordinate has a gradient well above finite-difference noise.
inline Matrix inducing_near_data(Gen& g, const Matrix& x, Index count) {
    count = std::min(count, x.rows());
    Matrix z(count, x.cols());
    for (Index i = 0; i < count; ++i) z.row(i) = x.row(uniform_int(g, 0, static_cast<int>(x.rows()) - 1));
    return z + normal_matrix(g, count, x.cols(), 0.2);
}

inline double gram_condition(const SparseModel& s) {
    const Eigen::SelfAdjointEigenSolver<Matrix> es(dynamic_forward_pass(s, false).k_mm);
    return es.eigenvalues().maxCoeff() / es.eigenvalues().minCoeff();
}

/// Sparse model with k-means Z and perturbed fields anchored there.
inline SparseModel random_sparse(Gen& g, const GpModel& m, Index count) {
    SparseModel s = make_sparse_model(m.kernel, m.train_inputs, m.train_targets, m.noise_variance,
                                      static_cast<int>(count), g());
    s.base.kernel = m.kernel;
    for (auto& f : s.base.fields) {
        if (auto* l = std::get_if<LengthscaleField>(&f))
            l->log_values.array() += normal_matrix(g, l->log_values.rows(), l->log_values.cols(), 0.3).array();
        else {
            auto& mf = std::get<MatrixField>(f);
            mf.h = normal_matrix(g, mf.h.rows(), mf.h.cols(), 0.7);
        }
    }
    return s;
}

}  // namespace nsgp::test
