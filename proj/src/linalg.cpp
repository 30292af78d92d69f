#include "nsgp/linalg.hpp"

#include <cmath>
#include <string>

#include <Eigen/Cholesky>

#include "nsgp/errors.hpp"

namespace nsgp {

namespace {

void require_square(const Matrix& a, const char* what) {
    if (a.rows() != a.cols()) {
        throw DimensionMismatch(std::string(what) + ": matrix is " + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()));
    }
}

void require_rows(const CholeskyFactor& f, Index rows, const char* what) {
    if (f.size() != rows) {
        throw DimensionMismatch(std::string(what) + ": factor is " + std::to_string(f.size()) +
                                ", right-hand side has " + std::to_string(rows) + " rows");
    }
}

}  // namespace

CholeskyFactor cholesky_psd(const Matrix& a, double base_jitter) {
    require_square(a, "cholesky_psd");
    if (!a.allFinite()) throw NotPositiveDefinite("matrix has non-finite entries");
    const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
    if ((a - a.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale) {
        throw InvalidArgument("cholesky_psd: matrix is not symmetric");
    }
    const Matrix sym = 0.5 * (a + a.transpose());
    const Index n = sym.rows();

    double jitter = 0.0;
    for (int attempt = 0; attempt <= kMaxJitterRetries; ++attempt) {
        Eigen::LLT<Matrix> llt(sym + jitter * Matrix::Identity(n, n));
        if (llt.info() == Eigen::Success) {
            Matrix lower = llt.matrixL();
            if ((lower.diagonal().array() > 0.0).all() && lower.allFinite()) {
                return CholeskyFactor{std::move(lower), jitter};
            }
        }
        jitter = attempt == 0 ? base_jitter : jitter * 10.0;
    }
    throw NotPositiveDefinite("factorization failed after " + std::to_string(kMaxJitterRetries) +
                              " jitter retries (n=" + std::to_string(n) + ")");
}

Matrix solve_lower(const CholeskyFactor& f, const Matrix& b) {
    require_rows(f, b.rows(), "solve_lower");
    return f.lower.triangularView<Eigen::Lower>().solve(b);
}

Vector solve_lower(const CholeskyFactor& f, const Vector& b) {
    require_rows(f, b.rows(), "solve_lower");
    return f.lower.triangularView<Eigen::Lower>().solve(b);
}

Matrix solve_chol(const CholeskyFactor& f, const Matrix& b) {
    Matrix y = solve_lower(f, b);
    return f.lower.transpose().triangularView<Eigen::Upper>().solve(y);
}

Vector solve_chol(const CholeskyFactor& f, const Vector& b) {
    Vector y = solve_lower(f, b);
    return f.lower.transpose().triangularView<Eigen::Upper>().solve(y);
}

Matrix inverse_chol(const CholeskyFactor& f) {
    Matrix inv = solve_chol(f, Matrix(Matrix::Identity(f.size(), f.size())));
    return 0.5 * (inv + inv.transpose());
}

double log_det_chol(const CholeskyFactor& f) {
    return 2.0 * f.lower.diagonal().array().log().sum();
}

Matrix kron(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
    for (Index i = 0; i < a.rows(); ++i) {
        for (Index j = 0; j < a.cols(); ++j) {
            out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
        }
    }
    return out;
}

Matrix gaussian_cond_mean(const Matrix& k_star_x, const CholeskyFactor& f_xx, const Matrix& values) {
    if (k_star_x.cols() != f_xx.size()) {
        throw DimensionMismatch("gaussian_cond_mean: cross-covariance has " + std::to_string(k_star_x.cols()) +
                                " columns, factor is " + std::to_string(f_xx.size()));
    }
    return k_star_x * solve_chol(f_xx, values);
}

Vector gaussian_cond_mean(const Matrix& k_star_x, const CholeskyFactor& f_xx, const Vector& values) {
    if (k_star_x.cols() != f_xx.size()) {
        throw DimensionMismatch("gaussian_cond_mean: cross-covariance has " + std::to_string(k_star_x.cols()) +
                                " columns, factor is " + std::to_string(f_xx.size()));
    }
    return k_star_x * solve_chol(f_xx, values);
}

Vector vec(const Matrix& m) {
    return Eigen::Map<const Vector>(m.data(), m.size());
}

Matrix unvec(const Vector& v, Index rows, Index cols) {
    if (v.size() != rows * cols) throw DimensionMismatch("unvec: size does not match shape");
    return Eigen::Map<const Matrix>(v.data(), rows, cols);
}

}  // namespace nsgp
