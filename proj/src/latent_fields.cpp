#include "nsgp/latent_fields.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <string>

#include <Eigen/Eigenvalues>

#include "nsgp/errors.hpp"
#include "overloaded.hpp"
#include "nsgp/rng.hpp"

namespace nsgp {

namespace {

using detail::kLog2Pi;
using detail::Overloaded;

std::vector<int> iota_dims(int d) {
    std::vector<int> out(static_cast<std::size_t>(d));
    for (int i = 0; i < d; ++i) out[static_cast<std::size_t>(i)] = i;
    return out;
}

Matrix clamp_log(const Matrix& v) {
    return v.cwiseMax(-kLogLengthscaleClamp).cwiseMin(kLogLengthscaleClamp);
}

// Symmetric square root of a PSD matrix; eigenvalues below a relative
// threshold are treated as exactly zero so degenerate directions stay fixed.
Matrix psd_sqrt(const Matrix& c) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (c + c.transpose()));
    if (es.info() != Eigen::Success) throw NotPositiveDefinite("eigen decomposition failed");
    Vector ev = es.eigenvalues();
    const double top = std::max(ev.cwiseAbs().maxCoeff(), 0.0);
    const double floor = 1e-12 * std::max(top, 1.0);
    for (Index i = 0; i < ev.size(); ++i) ev(i) = ev(i) > floor ? std::sqrt(ev(i)) : 0.0;
    return es.eigenvectors() * ev.asDiagonal();
}

}  // namespace

int field_dims(const LatentField& f) {
    return std::visit([](const auto& v) { return static_cast<int>(v.anchors.cols()); }, f);
}

const Matrix& field_anchors(const LatentField& f) {
    return std::visit([](const auto& v) -> const Matrix& { return v.anchors; }, f);
}

const std::vector<int>& field_input_dims(const LatentField& f) {
    return std::visit([](const auto& v) -> const std::vector<int>& { return v.input_dims; }, f);
}

LatentField with_anchors(const LatentField& f, Matrix anchors) {
    return std::visit(
        [&](auto v) -> LatentField {
            if (anchors.rows() != v.anchors.rows() || anchors.cols() != v.anchors.cols())
                throw DimensionMismatch("replacement anchors have a different shape");
            v.anchors = std::move(anchors);
            return v;
        },
        f);
}

Matrix select_columns(const Matrix& x, const std::vector<int>& dims) {
    Matrix out(x.rows(), static_cast<Index>(dims.size()));
    for (std::size_t j = 0; j < dims.size(); ++j) {
        if (dims[j] < 0 || dims[j] >= x.cols())
            throw DimensionMismatch("column " + std::to_string(dims[j]) + " out of range for " +
                                    std::to_string(x.cols()) + " input columns");
        out.col(static_cast<Index>(j)) = x.col(dims[j]);
    }
    return out;
}

UniqueRows unique_rows(const Matrix& x) {
    std::map<std::vector<double>, Index> seen;
    std::vector<Index> first;
    UniqueRows out;
    out.index.resize(static_cast<std::size_t>(x.rows()));
    std::vector<double> key(static_cast<std::size_t>(x.cols()));
    for (Index i = 0; i < x.rows(); ++i) {
        for (Index j = 0; j < x.cols(); ++j) key[static_cast<std::size_t>(j)] = x(i, j);
        auto [it, inserted] = seen.emplace(key, static_cast<Index>(first.size()));
        if (inserted) first.push_back(i);
        out.index[static_cast<std::size_t>(i)] = it->second;
    }
    out.rows.resize(static_cast<Index>(first.size()), x.cols());
    for (std::size_t r = 0; r < first.size(); ++r) out.rows.row(static_cast<Index>(r)) = x.row(first[r]);
    return out;
}

KernelSpec default_field_kernel(const Matrix& anchors, double range_fraction, double variance) {
    if (anchors.rows() == 0) throw EmptyDataset("no anchor inputs");
    std::vector<double> ls(static_cast<std::size_t>(anchors.cols()));
    for (Index d = 0; d < anchors.cols(); ++d) {
        double range = anchors.col(d).maxCoeff() - anchors.col(d).minCoeff();
        if (!(range > 0.0)) range = 1.0;
        ls[static_cast<std::size_t>(d)] = range_fraction * range;
    }
    return KernelSpec::se_ard(variance, std::move(ls), iota_dims(static_cast<int>(anchors.cols())))
        .with_fixed(kFixVariance | kFixLengthscale);
}

double default_log_lengthscale_mean(const Matrix& anchors) {
    const Index n = anchors.rows();
    if (n < 2) return 0.0;
    // Deterministic thinning keeps the pairwise pass bounded on large inputs.
    const Index stride = std::max<Index>(1, n / 1000);
    std::vector<double> dist;
    for (Index i = 0; i < n; i += stride)
        for (Index j = i + stride; j < n; j += stride) dist.push_back((anchors.row(i) - anchors.row(j)).norm());
    if (dist.empty()) return 0.0;
    auto mid = dist.begin() + static_cast<std::ptrdiff_t>(dist.size() / 2);
    std::nth_element(dist.begin(), mid, dist.end());
    double med = *mid;
    if (!(med > 0.0)) {
        double s = 0.0;
        int c = 0;
        for (double d : dist)
            if (d > 0.0) s += d, ++c;
        med = c > 0 ? s / c : 1.0;
    }
    return std::log(med);
}

LengthscaleField make_lengthscale_field(const Matrix& anchors, std::vector<int> input_dims) {
    LengthscaleField f;
    f.anchors = anchors;
    const double mu = default_log_lengthscale_mean(anchors);
    f.prior_mean = Vector::Constant(anchors.cols(), mu);
    f.log_values = Matrix::Constant(anchors.rows(), anchors.cols(), mu);
    f.prior_kernel = default_field_kernel(anchors);
    f.input_dims = std::move(input_dims);
    return f;
}

MatrixField make_matrix_field(const Matrix& anchors, std::vector<int> input_dims, std::uint64_t seed,
                              double init_sd, double omega0) {
    if (anchors.cols() > kMaxMgkDims)
        throw InvalidArgument("matrix fields support at most " + std::to_string(kMaxMgkDims) +
                              " dimensions");
    MatrixField f;
    f.anchors = anchors;
    Rng rng = substream(seed, "matrix_field_init");
    f.h = init_sd * standard_normal(rng, anchors.rows(), anchors.cols());
    f.row_kernel = default_field_kernel(anchors);
    f.col_cov = Matrix::Identity(anchors.cols(), anchors.cols());
    f.omega = Vector::Constant(anchors.cols(), omega0);
    f.input_dims = std::move(input_dims);
    return f;
}

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double softplus_inverse(double y) {
    if (!(y > 0.0)) throw InvalidArgument("softplus inverse needs a positive value");
    return y > 30.0 ? y : std::log(std::expm1(y));
}

SmallMatrix sigma_from_h(const SmallVector& h, const SmallVector& omega) {
    const Index d = h.size();
    if (omega.size() != d) throw DimensionMismatch("omega and h lengths differ");
    SmallMatrix s(d, d);
    for (Index a = 0; a < d; ++a)
        for (Index b = 0; b < d; ++b) {
            const double q = h(a) * h(b);
            s(a, b) = softplus(q * q);
        }
    for (Index a = 0; a < d; ++a) s(a, a) += omega(a);
    return s;
}

SmallVector sigma_from_h_backward(const SmallVector& h, const SmallMatrix& g) {
    const Index d = h.size();
    SmallVector out = SmallVector::Zero(d);
    for (Index a = 0; a < d; ++a)
        for (Index b = 0; b < d; ++b) {
            const double q = h(a) * h(b);
            // dSigma_ab/dq = sigmoid(q^2) * 2q, dq/dh_a = h_b, dq/dh_b = h_a
            const double w = g(a, b) * sigmoid(q * q) * 2.0 * q;
            out(a) += w * h(b);
            out(b) += w * h(a);
        }
    return out;
}

double mvn_logpdf(const Vector& v, const Vector& mean, const CholeskyFactor& k) {
    if (v.size() != k.size() || mean.size() != k.size())
        throw DimensionMismatch("mvn_logpdf operand sizes differ");
    const Vector z = solve_lower(k, Vector(v - mean));
    return -0.5 * static_cast<double>(v.size()) * kLog2Pi - 0.5 * log_det_chol(k) - 0.5 * z.squaredNorm();
}

double matnorm_logpdf(const Matrix& h, const Matrix& k_h, const Matrix& psi) {
    if (k_h.rows() != h.rows() || psi.rows() != h.cols())
        throw DimensionMismatch("matrix normal operands do not conform");
    return matnorm_logpdf_grad(h, cholesky_psd(k_h, 0.0), cholesky_psd(psi, 0.0)).value;
}

MatNormGrad matnorm_logpdf_grad(const Matrix& h, const CholeskyFactor& k_h, const CholeskyFactor& psi) {
    const double n = static_cast<double>(h.rows());
    const double d = static_cast<double>(h.cols());
    if (k_h.size() != h.rows() || psi.size() != h.cols())
        throw DimensionMismatch("matrix normal operands do not conform");
    const Matrix a = solve_chol(k_h, h);                                       // K^{-1} H
    const Matrix b = solve_chol(psi, Matrix(a.transpose())).transpose();       // K^{-1} H Psi^{-1}
    MatNormGrad out;
    out.value = -0.5 * n * d * kLog2Pi - 0.5 * d * log_det_chol(k_h) - 0.5 * n * log_det_chol(psi) -
                0.5 * h.cwiseProduct(b).sum();
    out.d_h = -b;
    Matrix dk = -0.5 * d * inverse_chol(k_h) + 0.5 * b * a.transpose();
    out.d_k = 0.5 * (dk + dk.transpose());
    return out;
}

Matrix prior_root(const LatentField& f) {
    return std::visit(
        Overloaded{
            [](const LengthscaleField& v) {
                const Matrix l = cholesky_psd(gram(v.prior_kernel, v.anchors).values, kGramJitter).lower;
                const Index a = l.rows();
                const Index d = v.log_values.cols();
                Matrix out = Matrix::Zero(a * d, a * d);
                for (Index k = 0; k < d; ++k) out.block(k * a, k * a, a, a) = l;
                return out;
            },
            [](const MatrixField& v) {
                const Matrix lk = cholesky_psd(gram(v.row_kernel, v.anchors).values, kGramJitter).lower;
                const Matrix lp = cholesky_psd(v.col_cov, kSmallJitter).lower;
                const Index n = lk.rows() * lp.rows();
                const Index d = v.omega.size();
                Matrix out = Matrix::Identity(n + d, n + d);
                out.topLeftCorner(n, n) = kron(lp, lk);
                return out;
            },
        },
        f);
}

double lengthscale_prior_logpdf(const LengthscaleField& f) {
    const CholeskyFactor kl = cholesky_psd(gram(f.prior_kernel, f.anchors).values, kGramJitter);
    double total = 0.0;
    for (Index d = 0; d < f.log_values.cols(); ++d)
        total += mvn_logpdf(f.log_values.col(d), Vector::Constant(f.log_values.rows(), f.prior_mean(d)), kl);
    return total;
}

Matrix extrapolate_log_lengthscale(const LengthscaleField& f, const Matrix& x_star) {
    if (x_star.cols() != f.anchors.cols())
        throw DimensionMismatch("query has " + std::to_string(x_star.cols()) +
                                " columns, field has " + std::to_string(f.anchors.cols()));
    const CholeskyFactor kl = cholesky_psd(gram(f.prior_kernel, f.anchors).values, kGramJitter);
    const Matrix ks = gram(f.prior_kernel, x_star, f.anchors, {}, {}).values;
    const Matrix centred = f.log_values.rowwise() - f.prior_mean.transpose();
    Matrix out = ks * solve_chol(kl, centred);
    out.rowwise() += f.prior_mean.transpose();
    return out;
}

Matrix extrapolate_lengthscale(const LengthscaleField& f, const Matrix& x_star) {
    return clamp_log(extrapolate_log_lengthscale(f, x_star)).array().exp().matrix();
}

ConditionalH conditional_h(const MatrixField& f, const Matrix& x_star) {
    if (x_star.cols() != f.anchors.cols())
        throw DimensionMismatch("query has " + std::to_string(x_star.cols()) +
                                " columns, field has " + std::to_string(f.anchors.cols()));
    const CholeskyFactor kh = cholesky_psd(gram(f.row_kernel, f.anchors).values, kGramJitter);
    const Matrix ks = gram(f.row_kernel, x_star, f.anchors, {}, {}).values;
    const Matrix v = kh.lower.triangularView<Eigen::Lower>().solve(Matrix(ks.transpose()));
    ConditionalH out;
    out.mean = ks * solve_chol(kh, f.h);
    out.row_cov = gram(f.row_kernel, x_star).values - v.transpose() * v;
    return out;
}

Matrix extrapolate_h(const MatrixField& f, const Matrix& x_star) {
    if (x_star.cols() != f.anchors.cols())
        throw DimensionMismatch("query has " + std::to_string(x_star.cols()) +
                                " columns, field has " + std::to_string(f.anchors.cols()));
    const CholeskyFactor kh = cholesky_psd(gram(f.row_kernel, f.anchors).values, kGramJitter);
    return gram(f.row_kernel, x_star, f.anchors, {}, {}).values * solve_chol(kh, f.h);
}

Matrix extrapolate_h_kron(const MatrixField& f, const Matrix& x_star) {
    if (x_star.cols() != f.anchors.cols())
        throw DimensionMismatch("query has " + std::to_string(x_star.cols()) +
                                " columns, field has " + std::to_string(f.anchors.cols()));
    const Matrix kh = gram(f.row_kernel, f.anchors).values;
    const Matrix ks = gram(f.row_kernel, x_star, f.anchors, {}, {}).values;
    const CholeskyFactor big = cholesky_psd(kron(f.col_cov, kh), kGramJitter);
    const Vector vh = kron(f.col_cov, ks) * solve_chol(big, vec(f.h));
    return unvec(vh, x_star.rows(), f.h.cols());
}

std::vector<Matrix> sample_conditional_h(const MatrixField& f, const Matrix& x_star, int count, std::uint64_t seed) {
    if (count < 0) throw InvalidArgument("sample count must be non-negative");
    const ConditionalH cond = conditional_h(f, x_star);
    const Matrix row_root = psd_sqrt(cond.row_cov);
    const Matrix col_root = cholesky_psd(f.col_cov, kSmallJitter).lower;
    Rng rng = substream(seed, "conditional_h");
    std::vector<Matrix> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int s = 0; s < count; ++s) {
        const Matrix e = standard_normal(rng, x_star.rows(), f.h.cols());
        out.push_back(cond.mean + row_root * e * col_root.transpose());
    }
    return out;
}

FieldContext context_at_anchors(const LatentField& f) {
    FieldContext ctx;
    std::visit(Overloaded{
                   [&](const LengthscaleField& v) { ctx.log_lengthscales = clamp_log(v.log_values); },
                   [&](const MatrixField& v) {
                       ctx.sigma.reserve(static_cast<std::size_t>(v.h.rows()));
                       for (Index i = 0; i < v.h.rows(); ++i)
                           ctx.sigma.push_back(sigma_from_h(v.h.row(i).transpose(), v.omega));
                   },
               },
               f);
    return ctx;
}

FieldContext context_at(const LatentField& f, const Matrix& x_field) {
    FieldContext ctx;
    std::visit(Overloaded{
                   [&](const LengthscaleField& v) {
                       ctx.log_lengthscales = clamp_log(extrapolate_log_lengthscale(v, x_field));
                   },
                   [&](const MatrixField& v) {
                       const Matrix hs = extrapolate_h(v, x_field);
                       ctx.sigma.reserve(static_cast<std::size_t>(hs.rows()));
                       for (Index i = 0; i < hs.rows(); ++i)
                           ctx.sigma.push_back(sigma_from_h(hs.row(i).transpose(), v.omega));
                   },
               },
               f);
    return ctx;
}

PriorDraws sample_prior_functions(const KernelSpec& k, const Matrix& grid, int count, std::uint64_t seed,
                                  const PriorSamplingConfig& cfg) {
    if (count < 0) throw InvalidArgument("sample count must be non-negative");
    if (grid.rows() == 0) throw EmptyDataset("empty input grid");
    if (required_input_dims(k) > grid.cols())
        throw DimensionMismatch("kernel reads column " + std::to_string(required_input_dims(k) - 1) +
                                " but the grid has " + std::to_string(grid.cols()) + " columns");
    if (!(cfg.field_lengthscale > 0.0) || !(cfg.field_variance > 0.0))
        throw NonPositiveLengthscale("field prior parameters must be positive");

    const std::vector<FieldRef> refs = field_references(k);
    std::size_t n_fields = 0;
    for (const auto& r : refs) n_fields = std::max(n_fields, r.field + 1);

    // Field prior square roots are shared across draws.
    struct Plan {
        FieldRef ref;
        Matrix root;
    };
    std::vector<Plan> plans;
    std::vector<bool> planned(n_fields, false);
    for (const auto& r : refs) {
        if (planned[r.field]) continue;
        planned[r.field] = true;
        const Matrix xf = select_columns(grid, r.dims);
        const KernelSpec prior = KernelSpec::se_ard(
            cfg.field_variance, std::vector<double>(r.dims.size(), cfg.field_lengthscale),
            iota_dims(static_cast<int>(r.dims.size())));
        plans.push_back({r, psd_sqrt(gram(prior, xf).values)});
    }

    Rng rng = substream(seed, "prior_functions");
    PriorDraws out;
    out.f.resize(grid.rows(), count);
    for (int s = 0; s < count; ++s) {
        LatentContext ctx(n_fields);
        Matrix summary;
        for (const auto& p : plans) {
            const Index d = static_cast<Index>(p.ref.dims.size());
            const Matrix z = standard_normal(rng, grid.rows(), d);
            if (p.ref.kind == FieldKind::lengthscale) {
                Matrix logl = (p.root * z).array() + cfg.field_mean;
                logl = clamp_log(logl);
                if (summary.size() == 0) summary = logl.array().exp().matrix();
                ctx[p.ref.field].log_lengthscales = std::move(logl);
            } else {
                if (d > kMaxMgkDims)
                    throw InvalidArgument("matrix fields support at most " +
                                          std::to_string(kMaxMgkDims) + " dimensions");
                const Matrix h = p.root * z;
                const SmallVector omega = SmallVector::Constant(d, cfg.omega);
                Matrix diag(grid.rows(), d);
                auto& sig = ctx[p.ref.field].sigma;
                sig.reserve(static_cast<std::size_t>(grid.rows()));
                for (Index i = 0; i < grid.rows(); ++i) {
                    sig.push_back(sigma_from_h(h.row(i).transpose(), omega));
                    diag.row(i) = sig.back().diagonal().transpose();
                }
                if (summary.size() == 0) summary = std::move(diag);
            }
        }
        const CholeskyFactor kf = cholesky_psd(gram(k, grid, ctx).values, kGramJitter);
        out.f.col(s) = kf.lower * standard_normal(rng, grid.rows(), 1);
        out.field_values.push_back(std::move(summary));
    }
    return out;
}

}  // namespace nsgp
