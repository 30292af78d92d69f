#include "nsgp/gp_sparse.hpp"

#include <algorithm>
#include <cmath>

#include "nsgp/data.hpp"
#include "nsgp/errors.hpp"
#include "overloaded.hpp"

namespace nsgp {

namespace {

using detail::kLog2Pi;
using detail::Overloaded;

// K_mm escalates from a smaller base than training Grams: with Z = X the bound
// should meet the exact LML, and jitter enters it directly through tr(K - Q).
constexpr double kInducingJitter = 1e-10;

const KernelSpec& field_kernel(const LatentField& f) {
    return std::visit(Overloaded{
                          [](const LengthscaleField& v) -> const KernelSpec& { return v.prior_kernel; },
                          [](const MatrixField& v) -> const KernelSpec& { return v.row_kernel; },
                      },
                      f);
}

const Matrix& field_values(const LatentField& f) {
    return std::visit(Overloaded{
                          [](const LengthscaleField& v) -> const Matrix& { return v.log_values; },
                          [](const MatrixField& v) -> const Matrix& { return v.h; },
                      },
                      f);
}

Vector field_mean(const LatentField& f) {
    return std::visit(Overloaded{
                          [](const LengthscaleField& v) { return Vector(v.prior_mean); },
                          [](const MatrixField& v) { return Vector(Vector::Zero(v.h.cols())); },
                      },
                      f);
}

Index field_param_count(const LatentField& f) {
    return std::visit(Overloaded{
                          [](const LengthscaleField& v) { return v.log_values.size(); },
                          [](const MatrixField& v) { return v.h.size() + v.omega.size(); },
                      },
                      f);
}

// Values of one field at x (field coordinates): the conditional mean given
// the values at Z, also where a row of x coincides with an inducing input, so
// the values stay differentiable in Z.
struct Extrapolated {
    Matrix xf;
    CholeskyFactor kzz;
    Matrix kxz;
    Matrix b;       // K_zz^{-1} (values_z - mean)
    Matrix values;  // at x
};

Extrapolated extrapolate(const LatentField& f, const Matrix& xf) {
    const Matrix& zf = field_anchors(f);
    const Matrix& vz = field_values(f);
    const Vector mean = field_mean(f);
    const KernelSpec& kp = field_kernel(f);

    Extrapolated e;
    e.xf = xf;
    e.kzz = cholesky_psd(gram(kp, zf).values, kGramJitter);
    e.kxz = gram(kp, xf, zf, {}, {}).values;
    e.b = solve_chol(e.kzz, Matrix(vz.rowwise() - mean.transpose()));
    e.values = e.kxz * e.b;
    e.values.rowwise() += mean.transpose();
    return e;
}

FieldContext to_context(const LatentField& f, const Matrix& values) {
    FieldContext ctx;
    std::visit(Overloaded{
                   [&](const LengthscaleField&) {
                       ctx.log_lengthscales =
                           values.cwiseMax(-kLogLengthscaleClamp).cwiseMin(kLogLengthscaleClamp);
                   },
                   [&](const MatrixField& v) {
                       ctx.sigma.reserve(static_cast<std::size_t>(values.rows()));
                       for (Index i = 0; i < values.rows(); ++i)
                           ctx.sigma.push_back(sigma_from_h(values.row(i).transpose(), v.omega));
                   },
               },
               f);
    return ctx;
}

// dL/dvalues for a context adjoint, plus dL/domega_raw for matrix fields.
Matrix values_adjoint(const LatentField& f, const Matrix& values, const FieldAdjoint& fa, Vector& d_omega_raw) {
    Matrix g = Matrix::Zero(values.rows(), values.cols());
    std::visit(Overloaded{
                   [&](const LengthscaleField&) {
                       if (fa.log_lengthscales.size() == 0) return;
                       for (Index i = 0; i < g.rows(); ++i)
                           for (Index d = 0; d < g.cols(); ++d)
                               if (std::abs(values(i, d)) < kLogLengthscaleClamp) g(i, d) = fa.log_lengthscales(i, d);
                   },
                   [&](const MatrixField& v) {
                       for (std::size_t i = 0; i < fa.sigma.size(); ++i) {
                           const Index r = static_cast<Index>(i);
                           g.row(r) = sigma_from_h_backward(values.row(r).transpose(), fa.sigma[i]).transpose();
                           for (Index d = 0; d < v.omega.size(); ++d)
                               d_omega_raw(d) += fa.sigma[i](d, d) * sigmoid(softplus_inverse(v.omega(d)));
                       }
                   },
               },
               f);
    return g;
}

void scatter_columns(Matrix& full, const Matrix& part, const std::vector<int>& dims) {
    for (std::size_t j = 0; j < dims.size(); ++j) full.col(dims[j]) += part.col(static_cast<Index>(j));
}

struct Bound {
    ElboTerms terms;
    // Kept for the backward pass.
    CholeskyFactor lm;
    CholeskyFactor lb;
    Matrix a;  // L_m^{-1} K_mn / sigma
    Vector c;
};

Bound compute_bound(const SparseGrams& g, const Vector& y, double s2) {
    const double n = static_cast<double>(y.size());
    const double sigma = std::sqrt(s2);
    Bound b;
    b.lm = cholesky_psd(g.k_mm, kInducingJitter);
    b.a = solve_lower(b.lm, Matrix(g.k_nm.transpose())) / sigma;
    Matrix bmat = b.a * b.a.transpose();
    const double tr_aat = bmat.trace();
    bmat.diagonal().array() += 1.0;
    b.lb = cholesky_psd(bmat, kSmallJitter);
    b.c = solve_lower(b.lb, Vector(b.a * y)) / sigma;
    const double log_det_b = log_det_chol(b.lb);
    b.terms.log_likelihood = -0.5 * n * kLog2Pi - 0.5 * log_det_b - 0.5 * n * std::log(s2) - 0.5 * y.squaredNorm() / s2 +
                             0.5 * b.c.squaredNorm();
    b.terms.trace_term = g.k_nn_diag.sum() - s2 * tr_aat;
    b.terms.elbo = b.terms.log_likelihood - 0.5 * b.terms.trace_term / s2;
    return b;
}

double field_prior_at(const LatentField& f) {
    return std::visit(Overloaded{
                          [](const LengthscaleField& v) { return lengthscale_prior_logpdf(v); },
                          [](const MatrixField& v) {
                              return matnorm_logpdf_grad(v.h,
                                                         cholesky_psd(gram(v.row_kernel, v.anchors).values, kGramJitter),
                                                         cholesky_psd(v.col_cov, kSmallJitter))
                                  .value;
                          },
                      },
                      f);
}

}  // namespace

void SparseModel::validate() const {
    base.validate();
    if (inducing.rows() < 1) throw InvalidArgument("sparse model needs at least one inducing input");
    if (inducing.rows() > base.train_inputs.rows())
        throw InvalidArgument("more inducing inputs (" + std::to_string(inducing.rows()) + ") than training rows (" +
                              std::to_string(base.train_inputs.rows()) + ")");
    if (inducing.cols() != base.train_inputs.cols())
        throw DimensionMismatch("inducing inputs have " + std::to_string(inducing.cols()) + " columns, training has " +
                                std::to_string(base.train_inputs.cols()));
    for (std::size_t fi = 0; fi < base.fields.size(); ++fi) {
        const Matrix& anchors = field_anchors(base.fields[fi]);
        if (anchors.rows() != inducing.rows() || anchors != select_columns(inducing, field_input_dims(base.fields[fi])))
            throw InvalidArgument("field " + std::to_string(fi) + " is not anchored at the inducing inputs");
    }
}

SparseModel make_sparse_model(const KernelSpec& k, const Matrix& x, const Vector& y, double noise_variance, int m,
                              std::uint64_t seed) {
    if (m < 1) throw InvalidArgument("number of inducing inputs must be at least 1");
    SparseModel out;
    out.inducing = kmeans(x, m, seed).centroids;
    out.base.kernel = k;
    out.base.noise_variance = noise_variance;
    out.base.train_inputs = x;
    out.base.train_targets = y;
    // Priors come from the training inputs; values live at Z.
    for (LatentField f : make_fields(k, x, seed)) {
        const Matrix zf = select_columns(out.inducing, field_input_dims(f));
        std::visit(Overloaded{
                       [&](LengthscaleField& v) {
                           v.anchors = zf;
                           v.log_values = Matrix(zf.rows(), zf.cols());
                           v.log_values.rowwise() = v.prior_mean.transpose();
                       },
                       [&](MatrixField& v) {
                           const MatrixField fresh = make_matrix_field(zf, v.input_dims, seed + out.base.fields.size());
                           v.anchors = zf;
                           v.h = fresh.h;
                       },
                   },
                   f);
        out.base.fields.push_back(std::move(f));
    }
    out.validate();
    return out;
}

LatentContext sparse_context(const SparseModel& m, const Matrix& x) {
    LatentContext ctx(m.base.fields.size());
    for (std::size_t fi = 0; fi < m.base.fields.size(); ++fi) {
        const LatentField& f = m.base.fields[fi];
        ctx[fi] = to_context(f, extrapolate(f, select_columns(x, field_input_dims(f))).values);
    }
    return ctx;
}

SparseGrams dynamic_forward_pass(const SparseModel& m, bool full_k_nn) {
    m.validate();
    SparseGrams g;
    g.ctx_z.resize(m.base.fields.size());
    for (std::size_t fi = 0; fi < m.base.fields.size(); ++fi) g.ctx_z[fi] = context_at_anchors(m.base.fields[fi]);
    g.ctx_x = sparse_context(m, m.base.train_inputs);
    const Matrix& x = m.base.train_inputs;
    g.k_nn_diag = gram_diag(m.base.kernel, x, g.ctx_x);
    if (full_k_nn) g.k_nn = gram(m.base.kernel, x, g.ctx_x).values;
    g.k_nm = gram(m.base.kernel, x, m.inducing, g.ctx_x, g.ctx_z).values;
    g.k_mm = gram(m.base.kernel, m.inducing, g.ctx_z).values;
    return g;
}

ElboTerms elbo_terms(const SparseModel& m) {
    const SparseGrams g = dynamic_forward_pass(m);
    return compute_bound(g, m.base.train_targets, m.base.noise_variance).terms;
}

double collapsed_elbo(const SparseModel& m) { return elbo_terms(m).elbo; }

double sparse_objective(const SparseModel& m) {
    double total = collapsed_elbo(m);
    for (const auto& f : m.base.fields) total += field_prior_at(f);
    return total;
}

Vector pack_params(const SparseModel& m) {
    const Vector hyper = log_hyperparameters(m.base.kernel);
    Index total = hyper.size() + 1 + m.inducing.size();
    for (const auto& f : m.base.fields) total += field_param_count(f);
    Vector theta(total);
    theta.head(hyper.size()) = hyper;
    Index pos = hyper.size();
    theta(pos++) = std::log(m.base.noise_variance);
    theta.segment(pos, m.inducing.size()) = vec(m.inducing);
    pos += m.inducing.size();
    // Field values follow in the exact-model layout.
    const Vector exact = pack_params(m.base);
    const Index skip = hyper.size() + 1;
    theta.tail(total - pos) = exact.tail(exact.size() - skip);
    return theta;
}

SparseModel unpack_params(const SparseModel& m, const Vector& theta) {
    const Index nh = hyperparameter_count(m.base.kernel);
    Index total = nh + 1 + m.inducing.size();
    for (const auto& f : m.base.fields) total += field_param_count(f);
    if (theta.size() != total)
        throw DimensionMismatch("parameter vector has " + std::to_string(theta.size()) + " entries, model needs " +
                                std::to_string(total));
    SparseModel out = m;
    const Index zpos = nh + 1;
    out.inducing = unvec(theta.segment(zpos, m.inducing.size()), m.inducing.rows(), m.inducing.cols());
    Vector exact(total - m.inducing.size());
    exact.head(zpos) = theta.head(zpos);
    exact.tail(exact.size() - zpos) = theta.tail(total - zpos - m.inducing.size());
    out.base = unpack_params(m.base, exact);
    for (auto& f : out.base.fields) f = with_anchors(f, select_columns(out.inducing, field_input_dims(f)));
    return out;
}

std::vector<std::string> param_names(const SparseModel& m) {
    std::vector<std::string> exact = param_names(m.base);
    const Index nh = hyperparameter_count(m.base.kernel);
    std::vector<std::string> out(exact.begin(), exact.begin() + nh + 1);
    for (Index d = 0; d < m.inducing.cols(); ++d)
        for (Index i = 0; i < m.inducing.rows(); ++i)
            out.push_back("inducing[" + std::to_string(i) + "," + std::to_string(d) + "]");
    out.insert(out.end(), exact.begin() + nh + 1, exact.end());
    return out;
}

double sparse_objective_grad(const SparseModel& m, Vector* grad, bool include_prior) {
    m.validate();
    const GpModel& base = m.base;
    const Matrix& x = base.train_inputs;
    const Matrix& z = m.inducing;
    const Vector& y = base.train_targets;
    const double s2 = base.noise_variance;
    const std::size_t nf = base.fields.size();

    // Forward pass, keeping the field extrapolations for the backward pass.
    std::vector<Extrapolated> ext;
    SparseGrams g;
    g.ctx_z.resize(nf);
    g.ctx_x.resize(nf);
    for (std::size_t fi = 0; fi < nf; ++fi) {
        const LatentField& f = base.fields[fi];
        g.ctx_z[fi] = context_at_anchors(f);
        ext.push_back(extrapolate(f, select_columns(x, field_input_dims(f))));
        g.ctx_x[fi] = to_context(f, ext.back().values);
    }
    g.k_nn_diag = gram_diag(base.kernel, x, g.ctx_x);
    g.k_nm = gram(base.kernel, x, z, g.ctx_x, g.ctx_z).values;
    g.k_mm = gram(base.kernel, z, g.ctx_z).values;
    const Bound bound = compute_bound(g, y, s2);

    double value = bound.terms.elbo;
    if (include_prior)
        for (const auto& f : base.fields) value += field_prior_at(f);
    if (!grad) return value;

    const Index nh = hyperparameter_count(base.kernel);
    Index total = nh + 1 + z.size();
    for (const auto& f : base.fields) total += field_param_count(f);
    grad->setZero(total);

    // dL/dQ = 1/2 alpha alpha^T + 1/(2 s2) A^T B^{-1} A with Q = K_nm K_mm^{-1} K_mn;
    // never formed, only its products with P = K_nm K_mm^{-1}.
    const Index n = x.rows();
    const Matrix binv_a = solve_chol(bound.lb, bound.a);                 // B^{-1} A, M x N
    const Vector alpha = (y - bound.a.transpose() * (binv_a * y)) / s2;  // Sigma_y^{-1} y
    const Matrix p = solve_chol(bound.lm, Matrix(g.k_nm.transpose())).transpose();  // N x M
    const Vector pa = p.transpose() * alpha;
    const Matrix ap = bound.a * p;  // M x M
    const Matrix gp = 0.5 * alpha * pa.transpose() + (0.5 / s2) * binv_a.transpose() * ap;  // G P, N x M
    const Matrix d_knm = 2.0 * gp;
    const Matrix d_kmm = -(0.5 * pa * pa.transpose() + (0.5 / s2) * ap.transpose() * solve_chol(bound.lb, ap));
    const Vector d_knn = Vector::Constant(n, -0.5 / s2);

    const GramAdjoint a_nm = gram_backward(base.kernel, x, z, g.ctx_x, g.ctx_z, d_knm, true);
    const GramAdjoint a_mm = gram_backward_symmetric(base.kernel, z, g.ctx_z, d_kmm, true);
    const GramAdjoint a_nn = gram_diag_backward(base.kernel, x, g.ctx_x, d_knn, false);

    grad->head(nh) = a_nm.hyper + a_mm.hyper + a_nn.hyper;
    Index pos = nh;
    {
        const double tr_aat = (bound.a.array().square()).sum();
        const double tr_sinv = (static_cast<double>(n) - (binv_a.cwiseProduct(bound.a)).sum()) / s2;
        const double tr_q = s2 * tr_aat;
        const double d_s2 = 0.5 * (alpha.squaredNorm() - tr_sinv) + 0.5 * (g.k_nn_diag.sum() - tr_q) / (s2 * s2);
        (*grad)(pos++) = s2 * d_s2;
    }
    const Index zpos = pos;
    Matrix d_z = a_nm.cols_inputs + a_mm.rows_inputs;
    pos += z.size();

    for (std::size_t fi = 0; fi < nf; ++fi) {
        const LatentField& f = base.fields[fi];
        const Extrapolated& e = ext[fi];
        const KernelSpec& kp = field_kernel(f);
        const Matrix& vz = field_values(f);
        const std::vector<int>& dims = field_input_dims(f);
        const Matrix& zf = field_anchors(f);
        Vector d_omega = Vector::Zero(std::holds_alternative<MatrixField>(f) ? vz.cols() : 0);

        FieldAdjoint adj_x = a_nm.rows_fields[fi];
        if (adj_x.log_lengthscales.size() > 0) adj_x.log_lengthscales += a_nn.rows_fields[fi].log_lengthscales;
        for (std::size_t i = 0; i < adj_x.sigma.size(); ++i) adj_x.sigma[i] += a_nn.rows_fields[fi].sigma[i];
        FieldAdjoint adj_z = a_nm.cols_fields[fi];
        if (adj_z.log_lengthscales.size() > 0) adj_z.log_lengthscales += a_mm.rows_fields[fi].log_lengthscales;
        for (std::size_t i = 0; i < adj_z.sigma.size(); ++i) adj_z.sigma[i] += a_mm.rows_fields[fi].sigma[i];

        Matrix d_vz = values_adjoint(f, vz, adj_z, d_omega);
        Matrix d_vx = values_adjoint(f, e.values, adj_x, d_omega);
        // values_x = mean + K_xz K_zz^{-1} (values_z - mean)
        const Matrix c = solve_chol(e.kzz, Matrix(e.kxz.transpose() * d_vx));
        d_vz += c;
        Matrix d_zf = gram_backward(kp, e.xf, zf, {}, {}, d_vx * e.b.transpose(), true).cols_inputs;
        d_zf += gram_backward_symmetric(kp, zf, {}, -c * e.b.transpose(), true).rows_inputs;

        if (include_prior) {
            std::visit(Overloaded{
                           [&](const LengthscaleField& v) {
                               const CholeskyFactor kl = cholesky_psd(gram(v.prior_kernel, zf).values, kGramJitter);
                               const Matrix w = solve_chol(kl, Matrix(v.log_values.rowwise() - v.prior_mean.transpose()));
                               d_vz -= w;
                               const Matrix d_k = 0.5 * (w * w.transpose()) -
                                                  0.5 * static_cast<double>(v.log_values.cols()) * inverse_chol(kl);
                               d_zf += gram_backward_symmetric(v.prior_kernel, zf, {}, d_k, true).rows_inputs;
                           },
                           [&](const MatrixField& v) {
                               const MatNormGrad mg = matnorm_logpdf_grad(
                                   v.h, cholesky_psd(gram(v.row_kernel, zf).values, kGramJitter),
                                   cholesky_psd(v.col_cov, kSmallJitter));
                               d_vz += mg.d_h;
                               d_zf += gram_backward_symmetric(v.row_kernel, zf, {}, mg.d_k, true).rows_inputs;
                           },
                       },
                       f);
        }
        scatter_columns(d_z, d_zf, dims);

        grad->segment(pos, d_vz.size()) = vec(d_vz);
        pos += d_vz.size();
        if (d_omega.size() > 0) {
            grad->segment(pos, d_omega.size()) = d_omega;
            pos += d_omega.size();
        }
    }
    grad->segment(zpos, z.size()) = vec(d_z);
    return value;
}

Objective negative_sparse_objective(const SparseModel& m, bool include_prior) {
    return [m, include_prior](const Vector& theta, Vector* grad) {
        const SparseModel cur = unpack_params(m, theta);
        const double v = sparse_objective_grad(cur, grad, include_prior);
        if (grad) *grad = -*grad;
        return -v;
    };
}

Projection inducing_projection(const SparseModel& m) {
    const Matrix& x = m.base.train_inputs;
    const Vector lo_raw = x.colwise().minCoeff().transpose();
    const Vector hi_raw = x.colwise().maxCoeff().transpose();
    const Vector pad = 0.1 * (hi_raw - lo_raw);
    const Vector lo = lo_raw - pad;
    const Vector hi = hi_raw + pad;
    const Index zpos = hyperparameter_count(m.base.kernel) + 1;
    const Index rows = m.inducing.rows();
    const Index cols = m.inducing.cols();
    return [=](Vector& theta) {
        for (Index d = 0; d < cols; ++d)
            for (Index i = 0; i < rows; ++i) {
                double& v = theta(zpos + d * rows + i);
                v = std::clamp(v, lo(d), hi(d));
            }
    };
}

SparseFit sparse_fit(const SparseModel& init, const OptimConfig& config) {
    init.validate();
    const Preconditioner p =
        field_preconditioner(init.base, hyperparameter_count(init.base.kernel) + 1 + init.inducing.size());
    const OptimResult r =
        minimize(negative_sparse_objective(init), pack_params(init), p, config, inducing_projection(init));
    SparseFit out;
    out.model = unpack_params(init, r.params);
    out.trace = r.trace;
    // Report the maximised objective rather than its negation.
    for (double& v : out.trace.objective_per_iter) v = -v;
    out.objective = -r.objective;
    return out;
}

PredictiveDistribution sparse_predictive(const SparseModel& m, const Matrix& x_star, const PredictOptions& opts) {
    const SparseGrams g = dynamic_forward_pass(m);
    const double s2 = m.base.noise_variance;
    const Bound b = compute_bound(g, m.base.train_targets, s2);
    const LatentContext ctx_star = sparse_context(m, x_star);
    const Matrix k_ms = gram(m.base.kernel, m.inducing, x_star, g.ctx_z, ctx_star).values;
    const Matrix t1 = solve_lower(b.lm, k_ms);
    const Matrix t2 = solve_lower(b.lb, t1);
    PredictiveDistribution out;
    out.mean = t2.transpose() * b.c;
    out.variance = (gram_diag(m.base.kernel, x_star, ctx_star) - t1.colwise().squaredNorm().transpose() +
                    t2.colwise().squaredNorm().transpose())
                       .cwiseMax(0.0);
    if (opts.include_noise) out.variance.array() += s2;
    if (opts.full_covariance) {
        out.covariance = gram(m.base.kernel, x_star, ctx_star).values - t1.transpose() * t1 + t2.transpose() * t2;
        if (opts.include_noise) out.covariance.diagonal().array() += s2;
    }
    return out;
}

}  // namespace nsgp
