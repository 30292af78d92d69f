#include "nsgp/gp_exact.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <boost/math/distributions/normal.hpp>

#include "nsgp/errors.hpp"
#include "overloaded.hpp"

namespace nsgp {

namespace {

using detail::kLog2Pi;
using detail::Overloaded;
constexpr double kLogClamp = 40.0;

double exp_clamped(double v) { return std::exp(std::clamp(v, -kLogClamp, kLogClamp)); }

std::optional<std::vector<Index>> match_anchors(const Matrix& xf, const Matrix& anchors) {
    std::map<std::vector<double>, Index> lookup;
    std::vector<double> key(static_cast<std::size_t>(anchors.cols()));
    for (Index a = 0; a < anchors.rows(); ++a) {
        for (Index d = 0; d < anchors.cols(); ++d) key[static_cast<std::size_t>(d)] = anchors(a, d);
        lookup.emplace(key, a);
    }
    std::vector<Index> out(static_cast<std::size_t>(xf.rows()));
    for (Index i = 0; i < xf.rows(); ++i) {
        for (Index d = 0; d < xf.cols(); ++d) key[static_cast<std::size_t>(d)] = xf(i, d);
        auto it = lookup.find(key);
        if (it == lookup.end()) return std::nullopt;
        out[static_cast<std::size_t>(i)] = it->second;
    }
    return out;
}

FieldContext gather(const FieldContext& at_anchors, const std::vector<Index>& index) {
    FieldContext out;
    const Index n = static_cast<Index>(index.size());
    if (at_anchors.log_lengthscales.size() > 0) {
        out.log_lengthscales.resize(n, at_anchors.log_lengthscales.cols());
        for (Index i = 0; i < n; ++i)
            out.log_lengthscales.row(i) = at_anchors.log_lengthscales.row(index[static_cast<std::size_t>(i)]);
    }
    if (!at_anchors.sigma.empty()) {
        out.sigma.reserve(index.size());
        for (Index a : index) out.sigma.push_back(at_anchors.sigma[static_cast<std::size_t>(a)]);
    }
    return out;
}

// Training-side context with the anchor map of each field (required for gradients).
struct TrainContext {
    LatentContext ctx;
    std::vector<std::optional<std::vector<Index>>> index;
};

TrainContext train_context(const GpModel& m) {
    TrainContext out;
    out.ctx.resize(m.fields.size());
    out.index.resize(m.fields.size());
    for (std::size_t f = 0; f < m.fields.size(); ++f) {
        const Matrix xf = select_columns(m.train_inputs, field_input_dims(m.fields[f]));
        out.index[f] = match_anchors(xf, field_anchors(m.fields[f]));
        out.ctx[f] = out.index[f] ? gather(context_at_anchors(m.fields[f]), *out.index[f])
                                  : context_at(m.fields[f], xf);
    }
    return out;
}

struct TrainFactor {
    TrainContext tc;
    CholeskyFactor chol;
    Vector alpha;
};

TrainFactor factor_training(const GpModel& m) {
    TrainFactor out;
    out.tc = train_context(m);
    Matrix k = gram(m.kernel, m.train_inputs, out.tc.ctx).values;
    k.diagonal().array() += m.noise_variance;
    out.chol = cholesky_psd(k, kGramJitter);
    out.alpha = solve_chol(out.chol, m.train_targets);
    return out;
}

double lml_from_factor(const TrainFactor& tf, const Vector& y) {
    return -0.5 * y.dot(tf.alpha) - 0.5 * log_det_chol(tf.chol) - 0.5 * static_cast<double>(y.size()) * kLog2Pi;
}

Index field_param_count(const LatentField& f) {
    return std::visit(Overloaded{
                          [](const LengthscaleField& v) { return v.log_values.size(); },
                          [](const MatrixField& v) { return v.h.size() + v.omega.size(); },
                      },
                      f);
}

void require_kind(const GpModel& m, FieldKind kind, const char* what) {
    if (m.fields.empty()) throw InvalidArgument(std::string(what) + " needs a latent field");
    for (const auto& f : m.fields) {
        const bool is_ls = std::holds_alternative<LengthscaleField>(f);
        if (is_ls != (kind == FieldKind::lengthscale))
            throw InvalidArgument(std::string(what) + " got a field of the other kind");
    }
}

}  // namespace

std::string to_string(TargetTransform t) { return t == TargetTransform::log ? "log" : "none"; }

TargetTransform transform_from_string(const std::string& s) {
    if (s == "none") return TargetTransform::none;
    if (s == "log") return TargetTransform::log;
    throw ConfigError("unknown target transform '" + s + "' (expected none or log)");
}

void GpModel::validate() const {
    if (train_inputs.rows() == 0) throw EmptyDataset("model has no training rows");
    if (train_inputs.rows() != train_targets.size())
        throw DimensionMismatch("train_inputs has " + std::to_string(train_inputs.rows()) + " rows but " +
                                std::to_string(train_targets.size()) + " targets");
    if (!(noise_variance > 0.0) || !std::isfinite(noise_variance))
        throw InvalidArgument("noise variance must be positive");
    if (required_input_dims(kernel) > train_inputs.cols())
        throw DimensionMismatch("kernel reads column " + std::to_string(required_input_dims(kernel) - 1) +
                                " but inputs have " + std::to_string(train_inputs.cols()) + " columns");
    for (const FieldRef& r : field_references(kernel)) {
        if (r.field >= fields.size())
            throw MissingLatentContext("kernel references field " + std::to_string(r.field) + " but the model has " +
                                       std::to_string(fields.size()));
        const LatentField& f = fields[r.field];
        if (std::holds_alternative<LengthscaleField>(f) != (r.kind == FieldKind::lengthscale))
            throw MissingLatentContext("field " + std::to_string(r.field) + " has the wrong kind for its kernel node");
        if (field_input_dims(f) != r.dims)
            throw DimensionMismatch("field " + std::to_string(r.field) + " reads different dims than its node");
    }
}

std::vector<LatentField> make_fields(const KernelSpec& k, const Matrix& x, std::uint64_t seed) {
    std::vector<FieldRef> refs = field_references(k);
    std::size_t n = 0;
    for (const auto& r : refs) n = std::max(n, r.field + 1);
    std::vector<std::optional<LatentField>> made(n);
    for (const auto& r : refs) {
        if (made[r.field]) continue;
        const Matrix anchors = unique_rows(select_columns(x, r.dims)).rows;
        if (r.kind == FieldKind::lengthscale)
            made[r.field] = make_lengthscale_field(anchors, r.dims);
        else
            made[r.field] = make_matrix_field(anchors, r.dims, seed + r.field);
    }
    std::vector<LatentField> out;
    for (std::size_t i = 0; i < n; ++i) {
        if (!made[i]) throw MissingLatentContext("field id " + std::to_string(i) + " is never referenced");
        out.push_back(std::move(*made[i]));
    }
    return out;
}

LatentContext context_for(const GpModel& m, const Matrix& x) {
    LatentContext ctx(m.fields.size());
    for (std::size_t f = 0; f < m.fields.size(); ++f) {
        const Matrix xf = select_columns(x, field_input_dims(m.fields[f]));
        const auto index = match_anchors(xf, field_anchors(m.fields[f]));
        ctx[f] = index ? gather(context_at_anchors(m.fields[f]), *index) : context_at(m.fields[f], xf);
    }
    return ctx;
}

double log_marginal_likelihood(const GpModel& m) {
    m.validate();
    return lml_from_factor(factor_training(m), m.train_targets);
}

double field_log_prior(const GpModel& m) {
    double total = 0.0;
    for (const auto& f : m.fields) {
        total += std::visit(Overloaded{
                                [](const LengthscaleField& v) { return lengthscale_prior_logpdf(v); },
                                [](const MatrixField& v) {
                                    return matnorm_logpdf_grad(
                                               v.h, cholesky_psd(gram(v.row_kernel, v.anchors).values, kGramJitter),
                                               cholesky_psd(v.col_cov, kSmallJitter))
                                        .value;
                                },
                            },
                            f);
    }
    return total;
}

double map_objective(const GpModel& m) { return log_marginal_likelihood(m) + field_log_prior(m); }

double map_objective_fgk(const GpModel& m) {
    require_kind(m, FieldKind::lengthscale, "map_objective_fgk");
    return map_objective(m);
}

double map_objective_mgk(const GpModel& m) {
    require_kind(m, FieldKind::matrix, "map_objective_mgk");
    return map_objective(m);
}

Vector pack_params(const GpModel& m) {
    const Vector hyper = log_hyperparameters(m.kernel);
    Index total = hyper.size() + 1;
    for (const auto& f : m.fields) total += field_param_count(f);
    Vector theta(total);
    theta.head(hyper.size()) = hyper;
    Index pos = hyper.size();
    theta(pos++) = std::log(m.noise_variance);
    for (const auto& f : m.fields) {
        std::visit(Overloaded{
                       [&](const LengthscaleField& v) {
                           theta.segment(pos, v.log_values.size()) = vec(v.log_values);
                           pos += v.log_values.size();
                       },
                       [&](const MatrixField& v) {
                           theta.segment(pos, v.h.size()) = vec(v.h);
                           pos += v.h.size();
                           for (Index d = 0; d < v.omega.size(); ++d) theta(pos++) = softplus_inverse(v.omega(d));
                       },
                   },
                   f);
    }
    return theta;
}

GpModel unpack_params(const GpModel& m, const Vector& theta) {
    const Index nh = hyperparameter_count(m.kernel);
    Index total = nh + 1;
    for (const auto& f : m.fields) total += field_param_count(f);
    if (theta.size() != total)
        throw DimensionMismatch("parameter vector has " + std::to_string(theta.size()) + " entries, model needs " +
                                std::to_string(total));
    GpModel out = m;
    out.kernel = with_log_hyperparameters(m.kernel, theta.head(nh));
    Index pos = nh;
    out.noise_variance = exp_clamped(theta(pos++));
    for (auto& f : out.fields) {
        std::visit(Overloaded{
                       [&](LengthscaleField& v) {
                           v.log_values = unvec(theta.segment(pos, v.log_values.size()), v.log_values.rows(),
                                                v.log_values.cols());
                           pos += v.log_values.size();
                       },
                       [&](MatrixField& v) {
                           v.h = unvec(theta.segment(pos, v.h.size()), v.h.rows(), v.h.cols());
                           pos += v.h.size();
                           for (Index d = 0; d < v.omega.size(); ++d) v.omega(d) = softplus(theta(pos++));
                       },
                   },
                   f);
    }
    return out;
}

std::vector<std::string> param_names(const GpModel& m) {
    std::vector<std::string> names = hyperparameter_names(m.kernel);
    names.emplace_back("log_noise_variance");
    for (std::size_t fi = 0; fi < m.fields.size(); ++fi) {
        const std::string prefix = "field[" + std::to_string(fi) + "].";
        std::visit(Overloaded{
                       [&](const LengthscaleField& v) {
                           for (Index d = 0; d < v.log_values.cols(); ++d)
                               for (Index a = 0; a < v.log_values.rows(); ++a)
                                   names.push_back(prefix + "log_lengthscale[" + std::to_string(a) + "," +
                                                   std::to_string(d) + "]");
                       },
                       [&](const MatrixField& v) {
                           for (Index d = 0; d < v.h.cols(); ++d)
                               for (Index a = 0; a < v.h.rows(); ++a)
                                   names.push_back(prefix + "h[" + std::to_string(a) + "," + std::to_string(d) + "]");
                           for (Index d = 0; d < v.omega.size(); ++d)
                               names.push_back(prefix + "omega_raw[" + std::to_string(d) + "]");
                       },
                   },
                   m.fields[fi]);
    }
    return names;
}

double map_objective_grad(const GpModel& m, Vector* grad, bool include_prior) {
    m.validate();
    const TrainFactor tf = factor_training(m);
    double value = lml_from_factor(tf, m.train_targets);
    if (include_prior) value += field_log_prior(m);
    if (!grad) return value;

    const Index nh = hyperparameter_count(m.kernel);
    Index total = nh + 1;
    for (const auto& f : m.fields) total += field_param_count(f);
    grad->setZero(total);

    const Matrix kinv = inverse_chol(tf.chol);
    const Matrix w = 0.5 * (tf.alpha * tf.alpha.transpose() - kinv);
    const GramAdjoint adj = gram_backward_symmetric(m.kernel, m.train_inputs, tf.tc.ctx, w, false);
    grad->head(nh) = adj.hyper;
    Index pos = nh;
    (*grad)(pos++) = m.noise_variance * w.trace();

    for (std::size_t fi = 0; fi < m.fields.size(); ++fi) {
        if (!tf.tc.index[fi])
            throw InvalidArgument("field " + std::to_string(fi) + " is not anchored on the training inputs");
        const std::vector<Index>& index = *tf.tc.index[fi];
        const FieldAdjoint& fa = adj.rows_fields[fi];
        std::visit(
            Overloaded{
                [&](const LengthscaleField& v) {
                    Matrix g = Matrix::Zero(v.log_values.rows(), v.log_values.cols());
                    if (fa.log_lengthscales.size() > 0) {
                        for (std::size_t i = 0; i < index.size(); ++i)
                            for (Index d = 0; d < g.cols(); ++d) {
                                const Index a = index[i];
                                if (std::abs(v.log_values(a, d)) < kLogLengthscaleClamp)
                                    g(a, d) += fa.log_lengthscales(static_cast<Index>(i), d);
                            }
                    }
                    if (include_prior) {
                        const CholeskyFactor kl = cholesky_psd(gram(v.prior_kernel, v.anchors).values, kGramJitter);
                        const Matrix centred = v.log_values.rowwise() - v.prior_mean.transpose();
                        g -= solve_chol(kl, centred);
                    }
                    grad->segment(pos, g.size()) = vec(g);
                    pos += g.size();
                },
                [&](const MatrixField& v) {
                    Matrix gh = Matrix::Zero(v.h.rows(), v.h.cols());
                    Vector gomega = Vector::Zero(v.omega.size());
                    for (std::size_t i = 0; i < index.size() && !fa.sigma.empty(); ++i) {
                        const Index a = index[i];
                        const SmallMatrix& gs = fa.sigma[i];
                        gh.row(a) += sigma_from_h_backward(v.h.row(a).transpose(), gs).transpose();
                        for (Index d = 0; d < gomega.size(); ++d) gomega(d) += gs(d, d);
                    }
                    if (include_prior) {
                        gh += matnorm_logpdf_grad(v.h, cholesky_psd(gram(v.row_kernel, v.anchors).values, kGramJitter),
                                                  cholesky_psd(v.col_cov, kSmallJitter))
                                  .d_h;
                    }
                    grad->segment(pos, gh.size()) = vec(gh);
                    pos += gh.size();
                    for (Index d = 0; d < gomega.size(); ++d)
                        (*grad)(pos++) = gomega(d) * sigmoid(softplus_inverse(v.omega(d)));
                },
            },
            m.fields[fi]);
    }
    return value;
}

Objective negative_map_objective(const GpModel& m, bool include_prior) {
    return [m, include_prior](const Vector& theta, Vector* grad) {
        const GpModel cur = unpack_params(m, theta);
        const double v = map_objective_grad(cur, grad, include_prior);
        if (grad) *grad = -*grad;
        return -v;
    };
}

PredictiveDistribution posterior_predictive(const GpModel& m, const Matrix& x_star, const LatentContext& ctx_star,
                                            const PredictOptions& opts) {
    m.validate();
    const TrainFactor tf = factor_training(m);
    const Matrix ks = gram(m.kernel, x_star, m.train_inputs, ctx_star, tf.tc.ctx).values;
    const Matrix v = solve_lower(tf.chol, Matrix(ks.transpose()));
    PredictiveDistribution out;
    out.mean = ks * tf.alpha;
    out.variance = (gram_diag(m.kernel, x_star, ctx_star) - v.colwise().squaredNorm().transpose()).cwiseMax(0.0);
    if (opts.include_noise) out.variance.array() += m.noise_variance;
    if (opts.full_covariance) {
        out.covariance = gram(m.kernel, x_star, ctx_star).values - v.transpose() * v;
        if (opts.include_noise) out.covariance.diagonal().array() += m.noise_variance;
    }
    return out;
}

PredictiveDistribution posterior_predictive(const GpModel& m, const Matrix& x_star, const PredictOptions& opts) {
    return posterior_predictive(m, x_star, context_for(m, x_star), opts);
}

PredictiveDistribution predictive_mc(const GpModel& m, const Matrix& x_star, int draws, std::uint64_t seed,
                                     const PredictOptions& opts) {
    if (draws < 1) throw InvalidArgument("predictive_mc needs at least one draw");
    m.validate();
    bool any_matrix = false;
    for (const auto& f : m.fields) any_matrix = any_matrix || std::holds_alternative<MatrixField>(f);
    if (!any_matrix) throw InvalidArgument("predictive_mc needs a matrix-variate latent field");

    // Per field: fixed context (lengthscale fields) or J conditional draws of H*.
    LatentContext base(m.fields.size());
    std::vector<std::vector<Matrix>> h_draws(m.fields.size());
    for (std::size_t fi = 0; fi < m.fields.size(); ++fi) {
        const Matrix xf = select_columns(x_star, field_input_dims(m.fields[fi]));
        if (const auto* mf = std::get_if<MatrixField>(&m.fields[fi]))
            h_draws[fi] = sample_conditional_h(*mf, xf, draws, seed + fi);
        else
            base[fi] = context_at(m.fields[fi], xf);
    }

    const TrainFactor tf = factor_training(m);
    const Index ns = x_star.rows();
    PredictiveDistribution out;
    out.component_means.resize(ns, draws);
    out.component_variances.resize(ns, draws);
    for (int j = 0; j < draws; ++j) {
        LatentContext ctx = base;
        for (std::size_t fi = 0; fi < m.fields.size(); ++fi) {
            if (h_draws[fi].empty()) continue;
            const auto& mf = std::get<MatrixField>(m.fields[fi]);
            const Matrix& hs = h_draws[fi][static_cast<std::size_t>(j)];
            ctx[fi].sigma.clear();
            for (Index i = 0; i < ns; ++i) ctx[fi].sigma.push_back(sigma_from_h(hs.row(i).transpose(), mf.omega));
        }
        const Matrix ks = gram(m.kernel, x_star, m.train_inputs, ctx, tf.tc.ctx).values;
        const Matrix v = solve_lower(tf.chol, Matrix(ks.transpose()));
        out.component_means.col(j) = ks * tf.alpha;
        Vector var = (gram_diag(m.kernel, x_star, ctx) - v.colwise().squaredNorm().transpose()).cwiseMax(0.0);
        if (opts.include_noise) var.array() += m.noise_variance;
        out.component_variances.col(j) = var;
    }
    out.mean = out.component_means.rowwise().mean();
    const Vector second = (out.component_variances + out.component_means.cwiseAbs2()).rowwise().mean();
    out.variance = (second - out.mean.cwiseAbs2()).cwiseMax(0.0);
    if (draws == 1) out.variance = out.component_variances.col(0);
    return out;
}

LognormalPrediction lognormal_quantiles(const Vector& mean_z, const Vector& var_z, const std::vector<double>& probs) {
    if (mean_z.size() != var_z.size()) throw DimensionMismatch("lognormal_quantiles: mean and variance sizes differ");
    const boost::math::normal standard;
    std::vector<double> zq;
    for (double p : probs) {
        if (!(p > 0.0 && p < 1.0)) throw InvalidArgument("quantile probabilities must lie in (0, 1)");
        zq.push_back(boost::math::quantile(standard, p));
    }
    LognormalPrediction out;
    out.probabilities = probs;
    out.median = mean_z.array().exp().matrix();
    out.quantiles.resize(mean_z.size(), static_cast<Index>(probs.size()));
    for (Index i = 0; i < mean_z.size(); ++i) {
        const double sd = std::sqrt(std::max(var_z(i), 0.0));
        for (std::size_t q = 0; q < zq.size(); ++q)
            out.quantiles(i, static_cast<Index>(q)) = std::exp(mean_z(i) + sd * zq[q]);
    }
    return out;
}

LognormalPrediction lognormal_predict(const GpModel& m, const Matrix& x_star, const std::vector<double>& probs,
                                      double z_shift, double z_scale) {
    if (m.target_transform != TargetTransform::log)
        throw InvalidArgument("lognormal_predict needs a model fitted on log targets");
    if (!(z_scale > 0.0)) throw InvalidArgument("lognormal_predict scale must be positive");
    const PredictiveDistribution p = posterior_predictive(m, x_star);
    const Vector mean = (p.mean.array() * z_scale + z_shift).matrix();
    const Vector var = p.variance * (z_scale * z_scale);
    return lognormal_quantiles(mean, var, probs);
}

Preconditioner field_preconditioner(const GpModel& m, Index offset) {
    Preconditioner p;
    for (const auto& f : m.fields) {
        Matrix root = prior_root(f);
        const Index size = root.rows();
        p.blocks.emplace_back(offset, std::move(root));
        offset += size;
    }
    return p;
}

ExactFit fit_exact(const GpModel& init, const OptimConfig& config) {
    init.validate();
    const Preconditioner p = field_preconditioner(init, hyperparameter_count(init.kernel) + 1);
    const OptimResult r = minimize(negative_map_objective(init), pack_params(init), p, config);
    ExactFit out;
    out.model = unpack_params(init, r.params);
    out.trace = r.trace;
    // Report the maximised objective rather than its negation.
    for (double& v : out.trace.objective_per_iter) v = -v;
    out.objective = -r.objective;
    return out;
}

}  // namespace nsgp
