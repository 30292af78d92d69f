#include "nsgp/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <string>
#include <unordered_map>

#include <Eigen/Cholesky>

#include "nsgp/errors.hpp"
#include "nsgp/simd.hpp"

namespace nsgp {

template <class... Ts>
struct Overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

// ---- construction ---------------------------------------------------------

namespace {

void require_positive(double v, const char* what) {
    if (!(v > 0.0) || !std::isfinite(v)) throw InvalidArgument(std::string(what) + " must be positive and finite");
}

void require_dims(const std::vector<int>& dims, const char* what) {
    if (dims.empty()) throw InvalidArgument(std::string(what) + ": active_dims is empty");
    std::set<int> seen;
    for (int d : dims) {
        if (d < 0) throw InvalidArgument(std::string(what) + ": negative active dimension");
        if (!seen.insert(d).second) throw InvalidArgument(std::string(what) + ": duplicate active dimension");
    }
}

}  // namespace

KernelSpec::KernelSpec(Node node, std::vector<int> active_dims)
    : node_(std::move(node)), active_dims_(std::move(active_dims)) {}

KernelSpec KernelSpec::se_ard(double variance, std::vector<double> lengthscales, std::vector<int> active_dims) {
    require_positive(variance, "se_ard variance");
    require_dims(active_dims, "se_ard");
    if (lengthscales.size() != active_dims.size()) {
        throw DimensionMismatch("se_ard: " + std::to_string(lengthscales.size()) + " lengthscales for " +
                                std::to_string(active_dims.size()) + " active dims");
    }
    for (double l : lengthscales) require_positive(l, "se_ard lengthscale");
    return KernelSpec(SeArd{variance, std::move(lengthscales)}, std::move(active_dims));
}

KernelSpec KernelSpec::periodic(double variance, double lengthscale, double period, int active_dim) {
    require_positive(variance, "periodic variance");
    require_positive(lengthscale, "periodic lengthscale");
    require_positive(period, "periodic period");
    require_dims({active_dim}, "periodic");
    return KernelSpec(Periodic{variance, lengthscale, period}, {active_dim});
}

KernelSpec KernelSpec::constant(double variance) {
    require_positive(variance, "constant variance");
    return KernelSpec(Constant{variance}, {});
}

KernelSpec KernelSpec::fgk(std::size_t field, std::vector<int> active_dims) {
    require_dims(active_dims, "fgk");
    return KernelSpec(Fgk{field}, std::move(active_dims));
}

KernelSpec KernelSpec::mgk(std::size_t field, std::vector<int> active_dims) {
    require_dims(active_dims, "mgk");
    if (static_cast<int>(active_dims.size()) > kMaxMgkDims) {
        throw InvalidArgument("mgk supports at most " + std::to_string(kMaxMgkDims) + " dimensions");
    }
    return KernelSpec(Mgk{field}, std::move(active_dims));
}

KernelSpec KernelSpec::sum(KernelSpec left, KernelSpec right) {
    return KernelSpec(Sum{std::make_shared<const KernelSpec>(std::move(left)),
                          std::make_shared<const KernelSpec>(std::move(right))},
                      {});
}

KernelSpec KernelSpec::product(KernelSpec left, KernelSpec right) {
    return KernelSpec(Product{std::make_shared<const KernelSpec>(std::move(left)),
                              std::make_shared<const KernelSpec>(std::move(right))},
                      {});
}

KernelSpec KernelSpec::with_fixed(unsigned mask) const {
    KernelSpec out = *this;
    out.fixed_ = mask;
    return out;
}

bool KernelSpec::is_leaf() const {
    return !std::holds_alternative<Sum>(node_) && !std::holds_alternative<Product>(node_);
}

KernelSpec operator+(KernelSpec a, KernelSpec b) { return KernelSpec::sum(std::move(a), std::move(b)); }
KernelSpec operator*(KernelSpec a, KernelSpec b) { return KernelSpec::product(std::move(a), std::move(b)); }

// ---- hyperparameters ------------------------------------------------------

namespace {

/// Visits trainable scalars in pre-order as (name, log-value) pairs.
template <class F>
void for_each_hyper(const KernelSpec& k, const std::string& prefix, F&& f) {
    const unsigned fixed = k.fixed();
    std::visit(Overloaded{
                   [&](const SeArd& n) {
                       if (!(fixed & kFixVariance)) f(prefix + "se_ard.log_variance", std::log(n.variance));
                       if (!(fixed & kFixLengthscale)) {
                           for (std::size_t d = 0; d < n.lengthscales.size(); ++d) {
                               f(prefix + "se_ard.log_lengthscale[" + std::to_string(d) + "]",
                                 std::log(n.lengthscales[d]));
                           }
                       }
                   },
                   [&](const Periodic& n) {
                       if (!(fixed & kFixVariance)) f(prefix + "periodic.log_variance", std::log(n.variance));
                       if (!(fixed & kFixLengthscale)) f(prefix + "periodic.log_lengthscale", std::log(n.lengthscale));
                       if (!(fixed & kFixPeriod)) f(prefix + "periodic.log_period", std::log(n.period));
                   },
                   [&](const Constant& n) {
                       if (!(fixed & kFixVariance)) f(prefix + "constant.log_variance", std::log(n.variance));
                   },
                   [&](const Fgk&) {},
                   [&](const Mgk&) {},
                   [&](const Sum& n) {
                       for_each_hyper(*n.left, prefix + "sum.left/", f);
                       for_each_hyper(*n.right, prefix + "sum.right/", f);
                   },
                   [&](const Product& n) {
                       for_each_hyper(*n.left, prefix + "product.left/", f);
                       for_each_hyper(*n.right, prefix + "product.right/", f);
                   },
               },
               k.node());
}

KernelSpec rebuild(const KernelSpec& k, const Vector& v, Index& pos) {
    const unsigned fixed = k.fixed();
    auto next = [&](double current, bool is_fixed) {
        if (is_fixed) return current;
        if (pos >= v.size()) throw DimensionMismatch("with_log_hyperparameters: too few values");
        // Keeps a runaway optimiser step finite; far outside any useful range.
        return std::exp(std::clamp(v[pos++], -40.0, 40.0));
    };
    return std::visit(
        Overloaded{
            [&](const SeArd& n) {
                const double var = next(n.variance, fixed & kFixVariance);
                std::vector<double> ls = n.lengthscales;
                for (double& l : ls) l = next(l, fixed & kFixLengthscale);
                return KernelSpec::se_ard(var, std::move(ls), k.active_dims()).with_fixed(fixed);
            },
            [&](const Periodic& n) {
                const double var = next(n.variance, fixed & kFixVariance);
                const double l = next(n.lengthscale, fixed & kFixLengthscale);
                const double p = next(n.period, fixed & kFixPeriod);
                return KernelSpec::periodic(var, l, p, k.active_dims().front()).with_fixed(fixed);
            },
            [&](const Constant& n) {
                return KernelSpec::constant(next(n.variance, fixed & kFixVariance)).with_fixed(fixed);
            },
            [&](const Fgk&) { return k; },
            [&](const Mgk&) { return k; },
            [&](const Sum& n) {
                KernelSpec l = rebuild(*n.left, v, pos);
                KernelSpec r = rebuild(*n.right, v, pos);
                return KernelSpec::sum(std::move(l), std::move(r));
            },
            [&](const Product& n) {
                KernelSpec l = rebuild(*n.left, v, pos);
                KernelSpec r = rebuild(*n.right, v, pos);
                return KernelSpec::product(std::move(l), std::move(r));
            },
        },
        k.node());
}

}  // namespace

Vector log_hyperparameters(const KernelSpec& k) {
    std::vector<double> out;
    for_each_hyper(k, "", [&](const std::string&, double v) { out.push_back(v); });
    return Eigen::Map<const Vector>(out.data(), static_cast<Index>(out.size()));
}

Index hyperparameter_count(const KernelSpec& k) {
    Index n = 0;
    for_each_hyper(k, "", [&](const std::string&, double) { ++n; });
    return n;
}

std::vector<std::string> hyperparameter_names(const KernelSpec& k) {
    std::vector<std::string> out;
    for_each_hyper(k, "", [&](const std::string& name, double) { out.push_back(name); });
    return out;
}

KernelSpec with_log_hyperparameters(const KernelSpec& k, const Vector& log_values) {
    Index pos = 0;
    KernelSpec out = rebuild(k, log_values, pos);
    if (pos != log_values.size()) throw DimensionMismatch("with_log_hyperparameters: too many values");
    return out;
}

int required_input_dims(const KernelSpec& k) {
    int out = 0;
    for (int d : k.active_dims()) out = std::max(out, d + 1);
    if (const auto* s = std::get_if<Sum>(&k.node())) {
        out = std::max({out, required_input_dims(*s->left), required_input_dims(*s->right)});
    } else if (const auto* p = std::get_if<Product>(&k.node())) {
        out = std::max({out, required_input_dims(*p->left), required_input_dims(*p->right)});
    }
    return out;
}

std::vector<FieldRef> field_references(const KernelSpec& k) {
    std::vector<FieldRef> out;
    std::visit(Overloaded{
                   [&](const Fgk& n) { out.push_back({n.field, FieldKind::lengthscale, k.active_dims()}); },
                   [&](const Mgk& n) { out.push_back({n.field, FieldKind::matrix, k.active_dims()}); },
                   [&](const Sum& n) {
                       for (auto& r : field_references(*n.left)) out.push_back(r);
                       for (auto& r : field_references(*n.right)) out.push_back(r);
                   },
                   [&](const Product& n) {
                       for (auto& r : field_references(*n.left)) out.push_back(r);
                       for (auto& r : field_references(*n.right)) out.push_back(r);
                   },
                   [&](const auto&) {},
               },
               k.node());
    return out;
}

bool has_nonstationary(const KernelSpec& k) { return !field_references(k).empty(); }

// ---- pointwise kernels ----------------------------------------------------

double k_se_ard(const Vector& xi, const Vector& xj, double variance, const std::vector<double>& lengthscales) {
    if (xi.size() != xj.size() || xi.size() != static_cast<Index>(lengthscales.size())) {
        throw DimensionMismatch("k_se_ard: inputs and lengthscales disagree in dimension");
    }
    double acc = 0.0;
    for (Index d = 0; d < xi.size(); ++d) {
        const double r = xi[d] - xj[d];
        acc += r * r / (lengthscales[d] * lengthscales[d]);
    }
    return variance * std::exp(-0.5 * acc);
}

double k_periodic(double xi, double xj, double variance, double lengthscale, double period) {
    const double s = std::sin(std::numbers::pi * std::abs(xi - xj) / period);
    return variance * std::exp(-2.0 * s * s / (lengthscale * lengthscale));
}

double k_fgk(const Vector& xi, const Vector& xj, const Vector& li, const Vector& lj) {
    if (xi.size() != xj.size() || li.size() != xi.size() || lj.size() != xi.size()) {
        throw DimensionMismatch("k_fgk: inputs and lengthscales disagree in dimension");
    }
    if ((li.array() <= 0.0).any() || (lj.array() <= 0.0).any()) {
        throw NonPositiveLengthscale("k_fgk requires strictly positive lengthscales");
    }
    double pref = 1.0;
    double expo = 0.0;
    for (Index d = 0; d < xi.size(); ++d) {
        const double s = li[d] * li[d] + lj[d] * lj[d];
        const double r = xi[d] - xj[d];
        pref *= 2.0 * li[d] * lj[d] / s;
        expo += r * r / s;
    }
    return std::sqrt(pref) * std::exp(-expo);
}

namespace {

struct SmallChol {
    Eigen::LLT<SmallMatrix> llt;
    double logdet = 0.0;
};

SmallChol small_chol(const SmallMatrix& m, const char* what) {
    SmallChol c{Eigen::LLT<SmallMatrix>(m), 0.0};
    if (c.llt.info() != Eigen::Success) throw NotPositiveDefinite(what);
    c.logdet = 2.0 * c.llt.matrixLLT().diagonal().array().log().sum();
    return c;
}

}  // namespace

double k_mgk(const Vector& xi, const Vector& xj, const SmallMatrix& sigma_i, const SmallMatrix& sigma_j) {
    const Index d = xi.size();
    if (xj.size() != d || sigma_i.rows() != d || sigma_i.cols() != d || sigma_j.rows() != d ||
        sigma_j.cols() != d) {
        throw DimensionMismatch("k_mgk: inputs and Sigma matrices disagree in dimension");
    }
    const SmallChol ci = small_chol(sigma_i, "k_mgk: Sigma(x_i)");
    const SmallChol cj = small_chol(sigma_j, "k_mgk: Sigma(x_j)");
    const SmallChol ca = small_chol(sigma_i + sigma_j, "k_mgk: Sigma(x_i) + Sigma(x_j)");
    const SmallVector r = xi - xj;
    const double quad = r.dot(ca.llt.solve(r));
    const double log_pref = 0.25 * ci.logdet + 0.25 * cj.logdet - 0.5 * (ca.logdet - d * std::log(2.0));
    return std::exp(log_pref - quad);
}

namespace {

double prop2_trapezoid(const Vector& xi, const Vector& xj, const SmallMatrix& pi, const SmallMatrix& pj,
                       const SmallVector& centre, const SmallVector& half, int n) {
    const Index d = xi.size();
    auto integrand = [&](const SmallVector& a) {
        const SmallVector ri = xi - a;
        const SmallVector rj = xj - a;
        return std::exp(-ri.dot(pi * ri) - rj.dot(pj * rj));
    };
    SmallVector step(d);
    for (Index k = 0; k < d; ++k) step(k) = 2.0 * half(k) / (n - 1);
    auto weight = [n](int i) { return (i == 0 || i == n - 1) ? 0.5 : 1.0; };
    double total = 0.0;
    SmallVector a(d);
    if (d == 1) {
        for (int i = 0; i < n; ++i) {
            a(0) = centre(0) - half(0) + i * step(0);
            total += weight(i) * integrand(a);
        }
        return total * step(0);
    }
    for (int i = 0; i < n; ++i) {
        a(0) = centre(0) - half(0) + i * step(0);
        for (int j = 0; j < n; ++j) {
            a(1) = centre(1) - half(1) + j * step(1);
            total += weight(i) * weight(j) * integrand(a);
        }
    }
    return total * step.prod();
}

}  // namespace

double verify_prop2_integral(const Vector& xi, const Vector& xj, const SmallMatrix& sigma_i,
                             const SmallMatrix& sigma_j, const QuadratureGrid& grid) {
    const Index d = xi.size();
    if (d < 1 || d > 2) throw InvalidArgument("verify_prop2_integral supports 1 or 2 dimensions");
    if (xj.size() != d || sigma_i.rows() != d || sigma_j.rows() != d)
        throw DimensionMismatch("verify_prop2_integral: inputs and Sigma matrices disagree in dimension");
    if (grid.half_width_sd < 8.0) throw InvalidArgument("quadrature grid must cover at least 8 standard deviations");
    if (grid.points_per_dim < 3) throw InvalidArgument("quadrature grid needs at least 3 points per dimension");

    const SmallChol ci = small_chol(sigma_i, "verify_prop2_integral: Sigma_i");
    const SmallChol cj = small_chol(sigma_j, "verify_prop2_integral: Sigma_j");
    const SmallMatrix pi = ci.llt.solve(SmallMatrix::Identity(d, d));
    const SmallMatrix pj = cj.llt.solve(SmallMatrix::Identity(d, d));
    // The integrand is proportional to a Gaussian with precision 2(Pi + Pj).
    const SmallMatrix prec = 2.0 * (pi + pj);
    const SmallMatrix cov = prec.llt().solve(SmallMatrix::Identity(d, d));
    const SmallVector centre = (pi + pj).ldlt().solve(SmallVector(pi * xi + pj * xj));
    SmallVector half(d);
    for (Index k = 0; k < d; ++k) half(k) = grid.half_width_sd * std::sqrt(cov(k, k));

    const int n = grid.points_per_dim;
    const double coarse = prop2_trapezoid(xi, xj, pi, pj, centre, half, n);
    const double fine = prop2_trapezoid(xi, xj, pi, pj, centre, half, 2 * n - 1);

    // Each factor is a Gaussian with covariance Sigma/2 up to (2 pi)^{D/2} |Sigma/2|^{1/2};
    // their product integrates to N(xi; xj, (Si + Sj)/2) times those constants.
    const double log_two_pi = std::log(2.0 * std::numbers::pi);
    const SmallChol cs = small_chol(sigma_i + sigma_j, "verify_prop2_integral: Sigma_i + Sigma_j");
    const double log_norm = 0.5 * d * log_two_pi + 0.5 * (ci.logdet - d * std::log(2.0)) +
                            0.5 * (cj.logdet - d * std::log(2.0)) - 0.5 * (cs.logdet - d * std::log(2.0));
    const double norm = std::exp(log_norm);
    if (std::abs(fine - coarse) / norm > 1e-6)
        throw GridTooCoarse("doubling the quadrature resolution changed the result by " +
                            std::to_string(std::abs(fine - coarse) / norm));
    return fine / norm;
}

KernelSpec spatiotemporal_kernel(SpatioTemporal kind, const SpatioTemporalParams& p) {
    KernelSpec temporal = KernelSpec::se_ard(p.temporal_variance, p.temporal_lengthscales, {0, 1}) *
                          KernelSpec::periodic(p.periodic_variance, p.periodic_lengthscale, p.period, 2);
    if (kind == SpatioTemporal::stationary) {
        return temporal + KernelSpec::se_ard(p.spatial_variance, p.spatial_lengthscales, {0, 1});
    }
    return temporal + KernelSpec::constant(p.spatial_variance) * KernelSpec::fgk(0, {0, 1});
}

double k_spatiotemporal(const Vector& xi, const Vector& xj, SpatioTemporal kind, const SpatioTemporalParams& p,
                        const Vector& li, const Vector& lj) {
    if (xi.size() != 3 || xj.size() != 3) throw DimensionMismatch("k_spatiotemporal expects (lat, lon, t)");
    const Vector si = xi.head(2);
    const Vector sj = xj.head(2);
    const double temporal = k_se_ard(si, sj, p.temporal_variance, p.temporal_lengthscales) *
                            k_periodic(xi[2], xj[2], p.periodic_variance, p.periodic_lengthscale, p.period);
    const double spatial = kind == SpatioTemporal::stationary
                               ? k_se_ard(si, sj, p.spatial_variance, p.spatial_lengthscales)
                               : p.spatial_variance * k_fgk(si, sj, li, lj);
    return temporal + spatial;
}

// ---- prepared latent context ----------------------------------------------

namespace {

constexpr double kPi = std::numbers::pi;

void mirror_lower(Matrix& m) {
    for (Index j = 1; j < m.cols(); ++j) {
        for (Index i = 0; i < j; ++i) m(i, j) = m(j, i);
    }
}

/// Per-input quantities reused by every pair touching that input.
struct PreparedField {
    Matrix lengthscales;                 // FGK, n x D
    std::vector<SmallMatrix> sigma;      // MGK
    std::vector<SmallMatrix> sigma_inv;  // MGK
    std::vector<double> logdet;          // MGK
};
using Prepared = std::vector<PreparedField>;

Prepared prepare(const KernelSpec& k, const LatentContext& ctx, Index n) {
    Prepared out;
    for (const FieldRef& ref : field_references(k)) {
        if (ref.field >= ctx.size()) {
            throw MissingLatentContext("kernel references field " + std::to_string(ref.field) +
                                       " but the context has " + std::to_string(ctx.size()));
        }
        if (out.size() <= ref.field) out.resize(ref.field + 1);
        PreparedField& pf = out[ref.field];
        const FieldContext& fc = ctx[ref.field];
        const Index dims = static_cast<Index>(ref.dims.size());
        if (ref.kind == FieldKind::lengthscale) {
            if (fc.log_lengthscales.rows() != n || fc.log_lengthscales.cols() != dims) {
                throw MissingLatentContext("field " + std::to_string(ref.field) + " has " +
                                           std::to_string(fc.log_lengthscales.rows()) + "x" +
                                           std::to_string(fc.log_lengthscales.cols()) +
                                           " lengthscales, expected " + std::to_string(n) + "x" +
                                           std::to_string(dims));
            }
            if (pf.lengthscales.size() == 0) pf.lengthscales = fc.log_lengthscales.array().exp().matrix();
        } else {
            if (static_cast<Index>(fc.sigma.size()) != n) {
                throw MissingLatentContext("field " + std::to_string(ref.field) + " has " +
                                           std::to_string(fc.sigma.size()) + " Sigma matrices, expected " +
                                           std::to_string(n));
            }
            if (!pf.sigma.empty()) continue;
            pf.sigma = fc.sigma;
            pf.sigma_inv.resize(n);
            pf.logdet.resize(n);
            for (Index i = 0; i < n; ++i) {
                if (fc.sigma[i].rows() != dims || fc.sigma[i].cols() != dims) {
                    throw MissingLatentContext("Sigma matrix has the wrong dimension");
                }
                const SmallChol c = small_chol(fc.sigma[i], "Sigma(x) is not positive definite");
                pf.logdet[i] = c.logdet;
                pf.sigma_inv[i] = c.llt.solve(SmallMatrix::Identity(dims, dims));
            }
        }
    }
    return out;
}

struct Side {
    const Matrix& x;
    Index i;
    const Prepared& f;
};

double pair_value(const KernelSpec& k, const Side& a, const Side& b) {
    const auto& dims = k.active_dims();
    return std::visit(
        Overloaded{
            [&](const SeArd& n) {
                double acc = 0.0;
                for (std::size_t d = 0; d < dims.size(); ++d) {
                    const double r = a.x(a.i, dims[d]) - b.x(b.i, dims[d]);
                    acc += r * r / (n.lengthscales[d] * n.lengthscales[d]);
                }
                return n.variance * std::exp(-0.5 * acc);
            },
            [&](const Periodic& n) {
                return k_periodic(a.x(a.i, dims[0]), b.x(b.i, dims[0]), n.variance, n.lengthscale, n.period);
            },
            [&](const Constant& n) { return n.variance; },
            [&](const Fgk& n) {
                const Matrix& la = a.f[n.field].lengthscales;
                const Matrix& lb = b.f[n.field].lengthscales;
                double pref = 1.0;
                double expo = 0.0;
                for (std::size_t d = 0; d < dims.size(); ++d) {
                    const double p = la(a.i, d);
                    const double q = lb(b.i, d);
                    const double s = p * p + q * q;
                    const double r = a.x(a.i, dims[d]) - b.x(b.i, dims[d]);
                    pref *= 2.0 * p * q / s;
                    expo += r * r / s;
                }
                return std::sqrt(pref) * std::exp(-expo);
            },
            [&](const Mgk& n) {
                const PreparedField& fa = a.f[n.field];
                const PreparedField& fb = b.f[n.field];
                const Index dd = static_cast<Index>(dims.size());
                SmallVector r(dd);
                for (Index d = 0; d < dd; ++d) r[d] = a.x(a.i, dims[d]) - b.x(b.i, dims[d]);
                const SmallChol ca = small_chol(fa.sigma[a.i] + fb.sigma[b.i], "Sigma(x_i) + Sigma(x_j)");
                const double quad = r.dot(ca.llt.solve(r));
                const double log_pref =
                    0.25 * fa.logdet[a.i] + 0.25 * fb.logdet[b.i] - 0.5 * (ca.logdet - dd * std::log(2.0));
                return std::exp(log_pref - quad);
            },
            [&](const Sum& n) { return pair_value(*n.left, a, b) + pair_value(*n.right, a, b); },
            [&](const Product& n) { return pair_value(*n.left, a, b) * pair_value(*n.right, a, b); },
        },
        k.node());
}

// ---- Gram forward ---------------------------------------------------------

Matrix leaf_gram(const KernelSpec& k, const Matrix& xr, const Matrix& xc, const Prepared& pr, const Prepared& pc,
                 bool symmetric) {
    const Index n = xr.rows();
    const Index m = xc.rows();
    Matrix out(n, m);
    const auto& dims = k.active_dims();
    const simd::KernelTable& table =
        dims.size() <= 16 ? simd::active_table() : simd::scalar_table();

    if (const auto* se = std::get_if<SeArd>(&k.node())) {
        std::vector<const double*> rows(dims.size());
        std::vector<double> inv_ls2(dims.size());
        std::vector<double> col(dims.size());
        for (std::size_t d = 0; d < dims.size(); ++d) {
            rows[d] = xr.col(dims[d]).data();
            inv_ls2[d] = 1.0 / (se->lengthscales[d] * se->lengthscales[d]);
        }
        for (Index j = 0; j < m; ++j) {
            for (std::size_t d = 0; d < dims.size(); ++d) col[d] = xc(j, dims[d]);
            table.se_ard_column(rows.data(), static_cast<std::size_t>(n), dims.size(), col.data(), inv_ls2.data(),
                                se->variance, out.col(j).data());
        }
    } else if (const auto* fg = std::get_if<Fgk>(&k.node())) {
        const Matrix& lr = pr[fg->field].lengthscales;
        const Matrix& lc = pc[fg->field].lengthscales;
        std::vector<const double*> rows(dims.size());
        std::vector<const double*> row_ls(dims.size());
        std::vector<double> col(dims.size());
        std::vector<double> col_ls(dims.size());
        for (std::size_t d = 0; d < dims.size(); ++d) {
            rows[d] = xr.col(dims[d]).data();
            row_ls[d] = lr.col(static_cast<Index>(d)).data();
        }
        for (Index j = 0; j < m; ++j) {
            for (std::size_t d = 0; d < dims.size(); ++d) {
                col[d] = xc(j, dims[d]);
                col_ls[d] = lc(j, static_cast<Index>(d));
            }
            table.fgk_column(rows.data(), row_ls.data(), static_cast<std::size_t>(n), dims.size(), col.data(),
                             col_ls.data(), out.col(j).data());
        }
    } else if (const auto* c = std::get_if<Constant>(&k.node())) {
        out.setConstant(c->variance);
    } else {
        for (Index j = 0; j < m; ++j) {
            const Index start = symmetric ? j : 0;
            for (Index i = start; i < n; ++i) out(i, j) = pair_value(k, Side{xr, i, pr}, Side{xc, j, pc});
        }
        if (symmetric) mirror_lower(out);
    }
    return out;
}

Matrix gram_rec(const KernelSpec& k, const Matrix& xr, const Matrix& xc, const Prepared& pr, const Prepared& pc,
                bool symmetric) {
    if (const auto* s = std::get_if<Sum>(&k.node())) {
        return gram_rec(*s->left, xr, xc, pr, pc, symmetric) + gram_rec(*s->right, xr, xc, pr, pc, symmetric);
    }
    if (const auto* p = std::get_if<Product>(&k.node())) {
        return gram_rec(*p->left, xr, xc, pr, pc, symmetric)
            .cwiseProduct(gram_rec(*p->right, xr, xc, pr, pc, symmetric));
    }
    return leaf_gram(k, xr, xc, pr, pc, symmetric);
}

void require_input_width(const KernelSpec& k, const Matrix& x, const char* what) {
    const int need = required_input_dims(k);
    if (x.cols() < need) {
        throw DimensionMismatch(std::string(what) + ": kernel reads input column " + std::to_string(need - 1) +
                                " but inputs have " + std::to_string(x.cols()) + " columns");
    }
}

}  // namespace

GramMatrix gram(const KernelSpec& k, const Matrix& x_rows, const Matrix& x_cols, const LatentContext& ctx_rows,
                const LatentContext& ctx_cols) {
    require_input_width(k, x_rows, "gram rows");
    require_input_width(k, x_cols, "gram cols");
    const Prepared pr = prepare(k, ctx_rows, x_rows.rows());
    const Prepared pc = prepare(k, ctx_cols, x_cols.rows());
    return GramMatrix{gram_rec(k, x_rows, x_cols, pr, pc, false), false};
}

GramMatrix gram(const KernelSpec& k, const Matrix& x, const LatentContext& ctx) {
    require_input_width(k, x, "gram");
    const Prepared p = prepare(k, ctx, x.rows());
    Matrix values = gram_rec(k, x, x, p, p, true);
    // Column kernels evaluate k(x_i, x_j) and k(x_j, x_i) independently.
    mirror_lower(values);
    return GramMatrix{std::move(values), true};
}

Vector gram_diag(const KernelSpec& k, const Matrix& x, const LatentContext& ctx) {
    require_input_width(k, x, "gram_diag");
    const Prepared p = prepare(k, ctx, x.rows());
    Vector out(x.rows());
    for (Index i = 0; i < x.rows(); ++i) out[i] = pair_value(k, Side{x, i, p}, Side{x, i, p});
    return out;
}

double kernel_entry(const KernelSpec& k, const Matrix& x_rows, Index i, const LatentContext& ctx_rows,
                    const Matrix& x_cols, Index j, const LatentContext& ctx_cols) {
    const Prepared pr = prepare(k, ctx_rows, x_rows.rows());
    const Prepared pc = prepare(k, ctx_cols, x_cols.rows());
    return pair_value(k, Side{x_rows, i, pr}, Side{x_cols, j, pc});
}

// ---- Gram backward --------------------------------------------------------

namespace {

/// Pre-order offset of each node's first trainable hyperparameter.
using OffsetMap = std::unordered_map<const KernelSpec*, Index>;

void build_offsets(const KernelSpec& k, Index& pos, OffsetMap& out) {
    out[&k] = pos;
    if (const auto* s = std::get_if<Sum>(&k.node())) {
        build_offsets(*s->left, pos, out);
        build_offsets(*s->right, pos, out);
    } else if (const auto* p = std::get_if<Product>(&k.node())) {
        build_offsets(*p->left, pos, out);
        build_offsets(*p->right, pos, out);
    } else {
        pos += hyperparameter_count(k);
    }
}

struct Sink {
    Vector& hyper;
    Matrix* inputs_a;  // may be null
    Matrix* inputs_b;
    std::vector<FieldAdjoint>& fields_a;
    std::vector<FieldAdjoint>& fields_b;
};

void pair_backward(const KernelSpec& k, const Side& a, const Side& b, double g, const OffsetMap& offsets,
                   Sink& sink) {
    const auto& dims = k.active_dims();
    const unsigned fixed = k.fixed();
    std::visit(
        Overloaded{
            [&](const SeArd& n) {
                Index pos = offsets.at(&k);
                double acc = 0.0;
                for (std::size_t d = 0; d < dims.size(); ++d) {
                    const double r = a.x(a.i, dims[d]) - b.x(b.i, dims[d]);
                    acc += r * r / (n.lengthscales[d] * n.lengthscales[d]);
                }
                const double kv = n.variance * std::exp(-0.5 * acc);
                const double gk = g * kv;
                if (!(fixed & kFixVariance)) sink.hyper[pos++] += gk;
                for (std::size_t d = 0; d < dims.size(); ++d) {
                    const double l2 = n.lengthscales[d] * n.lengthscales[d];
                    const double r = a.x(a.i, dims[d]) - b.x(b.i, dims[d]);
                    if (!(fixed & kFixLengthscale)) sink.hyper[pos++] += gk * r * r / l2;
                    if (sink.inputs_a != nullptr) {
                        (*sink.inputs_a)(a.i, dims[d]) -= gk * r / l2;
                        (*sink.inputs_b)(b.i, dims[d]) += gk * r / l2;
                    }
                }
            },
            [&](const Periodic& n) {
                Index pos = offsets.at(&k);
                const double r = a.x(a.i, dims[0]) - b.x(b.i, dims[0]);
                const double u = kPi * r / n.period;
                const double s = std::sin(u);
                const double l2 = n.lengthscale * n.lengthscale;
                const double gk = g * n.variance * std::exp(-2.0 * s * s / l2);
                const double sin2u = std::sin(2.0 * u);
                if (!(fixed & kFixVariance)) sink.hyper[pos++] += gk;
                if (!(fixed & kFixLengthscale)) sink.hyper[pos++] += gk * 4.0 * s * s / l2;
                if (!(fixed & kFixPeriod)) sink.hyper[pos++] += gk * 2.0 * sin2u * u / l2;
                if (sink.inputs_a != nullptr) {
                    const double de_dr = -2.0 * sin2u / l2 * kPi / n.period;
                    (*sink.inputs_a)(a.i, dims[0]) += gk * de_dr;
                    (*sink.inputs_b)(b.i, dims[0]) -= gk * de_dr;
                }
            },
            [&](const Constant& n) {
                if (!(fixed & kFixVariance)) sink.hyper[offsets.at(&k)] += g * n.variance;
            },
            [&](const Fgk& n) {
                const Matrix& la = a.f[n.field].lengthscales;
                const Matrix& lb = b.f[n.field].lengthscales;
                const double kv = pair_value(k, a, b);
                const double gk = g * kv;
                Matrix& ga = sink.fields_a[n.field].log_lengthscales;
                Matrix& gb = sink.fields_b[n.field].log_lengthscales;
                for (std::size_t d = 0; d < dims.size(); ++d) {
                    const double p = la(a.i, d);
                    const double q = lb(b.i, d);
                    const double p2 = p * p;
                    const double q2 = q * q;
                    const double s = p2 + q2;
                    const double r = a.x(a.i, dims[d]) - b.x(b.i, dims[d]);
                    const double rs = r * r / (s * s);
                    ga(a.i, d) += gk * (0.5 - p2 / s + 2.0 * p2 * rs);
                    gb(b.i, d) += gk * (0.5 - q2 / s + 2.0 * q2 * rs);
                    if (sink.inputs_a != nullptr) {
                        (*sink.inputs_a)(a.i, dims[d]) -= gk * 2.0 * r / s;
                        (*sink.inputs_b)(b.i, dims[d]) += gk * 2.0 * r / s;
                    }
                }
            },
            [&](const Mgk& n) {
                const PreparedField& fa = a.f[n.field];
                const PreparedField& fb = b.f[n.field];
                const Index dd = static_cast<Index>(dims.size());
                SmallVector r(dd);
                for (Index d = 0; d < dd; ++d) r[d] = a.x(a.i, dims[d]) - b.x(b.i, dims[d]);
                const SmallChol ca = small_chol(fa.sigma[a.i] + fb.sigma[b.i], "Sigma(x_i) + Sigma(x_j)");
                const SmallMatrix a_inv = ca.llt.solve(SmallMatrix::Identity(dd, dd));
                const SmallVector q = a_inv * r;
                const double log_pref =
                    0.25 * fa.logdet[a.i] + 0.25 * fb.logdet[b.i] - 0.5 * (ca.logdet - dd * std::log(2.0));
                const double gk = g * std::exp(log_pref - r.dot(q));
                const SmallMatrix common = -0.5 * a_inv + q * q.transpose();
                sink.fields_a[n.field].sigma[a.i] += gk * (0.25 * fa.sigma_inv[a.i] + common);
                sink.fields_b[n.field].sigma[b.i] += gk * (0.25 * fb.sigma_inv[b.i] + common);
                if (sink.inputs_a != nullptr) {
                    for (Index d = 0; d < dd; ++d) {
                        (*sink.inputs_a)(a.i, dims[d]) -= 2.0 * gk * q[d];
                        (*sink.inputs_b)(b.i, dims[d]) += 2.0 * gk * q[d];
                    }
                }
            },
            [&](const Sum& n) {
                pair_backward(*n.left, a, b, g, offsets, sink);
                pair_backward(*n.right, a, b, g, offsets, sink);
            },
            [&](const Product& n) {
                const double vl = pair_value(*n.left, a, b);
                const double vr = pair_value(*n.right, a, b);
                pair_backward(*n.left, a, b, g * vr, offsets, sink);
                pair_backward(*n.right, a, b, g * vl, offsets, sink);
            },
        },
        k.node());
}

std::vector<FieldAdjoint> zero_field_adjoints(const KernelSpec& k, const LatentContext& ctx, Index n) {
    std::vector<FieldAdjoint> out(ctx.size());
    for (const FieldRef& ref : field_references(k)) {
        const Index dims = static_cast<Index>(ref.dims.size());
        FieldAdjoint& fa = out[ref.field];
        if (ref.kind == FieldKind::lengthscale) {
            fa.log_lengthscales = Matrix::Zero(n, dims);
        } else {
            fa.sigma.assign(n, SmallMatrix::Zero(dims, dims));
        }
    }
    return out;
}

void add_fields(std::vector<FieldAdjoint>& into, const std::vector<FieldAdjoint>& from) {
    for (std::size_t f = 0; f < from.size(); ++f) {
        if (from[f].log_lengthscales.size() > 0) into[f].log_lengthscales += from[f].log_lengthscales;
        for (std::size_t i = 0; i < from[f].sigma.size(); ++i) into[f].sigma[i] += from[f].sigma[i];
    }
}

}  // namespace

GramAdjoint gram_backward(const KernelSpec& k, const Matrix& x_rows, const Matrix& x_cols,
                          const LatentContext& ctx_rows, const LatentContext& ctx_cols, const Matrix& adjoint,
                          bool want_inputs) {
    if (adjoint.rows() != x_rows.rows() || adjoint.cols() != x_cols.rows()) {
        throw DimensionMismatch("gram_backward: adjoint shape does not match the Gram");
    }
    require_input_width(k, x_rows, "gram_backward rows");
    require_input_width(k, x_cols, "gram_backward cols");
    const Prepared pr = prepare(k, ctx_rows, x_rows.rows());
    const Prepared pc = prepare(k, ctx_cols, x_cols.rows());
    OffsetMap offsets;
    Index count = 0;
    build_offsets(k, count, offsets);

    GramAdjoint out;
    out.hyper = Vector::Zero(count);
    out.rows_fields = zero_field_adjoints(k, ctx_rows, x_rows.rows());
    out.cols_fields = zero_field_adjoints(k, ctx_cols, x_cols.rows());
    if (want_inputs) {
        out.rows_inputs = Matrix::Zero(x_rows.rows(), x_rows.cols());
        out.cols_inputs = Matrix::Zero(x_cols.rows(), x_cols.cols());
    }
    Sink sink{out.hyper, want_inputs ? &out.rows_inputs : nullptr, want_inputs ? &out.cols_inputs : nullptr,
              out.rows_fields, out.cols_fields};
    for (Index j = 0; j < x_cols.rows(); ++j) {
        for (Index i = 0; i < x_rows.rows(); ++i) {
            const double g = adjoint(i, j);
            if (g == 0.0) continue;
            pair_backward(k, Side{x_rows, i, pr}, Side{x_cols, j, pc}, g, offsets, sink);
        }
    }
    return out;
}

GramAdjoint gram_backward_symmetric(const KernelSpec& k, const Matrix& x, const LatentContext& ctx,
                                    const Matrix& adjoint, bool want_inputs) {
    GramAdjoint out = gram_backward(k, x, x, ctx, ctx, adjoint, want_inputs);
    if (want_inputs) {
        out.rows_inputs += out.cols_inputs;
        out.cols_inputs.resize(0, 0);
    }
    add_fields(out.rows_fields, out.cols_fields);
    out.cols_fields.clear();
    return out;
}

GramAdjoint gram_diag_backward(const KernelSpec& k, const Matrix& x, const LatentContext& ctx,
                               const Vector& adjoint, bool want_inputs) {
    if (adjoint.size() != x.rows()) throw DimensionMismatch("gram_diag_backward: adjoint size");
    require_input_width(k, x, "gram_diag_backward");
    const Prepared p = prepare(k, ctx, x.rows());
    OffsetMap offsets;
    Index count = 0;
    build_offsets(k, count, offsets);

    GramAdjoint out;
    out.hyper = Vector::Zero(count);
    out.rows_fields = zero_field_adjoints(k, ctx, x.rows());
    std::vector<FieldAdjoint> other = zero_field_adjoints(k, ctx, x.rows());
    Matrix other_inputs;
    if (want_inputs) {
        out.rows_inputs = Matrix::Zero(x.rows(), x.cols());
        other_inputs = Matrix::Zero(x.rows(), x.cols());
    }
    Sink sink{out.hyper, want_inputs ? &out.rows_inputs : nullptr, want_inputs ? &other_inputs : nullptr,
              out.rows_fields, other};
    for (Index i = 0; i < x.rows(); ++i) {
        if (adjoint[i] == 0.0) continue;
        pair_backward(k, Side{x, i, p}, Side{x, i, p}, adjoint[i], offsets, sink);
    }
    if (want_inputs) out.rows_inputs += other_inputs;
    add_fields(out.rows_fields, other);
    return out;
}

}  // namespace nsgp
