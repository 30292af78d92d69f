#include <doctest.h>

#include <cmath>
#include <numbers>

#include "nsgp/errors.hpp"
#include "nsgp/gp_exact.hpp"
#include "support.hpp"

using namespace nsgp;
using namespace nsgp::test;

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

/// Data term by a dense LDLT of K + s2 I, with K assembled at the anchor context.
double dense_data_term(const GpModel& m) {
    const Matrix k = gram(m.kernel, m.train_inputs, context_for(m, m.train_inputs)).values;
    const Index n = k.rows();
    return dense_gaussian_logpdf(m.train_targets, Vector::Zero(n), k + m.noise_variance * Matrix::Identity(n, n));
}

/// Field prior by dense Kronecker-vec densities.
double dense_field_prior(const GpModel& m) {
    double total = 0.0;
    for (const auto& f : m.fields) {
        if (const auto* l = std::get_if<LengthscaleField>(&f)) {
            const Matrix k = gram(l->prior_kernel, l->anchors).values;
            for (Index d = 0; d < l->log_values.cols(); ++d)
                total += dense_gaussian_logpdf(l->log_values.col(d), Vector::Constant(k.rows(), l->prior_mean(d)), k);
        } else {
            const auto& mf = std::get<MatrixField>(f);
            const Matrix k = gram(mf.row_kernel, mf.anchors).values;
            total += dense_gaussian_logpdf(vec(mf.h), Vector::Zero(mf.h.size()), kron(mf.col_cov, k));
        }
    }
    return total;
}

GradCheckReport check_model(const GpModel& m, bool include_prior, double rel_tol = 1e-3) {
    return grad_check([&](const Vector& t, Vector* g) {
        const GpModel u = unpack_params(m, t);
        return map_objective_grad(u, g, include_prior);
    }, pack_params(m), 1e-5, rel_tol, param_names(m));
}

}  // namespace

TEST_CASE("LML of a single point matches the scalar Gaussian density") {
    GpModel m;
    m.kernel = KernelSpec::se_ard(1.0, {1.0}, {0});
    m.train_inputs = Matrix::Zero(1, 1);
    m.train_targets = Vector::Zero(1);
    m.noise_variance = 1e-12;
    CHECK(log_marginal_likelihood(m) == doctest::Approx(-0.5 * kLog2Pi).epsilon(1e-9));
    m.noise_variance = 1.0;
    m.train_targets(0) = 2.0;
    CHECK(log_marginal_likelihood(m) == doctest::Approx(-2.26551).epsilon(1e-5));
}

TEST_CASE("LML equals the dense explicit-inverse formula") {
    Gen g(51);
    for (int trial = 0; trial < 20; ++trial) {
        const GpModel m = random_se_model(g, 5, uniform_int(g, 1, 3));
        const auto& se = std::get<SeArd>(m.kernel.node());
        const Matrix c = dense_se_gram(m.train_inputs, m.train_inputs, se.variance, se.lengthscales) +
                         m.noise_variance * Matrix::Identity(5, 5);
        const Vector& y = m.train_targets;
        const double expected =
            -0.5 * y.dot(c.inverse() * y) - 0.5 * std::log(c.determinant()) - 2.5 * kLog2Pi;
        CHECK(log_marginal_likelihood(m) == doctest::Approx(expected).epsilon(1e-10));
    }
}

TEST_CASE("MAP objectives decompose into data term plus field prior") {
    Gen g(52);
    for (int trial = 0; trial < 10; ++trial) {
        const GpModel fgk = random_fgk_model(g, 6, 2);
        CHECK(map_objective_fgk(fgk) == doctest::Approx(dense_data_term(fgk) + dense_field_prior(fgk)).epsilon(1e-8));
        CHECK(map_objective(fgk) == doctest::Approx(log_marginal_likelihood(fgk) + field_log_prior(fgk)).epsilon(1e-14));
        const GpModel mgk = random_mgk_model(g, 5, 2);
        CHECK(map_objective_mgk(mgk) == doctest::Approx(dense_data_term(mgk) + dense_field_prior(mgk)).epsilon(1e-8));
        CHECK_THROWS_AS(map_objective_mgk(fgk), InvalidArgument);
    }
}

TEST_CASE("field prior terms behave as Gaussian priors") {
    Gen g(53);
    GpModel m = random_fgk_model(g, 6, 1);
    auto& f = std::get<LengthscaleField>(m.fields[0]);
    f.log_values.setConstant(f.prior_mean(0));
    m.train_targets.setZero();
    CHECK(map_objective(m) == doctest::Approx(log_marginal_likelihood(m) + lengthscale_prior_logpdf(f)));

    GpModel far = m;
    auto& ff = std::get<LengthscaleField>(far.fields[0]);
    ff.log_values.array() += 0.5;
    GpModel farther = far;
    std::get<LengthscaleField>(farther.fields[0]).log_values.array() += 0.5;
    CHECK(field_log_prior(farther) < field_log_prior(far));
    CHECK(field_log_prior(far) < field_log_prior(m));

    GpModel mg = random_mgk_model(g, 5, 2);
    const double prior = field_log_prior(mg);
    mg.train_targets *= 10.0;
    CHECK(field_log_prior(mg) == prior);
}

TEST_CASE("packing round-trips and names every parameter") {
    Gen g(54);
    for (const GpModel& m : {random_se_model(g, 5, 2), random_fgk_model(g, 5, 2), random_mgk_model(g, 4, 2)}) {
        const Vector theta = pack_params(m);
        CHECK(param_names(m).size() == static_cast<std::size_t>(theta.size()));
        CHECK((pack_params(unpack_params(m, theta)) - theta).cwiseAbs().maxCoeff() < 1e-12);
        CHECK(map_objective(unpack_params(m, theta)) == doctest::Approx(map_objective(m)).epsilon(1e-12));
    }
}

TEST_CASE("gradients pass finite-difference checks") {
    Gen g(55);
    SUBCASE("LML over SE-ARD hyperparameters, rel_tol 1e-4") {
        for (int trial = 0; trial < 10; ++trial) {
            const GradCheckReport r = check_model(random_se_model(g, 5, 2), false, 1e-4);
            CHECK_MESSAGE(r.passed, r.summary());
        }
    }
    SUBCASE("MAP-FGK including log-lengthscale entries") {
        for (int trial = 0; trial < 10; ++trial) {
            const GradCheckReport r = check_model(random_fgk_model(g, uniform_int(g, 2, 8), uniform_int(g, 1, 2)), true);
            CHECK_MESSAGE(r.passed, r.summary());
        }
    }
    SUBCASE("MAP-MGK including H entries") {
        for (int trial = 0; trial < 10; ++trial) {
            const GradCheckReport r = check_model(random_mgk_model(g, uniform_int(g, 2, 8), uniform_int(g, 1, 2)), true);
            CHECK_MESSAGE(r.passed, r.summary());
        }
    }
    SUBCASE("composite kernel with a periodic factor and FGK summand") {
        GpModel m;
        m.kernel = KernelSpec::se_ard(1.2, {1.0, 0.8}, {0, 1}) * KernelSpec::periodic(0.9, 1.1, 3.0, 1) +
                   KernelSpec::constant(0.7) * KernelSpec::fgk(0, {0});
        m.train_inputs = uniform_matrix(g, 7, 2, 0.0, 3.0);
        m.train_targets = normal_vector(g, 7);
        m.noise_variance = 0.2;
        m.fields = make_fields(m.kernel, m.train_inputs, 3);
        const GradCheckReport r = check_model(m, true);
        CHECK_MESSAGE(r.passed, r.summary());
    }
}

TEST_CASE("posterior predictive equals the dense explicit-inverse formulas") {
    Gen g(56);
    GpModel m;
    m.kernel = KernelSpec::se_ard(1.5, {0.9}, {0});
    m.train_inputs.resize(3, 1);
    m.train_inputs << 0.0, 1.0, 2.0;
    m.train_targets = normal_vector(g, 3);
    m.noise_variance = 0.1;
    Matrix xs(2, 1);
    xs << 0.5, 2.7;
    const Matrix c = dense_se_gram(m.train_inputs, m.train_inputs, 1.5, {0.9}) + 0.1 * Matrix::Identity(3, 3);
    const Matrix ks = dense_se_gram(xs, m.train_inputs, 1.5, {0.9});
    const Vector mean = ks * c.inverse() * m.train_targets;
    const Matrix cov = dense_se_gram(xs, xs, 1.5, {0.9}) - ks * c.inverse() * ks.transpose();
    PredictOptions o;
    o.full_covariance = true;
    const PredictiveDistribution p = posterior_predictive(m, xs, o);
    CHECK((p.mean - mean).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((p.variance - cov.diagonal()).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((p.covariance - cov).cwiseAbs().maxCoeff() < 1e-8);
    o.include_noise = true;
    const Vector noisy = posterior_predictive(m, xs, o).variance;
    CHECK((noisy.array() - cov.diagonal().array() - 0.1).abs().maxCoeff() < 1e-8);
}

TEST_CASE("interpolation limit and prior reversion") {
    Gen g(57);
    for (int trial = 0; trial < 10; ++trial) {
        GpModel m = random_se_model(g, 8, 2);
        m.noise_variance = 1e-10;
        const PredictiveDistribution p = posterior_predictive(m, m.train_inputs);
        CHECK((p.mean - m.train_targets).cwiseAbs().maxCoeff() < 1e-4);
        CHECK(p.variance.maxCoeff() < 1e-4);
        const Matrix remote = Matrix::Constant(2, 2, 1e3);
        const PredictiveDistribution r = posterior_predictive(m, remote);
        const double prior = std::get<SeArd>(m.kernel.node()).variance;
        CHECK(r.mean.cwiseAbs().maxCoeff() < 1e-3);
        CHECK((r.variance.array() - prior).abs().maxCoeff() < 1e-3);
    }
}

TEST_CASE("log-normal quantiles map Gaussian quantiles through exp") {
    const Vector mu = Vector::Zero(1), var = Vector::Ones(1);
    const LognormalPrediction q = lognormal_quantiles(mu, var, {0.5, 0.841344746068543});
    CHECK(q.median(0) == doctest::Approx(1.0));
    CHECK(q.quantiles(0, 0) == doctest::Approx(1.0));
    CHECK(q.quantiles(0, 1) == doctest::Approx(std::exp(1.0)).epsilon(1e-9));

    Gen g(58);
    const Vector m2 = normal_vector(g, 50, 3.0);
    const Vector v2 = normal_vector(g, 50).array().square() + 0.01;
    const LognormalPrediction q2 = lognormal_quantiles(m2, v2, {0.001, 0.025, 0.5, 0.975, 0.999});
    CHECK((q2.quantiles.array() > 0.0).all());
    for (Index i = 0; i < 50; ++i)
        for (Index j = 1; j < 5; ++j) CHECK(q2.quantiles(i, j) >= q2.quantiles(i, j - 1));
    CHECK_THROWS(lognormal_quantiles(mu, var, {1.0}));
}

TEST_CASE("log-normal prediction of constant targets recovers the constant") {
    GpModel m;
    m.kernel = KernelSpec::se_ard(1.0, {1.0}, {0});
    m.train_inputs.resize(5, 1);
    m.train_inputs << 0, 1, 2, 3, 4;
    const double c = 3.7;
    // Normalised log targets are zero; the shift carries log c.
    m.train_targets = Vector::Zero(5);
    m.noise_variance = 1e-4;
    m.target_transform = TargetTransform::log;
    Matrix xs(2, 1);
    xs << 1.5, 2.5;
    const LognormalPrediction p = lognormal_predict(m, xs, {0.5}, std::log(c), 1.0);
    CHECK((p.median.array() - c).abs().maxCoeff() < 1e-6);
}

TEST_CASE("Monte-Carlo predictive: single draw, zero conditional covariance, determinism") {
    Gen g(59);
    const GpModel m = random_mgk_model(g, 6, 1);
    const Matrix xs = uniform_matrix(g, 3, 1, 0.0, 3.0);

    // At the anchors the conditional covariance vanishes: every draw is the mean.
    const PredictiveDistribution at = predictive_mc(m, m.train_inputs, 7, 1);
    const PredictiveDistribution plain = posterior_predictive(m, m.train_inputs);
    CHECK((at.mean - plain.mean).cwiseAbs().maxCoeff() < 1e-5);
    CHECK((at.variance - plain.variance).cwiseAbs().maxCoeff() < 1e-5);
    REQUIRE(at.component_means.cols() == 7);

    // One draw: the predictive at that sampled H*.
    const PredictiveDistribution one = predictive_mc(m, xs, 1, 21);
    const Matrix h_star = sample_conditional_h(std::get<MatrixField>(m.fields[0]), xs, 1, 21)[0];
    FieldContext ctx;
    const auto& mf = std::get<MatrixField>(m.fields[0]);
    for (Index i = 0; i < xs.rows(); ++i) ctx.sigma.push_back(sigma_from_h(SmallVector(h_star.row(i).transpose()), SmallVector(mf.omega)));
    const PredictiveDistribution direct = posterior_predictive(m, xs, {ctx});
    CHECK((one.mean - direct.mean).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((one.variance - direct.variance).cwiseAbs().maxCoeff() < 1e-10);

    const PredictiveDistribution a = predictive_mc(m, xs, 20, 5), b = predictive_mc(m, xs, 20, 5);
    CHECK(a.mean == b.mean);

    const PredictiveDistribution small = predictive_mc(m, xs, 500, 8), large = predictive_mc(m, xs, 5000, 9);
    for (Index i = 0; i < xs.rows(); ++i) {
        const Vector cm = large.component_means.row(i).transpose();
        const double sd = std::sqrt((cm.array() - cm.mean()).square().sum() / (cm.size() - 1));
        const double se = sd * std::sqrt(1.0 / 500 + 1.0 / 5000);
        CHECK(std::abs(small.mean(i) - large.mean(i)) <= 3.0 * se + 1e-9);
    }
}

TEST_CASE("fit_exact improves the objective with a best-so-far trace") {
    Gen g(60);
    GpModel m = random_fgk_model(g, 12, 1);
    m.train_targets = m.train_inputs.col(0).array().sin().matrix() + 0.05 * normal_vector(g, 12);
    OptimConfig c;
    c.algorithm = Algorithm::adam;
    c.max_iters = 150;
    c.step_size = 0.05;
    const double before = map_objective(m);
    const ExactFit f = fit_exact(m, c);
    CHECK(f.objective > before);
    CHECK(f.objective == doctest::Approx(map_objective(f.model)).epsilon(1e-10));
    REQUIRE_FALSE(f.trace.objective_per_iter.empty());
    double best = -1e300;
    for (double v : f.trace.objective_per_iter) {
        CHECK(std::isfinite(v));
        best = std::max(best, v);
    }
    CHECK(f.objective >= best - 1e-9);

    c.algorithm = Algorithm::lbfgs;
    const ExactFit l = fit_exact(m, c);
    CHECK(l.objective > before);
    const ExactFit l2 = fit_exact(m, c);
    CHECK(l.trace.objective_per_iter == l2.trace.objective_per_iter);
}

TEST_CASE("whitened field coordinates carry the same gradient") {
    Gen g(61);
    for (const GpModel& m : {random_fgk_model(g, 6, 2), random_mgk_model(g, 5, 2)}) {
        const Vector theta0 = pack_params(m);
        const Preconditioner p = field_preconditioner(m, hyperparameter_count(m.kernel) + 1);
        const Objective f = negative_map_objective(m);
        const Objective fu = [&](const Vector& u, Vector* grad) {
            Vector gt;
            const double v = f(theta0 + p.apply(u), grad ? &gt : nullptr);
            if (grad) *grad = p.apply_transpose(gt);
            return v;
        };
        const Vector u = 0.1 * normal_vector(g, theta0.size());
        const GradCheckReport r = grad_check(fu, u, 1e-5, 1e-3);
        CHECK_MESSAGE(r.passed, r.summary());
    }
}

TEST_CASE("model validation rejects inconsistent shapes") {
    Gen g(62);
    GpModel m = random_se_model(g, 4, 2);
    m.train_targets = Vector::Zero(3);
    CHECK_THROWS(log_marginal_likelihood(m));
    GpModel f = random_fgk_model(g, 4, 1);
    f.fields.clear();
    CHECK_THROWS(log_marginal_likelihood(f));
    GpModel n = random_se_model(g, 4, 2);
    n.noise_variance = -1.0;
    CHECK_THROWS(log_marginal_likelihood(n));
}
