#include <doctest.h>

#include <cmath>
#include <numbers>

#include "nsgp/errors.hpp"
#include "nsgp/latent_fields.hpp"
#include "support.hpp"

using namespace nsgp;
using namespace nsgp::test;

TEST_CASE("softplus helpers") {
    CHECK(softplus(0.0) == doctest::Approx(std::log(2.0)));
    CHECK(softplus(1.0) == doctest::Approx(1.31326).epsilon(1e-5));
    CHECK(softplus(800.0) == doctest::Approx(800.0));
    CHECK(softplus(-800.0) >= 0.0);
    CHECK(sigmoid(0.0) == 0.5);
    for (double y : {1e-6, 0.1, 1.0, 7.5, 300.0}) CHECK(softplus(softplus_inverse(y)) == doctest::Approx(y).epsilon(1e-12));
}

TEST_CASE("Sigma(h) follows the elementwise formula") {
    SmallVector h(2), omega(2);
    h << 0.0, 0.0;
    omega << 1.0, 1.0;
    SmallMatrix s = sigma_from_h(h, omega);
    CHECK(s(0, 1) == doctest::Approx(std::log(2.0)));
    CHECK(s(0, 0) == doctest::Approx(std::log(2.0) + 1.0));
    const Eigen::SelfAdjointEigenSolver<Matrix> es{Matrix(s)};
    CHECK(es.eigenvalues().minCoeff() > 0.0);

    h << 1.0, 0.0;
    omega << 0.1, 0.1;
    s = sigma_from_h(h, omega);
    CHECK(s(0, 0) == doctest::Approx(1.31326 + 0.1).epsilon(1e-5));
    CHECK(s(1, 1) == doctest::Approx(std::log(2.0) + 0.1));
    CHECK(s(0, 1) == doctest::Approx(std::log(2.0)));

    Gen g(31);
    for (int trial = 0; trial < 50; ++trial) {
        const Index d = uniform_int(g, 1, kMaxMgkDims);
        SmallVector hh = SmallVector(normal_vector(g, d, 1.5));
        SmallVector oo = SmallVector(Vector::Constant(d, 0.05));
        const SmallMatrix sig = sigma_from_h(hh, oo);
        CHECK(sig == sig.transpose());
    }
}

TEST_CASE("Sigma(h) factorises without jitter in one and two dimensions") {
    Gen g(36);
    for (int trial = 0; trial < 2000; ++trial) {
        const Index d = uniform_int(g, 1, 2);
        Vector h = normal_vector(g, d);
        h *= uniform(g, 0.0, 10.0) / std::max(h.norm(), 1e-12);
        const SmallVector omega = SmallVector(uniform_matrix(g, d, 1, 0.01, 1.0).col(0));
        const CholeskyFactor f = cholesky_psd(Matrix(sigma_from_h(SmallVector(h), omega)));
        CHECK(f.jitter_used == 0.0);
    }
}

TEST_CASE("Sigma(h) can be indefinite from three dimensions on") {
    // The elementwise softplus of a rank-one matrix loses positive
    // semi-definiteness once D >= 3; a small Omega does not restore it.
    SmallVector h(3), omega(3);
    h << 0.2, 2.0, 1.3;
    omega << 0.01, 0.01, 0.01;
    const Eigen::SelfAdjointEigenSolver<Matrix> es{Matrix(sigma_from_h(h, omega))};
    CHECK(es.eigenvalues().minCoeff() < -0.1);
    FieldContext c;
    c.sigma = {sigma_from_h(h, omega), sigma_from_h(h, omega)};
    const KernelSpec k = KernelSpec::mgk(0, {0, 1, 2});
    CHECK_THROWS_AS(gram(k, Matrix::Zero(2, 3), {c}), NotPositiveDefinite);
}

TEST_CASE("sigma_from_h_backward matches finite differences") {
    Gen g(32);
    for (int trial = 0; trial < 20; ++trial) {
        const Index d = uniform_int(g, 1, 3);
        const SmallVector h = SmallVector(normal_vector(g, d));
        const SmallVector omega = SmallVector(Vector::Constant(d, 0.2));
        const SmallMatrix gmat = SmallMatrix(normal_matrix(g, d, d));
        const SmallVector back = sigma_from_h_backward(h, gmat);
        for (Index k = 0; k < d; ++k) {
            SmallVector hp = h, hm = h;
            hp(k) += 1e-6;
            hm(k) -= 1e-6;
            const double fd = ((gmat.array() * sigma_from_h(hp, omega).array()).sum() -
                               (gmat.array() * sigma_from_h(hm, omega).array()).sum()) /
                              2e-6;
            CHECK(back(k) == doctest::Approx(fd).epsilon(1e-6));
        }
    }
}

TEST_CASE("matnorm_logpdf equals the Kronecker-vec Gaussian density") {
    Matrix one = Matrix::Ones(1, 1);
    CHECK(matnorm_logpdf(Matrix::Zero(1, 1), one, one) == doctest::Approx(-0.5 * std::log(2.0 * std::numbers::pi)));

    Gen g(33);
    for (int trial = 0; trial < 100; ++trial) {
        const Index n = uniform_int(g, 1, 6), d = uniform_int(g, 1, 3);
        const Matrix k = random_spd(g, n, 0.2), psi = random_spd(g, d, 0.2);
        const Matrix h = normal_matrix(g, n, d);
        const double oracle = dense_gaussian_logpdf(vec(h), Vector::Zero(n * d), kron(psi, k));
        CHECK(std::abs(matnorm_logpdf(h, k, psi) - oracle) < 1e-8);
    }
}

TEST_CASE("diagonal column covariance factorises over columns") {
    Gen g(34);
    const Matrix k = random_spd(g, 5, 0.2);
    const Matrix h = normal_matrix(g, 5, 3);
    Vector psi(3);
    psi << 0.5, 1.5, 2.0;
    double total = 0.0;
    for (Index c = 0; c < 3; ++c) total += dense_gaussian_logpdf(h.col(c), Vector::Zero(5), psi(c) * k);
    CHECK(matnorm_logpdf(h, k, psi.asDiagonal().toDenseMatrix()) == doctest::Approx(total).epsilon(1e-12));
}

TEST_CASE("matnorm_logpdf_grad matches finite differences") {
    Gen g(35);
    const Index n = 4, d = 2;
    const Matrix k = random_spd(g, n, 0.3), psi = random_spd(g, d, 0.3);
    const Matrix h = normal_matrix(g, n, d);
    const MatNormGrad mg = matnorm_logpdf_grad(h, cholesky_psd(k), cholesky_psd(psi));
    CHECK(mg.value == doctest::Approx(matnorm_logpdf(h, k, psi)).epsilon(1e-12));
    for (Index i = 0; i < n; ++i)
        for (Index c = 0; c < d; ++c) {
            Matrix hp = h, hm = h;
            hp(i, c) += 1e-6;
            hm(i, c) -= 1e-6;
            CHECK(mg.d_h(i, c) == doctest::Approx((matnorm_logpdf(hp, k, psi) - matnorm_logpdf(hm, k, psi)) / 2e-6)
                                      .epsilon(1e-6));
        }
    // d_k is taken with K symmetric: perturb (i, j) and (j, i) together.
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j <= i; ++j) {
            Matrix kp = k, km = k;
            kp(i, j) += 1e-6;
            km(i, j) -= 1e-6;
            if (i != j) {
                kp(j, i) += 1e-6;
                km(j, i) -= 1e-6;
            }
            const double fd = (matnorm_logpdf(h, kp, psi) - matnorm_logpdf(h, km, psi)) / 2e-6;
            const double analytic = i == j ? mg.d_k(i, i) : mg.d_k(i, j) + mg.d_k(j, i);
            CHECK(analytic == doctest::Approx(fd).epsilon(1e-5));
        }
}

TEST_CASE("extrapolate_h reduced path equals the dense Kronecker path") {
    Gen g(36);
    for (int trial = 0; trial < 100; ++trial) {
        const Index n = uniform_int(g, 1, 6), d = uniform_int(g, 1, 3);
        const MatrixField f = random_matrix_field(g, n, d);
        const Matrix xs = uniform_matrix(g, uniform_int(g, 1, 5), d, -1.0, 4.0);
        CHECK((extrapolate_h(f, xs) - extrapolate_h_kron(f, xs)).cwiseAbs().maxCoeff() < 1e-8);
    }
}

TEST_CASE("extrapolation reproduces anchor values and reverts to the prior mean far away") {
    Gen g(37);
    const MatrixField mf = random_matrix_field(g, 5, 2);
    CHECK((extrapolate_h(mf, mf.anchors) - mf.h).cwiseAbs().maxCoeff() < 1e-4);
    const Matrix one_anchor = mf.anchors.row(2);
    CHECK((extrapolate_h(mf, one_anchor) - mf.h.row(2)).cwiseAbs().maxCoeff() < 1e-4);

    LengthscaleField lf = make_lengthscale_field(uniform_matrix(g, 6, 2, 0.0, 3.0), {0, 1});
    lf.log_values = normal_matrix(g, 6, 2, 0.5);
    CHECK((extrapolate_log_lengthscale(lf, lf.anchors) - lf.log_values).cwiseAbs().maxCoeff() < 1e-4);
    CHECK((extrapolate_lengthscale(lf, lf.anchors) - lf.log_values.array().exp().matrix()).cwiseAbs().maxCoeff() <
          1e-4);
    Matrix far(1, 2);
    far << 1e3, -1e3;
    const Matrix l_far = extrapolate_lengthscale(lf, far);
    for (Index c = 0; c < 2; ++c) CHECK(l_far(0, c) == doctest::Approx(std::exp(lf.prior_mean(c))).epsilon(1e-10));
}

TEST_CASE("lengthscale extrapolation matches an explicit-inverse conditional mean") {
    LengthscaleField f;
    f.anchors.resize(3, 1);
    f.anchors << 0.0, 1.0, 2.0;
    f.log_values.resize(3, 1);
    f.log_values << 0.2, -0.4, 0.9;
    f.prior_mean = Vector::Constant(1, 0.1);
    f.prior_kernel = KernelSpec::se_ard(1.3, {0.8}, {0});
    f.input_dims = {0};
    Matrix xs(1, 1);
    xs << 0.5;
    const Matrix kxx = dense_se_gram(f.anchors, f.anchors, 1.3, {0.8});
    const Matrix ksx = dense_se_gram(xs, f.anchors, 1.3, {0.8});
    const double expected = 0.1 + (ksx * kxx.inverse() * (f.log_values.col(0).array() - 0.1).matrix())(0);
    CHECK(extrapolate_log_lengthscale(f, xs)(0, 0) == doctest::Approx(expected).epsilon(1e-8));
}

TEST_CASE("prior_root squares to the prior covariance") {
    Gen g(38);
    LengthscaleField lf = make_lengthscale_field(uniform_matrix(g, 5, 2, 0.0, 3.0), {0, 1});
    const Matrix r = prior_root(lf);
    REQUIRE(r.rows() == 10);
    const Matrix k = gram(lf.prior_kernel, lf.anchors).values;
    const Matrix cov = r * r.transpose();
    for (Index c = 0; c < 2; ++c) CHECK((cov.block(c * 5, c * 5, 5, 5) - k).cwiseAbs().maxCoeff() < 1e-5);
    CHECK(cov.block(0, 5, 5, 5).isZero());

    const MatrixField mf = random_matrix_field(g, 4, 2);
    const Matrix rm = prior_root(mf);
    REQUIRE(rm.rows() == 4 * 2 + 2);
    const Matrix expected = kron(mf.col_cov, gram(mf.row_kernel, mf.anchors).values);
    CHECK(((rm * rm.transpose()).topLeftCorner(8, 8) - expected).cwiseAbs().maxCoeff() < 1e-5);
    CHECK(rm.bottomRightCorner(2, 2) == Matrix::Identity(2, 2));
}

TEST_CASE("lengthscale prior density is a sum of per-dimension Gaussians") {
    Gen g(39);
    LengthscaleField lf = make_lengthscale_field(uniform_matrix(g, 5, 2, 0.0, 3.0), {0, 1});
    lf.log_values = normal_matrix(g, 5, 2, 0.5);
    const Matrix k = gram(lf.prior_kernel, lf.anchors).values + kGramJitter * Matrix::Identity(5, 5);
    double expected = 0.0;
    for (Index c = 0; c < 2; ++c)
        expected += dense_gaussian_logpdf(lf.log_values.col(c), Vector::Constant(5, lf.prior_mean(c)), k);
    CHECK(lengthscale_prior_logpdf(lf) == doctest::Approx(expected).epsilon(1e-6));

    // Moving away from the mean lowers the density.
    LengthscaleField further = lf;
    further.log_values = (lf.log_values.rowwise() - lf.prior_mean.transpose()) * 2.0;
    further.log_values.rowwise() += lf.prior_mean.transpose();
    CHECK(lengthscale_prior_logpdf(further) < lengthscale_prior_logpdf(lf));
}

TEST_CASE("conditional H sampling: deterministic, exact at anchors, unbiased elsewhere") {
    Gen g(40);
    const MatrixField f = random_matrix_field(g, 5, 2);
    const Matrix xs = uniform_matrix(g, 3, 2, 0.0, 3.0);
    const auto a = sample_conditional_h(f, xs, 4, 99);
    const auto b = sample_conditional_h(f, xs, 4, 99);
    for (std::size_t j = 0; j < a.size(); ++j) CHECK(a[j] == b[j]);

    const auto at = sample_conditional_h(f, f.anchors, 3, 5);
    for (const Matrix& s : at) CHECK((s - f.h).cwiseAbs().maxCoeff() < 1e-3);

    const int count = 10000;
    const auto draws = sample_conditional_h(f, xs, count, 7);
    Matrix mean = Matrix::Zero(3, 2);
    for (const Matrix& s : draws) mean += s;
    mean /= count;
    const ConditionalH c = conditional_h(f, xs);
    CHECK((c.mean - extrapolate_h(f, xs)).cwiseAbs().maxCoeff() < 1e-10);
    for (Index i = 0; i < 3; ++i)
        for (Index d = 0; d < 2; ++d) {
            const double sd = std::sqrt(std::max(c.row_cov(i, i) * f.col_cov(d, d), 1e-16) / count);
            CHECK(std::abs(mean(i, d) - c.mean(i, d)) <= 3.0 * sd + 1e-9);
        }
}

TEST_CASE("prior function draws: moments, reproducibility and empty output") {
    const KernelSpec se = KernelSpec::se_ard(2.0, {1.0}, {0});
    Matrix grid(3, 1);
    grid << 0.0, 5.0, 10.0;
    const PriorDraws d = sample_prior_functions(se, grid, 1000, 3);
    REQUIRE(d.f.rows() == 3);
    REQUIRE(d.f.cols() == 1000);
    for (Index i = 0; i < 3; ++i) {
        const double var = d.f.row(i).squaredNorm() / 1000.0;
        CHECK(std::abs(var - 2.0) < 0.2);
    }
    CHECK(sample_prior_functions(se, grid, 5, 11).f == sample_prior_functions(se, grid, 5, 11).f);
    CHECK(sample_prior_functions(se, grid, 0, 11).f.cols() == 0);

    Matrix g1(40, 1);
    for (Index i = 0; i < 40; ++i) g1(i) = 0.25 * i;
    const PriorDraws fg = sample_prior_functions(KernelSpec::fgk(0, {0}), g1, 2, 4);
    REQUIRE(fg.field_values.size() == 2);
    CHECK((fg.field_values[0].array() > 0.0).all());
    const PriorDraws mg = sample_prior_functions(KernelSpec::mgk(0, {0}), g1, 2, 4);
    CHECK((mg.field_values[1].array() > 0.0).all());
}

TEST_CASE("unique_rows keeps first-seen order and maps every row") {
    Matrix x(5, 2);
    x << 1, 2, 3, 4, 1, 2, 5, 6, 3, 4;
    const UniqueRows u = unique_rows(x);
    REQUIRE(u.rows.rows() == 3);
    CHECK(u.rows.row(0) == x.row(0));
    CHECK(u.rows.row(2) == x.row(3));
    CHECK(u.index == std::vector<Index>{0, 1, 0, 2, 1});
}

TEST_CASE("field priors follow the anchor geometry") {
    Matrix a(3, 1);
    a << 0.0, 1.0, 3.0;
    CHECK(default_log_lengthscale_mean(a) == doctest::Approx(std::log(2.0)));
    const LengthscaleField f = make_lengthscale_field(a, {0});
    CHECK(f.log_values.rows() == 3);
    CHECK((f.log_values.array() == f.prior_mean(0)).all());
}
