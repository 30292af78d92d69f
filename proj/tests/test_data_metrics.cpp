#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <numeric>

#include "nsgp/data.hpp"
#include "nsgp/errors.hpp"
#include "nsgp/fit_io.hpp"
#include "nsgp/metrics.hpp"
#include "nsgp/synth.hpp"
#include "support.hpp"

using namespace nsgp;
using namespace nsgp::test;

namespace {

Dataset random_dataset(Gen& g, Index n) {
    Dataset d;
    d.time = uniform_matrix(g, n, 1, 0.0, 24.0).col(0);
    d.lat = uniform_matrix(g, n, 1, -10.0, 10.0).col(0);
    d.lon = uniform_matrix(g, n, 1, 0.0, 20.0).col(0);
    d.value = uniform_matrix(g, n, 1, 0.0, 5.0).col(0);
    return d;
}

std::vector<Index> permutation(Gen& g, Index n) {
    std::vector<Index> p(static_cast<std::size_t>(n));
    std::iota(p.begin(), p.end(), Index{0});
    std::shuffle(p.begin(), p.end(), g);
    return p;
}

Vector permute(const Vector& v, const std::vector<Index>& p) {
    Vector out(v.size());
    for (Index i = 0; i < v.size(); ++i) out(i) = v(p[static_cast<std::size_t>(i)]);
    return out;
}

double gaussian_nlpd(double y, double mu, double var) {
    return 0.5 * std::log(2.0 * std::numbers::pi * var) + 0.5 * (y - mu) * (y - mu) / var;
}

}  // namespace

TEST_CASE("parse_csv reads a well-formed file exactly") {
    const Dataset d = parse_csv("time,lat,lon,value\n0,1.5,2.5,3.25\n1,-1,0,0\n2,10,20,7.5\n");
    REQUIRE(d.size() == 3);
    CHECK(d.rejected == 0);
    CHECK(d.time(2) == 2.0);
    CHECK(d.lat(0) == 1.5);
    CHECK(d.lon(2) == 20.0);
    CHECK(d.value(0) == 3.25);
    CHECK(d.value(1) == 0.0);
}

TEST_CASE("parse_csv honours the column map and ignores extra columns") {
    ColumnMap c;
    c.time = "month";
    c.value = "precip";
    const Dataset d = parse_csv("precip,extra,lon,month,lat\n4,x,1,2,3\n", c);
    REQUIRE(d.size() == 1);
    CHECK(d.time(0) == 2.0);
    CHECK(d.lat(0) == 3.0);
    CHECK(d.lon(0) == 1.0);
    CHECK(d.value(0) == 4.0);
}

TEST_CASE("non-finite rows are dropped and counted") {
    const Dataset d = parse_csv("time,lat,lon,value\n0,0,0,1\n1,0,0,nan\n2,0,0,3\n");
    CHECK(d.size() == 2);
    CHECK(d.rejected == 1);
    CHECK(d.value(1) == 3.0);
    CHECK_THROWS_AS(parse_csv("time,lat,lon,value\n0,0,0,nan\n"), EmptyDataset);
}

TEST_CASE("parse errors name the column or line") {
    try {
        parse_csv("time,lat,value\n0,0,1\n");
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find("lon") != std::string::npos);
    }
    try {
        parse_csv("time,lat,lon,value\n0,0,0,1\n0,abc,0,1\n");
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find("line 3") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_csv(""), EmptyDataset);
    CHECK_THROWS_AS(parse_csv("time,lat,lon,value\n"), EmptyDataset);
    CHECK_THROWS_AS(load_csv("/nonexistent/file.csv"), ParseError);
}

TEST_CASE("csv options allow empty input and optional columns") {
    CsvOptions o;
    o.allow_empty = true;
    CHECK(parse_csv("time,lat,lon,value\n", {}, o).size() == 0);
    o.required = {InputRole::time};
    const Dataset d = parse_csv("time\n1\n2\n", {}, o);
    REQUIRE(d.size() == 2);
    CHECK(d.time(1) == 2.0);
    CHECK(d.lat(1) == 0.0);
    CHECK_THROWS_AS(parse_csv("lat\n1\n", {}, o), ParseError);
}

TEST_CASE("write_csv and load_csv round-trip") {
    Gen g(100);
    const Dataset d = random_dataset(g, 25);
    const auto path = std::filesystem::temp_directory_path() / "nsgp_roundtrip.csv";
    write_csv(path.string(), d);
    const Dataset r = load_csv(path.string());
    std::filesystem::remove(path);
    REQUIRE(r.size() == 25);
    CHECK(r.time == d.time);
    CHECK(r.lat == d.lat);
    CHECK(r.lon == d.lon);
    CHECK(r.value == d.value);
}

TEST_CASE("input_matrix orders columns by role") {
    Gen g(101);
    const Dataset d = random_dataset(g, 5);
    const Matrix x = input_matrix(d, {InputRole::lon, InputRole::time});
    CHECK(x.col(0) == d.lon);
    CHECK(x.col(1) == d.time);
    CHECK(input_role_from_string(to_string(InputRole::lat)) == InputRole::lat);
    CHECK_THROWS(input_role_from_string("depth"));
}

TEST_CASE("temporal split matches a manual filter and rejects degenerate cutoffs") {
    Gen g(102);
    for (int trial = 0; trial < 20; ++trial) {
        const Dataset d = random_dataset(g, uniform_int(g, 20, 60));
        const double cutoff = uniform(g, 6.0, 18.0);
        const Dataset s = split(d, TemporalSplit{cutoff});
        REQUIRE(s.split.size() == static_cast<std::size_t>(d.size()));
        for (Index i = 0; i < d.size(); ++i) CHECK(s.split[static_cast<std::size_t>(i)] == (d.time(i) < cutoff ? 0 : 1));
        const Dataset train = split_part(s, 0), test = split_part(s, 1);
        CHECK(train.size() + test.size() == d.size());
        CHECK(train.time.maxCoeff() < cutoff);
        CHECK(test.time.minCoeff() >= cutoff);
    }
    Gen h(103);
    const Dataset d = random_dataset(h, 10);
    CHECK_THROWS_AS(split(d, TemporalSplit{100.0}), DegenerateSplit);
    CHECK_THROWS_AS(split(d, TemporalSplit{-1.0}), DegenerateSplit);
}

TEST_CASE("random split is seeded and roughly honours the fraction") {
    Gen g(104);
    const Dataset d = random_dataset(g, 2000);
    const Dataset a = split(d, RandomSplit{0.9, 11});
    const Dataset b = split(d, RandomSplit{0.9, 11});
    const Dataset c = split(d, RandomSplit{0.9, 12});
    CHECK(a.split == b.split);
    CHECK(a.split != c.split);
    const double train = static_cast<double>(std::count(a.split.begin(), a.split.end(), 0)) / 2000.0;
    CHECK(std::abs(train - 0.9) < 0.03);
    CHECK(describe(SplitSpec{TemporalSplit{4.0}}).find("temporal") != std::string::npos);
}

TEST_CASE("normalisation round-trips and handles constant columns") {
    Gen g(105);
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix x = uniform_matrix(g, uniform_int(g, 2, 30), uniform_int(g, 1, 4), -50.0, 300.0);
        const Normalization n = fit_normalization(x);
        const Matrix z = n.forward(x);
        CHECK((n.inverse(z) - x).cwiseAbs().maxCoeff() < 1e-12 * std::max(1.0, x.cwiseAbs().maxCoeff()));
        for (Index j = 0; j < x.cols(); ++j) {
            CHECK(std::abs(z.col(j).mean()) < 1e-10);
            const double var = (z.col(j).array() - z.col(j).mean()).square().mean();
            CHECK(var == doctest::Approx(1.0).epsilon(1e-9));
        }
    }
    Matrix c(4, 2);
    c << 1, 7, 2, 7, 3, 7, 4, 7;
    const Normalization n = fit_normalization(c);
    CHECK(n.scale(1) == 1.0);
    CHECK(n.forward(c).col(1).isZero());
    const Normalization id = identity_normalization(2);
    CHECK(id.forward(c) == c);
}

TEST_CASE("kmeans: single cluster, separated clusters, monotone objective") {
    Gen g(106);
    const Matrix pts = normal_matrix(g, 30, 3);
    const KMeansResult one = kmeans(pts, 1, 5);
    CHECK(std::all_of(one.labels.begin(), one.labels.end(), [](int l) { return l == 0; }));
    CHECK((one.centroids.row(0).transpose() - pts.colwise().mean().transpose()).cwiseAbs().maxCoeff() < 1e-12);

    for (int trial = 0; trial < 20; ++trial) {
        const int k = uniform_int(g, 2, 5);
        const Index per = uniform_int(g, 3, 10);
        Matrix x(k * per, 2);
        for (int c = 0; c < k; ++c)
            x.block(c * per, 0, per, 2) = normal_matrix(g, per, 2, 0.1).rowwise() + Eigen::RowVector2d(20.0 * c, 0.0);
        const KMeansResult r = kmeans(x, k, static_cast<std::uint64_t>(trial));
        for (int c = 0; c < k; ++c)
            for (Index i = 1; i < per; ++i)
                CHECK(r.labels[static_cast<std::size_t>(c * per + i)] == r.labels[static_cast<std::size_t>(c * per)]);
        for (std::size_t i = 1; i < r.objective_trace.size(); ++i)
            CHECK(r.objective_trace[i] <= r.objective_trace[i - 1] + 1e-9);
        const KMeansResult again = kmeans(x, k, static_cast<std::uint64_t>(trial));
        CHECK(again.labels == r.labels);
    }
    for (int trial = 0; trial < 20; ++trial) {
        const KMeansResult r = kmeans(normal_matrix(g, 40, 2), uniform_int(g, 2, 8), static_cast<std::uint64_t>(trial));
        for (std::size_t i = 1; i < r.objective_trace.size(); ++i)
            CHECK(r.objective_trace[i] <= r.objective_trace[i - 1] + 1e-9);
    }
    Matrix dup = Matrix::Ones(5, 2);
    dup.row(4) << 2.0, 2.0;
    CHECK_THROWS_AS(kmeans(dup, 3, 1), KTooLarge);
    CHECK_NOTHROW(kmeans(dup, 2, 1));
}

TEST_CASE("kmeans_regimes separates two distinct climatologies") {
    Gen g(107);
    Dataset d;
    const int cells = 8, months = 36;
    d.time.resize(cells * months);
    d.lat.resize(cells * months);
    d.lon.resize(cells * months);
    d.value.resize(cells * months);
    Index row = 0;
    for (int c = 0; c < cells; ++c)
        for (int t = 0; t < months; ++t, ++row) {
            d.time(row) = t;
            d.lat(row) = c;
            d.lon(row) = 2.0 * c;
            const double season = std::sin(2.0 * std::numbers::pi * (t % 12) / 12.0);
            // Two regimes 10 sd apart on their seasonal cycle.
            d.value(row) = (c < 4 ? 2.0 + season : 12.0 - season) + 0.1 * normal_vector(g, 1)(0);
        }
    const RegimeLabels r = kmeans_regimes(d, 2, 3);
    REQUIRE(r.labels.size() == 8);
    CHECK(r.climatology.cols() == 12);
    for (int c = 1; c < 4; ++c) CHECK(r.labels[c] == r.labels[0]);
    for (int c = 5; c < 8; ++c) CHECK(r.labels[c] == r.labels[4]);
    CHECK(r.labels[0] != r.labels[4]);
    const std::vector<int> per_row = regime_per_row(d, r);
    for (Index i = 0; i < d.size(); ++i)
        CHECK(per_row[static_cast<std::size_t>(i)] == r.labels[static_cast<std::size_t>(d.lat(i))]);
    const RegimeLabels single = kmeans_regimes(d, 1, 3);
    CHECK(std::all_of(single.labels.begin(), single.labels.end(), [](int l) { return l == 0; }));
    CHECK_THROWS_AS(kmeans_regimes(d, 9, 3), KTooLarge);
}

TEST_CASE("rmse hand values and identities") {
    Vector p(2), t(2);
    p << 1, 2;
    t << 1, 4;
    CHECK(rmse(p, t) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));
    CHECK(rmse(t, t) == 0.0);
    CHECK_THROWS_AS(rmse(p, Vector::Zero(3)), DimensionMismatch);

    Gen g(108);
    for (int trial = 0; trial < 20; ++trial) {
        const Index n = uniform_int(g, 2, 50);
        const Vector y = normal_vector(g, n, 3.0);
        const double mean = y.mean();
        const double pop_sd = std::sqrt((y.array() - mean).square().mean());
        CHECK(rmse(Vector::Constant(n, mean), y) == doctest::Approx(pop_sd).epsilon(1e-12));
        const Vector mu = normal_vector(g, n);
        const auto perm = permutation(g, n);
        CHECK(rmse(permute(mu, perm), permute(y, perm)) == doctest::Approx(rmse(mu, y)).epsilon(1e-12));
    }
}

TEST_CASE("nlpd hand values and identities") {
    CHECK(nlpd(Vector::Zero(1), Vector::Ones(1), Vector::Zero(1)) == doctest::Approx(0.918938533204673).epsilon(1e-12));
    CHECK(std::abs(nlpd(Vector::Constant(1, 2.0), Vector::Constant(1, 1.0 / (2.0 * std::numbers::pi)),
                        Vector::Constant(1, 2.0))) < 1e-14);
    double previous = -1e300;
    for (double var = 1.0; var > 1e-6; var /= 4.0) {
        const double v = nlpd(Vector::Zero(1), Vector::Constant(1, var), Vector::Ones(1));
        CHECK(v > previous);
        previous = v;
    }
    CHECK(previous > 1e4);
    CHECK_THROWS_AS(nlpd(Vector::Zero(2), Vector::Ones(1), Vector::Zero(2)), DimensionMismatch);

    Gen g(109);
    for (int trial = 0; trial < 20; ++trial) {
        const Index n = uniform_int(g, 1, 30);
        const Vector mu = normal_vector(g, n), var = uniform_matrix(g, n, 1, 0.05, 3.0).col(0), y = normal_vector(g, n);
        const Vector pw = pointwise_nlpd(mu, var, y);
        for (Index i = 0; i < n; ++i) CHECK(pw(i) == doctest::Approx(gaussian_nlpd(y(i), mu(i), var(i))).epsilon(1e-12));
        CHECK(nlpd(mu, var, y) == doctest::Approx(pw.mean()).epsilon(1e-12));
        const auto perm = permutation(g, n);
        CHECK(nlpd(permute(mu, perm), permute(var, perm), permute(y, perm)) ==
              doctest::Approx(nlpd(mu, var, y)).epsilon(1e-12));
    }
}

TEST_CASE("mixture nlpd matches a direct log-sum-exp oracle") {
    Gen g(110);
    for (int trial = 0; trial < 20; ++trial) {
        const Index n = uniform_int(g, 1, 10), s = uniform_int(g, 1, 6);
        const Matrix mu = normal_matrix(g, n, s), var = uniform_matrix(g, n, s, 0.01, 2.0);
        const Vector y = normal_vector(g, n, 2.0);
        const Vector pw = pointwise_nlpd_mixture(mu, var, y);
        for (Index i = 0; i < n; ++i) {
            double acc = 0.0;
            for (Index j = 0; j < s; ++j) acc += std::exp(-gaussian_nlpd(y(i), mu(i, j), var(i, j)));
            CHECK(pw(i) == doctest::Approx(-std::log(acc / static_cast<double>(s))).epsilon(1e-10));
        }
        CHECK(nlpd_mixture(mu, var, y) == doctest::Approx(pw.mean()).epsilon(1e-12));
    }
    // Far-tail targets stay finite where the naive sum underflows.
    const Matrix mu = Matrix::Zero(1, 2), var = Matrix::Constant(1, 2, 1e-4);
    CHECK(std::isfinite(pointwise_nlpd_mixture(mu, var, Vector::Constant(1, 50.0))(0)));
    const Vector single = pointwise_nlpd_mixture(Matrix::Zero(1, 1), Matrix::Ones(1, 1), Vector::Zero(1));
    CHECK(single(0) == doctest::Approx(0.918938533204673));
}

TEST_CASE("lognormal jacobian adds log y") {
    Vector y(3);
    y << 1.0, std::exp(1.0), 0.5;
    const Vector j = lognormal_jacobian(y);
    CHECK(j(0) == 0.0);
    CHECK(j(1) == doctest::Approx(1.0));
    CHECK(j(2) == doctest::Approx(std::log(0.5)));
    CHECK_THROWS_AS(lognormal_jacobian(Vector::Zero(1)), NonPositiveTarget);
}

TEST_CASE("mean_stderr matches a manual computation") {
    const MeanStderr m = mean_stderr({1.0, 2.0, 3.0, 6.0});
    CHECK(m.mean == doctest::Approx(3.0));
    CHECK(m.stderr_ == doctest::Approx(std::sqrt(14.0 / 3.0) / 2.0));
    CHECK(m.count == 4);
    const MeanStderr s = mean_stderr({5.0});
    CHECK(s.mean == 5.0);
    CHECK(s.stderr_ == 0.0);
}

TEST_CASE("regime metrics recombine into the overall metrics") {
    Gen g(111);
    for (int trial = 0; trial < 20; ++trial) {
        const Index n = uniform_int(g, 5, 60);
        const Vector se = normal_vector(g, n).array().square().matrix();
        const Vector pw = normal_vector(g, n);
        std::vector<int> labels(static_cast<std::size_t>(n));
        for (auto& l : labels) l = uniform_int(g, -1, 3);
        const std::vector<RegimeMetric> r = regime_metrics(se, pw, labels);
        std::size_t count = 0;
        double sse = 0.0, snlpd = 0.0, ref_sse = 0.0, ref_nlpd = 0.0;
        for (const auto& m : r) {
            count += m.count;
            sse += m.mse * static_cast<double>(m.count);
            snlpd += m.nlpd * static_cast<double>(m.count);
            CHECK(m.rmse == doctest::Approx(std::sqrt(m.mse)));
            CHECK(m.regime >= 0);
        }
        std::size_t ref_count = 0;
        for (Index i = 0; i < n; ++i)
            if (labels[static_cast<std::size_t>(i)] >= 0) {
                ++ref_count;
                ref_sse += se(i);
                ref_nlpd += pw(i);
            }
        CHECK(count == ref_count);
        CHECK(sse == doctest::Approx(ref_sse).epsilon(1e-12));
        CHECK(snlpd == doctest::Approx(ref_nlpd).epsilon(1e-12));
    }
}

TEST_CASE("synthetic benchmark is seeded and shares latent values across duplicates") {
    SynthConfig c;
    c.seed = 21;
    const SynthResult a = synth_nonstationary(c), b = synth_nonstationary(c);
    CHECK(a.x == b.x);
    CHECK(a.y == b.y);
    CHECK(a.f == b.f);
    c.seed = 22;
    CHECK(synth_nonstationary(c).y != a.y);
    CHECK(a.dataset.time == a.x.col(0));
    CHECK(a.dataset.value == a.y);

    SynthConfig dup;
    dup.noise = 0.0;
    dup.inputs = Matrix(12, 1);
    for (Index i = 0; i < 12; ++i) dup.inputs(i, 0) = static_cast<double>(i % 4) * 2.5;
    const SynthResult r = synth_nonstationary(dup);
    for (Index i = 4; i < 12; ++i) CHECK(r.y(i) == r.y(i % 4));

    SynthConfig bad;
    bad.n_points = 5;
    CHECK_THROWS_AS(synth_nonstationary(bad), InvalidArgument);
    CHECK(profile_from_string("smooth") == LengthscaleProfile::smooth);
}

TEST_CASE("synthetic lengthscale profiles") {
    SynthConfig c;
    CHECK(true_lengthscale(c, 1.0) == 0.3);
    CHECK(true_lengthscale(c, 9.0) == 3.0);
    CHECK(true_lengthscale(c, 5.0) == 3.0);
    c.profile = LengthscaleProfile::smooth;
    CHECK(true_lengthscale(c, 5.0) == doctest::Approx(std::sqrt(0.3 * 3.0)));
    CHECK(true_lengthscale(c, -100.0) == doctest::Approx(0.3));
    CHECK(true_lengthscale(c, 100.0) == doctest::Approx(3.0));
    const SynthResult r = synth_nonstationary(SynthConfig{.dims = 2, .seed = 4});
    CHECK(r.x.cols() == 2);
    for (Index i = 0; i < r.x.rows(); ++i) {
        CHECK(r.true_lengthscale(i, 0) == true_lengthscale(SynthConfig{}, r.x(i, 0)));
        CHECK(r.true_lengthscale(i, 1) == r.true_lengthscale(i, 0));
    }
}

TEST_CASE("synthetic draws have the prior marginal variance") {
    // Monte-Carlo moment check: 600 independent draws, 10 inputs each.
    SynthConfig c;
    c.n_points = 10;
    c.signal_variance = 2.0;
    c.noise = 0.0;
    double sum = 0.0, sum_sq = 0.0;
    int count = 0;
    for (std::uint64_t seed = 0; seed < 600; ++seed) {
        c.seed = seed;
        const SynthResult r = synth_nonstationary(c);
        sum += r.f.sum();
        sum_sq += r.f.squaredNorm();
        count += static_cast<int>(r.f.size());
    }
    const double mean = sum / count;
    const double var = sum_sq / count - mean * mean;
    CHECK(std::abs(mean) < 0.15);
    CHECK(var == doctest::Approx(2.0).epsilon(0.1));
}

TEST_CASE("data fingerprint tracks content") {
    Gen g(112);
    const Matrix x = normal_matrix(g, 6, 2);
    const Vector y = normal_vector(g, 6);
    const DataFingerprint a = fingerprint(x, y), b = fingerprint(x, y);
    CHECK(a.rows == 6);
    CHECK(a.hash == b.hash);
    Vector y2 = y;
    y2(3) += 1e-12;
    CHECK(fingerprint(x, y2).hash != a.hash);
}
