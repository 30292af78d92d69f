#include "nsgp/experiment.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <numbers>
#include <random>
#include <thread>

#include <boost/math/distributions/normal.hpp>

#include "nsgp/errors.hpp"
#include "nsgp/gp_exact.hpp"
#include "nsgp/gp_sparse.hpp"
#include "nsgp/rng.hpp"

namespace nsgp {

using nlohmann::json;

std::string to_string(ModelFamily f) { return f == ModelFamily::exact ? "exact" : "sparse"; }

std::string to_string(LatentFamily f) {
    switch (f) {
        case LatentFamily::none: return "none";
        case LatentFamily::fgk: return "fgk";
        case LatentFamily::mgk: return "mgk";
    }
    return "none";
}

ModelFamily family_from_string(const std::string& s) {
    if (s == "exact") return ModelFamily::exact;
    if (s == "sparse") return ModelFamily::sparse;
    throw ConfigError("unknown model family '" + s + "' (expected exact or sparse)");
}

LatentFamily latent_from_string(const std::string& s) {
    if (s == "none") return LatentFamily::none;
    if (s == "fgk") return LatentFamily::fgk;
    if (s == "mgk") return LatentFamily::mgk;
    throw ConfigError("unknown latent family '" + s + "' (expected none, fgk or mgk)");
}

KernelSpec default_kernel(LatentFamily latent, Index dims) {
    std::vector<int> all(static_cast<std::size_t>(dims));
    for (Index d = 0; d < dims; ++d) all[static_cast<std::size_t>(d)] = static_cast<int>(d);
    switch (latent) {
        case LatentFamily::none:
            return KernelSpec::se_ard(1.0, std::vector<double>(static_cast<std::size_t>(dims), 1.0), all);
        case LatentFamily::fgk: return KernelSpec::constant(1.0) * KernelSpec::fgk(0, all);
        case LatentFamily::mgk: return KernelSpec::constant(1.0) * KernelSpec::mgk(0, all);
    }
    throw InvalidArgument("unknown latent family");
}

OptimConfig default_optimizer(const ModelSpec& spec, std::uint64_t seed) {
    OptimConfig c;
    if (spec.optimizer) {
        c = *spec.optimizer;
    } else {
        const bool latent = spec.kernel ? has_nonstationary(*spec.kernel) : spec.latent != LatentFamily::none;
        c.algorithm = latent ? Algorithm::adam : Algorithm::lbfgs;
        if (!latent) c.max_iters = 500;
    }
    c.seed = seed;
    return c;
}

FitResult fit_model(const Dataset& train, const std::vector<InputRole>& roles, const ColumnMap& columns,
                    const ModelSpec& spec, std::uint64_t seed) {
    if (train.size() == 0) throw EmptyDataset("no training rows");
    if (roles.empty()) throw ConfigError("at least one input column is required");
    const Matrix x = input_matrix(train, roles);
    Vector z = train.value;
    if (spec.transform == TargetTransform::log) {
        for (Index i = 0; i < z.size(); ++i) {
            if (!(z(i) > 0.0))
                throw NonPositiveTarget("log transform needs positive targets (row " + std::to_string(i) + ")");
            z(i) = std::log(z(i));
        }
    }

    FitResult r;
    r.latent = to_string(spec.latent);
    r.inputs = roles;
    r.columns = columns;
    r.input_norm = fit_normalization(x);
    const Normalization zn = fit_normalization(Matrix(z));
    r.target_shift = zn.shift(0);
    r.target_scale = zn.scale(0);
    r.transform = spec.transform;
    r.optimizer = default_optimizer(spec, seed);
    r.seed = seed;
    r.data = fingerprint(x, train.value);
    r.mc_draws = spec.mc_draws;

    const Matrix xn = r.input_norm.forward(x);
    const Vector zs = (z.array() - r.target_shift) / r.target_scale;
    const KernelSpec kernel = spec.kernel ? *spec.kernel : default_kernel(spec.latent, x.cols());
    if (required_input_dims(kernel) > x.cols())
        throw ConfigError("kernel reads input column " + std::to_string(required_input_dims(kernel) - 1) + " but only " +
                          std::to_string(x.cols()) + " inputs are configured");

    // Stationary fit used to initialise the latent-field model.
    std::optional<GpModel> warm;
    if (spec.warm_start && !spec.kernel && spec.latent != LatentFamily::none) {
        ModelSpec stationary = spec;
        stationary.latent = LatentFamily::none;
        stationary.optimizer.reset();
        stationary.mc_draws = 0;
        warm = fit_model(train, roles, columns, stationary, seed).base();
    }
    auto apply_warm = [&warm](GpModel& m) {
        if (!warm) return;
        const auto& se = std::get<SeArd>(warm->kernel.node());
        const auto& product = std::get<Product>(m.kernel.node());
        m.kernel = KernelSpec::constant(se.variance) * *product.right;
        m.noise_variance = warm->noise_variance;
        for (auto& f : m.fields) {
            if (auto* l = std::get_if<LengthscaleField>(&f))
                for (Index d = 0; d < l->log_values.cols(); ++d)
                    l->log_values.col(d).setConstant(std::log(se.lengthscales[static_cast<std::size_t>(d)]));
        }
    };

    if (spec.family == ModelFamily::exact) {
        GpModel m;
        m.kernel = kernel;
        m.noise_variance = spec.noise_variance;
        m.train_inputs = xn;
        m.train_targets = zs;
        m.fields = make_fields(kernel, xn, seed);
        m.target_transform = spec.transform;
        apply_warm(m);
        ExactFit f = fit_exact(m, r.optimizer);
        r.model = std::move(f.model);
        r.trace = std::move(f.trace);
        r.objective = f.objective;
    } else {
        const Index distinct = unique_rows(xn).rows.rows();
        const int m_count = static_cast<int>(std::min<Index>(spec.inducing, distinct));
        SparseModel m = make_sparse_model(kernel, xn, zs, spec.noise_variance, m_count, seed);
        m.base.target_transform = spec.transform;
        apply_warm(m.base);
        SparseFit f = sparse_fit(m, r.optimizer);
        r.model = std::move(f.model);
        r.trace = std::move(f.trace);
        r.objective = f.objective;
    }
    return r;
}

namespace {

bool has_matrix_field(const GpModel& m) {
    for (const auto& f : m.fields)
        if (std::holds_alternative<MatrixField>(f)) return true;
    return false;
}

}  // namespace

Prediction predict(const FitResult& fit, const Matrix& x, const std::vector<double>& probs, bool include_noise) {
    for (double p : probs)
        if (!(p > 0.0 && p < 1.0)) throw InvalidArgument("quantile probabilities must lie in (0, 1)");
    if (x.cols() != static_cast<Index>(fit.inputs.size()))
        throw DimensionMismatch("prediction inputs have " + std::to_string(x.cols()) + " columns, fit expects " +
                                std::to_string(fit.inputs.size()));
    Prediction out;
    out.probabilities = probs;
    const Index n = x.rows();
    if (n == 0) {
        out.mean = out.variance = out.median = out.z_mean = out.z_variance = Vector(0);
        out.quantiles = Matrix(0, static_cast<Index>(probs.size()));
        return out;
    }

    const Matrix xn = fit.input_norm.forward(x);
    PredictOptions opts;
    opts.include_noise = include_noise;
    PredictiveDistribution p;
    if (const auto* s = std::get_if<SparseModel>(&fit.model)) {
        p = sparse_predictive(*s, xn, opts);
    } else {
        const GpModel& m = std::get<GpModel>(fit.model);
        p = fit.mc_draws > 0 && has_matrix_field(m) ? predictive_mc(m, xn, fit.mc_draws, fit.seed, opts)
                                                     : posterior_predictive(m, xn, opts);
    }

    const double a = fit.target_scale;
    out.z_mean = (fit.target_shift + a * p.mean.array()).matrix();
    out.z_variance = (a * a * p.variance.array().max(0.0)).matrix();
    if (p.component_means.size() > 0) {
        out.z_component_means = (fit.target_shift + a * p.component_means.array()).matrix();
        out.z_component_variances = (a * a * p.component_variances.array()).matrix();
    }

    if (fit.transform == TargetTransform::log) {
        const LognormalPrediction ln = lognormal_quantiles(out.z_mean, out.z_variance, probs);
        out.median = ln.median;
        out.quantiles = ln.quantiles;
        out.mean = (out.z_mean.array() + 0.5 * out.z_variance.array()).exp().matrix();
        out.variance =
            (out.z_variance.array().exp() - 1.0).cwiseProduct((2.0 * out.z_mean.array() + out.z_variance.array()).exp())
                .matrix();
    } else {
        out.mean = out.z_mean;
        out.variance = out.z_variance;
        out.median = out.z_mean;
        const boost::math::normal_distribution<double> std_normal;
        out.quantiles.resize(n, static_cast<Index>(probs.size()));
        for (std::size_t q = 0; q < probs.size(); ++q) {
            const double zq = boost::math::quantile(std_normal, probs[q]);
            out.quantiles.col(static_cast<Index>(q)) = (out.z_mean.array() + zq * out.z_variance.array().sqrt()).matrix();
        }
    }
    return out;
}

Prediction predict(const FitResult& fit, const Dataset& d, const std::vector<double>& probs, bool include_noise) {
    return predict(fit, input_matrix(d, fit.inputs), probs, include_noise);
}

Evaluation evaluate(const FitResult& fit, const Dataset& test, bool jacobian) {
    if (test.size() == 0) throw DegenerateSplit("no rows to evaluate");
    const Prediction p = predict(fit, test, {0.5}, true);
    const Vector& y = test.value;
    Evaluation e;
    e.count = static_cast<std::size_t>(y.size());
    e.squared_error = (p.mean - y).array().square().matrix();
    e.rmse = rmse(p.mean, y);

    Vector target = y;
    Vector extra = Vector::Zero(y.size());
    if (fit.transform == TargetTransform::log) {
        const Vector log_y = lognormal_jacobian(y);
        target = log_y;
        if (jacobian) extra = log_y;
    }
    const Vector base = p.z_component_means.size() > 0
                            ? pointwise_nlpd_mixture(p.z_component_means, p.z_component_variances, target)
                            : pointwise_nlpd(p.z_mean, p.z_variance, target);
    e.pointwise_nlpd = base + extra;
    e.nlpd = e.pointwise_nlpd.mean();
    return e;
}

// ---- benchmark suites -------------------------------------------------------

std::string to_string(BenchSuite s) {
    switch (s) {
        case BenchSuite::spatial: return "spatial";
        case BenchSuite::temporal: return "temporal";
        case BenchSuite::spatiotemporal: return "spatiotemporal";
    }
    return "spatial";
}

BenchSuite suite_from_string(const std::string& s) {
    if (s == "spatial") return BenchSuite::spatial;
    if (s == "temporal") return BenchSuite::temporal;
    if (s == "spatiotemporal") return BenchSuite::spatiotemporal;
    throw ConfigError("unknown bench suite '" + s + "' (expected spatial, temporal or spatiotemporal)");
}

BenchConfig default_bench_config(BenchSuite suite) {
    BenchConfig c;
    c.suite = suite;
    switch (suite) {
        case BenchSuite::spatial:
            c.synth.dims = 2;
            c.synth.profile = LengthscaleProfile::piecewise;
            c.inputs = {InputRole::lat, InputRole::lon};
            break;
        case BenchSuite::temporal:
            c.synth.dims = 1;
            c.synth.profile = LengthscaleProfile::smooth;
            c.inputs = {InputRole::time};
            break;
        case BenchSuite::spatiotemporal:
            c.synth.dims = 2;
            c.synth.profile = LengthscaleProfile::piecewise;
            c.inputs = {InputRole::lat, InputRole::lon, InputRole::time};
            break;
    }
    return c;
}

Dataset bench_dataset(const BenchConfig& c) {
    if (c.data) return *c.data;
    SynthConfig sc = c.synth;
    sc.seed = c.seed;
    if (c.suite == BenchSuite::spatial) return synth_nonstationary(sc).dataset;
    if (c.suite == BenchSuite::temporal) {
        Dataset d = synth_nonstationary(sc).dataset;
        d.value = d.value.array().exp().matrix();
        return d;
    }

    // Gridded cells carry a non-stationary spatial pattern plus a seasonal
    // cycle whose phase drifts with latitude.
    if (c.grid_cells < 2 || c.months < 2) throw InvalidArgument("spatio-temporal grid needs >= 2 cells and months");
    const Index cells = static_cast<Index>(c.grid_cells) * c.grid_cells;
    Matrix sites(cells, 2);
    const double step = 10.0 / (c.grid_cells - 1);
    for (int i = 0; i < c.grid_cells; ++i)
        for (int j = 0; j < c.grid_cells; ++j) sites.row(i * c.grid_cells + j) << i * step, j * step;
    sc.inputs = sites;
    sc.noise = 0.0;
    const SynthResult spatial = synth_nonstationary(sc);

    Rng rng = substream(c.seed, "bench_seasonal");
    std::normal_distribution<double> std_normal;
    const double noise_sd = std::sqrt(c.synth.noise);
    const Index n = cells * c.months;
    Dataset d;
    d.time.resize(n);
    d.lat.resize(n);
    d.lon.resize(n);
    d.value.resize(n);
    Index r = 0;
    for (int t = 0; t < c.months; ++t) {
        for (Index s = 0; s < cells; ++s, ++r) {
            const double phase = 2.0 * std::numbers::pi * (t / 12.0 + sites(s, 0) / 40.0);
            d.time(r) = t;
            d.lat(r) = sites(s, 0);
            d.lon(r) = sites(s, 1);
            d.value(r) = spatial.f(s) + 0.5 * std::sin(phase) + noise_sd * std_normal(rng);
        }
    }
    return d;
}

namespace {

std::vector<InputRole> bench_roles(const BenchConfig& c) {
    if (!c.inputs.empty()) return c.inputs;
    return default_bench_config(c.suite).inputs;
}

/// Temporal SE * periodic plus a spatial term over (lat, lon, t), with the
/// period held at twelve months in normalised time units.
KernelSpec spatiotemporal_bench_kernel(bool nonstationary, double period) {
    const KernelSpec temporal = KernelSpec::se_ard(1.0, {1.0, 1.0}, {0, 1}) *
                                KernelSpec::periodic(1.0, 1.0, period, 2).with_fixed(kFixPeriod);
    if (!nonstationary) return temporal + KernelSpec::se_ard(1.0, {1.0, 1.0}, {0, 1});
    return temporal + KernelSpec::constant(1.0) * KernelSpec::fgk(0, {0, 1});
}

}  // namespace

std::vector<std::pair<std::string, ModelSpec>> bench_models(const BenchConfig& c) {
    ModelSpec base;
    base.family = c.family;
    base.inducing = c.inducing;
    base.noise_variance = c.noise_variance;
    base.optimizer = c.optimizer;
    if (c.suite == BenchSuite::temporal) base.transform = TargetTransform::log;

    std::vector<std::pair<std::string, ModelSpec>> out;
    if (c.suite == BenchSuite::spatiotemporal) {
        const Dataset d = bench_dataset(c);
        const double sd_t = fit_normalization(Matrix(d.time)).scale(0);
        ModelSpec st = base;
        st.kernel = spatiotemporal_bench_kernel(false, 12.0 / sd_t);
        out.emplace_back("stationary", st);
        ModelSpec ns = base;
        ns.latent = LatentFamily::fgk;
        ns.kernel = spatiotemporal_bench_kernel(true, 12.0 / sd_t);
        out.emplace_back("nonstationary", ns);
        return out;
    }
    ModelSpec se = base;
    out.emplace_back("se_ard", se);
    ModelSpec fgk = base;
    fgk.latent = LatentFamily::fgk;
    out.emplace_back("fgk", fgk);
    if (c.include_mgk) {
        ModelSpec mgk = base;
        mgk.latent = LatentFamily::mgk;
        out.emplace_back("mgk", mgk);
    }
    return out;
}

BenchResult run_bench(const BenchConfig& c) {
    if (c.splits < 1) throw ConfigError("bench needs at least one split");
    if (!(c.train_fraction > 0.0 && c.train_fraction < 1.0)) throw ConfigError("train_fraction must lie in (0, 1)");
    if (c.threads < 1) throw ConfigError("threads must be at least 1");
    const Dataset data = bench_dataset(c);
    const std::vector<InputRole> roles = bench_roles(c);
    const auto models = bench_models(c);

    struct SplitOutcome {
        std::string description;
        std::vector<Evaluation> evals;
        std::vector<double> seconds;
        std::vector<FitResult> fits;
        std::exception_ptr error;
    };
    std::vector<SplitOutcome> outcomes(static_cast<std::size_t>(c.splits));

    auto run_split = [&](int s) {
        SplitOutcome& o = outcomes[static_cast<std::size_t>(s)];
        try {
            const std::uint64_t split_seed = c.seed + static_cast<std::uint64_t>(s);
            const SplitSpec spec = RandomSplit{c.train_fraction, split_seed};
            o.description = describe(spec);
            const Dataset labelled = split(data, spec);
            const Dataset train = split_part(labelled, 0);
            const Dataset test = split_part(labelled, 1);
            for (const auto& [name, model] : models) {
                const auto t0 = std::chrono::steady_clock::now();
                FitResult fit = fit_model(train, roles, ColumnMap{}, model, split_seed);
                fit.split = split_to_json(spec);
                o.seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
                o.evals.push_back(evaluate(fit, test, c.jacobian));
                if (c.keep_fits || s == c.splits - 1) o.fits.push_back(std::move(fit));
            }
        } catch (...) {
            o.error = std::current_exception();
        }
    };

    const int workers = std::min(c.threads, c.splits);
    if (workers == 1) {
        for (int s = 0; s < c.splits; ++s) run_split(s);
    } else {
        std::atomic<int> next{0};
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                for (int s = next++; s < c.splits; s = next++) run_split(s);
            });
        for (auto& t : pool) t.join();
    }
    for (const auto& o : outcomes)
        if (o.error) std::rethrow_exception(o.error);

    BenchResult r;
    r.config = c;
    for (std::size_t mi = 0; mi < models.size(); ++mi) {
        BenchModelResult m;
        m.name = models[mi].first;
        for (const auto& o : outcomes) {
            m.rmse.push_back(o.evals[mi].rmse);
            m.nlpd.push_back(o.evals[mi].nlpd);
            m.fit_seconds.push_back(o.seconds[mi]);
        }
        m.rmse_summary = mean_stderr(m.rmse);
        m.nlpd_summary = mean_stderr(m.nlpd);
        r.models.push_back(std::move(m));
    }
    for (auto& o : outcomes) r.split_descriptions.push_back(o.description);
    r.last_fits = outcomes.back().fits;
    if (c.keep_fits)
        for (auto& o : outcomes) r.fits.push_back(std::move(o.fits));
    return r;
}

json bench_to_json(const BenchResult& r) {
    const BenchConfig& c = r.config;
    json j;
    j["suite"] = to_string(c.suite);
    j["seed"] = c.seed;
    j["splits"] = c.splits;
    j["train_fraction"] = c.train_fraction;
    j["family"] = to_string(c.family);
    j["data"] = c.data ? "supplied" : "synthetic";
    j["rows"] = bench_dataset(c).size();
    j["split_descriptions"] = r.split_descriptions;
    json models = json::array();
    for (const auto& m : r.models) {
        models.push_back({{"model", m.name},
                          {"rmse", {{"mean", m.rmse_summary.mean}, {"stderr", m.rmse_summary.stderr_},
                                    {"count", m.rmse_summary.count}, {"per_split", m.rmse}}},
                          {"nlpd", {{"mean", m.nlpd_summary.mean}, {"stderr", m.nlpd_summary.stderr_},
                                    {"count", m.nlpd_summary.count}, {"per_split", m.nlpd}}}});
    }
    j["models"] = std::move(models);
    return j;
}

double pearson(const Vector& a, const Vector& b) {
    if (a.size() != b.size()) throw DimensionMismatch("pearson: vectors differ in length");
    if (a.size() < 2) throw InvalidArgument("pearson needs at least two values");
    const Vector da = a.array() - a.mean();
    const Vector db = b.array() - b.mean();
    const double denom = std::sqrt(da.squaredNorm() * db.squaredNorm());
    return denom > 0.0 ? da.dot(db) / denom : 0.0;
}

}  // namespace nsgp
