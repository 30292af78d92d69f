#include "nsgp/cli.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "nsgp/data.hpp"
#include "nsgp/errors.hpp"
#include "nsgp/experiment.hpp"
#include "nsgp/fit_io.hpp"
#include "nsgp/kernel_json.hpp"
#include "nsgp/latent_fields.hpp"
#include "nsgp/metrics.hpp"
#include "nsgp/synth.hpp"

namespace nsgp {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

/// Flags shared by every subcommand.
struct CommonOptions {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = ".";
    int threads = 1;
    std::string fit;
    std::string data;
};

/// Name of the step currently running, reported with failures.
struct Stage {
    std::string name = "parse-arguments";
};

[[noreturn]] void config_fail(const std::string& path, const std::string& what) {
    throw ConfigError(path + ": " + what);
}

void check_keys(const json& j, const std::string& path, const std::set<std::string>& allowed) {
    if (!j.is_object()) config_fail(path, "expected an object");
    for (const auto& [key, value] : j.items())
        if (!allowed.count(key)) config_fail(path + "." + key, "unknown key");
}

template <typename T>
T get_or(const json& j, const char* key, T fallback, const std::string& path) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        config_fail(path + "." + key, "has the wrong type");
    }
}

json load_config(const CommonOptions& o) {
    if (o.config.empty()) return json::object();
    json j = read_json(o.config);
    if (!j.is_object()) config_fail("config", "expected a JSON object");
    return j;
}

/// Paths in a config file are relative to the file's directory.
std::string resolve(const std::string& path, const CommonOptions& o) {
    if (path.empty() || o.config.empty() || fs::path(path).is_absolute()) return path;
    return (fs::path(o.config).parent_path() / path).string();
}

std::uint64_t require_seed(const CommonOptions& o, const json& cfg) {
    if (o.seed) return *o.seed;
    if (cfg.contains("seed")) return get_or<std::uint64_t>(cfg, "seed", 0, "config");
    throw ConfigError("a seed is required (--seed or \"seed\" in the config)");
}

ColumnMap columns_from_json(const json& cfg) {
    ColumnMap c;
    if (!cfg.contains("columns")) return c;
    const json& j = cfg.at("columns");
    check_keys(j, "config.columns", {"time", "lat", "lon", "value"});
    c.time = get_or<std::string>(j, "time", c.time, "config.columns");
    c.lat = get_or<std::string>(j, "lat", c.lat, "config.columns");
    c.lon = get_or<std::string>(j, "lon", c.lon, "config.columns");
    c.value = get_or<std::string>(j, "value", c.value, "config.columns");
    return c;
}

std::vector<InputRole> roles_from_json(const json& cfg, std::vector<InputRole> fallback) {
    if (!cfg.contains("inputs")) return fallback;
    const json& j = cfg.at("inputs");
    if (!j.is_array() || j.empty()) config_fail("config.inputs", "expected a non-empty array of column roles");
    std::vector<InputRole> out;
    for (const json& r : j) {
        if (!r.is_string()) config_fail("config.inputs", "expected strings");
        try {
            out.push_back(input_role_from_string(r.get<std::string>()));
        } catch (const Error& e) {
            config_fail("config.inputs", e.what());
        }
    }
    return out;
}

std::string data_path(const CommonOptions& o, const json& cfg) {
    if (!o.data.empty()) return o.data;
    if (cfg.contains("data")) return resolve(get_or<std::string>(cfg, "data", "", "config"), o);
    throw ConfigError("a data file is required (--data or \"data\" in the config)");
}

void ensure_out_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw ConfigError("cannot create output directory '" + dir + "': " + ec.message());
}

std::string out_file(const CommonOptions& o, const std::string& name) { return (fs::path(o.out) / name).string(); }

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write '" + path + "'");
    out << std::setprecision(17);
    return out;
}

std::vector<double> probabilities_from_json(const json& cfg) {
    if (!cfg.contains("quantiles")) return kDefaultProbabilities;
    std::vector<double> p;
    try {
        p = cfg.at("quantiles").get<std::vector<double>>();
    } catch (const json::exception&) {
        config_fail("config.quantiles", "expected an array of probabilities");
    }
    for (double v : p)
        if (!(v > 0.0 && v < 1.0)) config_fail("config.quantiles", "probabilities must lie in (0, 1)");
    return p;
}

std::string format_probability(double p) {
    std::ostringstream os;
    os << "q" << p;
    return os.str();
}

// ---- fit --------------------------------------------------------------------

ModelSpec model_spec_from_json(const json& cfg) {
    ModelSpec s;
    s.family = family_from_string(get_or<std::string>(cfg, "family", "exact", "config"));
    s.latent = latent_from_string(get_or<std::string>(cfg, "latent", "none", "config"));
    s.transform = transform_from_string(get_or<std::string>(cfg, "transform", "none", "config"));
    if (cfg.contains("kernel")) s.kernel = kernel_from_json(cfg.at("kernel"), "config.kernel");
    if (cfg.contains("optimizer")) s.optimizer = optim_from_json(cfg.at("optimizer"), "config.optimizer");
    s.noise_variance = get_or<double>(cfg, "noise_variance", s.noise_variance, "config");
    if (!(s.noise_variance > 0.0)) config_fail("config.noise_variance", "must be positive");
    s.inducing = get_or<int>(cfg, "inducing", s.inducing, "config");
    if (s.inducing < 1) config_fail("config.inducing", "must be at least 1");
    s.mc_draws = get_or<int>(cfg, "mc_draws", s.mc_draws, "config");
    if (s.mc_draws < 0) config_fail("config.mc_draws", "must be non-negative");
    s.warm_start = get_or<bool>(cfg, "warm_start", s.warm_start, "config");
    return s;
}

std::vector<InputRole> default_roles(const std::optional<KernelSpec>& kernel) {
    const int dims = kernel ? required_input_dims(*kernel) : 1;
    if (dims <= 1) return {InputRole::time};
    if (dims == 2) return {InputRole::lat, InputRole::lon};
    return {InputRole::lat, InputRole::lon, InputRole::time};
}

int cmd_fit(const CommonOptions& o, Stage& stage) {
    stage.name = "load-config";
    const json cfg = load_config(o);
    check_keys(cfg, "config",
               {"data", "columns", "inputs", "family", "latent", "transform", "kernel", "noise_variance", "inducing",
                "optimizer", "split", "mc_draws", "warm_start", "seed"});
    const std::uint64_t seed = require_seed(o, cfg);
    const ModelSpec spec = model_spec_from_json(cfg);
    const ColumnMap columns = columns_from_json(cfg);
    const std::vector<InputRole> roles = roles_from_json(cfg, default_roles(spec.kernel));
    std::optional<SplitSpec> split_spec;
    if (cfg.contains("split")) split_spec = split_from_json(cfg.at("split"), "config.split");

    stage.name = "load-data";
    Dataset data = load_csv(data_path(o, cfg), columns);
    if (data.rejected > 0) std::cerr << "nsgp fit: dropped " << data.rejected << " rows with non-finite values\n";

    stage.name = "split";
    Dataset train = data;
    if (split_spec) train = split_part(split(data, *split_spec), 0);

    stage.name = "optimise";
    const auto t0 = std::chrono::steady_clock::now();
    FitResult fit = fit_model(train, roles, columns, spec, seed);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (split_spec) fit.split = split_to_json(*split_spec);

    stage.name = "write-output";
    ensure_out_dir(o.out);
    write_json(out_file(o, "fit.json"), fit_to_json(fit));
    write_trace_csv(out_file(o, "trace.csv"), fit.trace);
    write_json(out_file(o, "fit.meta.json"), json{{"wall_time_seconds", seconds},
                                                   {"iterations", fit.trace.objective_per_iter.size()},
                                                   {"converged", fit.trace.converged},
                                                   {"training_rows", train.size()}});
    return 0;
}

// ---- predict / evaluate -------------------------------------------------------

/// Warns when the data's input statistics sit far from the fit's normalisation.
void warn_on_scale_mismatch(const FitResult& fit, const Matrix& x, const char* command) {
    if (x.rows() < 2) return;
    const Normalization n = fit_normalization(x);
    for (Index j = 0; j < x.cols(); ++j) {
        const double shift = std::abs(n.shift(j) - fit.input_norm.shift(j)) / fit.input_norm.scale(j);
        const double ratio = n.scale(j) / fit.input_norm.scale(j);
        if (shift > 3.0 || ratio > 10.0 || ratio < 0.1)
            std::cerr << "nsgp " << command << ": FingerprintMismatch: input '"
                      << to_string(fit.inputs[static_cast<std::size_t>(j)])
                      << "' statistics disagree with the fitted normalisation (mean offset " << shift
                      << " training sd, sd ratio " << ratio << ")\n";
    }
}

int cmd_predict(const CommonOptions& o, Stage& stage) {
    stage.name = "load-config";
    const json cfg = load_config(o);
    check_keys(cfg, "config", {"fit", "data", "quantiles", "include_noise", "output"});
    const std::string fit_path = !o.fit.empty() ? o.fit : resolve(get_or<std::string>(cfg, "fit", "", "config"), o);
    if (fit_path.empty()) throw ConfigError("a fit file is required (--fit or \"fit\" in the config)");
    const std::vector<double> probs = probabilities_from_json(cfg);
    const bool include_noise = get_or<bool>(cfg, "include_noise", true, "config");

    stage.name = "load-fit";
    const FitResult fit = read_fit(fit_path);

    stage.name = "load-data";
    CsvOptions csv;
    csv.allow_empty = true;
    csv.required = fit.inputs;
    const Dataset data = load_csv(data_path(o, cfg), fit.columns, csv);
    const Matrix x = input_matrix(data, fit.inputs);
    warn_on_scale_mismatch(fit, x, "predict");

    stage.name = "predict";
    const Prediction p = predict(fit, x, probs, include_noise);

    stage.name = "write-output";
    ensure_out_dir(o.out);
    std::ofstream out = open_out(out_file(o, get_or<std::string>(cfg, "output", "predictions.csv", "config")));
    for (InputRole r : fit.inputs) out << to_string(r) << ',';
    out << "mean,variance,median";
    for (double q : probs) out << ',' << format_probability(q);
    out << '\n';
    for (Index i = 0; i < x.rows(); ++i) {
        for (Index j = 0; j < x.cols(); ++j) out << x(i, j) << ',';
        out << p.mean(i) << ',' << p.variance(i) << ',' << p.median(i);
        for (Index q = 0; q < p.quantiles.cols(); ++q) out << ',' << p.quantiles(i, q);
        out << '\n';
    }
    return 0;
}

int cmd_evaluate(const CommonOptions& o, Stage& stage) {
    stage.name = "load-config";
    const json cfg = load_config(o);
    check_keys(cfg, "config", {"fit", "data", "regimes", "jacobian", "output"});
    const std::string fit_path = !o.fit.empty() ? o.fit : resolve(get_or<std::string>(cfg, "fit", "", "config"), o);
    if (fit_path.empty()) throw ConfigError("a fit file is required (--fit or \"fit\" in the config)");
    const int regimes = get_or<int>(cfg, "regimes", 0, "config");
    if (regimes < 0) config_fail("config.regimes", "must be non-negative");
    const bool jacobian = get_or<bool>(cfg, "jacobian", true, "config");

    stage.name = "load-fit";
    const FitResult fit = read_fit(fit_path);

    stage.name = "load-data";
    const Dataset data = load_csv(data_path(o, cfg), fit.columns);

    stage.name = "split";
    Dataset test = data;
    std::vector<int> regime_labels;
    if (regimes > 0) regime_labels = regime_per_row(data, kmeans_regimes(data, regimes, fit.seed));
    std::vector<int> test_labels = regime_labels;
    if (!fit.split.is_null()) {
        const Dataset labelled = split(data, split_from_json(fit.split, "fit.split"));
        const Dataset train = split_part(labelled, 0);
        const DataFingerprint fp = fingerprint(input_matrix(train, fit.inputs), train.value);
        if (fp.rows != fit.data.rows || fp.hash != fit.data.hash)
            std::cerr << "nsgp evaluate: FingerprintMismatch: training rows of this data (" << fp.rows << ", "
                      << fp.hash << ") differ from the fit's (" << fit.data.rows << ", " << fit.data.hash << ")\n";
        test = split_part(labelled, 1);
        if (!regime_labels.empty()) {
            test_labels.clear();
            for (std::size_t i = 0; i < labelled.split.size(); ++i)
                if (labelled.split[i] == 1) test_labels.push_back(regime_labels[i]);
        }
    }

    stage.name = "evaluate";
    const Evaluation e = evaluate(fit, test, jacobian);

    json j;
    j["fit"] = fs::path(fit_path).filename().string();
    j["seed"] = fit.seed;
    j["split"] = fit.split.is_null() ? json("all rows") : fit.split;
    j["split_description"] =
        fit.split.is_null() ? std::string("all rows") : describe(split_from_json(fit.split, "fit.split"));
    j["transform"] = to_string(fit.transform);
    j["jacobian"] = fit.transform == TargetTransform::log && jacobian;
    j["count"] = e.count;
    j["rmse"] = e.rmse;
    j["nlpd"] = e.nlpd;
    if (regimes > 0) {
        json rows = json::array();
        for (const RegimeMetric& m : regime_metrics(e.squared_error, e.pointwise_nlpd, test_labels))
            rows.push_back({{"regime", m.regime}, {"count", m.count}, {"mse", m.mse}, {"rmse", m.rmse}, {"nlpd", m.nlpd}});
        j["regimes"] = std::move(rows);
    }

    stage.name = "write-output";
    ensure_out_dir(o.out);
    write_json(out_file(o, get_or<std::string>(cfg, "output", "metrics.json", "config")), j);
    return 0;
}

// ---- sample-prior -----------------------------------------------------------

/// A per-dimension list, or one number applied to every dimension.
template <typename T>
std::vector<T> per_dim(const json& j, const char* key, std::vector<T> fallback, const std::string& path) {
    if (j.contains(key) && j.at(key).is_number())
        return std::vector<T>(fallback.size(), get_or<T>(j, key, T{}, path));
    return get_or<std::vector<T>>(j, key, std::move(fallback), path);
}

Matrix grid_from_json(const json& cfg, Index dims) {
    std::vector<double> lower(static_cast<std::size_t>(dims), 0.0);
    std::vector<double> upper(static_cast<std::size_t>(dims), 10.0);
    std::vector<int> points(static_cast<std::size_t>(dims), dims == 1 ? 200 : 30);
    if (cfg.contains("grid")) {
        const json& g = cfg.at("grid");
        check_keys(g, "config.grid", {"lower", "upper", "points"});
        lower = per_dim<double>(g, "lower", lower, "config.grid");
        upper = per_dim<double>(g, "upper", upper, "config.grid");
        points = per_dim<int>(g, "points", points, "config.grid");
    }
    const auto d = static_cast<std::size_t>(dims);
    if (lower.size() != d || upper.size() != d || points.size() != d)
        config_fail("config.grid", "lower/upper/points need one entry per kernel input (" + std::to_string(dims) + ")");
    Index total = 1;
    for (std::size_t k = 0; k < d; ++k) {
        if (points[k] < 1) config_fail("config.grid.points", "must be at least 1");
        if (!(upper[k] >= lower[k])) config_fail("config.grid", "upper must not be below lower");
        total *= points[k];
    }
    Matrix grid(total, dims);
    for (Index r = 0; r < total; ++r) {
        Index rem = r;
        for (Index k = dims - 1; k >= 0; --k) {
            const auto kk = static_cast<std::size_t>(k);
            const Index i = rem % points[kk];
            rem /= points[kk];
            grid(r, k) = points[kk] == 1 ? lower[kk] : lower[kk] + (upper[kk] - lower[kk]) * i / (points[kk] - 1);
        }
    }
    return grid;
}

int cmd_sample_prior(const CommonOptions& o, Stage& stage) {
    stage.name = "load-config";
    const json cfg = load_config(o);
    check_keys(cfg, "config",
               {"kernel", "latent", "dims", "grid", "count", "field_lengthscale", "field_variance", "field_mean",
                "omega", "seed", "output"});
    const std::uint64_t seed = require_seed(o, cfg);
    KernelSpec kernel;
    if (cfg.contains("kernel")) {
        kernel = kernel_from_json(cfg.at("kernel"), "config.kernel");
    } else {
        const int dims = get_or<int>(cfg, "dims", 1, "config");
        if (dims < 1 || dims > kMaxMgkDims) config_fail("config.dims", "must lie in [1, 4]");
        kernel = default_kernel(latent_from_string(get_or<std::string>(cfg, "latent", "fgk", "config")), dims);
    }
    const int count = get_or<int>(cfg, "count", 5, "config");
    if (count < 0) config_fail("config.count", "must be non-negative");
    PriorSamplingConfig ps;
    ps.field_lengthscale = get_or<double>(cfg, "field_lengthscale", ps.field_lengthscale, "config");
    ps.field_variance = get_or<double>(cfg, "field_variance", ps.field_variance, "config");
    ps.field_mean = get_or<double>(cfg, "field_mean", ps.field_mean, "config");
    ps.omega = get_or<double>(cfg, "omega", ps.omega, "config");
    const Index dims = std::max(1, required_input_dims(kernel));
    const Matrix grid = grid_from_json(cfg, dims);

    stage.name = "sample";
    const PriorDraws draws = sample_prior_functions(kernel, grid, count, seed, ps);

    stage.name = "write-output";
    ensure_out_dir(o.out);
    std::ofstream out = open_out(out_file(o, get_or<std::string>(cfg, "output", "prior_draws.csv", "config")));
    const std::vector<FieldRef> refs = field_references(kernel);
    const bool matrix = !refs.empty() && refs.front().kind == FieldKind::matrix;
    const Index field_cols = draws.field_values.empty() ? (refs.empty() ? 0 : static_cast<Index>(refs.front().dims.size()))
                                                        : draws.field_values.front().cols();
    for (Index d = 0; d < dims; ++d) out << 'x' << d << ',';
    out << "draw,f";
    for (Index d = 0; d < field_cols; ++d) out << ',' << (matrix ? "sigma_diag" : "lengthscale") << d;
    out << '\n';
    for (int k = 0; k < count; ++k) {
        for (Index i = 0; i < grid.rows(); ++i) {
            for (Index d = 0; d < dims; ++d) out << grid(i, d) << ',';
            out << k << ',' << draws.f(i, k);
            for (Index d = 0; d < field_cols; ++d) out << ',' << draws.field_values[static_cast<std::size_t>(k)](i, d);
            out << '\n';
        }
    }
    return 0;
}

// ---- synth ------------------------------------------------------------------

SynthConfig synth_from_json(const json& j, const std::string& path, SynthConfig c) {
    check_keys(j, path,
               {"n_points", "dims", "profile", "short_lengthscale", "long_lengthscale", "boundary", "smooth_width",
                "signal_variance", "noise", "seed", "output"});
    c.n_points = get_or<int>(j, "n_points", c.n_points, path);
    c.dims = get_or<int>(j, "dims", c.dims, path);
    if (j.contains("profile")) c.profile = profile_from_string(get_or<std::string>(j, "profile", "", path));
    c.short_lengthscale = get_or<double>(j, "short_lengthscale", c.short_lengthscale, path);
    c.long_lengthscale = get_or<double>(j, "long_lengthscale", c.long_lengthscale, path);
    c.boundary = get_or<double>(j, "boundary", c.boundary, path);
    c.smooth_width = get_or<double>(j, "smooth_width", c.smooth_width, path);
    c.signal_variance = get_or<double>(j, "signal_variance", c.signal_variance, path);
    c.noise = get_or<double>(j, "noise", c.noise, path);
    try {
        c.validate();
    } catch (const InvalidArgument& e) {
        config_fail(path, e.what());
    } catch (const NonPositiveLengthscale& e) {
        config_fail(path, e.what());
    }
    return c;
}

int cmd_synth(const CommonOptions& o, Stage& stage) {
    stage.name = "load-config";
    const json cfg = load_config(o);
    SynthConfig sc = synth_from_json(cfg, "config", SynthConfig{});
    sc.seed = require_seed(o, cfg);

    stage.name = "generate";
    const SynthResult r = synth_nonstationary(sc);

    stage.name = "write-output";
    ensure_out_dir(o.out);
    write_csv(out_file(o, get_or<std::string>(cfg, "output", "synth.csv", "config")), r.dataset);
    std::ofstream out = open_out(out_file(o, "synth_truth.csv"));
    for (Index d = 0; d < r.x.cols(); ++d) out << 'x' << d << ',';
    out << "f,y";
    for (Index d = 0; d < r.x.cols(); ++d) out << ",lengthscale" << d;
    out << '\n';
    for (Index i = 0; i < r.x.rows(); ++i) {
        for (Index d = 0; d < r.x.cols(); ++d) out << r.x(i, d) << ',';
        out << r.f(i) << ',' << r.y(i);
        for (Index d = 0; d < r.x.cols(); ++d) out << ',' << r.true_lengthscale(i, d);
        out << '\n';
    }
    return 0;
}

// ---- bench ------------------------------------------------------------------

int cmd_bench(const CommonOptions& o, const std::string& suite_arg, Stage& stage) {
    stage.name = "load-config";
    const json cfg = load_config(o);
    check_keys(cfg, "config",
               {"suite", "splits", "train_fraction", "include_mgk", "jacobian", "synth", "grid_cells", "months", "data",
                "columns", "inputs", "family", "inducing", "noise_variance", "optimizer", "seed"});
    std::string suite_name = suite_arg;
    if (suite_name.empty()) suite_name = get_or<std::string>(cfg, "suite", "", "config");
    if (suite_name.empty()) throw ConfigError("a bench suite is required (spatial, temporal or spatiotemporal)");
    BenchConfig c = default_bench_config(suite_from_string(suite_name));
    c.seed = require_seed(o, cfg);
    c.threads = o.threads;
    c.splits = get_or<int>(cfg, "splits", c.splits, "config");
    c.train_fraction = get_or<double>(cfg, "train_fraction", c.train_fraction, "config");
    c.include_mgk = get_or<bool>(cfg, "include_mgk", c.include_mgk, "config");
    c.jacobian = get_or<bool>(cfg, "jacobian", c.jacobian, "config");
    c.grid_cells = get_or<int>(cfg, "grid_cells", c.grid_cells, "config");
    c.months = get_or<int>(cfg, "months", c.months, "config");
    c.family = family_from_string(get_or<std::string>(cfg, "family", "exact", "config"));
    c.inducing = get_or<int>(cfg, "inducing", c.inducing, "config");
    c.noise_variance = get_or<double>(cfg, "noise_variance", c.noise_variance, "config");
    if (cfg.contains("optimizer")) c.optimizer = optim_from_json(cfg.at("optimizer"), "config.optimizer");
    if (cfg.contains("synth")) {
        c.synth = synth_from_json(cfg.at("synth"), "config.synth", c.synth);
        if (!cfg.contains("inputs"))
            c.inputs = c.synth.dims == 1 ? std::vector<InputRole>{InputRole::time}
                                         : std::vector<InputRole>{InputRole::lat, InputRole::lon};
    }
    c.inputs = roles_from_json(cfg, c.inputs);
    if (cfg.contains("data")) {
        stage.name = "load-data";
        c.data = load_csv(resolve(get_or<std::string>(cfg, "data", "", "config"), o), columns_from_json(cfg));
    }
    if (c.suite == BenchSuite::spatiotemporal && !c.data &&
        c.inputs != std::vector<InputRole>{InputRole::lat, InputRole::lon, InputRole::time})
        config_fail("config.inputs", "the spatiotemporal suite reads (lat, lon, time)");

    stage.name = "run-splits";
    const auto t0 = std::chrono::steady_clock::now();
    const BenchResult r = run_bench(c);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    stage.name = "write-output";
    ensure_out_dir(o.out);
    write_json(out_file(o, "bench.json"), bench_to_json(r));
    json timings = json::object();
    for (const auto& m : r.models) timings[m.name] = m.fit_seconds;
    write_json(out_file(o, "bench.meta.json"),
               json{{"wall_time_seconds", seconds}, {"threads", c.threads}, {"fit_seconds", timings}});
    std::cout << std::fixed << std::setprecision(4);
    std::cout << "suite " << to_string(c.suite) << ", " << c.splits << " splits\n";
    for (const auto& m : r.models)
        std::cout << "  " << std::left << std::setw(14) << m.name << " RMSE " << m.rmse_summary.mean << " +- "
                  << m.rmse_summary.stderr_ << "   NLPD " << m.nlpd_summary.mean << " +- " << m.nlpd_summary.stderr_
                  << '\n';
    return 0;
}

void add_common(CLI::App* app, CommonOptions& o, bool seed, bool fit_data) {
    app->add_option("--config", o.config, "JSON configuration file");
    if (seed) app->add_option("--seed", o.seed, "Run seed (overrides the config)");
    app->add_option("--out", o.out, "Output directory")->capture_default_str();
    app->add_option("--threads", o.threads, "Worker threads")->check(CLI::PositiveNumber)->capture_default_str();
    if (fit_data) {
        app->add_option("--fit", o.fit, "Fit file written by `nsgp fit`");
    }
    app->add_option("--data", o.data, "Data CSV (overrides the config)");
}

}  // namespace

int run_cli(int argc, char** argv) {
    CLI::App app{"Non-stationary Gaussian-process regression"};
    app.require_subcommand(1);
    CommonOptions o;
    std::string suite;

    CLI::App* fit = app.add_subcommand("fit", "Fit a model and write fit.json and trace.csv");
    add_common(fit, o, true, false);
    CLI::App* predict_cmd = app.add_subcommand("predict", "Predict mean, variance and quantiles at data rows");
    add_common(predict_cmd, o, false, true);
    CLI::App* evaluate_cmd = app.add_subcommand("evaluate", "Score a fit on held-out rows (RMSE, NLPD)");
    add_common(evaluate_cmd, o, false, true);
    CLI::App* prior = app.add_subcommand("sample-prior", "Draw functions and latent fields from the prior");
    add_common(prior, o, true, false);
    CLI::App* synth = app.add_subcommand("synth", "Generate the synthetic non-stationary benchmark");
    add_common(synth, o, true, false);
    CLI::App* bench = app.add_subcommand("bench", "Compare stationary and non-stationary models over seeded splits");
    add_common(bench, o, true, false);
    bench->add_option("suite", suite, "spatial | temporal | spatiotemporal");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    std::string command = app.get_subcommands().front()->get_name();
    Stage stage;
    try {
        if (*fit) return cmd_fit(o, stage);
        if (*predict_cmd) return cmd_predict(o, stage);
        if (*evaluate_cmd) return cmd_evaluate(o, stage);
        if (*prior) return cmd_sample_prior(o, stage);
        if (*synth) return cmd_synth(o, stage);
        return cmd_bench(o, suite, stage);
    } catch (const Error& e) {
        std::cerr << "nsgp " << command << ": stage '" << stage.name << "' failed: " << e.what() << '\n';
        return e.category() == ErrorCategory::numerical ? kExitNumerical : kExitConfig;
    } catch (const json::exception& e) {
        std::cerr << "nsgp " << command << ": stage '" << stage.name << "' failed: invalid JSON: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "nsgp " << command << ": stage '" << stage.name << "' failed: " << e.what() << '\n';
        return kExitNumerical;
    }
}

}  // namespace nsgp
