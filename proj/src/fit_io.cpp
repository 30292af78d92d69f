#include "nsgp/fit_io.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

#include "nsgp/errors.hpp"
#include "nsgp/kernel_json.hpp"
#include "overloaded.hpp"

namespace nsgp {

using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& what) { throw ConfigError(path + ": " + what); }

json matrix_to_json(const Matrix& m) {
    json rows = json::array();
    for (Index i = 0; i < m.rows(); ++i) {
        json row = json::array();
        for (Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

json vector_to_json(const Vector& v) {
    json out = json::array();
    for (Index i = 0; i < v.size(); ++i) out.push_back(v(i));
    return out;
}

Matrix matrix_from_json(const json& j, const std::string& path, Index cols_if_empty = 0) {
    if (!j.is_array()) fail(path, "expected an array of rows");
    if (j.empty()) return Matrix(0, cols_if_empty);
    const Index rows = static_cast<Index>(j.size());
    if (!j.front().is_array()) fail(path, "expected an array of rows");
    const Index cols = static_cast<Index>(j.front().size());
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i) {
        const json& row = j[static_cast<std::size_t>(i)];
        if (!row.is_array() || static_cast<Index>(row.size()) != cols) fail(path, "rows have unequal lengths");
        for (Index c = 0; c < cols; ++c) {
            if (!row[static_cast<std::size_t>(c)].is_number()) fail(path, "expected numbers");
            m(i, c) = row[static_cast<std::size_t>(c)].get<double>();
        }
    }
    return m;
}

Vector vector_from_json(const json& j, const std::string& path) {
    if (!j.is_array()) fail(path, "expected an array of numbers");
    Vector v(static_cast<Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_number()) fail(path, "expected numbers");
        v(static_cast<Index>(i)) = j[i].get<double>();
    }
    return v;
}

const json& member(const json& j, const char* key, const std::string& path) {
    if (!j.is_object() || !j.contains(key)) fail(path, std::string("missing \"") + key + "\"");
    return j.at(key);
}

std::vector<int> ints_from_json(const json& j, const std::string& path) {
    if (!j.is_array()) fail(path, "expected an array of integers");
    std::vector<int> out;
    for (const json& v : j) {
        if (!v.is_number_integer()) fail(path, "expected integers");
        out.push_back(v.get<int>());
    }
    return out;
}

json model_to_json(const GpModel& m) {
    json j;
    j["kernel"] = kernel_to_json(m.kernel);
    j["noise_variance"] = m.noise_variance;
    j["train_inputs"] = matrix_to_json(m.train_inputs);
    j["train_targets"] = vector_to_json(m.train_targets);
    json fields = json::array();
    for (const auto& f : m.fields) fields.push_back(field_to_json(f));
    j["fields"] = std::move(fields);
    return j;
}

GpModel model_from_json(const json& j, const std::string& path) {
    GpModel m;
    m.kernel = kernel_from_json(member(j, "kernel", path), path + ".kernel");
    const json& noise = member(j, "noise_variance", path);
    if (!noise.is_number()) fail(path + ".noise_variance", "expected a number");
    m.noise_variance = noise.get<double>();
    m.train_targets = vector_from_json(member(j, "train_targets", path), path + ".train_targets");
    m.train_inputs = matrix_from_json(member(j, "train_inputs", path), path + ".train_inputs");
    const json& fields = member(j, "fields", path);
    if (!fields.is_array()) fail(path + ".fields", "expected an array");
    for (std::size_t i = 0; i < fields.size(); ++i)
        m.fields.push_back(field_from_json(fields[i], path + ".fields[" + std::to_string(i) + "]"));
    return m;
}

std::string hex64(std::uint64_t h) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

}  // namespace

DataFingerprint fingerprint(const Matrix& x, const Vector& y) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const double* d, std::size_t n) {
        const auto* p = reinterpret_cast<const unsigned char*>(d);
        for (std::size_t i = 0; i < n * sizeof(double); ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    };
    mix(x.data(), static_cast<std::size_t>(x.size()));
    mix(y.data(), static_cast<std::size_t>(y.size()));
    DataFingerprint out;
    out.rows = static_cast<std::size_t>(y.size());
    out.hash = hex64(h);
    return out;
}

const GpModel& FitResult::base() const {
    if (const auto* s = std::get_if<SparseModel>(&model)) return s->base;
    return std::get<GpModel>(model);
}

json field_to_json(const LatentField& f) {
    json j;
    std::visit(detail::Overloaded{
                   [&](const LengthscaleField& v) {
                       j["type"] = "lengthscale";
                       j["input_dims"] = v.input_dims;
                       j["anchors"] = matrix_to_json(v.anchors);
                       j["log_values"] = matrix_to_json(v.log_values);
                       j["prior_mean"] = vector_to_json(v.prior_mean);
                       j["prior_kernel"] = kernel_to_json(v.prior_kernel);
                   },
                   [&](const MatrixField& v) {
                       j["type"] = "matrix";
                       j["input_dims"] = v.input_dims;
                       j["anchors"] = matrix_to_json(v.anchors);
                       j["h"] = matrix_to_json(v.h);
                       j["row_kernel"] = kernel_to_json(v.row_kernel);
                       j["col_cov"] = matrix_to_json(v.col_cov);
                       j["omega"] = vector_to_json(v.omega);
                   },
               },
               f);
    return j;
}

LatentField field_from_json(const json& j, const std::string& path) {
    const json& type = member(j, "type", path);
    if (!type.is_string()) fail(path + ".type", "expected a string");
    const std::vector<int> dims = ints_from_json(member(j, "input_dims", path), path + ".input_dims");
    const Index d = static_cast<Index>(dims.size());
    Matrix anchors = matrix_from_json(member(j, "anchors", path), path + ".anchors", d);
    if (anchors.cols() != d) fail(path + ".anchors", "column count differs from input_dims");
    if (type == "lengthscale") {
        LengthscaleField f;
        f.input_dims = dims;
        f.anchors = std::move(anchors);
        f.log_values = matrix_from_json(member(j, "log_values", path), path + ".log_values", d);
        f.prior_mean = vector_from_json(member(j, "prior_mean", path), path + ".prior_mean");
        f.prior_kernel = kernel_from_json(member(j, "prior_kernel", path), path + ".prior_kernel");
        if (f.log_values.rows() != f.anchors.rows() || f.log_values.cols() != d || f.prior_mean.size() != d)
            fail(path, "log_values/prior_mean shapes do not match the anchors");
        return f;
    }
    if (type == "matrix") {
        MatrixField f;
        f.input_dims = dims;
        f.anchors = std::move(anchors);
        f.h = matrix_from_json(member(j, "h", path), path + ".h", d);
        f.row_kernel = kernel_from_json(member(j, "row_kernel", path), path + ".row_kernel");
        f.col_cov = matrix_from_json(member(j, "col_cov", path), path + ".col_cov", d);
        f.omega = vector_from_json(member(j, "omega", path), path + ".omega");
        if (f.h.rows() != f.anchors.rows() || f.h.cols() != d || f.col_cov.rows() != d || f.col_cov.cols() != d ||
            f.omega.size() != d)
            fail(path, "h/col_cov/omega shapes do not match the anchors");
        return f;
    }
    fail(path + ".type", "unknown field type '" + type.get<std::string>() + "'");
}

json split_to_json(const SplitSpec& s) {
    if (const auto* r = std::get_if<RandomSplit>(&s))
        return json{{"type", "random"}, {"fraction", r->fraction}, {"seed", r->seed}};
    return json{{"type", "temporal"}, {"cutoff", std::get<TemporalSplit>(s).cutoff}};
}

SplitSpec split_from_json(const json& j, const std::string& path) {
    if (!j.is_object()) fail(path, "expected an object");
    try {
        const std::string type = member(j, "type", path).get<std::string>();
        if (type == "random") {
            RandomSplit r;
            if (j.contains("fraction")) r.fraction = j.at("fraction").get<double>();
            if (j.contains("seed")) r.seed = j.at("seed").get<std::uint64_t>();
            if (!(r.fraction > 0.0 && r.fraction < 1.0)) fail(path + ".fraction", "must lie in (0, 1)");
            return r;
        }
        if (type == "temporal") return TemporalSplit{member(j, "cutoff", path).get<double>()};
        fail(path + ".type", "expected random or temporal");
    } catch (const json::exception& e) {
        fail(path, e.what());
    }
}

json optim_to_json(const OptimConfig& c) {
    return json{{"algorithm", to_string(c.algorithm)},
                {"step_size", c.step_size},
                {"max_iters", c.max_iters},
                {"convergence_tol", c.convergence_tol},
                {"window", c.window},
                {"seed", c.seed}};
}

OptimConfig optim_from_json(const json& j, const std::string& path) {
    OptimConfig c;
    if (j.is_null()) return c;
    if (!j.is_object()) fail(path, "expected an object");
    try {
        if (j.contains("algorithm")) c.algorithm = algorithm_from_string(j.at("algorithm").get<std::string>());
        if (j.contains("step_size")) c.step_size = j.at("step_size").get<double>();
        if (j.contains("max_iters")) c.max_iters = j.at("max_iters").get<int>();
        if (j.contains("convergence_tol")) c.convergence_tol = j.at("convergence_tol").get<double>();
        if (j.contains("window")) c.window = j.at("window").get<int>();
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    } catch (const json::exception& e) {
        fail(path, e.what());
    }
    try {
        c.validate();
    } catch (const InvalidArgument& e) {
        fail(path, e.what());
    }
    return c;
}

json fit_to_json(const FitResult& r) {
    json j;
    j["schema"] = kFitSchema;
    j["family"] = r.sparse() ? "sparse" : "exact";
    j["latent"] = r.latent;
    json inputs = json::array();
    for (InputRole role : r.inputs) inputs.push_back(to_string(role));
    j["inputs"] = std::move(inputs);
    j["columns"] = {{"time", r.columns.time}, {"lat", r.columns.lat}, {"lon", r.columns.lon}, {"value", r.columns.value}};
    j["input_normalization"] = {{"shift", vector_to_json(r.input_norm.shift)},
                                {"scale", vector_to_json(r.input_norm.scale)}};
    j["target_normalization"] = {{"shift", r.target_shift}, {"scale", r.target_scale}};
    j["transform"] = to_string(r.transform);
    j["model"] = model_to_json(r.base());
    if (const auto* s = std::get_if<SparseModel>(&r.model)) j["inducing"] = matrix_to_json(s->inducing);
    j["optimizer"] = optim_to_json(r.optimizer);
    j["objective"] = r.objective;
    j["trace"] = {{"objective", r.trace.objective_per_iter},
                  {"grad_norm", r.trace.grad_norm_per_iter},
                  {"converged", r.trace.converged}};
    j["seed"] = r.seed;
    j["data"] = {{"rows", r.data.rows}, {"hash", r.data.hash}};
    j["split"] = r.split;
    j["mc_draws"] = r.mc_draws;
    return j;
}

FitResult fit_from_json(const json& j) {
    const std::string path = "fit";
    const json& schema = member(j, "schema", path);
    if (schema != kFitSchema) fail(path + ".schema", std::string("expected \"") + kFitSchema + "\"");
    FitResult r;
    try {
        r.latent = member(j, "latent", path).get<std::string>();
        for (const json& role : member(j, "inputs", path)) r.inputs.push_back(input_role_from_string(role.get<std::string>()));
        const json& cols = member(j, "columns", path);
        r.columns.time = member(cols, "time", path + ".columns").get<std::string>();
        r.columns.lat = member(cols, "lat", path + ".columns").get<std::string>();
        r.columns.lon = member(cols, "lon", path + ".columns").get<std::string>();
        r.columns.value = member(cols, "value", path + ".columns").get<std::string>();
        const json& norm = member(j, "input_normalization", path);
        r.input_norm.shift = vector_from_json(member(norm, "shift", path + ".input_normalization"), path + ".shift");
        r.input_norm.scale = vector_from_json(member(norm, "scale", path + ".input_normalization"), path + ".scale");
        const json& tn = member(j, "target_normalization", path);
        r.target_shift = member(tn, "shift", path + ".target_normalization").get<double>();
        r.target_scale = member(tn, "scale", path + ".target_normalization").get<double>();
        r.transform = transform_from_string(member(j, "transform", path).get<std::string>());
        GpModel base = model_from_json(member(j, "model", path), path + ".model");
        base.target_transform = r.transform;
        const std::string family = member(j, "family", path).get<std::string>();
        if (family == "sparse") {
            SparseModel s;
            s.base = std::move(base);
            s.inducing = matrix_from_json(member(j, "inducing", path), path + ".inducing");
            s.validate();
            r.model = std::move(s);
        } else if (family == "exact") {
            base.validate();
            r.model = std::move(base);
        } else {
            fail(path + ".family", "expected exact or sparse");
        }
        r.optimizer = optim_from_json(member(j, "optimizer", path));
        r.objective = member(j, "objective", path).get<double>();
        const json& trace = member(j, "trace", path);
        r.trace.objective_per_iter = member(trace, "objective", path + ".trace").get<std::vector<double>>();
        r.trace.grad_norm_per_iter = member(trace, "grad_norm", path + ".trace").get<std::vector<double>>();
        r.trace.converged = member(trace, "converged", path + ".trace").get<bool>();
        r.seed = member(j, "seed", path).get<std::uint64_t>();
        const json& data = member(j, "data", path);
        r.data.rows = member(data, "rows", path + ".data").get<std::size_t>();
        r.data.hash = member(data, "hash", path + ".data").get<std::string>();
        r.split = member(j, "split", path);
        if (!r.split.is_null()) split_from_json(r.split, path + ".split");
        r.mc_draws = member(j, "mc_draws", path).get<int>();
    } catch (const json::exception& e) {
        fail(path, e.what());
    }
    if (r.input_norm.shift.size() != static_cast<Index>(r.inputs.size()) ||
        r.input_norm.scale.size() != static_cast<Index>(r.inputs.size()))
        fail(path + ".input_normalization", "length differs from inputs");
    return r;
}

void write_json(const std::string& path, const json& j) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write '" + path + "'");
    out << j.dump(2) << '\n';
}

json read_json(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open '" + path + "'");
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError(path + ": " + e.what());
    }
}

FitResult read_fit(const std::string& path) { return fit_from_json(read_json(path)); }

void write_trace_csv(const std::string& path, const TrainTrace& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write '" + path + "'");
    out << "iteration,objective,grad_norm\n" << std::setprecision(17);
    for (std::size_t i = 0; i < t.objective_per_iter.size(); ++i)
        out << i << ',' << t.objective_per_iter[i] << ',' << t.grad_norm_per_iter[i] << '\n';
}

}  // namespace nsgp
