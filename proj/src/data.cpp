#include "nsgp/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "nsgp/errors.hpp"
#include "nsgp/rng.hpp"
#include "overloaded.hpp"

namespace nsgp {

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '"')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '"' || s.back() == '\r'))
        s.remove_suffix(1);
    return s;
}

std::vector<std::string_view> split_fields(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = line.find(',', start);
        out.push_back(trim(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

// Empty and NaN/Inf cells count as non-finite, not as parse failures.
bool parse_number(std::string_view s, double& out) {
    if (s.empty()) {
        out = std::numeric_limits<double>::quiet_NaN();
        return true;
    }
    if (s.front() == '+') s.remove_prefix(1);
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && ptr == s.data() + s.size();
}

}  // namespace

InputRole input_role_from_string(const std::string& s) {
    if (s == "time") return InputRole::time;
    if (s == "lat") return InputRole::lat;
    if (s == "lon") return InputRole::lon;
    throw ConfigError("unknown input column role '" + s + "' (expected time, lat or lon)");
}

std::string to_string(InputRole r) {
    switch (r) {
        case InputRole::time: return "time";
        case InputRole::lat: return "lat";
        case InputRole::lon: return "lon";
    }
    return "";
}

Matrix input_matrix(const Dataset& d, const std::vector<InputRole>& roles) {
    Matrix x(d.size(), static_cast<Index>(roles.size()));
    for (std::size_t j = 0; j < roles.size(); ++j) {
        const Vector& col = roles[j] == InputRole::time ? d.time : roles[j] == InputRole::lat ? d.lat : d.lon;
        x.col(static_cast<Index>(j)) = col;
    }
    return x;
}

Dataset parse_csv(const std::string& text, const ColumnMap& columns, const CsvOptions& options) {
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    std::vector<std::string_view> header;
    std::string header_line;
    while (std::getline(in, line)) {
        ++line_no;
        if (!trim(line).empty()) {
            header_line = line;
            break;
        }
    }
    if (header_line.empty()) throw EmptyDataset("file has no header row");
    header = split_fields(header_line);

    const std::string* names[4] = {&columns.time, &columns.lat, &columns.lon, &columns.value};
    const InputRole roles[3] = {InputRole::time, InputRole::lat, InputRole::lon};
    int index[4];
    for (int c = 0; c < 4; ++c) {
        bool required = true;
        if (!options.required.empty())
            required = c < 3 && std::find(options.required.begin(), options.required.end(), roles[c]) !=
                                    options.required.end();
        auto it = std::find(header.begin(), header.end(), std::string_view(*names[c]));
        if (it == header.end() && required) throw ParseError("missing column '" + *names[c] + "' in header");
        index[c] = it == header.end() ? -1 : static_cast<int>(it - header.begin());
    }

    std::vector<double> cols[4];
    std::size_t rejected = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const auto fields = split_fields(line);
        double v[4];
        bool finite = true;
        for (int c = 0; c < 4; ++c) {
            if (index[c] < 0) {
                v[c] = 0.0;
                continue;
            }
            if (static_cast<std::size_t>(index[c]) >= fields.size())
                throw ParseError("line " + std::to_string(line_no) + ": too few fields");
            if (!parse_number(fields[static_cast<std::size_t>(index[c])], v[c]))
                throw ParseError("line " + std::to_string(line_no) + ": column '" + *names[c] +
                                 "' is not a number: '" + std::string(fields[static_cast<std::size_t>(index[c])]) +
                                 "'");
            finite = finite && std::isfinite(v[c]);
        }
        if (!finite) {
            ++rejected;
            continue;
        }
        for (int c = 0; c < 4; ++c) cols[c].push_back(v[c]);
    }
    if (cols[3].empty() && !options.allow_empty)
        throw EmptyDataset("no usable rows (" + std::to_string(rejected) + " rejected for non-finite values)");

    auto to_vec = [](const std::vector<double>& v) {
        return Vector(Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size())));
    };
    Dataset d;
    d.time = to_vec(cols[0]);
    d.lat = to_vec(cols[1]);
    d.lon = to_vec(cols[2]);
    d.value = to_vec(cols[3]);
    d.rejected = rejected;
    return d;
}

Dataset load_csv(const std::string& path, const ColumnMap& columns, const CsvOptions& options) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_csv(buf.str(), columns, options);
}

void write_csv(const std::string& path, const Dataset& d, const ColumnMap& columns) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write '" + path + "'");
    out << columns.time << ',' << columns.lat << ',' << columns.lon << ',' << columns.value << '\n';
    out << std::setprecision(17);
    for (Index i = 0; i < d.size(); ++i)
        out << d.time(i) << ',' << d.lat(i) << ',' << d.lon(i) << ',' << d.value(i) << '\n';
}

Dataset select_rows(const Dataset& d, const std::vector<bool>& keep) {
    if (keep.size() != static_cast<std::size_t>(d.size())) throw DimensionMismatch("row mask has the wrong length");
    const Index n = static_cast<Index>(std::count(keep.begin(), keep.end(), true));
    Dataset out;
    out.time.resize(n);
    out.lat.resize(n);
    out.lon.resize(n);
    out.value.resize(n);
    Index r = 0;
    for (Index i = 0; i < d.size(); ++i) {
        if (!keep[static_cast<std::size_t>(i)]) continue;
        out.time(r) = d.time(i);
        out.lat(r) = d.lat(i);
        out.lon(r) = d.lon(i);
        out.value(r) = d.value(i);
        if (!d.split.empty()) out.split.push_back(d.split[static_cast<std::size_t>(i)]);
        if (!d.regime.empty()) out.regime.push_back(d.regime[static_cast<std::size_t>(i)]);
        ++r;
    }
    return out;
}

Dataset split_part(const Dataset& d, int label) {
    if (d.split.size() != static_cast<std::size_t>(d.size())) throw InvalidArgument("dataset has no split labels");
    std::vector<bool> keep(d.split.size());
    for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = d.split[i] == label;
    return select_rows(d, keep);
}

std::string describe(const SplitSpec& s) {
    std::ostringstream os;
    std::visit(detail::Overloaded{
                   [&](const RandomSplit& r) { os << "random(fraction=" << r.fraction << ", seed=" << r.seed << ")"; },
                   [&](const TemporalSplit& t) { os << "temporal(cutoff=" << t.cutoff << ")"; },
               },
               s);
    return os.str();
}

Dataset split(const Dataset& d, const SplitSpec& s) {
    if (d.size() == 0) throw EmptyDataset("cannot split an empty dataset");
    Dataset out = d;
    out.split.assign(static_cast<std::size_t>(d.size()), 0);
    std::visit(detail::Overloaded{
                   [&](const RandomSplit& r) {
                       if (!(r.fraction > 0.0 && r.fraction < 1.0))
                           throw InvalidArgument("random split fraction must lie in (0, 1)");
                       Rng rng = substream(r.seed, "split");
                       std::uniform_real_distribution<double> u(0.0, 1.0);
                       for (auto& label : out.split) label = u(rng) < r.fraction ? 0 : 1;
                   },
                   [&](const TemporalSplit& t) {
                       for (Index i = 0; i < d.size(); ++i)
                           out.split[static_cast<std::size_t>(i)] = d.time(i) < t.cutoff ? 0 : 1;
                   },
               },
               s);
    const auto train = std::count(out.split.begin(), out.split.end(), 0);
    if (train == 0 || train == static_cast<std::ptrdiff_t>(out.split.size()))
        throw DegenerateSplit(describe(s) + " leaves " + (train == 0 ? "no training rows" : "no test rows"));
    return out;
}

Matrix Normalization::forward(const Matrix& x) const {
    if (x.cols() != shift.size()) throw DimensionMismatch("normalization has a different column count");
    return (x.rowwise() - shift.transpose()).array().rowwise() / scale.transpose().array();
}

Matrix Normalization::inverse(const Matrix& z) const {
    if (z.cols() != shift.size()) throw DimensionMismatch("normalization has a different column count");
    Matrix x = z.array().rowwise() * scale.transpose().array();
    x.rowwise() += shift.transpose();
    return x;
}

Normalization fit_normalization(const Matrix& x) {
    if (x.rows() == 0) throw EmptyDataset("cannot normalise zero rows");
    Normalization n;
    n.shift = x.colwise().mean().transpose();
    n.scale.resize(x.cols());
    for (Index j = 0; j < x.cols(); ++j) {
        const double var = (x.col(j).array() - n.shift(j)).square().mean();
        n.scale(j) = var > 0.0 ? std::sqrt(var) : 1.0;
    }
    return n;
}

Normalization identity_normalization(Index cols) {
    return Normalization{Vector::Zero(cols), Vector::Ones(cols)};
}

KMeansResult kmeans(const Matrix& points, int k, std::uint64_t seed, int max_iters) {
    const Index n = points.rows();
    if (k < 1) throw InvalidArgument("k must be at least 1");
    {
        std::set<std::vector<double>> distinct;
        std::vector<double> key(static_cast<std::size_t>(points.cols()));
        for (Index i = 0; i < n; ++i) {
            for (Index j = 0; j < points.cols(); ++j) key[static_cast<std::size_t>(j)] = points(i, j);
            distinct.insert(key);
        }
        if (static_cast<std::size_t>(k) > distinct.size())
            throw KTooLarge("k=" + std::to_string(k) + " exceeds the " + std::to_string(distinct.size()) +
                            " distinct points");
    }

    Rng rng = substream(seed, "kmeans");
    std::uniform_real_distribution<double> u(0.0, 1.0);
    KMeansResult out;
    out.centroids.resize(k, points.cols());
    // k-means++ seeding: each new centre is drawn with probability
    // proportional to its squared distance from the nearest existing one.
    Vector d2 = Vector::Constant(n, std::numeric_limits<double>::infinity());
    Index first = std::min<Index>(n - 1, static_cast<Index>(u(rng) * static_cast<double>(n)));
    out.centroids.row(0) = points.row(first);
    for (int c = 1; c < k; ++c) {
        for (Index i = 0; i < n; ++i) d2(i) = std::min(d2(i), (points.row(i) - out.centroids.row(c - 1)).squaredNorm());
        const double total = d2.sum();
        Index pick = n - 1;
        double target = u(rng) * total;
        for (Index i = 0; i < n; ++i) {
            if (d2(i) <= 0.0) continue;
            target -= d2(i);
            if (target <= 0.0) {
                pick = i;
                break;
            }
        }
        // Guard against rounding landing on an already-chosen point.
        if (d2(pick) <= 0.0)
            for (Index i = 0; i < n; ++i)
                if (d2(i) > 0.0) pick = i;
        out.centroids.row(c) = points.row(pick);
    }

    out.labels.assign(static_cast<std::size_t>(n), -1);
    for (int it = 0; it < max_iters; ++it) {
        bool changed = false;
        double ss = 0.0;
        for (Index i = 0; i < n; ++i) {
            int best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (int c = 0; c < k; ++c) {
                const double dist = (points.row(i) - out.centroids.row(c)).squaredNorm();
                if (dist < best_d) best_d = dist, best = c;
            }
            if (out.labels[static_cast<std::size_t>(i)] != best) changed = true;
            out.labels[static_cast<std::size_t>(i)] = best;
            ss += best_d;
        }
        ++out.iterations;
        if (!changed && it > 0) {
            out.objective_trace.push_back(ss);
            break;
        }
        Matrix sums = Matrix::Zero(k, points.cols());
        std::vector<Index> counts(static_cast<std::size_t>(k), 0);
        for (Index i = 0; i < n; ++i) {
            const int c = out.labels[static_cast<std::size_t>(i)];
            sums.row(c) += points.row(i);
            ++counts[static_cast<std::size_t>(c)];
        }
        for (int c = 0; c < k; ++c)
            if (counts[static_cast<std::size_t>(c)] > 0)
                out.centroids.row(c) = sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
        double after = 0.0;
        for (Index i = 0; i < n; ++i)
            after += (points.row(i) - out.centroids.row(out.labels[static_cast<std::size_t>(i)])).squaredNorm();
        out.objective_trace.push_back(after);
    }
    return out;
}

RegimeLabels kmeans_regimes(const Dataset& d, int k, std::uint64_t seed) {
    if (d.size() == 0) throw EmptyDataset("no rows to cluster");
    std::map<std::pair<double, double>, Index> cell_index;
    std::vector<std::pair<double, double>> cells;
    for (Index i = 0; i < d.size(); ++i) {
        auto key = std::make_pair(d.lat(i), d.lon(i));
        if (cell_index.emplace(key, static_cast<Index>(cells.size())).second) cells.push_back(key);
    }
    const Index nc = static_cast<Index>(cells.size());
    if (k > nc) throw KTooLarge("k=" + std::to_string(k) + " exceeds the " + std::to_string(nc) + " distinct cells");

    Matrix sums = Matrix::Zero(nc, 12);
    Matrix counts = Matrix::Zero(nc, 12);
    for (Index i = 0; i < d.size(); ++i) {
        const Index c = cell_index[{d.lat(i), d.lon(i)}];
        const auto month = static_cast<Index>(((static_cast<long long>(std::floor(d.time(i))) % 12) + 12) % 12);
        sums(c, month) += d.value(i);
        counts(c, month) += 1.0;
    }
    RegimeLabels out;
    out.cells.resize(nc, 2);
    out.climatology.resize(nc, 12);
    for (Index c = 0; c < nc; ++c) {
        out.cells(c, 0) = cells[static_cast<std::size_t>(c)].first;
        out.cells(c, 1) = cells[static_cast<std::size_t>(c)].second;
        const double overall = sums.row(c).sum() / counts.row(c).sum();
        for (Index m = 0; m < 12; ++m)
            out.climatology(c, m) = counts(c, m) > 0.0 ? sums(c, m) / counts(c, m) : overall;
    }
    out.fit = kmeans(out.climatology, k, seed);
    out.labels = out.fit.labels;
    return out;
}

std::vector<int> regime_per_row(const Dataset& d, const RegimeLabels& r) {
    std::map<std::pair<double, double>, int> lookup;
    for (Index c = 0; c < r.cells.rows(); ++c) lookup[{r.cells(c, 0), r.cells(c, 1)}] = r.labels[static_cast<std::size_t>(c)];
    std::vector<int> out(static_cast<std::size_t>(d.size()), -1);
    for (Index i = 0; i < d.size(); ++i) {
        auto it = lookup.find({d.lat(i), d.lon(i)});
        if (it != lookup.end()) out[static_cast<std::size_t>(i)] = it->second;
    }
    return out;
}

}  // namespace nsgp
