#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "nsgp/linalg.hpp"

namespace nsgp {

/// CSV header names for each role.
struct ColumnMap {
    std::string time = "time";
    std::string lat = "lat";
    std::string lon = "lon";
    std::string value = "value";
};

/// Gridded observations in column form: time in months since epoch,
/// lat/lon in degrees, value in the source unit (e.g. mm/day).
struct Dataset {
    Vector time;
    Vector lat;
    Vector lon;
    Vector value;
    std::size_t rejected = 0;     ///< rows dropped for non-finite entries
    std::vector<int> split;       ///< per row: 0 train, 1 test; empty if unsplit
    std::vector<int> regime;      ///< per row cluster id; empty if unlabelled

    [[nodiscard]] Index size() const { return value.size(); }
};

enum class InputRole { time, lat, lon };
InputRole input_role_from_string(const std::string& s);
std::string to_string(InputRole r);

/// Inputs matrix with one column per role, in the given order.
Matrix input_matrix(const Dataset& d, const std::vector<InputRole>& roles);

struct CsvOptions {
    bool allow_empty = false;          ///< header-only input yields zero rows instead of EmptyDataset
    std::vector<InputRole> required;   ///< when non-empty: only these inputs are required, the value
                                       ///< column is optional, and absent columns read as 0
};

/// Rows with non-finite mapped values are dropped and counted.
/// Throws ParseError (with line number or missing column) and EmptyDataset.
Dataset load_csv(const std::string& path, const ColumnMap& columns = {}, const CsvOptions& options = {});
Dataset parse_csv(const std::string& text, const ColumnMap& columns = {}, const CsvOptions& options = {});
void write_csv(const std::string& path, const Dataset& d, const ColumnMap& columns = {});

/// Rows whose index satisfies keep[i].
Dataset select_rows(const Dataset& d, const std::vector<bool>& keep);
/// Train (label 0) or test (label 1) part of a split dataset.
Dataset split_part(const Dataset& d, int label);

// ---- splits ----------------------------------------------------------------

struct RandomSplit {
    double fraction = 0.9;  ///< probability a row is used for training
    std::uint64_t seed = 0;
};
struct TemporalSplit {
    double cutoff = 0.0;  ///< train iff time < cutoff
};
using SplitSpec = std::variant<RandomSplit, TemporalSplit>;

std::string describe(const SplitSpec& s);

/// Assigns train/test labels. Throws DegenerateSplit if either side is empty.
Dataset split(const Dataset& d, const SplitSpec& s);

// ---- normalisation ---------------------------------------------------------

/// Per-column affine map z = (x - shift) / scale.
struct Normalization {
    Vector shift;
    Vector scale;

    [[nodiscard]] Matrix forward(const Matrix& x) const;
    [[nodiscard]] Matrix inverse(const Matrix& z) const;
};

/// Zero-mean, unit-variance per column; constant columns get scale 1.
Normalization fit_normalization(const Matrix& x);
Normalization identity_normalization(Index cols);

// ---- clustering -----------------------------------------------------------

struct KMeansResult {
    Matrix centroids;
    std::vector<int> labels;
    std::vector<double> objective_trace;  ///< within-cluster SS after each iteration
    int iterations = 0;
};

/// k-means++ seeding then Lloyd iterations until the assignment stops
/// changing or max_iters. Throws KTooLarge when k exceeds the distinct points.
KMeansResult kmeans(const Matrix& points, int k, std::uint64_t seed, int max_iters = 100);

struct RegimeLabels {
    Matrix cells;            ///< C x 2 (lat, lon)
    Matrix climatology;      ///< C x 12 mean seasonal cycle
    std::vector<int> labels; ///< per cell
    KMeansResult fit;
};

/// Clusters spatial cells on their 12-month mean seasonal cycle
/// (month = floor(time) mod 12).
RegimeLabels kmeans_regimes(const Dataset& d, int k, std::uint64_t seed);

/// Per-row regime id from a cell labelling (-1 for unseen cells).
std::vector<int> regime_per_row(const Dataset& d, const RegimeLabels& r);

}  // namespace nsgp
