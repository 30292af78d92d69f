#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nsgp/data.hpp"
#include "nsgp/fit_io.hpp"
#include "nsgp/metrics.hpp"
#include "nsgp/synth.hpp"

namespace nsgp {

enum class ModelFamily { exact, sparse };
enum class LatentFamily { none, fgk, mgk };

std::string to_string(ModelFamily f);
std::string to_string(LatentFamily f);
ModelFamily family_from_string(const std::string& s);
LatentFamily latent_from_string(const std::string& s);

/// Model choice for one fit. Without an explicit kernel the latent family
/// picks SE-ARD, constant * FGK or constant * MGK over all inputs. Without an
/// explicit optimizer, stationary models use L-BFGS and latent-field models Adam.
struct ModelSpec {
    ModelFamily family = ModelFamily::exact;
    LatentFamily latent = LatentFamily::none;
    TargetTransform transform = TargetTransform::none;
    std::optional<KernelSpec> kernel;
    std::optional<OptimConfig> optimizer;
    double noise_variance = 0.1;   ///< initial value, normalised target units
    int inducing = 50;             ///< sparse family only
    int mc_draws = 0;              ///< >0: Monte-Carlo predictive for matrix fields
    /// Default latent kernels only: start from a stationary SE-ARD fit (signal
    /// variance, noise and, for FGK, a constant field at its lengthscales).
    bool warm_start = true;
};

KernelSpec default_kernel(LatentFamily latent, Index dims);
OptimConfig default_optimizer(const ModelSpec& spec, std::uint64_t seed);

/// Fits on the rows of `train` after normalising inputs and targets (log
/// first under the log transform).
FitResult fit_model(const Dataset& train, const std::vector<InputRole>& roles, const ColumnMap& columns,
                    const ModelSpec& spec, std::uint64_t seed);

/// Predictions in the original target space. Under the log transform mean and
/// variance are the log-normal moments and the quantiles are exp of Gaussian
/// quantiles; otherwise quantiles are Gaussian.
struct Prediction {
    Vector mean;
    Vector variance;
    Vector median;
    std::vector<double> probabilities;
    Matrix quantiles;             ///< n x probabilities.size()
    Vector z_mean;                ///< predictive in the modelled space (log space under the log transform)
    Vector z_variance;
    Matrix z_component_means;     ///< mixture components, modelled space; empty unless Monte-Carlo
    Matrix z_component_variances;
};

inline const std::vector<double> kDefaultProbabilities{0.025, 0.5, 0.975};

/// `include_noise` adds the fitted noise variance (predicting observations).
Prediction predict(const FitResult& fit, const Matrix& x, const std::vector<double>& probs = kDefaultProbabilities,
                   bool include_noise = true);
Prediction predict(const FitResult& fit, const Dataset& d, const std::vector<double>& probs = kDefaultProbabilities,
                   bool include_noise = true);

struct Evaluation {
    double rmse = 0.0;
    double nlpd = 0.0;
    std::size_t count = 0;
    Vector squared_error;
    Vector pointwise_nlpd;
};

/// Scores every row of `test` with the noisy predictive. Under the log
/// transform NLPD is reported in the original space (Jacobian log y added)
/// unless `jacobian` is false; Monte-Carlo fits use the exact mixture density.
Evaluation evaluate(const FitResult& fit, const Dataset& test, bool jacobian = true);

// ---- benchmark suites -------------------------------------------------------

enum class BenchSuite { spatial, temporal, spatiotemporal };
std::string to_string(BenchSuite s);
BenchSuite suite_from_string(const std::string& s);

struct BenchConfig {
    BenchSuite suite = BenchSuite::spatial;
    int splits = 10;
    double train_fraction = 0.9;
    std::uint64_t seed = 0;
    int threads = 1;
    bool include_mgk = false;
    bool jacobian = true;
    SynthConfig synth;                       ///< generator for the spatial/temporal suites
    int grid_cells = 4;                      ///< spatio-temporal suite: cells per side
    int months = 12;                         ///< spatio-temporal suite: months per cell
    std::optional<Dataset> data;             ///< supplied data replaces the generator
    std::vector<InputRole> inputs;           ///< roles for supplied data
    ModelFamily family = ModelFamily::exact;
    int inducing = 50;
    double noise_variance = 0.1;
    std::optional<OptimConfig> optimizer;
    bool keep_fits = false;                  ///< retain every split's fits in BenchResult::fits
};

/// Suite defaults: spatial = 2-D piecewise synthetic, temporal = 1-D smooth
/// synthetic in log space, spatiotemporal = gridded (lat, lon, t) synthetic.
BenchConfig default_bench_config(BenchSuite suite);

struct BenchModelResult {
    std::string name;
    std::vector<double> rmse;     ///< per split
    std::vector<double> nlpd;
    std::vector<double> fit_seconds;
    MeanStderr rmse_summary;
    MeanStderr nlpd_summary;
};

struct BenchResult {
    BenchConfig config;
    std::vector<BenchModelResult> models;
    std::vector<std::string> split_descriptions;
    std::vector<FitResult> last_fits;  ///< one per model, from the final split
    std::vector<std::vector<FitResult>> fits;  ///< per split, per model; empty unless keep_fits
};

/// Dataset and model list the suite runs.
Dataset bench_dataset(const BenchConfig& c);
std::vector<std::pair<std::string, ModelSpec>> bench_models(const BenchConfig& c);

/// Splits run in `threads` workers; results are ordered by split index so the
/// output does not depend on scheduling.
BenchResult run_bench(const BenchConfig& c);

/// Deterministic table: per model mean/stderr plus per-split values (timings excluded).
nlohmann::json bench_to_json(const BenchResult& r);

/// Pearson correlation of two equally sized vectors.
double pearson(const Vector& a, const Vector& b);

}  // namespace nsgp
