#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "nsgp/data.hpp"
#include "nsgp/gp_exact.hpp"
#include "nsgp/gp_sparse.hpp"
#include "nsgp/latent_fields.hpp"
#include "nsgp/optim.hpp"

namespace nsgp {

inline constexpr const char* kFitSchema = "nsgp.fit/1";

/// Row count plus an FNV-1a hash over the raw bytes of the training inputs and targets.
struct DataFingerprint {
    std::size_t rows = 0;
    std::string hash;
};
DataFingerprint fingerprint(const Matrix& x, const Vector& y);

/// Everything needed to predict from a fitted model. Training inputs and
/// targets are stored normalised; `input_norm`/`target_*` map back.
struct FitResult {
    std::variant<GpModel, SparseModel> model;
    std::string latent = "none";            ///< none | fgk | mgk
    std::vector<InputRole> inputs;
    ColumnMap columns;
    Normalization input_norm;
    double target_shift = 0.0;
    double target_scale = 1.0;
    TargetTransform transform = TargetTransform::none;
    OptimConfig optimizer;
    TrainTrace trace;
    double objective = 0.0;
    std::uint64_t seed = 0;
    DataFingerprint data;
    nlohmann::json split;                   ///< split spec used for training, null if none
    int mc_draws = 0;                       ///< >0: Monte-Carlo predictive for matrix fields

    [[nodiscard]] const GpModel& base() const;
    [[nodiscard]] bool sparse() const { return std::holds_alternative<SparseModel>(model); }
};

nlohmann::json field_to_json(const LatentField& f);
LatentField field_from_json(const nlohmann::json& j, const std::string& path);

nlohmann::json split_to_json(const SplitSpec& s);
/// {"type": "random", "fraction", "seed"} or {"type": "temporal", "cutoff"}.
SplitSpec split_from_json(const nlohmann::json& j, const std::string& path = "split");

nlohmann::json optim_to_json(const OptimConfig& c);
/// Missing keys keep the defaults; unknown algorithm names throw ConfigError.
OptimConfig optim_from_json(const nlohmann::json& j, const std::string& path = "optimizer");

/// Deterministic content (no wall-clock values).
nlohmann::json fit_to_json(const FitResult& r);
FitResult fit_from_json(const nlohmann::json& j);

void write_json(const std::string& path, const nlohmann::json& j);
nlohmann::json read_json(const std::string& path);

FitResult read_fit(const std::string& path);

/// iteration,objective,grad_norm
void write_trace_csv(const std::string& path, const TrainTrace& t);

}  // namespace nsgp
