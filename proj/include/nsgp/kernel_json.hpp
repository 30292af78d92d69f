#pragma once

#include <string>

#include <json.hpp>

#include "nsgp/kernels.hpp"

namespace nsgp {

/// JSON composition tree:
///   {"type": "se_ard", "variance": 1, "lengthscales": [..], "active_dims": [..], "fixed": ["variance"]}
///   {"type": "periodic", "variance": 1, "lengthscale": 1, "period": 12, "active_dims": [2]}
///   {"type": "constant", "variance": 1}
///   {"type": "fgk" | "mgk", "field": 0, "active_dims": [0, 1]}
///   {"type": "sum" | "product", "left": {...}, "right": {...}}
nlohmann::json kernel_to_json(const KernelSpec& k);

/// Throws ConfigError naming the offending path (e.g. "kernel.left.lengthscales").
KernelSpec kernel_from_json(const nlohmann::json& j, const std::string& path = "kernel");

}  // namespace nsgp
