#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "nsgp/linalg.hpp"

namespace nsgp {

using Rng = std::mt19937_64;

/// Independent generator for a named purpose derived from one run seed, so
/// adding draws to one stream never shifts another.
Rng substream(std::uint64_t seed, std::string_view name);

/// rows x cols matrix of i.i.d. standard normals.
Matrix standard_normal(Rng& rng, Index rows, Index cols);

}  // namespace nsgp
