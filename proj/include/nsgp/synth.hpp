#pragma once

#include <cstdint>
#include <string>

#include "nsgp/data.hpp"
#include "nsgp/linalg.hpp"

namespace nsgp {

enum class LengthscaleProfile { piecewise, smooth };

LengthscaleProfile profile_from_string(const std::string& s);
std::string to_string(LengthscaleProfile p);

/// Synthetic non-stationary regression problem. Inputs lie in [0, 10]^dims;
/// the true lengthscale depends on the first coordinate only and is shared
/// by every dimension.
struct SynthConfig {
    int n_points = 200;
    int dims = 1;                     ///< 1 (time column) or 2 (lat, lon columns)
    LengthscaleProfile profile = LengthscaleProfile::piecewise;
    double short_lengthscale = 0.3;
    double long_lengthscale = 3.0;
    double boundary = 5.0;            ///< first-coordinate switch point
    double smooth_width = 0.5;        ///< transition width of the smooth profile
    double signal_variance = 1.0;
    double noise = 0.01;              ///< observation noise variance
    std::uint64_t seed = 0;
    Matrix inputs;                    ///< optional fixed inputs (overrides n_points/dims)

    void validate() const;
};

struct SynthResult {
    Matrix x;                  ///< n x dims
    Vector f;                  ///< latent function values
    Vector y;                  ///< noisy observations
    Matrix true_lengthscale;   ///< n x dims
    Dataset dataset;
};

/// True lengthscale profile at a first-coordinate value.
double true_lengthscale(const SynthConfig& c, double x0);

/// f ~ GP(0, sigma^2 * FGK(true lengthscales)), y = f + N(0, noise).
/// Duplicate inputs share one latent value.
SynthResult synth_nonstationary(const SynthConfig& config);

}  // namespace nsgp
