#include "nsgp/synth.hpp"

#include <cmath>
#include <random>

#include "nsgp/errors.hpp"
#include "nsgp/kernels.hpp"
#include "nsgp/latent_fields.hpp"
#include "nsgp/rng.hpp"

namespace nsgp {

LengthscaleProfile profile_from_string(const std::string& s) {
    if (s == "piecewise") return LengthscaleProfile::piecewise;
    if (s == "smooth") return LengthscaleProfile::smooth;
    throw ConfigError("unknown lengthscale profile '" + s + "' (expected piecewise or smooth)");
}

std::string to_string(LengthscaleProfile p) { return p == LengthscaleProfile::piecewise ? "piecewise" : "smooth"; }

void SynthConfig::validate() const {
    if (inputs.size() == 0) {
        if (n_points < 10) throw InvalidArgument("synthetic benchmark needs at least 10 points");
        if (dims != 1 && dims != 2) throw InvalidArgument("synthetic benchmark supports 1 or 2 input dimensions");
    } else if (inputs.cols() != 1 && inputs.cols() != 2) {
        throw InvalidArgument("synthetic inputs must have 1 or 2 columns");
    }
    if (!(short_lengthscale > 0.0) || !(long_lengthscale > 0.0))
        throw NonPositiveLengthscale("synthetic lengthscales must be positive");
    if (!(signal_variance > 0.0)) throw InvalidArgument("signal variance must be positive");
    if (!(noise >= 0.0)) throw InvalidArgument("noise variance must be non-negative");
    if (profile == LengthscaleProfile::smooth && !(smooth_width > 0.0))
        throw InvalidArgument("smooth profile width must be positive");
}

double true_lengthscale(const SynthConfig& c, double x0) {
    if (c.profile == LengthscaleProfile::piecewise) return x0 < c.boundary ? c.short_lengthscale : c.long_lengthscale;
    const double t = 1.0 / (1.0 + std::exp(-(x0 - c.boundary) / c.smooth_width));
    return std::exp((1.0 - t) * std::log(c.short_lengthscale) + t * std::log(c.long_lengthscale));
}

SynthResult synth_nonstationary(const SynthConfig& config) {
    config.validate();
    SynthResult out;
    if (config.inputs.size() > 0) {
        out.x = config.inputs;
    } else {
        Rng rng = substream(config.seed, "synth_inputs");
        std::uniform_real_distribution<double> u(0.0, 10.0);
        out.x.resize(config.n_points, config.dims);
        for (Index i = 0; i < out.x.rows(); ++i)
            for (Index d = 0; d < out.x.cols(); ++d) out.x(i, d) = u(rng);
    }
    const Index n = out.x.rows();
    const Index dims = out.x.cols();

    const UniqueRows uniq = unique_rows(out.x);
    std::vector<int> active(static_cast<std::size_t>(dims));
    for (Index d = 0; d < dims; ++d) active[static_cast<std::size_t>(d)] = static_cast<int>(d);
    const KernelSpec k = KernelSpec::constant(config.signal_variance) * KernelSpec::fgk(0, active);

    LatentContext ctx(1);
    ctx[0].log_lengthscales.resize(uniq.rows.rows(), dims);
    for (Index i = 0; i < uniq.rows.rows(); ++i)
        ctx[0].log_lengthscales.row(i).setConstant(std::log(true_lengthscale(config, uniq.rows(i, 0))));

    const CholeskyFactor kf = cholesky_psd(gram(k, uniq.rows, ctx).values, kGramJitter);
    Rng frng = substream(config.seed, "synth_latent");
    const Vector f_unique = kf.lower * standard_normal(frng, uniq.rows.rows(), 1);

    Rng nrng = substream(config.seed, "synth_noise");
    const Vector eps = standard_normal(nrng, n, 1);
    out.f.resize(n);
    out.y.resize(n);
    out.true_lengthscale.resize(n, dims);
    for (Index i = 0; i < n; ++i) {
        out.f(i) = f_unique(uniq.index[static_cast<std::size_t>(i)]);
        out.y(i) = out.f(i) + std::sqrt(config.noise) * eps(i);
        out.true_lengthscale.row(i).setConstant(true_lengthscale(config, out.x(i, 0)));
    }

    Dataset& d = out.dataset;
    d.time = Vector::Zero(n);
    d.lat = Vector::Zero(n);
    d.lon = Vector::Zero(n);
    if (dims == 1) {
        d.time = out.x.col(0);
    } else {
        d.lat = out.x.col(0);
        d.lon = out.x.col(1);
    }
    d.value = out.y;
    return out;
}

}  // namespace nsgp
