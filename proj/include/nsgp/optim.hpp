#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nsgp/linalg.hpp"

namespace nsgp {

enum class Algorithm { adam, lbfgs };

struct OptimConfig {
    Algorithm algorithm = Algorithm::adam;
    double step_size = 0.01;
    int max_iters = 2000;
    double convergence_tol = 1e-6;  ///< relative objective change over `window` iterations
    int window = 10;
    std::uint64_t seed = 0;

    void validate() const;
};

std::string to_string(Algorithm a);
Algorithm algorithm_from_string(const std::string& s);

struct TrainTrace {
    std::vector<double> objective_per_iter;
    std::vector<double> grad_norm_per_iter;
    double wall_time = 0.0;  ///< seconds
    bool converged = false;
};

/// Value to minimise at theta; fills *grad when grad is non-null.
using Objective = std::function<double(const Vector& theta, Vector* grad)>;

/// Optional in-place projection applied to the iterate after each step.
using Projection = std::function<void(Vector& theta)>;

struct OptimResult {
    Vector params;       ///< best parameters seen
    double objective = 0.0;
    TrainTrace trace;
};

/// Analytic gradient of `f` at theta; throws NonFiniteGradient on NaN/Inf.
Vector gradient(const Objective& f, const Vector& theta);

/// Minimises f from theta0. Stops at max_iters or once the relative change
/// of the objective over the last `window` iterations falls below the
/// tolerance. Returns the best iterate seen, never worse than theta0.
/// Throws DivergedObjective on a non-finite objective value.
OptimResult minimize(const Objective& f, const Vector& theta0, const OptimConfig& config,
                     const Projection& project = {});

/// Fixed linear change of variables theta = theta0 + P u with P block
/// diagonal: listed square blocks at their offsets, identity elsewhere.
struct Preconditioner {
    std::vector<std::pair<Index, Matrix>> blocks;

    [[nodiscard]] Vector apply(const Vector& u) const;            ///< P u
    [[nodiscard]] Vector apply_transpose(const Vector& g) const;  ///< P^T g
    [[nodiscard]] bool identity_at(Index i) const;
};

/// Minimises f(theta0 + P u) from u = 0 and reports the iterate in theta
/// coordinates. The projection acts on theta and may only move coordinates
/// outside the blocks of P.
OptimResult minimize(const Objective& f, const Vector& theta0, const Preconditioner& p, const OptimConfig& config,
                     const Projection& project = {});

struct GradCheckEntry {
    Index index = 0;
    std::string name;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    bool passed = false;
    std::vector<GradCheckEntry> worst;  ///< sorted by decreasing rel_error

    [[nodiscard]] std::string summary() const;
};

/// Central differences with step h on every coordinate.
GradCheckReport grad_check(const Objective& f, const Vector& theta, double h = 1e-5, double rel_tol = 1e-4,
                           const std::vector<std::string>& names = {}, std::size_t report = 5);

}  // namespace nsgp
