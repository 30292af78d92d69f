#include "nsgp/optim.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <ceres/ceres.h>

#include "nsgp/errors.hpp"

namespace nsgp {

void OptimConfig::validate() const {
    if (!(step_size > 0.0)) throw InvalidArgument("optimizer step_size must be positive");
    if (max_iters < 1) throw InvalidArgument("optimizer max_iters must be at least 1");
    if (!(convergence_tol >= 0.0)) throw InvalidArgument("optimizer convergence_tol must be non-negative");
    if (window < 1) throw InvalidArgument("optimizer window must be at least 1");
}

std::string to_string(Algorithm a) { return a == Algorithm::adam ? "adam" : "lbfgs"; }

Algorithm algorithm_from_string(const std::string& s) {
    if (s == "adam") return Algorithm::adam;
    if (s == "lbfgs") return Algorithm::lbfgs;
    throw ConfigError("unknown optimizer algorithm '" + s + "' (expected adam or lbfgs)");
}

Vector gradient(const Objective& f, const Vector& theta) {
    Vector g(theta.size());
    f(theta, &g);
    if (!g.allFinite()) throw NonFiniteGradient("gradient has non-finite entries");
    return g;
}

namespace {

using Clock = std::chrono::steady_clock;

bool window_converged(const std::vector<double>& values, int window, double tol) {
    const std::size_t w = static_cast<std::size_t>(window);
    if (values.size() <= w) return false;
    const double now = values.back();
    const double then = values[values.size() - 1 - w];
    return std::abs(then - now) <= tol * std::max(1.0, std::abs(now));
}

struct Best {
    Vector params;
    double value = std::numeric_limits<double>::infinity();

    void offer(const Vector& p, double v) {
        if (std::isfinite(v) && v < value) {
            value = v;
            params = p;
        }
    }
};

OptimResult run_adam(const Objective& f, const Vector& theta0, const OptimConfig& cfg, const Projection& project) {
    constexpr double beta1 = 0.9;
    constexpr double beta2 = 0.999;
    constexpr double eps = 1e-8;

    OptimResult out;
    Best best;
    Vector theta = theta0;
    if (project) project(theta);
    Vector m = Vector::Zero(theta.size());
    Vector v = Vector::Zero(theta.size());
    Vector g(theta.size());
    double b1 = 1.0, b2 = 1.0;

    for (int it = 0; it < cfg.max_iters; ++it) {
        const double value = f(theta, &g);
        if (!std::isfinite(value))
            throw DivergedObjective("objective became non-finite at iteration " + std::to_string(it));
        if (!g.allFinite()) throw NonFiniteGradient("gradient became non-finite at iteration " + std::to_string(it));
        best.offer(theta, value);
        out.trace.objective_per_iter.push_back(value);
        out.trace.grad_norm_per_iter.push_back(g.norm());
        if (window_converged(out.trace.objective_per_iter, cfg.window, cfg.convergence_tol)) {
            out.trace.converged = true;
            break;
        }
        b1 *= beta1;
        b2 *= beta2;
        m = beta1 * m + (1.0 - beta1) * g;
        v = beta2 * v + (1.0 - beta2) * g.cwiseAbs2();
        const Vector mhat = m / (1.0 - b1);
        const Vector vhat = v / (1.0 - b2);
        theta.array() -= cfg.step_size * mhat.array() / (vhat.array().sqrt() + eps);
        if (project) project(theta);
    }
    // The final step is only kept if it improves on what has been seen.
    if (!out.trace.converged) {
        const double value = f(theta, nullptr);
        if (std::isfinite(value)) best.offer(theta, value);
    }
    out.params = best.params;
    out.objective = best.value;
    return out;
}

class CeresObjective final : public ceres::FirstOrderFunction {
public:
    CeresObjective(const Objective& f, Index n, Best& best) : f_(f), n_(n), best_(best), g_(n) {}

    bool Evaluate(const double* parameters, double* cost, double* gradient) const override {
        const Eigen::Map<const Vector> theta(parameters, n_);
        double value;
        try {
            value = f_(theta, gradient ? &g_ : nullptr);
        } catch (const NotPositiveDefinite&) {
            return false;
        }
        if (!std::isfinite(value)) return false;
        if (gradient) {
            if (!g_.allFinite()) return false;
            std::copy(g_.data(), g_.data() + n_, gradient);
        }
        *cost = value;
        best_.offer(theta, value);
        return true;
    }

    int NumParameters() const override { return static_cast<int>(n_); }

private:
    const Objective& f_;
    Index n_;
    Best& best_;
    mutable Vector g_;
};

class TraceCallback final : public ceres::IterationCallback {
public:
    TraceCallback(TrainTrace& trace, const OptimConfig& cfg) : trace_(trace), cfg_(cfg) {}

    ceres::CallbackReturnType operator()(const ceres::IterationSummary& s) override {
        trace_.objective_per_iter.push_back(s.cost);
        trace_.grad_norm_per_iter.push_back(s.gradient_norm);
        if (window_converged(trace_.objective_per_iter, cfg_.window, cfg_.convergence_tol)) {
            trace_.converged = true;
            return ceres::SOLVER_TERMINATE_SUCCESSFULLY;
        }
        return ceres::SOLVER_CONTINUE;
    }

private:
    TrainTrace& trace_;
    const OptimConfig& cfg_;
};

OptimResult run_lbfgs(const Objective& f, const Vector& theta0, const OptimConfig& cfg, const Projection& project) {
    OptimResult out;
    Best best;
    Vector theta = theta0;
    if (project) project(theta);

    ceres::GradientProblemSolver::Options opts;
    opts.line_search_direction_type = ceres::LBFGS;
    opts.max_num_iterations = cfg.max_iters;
    opts.function_tolerance = 0.0;
    opts.gradient_tolerance = 1e-12;
    opts.parameter_tolerance = 1e-14;
    opts.logging_type = ceres::SILENT;
    opts.minimizer_progress_to_stdout = false;
    TraceCallback callback(out.trace, cfg);
    opts.callbacks.push_back(&callback);

    // GradientProblem takes ownership of the function.
    ceres::GradientProblem problem(new CeresObjective(f, theta.size(), best));
    ceres::GradientProblemSolver::Summary summary;
    ceres::Solve(opts, problem, theta.data(), &summary);
    if (summary.termination_type == ceres::CONVERGENCE) out.trace.converged = true;

    if (!std::isfinite(best.value)) throw DivergedObjective("no finite objective value was reached");
    if (project) {
        Vector p = best.params;
        project(p);
        if (p != best.params) {
            best.value = f(p, nullptr);
            best.params = p;
        }
    }
    out.params = best.params;
    out.objective = best.value;
    return out;
}

}  // namespace

OptimResult minimize(const Objective& f, const Vector& theta0, const OptimConfig& config, const Projection& project) {
    config.validate();
    Vector start = theta0;
    if (project) project(start);
    const double initial = f(start, nullptr);
    if (!std::isfinite(initial)) throw DivergedObjective("objective is non-finite at the initial parameters");

    const auto t0 = Clock::now();
    OptimResult out = config.algorithm == Algorithm::adam ? run_adam(f, start, config, project)
                                                          : run_lbfgs(f, start, config, project);
    if (!(out.objective <= initial)) {
        out.params = start;
        out.objective = initial;
    }
    out.trace.wall_time = std::chrono::duration<double>(Clock::now() - t0).count();
    return out;
}

Vector Preconditioner::apply(const Vector& u) const {
    Vector out = u;
    for (const auto& [at, b] : blocks) out.segment(at, b.rows()) = b * u.segment(at, b.cols());
    return out;
}

Vector Preconditioner::apply_transpose(const Vector& g) const {
    Vector out = g;
    for (const auto& [at, b] : blocks) out.segment(at, b.cols()) = b.transpose() * g.segment(at, b.rows());
    return out;
}

bool Preconditioner::identity_at(Index i) const {
    for (const auto& [at, b] : blocks)
        if (i >= at && i < at + b.rows()) return false;
    return true;
}

OptimResult minimize(const Objective& f, const Vector& theta0, const Preconditioner& p, const OptimConfig& config,
                     const Projection& project) {
    for (const auto& [at, b] : p.blocks)
        if (b.rows() != b.cols() || at < 0 || at + b.rows() > theta0.size())
            throw DimensionMismatch("preconditioner block does not fit the parameter vector");
    Vector start = theta0;
    if (project) project(start);
    const Objective g = [&](const Vector& u, Vector* grad) {
        Vector theta = start + p.apply(u);
        if (!grad) return f(theta, nullptr);
        Vector gt(theta.size());
        const double v = f(theta, &gt);
        *grad = p.apply_transpose(gt);
        return v;
    };
    Projection pu;
    if (project) {
        pu = [&](Vector& u) {
            const Vector theta = start + p.apply(u);
            Vector moved = theta;
            project(moved);
            for (Index i = 0; i < u.size(); ++i) {
                if (moved(i) == theta(i)) continue;
                if (!p.identity_at(i)) throw InvalidArgument("projection moved a preconditioned coordinate");
                u(i) += moved(i) - theta(i);
            }
        };
    }
    OptimResult r = minimize(g, Vector::Zero(theta0.size()), config, pu);
    r.params = start + p.apply(r.params);
    return r;
}

std::string GradCheckReport::summary() const {
    std::ostringstream os;
    os << (passed ? "passed" : "FAILED") << ", max rel error " << max_rel_error;
    for (const auto& e : worst) {
        os << "\n  [" << e.index << "]";
        if (!e.name.empty()) os << ' ' << e.name;
        os << " analytic=" << e.analytic << " numeric=" << e.numeric << " rel=" << e.rel_error;
    }
    return os.str();
}

GradCheckReport grad_check(const Objective& f, const Vector& theta, double h, double rel_tol,
                           const std::vector<std::string>& names, std::size_t report) {
    if (!(h > 0.0)) throw InvalidArgument("grad_check step must be positive");
    Vector analytic(theta.size());
    f(theta, &analytic);

    std::vector<GradCheckEntry> entries;
    entries.reserve(static_cast<std::size_t>(theta.size()));
    Vector p = theta;
    for (Index i = 0; i < theta.size(); ++i) {
        p(i) = theta(i) + h;
        const double up = f(p, nullptr);
        p(i) = theta(i) - h;
        const double down = f(p, nullptr);
        p(i) = theta(i);
        GradCheckEntry e;
        e.index = i;
        if (static_cast<std::size_t>(i) < names.size()) e.name = names[static_cast<std::size_t>(i)];
        e.analytic = analytic(i);
        e.numeric = (up - down) / (2.0 * h);
        const double denom = std::max({std::abs(e.analytic), std::abs(e.numeric), 1e-8});
        e.rel_error = std::abs(e.analytic - e.numeric) / denom;
        if (!std::isfinite(e.rel_error)) e.rel_error = std::numeric_limits<double>::infinity();
        entries.push_back(std::move(e));
    }
    std::stable_sort(entries.begin(), entries.end(),
                     [](const GradCheckEntry& a, const GradCheckEntry& b) { return a.rel_error > b.rel_error; });
    GradCheckReport out;
    out.max_rel_error = entries.empty() ? 0.0 : entries.front().rel_error;
    out.passed = out.max_rel_error <= rel_tol;
    entries.resize(std::min(entries.size(), report));
    out.worst = std::move(entries);
    return out;
}

}  // namespace nsgp
