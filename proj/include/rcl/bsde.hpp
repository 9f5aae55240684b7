#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rcl/aggregator.hpp"
#include "rcl/common.hpp"
#include "rcl/control.hpp"
#include "rcl/regression.hpp"
#include "rcl/sde.hpp"

namespace rcl {

// ---------------------------------------------------------------------------
// Implicit y-step
// ---------------------------------------------------------------------------

struct ImplicitStepOptions {
    double tol = 1e-12;
    int max_iter = 200;
    /// Open interval the root must lie in (the driver's y-domain).
    double y_lower = -kInf;
    double y_upper = kInf;
};

struct ImplicitStepTrace {
    int iterations = 0;
    std::vector<double> residuals;  // |g(y)| after each iteration
};

/// Root of g(y) = y - c - dt f(y). Under one-sided monotonicity with constant mu and dt mu+ < 1,
/// g is strictly increasing and the root lies between c and c + dt f(c) / (1 - dt mu+).
inline double implicit_y_step(double c, const std::function<double(double)>& f, double dt, double mu_plus,
                              const std::function<double(double)>& dfdy = nullptr,
                              const ImplicitStepOptions& opt = {}, ImplicitStepTrace* trace = nullptr) {
    mu_plus = std::max(mu_plus, 0.0);
    if (!(dt * mu_plus < 1.0)) fail(Errc::time_step_too_large, "dt * mu+ = " + fmt17(dt * mu_plus) + " >= 1");
    if (!(c > opt.y_lower && c < opt.y_upper))
        fail(Errc::domain_violation, "conditional expectation " + fmt17(c) + " lies outside the driver domain");
    const auto g = [&](double y) { return y - c - dt * f(y); };
    const double gc = g(c);
    if (!std::isfinite(gc)) fail(Errc::evaluation_error, "driver not finite at y=" + fmt17(c));
    const double scale_tol = [&](double y) { return opt.tol * std::max(1.0, std::abs(y)); }(c);
    if (std::abs(gc) <= scale_tol) {
        if (trace) trace->residuals.push_back(std::abs(gc));
        return c;
    }

    // Guaranteed bracket [lo, hi] with g(lo) < 0 < g(hi).
    const double shift = -gc / (1.0 - dt * mu_plus);
    double other = c + shift;
    const bool up = shift > 0.0;
    // Keep the far end inside the open domain by stepping towards the boundary.
    const double bound = up ? opt.y_upper : opt.y_lower;
    if (std::isfinite(bound) && (up ? other >= bound : other <= bound)) {
        double gap = 0.5 * (bound - c);
        other = bound - gap;
        for (int j = 0; j < 1100 && (up ? g(other) < 0.0 : g(other) > 0.0); ++j) {
            gap *= 0.5;
            if (bound - gap == bound) break;
            other = bound - gap;
        }
    }
    double go = g(other);
    // Expansion safeguard for drivers whose declared mu understates the true constant.
    for (int j = 0; j < 30 && (up ? go < 0.0 : go > 0.0) && std::isfinite(go); ++j) {
        double next = c + 2.0 * (other - c);
        if (std::isfinite(bound) && (up ? next >= bound : next <= bound)) next = bound - 0.5 * (bound - other);
        if (next == other) break;
        other = next;
        go = g(other);
    }
    if (!std::isfinite(go) || (up ? go < 0.0 : go > 0.0))
        fail(Errc::root_bracket_failure, "no sign change between " + fmt17(c) + " and " + fmt17(other));
    double lo = up ? c : other;
    double hi = up ? other : c;
    if (go == 0.0) return other;

    // Newton with backtracking inside the bracket; accepted iterates strictly reduce |g|.
    double y = c;
    double gy = gc;
    const auto shrink = [&](double at, double gat) {
        if (gat < 0.0)
            lo = std::max(lo, at);
        else
            hi = std::min(hi, at);
    };
    for (int it = 0; it < opt.max_iter; ++it) {
        shrink(y, gy);
        double slope;
        if (dfdy) {
            slope = 1.0 - dt * dfdy(y);
        } else {
            const double h = 1e-7 * std::max(1.0, std::abs(y));
            const double yp = gy < 0.0 ? std::min(y + h, 0.5 * (y + hi)) : std::max(y - h, 0.5 * (y + lo));
            slope = yp != y ? (g(yp) - gy) / (yp - y) : 0.0;
        }
        double target = (slope > 0.0 && std::isfinite(slope)) ? y - gy / slope : 0.5 * (lo + hi);
        if (!(target > lo && target < hi)) target = 0.5 * (lo + hi);
        double lambda = 1.0;
        double cand = y, gcand = gy;
        bool improved = false;
        for (int b = 0; b < 60; ++b) {
            cand = y + lambda * (target - y);
            if (cand == y) break;
            gcand = g(cand);
            if (!std::isfinite(gcand)) fail(Errc::evaluation_error, "driver not finite at y=" + fmt17(cand));
            if (std::abs(gcand) < std::abs(gy)) {
                improved = true;
                break;
            }
            shrink(cand, gcand);
            lambda *= 0.5;
        }
        if (!improved) return y;  // stagnation at rounding level
        y = cand;
        gy = gcand;
        if (trace) {
            trace->iterations = it + 1;
            trace->residuals.push_back(std::abs(gy));
        }
        if (std::abs(gy) <= opt.tol * std::max(1.0, std::abs(y))) return y;
    }
    return y;
}

// ---------------------------------------------------------------------------
// Backward recursion
// ---------------------------------------------------------------------------

struct BsdeOptions {
    bool store_y = true;   // keep the full M x (N+1) Y array
    bool store_z = true;   // keep the full M x N x d Z array
    bool require_audit = true;
};

/// Per-path solution. Step-major storage like PathBundle.
struct BsdeSolution {
    std::size_t n_paths = 0;
    std::size_t n_steps = 0;
    std::size_t dim_noise = 0;
    Vec y_paths;   // (N+1) * M when stored, otherwise only the first and last layers
    Vec z_paths;   // N * M * d when stored
    Vec y_start;   // Y at step 0, per path
    Vec pathwise;  // terminal value plus accumulated driver increments, per path
    double y0 = 0.0;
    double y0_stderr = 0.0;
    std::string regression_basis;
    bool stored_y = false;
    bool stored_z = false;

    double y(std::size_t path, std::size_t step) const { return y_paths[step * n_paths + path]; }
    std::span<const double> z(std::size_t path, std::size_t step) const {
        return {z_paths.data() + (step * n_paths + path) * dim_noise, dim_noise};
    }
    std::span<const double> y_layer(std::size_t step) const {
        return {y_paths.data() + step * n_paths, n_paths};
    }
};

namespace detail {

inline void check_driver_ready(const DriverSpec& spec, double dt, bool require_audit) {
    if (require_audit && !spec.audited)
        fail(Errc::condition_audit_failed, "driver '" + spec.name + "' has not passed its condition audit");
    if (!(dt * std::max(spec.constants.mu, 0.0) < 1.0))
        fail(Errc::time_step_too_large, "dt * mu+ = " + fmt17(dt * std::max(spec.constants.mu, 0.0)) + " >= 1");
}

/// Recursion on steps [0, k_end] of the bundle with terminal values eta at step k_end.
inline BsdeSolution backward_recursion(const PathBundle& bundle, const DriverSpec& spec, const ControlPolicy& policy,
                                       const RegressionConfig& reg, std::size_t k_end, std::span<const double> eta,
                                       const BsdeOptions& opt) {
    const std::size_t M = bundle.n_paths;
    const std::size_t n = bundle.dim_state;
    const std::size_t d = bundle.dim_noise;
    const std::size_t m = policy.dim();
    require(k_end <= bundle.n_steps, "terminal index beyond the bundle");
    require(eta.size() == M, "terminal values must be given per path");
    check_driver_ready(spec, bundle.dt, opt.require_audit);
    const double dt = bundle.dt;
    const double mu_plus = std::max(spec.constants.mu, 0.0);

    BsdeSolution sol;
    sol.n_paths = M;
    sol.n_steps = k_end;
    sol.dim_noise = d;
    sol.stored_y = opt.store_y;
    sol.stored_z = opt.store_z;
    const CrossSectionRegression regressor(reg, n);
    sol.regression_basis = bundle.noise_free ? "pathwise" : regressor.describe();
    if (opt.store_y) sol.y_paths.assign((k_end + 1) * M, 0.0);
    if (opt.store_z) sol.z_paths.assign(k_end * M * d, 0.0);

    Vec next(eta.begin(), eta.end());
    Vec cur(M);
    sol.pathwise = next;
    if (opt.store_y) std::copy(next.begin(), next.end(), sol.y_paths.begin() + k_end * M);

    std::vector<Vec> fitted;
    Vec weighted(M * d);
    ImplicitStepOptions step_opt;
    step_opt.y_lower = spec.y_lower;
    step_opt.y_upper = spec.y_upper;

    for (std::size_t k = k_end; k-- > 0;) {
        const double t = bundle.times[k];
        const auto xs = bundle.layer(k);
        const auto dB = bundle.increment_layer(k);
        if (bundle.noise_free) {
            fitted.assign(1 + d, Vec(M, 0.0));
            fitted[0] = next;
        } else {
            // Z uses the centred product (Y - E[Y|X]) dB, which has the same conditional mean.
            std::vector<Vec> level, slope;
            regressor.fit_predict(xs, {std::span<const double>(next)}, level, k);
            // For drivers on an open y-domain, project polynomial overshoot back into the range of Y,
            // which contains E[Y|X]. Unrestricted drivers keep the mean-preserving least-squares fit.
            if (std::isfinite(spec.y_lower) || std::isfinite(spec.y_upper)) {
                const auto [ymin, ymax] = std::minmax_element(next.begin(), next.end());
                for (auto& c : level[0]) c = std::clamp(c, *ymin, *ymax);
            }
            std::vector<std::span<const double>> targets;
            for (std::size_t j = 0; j < d; ++j) {
                for (std::size_t i = 0; i < M; ++i) weighted[j * M + i] = (next[i] - level[0][i]) * dB[i * d + j];
                targets.emplace_back(weighted.data() + j * M, M);
            }
            regressor.fit_predict(xs, targets, slope, k);
            fitted.assign(1 + d, Vec());
            fitted[0] = std::move(level[0]);
            for (std::size_t j = 0; j < d; ++j) {
                fitted[1 + j] = std::move(slope[j]);
                for (auto& v : fitted[1 + j]) v /= dt;
            }
        }

        parallel_for(M, [&](std::size_t lo, std::size_t hi) {
            Vec v(m), z(d);
            for (std::size_t i = lo; i < hi; ++i) {
                std::span<const double> x(xs.data() + i * n, n);
                policy.control_at(t, x, v);
                for (std::size_t j = 0; j < d; ++j) z[j] = fitted[1 + j][i];
                const double c = fitted[0][i];
                const auto fy = [&](double y) { return spec.f(t, x, y, z, v); };
                std::function<double(double)> dfy;
                if (spec.dfdy) dfy = [&](double y) { return spec.dfdy(t, x, y, z, v); };
                try {
                    cur[i] = implicit_y_step(c, fy, dt, mu_plus, dfy, step_opt);
                } catch (const Error& e) {
                    fail(e.code(), std::string(e.what()) + " (path " + std::to_string(i) + ", step " +
                                       std::to_string(k) + ")");
                }
                if (!std::isfinite(cur[i]))
                    fail(Errc::regression_error, "non-finite Y at step " + std::to_string(k));
                sol.pathwise[i] += cur[i] - c;
                if (opt.store_z)
                    for (std::size_t j = 0; j < d; ++j) sol.z_paths[(k * M + i) * d + j] = z[j];
            }
        });
        if (opt.store_y) std::copy(cur.begin(), cur.end(), sol.y_paths.begin() + k * M);
        std::swap(cur, next);
    }
    sol.y_start = next;
    sol.y0 = mean_stderr(sol.y_start).mean;
    sol.y0_stderr = mean_stderr(sol.pathwise).stderr_;
    if (!std::isfinite(sol.y0)) fail(Errc::regression_error, "non-finite y0");
    return sol;
}

}  // namespace detail

/// Solves Y_t = h(X_T) + int f ds - int Z dB on the bundle by least-squares Monte Carlo.
inline BsdeSolution solve_bsde(const PathBundle& bundle, const DriverSpec& spec, const ControlPolicy& policy,
                               const RegressionConfig& reg = {}, const BsdeOptions& opt = {}) {
    require(static_cast<bool>(spec.h), "driver spec has no terminal map");
    const std::size_t M = bundle.n_paths;
    Vec terminal(M);
    for (std::size_t i = 0; i < M; ++i) terminal[i] = spec.h(bundle.state(i, bundle.n_steps));
    return detail::backward_recursion(bundle, spec, policy, reg, bundle.n_steps, terminal, opt);
}

struct SemigroupValue {
    Vec y;             // per path at the bundle start
    double mean = 0.0;
    double stderr_ = 0.0;
};

/// G_{t,t1}[eta]: the recursion on [t, t1] (steps 0..k1 of the bundle) with terminal values eta.
inline SemigroupValue backward_semigroup(const PathBundle& bundle, const DriverSpec& spec, const ControlPolicy& policy,
                                         std::size_t k1, std::span<const double> eta, const RegressionConfig& reg = {},
                                         bool require_audit = true) {
    SemigroupValue out;
    if (k1 == 0) {
        out.y.assign(eta.begin(), eta.end());
        const auto ms = mean_stderr(out.y);
        out.mean = ms.mean;
        out.stderr_ = ms.stderr_;
        return out;
    }
    BsdeOptions opt;
    opt.store_y = false;
    opt.store_z = false;
    opt.require_audit = require_audit;
    BsdeSolution sol = detail::backward_recursion(bundle, spec, policy, reg, k1, eta, opt);
    out.y = std::move(sol.y_start);
    out.mean = sol.y0;
    out.stderr_ = sol.y0_stderr;
    return out;
}

// ---------------------------------------------------------------------------
// Comparison harness
// ---------------------------------------------------------------------------

struct ComparisonOptions {
    std::vector<std::size_t> indices;  // empty: {0, N/3, 2N/3}
    double tol_factor = 5.0;
    double required_fraction = 0.99;
    std::size_t premise_points = 17;  // grid points per axis of the premise audit
};

struct ComparisonResult {
    bool ordered = false;
    double worst_violation = 0.0;  // max over checked (path, index) of Y - Y'
    double tolerance = 0.0;
    double min_fraction = 1.0;     // worst fraction of ordered paths over indices
    std::vector<std::size_t> indices;
};

/// Checks f <= f' on the audit box and h <= h' on its x-section; throws PremiseViolated otherwise.
inline void check_comparison_premise(const DriverSpec& a, const DriverSpec& b, const AuditBox& box,
                                     std::size_t points) {
    const std::size_t n = box.x_lower.size();
    const std::size_t m = box.v_lower.size();
    const auto axis = [&](double lo, double hi) { return lo == hi ? Vec{lo} : linspace(lo, hi, points); };
    std::vector<Vec> axes;
    axes.push_back(axis(box.t_lower, box.t_upper));
    axes.push_back(axis(box.y_lower, box.y_upper));
    for (std::size_t j = 0; j < n; ++j) axes.push_back(axis(box.x_lower[j], box.x_upper[j]));
    for (std::size_t j = 0; j < m; ++j) axes.push_back(axis(box.v_lower[j], box.v_upper[j]));
    std::size_t total = 1;
    for (auto& ax : axes) total *= ax.size();
    Vec x(n), v(m), z(box.z_lower);
    for (std::size_t flat = 0; flat < total; ++flat) {
        std::size_t rem = flat;
        Vec pt(axes.size());
        for (std::size_t j = axes.size(); j-- > 0;) {
            pt[j] = axes[j][rem % axes[j].size()];
            rem /= axes[j].size();
        }
        const double t = pt[0], y = pt[1];
        for (std::size_t j = 0; j < n; ++j) x[j] = pt[2 + j];
        for (std::size_t j = 0; j < m; ++j) v[j] = pt[2 + n + j];
        const double fa = a.f(t, x, y, z, v), fb = b.f(t, x, y, z, v);
        if (fa > fb) fail(Errc::premise_violated, "f > f' at t=" + fmt17(t) + ", y=" + fmt17(y));
        if (a.h && b.h && a.h(x) > b.h(x)) fail(Errc::premise_violated, "h > h' at the audit grid");
    }
}

inline ComparisonResult comparison_check(const PathBundle& bundle, const DriverSpec& a, const DriverSpec& b,
                                         const ControlPolicy& policy, const RegressionConfig& reg,
                                         const AuditBox& premise_box, const ComparisonOptions& opt = {}) {
    check_comparison_premise(a, b, premise_box, opt.premise_points);
    BsdeOptions bo;
    bo.store_z = false;
    const BsdeSolution sa = solve_bsde(bundle, a, policy, reg, bo);
    const BsdeSolution sb = solve_bsde(bundle, b, policy, reg, bo);
    ComparisonResult res;
    res.indices = opt.indices;
    const std::size_t N = bundle.n_steps;
    if (res.indices.empty()) res.indices = {0, N / 3, 2 * N / 3};
    res.tolerance = opt.tol_factor * std::sqrt(sa.y0_stderr * sa.y0_stderr + sb.y0_stderr * sb.y0_stderr);
    res.worst_violation = -kInf;
    const std::size_t M = bundle.n_paths;
    for (std::size_t k : res.indices) {
        require(k <= N, "comparison index beyond the bundle");
        std::size_t ok = 0;
        for (std::size_t i = 0; i < M; ++i) {
            const double gap = sa.y(i, k) - sb.y(i, k);
            res.worst_violation = std::max(res.worst_violation, gap);
            if (gap <= res.tolerance) ++ok;
        }
        res.min_fraction = std::min(res.min_fraction, static_cast<double>(ok) / static_cast<double>(M));
    }
    res.ordered = res.min_fraction >= opt.required_fraction;
    return res;
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

/// CSV with columns path_id, step, t, x..., y, z... for the first max_paths paths.
inline void write_bsde_csv(const BsdeSolution& sol, const PathBundle& bundle, const std::string& path,
                           std::size_t max_paths = 100) {
    require(sol.stored_y, "Y paths were not stored");
    std::ofstream os(path);
    if (!os) fail(Errc::io_error, "cannot open " + path);
    os << "path_id,step,t";
    for (std::size_t j = 0; j < bundle.dim_state; ++j) os << ",x" << j;
    os << ",y";
    for (std::size_t j = 0; j < bundle.dim_noise; ++j) os << ",z" << j;
    os << '\n';
    const std::size_t P = std::min(max_paths, sol.n_paths);
    for (std::size_t i = 0; i < P; ++i) {
        for (std::size_t k = 0; k <= sol.n_steps; ++k) {
            os << i << ',' << k << ',' << fmt17(bundle.times[k]);
            for (double x : bundle.state(i, k)) os << ',' << fmt17(x);
            os << ',' << fmt17(sol.y(i, k));
            for (std::size_t j = 0; j < bundle.dim_noise; ++j) {
                const double zv = (sol.stored_z && k < sol.n_steps) ? sol.z(i, k)[j] : 0.0;
                os << ',' << fmt17(zv);
            }
            os << '\n';
        }
    }
    if (!os) fail(Errc::io_error, "failed writing " + path);
}

}  // namespace rcl
