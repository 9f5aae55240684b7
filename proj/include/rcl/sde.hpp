#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rcl/common.hpp"
#include "rcl/control.hpp"
#include "rcl/rng.hpp"

namespace rcl {

using DriftFn = std::function<void(double, std::span<const double>, std::span<const double>, std::span<double>)>;
/// Fills an n x d row-major matrix.
using DiffusionFn = DriftFn;
/// Optional replacement for the plain Euler-Maruyama update. Receives (t, dt, x, v, dB, out)
/// and returns true when a state clamp was applied.
using StepFn = std::function<bool(double, double, std::span<const double>, std::span<const double>,
                                  std::span<const double>, std::span<double>)>;

/// Box used for sample-based audits of the coefficients; paths are never clamped to it.
struct StateBox {
    Vec lower;
    Vec upper;

    bool contains(std::span<const double> x) const {
        for (std::size_t j = 0; j < x.size(); ++j)
            if (!(x[j] >= lower[j] && x[j] <= upper[j])) return false;
        return true;
    }
};

/// Controlled state equation dX = b(t,X,v) dt + sigma(t,X,v) dB on [t0, T].
struct ControlledSDE {
    std::size_t dim_state = 1;
    std::size_t dim_noise = 1;
    DriftFn drift;
    DiffusionFn diffusion;
    double horizon = 1.0;
    ControlSet controls;
    StateBox domain;
    StepFn step;  // empty: Euler-Maruyama
};

/// Seeded ensemble of simulated paths on a uniform time grid. Storage is step-major:
/// entry (path i, step k) of the states lives at (k * n_paths + i) * dim_state.
struct PathBundle {
    std::size_t n_paths = 0;
    std::size_t n_steps = 0;
    std::size_t dim_state = 0;
    std::size_t dim_noise = 0;
    std::uint64_t seed = 0;
    double t0 = 0.0;
    double dt = 0.0;
    Vec times;
    Vec states;
    Vec increments;
    bool noise_free = false;
    std::uint64_t clamp_events = 0;

    std::span<const double> state(std::size_t path, std::size_t step) const {
        return {states.data() + (step * n_paths + path) * dim_state, dim_state};
    }
    std::span<const double> layer(std::size_t step) const {
        return {states.data() + step * n_paths * dim_state, n_paths * dim_state};
    }
    std::span<const double> increment(std::size_t path, std::size_t step) const {
        return {increments.data() + (step * n_paths + path) * dim_noise, dim_noise};
    }
    std::span<const double> increment_layer(std::size_t step) const {
        return {increments.data() + step * n_paths * dim_noise, n_paths * dim_noise};
    }
    /// True when every path starts from the same point.
    bool deterministic_start() const {
        auto x0 = state(0, 0);
        for (std::size_t i = 1; i < n_paths; ++i) {
            auto xi = state(i, 0);
            for (std::size_t j = 0; j < dim_state; ++j)
                if (xi[j] != x0[j]) return false;
        }
        return true;
    }
};

struct SimulationRequest {
    double t0 = 0.0;
    std::size_t steps = 100;
    std::size_t paths = 1000;
    std::uint64_t seed = 0;
    /// Overrides the horizon of the SDE when set (simulate on [t0, t_end]).
    double t_end = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

inline void check_control(const ControlledSDE& sde, std::span<const double> v, std::size_t step) {
    if (!sde.controls.empty() && !sde.controls.contains(v))
        fail(Errc::invalid_control, "policy emitted a control outside U at step " + std::to_string(step));
}

}  // namespace detail

/// Euler-Maruyama simulation from per-path initial states (size paths * dim_state).
inline PathBundle simulate_paths(const ControlledSDE& sde, const ControlPolicy& policy,
                                 std::span<const double> initial_states, const SimulationRequest& req) {
    const double t_end = std::isnan(req.t_end) ? sde.horizon : req.t_end;
    require(req.t0 < t_end, "simulation start must precede the horizon");
    require(req.steps >= 1 && req.paths >= 1, "simulation needs at least one step and one path");
    require(initial_states.size() == req.paths * sde.dim_state, "initial state array has the wrong size");
    if (!sde.controls.empty())
        require(policy.dim() == sde.controls.dim(), "policy dimension differs from the control set");

    const std::size_t n = sde.dim_state;
    const std::size_t d = sde.dim_noise;
    const std::size_t m = policy.dim();
    const std::size_t M = req.paths;
    const std::size_t N = req.steps;

    PathBundle b;
    b.n_paths = M;
    b.n_steps = N;
    b.dim_state = n;
    b.dim_noise = d;
    b.seed = req.seed;
    b.t0 = req.t0;
    b.dt = (t_end - req.t0) / static_cast<double>(N);
    b.times.resize(N + 1);
    for (std::size_t k = 0; k <= N; ++k)
        b.times[k] = (k == N) ? t_end : req.t0 + b.dt * static_cast<double>(k);
    b.states.resize((N + 1) * M * n);
    b.increments.resize(N * M * d);
    std::copy(initial_states.begin(), initial_states.end(), b.states.begin());

    if (!policy.state_dependent()) {
        Vec v(m);
        for (std::size_t k = 0; k < N; ++k) {
            policy.control_at(b.times[k], {}, v);
            detail::check_control(sde, v, k);
        }
    }

    const double sqdt = std::sqrt(b.dt);
    const NormalStream normals(req.seed);
    std::vector<std::uint64_t> clamps_per_path(M, 0);
    std::vector<char> any_noise(M, 0);

    for (std::size_t k = 0; k < N; ++k) {
        const double t = b.times[k];
        parallel_for(M, [&](std::size_t lo, std::size_t hi) {
            Vec drift(n), diff(n * d), v(m), z(d);
            for (std::size_t i = lo; i < hi; ++i) {
                const double* x = b.states.data() + (k * M + i) * n;
                double* xn = b.states.data() + ((k + 1) * M + i) * n;
                double* dB = b.increments.data() + (k * M + i) * d;
                std::span<const double> xs(x, n);
                policy.control_at(t, xs, v);
                if (policy.state_dependent()) detail::check_control(sde, v, k);
                normals.fill(i, static_cast<std::uint32_t>(k), std::span<double>(z));
                for (std::size_t j = 0; j < d; ++j) dB[j] = sqdt * z[j];
                sde.diffusion(t, xs, v, diff);
                for (double s : diff)
                    if (s != 0.0) any_noise[i] = 1;
                if (sde.step) {
                    if (sde.step(t, b.dt, xs, v, std::span<const double>(dB, d), std::span<double>(xn, n)))
                        ++clamps_per_path[i];
                } else {
                    sde.drift(t, xs, v, drift);
                    for (std::size_t r = 0; r < n; ++r) {
                        double acc = x[r] + drift[r] * b.dt;
                        for (std::size_t c = 0; c < d; ++c) acc += diff[r * d + c] * dB[c];
                        xn[r] = acc;
                    }
                }
                for (std::size_t r = 0; r < n; ++r)
                    if (!std::isfinite(xn[r]))
                        fail(Errc::diverged_path, "non-finite state on path " + std::to_string(i) + " at step " +
                                                      std::to_string(k));
            }
        });
    }

    b.noise_free = true;
    for (std::size_t i = 0; i < M; ++i) {
        b.clamp_events += clamps_per_path[i];
        if (any_noise[i]) b.noise_free = false;
    }
    return b;
}

/// Simulation from a common deterministic initial state.
inline PathBundle simulate_paths(const ControlledSDE& sde, const ControlPolicy& policy,
                                 std::span<const double> x0, std::size_t steps, std::size_t paths,
                                 std::uint64_t seed, double t0 = 0.0) {
    require(x0.size() == sde.dim_state, "initial state has the wrong dimension");
    Vec init(paths * sde.dim_state);
    for (std::size_t i = 0; i < paths; ++i) std::copy(x0.begin(), x0.end(), init.begin() + i * sde.dim_state);
    SimulationRequest req;
    req.t0 = t0;
    req.steps = steps;
    req.paths = paths;
    req.seed = seed;
    return simulate_paths(sde, policy, init, req);
}

// ---------------------------------------------------------------------------
// Stability diagnostics
// ---------------------------------------------------------------------------

struct FlowConfig {
    double t0 = 0.0;
    std::size_t steps = 250;
    std::size_t paths = 10000;
    std::uint64_t seed = 1;
};

struct FlowEstimate {
    double ratio = 0.0;
    double numerator = 0.0;    // sup_k mean |X_k - X'_k|^2
    double denominator = 0.0;  // |x0 - x0'|^2 + mean integral |v - v'|^2
};

/// Coupled simulation (shared Brownian increments) of two initial states / policies; returns
/// the sup-in-time mean squared gap divided by the squared input gap.
inline FlowEstimate estimate_flow_lipschitz(const ControlledSDE& sde, const ControlPolicy& policy_a,
                                            const ControlPolicy& policy_b, std::span<const double> x0_a,
                                            std::span<const double> x0_b, const FlowConfig& cfg) {
    const PathBundle a = simulate_paths(sde, policy_a, x0_a, cfg.steps, cfg.paths, cfg.seed, cfg.t0);
    const PathBundle b = simulate_paths(sde, policy_b, x0_b, cfg.steps, cfg.paths, cfg.seed, cfg.t0);
    const std::size_t n = sde.dim_state;
    const std::size_t m = policy_a.dim();
    const std::size_t M = cfg.paths;

    double control_gap = 0.0;
    {
        Vec va(m), vb(m);
        for (std::size_t i = 0; i < M; ++i) {
            for (std::size_t k = 0; k < a.n_steps; ++k) {
                policy_a.control_at(a.times[k], a.state(i, k), va);
                policy_b.control_at(b.times[k], b.state(i, k), vb);
                double s = 0.0;
                for (std::size_t j = 0; j < m; ++j) s += (va[j] - vb[j]) * (va[j] - vb[j]);
                control_gap += s * a.dt;
            }
        }
        control_gap /= static_cast<double>(M);
    }
    double init_gap = 0.0;
    for (std::size_t j = 0; j < n; ++j) init_gap += (x0_a[j] - x0_b[j]) * (x0_a[j] - x0_b[j]);

    FlowEstimate est;
    est.denominator = init_gap + control_gap;
    if (!(est.denominator > 0.0)) fail(Errc::degenerate_comparison, "identical inputs give a zero denominator");
    for (std::size_t k = 0; k <= a.n_steps; ++k) {
        double s = 0.0;
        for (std::size_t i = 0; i < M; ++i) {
            auto xa = a.state(i, k);
            auto xb = b.state(i, k);
            for (std::size_t j = 0; j < n; ++j) s += (xa[j] - xb[j]) * (xa[j] - xb[j]);
        }
        est.numerator = std::max(est.numerator, s / static_cast<double>(M));
    }
    est.ratio = est.numerator / est.denominator;
    if (!std::isfinite(est.ratio)) fail(Errc::diverged, "flow Lipschitz ratio is not finite");
    return est;
}

struct MomentReport {
    double sup_moment = 0.0;
    double half_sample_moment = 0.0;
    bool bound_ok = false;
};

/// Estimates E[sup_s |X_s|^{2q}] from pathwise maxima. The estimate on the first half of the
/// paths is compared with the full estimate; a doubling signals a heavy-tail instability.
inline MomentReport moment_report(const PathBundle& bundle, int q, int max_moment = 4) {
    require(q >= 1, "moment order q must be at least 1");
    require(2 * q <= max_moment, "2q exceeds the configured maximum moment");
    const std::size_t M = bundle.n_paths;
    Vec sup_pow(M, 0.0);
    for (std::size_t i = 0; i < M; ++i) {
        double best = 0.0;
        for (std::size_t k = 0; k <= bundle.n_steps; ++k) best = std::max(best, norm2(bundle.state(i, k)));
        sup_pow[i] = std::pow(best, 2.0 * q);
    }
    MomentReport r;
    const std::size_t half = std::max<std::size_t>(1, M / 2);
    double s_half = 0.0;
    double s_full = 0.0;
    for (std::size_t i = 0; i < M; ++i) {
        if (i < half) s_half += sup_pow[i];
        s_full += sup_pow[i];
    }
    r.half_sample_moment = s_half / static_cast<double>(half);
    r.sup_moment = s_full / static_cast<double>(M);
    if (!std::isfinite(r.sup_moment)) fail(Errc::unstable_moment, "moment estimate is not finite");
    if (M >= 2 && r.sup_moment >= 2.0 * r.half_sample_moment && r.sup_moment > 0.0)
        fail(Errc::unstable_moment, "moment estimate doubled when the sample size doubled");
    r.bound_ok = true;
    return r;
}

// ---------------------------------------------------------------------------
// Coefficient audit (Lipschitz in (x, v), uniformly in t)
// ---------------------------------------------------------------------------

struct SdeAuditReport {
    double lipschitz_hat = 0.0;
    bool finite = true;
    std::size_t violations = 0;
    std::size_t samples = 0;
};

/// Sample-based check of |b(t,x,v)-b(t,x',v')| + |s(t,x,v)-s(t,x',v')| <= L(|x-x'|+|v-v'|) over the
/// declared state box and control set, using a deterministic Halton point set.
inline SdeAuditReport audit_lipschitz(const ControlledSDE& sde, double declared_L, std::size_t samples = 4096,
                                      double t0 = 0.0) {
    const std::size_t n = sde.dim_state;
    const std::size_t d = sde.dim_noise;
    const std::size_t m = sde.controls.dim();
    require(sde.domain.lower.size() == n, "SDE audit needs a declared state box");
    const std::size_t dim = 1 + 2 * n + 2 * m;
    Vec u(dim), x(n), xp(n), v(m), vp(m), ba(n), bb(n), sa(n * d), sb(n * d);
    SdeAuditReport rep;
    rep.samples = samples;
    for (std::size_t s = 0; s < samples; ++s) {
        halton_point(s, u);
        const double t = t0 + u[0] * (sde.horizon - t0);
        const bool near = (s % 2) == 1;
        for (std::size_t j = 0; j < n; ++j) {
            const double w = sde.domain.upper[j] - sde.domain.lower[j];
            x[j] = sde.domain.lower[j] + u[1 + j] * w;
            xp[j] = near ? std::clamp(x[j] + (u[1 + n + j] - 0.5) * 1e-3 * w, sde.domain.lower[j], sde.domain.upper[j])
                         : sde.domain.lower[j] + u[1 + n + j] * w;
        }
        for (std::size_t j = 0; j < m; ++j) {
            const double w = sde.controls.upper[j] - sde.controls.lower[j];
            v[j] = sde.controls.lower[j] + u[1 + 2 * n + j] * w;
            vp[j] = near ? std::clamp(v[j] + (u[1 + 2 * n + m + j] - 0.5) * 1e-3 * w, sde.controls.lower[j],
                                      sde.controls.upper[j])
                         : sde.controls.lower[j] + u[1 + 2 * n + m + j] * w;
        }
        sde.drift(t, x, v, ba);
        sde.drift(t, xp, vp, bb);
        sde.diffusion(t, x, v, sa);
        sde.diffusion(t, xp, vp, sb);
        for (double e : ba) rep.finite = rep.finite && std::isfinite(e);
        for (double e : sa) rep.finite = rep.finite && std::isfinite(e);
        const double denom = dist2(x, xp) + dist2(v, vp);
        if (denom <= 0.0) continue;
        const double q = (dist2(ba, bb) + dist2(sa, sb)) / denom;
        rep.lipschitz_hat = std::max(rep.lipschitz_hat, q);
        if (q > declared_L * (1.0 + 1e-9) + 1e-12) ++rep.violations;
    }
    if (!rep.finite) fail(Errc::evaluation_error, "SDE coefficients are not finite on the declared box");
    return rep;
}

// ---------------------------------------------------------------------------
// Binary cache ("RCLB1")
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void put_le(std::ostream& os, T value) {
    static_assert(sizeof(T) == 8);
    auto bits = std::bit_cast<std::uint64_t>(value);
    unsigned char bytes[8];
    for (int b = 0; b < 8; ++b) bytes[b] = static_cast<unsigned char>(bits >> (8 * b));
    os.write(reinterpret_cast<const char*>(bytes), 8);
}

template <class T>
T get_le(std::istream& is) {
    unsigned char bytes[8];
    if (!is.read(reinterpret_cast<char*>(bytes), 8)) fail(Errc::io_error, "truncated path cache");
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= std::uint64_t{bytes[b]} << (8 * b);
    return std::bit_cast<T>(bits);
}

inline constexpr char kBundleMagic[5] = {'R', 'C', 'L', 'B', '1'};

}  // namespace detail

/// Layout: magic "RCLB1", u64 header (M, N, n, d, seed, noise_free, clamp_events),
/// f64 (t0, dt), then f64 arrays: times, states, increments (all little-endian).
inline void write_bundle(const PathBundle& b, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) fail(Errc::io_error, "cannot open " + path);
    os.write(detail::kBundleMagic, 5);
    for (std::uint64_t h : {std::uint64_t(b.n_paths), std::uint64_t(b.n_steps), std::uint64_t(b.dim_state),
                            std::uint64_t(b.dim_noise), b.seed, std::uint64_t(b.noise_free), b.clamp_events})
        detail::put_le(os, h);
    detail::put_le(os, b.t0);
    detail::put_le(os, b.dt);
    for (double v : b.times) detail::put_le(os, v);
    for (double v : b.states) detail::put_le(os, v);
    for (double v : b.increments) detail::put_le(os, v);
    if (!os) fail(Errc::io_error, "failed writing " + path);
}

inline PathBundle read_bundle(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(Errc::io_error, "cannot open " + path);
    char magic[5];
    if (!is.read(magic, 5) || std::memcmp(magic, detail::kBundleMagic, 5) != 0)
        fail(Errc::io_error, path + " is not a path cache");
    PathBundle b;
    b.n_paths = detail::get_le<std::uint64_t>(is);
    b.n_steps = detail::get_le<std::uint64_t>(is);
    b.dim_state = detail::get_le<std::uint64_t>(is);
    b.dim_noise = detail::get_le<std::uint64_t>(is);
    b.seed = detail::get_le<std::uint64_t>(is);
    b.noise_free = detail::get_le<std::uint64_t>(is) != 0;
    b.clamp_events = detail::get_le<std::uint64_t>(is);
    b.t0 = detail::get_le<double>(is);
    b.dt = detail::get_le<double>(is);
    const auto read_array = [&](Vec& v, std::size_t count) {
        v.resize(count);
        for (auto& e : v) e = detail::get_le<double>(is);
    };
    read_array(b.times, b.n_steps + 1);
    read_array(b.states, (b.n_steps + 1) * b.n_paths * b.dim_state);
    read_array(b.increments, b.n_steps * b.n_paths * b.dim_noise);
    return b;
}

}  // namespace rcl
