#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "rcl/aggregator.hpp"
#include "rcl/common.hpp"
#include "rcl/control.hpp"
#include "rcl/sde.hpp"

namespace rcl {

// ---------------------------------------------------------------------------
// Grids
// ---------------------------------------------------------------------------

struct Axis {
    double lower = 0.0;
    double upper = 1.0;
    std::size_t nodes = 3;

    double dx() const { return (upper - lower) / static_cast<double>(nodes - 1); }
    double point(std::size_t i) const {
        return i + 1 == nodes ? upper : lower + dx() * static_cast<double>(i);
    }
};

enum class Boundary { dirichlet, extrapolate };

inline const char* boundary_name(Boundary b) { return b == Boundary::dirichlet ? "dirichlet" : "extrapolate"; }

/// Uniform space-time lattice on a box; nodes are flattened row-major (last axis fastest).
struct SpaceTimeGrid {
    std::vector<Axis> axes;
    double t0 = 0.0;
    double horizon = 1.0;
    std::size_t time_steps = 100;
    Boundary boundary = Boundary::dirichlet;

    std::size_t dim() const { return axes.size(); }
    double dt() const { return (horizon - t0) / static_cast<double>(time_steps); }
    double time(std::size_t k) const {
        return k == time_steps ? horizon : t0 + dt() * static_cast<double>(k);
    }
    std::size_t node_count() const {
        std::size_t c = 1;
        for (const auto& a : axes) c *= a.nodes;
        return c;
    }
    std::size_t stride(std::size_t j) const {
        std::size_t s = 1;
        for (std::size_t i = j + 1; i < axes.size(); ++i) s *= axes[i].nodes;
        return s;
    }
    std::size_t index_along(std::size_t node, std::size_t j) const { return (node / stride(j)) % axes[j].nodes; }
    void coordinates(std::size_t node, std::span<double> x) const {
        for (std::size_t j = 0; j < axes.size(); ++j) x[j] = axes[j].point(index_along(node, j));
    }
    bool on_boundary(std::size_t node) const {
        for (std::size_t j = 0; j < axes.size(); ++j) {
            const std::size_t i = index_along(node, j);
            if (i == 0 || i + 1 == axes[j].nodes) return true;
        }
        return false;
    }
    /// Nodes at least `margin` (fraction of the width) away from every face.
    std::vector<char> trust_region(double margin = 0.2) const {
        std::vector<char> mask(node_count(), 1);
        Vec x(dim());
        for (std::size_t node = 0; node < mask.size(); ++node) {
            coordinates(node, x);
            for (std::size_t j = 0; j < dim(); ++j) {
                const double w = axes[j].upper - axes[j].lower;
                const double eps = 1e-12 * w;
                if (x[j] < axes[j].lower + margin * w - eps || x[j] > axes[j].upper - margin * w + eps) mask[node] = 0;
            }
        }
        return mask;
    }
};

/// u(t, x) on the lattice together with the maximizing control index per node.
struct ValueGrid {
    static constexpr std::uint32_t kNoControl = std::numeric_limits<std::uint32_t>::max();

    SpaceTimeGrid grid;
    ControlGrid controls;
    Vec values;                        // (N_t + 1) layers of node_count() values
    std::vector<std::uint32_t> argmax;  // N_t layers; kNoControl on boundary nodes
    double cfl_max = 0.0;               // max over the run of dt * (sum a_ii/dx^2 + sum |b_i|/dx)
    double cfl_margin = 0.0;            // 1 - cfl_max

    std::size_t nodes() const { return grid.node_count(); }
    double at(std::size_t k, std::size_t node) const { return values[k * nodes() + node]; }
    std::span<const double> layer(std::size_t k) const { return {values.data() + k * nodes(), nodes()}; }

    /// Multilinear interpolation in space on layer k; x is clamped to the box.
    double interpolate_layer(std::size_t k, std::span<const double> x) const {
        const std::size_t n = grid.dim();
        std::size_t base[2];
        double frac[2];
        for (std::size_t j = 0; j < n; ++j) {
            const Axis& a = grid.axes[j];
            const double xc = std::clamp(x[j], a.lower, a.upper);
            double s = (xc - a.lower) / a.dx();
            std::size_t i = static_cast<std::size_t>(std::floor(s));
            if (i >= a.nodes - 1) i = a.nodes - 2;
            base[j] = i;
            frac[j] = std::clamp(s - static_cast<double>(i), 0.0, 1.0);
        }
        const auto v = layer(k);
        double acc = 0.0;
        for (std::size_t corner = 0; corner < (std::size_t{1} << n); ++corner) {
            double w = 1.0;
            std::size_t node = 0;
            for (std::size_t j = 0; j < n; ++j) {
                const bool up = (corner >> j) & 1u;
                w *= up ? frac[j] : 1.0 - frac[j];
                node += (base[j] + (up ? 1 : 0)) * grid.stride(j);
            }
            if (w != 0.0) acc += w * v[node];
        }
        return acc;
    }

    /// Linear in time between layers, multilinear in space.
    double interpolate(double t, std::span<const double> x) const {
        const double s = (t - grid.t0) / grid.dt();
        std::size_t k = static_cast<std::size_t>(std::clamp(std::floor(s), 0.0, static_cast<double>(grid.time_steps)));
        if (k == grid.time_steps) return interpolate_layer(k, x);
        const double w = std::clamp(s - static_cast<double>(k), 0.0, 1.0);
        if (std::abs(w) < 1e-9) return interpolate_layer(k, x);
        if (std::abs(1.0 - w) < 1e-9) return interpolate_layer(k + 1, x);
        return (1.0 - w) * interpolate_layer(k, x) + w * interpolate_layer(k + 1, x);
    }
};

// ---------------------------------------------------------------------------
// Hamiltonian
// ---------------------------------------------------------------------------

struct HamiltonianValue {
    double value = -kInf;
    std::size_t argmax = 0;
};

/// max over the control grid of 1/2 Tr(sigma sigma^T A) + <p, b> + f(t, x, r, v); ties go to the lowest index.
inline HamiltonianValue hamiltonian(double t, std::span<const double> x, double r, std::span<const double> p,
                                    std::span<const double> A, const ControlledSDE& sde, const DriverSpec& spec,
                                    const ControlGrid& cgrid) {
    if (!spec.z_free) fail(Errc::z_not_supported, "the Hamiltonian needs a z-free driver");
    const std::size_t n = sde.dim_state;
    const std::size_t d = sde.dim_noise;
    require(p.size() == n && A.size() == n * n, "gradient or Hessian has the wrong size");
    Vec b(n), sig(n * d);
    HamiltonianValue best;
    for (std::size_t c = 0; c < cgrid.size(); ++c) {
        const Vec& v = cgrid.points[c];
        sde.drift(t, x, v, b);
        sde.diffusion(t, x, v, sig);
        double trace = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double aij = 0.0;
                for (std::size_t l = 0; l < d; ++l) aij += sig[i * d + l] * sig[j * d + l];
                trace += aij * A[j * n + i];
            }
        double drift_term = 0.0;
        for (std::size_t i = 0; i < n; ++i) drift_term += p[i] * b[i];
        const double val = 0.5 * trace + drift_term + spec.f(t, x, r, {}, v);
        if (!std::isfinite(val)) {
            std::string where;
            for (double vi : v) where += " " + fmt17(vi);
            fail(Errc::evaluation_error, "non-finite Hamiltonian candidate at control" + where);
        }
        if (val > best.value) {
            best.value = val;
            best.argmax = c;
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// Explicit monotone scheme
// ---------------------------------------------------------------------------

namespace detail {

/// Stencil of an interior node: neighbour offsets (flat) with nonnegative weights.
struct Stencil {
    std::size_t count = 0;
    std::ptrdiff_t offset[8];
    double weight[8];
    double cfl_rate = 0.0;  // sum a_ii/dx_i^2 + sum |b_i|/dx_i
    bool monotone = true;
};

inline void build_stencil(const SpaceTimeGrid& g, std::span<const double> b, std::span<const double> sig,
                          std::size_t d, Stencil& st) {
    const std::size_t n = g.dim();
    double a[4] = {0, 0, 0, 0};
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t l = 0; l < d; ++l) a[i * n + j] += sig[i * d + l] * sig[j * d + l];
    st.count = 0;
    st.cfl_rate = 0.0;
    st.monotone = true;
    double cross = 0.0, dxy = 1.0;
    if (n == 2) {
        cross = 0.5 * (a[1] + a[2]);
        dxy = g.axes[0].dx() * g.axes[1].dx();
    }
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = g.axes[i].dx();
        const auto s = static_cast<std::ptrdiff_t>(g.stride(i));
        const double diff = 0.5 * a[i * n + i] / (dx * dx) - 0.5 * std::abs(cross) / dxy;
        if (diff < -1e-15 * (a[i * n + i] / (dx * dx))) st.monotone = false;
        st.offset[st.count] = s;
        st.weight[st.count++] = diff + std::max(b[i], 0.0) / dx;
        st.offset[st.count] = -s;
        st.weight[st.count++] = diff + std::max(-b[i], 0.0) / dx;
        st.cfl_rate += a[i * n + i] / (dx * dx) + std::abs(b[i]) / dx;
    }
    if (n == 2 && cross != 0.0) {
        const auto s0 = static_cast<std::ptrdiff_t>(g.stride(0));
        const auto s1 = static_cast<std::ptrdiff_t>(g.stride(1));
        const double w = 0.5 * std::abs(cross) / dxy;
        if (cross > 0.0) {
            st.offset[st.count] = s0 + s1;
            st.weight[st.count++] = w;
            st.offset[st.count] = -s0 - s1;
            st.weight[st.count++] = w;
        } else {
            st.offset[st.count] = s0 - s1;
            st.weight[st.count++] = w;
            st.offset[st.count] = -s0 + s1;
            st.weight[st.count++] = w;
        }
    }
}

}  // namespace detail

/// One explicit step of the scheme at a node, shared by the solver and the monotonicity probe.
class HjbScheme {
public:
    HjbScheme(const SpaceTimeGrid& grid, const ControlledSDE& sde, const DriverSpec& spec, const ControlGrid& cgrid)
        : grid_(grid), sde_(sde), spec_(spec), cgrid_(cgrid) {}

    struct NodeUpdate {
        double value = 0.0;
        std::uint32_t argmax = 0;
        double cfl = 0.0;  // dt * max over controls of the stencil rate
        bool monotone = true;
    };

    /// u_k(node) = u_{k+1}(node) + dt * max_v [ sum_nb w (u_nb - u_c) + f(t_k, x, u_{k+1}(node), v) ].
    NodeUpdate update(std::size_t k, std::size_t node, std::span<const double> next) const {
        const std::size_t n = grid_.dim();
        const std::size_t d = sde_.dim_noise;
        const double t = grid_.time(k);
        const double dt = grid_.dt();
        double x[2];
        grid_.coordinates(node, std::span<double>(x, n));
        const std::span<const double> xs(x, n);
        double b[2];
        double sig[8];
        detail::Stencil st;
        const double uc = next[node];
        NodeUpdate out;
        double best = -kInf;
        for (std::size_t c = 0; c < cgrid_.size(); ++c) {
            const Vec& v = cgrid_.points[c];
            sde_.drift(t, xs, v, std::span<double>(b, n));
            sde_.diffusion(t, xs, v, std::span<double>(sig, n * d));
            detail::build_stencil(grid_, std::span<const double>(b, n), std::span<const double>(sig, n * d), d, st);
            out.cfl = std::max(out.cfl, dt * st.cfl_rate);
            out.monotone = out.monotone && st.monotone;
            double acc = 0.0;
            for (std::size_t s = 0; s < st.count; ++s)
                acc += st.weight[s] * (next[static_cast<std::size_t>(static_cast<std::ptrdiff_t>(node) + st.offset[s])] - uc);
            const double val = acc + spec_.f(t, xs, uc, {}, v);
            if (!std::isfinite(val)) fail(Errc::evaluation_error, "non-finite scheme candidate at t=" + fmt17(t));
            if (val > best) {
                best = val;
                out.argmax = static_cast<std::uint32_t>(c);
            }
        }
        out.value = uc + dt * best;
        return out;
    }

    /// Largest dt * rate over the nodes of one time layer.
    double layer_cfl(std::size_t k) const {
        const std::size_t n = grid_.dim();
        const std::size_t d = sde_.dim_noise;
        double x[2], b[2], sig[8];
        detail::Stencil st;
        double worst = 0.0;
        for (std::size_t node = 0; node < grid_.node_count(); ++node) {
            if (grid_.on_boundary(node)) continue;
            grid_.coordinates(node, std::span<double>(x, n));
            for (const Vec& v : cgrid_.points) {
                sde_.drift(grid_.time(k), std::span<const double>(x, n), v, std::span<double>(b, n));
                sde_.diffusion(grid_.time(k), std::span<const double>(x, n), v, std::span<double>(sig, n * d));
                detail::build_stencil(grid_, std::span<const double>(b, n), std::span<const double>(sig, n * d), d, st);
                if (!st.monotone) return kInf;
                worst = std::max(worst, grid_.dt() * st.cfl_rate);
            }
        }
        return worst;
    }

private:
    const SpaceTimeGrid& grid_;
    const ControlledSDE& sde_;
    const DriverSpec& spec_;
    const ControlGrid& cgrid_;
};

namespace detail {

inline void check_hjb_inputs(const SpaceTimeGrid& grid, const ControlledSDE& sde, const DriverSpec& spec,
                             const ControlGrid& cgrid) {
    require(grid.dim() >= 1 && grid.dim() <= 2, "the grid solver supports one or two state dimensions");
    require(grid.dim() == sde.dim_state, "grid dimension differs from the state dimension");
    require(sde.dim_noise <= 4, "the grid solver supports at most four noise dimensions");
    for (const auto& a : grid.axes) require(a.nodes >= 3 && a.upper > a.lower, "each axis needs at least 3 nodes");
    require(grid.time_steps >= 1 && grid.horizon > grid.t0, "time grid must be nonempty");
    require(cgrid.size() > 0, "control grid is empty");
    if (!spec.z_free) fail(Errc::z_not_supported, "the HJB solver needs a z-free driver");
    if (!spec.audited) fail(Errc::condition_audit_failed, "driver '" + spec.name + "' has not passed its audit");
    if (!(grid.dt() * std::max(spec.constants.mu, 0.0) < 1.0))
        fail(Errc::time_step_too_large, "dt * mu+ >= 1 for the explicit r-argument");
    require(static_cast<bool>(spec.h), "driver spec has no terminal map");
}

inline void apply_boundary(const SpaceTimeGrid& g, const Vec& terminal, std::span<double> u) {
    const std::size_t N = g.node_count();
    if (g.boundary == Boundary::dirichlet) {
        for (std::size_t node = 0; node < N; ++node)
            if (g.on_boundary(node)) u[node] = terminal[node];
        return;
    }
    // Linear extrapolation from the two inner neighbours, one axis after the other.
    for (std::size_t j = 0; j < g.dim(); ++j) {
        const std::size_t s = g.stride(j);
        const std::size_t last = g.axes[j].nodes - 1;
        for (std::size_t node = 0; node < N; ++node) {
            const std::size_t i = g.index_along(node, j);
            if (i == 0) u[node] = 2.0 * u[node + s] - u[node + 2 * s];
            if (i == last) u[node] = 2.0 * u[node - s] - u[node - 2 * s];
        }
    }
}

}  // namespace detail

/// Backward march from u(T) = h. Refuses to run (SchemeNotMonotone) when the CFL bound fails.
inline ValueGrid solve_hjb(const SpaceTimeGrid& grid, const ControlledSDE& sde, const DriverSpec& spec,
                           const ControlGrid& cgrid) {
    detail::check_hjb_inputs(grid, sde, spec, cgrid);
    const HjbScheme scheme(grid, sde, spec, cgrid);
    const std::size_t N = grid.node_count();
    const std::size_t Nt = grid.time_steps;
    constexpr double kCflSlack = 1e-12;

    for (std::size_t k : {std::size_t{0}, Nt - 1}) {
        const double c = scheme.layer_cfl(k);
        if (!(c <= 1.0 + kCflSlack))
            fail(Errc::scheme_not_monotone, "CFL number " + fmt17(c) + " exceeds 1 at t=" + fmt17(grid.time(k)));
    }

    ValueGrid vg;
    vg.grid = grid;
    vg.controls = cgrid;
    vg.values.assign((Nt + 1) * N, 0.0);
    vg.argmax.assign(Nt * N, ValueGrid::kNoControl);
    Vec terminal(N);
    Vec x(grid.dim());
    for (std::size_t node = 0; node < N; ++node) {
        grid.coordinates(node, x);
        terminal[node] = spec.h(x);
    }
    std::copy(terminal.begin(), terminal.end(), vg.values.begin() + Nt * N);

    std::vector<double> layer_cfl(N, 0.0);
    for (std::size_t k = Nt; k-- > 0;) {
        const std::span<const double> next(vg.values.data() + (k + 1) * N, N);
        const std::span<double> cur(vg.values.data() + k * N, N);
        parallel_for(N, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t node = lo; node < hi; ++node) {
                if (grid.on_boundary(node)) continue;
                const auto up = scheme.update(k, node, next);
                if (!up.monotone || up.cfl > 1.0 + kCflSlack)
                    fail(Errc::scheme_not_monotone, "CFL number " + fmt17(up.cfl) + " exceeds 1 at t=" +
                                                        fmt17(grid.time(k)) + ", node " + std::to_string(node));
                if (!std::isfinite(up.value) || std::abs(up.value) > 1e12)
                    fail(Errc::diverged, "value blow-up at t=" + fmt17(grid.time(k)) + ", node " + std::to_string(node));
                cur[node] = up.value;
                vg.argmax[k * N + node] = up.argmax;
                layer_cfl[node] = std::max(layer_cfl[node], up.cfl);
            }
        });
        detail::apply_boundary(grid, terminal, cur);
    }
    for (double c : layer_cfl) vg.cfl_max = std::max(vg.cfl_max, c);
    vg.cfl_margin = 1.0 - vg.cfl_max;
    return vg;
}

/// Time grid satisfying the CFL bound with the given safety factor, probed at `time_samples` instants.
inline SpaceTimeGrid make_cfl_grid(std::vector<Axis> axes, double t0, double horizon, const ControlledSDE& sde,
                                   const ControlGrid& cgrid, Boundary boundary = Boundary::dirichlet,
                                   double safety = 0.9, std::size_t time_samples = 11) {
    SpaceTimeGrid g;
    g.axes = std::move(axes);
    g.t0 = t0;
    g.horizon = horizon;
    g.boundary = boundary;
    g.time_steps = 1;
    const std::size_t n = g.dim();
    const std::size_t d = sde.dim_noise;
    double rate = 0.0;
    double x[2], b[2], sig[8];
    detail::Stencil st;
    for (double t : linspace(t0, horizon, time_samples)) {
        for (std::size_t node = 0; node < g.node_count(); ++node) {
            if (g.on_boundary(node)) continue;
            g.coordinates(node, std::span<double>(x, n));
            for (const Vec& v : cgrid.points) {
                sde.drift(t, std::span<const double>(x, n), v, std::span<double>(b, n));
                sde.diffusion(t, std::span<const double>(x, n), v, std::span<double>(sig, n * d));
                detail::build_stencil(g, std::span<const double>(b, n), std::span<const double>(sig, n * d), d, st);
                rate = std::max(rate, st.cfl_rate);
            }
        }
    }
    g.time_steps = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil((horizon - t0) * rate / safety)));
    return g;
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

struct MonotonicityResult {
    bool monotone = true;
    std::size_t witness_node = 0;
    std::ptrdiff_t witness_offset = 0;
    double decrease = 0.0;
    std::size_t probes = 0;
};

/// Bumps each stencil value of u_{k+1} = h by +1e-6 at probe nodes and checks that the update never decreases.
inline MonotonicityResult scheme_monotonicity_check(const SpaceTimeGrid& grid, const ControlledSDE& sde,
                                                    const DriverSpec& spec, const ControlGrid& cgrid,
                                                    std::size_t probes = 16) {
    const HjbScheme scheme(grid, sde, spec, cgrid);
    const std::size_t N = grid.node_count();
    Vec base(N), x(grid.dim());
    for (std::size_t node = 0; node < N; ++node) {
        grid.coordinates(node, x);
        base[node] = spec.h(x);
    }
    std::vector<std::size_t> interior;
    for (std::size_t node = 0; node < N; ++node)
        if (!grid.on_boundary(node)) interior.push_back(node);
    MonotonicityResult res;
    if (interior.empty()) return res;
    const std::size_t P = std::min(probes, interior.size());
    std::vector<std::ptrdiff_t> offsets{0};
    for (std::size_t j = 0; j < grid.dim(); ++j) {
        const auto s = static_cast<std::ptrdiff_t>(grid.stride(j));
        offsets.push_back(s);
        offsets.push_back(-s);
    }
    if (grid.dim() == 2) {
        const auto s0 = static_cast<std::ptrdiff_t>(grid.stride(0));
        const auto s1 = static_cast<std::ptrdiff_t>(grid.stride(1));
        for (auto o : {s0 + s1, -s0 - s1, s0 - s1, -s0 + s1}) offsets.push_back(o);
    }
    const std::size_t k = grid.time_steps - 1;
    constexpr double bump = 1e-6;
    for (std::size_t p = 0; p < P; ++p) {
        const std::size_t node = interior[P == 1 ? 0 : p * (interior.size() - 1) / (P - 1)];
        const double u0 = scheme.update(k, node, base).value;
        for (auto o : offsets) {
            Vec bumped = base;
            bumped[static_cast<std::size_t>(static_cast<std::ptrdiff_t>(node) + o)] += bump;
            const double u1 = scheme.update(k, node, bumped).value;
            const double drop = u0 - u1;
            if (drop > 1e-13 * (1.0 + std::abs(u0)) && drop > res.decrease) {
                res.monotone = false;
                res.witness_node = node;
                res.witness_offset = o;
                res.decrease = drop;
            }
        }
        ++res.probes;
    }
    return res;
}

struct GridComparison {
    double max_abs_diff = 0.0;
    bool identical = true;
};

/// Compares two value grids on the same lattice over the masked nodes of every layer.
inline GridComparison compare_value_grids(const ValueGrid& a, const ValueGrid& b, const std::vector<char>& mask) {
    require(a.values.size() == b.values.size(), "value grids differ in size");
    const std::size_t N = a.nodes();
    GridComparison c;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        if (!mask.empty() && !mask[i % N]) continue;
        const double d = std::abs(a.values[i] - b.values[i]);
        c.max_abs_diff = std::max(c.max_abs_diff, d);
        if (a.values[i] != b.values[i]) c.identical = false;
    }
    return c;
}

/// (t, x, r, p, A) tuple at which Hamiltonians are compared.
struct HamiltonianProbe {
    double t = 0.0;
    Vec x;
    double r = 0.0;
    Vec p;
    Vec A;
};

/// Deterministic Halton probes with x in the given sub-box, r in [r_lo, r_hi], |p|, |A| entries <= scale.
inline std::vector<HamiltonianProbe> make_hamiltonian_probes(std::size_t count, double t0, double t1, const Vec& x_lo,
                                                             const Vec& x_hi, double r_lo, double r_hi,
                                                             double scale = 2.0) {
    const std::size_t n = x_lo.size();
    std::vector<HamiltonianProbe> out;
    Vec u(2 + n + n + n * n);
    for (std::size_t s = 0; s < count; ++s) {
        halton_point(s, u);
        HamiltonianProbe pr;
        pr.t = t0 + (t1 - t0) * u[0];
        pr.r = r_lo + (r_hi - r_lo) * u[1];
        pr.x.resize(n);
        pr.p.resize(n);
        pr.A.assign(n * n, 0.0);
        for (std::size_t j = 0; j < n; ++j) pr.x[j] = x_lo[j] + (x_hi[j] - x_lo[j]) * u[2 + j];
        for (std::size_t j = 0; j < n; ++j) pr.p[j] = scale * (2.0 * u[2 + n + j] - 1.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i; j < n; ++j) {
                const double a = scale * (2.0 * u[2 + 2 * n + i * n + j] - 1.0);
                pr.A[i * n + j] = a;
                pr.A[j * n + i] = a;
            }
        out.push_back(std::move(pr));
    }
    return out;
}

struct ConvergenceRow {
    int n = 0;
    double u_gap = 0.0;       // sup over the trust region and all layers of |u_n - u|
    double h_gap = 0.0;       // max over probes of |H_n - H|
    double h_bound_slack = 0.0;  // min over probes of sup_v |f_n - f| - |H_n - H| (>= -rounding when the bound holds)
    bool bound_holds = true;
};

/// Replaces f by its mollification f_n for each n and reports the gaps to the unmollified solution.
inline std::vector<ConvergenceRow> convergence_study(const SpaceTimeGrid& grid, const ControlledSDE& sde,
                                                     const DriverSpec& spec, const ControlGrid& cgrid,
                                                     const std::vector<int>& ns,
                                                     const std::vector<HamiltonianProbe>& probes,
                                                     double trust_margin = 0.2) {
    const ValueGrid u = solve_hjb(grid, sde, spec, cgrid);
    const auto mask = grid.trust_region(trust_margin);
    std::vector<ConvergenceRow> rows;
    for (int n : ns) {
        const DriverSpec fn = mollify(spec, Mollifier::make(n));
        ConvergenceRow row;
        row.n = n;
        row.u_gap = compare_value_grids(u, solve_hjb(grid, sde, fn, cgrid), mask).max_abs_diff;
        row.h_bound_slack = kInf;
        for (const auto& pr : probes) {
            const double H = hamiltonian(pr.t, pr.x, pr.r, pr.p, pr.A, sde, spec, cgrid).value;
            const double Hn = hamiltonian(pr.t, pr.x, pr.r, pr.p, pr.A, sde, fn, cgrid).value;
            double bound = 0.0;
            for (const Vec& v : cgrid.points)
                bound = std::max(bound, std::abs(fn.f(pr.t, pr.x, pr.r, {}, v) - spec.f(pr.t, pr.x, pr.r, {}, v)));
            const double gap = std::abs(Hn - H);
            row.h_gap = std::max(row.h_gap, gap);
            row.h_bound_slack = std::min(row.h_bound_slack, bound - gap);
            // Rounding in the shared trace and drift terms perturbs H at the ulp level of |H|.
            const double ulp_slack = 8.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(H));
            if (gap > bound + ulp_slack) row.bound_holds = false;
        }
        rows.push_back(row);
    }
    return rows;
}

struct CalibrationResult {
    ControlGrid grid;
    std::size_t rounds = 0;
    double last_change = kInf;
    bool converged = false;
};

/// Doubles the control-grid resolution until the Hamiltonian changes by less than tol at every probe.
inline CalibrationResult calibrate_control_grid(const ControlSet& set, std::vector<std::size_t> resolution,
                                                const ControlledSDE& sde, const DriverSpec& spec,
                                                const std::vector<HamiltonianProbe>& probes, double tol = 1e-6,
                                                std::size_t max_rounds = 6) {
    CalibrationResult res;
    res.grid = ControlGrid::uniform(set, std::move(resolution));
    const auto eval_all = [&](const ControlGrid& g) {
        Vec out;
        for (const auto& pr : probes) out.push_back(hamiltonian(pr.t, pr.x, pr.r, pr.p, pr.A, sde, spec, g).value);
        return out;
    };
    Vec prev = eval_all(res.grid);
    for (std::size_t r = 0; r < max_rounds; ++r) {
        const ControlGrid finer = res.grid.refined(set);
        const Vec cur = eval_all(finer);
        double change = 0.0;
        for (std::size_t i = 0; i < cur.size(); ++i) change = std::max(change, std::abs(cur[i] - prev[i]));
        res.grid = finer;
        res.rounds = r + 1;
        res.last_change = change;
        prev = cur;
        if (change < tol) {
            res.converged = true;
            break;
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

/// Long-format CSV (t, x..., u, control...) on at most max_layers time layers (first and last included).
inline void write_value_grid_csv(const ValueGrid& vg, const std::string& path, std::size_t max_layers = 101) {
    std::ofstream os(path);
    if (!os) fail(Errc::io_error, "cannot open " + path);
    const std::size_t n = vg.grid.dim();
    const std::size_t m = vg.controls.dim();
    os << "t";
    for (std::size_t j = 0; j < n; ++j) os << ",x" << j;
    os << ",u";
    for (std::size_t j = 0; j < m; ++j) os << ",v" << j;
    os << '\n';
    const std::size_t Nt = vg.grid.time_steps;
    const std::size_t stride = max_layers > 1 ? std::max<std::size_t>(1, (Nt + max_layers - 2) / (max_layers - 1)) : Nt;
    Vec x(n);
    for (std::size_t k = 0; k <= Nt; k = (k == Nt) ? Nt + 1 : std::min(Nt, k + stride)) {
        for (std::size_t node = 0; node < vg.nodes(); ++node) {
            vg.grid.coordinates(node, x);
            os << fmt17(vg.grid.time(k));
            for (double xi : x) os << ',' << fmt17(xi);
            os << ',' << fmt17(vg.at(k, node));
            const std::uint32_t c = k < Nt ? vg.argmax[k * vg.nodes() + node] : ValueGrid::kNoControl;
            for (std::size_t j = 0; j < m; ++j) os << ',' << (c == ValueGrid::kNoControl ? "nan" : fmt17(vg.controls.points[c][j]));
            os << '\n';
        }
    }
    if (!os) fail(Errc::io_error, "failed writing " + path);
}

}  // namespace rcl
