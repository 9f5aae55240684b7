#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "rcl/bsde.hpp"
#include "rcl/hjb.hpp"
#include "rcl/problem.hpp"

namespace rcl {

// ---------------------------------------------------------------------------
// DPP residual
// ---------------------------------------------------------------------------

struct DppProbe {
    double t = 0.0;
    Vec x;
    double u = 0.0;              // value surface at (t, x)
    double g_max = 0.0;          // max over controls of G_{t,t+delta}[u(t+delta, X)]
    double residual = 0.0;       // u - g_max
    double mc_stderr = 0.0;      // stderr of the maximizing candidate
    double refinement_delta = 0.0;
    double tolerance = 0.0;      // 5 * mc_stderr + refinement_delta
    bool pass = false;           // |residual| <= tolerance
    bool one_sided_pass = false; // u >= g_max - tolerance
    Vec best_control;
    double exit_fraction = 0.0;
    bool skipped = false;
    std::string message;
};

/// Simulates X on [t, t+delta] under each constant control (common random numbers), evaluates the
/// value surface there by interpolation and applies the backward semigroup.
inline DppProbe dpp_residual(const ValueGrid& value, const ControlProblem& problem, double t,
                             std::span<const double> x, double delta, const ControlGrid& cgrid, const McConfig& mc,
                             const RegressionConfig& reg = {}) {
    const SpaceTimeGrid& g = value.grid;
    require(x.size() == g.dim(), "probe state has the wrong dimension");
    require(t >= g.t0 - 1e-12 && t + delta <= g.horizon + 1e-9 * (g.horizon - g.t0), "probe interval leaves the grid");
    DppProbe pr;
    pr.t = t;
    pr.x.assign(x.begin(), x.end());
    pr.u = value.interpolate(t, x);
    if (delta == 0.0) {
        pr.g_max = pr.u;
        pr.residual = 0.0;
        pr.pass = pr.one_sided_pass = true;
        return pr;
    }
    const double t1 = std::min(t + delta, g.horizon);
    const std::size_t M = mc.paths;
    const std::size_t n = g.dim();
    pr.g_max = -kInf;
    for (std::size_t c = 0; c < cgrid.size(); ++c) {
        const ControlPolicy policy = ControlPolicy::constant(cgrid.points[c]);
        SimulationRequest req;
        req.t0 = t;
        req.t_end = t1;
        req.steps = mc.steps;
        req.paths = M;
        req.seed = mc.seed;
        Vec init(M * n);
        for (std::size_t i = 0; i < M; ++i) std::copy(x.begin(), x.end(), init.begin() + i * n);
        const PathBundle bundle = simulate_paths(problem.sde, policy, init, req);
        std::size_t exits = 0;
        Vec eta(M);
        for (std::size_t i = 0; i < M; ++i) {
            const auto xi = bundle.state(i, mc.steps);
            for (std::size_t j = 0; j < n; ++j)
                if (xi[j] < g.axes[j].lower || xi[j] > g.axes[j].upper) {
                    ++exits;
                    break;
                }
            eta[i] = value.interpolate(t1, xi);
        }
        const double frac = static_cast<double>(exits) / static_cast<double>(M);
        pr.exit_fraction = std::max(pr.exit_fraction, frac);
        if (frac >= 0.01)
            fail(Errc::reachability_error, "exit fraction " + fmt17(frac) + " from the grid box at t=" + fmt17(t));
        const SemigroupValue gv = backward_semigroup(bundle, problem.spec, policy, mc.steps, eta, reg);
        if (gv.mean > pr.g_max) {
            pr.g_max = gv.mean;
            pr.mc_stderr = gv.stderr_;
            pr.best_control = cgrid.points[c];
        }
    }
    pr.residual = pr.u - pr.g_max;
    return pr;
}

struct DppReport {
    std::vector<DppProbe> probes;
    double delta = 0.0;
    double max_abs_residual = 0.0;
    bool pass = false;
    std::string boundary;
    double trust_margin = 0.2;
};

struct DppConfig {
    double delta = 0.1;
    double tol_factor = 5.0;
    McConfig mc;
    RegressionConfig reg;
};

/// Runs dpp_residual at every probe; tolerance = tol_factor * stderr + |u_fine - u_coarse| at the probe.
inline DppReport verify_dpp(const ValueGrid& fine, const ValueGrid& coarse, const ControlProblem& problem,
                            const std::vector<std::pair<double, Vec>>& probes, const ControlGrid& cgrid,
                            const DppConfig& cfg) {
    DppReport rep;
    rep.delta = cfg.delta;
    rep.boundary = boundary_name(fine.grid.boundary);
    rep.pass = !probes.empty();
    for (std::size_t p = 0; p < probes.size(); ++p) {
        const auto& [t, x] = probes[p];
        DppProbe pr;
        try {
            McConfig mc = cfg.mc;
            mc.seed = cfg.mc.seed + 1000003ULL * p;
            pr = dpp_residual(fine, problem, t, x, cfg.delta, cgrid, mc, cfg.reg);
            pr.refinement_delta = std::abs(fine.interpolate(t, x) - coarse.interpolate(t, x));
            pr.tolerance = cfg.tol_factor * pr.mc_stderr + pr.refinement_delta;
            pr.pass = std::abs(pr.residual) <= pr.tolerance;
            pr.one_sided_pass = pr.u >= pr.g_max - pr.tolerance;
            rep.max_abs_residual = std::max(rep.max_abs_residual, std::abs(pr.residual));
        } catch (const Error& e) {
            if (e.code() != Errc::reachability_error) throw;
            pr.t = t;
            pr.x = x;
            pr.skipped = true;
            pr.message = e.what();
        }
        rep.pass = rep.pass && !pr.skipped && pr.pass && pr.one_sided_pass;
        rep.probes.push_back(std::move(pr));
    }
    return rep;
}

inline nlohmann::ordered_json json_number(double v) {
    // Non-finite values become null.
    return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(nullptr);
}

inline nlohmann::ordered_json json_vector(const Vec& v) {
    auto a = nlohmann::ordered_json::array();
    for (double e : v) a.push_back(json_number(e));
    return a;
}

/// Pretty JSON like dump(indent), with every floating-point number printed with 17 significant digits.
inline void dump17(const nlohmann::ordered_json& j, std::ostream& os, int indent = 2, int depth = 0) {
    const auto pad = [&](int d) { os << '\n' << std::string(static_cast<std::size_t>(indent * d), ' '); };
    if (j.is_object()) {
        if (j.empty()) {
            os << "{}";
            return;
        }
        os << '{';
        bool first = true;
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (!first) os << ',';
            first = false;
            pad(depth + 1);
            os << nlohmann::ordered_json(it.key()).dump() << ": ";
            dump17(it.value(), os, indent, depth + 1);
        }
        pad(depth);
        os << '}';
    } else if (j.is_array()) {
        if (j.empty()) {
            os << "[]";
            return;
        }
        os << '[';
        for (std::size_t i = 0; i < j.size(); ++i) {
            if (i > 0) os << ',';
            pad(depth + 1);
            dump17(j[i], os, indent, depth + 1);
        }
        pad(depth);
        os << ']';
    } else if (j.is_number_float()) {
        const double v = j.get<double>();
        if (!std::isfinite(v)) {
            os << "null";
            return;
        }
        std::string s = fmt17(v);
        if (s.find_first_of(".eE") == std::string::npos) s += ".0";
        os << s;
    } else {
        os << j.dump();
    }
}

inline std::string dump17(const nlohmann::ordered_json& j) {
    std::ostringstream os;
    dump17(j, os);
    return os.str();
}

inline nlohmann::ordered_json to_json(const DppReport& rep) {
    nlohmann::ordered_json j;
    auto arr = nlohmann::ordered_json::array();
    for (const auto& p : rep.probes) {
        nlohmann::ordered_json o;
        o["t"] = json_number(p.t);
        o["x"] = json_vector(p.x);
        o["skipped"] = p.skipped;
        if (p.skipped) {
            o["message"] = p.message;
            arr.push_back(o);
            continue;
        }
        o["u"] = json_number(p.u);
        o["g_max"] = json_number(p.g_max);
        o["residual"] = json_number(p.residual);
        o["tolerance"] = json_number(p.tolerance);
        o["pass"] = p.pass;
        o["one_sided_pass"] = p.one_sided_pass;
        o["decomposition"] = {{"mc_stderr", json_number(p.mc_stderr)},
                              {"mc_term", json_number(p.tolerance - p.refinement_delta)},
                              {"refinement_delta", json_number(p.refinement_delta)}};
        o["best_control"] = json_vector(p.best_control);
        o["exit_fraction"] = json_number(p.exit_fraction);
        arr.push_back(o);
    }
    j["probes"] = arr;
    j["summary"] = {{"pass", rep.pass},
                    {"delta", json_number(rep.delta)},
                    {"max_abs_residual", json_number(rep.max_abs_residual)},
                    {"boundary", rep.boundary},
                    {"trust_margin", json_number(rep.trust_margin)}};
    return j;
}

// ---------------------------------------------------------------------------
// Brute-force control search
// ---------------------------------------------------------------------------

struct BruteForceResult {
    double value = -kInf;
    double stderr_ = 0.0;
    std::vector<Vec> best;  // one control per piece
    std::size_t candidates = 0;
};

/// Max of solve_bsde y0 over all piecewise-constant controls with `pieces` equal segments on [t, T].
inline BruteForceResult brute_force_value(const ControlProblem& problem, double t, std::span<const double> x,
                                          const ControlGrid& cgrid, std::size_t pieces, const McConfig& mc,
                                          const RegressionConfig& reg = {}, std::size_t budget = 4096) {
    require(pieces >= 1, "brute force needs at least one piece");
    const double T = problem.sde.horizon;
    require(t < T, "brute force start must precede the horizon");
    const std::size_t G = cgrid.size();
    double count = 1.0;
    for (std::size_t p = 0; p < pieces; ++p) count *= static_cast<double>(G);
    if (static_cast<double>(pieces) * count > static_cast<double>(budget))
        fail(Errc::budget_exceeded, std::to_string(pieces) + " pieces over " + std::to_string(G) +
                                        " controls exceed the budget of " + std::to_string(budget));
    const auto total = static_cast<std::size_t>(count);
    Vec breaks;
    for (std::size_t p = 1; p < pieces; ++p) breaks.push_back(t + (T - t) * static_cast<double>(p) / static_cast<double>(pieces));
    const std::size_t n = problem.sde.dim_state;
    Vec init(mc.paths * n);
    for (std::size_t i = 0; i < mc.paths; ++i) std::copy(x.begin(), x.end(), init.begin() + i * n);
    SimulationRequest req;
    req.t0 = t;
    req.t_end = T;
    req.steps = mc.steps;
    req.paths = mc.paths;
    req.seed = mc.seed;
    BsdeOptions opt;
    opt.store_y = false;
    opt.store_z = false;
    BruteForceResult res;
    res.candidates = total;
    std::vector<std::size_t> digits(pieces, 0);
    for (std::size_t s = 0; s < total; ++s) {
        std::size_t rem = s;
        std::vector<Vec> values(pieces);
        for (std::size_t p = pieces; p-- > 0;) {
            digits[p] = rem % G;
            rem /= G;
            values[p] = cgrid.points[digits[p]];
        }
        const ControlPolicy policy = pieces == 1 ? ControlPolicy::constant(values[0]) : ControlPolicy::piecewise(breaks, values);
        const PathBundle bundle = simulate_paths(problem.sde, policy, init, req);
        const BsdeSolution sol = solve_bsde(bundle, problem.spec, policy, reg, opt);
        if (sol.y0 > res.value) {
            res.value = sol.y0;
            res.stderr_ = sol.y0_stderr;
            res.best = values;
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Determinism of the value
// ---------------------------------------------------------------------------

struct DeterminismResult {
    Vec values;
    Vec stderrs;
    double spread = 0.0;
    double pooled_stderr = 0.0;
    double mean = 0.0;
    bool inconclusive = false;
    bool pass = false;
};

/// Brute-force value under independent seeds; spread must stay within tol_factor pooled stderrs.
inline DeterminismResult determinism_probe(const ControlProblem& problem, double t, std::span<const double> x,
                                           const ControlGrid& cgrid, std::size_t pieces,
                                           const std::vector<std::uint64_t>& seeds, const McConfig& mc,
                                           const RegressionConfig& reg = {}, double tol_factor = 5.0) {
    require(seeds.size() >= 3, "the determinism probe needs at least three seeds");
    DeterminismResult r;
    double se2 = 0.0;
    for (auto seed : seeds) {
        McConfig m = mc;
        m.seed = seed;
        const auto bf = brute_force_value(problem, t, x, cgrid, pieces, m, reg);
        r.values.push_back(bf.value);
        r.stderrs.push_back(bf.stderr_);
        se2 += bf.stderr_ * bf.stderr_;
    }
    const auto [lo, hi] = std::minmax_element(r.values.begin(), r.values.end());
    r.spread = *hi - *lo;
    r.pooled_stderr = std::sqrt(se2 / static_cast<double>(seeds.size()));
    for (double v : r.values) r.mean += v / static_cast<double>(seeds.size());
    r.inconclusive = mc.paths < 30 || r.pooled_stderr > 0.01 * std::abs(r.mean);
    r.pass = r.spread <= tol_factor * r.pooled_stderr;
    return r;
}

// ---------------------------------------------------------------------------
// Regularity of the value surface
// ---------------------------------------------------------------------------

struct RegularityResult {
    double lipschitz_x = 0.0;  // max |u(t, x') - u(t, x)| / |x' - x| over adjacent interior nodes
    double holder_t = 0.0;     // max |u(t + s, x) - u(t, x)| / sqrt(s) over lags s = T/2^j, j = 1..4
    double growth_c = 0.0;     // max |u| / (1 + |x|)
};

/// Discrete difference quotients over nodes where mask is set (all interior nodes when empty).
inline RegularityResult regularity_probe(const ValueGrid& vg, const std::vector<char>& mask = {}) {
    const SpaceTimeGrid& g = vg.grid;
    for (const auto& a : g.axes) require(a.nodes >= 3, "regularity probe needs at least 3 nodes per axis");
    const std::size_t N = vg.nodes();
    const auto use = [&](std::size_t node) { return !g.on_boundary(node) && (mask.empty() || mask[node]); };
    RegularityResult r;
    Vec x(g.dim());
    for (std::size_t k = 0; k <= g.time_steps; ++k)
        for (std::size_t node = 0; node < N; ++node) {
            if (!use(node)) continue;
            g.coordinates(node, x);
            r.growth_c = std::max(r.growth_c, std::abs(vg.at(k, node)) / (1.0 + norm2(x)));
            for (std::size_t j = 0; j < g.dim(); ++j) {
                if (g.index_along(node, j) + 1 >= g.axes[j].nodes) continue;
                const std::size_t nb = node + g.stride(j);
                if (!use(nb)) continue;
                r.lipschitz_x = std::max(r.lipschitz_x, std::abs(vg.at(k, nb) - vg.at(k, node)) / g.axes[j].dx());
            }
        }
    const double span = g.horizon - g.t0;
    for (int j = 1; j <= 4; ++j) {
        const double lag = span / static_cast<double>(1 << j);
        for (double t : linspace(g.t0, g.horizon - lag, 9))
            for (std::size_t node = 0; node < N; ++node) {
                if (!use(node)) continue;
                g.coordinates(node, x);
                const double d = std::abs(vg.interpolate(t + lag, x) - vg.interpolate(t, x));
                r.holder_t = std::max(r.holder_t, d / std::sqrt(lag));
            }
    }
    return r;
}

}  // namespace rcl
