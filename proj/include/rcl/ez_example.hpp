#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "rcl/aggregator.hpp"
#include "rcl/bsde.hpp"
#include "rcl/dpp.hpp"
#include "rcl/hjb.hpp"
#include "rcl/problem.hpp"
#include "rcl/sde.hpp"

namespace rcl {

// ---------------------------------------------------------------------------
// Market and problem assembly
// ---------------------------------------------------------------------------

using RateFn = std::function<double(double)>;

/// Bond rate r, stock appreciation b and volatility sigma, all functions of time; wealth x0 > 0;
/// controls pi in [pi_lower, pi_upper] (fraction in the stock) and consumption c in [a1, a2].
struct MarketSpec {
    RateFn r;
    RateFn b;
    RateFn sigma;
    double x0 = 1.0;
    double a1 = 0.01;
    double a2 = 1.0;
    double pi_lower = -1.0;
    double pi_upper = 1.0;
    double horizon = 1.0;
    double floor_fraction = 0.05;  // wealth floor x_floor = floor_fraction * x0
    double cap_multiple = 4.0;     // grid box upper end = cap_multiple * x0

    static MarketSpec constant(double r, double b, double sigma) {
        MarketSpec m;
        m.r = [r](double) { return r; };
        m.b = [b](double) { return b; };
        m.sigma = [sigma](double) { return sigma; };
        return m;
    }
};

struct EzProblem {
    ControlProblem problem;
    MarketSpec market;
    EZParams ez;
    RegimeInfo regime;
    double x_floor = 0.0;
    double x_max = 0.0;
    double sde_lipschitz = 0.0;
    AuditReport driver_audit;
    SdeAuditReport sde_audit;
    AuditBox audit_box;
    bool deterministic = false;  // sigma vanishes on [0, T]
};

/// Largest adjacent jump of g on an m-point grid of [0, T].
inline double max_adjacent_jump(const RateFn& g, double T, std::size_t m) {
    const Vec ts = linspace(0.0, T, m);
    double jump = 0.0;
    for (std::size_t i = 1; i < m; ++i) jump = std::max(jump, std::abs(g(ts[i]) - g(ts[i - 1])));
    return jump;
}

/// Continuity audit: the largest adjacent jump must shrink when the time grid is refined.
inline void audit_continuity(const RateFn& g, double T, const std::string& name, std::size_t m = 1000) {
    const double j1 = max_adjacent_jump(g, T, m + 1);
    const double j2 = max_adjacent_jump(g, T, 2 * m + 1);
    if (!std::isfinite(j1) || !std::isfinite(j2))
        fail(Errc::condition_audit_failed, "H1: coefficient " + name + " is not finite on [0, T]");
    if (j2 > 1e-12 && j2 > 0.75 * j1)
        fail(Errc::condition_audit_failed, "H1: coefficient " + name + " has a jump of " + fmt17(j2));
}

/// Terminal utility; case (i) -x^{1-gamma}/(gamma-1), case (ii) x^{1-gamma}/(1-gamma), linear below x_floor.
inline TerminalFn ez_terminal(const EZParams& ez, double x_floor) {
    const double g = ez.gamma;
    const double h_floor = std::pow(x_floor, 1.0 - g) / (1.0 - g);
    const double slope = std::pow(x_floor, -g);
    return [g, x_floor, h_floor, slope](std::span<const double> x) {
        if (x[0] >= x_floor) return std::pow(x[0], 1.0 - g) / (1.0 - g);
        return h_floor + slope * (x[0] - x_floor);
    };
}

/// Wealth equation dX = [r X + (b - r) pi X - c] dt + sigma pi X dB with control v = (pi, c), the
/// Epstein-Zin driver and terminal utility; runs the coefficient and driver audits.
inline EzProblem build_problem(const MarketSpec& market, const EZParams& ez) {
    require(market.r && market.b && market.sigma, "market coefficients are missing");
    require(market.x0 > 0.0, "initial wealth must be positive");
    require(market.horizon > 0.0, "horizon must be positive");
    require(market.pi_lower < market.pi_upper, "portfolio bounds must be ordered");
    require(market.floor_fraction > 0.0 && market.floor_fraction < 1.0 && market.cap_multiple > 1.0,
            "wealth box must contain x0");
    EzProblem out;
    out.market = market;
    out.ez = ez;
    out.regime = classify_regime(ez);
    DriverSpec spec = epstein_zin_driver(ez, market.a1, market.a2);

    const double T = market.horizon;
    for (const auto& [fn, name] : {std::pair{&market.r, "r"}, std::pair{&market.b, "b"}, std::pair{&market.sigma, "sigma"}})
        audit_continuity(*fn, T, name);

    out.x_floor = market.floor_fraction * market.x0;
    out.x_max = market.cap_multiple * market.x0;
    spec.h = ez_terminal(ez, out.x_floor);
    spec.constants.lambda = std::pow(out.x_floor, -ez.gamma);

    double r_max = 0.0, excess_max = 0.0, sigma_max = 0.0;
    for (double t : linspace(0.0, T, 1001)) {
        r_max = std::max(r_max, std::abs(market.r(t)));
        excess_max = std::max(excess_max, std::abs(market.b(t) - market.r(t)));
        sigma_max = std::max(sigma_max, std::abs(market.sigma(t)));
    }
    out.deterministic = sigma_max == 0.0;
    const double pi_abs = std::max(std::abs(market.pi_lower), std::abs(market.pi_upper));

    ControlledSDE sde;
    sde.dim_state = 1;
    sde.dim_noise = 1;
    sde.horizon = T;
    sde.controls = ControlSet::box({market.pi_lower, market.a1}, {market.pi_upper, market.a2});
    sde.domain = {{out.x_floor}, {out.x_max}};
    const RateFn r = market.r, b = market.b, sigma = market.sigma;
    sde.drift = [r, b](double t, std::span<const double> x, std::span<const double> v, std::span<double> o) {
        o[0] = r(t) * x[0] + (b(t) - r(t)) * v[0] * x[0] - v[1];
    };
    sde.diffusion = [sigma](double t, std::span<const double> x, std::span<const double> v, std::span<double> o) {
        o[0] = sigma(t) * v[0] * x[0];
    };
    // Multiplicative update of the investment part, then consumption; a step that would push wealth
    // below a tiny positive level (1e-6 x_floor) stops there and reports a clamp.
    const double x_min = 1e-6 * out.x_floor;
    sde.step = [r, b, sigma, x_min](double t, double dt, std::span<const double> x, std::span<const double> v,
                                    std::span<const double> dB, std::span<double> o) {
        const double s = sigma(t) * v[0];
        const double growth = std::exp((r(t) + (b(t) - r(t)) * v[0] - 0.5 * s * s) * dt + s * dB[0]);
        const double next = x[0] * growth - v[1] * dt;
        if (next < x_min) {
            o[0] = x_min;
            return true;
        }
        o[0] = next;
        return false;
    };
    // Partial-derivative bounds of b and sigma in x, pi and c on the box.
    out.sde_lipschitz = (r_max + excess_max * pi_abs) + excess_max * out.x_max + 1.0 + sigma_max * pi_abs +
                        sigma_max * out.x_max;
    out.sde_audit = audit_lipschitz(sde, out.sde_lipschitz);
    if (out.sde_audit.violations > 0)
        fail(Errc::condition_audit_failed, "H2: wealth coefficients exceed the declared Lipschitz constant");

    AuditBox box;
    box.t_lower = 0.0;
    box.t_upper = T;
    box.x_lower = {out.x_floor};
    box.x_upper = {out.x_max};
    const double h_lo = spec.h(std::span<const double>(&out.x_floor, 1));
    const double h_hi = spec.h(std::span<const double>(&out.x_max, 1));
    if (out.regime.regime == Regime::case_i) {
        box.y_lower = 2.0 * h_lo;
        box.y_upper = 0.5 * h_hi;
    } else {
        box.y_lower = 0.5 * h_lo;
        box.y_upper = 2.0 * h_hi;
    }
    box.v_lower = {market.pi_lower, market.a1};
    box.v_upper = {market.pi_upper, market.a2};
    out.audit_box = box;
    out.driver_audit = audit_conditions(spec, box);
    if (!out.driver_audit.passed()) {
        const auto& v = out.driver_audit.violations.front();
        fail(Errc::condition_audit_failed, v.condition + ": Epstein-Zin driver audit failed, quotient " +
                                               fmt17(v.quotient) + " > declared " + fmt17(v.declared));
    }
    out.problem.name = std::string("epstein_zin_") + regime_name(out.regime.regime);
    out.problem.sde = std::move(sde);
    out.problem.spec = std::move(spec);
    return out;
}

// ---------------------------------------------------------------------------
// Scenario run
// ---------------------------------------------------------------------------

struct ScenarioConfig {
    std::size_t fine_nodes = 200;
    std::size_t coarse_nodes = 100;
    std::vector<std::size_t> control_resolution{9, 9};
    double cfl_safety = 0.9;
    Boundary boundary = Boundary::dirichlet;
    double trust_margin = 0.2;
    Vec cross_check_x{0.5, 1.0, 2.0};  // multiples of x0, at t = 0
    std::vector<std::pair<double, double>> dpp_probes{{0.0, 0.5}, {0.2, 0.75}, {0.4, 1.0}, {0.6, 1.5}, {0.8, 2.0}};
    double dpp_delta_fraction = 0.1;    // delta = fraction * T
    McConfig dpp_mc{20000, 20, 1};
    McConfig brute_mc{20000, 50, 1};
    std::size_t brute_pieces = 1;
    double tol_factor = 5.0;
    RegressionConfig reg;
};

struct CrossCheckRow {
    double t = 0.0;
    double x = 0.0;
    double u_pde = 0.0;
    double u_mc = 0.0;
    double mc_stderr = 0.0;
    double refinement_delta = 0.0;
    double tolerance = 0.0;
    double signed_diff = 0.0;  // u_pde - u_mc
    bool pass = false;
    Vec best_control;
};

struct ScenarioReport {
    ValueGrid fine;
    ValueGrid coarse;
    std::vector<CrossCheckRow> cross_check;
    DppReport dpp;
    RegularityResult regularity_fine;
    RegularityResult regularity_coarse;
    bool monotone_in_x = true;
    double min_wealth = kInf;
    std::uint64_t clamp_events = 0;
};

inline SpaceTimeGrid ez_grid(const EzProblem& ez, std::size_t nodes, const ControlGrid& cgrid, const ScenarioConfig& cfg) {
    return make_cfl_grid({Axis{ez.x_floor, ez.x_max, nodes}}, 0.0, ez.market.horizon, ez.problem.sde, cgrid,
                         cfg.boundary, cfg.cfl_safety);
}

/// Solves the value surface on two grids; the coarse one supplies the refinement delta.
inline std::pair<ValueGrid, ValueGrid> ez_value_surfaces(const EzProblem& ez, const ScenarioConfig& cfg,
                                                         const ControlGrid& cgrid) {
    const auto gf = ez_grid(ez, cfg.fine_nodes, cgrid, cfg);
    const auto gc = ez_grid(ez, cfg.coarse_nodes, cgrid, cfg);
    return {solve_hjb(gf, ez.problem.sde, ez.problem.spec, cgrid), solve_hjb(gc, ez.problem.sde, ez.problem.spec, cgrid)};
}

/// Value surface, brute-force cross-check, DPP verification and regularity diagnostics.
inline ScenarioReport run_scenario(const EzProblem& ez, const ScenarioConfig& cfg) {
    ScenarioReport rep;
    const ControlGrid cgrid = ControlGrid::uniform(ez.problem.sde.controls, cfg.control_resolution);
    auto [fine, coarse] = ez_value_surfaces(ez, cfg, cgrid);
    rep.fine = std::move(fine);
    rep.coarse = std::move(coarse);
    const double x0 = ez.market.x0;

    for (double mult : cfg.cross_check_x) {
        CrossCheckRow row;
        row.x = mult * x0;
        const Vec x{row.x};
        row.u_pde = rep.fine.interpolate(0.0, x);
        row.refinement_delta = std::abs(row.u_pde - rep.coarse.interpolate(0.0, x));
        const auto bf = brute_force_value(ez.problem, 0.0, x, cgrid, cfg.brute_pieces, cfg.brute_mc, cfg.reg);
        row.u_mc = bf.value;
        row.mc_stderr = bf.stderr_;
        row.best_control = bf.best.front();
        row.signed_diff = row.u_pde - row.u_mc;
        row.tolerance = cfg.tol_factor * row.mc_stderr + row.refinement_delta;
        row.pass = std::abs(row.signed_diff) <= row.tolerance;
        rep.cross_check.push_back(row);
    }

    DppConfig dcfg;
    dcfg.delta = cfg.dpp_delta_fraction * ez.market.horizon;
    dcfg.tol_factor = cfg.tol_factor;
    dcfg.mc = cfg.dpp_mc;
    dcfg.reg = cfg.reg;
    std::vector<std::pair<double, Vec>> probes;
    for (const auto& [t, mult] : cfg.dpp_probes) probes.push_back({t, Vec{mult * x0}});
    rep.dpp = verify_dpp(rep.fine, rep.coarse, ez.problem, probes, cgrid, dcfg);
    rep.dpp.trust_margin = cfg.trust_margin;

    rep.regularity_fine = regularity_probe(rep.fine, rep.fine.grid.trust_region(cfg.trust_margin));
    rep.regularity_coarse = regularity_probe(rep.coarse, rep.coarse.grid.trust_region(cfg.trust_margin));
    for (std::size_t i = 1; i < rep.fine.nodes(); ++i)
        if (rep.fine.at(0, i) < rep.fine.at(0, i - 1)) rep.monotone_in_x = false;

    // Positivity of simulated wealth under the extreme admissible controls.
    const auto& set = ez.problem.sde.controls;
    for (const Vec& v : {Vec{set.lower[0], set.upper[1]}, Vec{set.upper[0], set.upper[1]}}) {
        const auto bundle = simulate_paths(ez.problem.sde, ControlPolicy::constant(v), Vec{x0}, cfg.brute_mc.steps,
                                           std::min<std::size_t>(cfg.brute_mc.paths, 5000), cfg.brute_mc.seed);
        for (double s : bundle.states) rep.min_wealth = std::min(rep.min_wealth, s);
        rep.clamp_events += bundle.clamp_events;
    }
    return rep;
}

/// Writes value_grid.csv, bsde_probes.csv and dpp_report.json into dir.
inline void write_scenario_outputs(const ScenarioReport& rep, const std::string& dir) {
    std::filesystem::create_directories(dir);
    write_value_grid_csv(rep.fine, (std::filesystem::path(dir) / "value_grid.csv").string());
    const auto probes_path = (std::filesystem::path(dir) / "bsde_probes.csv").string();
    std::ofstream os(probes_path);
    if (!os) fail(Errc::io_error, "cannot open " + probes_path);
    os << "t,x,u_pde,u_mc,mc_stderr,refinement_delta,tolerance,signed_diff,pass,best_pi,best_c\n";
    for (const auto& r : rep.cross_check) {
        os << fmt17(r.t) << ',' << fmt17(r.x) << ',' << fmt17(r.u_pde) << ',' << fmt17(r.u_mc) << ','
           << fmt17(r.mc_stderr) << ',' << fmt17(r.refinement_delta) << ',' << fmt17(r.tolerance) << ','
           << fmt17(r.signed_diff) << ',' << (r.pass ? 1 : 0) << ',' << fmt17(r.best_control[0]) << ','
           << fmt17(r.best_control[1]) << '\n';
    }
    const auto dpp_path = (std::filesystem::path(dir) / "dpp_report.json").string();
    std::ofstream js(dpp_path);
    if (!js) fail(Errc::io_error, "cannot open " + dpp_path);
    dump17(to_json(rep.dpp), js);
    js << '\n';
}

}  // namespace rcl
