#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "rcl/ez_example.hpp"

using namespace rcl;

namespace {

const EZParams kCaseOne{0.1, 2.0, 2.0};

EzProblem shipped() { return build_problem(MarketSpec::constant(0.02, 0.05, 0.2), kCaseOne); }

std::string slurp(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

ScenarioConfig small_config() {
    ScenarioConfig cfg;
    cfg.fine_nodes = 60;
    cfg.coarse_nodes = 30;
    cfg.control_resolution = {3, 3};
    cfg.dpp_mc = {2000, 10, 3};
    cfg.brute_mc = {2000, 20, 3};
    return cfg;
}

}  // namespace

TEST(BuildProblem, ShippedCaseOne) {
    const EzProblem ez = shipped();
    EXPECT_EQ(ez.regime.regime, Regime::case_i);
    EXPECT_TRUE(ez.problem.spec.audited);
    EXPECT_TRUE(ez.driver_audit.passed());
    EXPECT_LE(ez.driver_audit.mu_hat, ez.problem.spec.constants.mu + 1e-9);
    EXPECT_EQ(ez.sde_audit.violations, 0u);
    EXPECT_LT(ez.audit_box.y_upper, 0.0);
    EXPECT_DOUBLE_EQ(ez.x_floor, 0.05);
    EXPECT_DOUBLE_EQ(ez.x_max, 4.0);
    EXPECT_EQ(ez.problem.spec.y_upper, 0.0);
    EXPECT_FALSE(ez.deterministic);
}

TEST(BuildProblem, CaseTwoAndRegimeErrors) {
    const auto two = build_problem(MarketSpec::constant(0.02, 0.05, 0.2), EZParams{0.1, 0.5, 0.5});
    EXPECT_EQ(two.regime.regime, Regime::case_ii);
    EXPECT_GT(two.audit_box.y_lower, 0.0);
    MarketSpec zero_floor = MarketSpec::constant(0.02, 0.05, 0.2);
    zero_floor.a1 = 0.0;
    try {
        build_problem(zero_floor, EZParams{0.1, 0.5, 0.5});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::unsupported_regime);
    }
    EXPECT_NO_THROW(build_problem(zero_floor, kCaseOne));
    try {
        build_problem(MarketSpec::constant(0.02, 0.05, 0.2), EZParams{0.1, 2.0, 0.5});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::unsupported_regime);
    }
}

TEST(BuildProblem, DegenerateMarketIsDeterministic) {
    const auto ez = build_problem(MarketSpec::constant(0.02, 0.05, 0.0), kCaseOne);
    EXPECT_TRUE(ez.deterministic);
    const auto b = simulate_paths(ez.problem.sde, ControlPolicy::constant({0.5, 0.2}), Vec{1.0}, 10, 4, 1);
    EXPECT_TRUE(b.noise_free);
}

TEST(BuildProblem, DiscontinuousRateFailsAudit) {
    MarketSpec m = MarketSpec::constant(0.02, 0.05, 0.2);
    m.r = [](double t) { return t < 0.5 ? 0.02 : 0.04; };
    try {
        build_problem(m, kCaseOne);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::condition_audit_failed);
        EXPECT_NE(std::string(e.what()).find("r"), std::string::npos);
    }
    m.r = [](double t) { return 0.02 + 0.01 * std::sin(6.0 * t); };
    EXPECT_NO_THROW(build_problem(m, kCaseOne));
}

TEST(Terminal, LipschitzExtensionBelowFloor) {
    const auto h = ez_terminal(kCaseOne, 0.05);
    const auto at = [&](double x) { return h(std::span<const double>(&x, 1)); };
    EXPECT_DOUBLE_EQ(at(1.0), -1.0);
    EXPECT_DOUBLE_EQ(at(0.5), -2.0);
    EXPECT_NEAR(at(0.05), -20.0, 1e-12);
    const double lam = std::pow(0.05, -2.0);
    double worst = 0.0;
    for (double x : linspace(0.0, 4.0, 4001)) {
        EXPECT_LT(at(x), 0.0);
        worst = std::max(worst, std::abs(at(x + 1e-4) - at(x)) / 1e-4);
    }
    EXPECT_LE(worst, lam * (1.0 + 1e-9));
    const auto h2 = ez_terminal(EZParams{0.1, 0.5, 0.5}, 0.05);
    for (double x : linspace(0.0, 4.0, 101)) EXPECT_GT(h2(std::span<const double>(&x, 1)), 0.0);
}

TEST(Wealth, StaysPositiveUnderExtremeControls) {
    const EzProblem ez = shipped();
    for (const Vec& v : {Vec{-1.0, 1.0}, Vec{1.0, 1.0}, Vec{0.0, 1.0}}) {
        const auto b = simulate_paths(ez.problem.sde, ControlPolicy::constant(v), Vec{0.2}, 100, 5000, 9);
        for (double s : b.states) ASSERT_GT(s, 0.0);
        EXPECT_GT(b.clamp_events, 0u);
    }
    const auto b = simulate_paths(ez.problem.sde, ControlPolicy::constant({0.5, 0.01}), Vec{1.0}, 100, 5000, 9);
    EXPECT_EQ(b.clamp_events, 0u);
}

TEST(Wealth, StepMatchesDriftInMean) {
    // E[X_T] = x0 e^{gT} - c (e^{gT} - 1)/g for constant growth g = r + (b - r) pi.
    const EzProblem ez = shipped();
    const double pi = 0.6, c = 0.2, g = 0.02 + 0.03 * pi;
    const auto b = simulate_paths(ez.problem.sde, ControlPolicy::constant({pi, c}), Vec{1.0}, 200, 100000, 4);
    Vec xt(b.n_paths);
    for (std::size_t i = 0; i < b.n_paths; ++i) xt[i] = b.state(i, 200)[0];
    const auto ms = mean_stderr(xt);
    const double oracle = std::exp(g) - c * (std::exp(g) - 1.0) / g;
    EXPECT_LE(std::abs(ms.mean - oracle), 4.0 * ms.stderr_ + 1e-3);
}

TEST(EzHamiltonian, MatchesExhaustiveScan) {
    const EzProblem ez = shipped();
    const auto cg = ControlGrid::uniform(ez.problem.sde.controls, {9, 9});
    for (double x : {0.3, 1.0, 2.5})
        for (double r : {-3.0, -1.0, -0.2}) {
            const double p = 1.0 / (x * x), A = -2.0 / (x * x * x);
            const auto res = hamiltonian(0.3, Vec{x}, r, Vec{p}, Vec{A}, ez.problem.sde, ez.problem.spec, cg);
            double best = -kInf;
            for (const auto& v : cg.points) {
                const double s = 0.2 * v[0] * x;
                const double drift = 0.02 * x + 0.03 * v[0] * x - v[1];
                // (gamma, psi) = (2, 2): f = 0.2 (-r) (sqrt(-c r) - 1).
                const double f = 0.2 * (-r) * (std::sqrt(-v[1] * r) - 1.0);
                best = std::max(best, 0.5 * s * s * A + p * drift + f);
            }
            EXPECT_NEAR(res.value, best, 1e-12 * (1.0 + std::abs(best)));
        }
}

TEST(EzValue, SingleControlMatchesBsde) {
    const EzProblem ez = shipped();
    const Vec v{0.5, 0.3};
    const auto cg = ControlGrid::from_points({v});
    ScenarioConfig cfg;
    cfg.fine_nodes = 160;
    cfg.coarse_nodes = 80;
    const auto [fine, coarse] = ez_value_surfaces(ez, cfg, cg);
    const auto policy = ControlPolicy::constant(v);
    const auto bundle = simulate_paths(ez.problem.sde, policy, Vec{1.0}, 100, 20000, 5);
    const auto sol = solve_bsde(bundle, ez.problem.spec, policy);
    const double pde = fine.interpolate(0.0, Vec{1.0});
    const double ref = std::abs(pde - coarse.interpolate(0.0, Vec{1.0}));
    EXPECT_LE(std::abs(pde - sol.y0), 5.0 * sol.y0_stderr + ref + 2e-3) << pde << " " << sol.y0;
    // Utility domain: every Y of the recursion stays negative.
    for (double y : sol.y_paths) ASSERT_LT(y, 0.0);
}

TEST(EzValue, MonotoneInWealth) {
    const EzProblem ez = shipped();
    const auto cg = ControlGrid::uniform(ez.problem.sde.controls, {5, 5});
    ScenarioConfig cfg;
    cfg.fine_nodes = 80;
    cfg.coarse_nodes = 40;
    const auto [fine, coarse] = ez_value_surfaces(ez, cfg, cg);
    for (std::size_t k = 0; k <= fine.grid.time_steps; k += 7)
        for (std::size_t i = 1; i < fine.nodes(); ++i) ASSERT_GE(fine.at(k, i), fine.at(k, i - 1));
    for (double u : fine.values) ASSERT_LT(u, 0.0);
}

TEST(EzValue, DomainViolationIsNotExtended) {
    const EzProblem ez = shipped();
    const auto policy = ControlPolicy::constant({0.5, 0.3});
    const auto bundle = simulate_paths(ez.problem.sde, policy, Vec{1.0}, 10, 200, 5);
    Vec eta(bundle.n_paths, 0.5);  // positive utility is outside the case (i) domain
    try {
        backward_semigroup(bundle, ez.problem.spec, policy, 10, eta);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::domain_violation);
    }
}

TEST(Scenario, SmallRunIsReproducible) {
    const EzProblem ez = shipped();
    const ScenarioConfig cfg = small_config();
    const auto dir = std::filesystem::temp_directory_path() / "rcl_ez_small";
    std::filesystem::remove_all(dir);
    const auto a = run_scenario(ez, cfg);
    write_scenario_outputs(a, (dir / "a").string());
    set_threads(3);
    const auto b = run_scenario(ez, cfg);
    set_threads(1);
    write_scenario_outputs(b, (dir / "b").string());
    for (const char* f : {"value_grid.csv", "bsde_probes.csv", "dpp_report.json"})
        EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
    EXPECT_EQ(a.cross_check.size(), 3u);
    EXPECT_EQ(a.dpp.probes.size(), 5u);
    EXPECT_GT(a.min_wealth, 0.0);
    EXPECT_TRUE(a.monotone_in_x);
    for (const auto& p : a.dpp.probes) {
        EXPECT_FALSE(p.skipped);
        EXPECT_GT(p.tolerance, 0.0);
    }
    const auto js = nlohmann::json::parse(slurp(dir / "a" / "dpp_report.json"));
    EXPECT_TRUE(js["summary"].contains("pass"));
    EXPECT_TRUE(js["probes"][0]["decomposition"].contains("refinement_delta"));
    std::filesystem::remove_all(dir);
}
