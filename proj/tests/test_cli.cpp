#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "rcl/cli.hpp"

using namespace rcl;
using cli::json;
namespace fs = std::filesystem;

namespace {

const fs::path kSource = RCL_SOURCE_DIR;

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

json minimal_ez() {
    return json::parse(R"({
        "problem": {"kind": "ez_market", "market": {"r": 0.02, "b": 0.05, "sigma": 0.2}},
        "driver": {"name": "epstein_zin", "params": {"delta": 0.1, "gamma": 2.0, "psi": 2.0}}
    })");
}

std::vector<std::string> schema_errors(const json& doc) {
    try {
        cli::validate_config(doc);
    } catch (const cli::ConfigErrors& e) {
        return e.errors;
    }
    return {};
}

bool mentions(const std::vector<std::string>& errs, const std::string& needle) {
    for (const auto& e : errs)
        if (e.find(needle) != std::string::npos) return true;
    return false;
}

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string(RCL_CLI_PATH) + " " + args + " 2> " + log.string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path fresh_dir(const std::string& name) {
    const fs::path d = fs::temp_directory_path() / ("rcl_cli_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

/// Every artifact except scenario_meta.json compared byte for byte; the meta file without generated_at.
void expect_same_artifacts(const fs::path& a, const fs::path& b) {
    std::size_t files = 0;
    for (const auto& e : fs::directory_iterator(a)) {
        const auto name = e.path().filename();
        ASSERT_TRUE(fs::exists(b / name)) << name;
        if (name == "scenario_meta.json") {
            auto ma = json::parse(slurp(e.path()));
            auto mb = json::parse(slurp(b / name));
            ma.erase("generated_at");
            mb.erase("generated_at");
            EXPECT_EQ(ma.dump(), mb.dump());
        } else {
            EXPECT_EQ(slurp(e.path()), slurp(b / name)) << name;
        }
        ++files;
    }
    EXPECT_GE(files, 2u);
}

}  // namespace

TEST(Schema, MinimalEzFillsDefaults) {
    const json cfg = cli::validate_config(minimal_ez());
    EXPECT_EQ(cfg["seed"], 1);
    EXPECT_EQ(cfg["problem"]["market"]["x0"], 1.0);
    EXPECT_EQ(cfg["problem"]["market"]["pi_bounds"], json::array({-1.0, 1.0}));
    EXPECT_EQ(cfg["driver"]["terminal"], "ez");
    EXPECT_EQ(cfg["solver"]["grid"]["fine_nodes"], 200);
    EXPECT_EQ(cfg["solver"]["grid"]["boundary"], "dirichlet");
    EXPECT_EQ(cfg["solver"]["regression"]["degree"], 3);
    EXPECT_EQ(cfg["solver"]["dpp"]["probes"].size(), 5u);
    EXPECT_EQ(cfg["run"]["csv_paths"], 100);
    EXPECT_FALSE(cfg["run"].contains("control"));
    // Resolving twice is a fixed point.
    EXPECT_EQ(cli::validate_config(cfg).dump(), cfg.dump());
}

TEST(Schema, GammaOneCitesConstraint) {
    json doc = minimal_ez();
    doc["driver"]["params"]["gamma"] = 1.0;
    const auto errs = schema_errors(doc);
    ASSERT_EQ(errs.size(), 1u);
    EXPECT_NE(errs[0].find("/driver/params/gamma"), std::string::npos);
    EXPECT_NE(errs[0].find("gamma != 1"), std::string::npos);
}

TEST(Schema, UnknownKeyListsPath) {
    json doc = minimal_ez();
    doc["problem"]["market"]["sigma_typo"] = 0.3;
    const auto errs = schema_errors(doc);
    ASSERT_EQ(errs.size(), 1u);
    EXPECT_EQ(errs[0], "/problem/market/sigma_typo: unknown key");
}

TEST(Schema, ListsAllErrors) {
    json doc = minimal_ez();
    doc["problem"]["market"]["sigma_typo"] = 0.3;
    doc["driver"]["params"]["psi"] = 1.0;
    doc["solver"]["grid"]["boundary"] = "periodic";
    doc["solver"]["paths"] = 1.5;
    doc["extra"] = true;
    doc["problem"]["market"].erase("b");
    const auto errs = schema_errors(doc);
    EXPECT_EQ(errs.size(), 6u);
    for (const char* p : {"/problem/market/sigma_typo", "/driver/params/psi", "/solver/grid/boundary", "/solver/paths",
                          "/extra", "/problem/market/b"})
        EXPECT_TRUE(mentions(errs, p)) << p;
}

TEST(Schema, RangeAndCrossFieldChecks) {
    json doc = minimal_ez();
    doc["problem"]["market"]["sigma"] = -0.1;
    doc["problem"]["market"]["a1"] = 2.0;
    doc["problem"]["market"]["r"] = json{{"times", {0.0, 0.0}}, {"values", {0.1, 0.2}}};
    doc["solver"]["grid"]["cfl_safety"] = 1.5;
    const auto errs = schema_errors(doc);
    EXPECT_TRUE(mentions(errs, "/problem/market/sigma: value"));
    EXPECT_TRUE(mentions(errs, "/problem/market/a2: must exceed a1"));
    EXPECT_TRUE(mentions(errs, "/problem/market/r/times/1"));
    EXPECT_TRUE(mentions(errs, "/solver/grid/cfl_safety"));
}

TEST(Schema, DriverAndProblemMustAgree) {
    json doc = minimal_ez();
    doc["driver"] = json{{"name", "linear"}};
    EXPECT_TRUE(mentions(schema_errors(doc), "needs the epstein_zin driver"));
    doc["driver"] = json{{"name", "cubic"}};
    EXPECT_TRUE(mentions(schema_errors(doc), "/driver/name: 'cubic' is not one of"));
    doc.erase("driver");
    EXPECT_TRUE(mentions(schema_errors(doc), "/driver: required"));
}

TEST(Schema, MalformedJsonAndMissingFile) {
    try {
        cli::parse_config_text("{\"seed\": ");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::config_error);
    }
    try {
        cli::parse_config("/nonexistent/scenario.json");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::io_error);
    }
}

TEST(Schema, ShippedScenariosValidate) {
    for (const char* f : {"ez_case_i.json", "ez_small.json", "gbm_linear.json", "audit_square.json", "cfl_violation.json"})
        EXPECT_NO_THROW(cli::parse_config((kSource / "scenarios" / f).string())) << f;
}

TEST(Seed, FlagBeatsEnvironmentBeatsConfig) {
    json cfg = cli::validate_config(minimal_ez());
    ::unsetenv("RCL_SEED");
    cli::apply_seed_override(cfg, std::nullopt);
    EXPECT_EQ(cfg["seed"], 1);
    ::setenv("RCL_SEED", "42", 1);
    cli::apply_seed_override(cfg, std::nullopt);
    EXPECT_EQ(cfg["seed"], 42);
    cli::apply_seed_override(cfg, 9u);
    EXPECT_EQ(cfg["seed"], 9);
    ::setenv("RCL_SEED", "abc", 1);
    EXPECT_THROW(cli::apply_seed_override(cfg, std::nullopt), cli::ConfigErrors);
    ::unsetenv("RCL_SEED");
}

TEST(Json, FloatsUseSeventeenDigits) {
    json j = {{"a", 0.1}, {"b", json::array({1.0, 2})}, {"c", json::object()}, {"d", nullptr}, {"e", "s"}};
    const std::string s = dump17(j);
    EXPECT_NE(s.find("0.10000000000000001"), std::string::npos);
    EXPECT_NE(s.find("1.0"), std::string::npos);
    EXPECT_EQ(json::parse(s), j);
    EXPECT_EQ(dump17(json{{"x", json_number(kInf)}}), "{\n  \"x\": null\n}");
}

TEST(Model, RateKnotsInterpolate) {
    const auto r = cli::make_rate(json{{"times", {0.0, 1.0}}, {"values", {0.02, 0.04}}});
    EXPECT_DOUBLE_EQ(r(-1.0), 0.02);
    EXPECT_DOUBLE_EQ(r(0.5), 0.03);
    EXPECT_DOUBLE_EQ(r(2.0), 0.04);
}

TEST(Dispatch, LinearBsdeMatchesOracle) {
    const json cfg = cli::parse_config((kSource / "scenarios" / "gbm_linear.json").string());
    const fs::path out = fresh_dir("bsde");
    std::ostringstream err;
    ASSERT_EQ(cli::dispatch("solve-bsde", cfg, out, err), 0) << err.str();
    const json s = json::parse(slurp(out / "bsde_summary.json"));
    // E[e^{mu T} X_T] = e^{mu T} x0 e^{b T} for GBM drift b = 0.05 and mu = -0.5.
    const double oracle = std::exp(-0.5 + 0.05);
    EXPECT_LE(std::abs(s["y0"].get<double>() - oracle), 4.0 * s["y0_stderr"].get<double>() + 1e-3);
    const json meta = json::parse(slurp(out / "scenario_meta.json"));
    EXPECT_EQ(meta["subcommand"], "solve-bsde");
    EXPECT_EQ(meta["config"].dump(), cfg.dump());
    EXPECT_TRUE(meta.contains("generated_at"));
    EXPECT_FALSE(meta.dump().find("threads") != std::string::npos);
}

TEST(Dispatch, HjbMatchesClosedFormAndCfl) {
    json cfg = cli::parse_config((kSource / "scenarios" / "cfl_violation.json").string());
    const fs::path out = fresh_dir("hjb");
    std::ostringstream err;
    EXPECT_EQ(cli::dispatch("solve-hjb", cfg, out, err), 3);
    EXPECT_NE(err.str().find("SchemeNotMonotone"), std::string::npos);
    cfg["solver"]["grid"].erase("time_steps");
    std::ostringstream err2;
    ASSERT_EQ(cli::dispatch("solve-hjb", cfg, out, err2), 0) << err2.str();
    // u(0, 0) = x^2 + sigma^2 T at x = 0.
    const json s = json::parse(slurp(out / "hjb_summary.json"));
    EXPECT_NEAR(s["u_t0_x0"].get<double>(), 0.04, 1e-3);
    EXPECT_GT(s["cfl_margin"].get<double>(), 0.0);
}

TEST(Dispatch, AuditExitCodes) {
    const fs::path out = fresh_dir("audit");
    std::ostringstream err;
    const json sq = cli::parse_config((kSource / "scenarios" / "audit_square.json").string());
    EXPECT_EQ(cli::dispatch("audit-driver", sq, out, err), 1);
    const json a = json::parse(slurp(out / "audit.json"));
    EXPECT_FALSE(a["passed"].get<bool>());
    ASSERT_FALSE(a["violations"].empty());
    EXPECT_EQ(a["violations"][0]["condition"], "H5");
    // Oracle: (y - y')(y^2 - y'^2) / (y - y')^2 = y + y' is positive somewhere on the box.
    EXPECT_GT(a["estimated"]["mu"].get<double>(), 3.9);
    json fixed = sq;
    fixed["driver"]["declared"]["mu"] = 4.0;
    fixed["driver"]["declared"]["kappa"] = 1.0;
    fixed["driver"]["declared"]["p"] = 2.0;
    std::ostringstream err2;
    EXPECT_EQ(cli::dispatch("audit-driver", fixed, out, err2), 0) << err2.str();
    std::ostringstream err3;
    EXPECT_EQ(cli::dispatch("solve-bsde", sq, out, err3), 2);
    EXPECT_NE(err3.str().find("ConditionAuditFailed"), std::string::npos);
}

TEST(Dispatch, CompareOrdersShiftedDriver) {
    json cfg = cli::parse_config((kSource / "scenarios" / "gbm_linear.json").string());
    cfg["solver"]["paths"] = 4000;
    cfg["solver"]["steps"] = 30;
    const fs::path out = fresh_dir("compare");
    std::ostringstream err;
    ASSERT_EQ(cli::dispatch("compare", cfg, out, err), 0) << err.str();
    const json c = json::parse(slurp(out / "comparison.json"));
    EXPECT_TRUE(c["ordered"].get<bool>());
    EXPECT_LT(c["worst_violation"].get<double>(), 0.0);
}

TEST(Dispatch, InvalidControlIsConfigError) {
    json cfg = cli::parse_config((kSource / "scenarios" / "ez_small.json").string());
    cfg["run"]["control"] = json::array({3.0, 0.2});
    std::ostringstream err;
    EXPECT_EQ(cli::dispatch("simulate", cfg, fresh_dir("ctl"), err), 2);
    EXPECT_NE(err.str().find("InvalidControl"), std::string::npos);
}

TEST(Binary, ExitCodeContract) {
    const fs::path d = fresh_dir("bin");
    const std::string sc = (kSource / "scenarios").string();
    EXPECT_EQ(run_cli("audit-driver --scenario " + sc + "/audit_square.json --out " + (d / "a").string(), d / "a.log"), 1);
    EXPECT_EQ(run_cli("solve-hjb --scenario " + sc + "/cfl_violation.json --out " + (d / "b").string(), d / "b.log"), 3);
    EXPECT_NE(slurp(d / "b.log").find("SchemeNotMonotone"), std::string::npos);
    std::ofstream(d / "bad.json") << R"({"problem": {"kind": "ez_market", "market": {"r": 0.02, "b": 0.05, "sigma": 0.2}},
        "driver": {"name": "epstein_zin", "params": {"gamma": 1.0}}, "sigma_typo": 1})";
    EXPECT_EQ(run_cli("ez-demo --scenario " + (d / "bad.json").string() + " --out " + (d / "c").string(), d / "c.log"), 2);
    const std::string log = slurp(d / "c.log");
    EXPECT_NE(log.find("/driver/params/gamma"), std::string::npos);
    EXPECT_NE(log.find("/sigma_typo: unknown key"), std::string::npos);
    EXPECT_EQ(run_cli("solve-hjb --out " + (d / "e").string(), d / "e.log"), 2);
    EXPECT_EQ(run_cli("frobnicate --scenario x", d / "f.log"), 2);
}

TEST(Binary, ByteIdenticalAcrossThreads) {
    const fs::path d = fresh_dir("threads");
    const std::string sc = (kSource / "scenarios" / "ez_small.json").string();
    for (const char* sub : {"ez-demo", "solve-bsde", "simulate"}) {
        for (const char* k : {"1", "2", "4"}) {
            const fs::path out = d / sub / k;
            ASSERT_EQ(run_cli(std::string(sub) + " --scenario " + sc + " --threads " + k + " --out " + out.string(),
                              d / "log"),
                      0)
                << sub << " " << slurp(d / "log");
        }
        expect_same_artifacts(d / sub / "1", d / sub / "2");
        expect_same_artifacts(d / sub / "1", d / sub / "4");
    }
}

TEST(Binary, SeedFlagChangesResults) {
    const fs::path d = fresh_dir("seed");
    const std::string sc = (kSource / "scenarios" / "gbm_linear.json").string();
    ASSERT_EQ(run_cli("simulate --scenario " + sc + " --out " + (d / "a").string(), d / "log"), 0);
    ASSERT_EQ(run_cli("simulate --scenario " + sc + " --seed 12 --out " + (d / "b").string(), d / "log"), 0);
    EXPECT_NE(slurp(d / "a" / "paths.csv"), slurp(d / "b" / "paths.csv"));
    EXPECT_EQ(json::parse(slurp(d / "b" / "scenario_meta.json"))["seed"], 12);
}
