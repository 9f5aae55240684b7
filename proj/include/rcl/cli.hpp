#pragma once

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"

#include "rcl/aggregator.hpp"
#include "rcl/bsde.hpp"
#include "rcl/dpp.hpp"
#include "rcl/ez_example.hpp"
#include "rcl/hjb.hpp"
#include "rcl/problem.hpp"
#include "rcl/sde.hpp"

namespace rcl::cli {

using json = nlohmann::ordered_json;

inline constexpr const char* kVersion = "0.1.0";

inline const std::vector<std::pair<std::string, std::string>>& subcommands() {
    static const std::vector<std::pair<std::string, std::string>> names{
        {"simulate", "simulate state paths under run.control"},
        {"solve-bsde", "LSMC solution of the BSDE under run.control"},
        {"solve-hjb", "value surface on the fine grid"},
        {"verify-dpp", "DPP residuals at the configured probes"},
        {"compare", "ordering of the driver against a downward-shifted copy"},
        {"ez-demo", "full Epstein-Zin scenario: value, cross-check, DPP, regularity"},
        {"audit-driver", "sample-based audit of the declared driver constants"}};
    return names;
}

// ---------------------------------------------------------------------------
// Schema
// ---------------------------------------------------------------------------

/// One node of the configuration schema. Objects list their fields; absent fields take the default,
/// or are reported missing when the default is null and the field is not optional.
struct Rule {
    enum class Type { number, integer, boolean, string, object, numbers, integers, pairs, rate };
    Type type = Type::number;
    json def;
    bool optional = false;
    double lo = -kInf;
    double hi = kInf;
    bool lo_open = false;
    std::vector<std::string> choices;
    std::vector<std::pair<std::string, Rule>> fields;
    std::size_t min_items = 0;
    std::string note;  // constraint text used in messages

    static Rule num(json d, double lo = -kInf, double hi = kInf, bool open = false) {
        Rule r;
        r.def = std::move(d);
        r.lo = lo;
        r.hi = hi;
        r.lo_open = open;
        return r;
    }
    static Rule integer(json d, double lo = 0, double hi = kInf) {
        Rule r = num(std::move(d), lo, hi);
        r.type = Type::integer;
        return r;
    }
    static Rule str(json d, std::vector<std::string> choices) {
        Rule r;
        r.type = Type::string;
        r.def = std::move(d);
        r.choices = std::move(choices);
        return r;
    }
    static Rule object(std::vector<std::pair<std::string, Rule>> f) {
        Rule r;
        r.type = Type::object;
        r.def = json::object();
        r.fields = std::move(f);
        return r;
    }
    static Rule list(Type t, json d, std::size_t min_items = 1) {
        Rule r;
        r.type = t;
        r.def = std::move(d);
        r.min_items = min_items;
        return r;
    }
    Rule& opt() {
        optional = true;
        def = nullptr;
        return *this;
    }
};

inline std::string describe_bound(const Rule& r) {
    if (!r.note.empty()) return r.note;
    std::string s;
    if (std::isfinite(r.lo)) s += (r.lo_open ? "> " : ">= ") + fmt17(r.lo);
    if (std::isfinite(r.hi)) s += (s.empty() ? "" : " and ") + std::string("<= ") + fmt17(r.hi);
    return s;
}

inline void check_number(const Rule& r, double v, const std::string& path, std::vector<std::string>& errors) {
    const bool low = r.lo_open ? !(v > r.lo) : !(v >= r.lo);
    if (!std::isfinite(v) || low || v > r.hi) errors.push_back(path + ": value " + fmt17(v) + " must be " + describe_bound(r));
}

inline json validate(const Rule& r, const json* value, const std::string& path, std::vector<std::string>& errors) {
    using T = Rule::Type;
    if (value == nullptr) {
        if (r.type == T::object) {
            const json empty = json::object();
            return validate(r, &empty, path, errors);
        }
        if (r.def.is_null() && !r.optional) errors.push_back(path + ": required key is missing");
        return r.def;
    }
    const json& v = *value;
    switch (r.type) {
        case T::number:
            if (!v.is_number()) {
                errors.push_back(path + ": expected a number");
                return r.def;
            }
            check_number(r, v.get<double>(), path, errors);
            return v;
        case T::integer:
            if (!v.is_number_integer() || (v.is_number_integer() && v.get<long long>() < 0 && r.lo >= 0)) {
                errors.push_back(path + ": expected a nonnegative integer");
                return r.def;
            }
            check_number(r, static_cast<double>(v.get<long long>()), path, errors);
            return v;
        case T::boolean:
            if (!v.is_boolean()) errors.push_back(path + ": expected true or false");
            return v;
        case T::string:
            if (!v.is_string()) {
                errors.push_back(path + ": expected a string");
                return r.def;
            }
            if (!r.choices.empty() &&
                std::find(r.choices.begin(), r.choices.end(), v.get<std::string>()) == r.choices.end()) {
                std::string all;
                for (const auto& c : r.choices) all += (all.empty() ? "" : ", ") + c;
                errors.push_back(path + ": '" + v.get<std::string>() + "' is not one of {" + all + "}");
            }
            return v;
        case T::numbers:
        case T::integers:
            if (!v.is_array() || v.size() < r.min_items) {
                errors.push_back(path + ": expected an array of at least " + std::to_string(r.min_items) + " numbers");
                return r.def;
            }
            for (std::size_t i = 0; i < v.size(); ++i) {
                const bool ok = r.type == T::numbers ? v[i].is_number() : (v[i].is_number_integer() && v[i].get<long long>() >= 1);
                if (!ok) errors.push_back(path + "/" + std::to_string(i) + ": expected " +
                                          (r.type == T::numbers ? "a number" : "a positive integer"));
                else if (r.type == T::numbers) check_number(r, v[i].get<double>(), path + "/" + std::to_string(i), errors);
            }
            return v;
        case T::pairs:
            if (!v.is_array() || v.size() < r.min_items) {
                errors.push_back(path + ": expected an array of [t, x] pairs");
                return r.def;
            }
            for (std::size_t i = 0; i < v.size(); ++i)
                if (!v[i].is_array() || v[i].size() != 2 || !v[i][0].is_number() || !v[i][1].is_number())
                    errors.push_back(path + "/" + std::to_string(i) + ": expected a pair [t, x]");
            return v;
        case T::rate:
            if (v.is_number()) {
                check_number(r, v.get<double>(), path, errors);
                return v;
            }
            if (v.is_object()) {
                for (auto it = v.begin(); it != v.end(); ++it)
                    if (it.key() != "times" && it.key() != "values") errors.push_back(path + "/" + it.key() + ": unknown key");
                const bool ok = v.contains("times") && v.contains("values") && v["times"].is_array() &&
                                v["values"].is_array() && v["times"].size() == v["values"].size() && v["times"].size() >= 2;
                if (!ok) {
                    errors.push_back(path + ": a time-dependent rate needs equally long 'times' and 'values' arrays (>= 2)");
                    return v;
                }
                for (std::size_t i = 0; i < v["times"].size(); ++i) {
                    if (!v["times"][i].is_number() || !v["values"][i].is_number()) {
                        errors.push_back(path + ": rate knots must be numbers");
                        return v;
                    }
                    check_number(r, v["values"][i].get<double>(), path + "/values/" + std::to_string(i), errors);
                    if (i > 0 && !(v["times"][i].get<double>() > v["times"][i - 1].get<double>()))
                        errors.push_back(path + "/times/" + std::to_string(i) + ": times must increase");
                }
                return v;
            }
            errors.push_back(path + ": expected a number or {times, values}");
            return r.def;
        case T::object: {
            if (!v.is_object()) {
                errors.push_back(path + ": expected an object");
                return r.def;
            }
            json out = json::object();
            for (auto it = v.begin(); it != v.end(); ++it) {
                const bool known = std::any_of(r.fields.begin(), r.fields.end(), [&](const auto& f) { return f.first == it.key(); });
                if (!known) errors.push_back(path + "/" + it.key() + ": unknown key");
            }
            for (const auto& [key, sub] : r.fields) {
                const json* child = v.contains(key) ? &v.at(key) : nullptr;
                json res = validate(sub, child, path + "/" + key, errors);
                if (!res.is_null() || child != nullptr) out[key] = std::move(res);
            }
            return out;
        }
    }
    return v;
}

inline Rule regression_rule() {
    return Rule::object({{"basis", Rule::str("polynomial", {"polynomial", "bins"})},
                         {"degree", Rule::integer(3, 1, 6)},
                         {"bins", Rule::integer(32, 2, 4096)},
                         {"ridge", Rule::num(1e-8, 0.0)}});
}

inline Rule market_rule() {
    Rule rate = Rule::num(nullptr);
    rate.type = Rule::Type::rate;
    Rule sigma = rate;
    sigma.lo = 0.0;
    Rule pi = Rule::list(Rule::Type::numbers, json::array({-1.0, 1.0}), 2);
    return Rule::object({{"r", rate},
                         {"b", rate},
                         {"sigma", sigma},
                         {"x0", Rule::num(1.0, 0.0, kInf, true)},
                         {"a1", Rule::num(0.01, 0.0)},
                         {"a2", Rule::num(1.0, 0.0, kInf, true)},
                         {"pi_bounds", pi},
                         {"T", Rule::num(1.0, 0.0, kInf, true)},
                         {"floor_fraction", Rule::num(0.05, 0.0, 1.0, true)},
                         {"cap_multiple", Rule::num(4.0, 1.0, kInf, true)}});
}

inline Rule sde_rule() {
    return Rule::object({{"model", Rule::str("gbm", {"gbm", "ou", "arithmetic"})},
                         {"mu", Rule::num(0.05)},
                         {"sigma", Rule::num(0.2, 0.0)},
                         {"theta", Rule::num(1.0, 0.0)},
                         {"mean", Rule::num(0.0)},
                         {"control_drift", Rule::num(0.0)},
                         {"x0", Rule::num(1.0)},
                         {"T", Rule::num(1.0, 0.0, kInf, true)},
                         {"box", Rule::list(Rule::Type::numbers, json::array({0.0, 4.0}), 2)}});
}

inline Rule driver_params_rule(const std::string& name) {
    if (name == "linear") return Rule::object({{"mu", Rule::num(-0.5)}, {"offset", Rule::num(0.0)}});
    if (name == "cubic_monotone") return Rule::object({{"mu", Rule::num(0.0)}});
    if (name == "abs") return Rule::object({{"scale", Rule::num(1.0)}});
    if (name == "square") return Rule::object({});
    Rule gamma = Rule::num(2.0, 0.0, kInf, true);
    gamma.note = "> 0 and != 1 (0 < gamma != 1)";
    Rule psi = Rule::num(2.0, 0.0, kInf, true);
    psi.note = "> 0 and != 1 (0 < psi != 1)";
    return Rule::object({{"delta", Rule::num(0.1, 0.0, kInf, true)}, {"gamma", gamma}, {"psi", psi}});
}

inline Rule driver_rule_without_params() {
    Rule declared = Rule::object({{"lambda", Rule::num(0.0, 0.0).opt()},
                                  {"mu", Rule::num(0.0).opt()},
                                  {"kappa", Rule::num(1.0, 0.0, kInf, true).opt()},
                                  {"p", Rule::num(1.0, 1.0).opt()}});
    Rule box = Rule::object({{"y", Rule::list(Rule::Type::numbers, json::array({-1.0, 1.0}), 2)}});
    return Rule::object({{"name", Rule::str(nullptr, {"linear", "cubic_monotone", "abs", "square", "epstein_zin"})},
                         {"terminal", Rule::str(nullptr, {"identity", "square", "zero", "ez"}).opt()},
                         {"declared", declared},
                         {"audit_box", box}});
}

inline Rule solver_rule() {
    Rule grid = Rule::object({{"fine_nodes", Rule::integer(200, 5, 100000)},
                              {"coarse_nodes", Rule::integer(100, 5, 100000)},
                              {"cfl_safety", Rule::num(0.9, 0.0, 1.0, true)},
                              {"time_steps", Rule::integer(0, 1).opt()},
                              {"boundary", Rule::str("dirichlet", {"dirichlet", "extrapolate"})},
                              {"trust_margin", Rule::num(0.2, 0.0, 0.45)}});
    Rule pairs = Rule::list(Rule::Type::pairs,
                            json::array({json::array({0.0, 0.5}), json::array({0.2, 0.75}), json::array({0.4, 1.0}),
                                         json::array({0.6, 1.5}), json::array({0.8, 2.0})}));
    Rule dpp = Rule::object({{"delta_fraction", Rule::num(0.1, 0.0, 1.0, true)},
                             {"paths", Rule::integer(20000, 2)},
                             {"steps", Rule::integer(20, 1)},
                             {"probes", pairs}});
    Rule brute = Rule::object({{"paths", Rule::integer(20000, 2)},
                               {"steps", Rule::integer(50, 1)},
                               {"pieces", Rule::integer(1, 1, 12)},
                               {"x", Rule::list(Rule::Type::numbers, json::array({0.5, 1.0, 2.0}))}});
    return Rule::object({{"paths", Rule::integer(100000, 2)},
                         {"steps", Rule::integer(200, 1)},
                         {"regression", regression_rule()},
                         {"grid", grid},
                         {"controls", Rule::object({{"resolution", Rule::list(Rule::Type::integers, json::array({9, 9}))}})},
                         {"dpp", dpp},
                         {"brute_force", brute},
                         {"tol_factor", Rule::num(5.0, 0.0, kInf, true)}});
}

inline Rule run_rule() {
    return Rule::object({{"control", Rule::list(Rule::Type::numbers, nullptr).opt()},
                         {"csv_paths", Rule::integer(100, 1)},
                         {"compare_offset", Rule::num(0.1, 0.0)}});
}

struct ConfigErrors : Error {
    std::vector<std::string> errors;
    explicit ConfigErrors(std::vector<std::string> e)
        : Error(Errc::config_error, join(e)), errors(std::move(e)) {}
    static std::string join(const std::vector<std::string>& e) {
        std::string s = std::to_string(e.size()) + " schema error(s)";
        for (const auto& x : e) s += "\n  " + x;
        return s;
    }
};

/// Validates a scenario document; every violation is collected with its JSON-pointer path.
inline json validate_config(const json& doc) {
    std::vector<std::string> errors;
    if (!doc.is_object()) throw ConfigErrors({": the scenario must be a JSON object"});
    for (auto it = doc.begin(); it != doc.end(); ++it)
        if (it.key() != "name" && it.key() != "seed" && it.key() != "problem" && it.key() != "driver" &&
            it.key() != "solver" && it.key() != "run")
            errors.push_back("/" + it.key() + ": unknown key");
    json out = json::object();
    out["name"] = doc.contains("name") && doc["name"].is_string() ? doc["name"] : json("scenario");
    if (doc.contains("name") && !doc["name"].is_string()) errors.push_back("/name: expected a string");
    out["seed"] = validate(Rule::integer(1, 0), doc.contains("seed") ? &doc["seed"] : nullptr, "/seed", errors);

    // problem: {kind, market | sde}
    const json* prob = doc.contains("problem") ? &doc["problem"] : nullptr;
    std::string kind = "ez_market";
    if (prob == nullptr || !prob->is_object()) {
        errors.push_back("/problem: required object is missing");
    } else {
        if (prob->contains("kind")) {
            const json k = validate(Rule::str(nullptr, {"ez_market", "sde"}), &(*prob)["kind"], "/problem/kind", errors);
            if (k.is_string()) kind = k.get<std::string>();
        }
        for (auto it = prob->begin(); it != prob->end(); ++it)
            if (it.key() != "kind" && it.key() != (kind == "sde" ? "sde" : "market"))
                errors.push_back("/problem/" + it.key() + ": unknown key");
        json p = json::object();
        p["kind"] = kind;
        if (kind == "sde") {
            p["sde"] = validate(sde_rule(), prob->contains("sde") ? &(*prob)["sde"] : nullptr, "/problem/sde", errors);
        } else {
            p["market"] = validate(market_rule(), prob->contains("market") ? &(*prob)["market"] : nullptr,
                                   "/problem/market", errors);
            const json& m = p["market"];
            if (m.contains("a1") && m.contains("a2") && m["a1"].is_number() && m["a2"].is_number() &&
                !(m["a1"].get<double>() < m["a2"].get<double>()))
                errors.push_back("/problem/market/a2: must exceed a1");
            if (m["pi_bounds"].is_array() && m["pi_bounds"].size() == 2 && m["pi_bounds"][0].is_number() &&
                m["pi_bounds"][1].is_number() && !(m["pi_bounds"][0].get<double>() < m["pi_bounds"][1].get<double>()))
                errors.push_back("/problem/market/pi_bounds: lower bound must be below the upper bound");
        }
        out["problem"] = p;
    }

    // driver: {name, params, terminal, declared, audit_box}
    const json* drv = doc.contains("driver") ? &doc["driver"] : nullptr;
    if (drv == nullptr || !drv->is_object()) {
        errors.push_back("/driver: required object is missing");
    } else {
        json without = *drv;
        without.erase("params");
        json d = validate(driver_rule_without_params(), &without, "/driver", errors);
        const std::string name = d["name"].is_string() ? d["name"].get<std::string>() : "";
        if (!name.empty()) {
            d["params"] = validate(driver_params_rule(name), drv->contains("params") ? &(*drv)["params"] : nullptr,
                                   "/driver/params", errors);
            if (name == "epstein_zin") {
                for (const char* key : {"gamma", "psi"})
                    if (d["params"][key].is_number() && d["params"][key].get<double>() == 1.0)
                        errors.push_back(std::string("/driver/params/") + key + ": value 1 is excluded (0 < " + key +
                                         " != 1)");
                if (kind != "ez_market") errors.push_back("/driver/name: epstein_zin needs problem.kind = ez_market");
            } else if (kind == "ez_market") {
                errors.push_back("/driver/name: an ez_market problem needs the epstein_zin driver");
            }
            if (!d.contains("terminal")) d["terminal"] = name == "epstein_zin" ? "ez" : "identity";
            if (d["terminal"] == "ez" && name != "epstein_zin")
                errors.push_back("/driver/terminal: 'ez' is reserved for the epstein_zin driver");
        }
        const json& y = d["audit_box"]["y"];
        if (y.is_array() && y.size() == 2 && y[0].is_number() && y[1].is_number() && !(y[0].get<double>() < y[1].get<double>()))
            errors.push_back("/driver/audit_box/y: lower bound must be below the upper bound");
        json ordered = json::object();
        for (const char* key : {"name", "terminal", "params", "declared", "audit_box"})
            if (d.contains(key)) ordered[key] = d[key];
        out["driver"] = ordered;
    }
    out["solver"] = validate(solver_rule(), doc.contains("solver") ? &doc["solver"] : nullptr, "/solver", errors);
    out["run"] = validate(run_rule(), doc.contains("run") ? &doc["run"] : nullptr, "/run", errors);
    if (!errors.empty()) throw ConfigErrors(errors);
    return out;
}

inline json parse_config_text(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigErrors({std::string(": malformed JSON: ") + e.what()});
    }
    return validate_config(doc);
}

inline json parse_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) fail(Errc::io_error, "cannot read scenario file " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config_text(ss.str());
}

// ---------------------------------------------------------------------------
// Building the model from a resolved config
// ---------------------------------------------------------------------------

inline RateFn make_rate(const json& j) {
    if (j.is_number()) {
        const double c = j.get<double>();
        return [c](double) { return c; };
    }
    Vec ts, vs;
    for (const auto& t : j["times"]) ts.push_back(t.get<double>());
    for (const auto& v : j["values"]) vs.push_back(v.get<double>());
    return [ts, vs](double t) {
        if (t <= ts.front()) return vs.front();
        if (t >= ts.back()) return vs.back();
        const auto it = std::upper_bound(ts.begin(), ts.end(), t);
        const std::size_t i = static_cast<std::size_t>(it - ts.begin());
        const double w = (t - ts[i - 1]) / (ts[i] - ts[i - 1]);
        return (1.0 - w) * vs[i - 1] + w * vs[i];
    };
}

inline MarketSpec make_market(const json& m) {
    MarketSpec s;
    s.r = make_rate(m["r"]);
    s.b = make_rate(m["b"]);
    s.sigma = make_rate(m["sigma"]);
    s.x0 = m["x0"].get<double>();
    s.a1 = m["a1"].get<double>();
    s.a2 = m["a2"].get<double>();
    s.pi_lower = m["pi_bounds"][0].get<double>();
    s.pi_upper = m["pi_bounds"][1].get<double>();
    s.horizon = m["T"].get<double>();
    s.floor_fraction = m["floor_fraction"].get<double>();
    s.cap_multiple = m["cap_multiple"].get<double>();
    return s;
}

inline ControlledSDE make_sde(const json& s) {
    ControlledSDE sde;
    const std::string model = s["model"].get<std::string>();
    const double mu = s["mu"].get<double>(), sigma = s["sigma"].get<double>(), theta = s["theta"].get<double>(),
                 mean = s["mean"].get<double>(), k = s["control_drift"].get<double>();
    sde.horizon = s["T"].get<double>();
    sde.controls = k != 0.0 ? ControlSet::box({-1.0}, {1.0}) : ControlSet::point({0.0});
    sde.domain = {{s["box"][0].get<double>()}, {s["box"][1].get<double>()}};
    if (model == "gbm") {
        sde.drift = [mu, k](double, std::span<const double> x, std::span<const double> v, std::span<double> o) {
            o[0] = mu * x[0] + k * v[0];
        };
        sde.diffusion = [sigma](double, std::span<const double> x, std::span<const double>, std::span<double> o) {
            o[0] = sigma * x[0];
        };
    } else if (model == "ou") {
        sde.drift = [theta, mean, k](double, std::span<const double> x, std::span<const double> v, std::span<double> o) {
            o[0] = theta * (mean - x[0]) + k * v[0];
        };
        sde.diffusion = [sigma](double, std::span<const double>, std::span<const double>, std::span<double> o) { o[0] = sigma; };
    } else {
        sde.drift = [mu, k](double, std::span<const double>, std::span<const double> v, std::span<double> o) {
            o[0] = mu + k * v[0];
        };
        sde.diffusion = [sigma](double, std::span<const double>, std::span<const double>, std::span<double> o) { o[0] = sigma; };
    }
    return sde;
}

inline TerminalFn make_terminal(const std::string& name) {
    if (name == "square") return [](std::span<const double> x) { return x[0] * x[0]; };
    if (name == "zero") return [](std::span<const double>) { return 0.0; };
    return [](std::span<const double> x) { return x[0]; };
}

/// Named drivers with their default declared constants on the audit box.
inline DriverSpec make_named_driver(const json& d, const StateBox& box) {
    const std::string name = d["name"].get<std::string>();
    const json& p = d["params"];
    const double y_abs = std::max(std::abs(d["audit_box"]["y"][0].get<double>()), std::abs(d["audit_box"]["y"][1].get<double>()));
    DriverSpec s;
    s.name = name;
    if (name == "linear") {
        const double mu = p["mu"].get<double>(), off = p["offset"].get<double>();
        s.f = [mu, off](double, std::span<const double>, double y, std::span<const double>, std::span<const double>) {
            return mu * y + off;
        };
        s.constants = {0.0, mu, std::max(std::abs(mu), 1e-12), 1.0};
    } else if (name == "cubic_monotone") {
        const double mu = p["mu"].get<double>();
        s.f = [mu](double, std::span<const double>, double y, std::span<const double>, std::span<const double>) {
            return -y * y * y + mu * y;
        };
        s.constants = {0.0, mu, 1.0 + std::abs(mu), 3.0};
    } else if (name == "abs") {
        const double a = p["scale"].get<double>();
        s.f = [a](double, std::span<const double>, double y, std::span<const double>, std::span<const double>) {
            return a * std::abs(y);
        };
        s.constants = {0.0, std::abs(a), std::max(std::abs(a), 1e-12), 1.0};
    } else {
        s.f = [](double, std::span<const double>, double y, std::span<const double>, std::span<const double>) { return y * y; };
        s.constants = {0.0, 2.0 * y_abs, 1.0, 2.0};
    }
    const std::string term = d["terminal"].get<std::string>();
    s.h = make_terminal(term);
    const double xmax = std::max(std::abs(box.lower[0]), std::abs(box.upper[0]));
    s.constants.lambda = term == "square" ? 2.0 * xmax : (term == "zero" ? 0.0 : 1.0);
    return s;
}

inline void apply_declared(DriverSpec& s, const json& decl) {
    if (decl.contains("lambda")) s.constants.lambda = decl["lambda"].get<double>();
    if (decl.contains("mu")) s.constants.mu = decl["mu"].get<double>();
    if (decl.contains("kappa")) s.constants.kappa = decl["kappa"].get<double>();
    if (decl.contains("p")) s.constants.p = decl["p"].get<double>();
}

struct Model {
    ControlProblem problem;
    std::optional<EzProblem> ez;
    Vec x0;
    AuditBox audit_box;
    AuditReport audit;
    bool audit_passed = true;
};

/// Builds the problem; when audit_strict is false a failing driver audit is reported instead of thrown.
inline Model build_model(const json& cfg, bool audit_strict = true) {
    Model m;
    const json& prob = cfg["problem"];
    const json& d = cfg["driver"];
    if (prob["kind"] == "ez_market") {
        const MarketSpec market = make_market(prob["market"]);
        const EZParams ez{d["params"]["delta"].get<double>(), d["params"]["gamma"].get<double>(),
                          d["params"]["psi"].get<double>()};
        if (audit_strict) {
            m.ez = build_problem(market, ez);
            m.problem = m.ez->problem;
            m.audit_box = m.ez->audit_box;
            m.audit = m.ez->driver_audit;
        } else {
            try {
                m.ez = build_problem(market, ez);
                m.problem = m.ez->problem;
                m.audit_box = m.ez->audit_box;
                m.audit = m.ez->driver_audit;
            } catch (const Error& e) {
                if (e.code() != Errc::condition_audit_failed) throw;
                m.audit_passed = false;
                throw;
            }
        }
        m.x0 = {market.x0};
        return m;
    }
    const json& s = prob["sde"];
    m.problem.sde = make_sde(s);
    m.problem.name = s["model"].get<std::string>() + "_" + d["name"].get<std::string>();
    m.problem.spec = make_named_driver(d, m.problem.sde.domain);
    apply_declared(m.problem.spec, d["declared"]);
    m.x0 = {s["x0"].get<double>()};
    AuditBox box;
    box.t_lower = 0.0;
    box.t_upper = m.problem.sde.horizon;
    box.x_lower = m.problem.sde.domain.lower;
    box.x_upper = m.problem.sde.domain.upper;
    box.y_lower = d["audit_box"]["y"][0].get<double>();
    box.y_upper = d["audit_box"]["y"][1].get<double>();
    box.v_lower = m.problem.sde.controls.lower;
    box.v_upper = m.problem.sde.controls.upper;
    m.audit_box = box;
    m.audit = audit_conditions(m.problem.spec, box);
    m.audit_passed = m.audit.passed();
    if (!m.audit_passed && audit_strict) {
        const auto& v = m.audit.violations.front();
        fail(Errc::condition_audit_failed, v.condition + " violated by driver '" + m.problem.spec.name + "'");
    }
    return m;
}

inline RegressionConfig make_regression(const json& r) {
    RegressionConfig c;
    c.basis = r["basis"] == "bins" ? RegressionConfig::Basis::bins : RegressionConfig::Basis::polynomial;
    c.degree = r["degree"].get<int>();
    c.bins = r["bins"].get<std::size_t>();
    c.ridge = r["ridge"].get<double>();
    return c;
}

inline ControlGrid make_control_grid(const Model& m, const json& solver) {
    const ControlSet& set = m.problem.sde.controls;
    std::vector<std::size_t> res;
    for (const auto& r : solver["controls"]["resolution"]) res.push_back(r.get<std::size_t>());
    if (res.size() != set.dim())
        fail(Errc::config_error, "/solver/controls/resolution: expected " + std::to_string(set.dim()) + " entries");
    return ControlGrid::uniform(set, res);
}

inline Vec default_control(const Model& m, const json& run) {
    const ControlSet& set = m.problem.sde.controls;
    if (run.contains("control")) {
        Vec v;
        for (const auto& e : run["control"]) v.push_back(e.get<double>());
        if (v.size() != set.dim() || !set.contains(v))
            fail(Errc::invalid_control, "/run/control: control must lie in the admissible set");
        return v;
    }
    Vec v(set.dim());
    for (std::size_t j = 0; j < v.size(); ++j) v[j] = 0.5 * (set.lower[j] + set.upper[j]);
    return v;
}

inline SpaceTimeGrid make_grid(const Model& m, const json& solver, std::size_t nodes, const ControlGrid& cg) {
    const json& g = solver["grid"];
    const Boundary bd = g["boundary"] == "extrapolate" ? Boundary::extrapolate : Boundary::dirichlet;
    const double lo = m.ez ? m.ez->x_floor : m.problem.sde.domain.lower[0];
    const double hi = m.ez ? m.ez->x_max : m.problem.sde.domain.upper[0];
    SpaceTimeGrid grid = make_cfl_grid({Axis{lo, hi, nodes}}, 0.0, m.problem.sde.horizon, m.problem.sde, cg, bd,
                                       g["cfl_safety"].get<double>());
    if (g.contains("time_steps")) grid.time_steps = g["time_steps"].get<std::size_t>();
    return grid;
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t tt = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&tt, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

inline void write_json(const json& j, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) fail(Errc::io_error, "cannot open " + path.string());
    dump17(j, os);
    os << '\n';
    if (!os) fail(Errc::io_error, "failed writing " + path.string());
}

/// Full config echo with versions and seed; generated_at is the only non-reproducible field.
inline void write_meta(const json& cfg, const std::string& sub, const std::filesystem::path& dir) {
    json meta;
    meta["subcommand"] = sub;
    meta["seed"] = cfg["seed"];
    meta["versions"] = {{"rcl", kVersion},
                        {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                      std::to_string(EIGEN_MINOR_VERSION)},
                        {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                              std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                              std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
                        {"compiler", __VERSION__}};
    meta["config"] = cfg;
    meta["generated_at"] = utc_timestamp();
    write_json(meta, dir / "scenario_meta.json");
}

inline json audit_json(const AuditReport& a, const DriverSpec& s) {
    json j;
    j["driver"] = s.name;
    j["declared"] = {{"lambda", json_number(s.constants.lambda)},
                     {"mu", json_number(s.constants.mu)},
                     {"kappa", json_number(s.constants.kappa)},
                     {"p", json_number(s.constants.p)}};
    j["estimated"] = {{"lambda", json_number(a.lambda_hat)},
                      {"mu", json_number(a.mu_hat)},
                      {"kappa", json_number(a.kappa_hat)},
                      {"p", json_number(a.p_hat)}};
    j["samples"] = a.samples;
    j["passed"] = a.passed();
    auto vs = json::array();
    for (std::size_t i = 0; i < std::min<std::size_t>(a.violations.size(), 20); ++i) {
        const auto& v = a.violations[i];
        vs.push_back({{"condition", v.condition},
                      {"t", json_number(v.t)},
                      {"x", json_vector(v.x)},
                      {"y", json_number(v.y)},
                      {"y_other", json_number(v.y_other)},
                      {"v", json_vector(v.v)},
                      {"quotient", json_number(v.quotient)},
                      {"declared", json_number(v.declared)}});
    }
    j["violations"] = vs;
    j["violation_count"] = a.violations.size();
    return j;
}

inline void write_paths_csv(const PathBundle& b, const std::filesystem::path& path, std::size_t max_paths) {
    std::ofstream os(path);
    if (!os) fail(Errc::io_error, "cannot open " + path.string());
    os << "path_id,step,t";
    for (std::size_t j = 0; j < b.dim_state; ++j) os << ",x" << j;
    os << '\n';
    for (std::size_t i = 0; i < std::min(max_paths, b.n_paths); ++i)
        for (std::size_t k = 0; k <= b.n_steps; ++k) {
            os << i << ',' << k << ',' << fmt17(b.times[k]);
            for (double x : b.state(i, k)) os << ',' << fmt17(x);
            os << '\n';
        }
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

struct Outcome {
    bool checks_passed = true;
    std::string summary;
};

inline PathBundle simulate_default(const Model& m, const json& cfg, const Vec& v, std::uint64_t seed) {
    const json& s = cfg["solver"];
    return simulate_paths(m.problem.sde, ControlPolicy::constant(v), m.x0, s["steps"].get<std::size_t>(),
                          s["paths"].get<std::size_t>(), seed);
}

inline Outcome run_simulate(const json& cfg, const std::filesystem::path& out) {
    const Model m = build_model(cfg);
    const Vec v = default_control(m, cfg["run"]);
    const PathBundle b = simulate_default(m, cfg, v, cfg["seed"].get<std::uint64_t>());
    write_paths_csv(b, out / "paths.csv", cfg["run"]["csv_paths"].get<std::size_t>());
    write_bundle(b, (out / "bundle.rclb").string());
    Vec xt(b.n_paths);
    for (std::size_t i = 0; i < b.n_paths; ++i) xt[i] = b.state(i, b.n_steps)[0];
    const auto ms = mean_stderr(xt);
    json j = {{"paths", b.n_paths}, {"steps", b.n_steps}, {"control", json_vector(v)},
              {"terminal_mean", json_number(ms.mean)}, {"terminal_stderr", json_number(ms.stderr_)},
              {"clamp_events", b.clamp_events}, {"noise_free", b.noise_free}};
    write_json(j, out / "simulation.json");
    return {true, "simulated " + std::to_string(b.n_paths) + " paths, mean X_T = " + fmt17(ms.mean)};
}

inline Outcome run_solve_bsde(const json& cfg, const std::filesystem::path& out) {
    const Model m = build_model(cfg);
    const Vec v = default_control(m, cfg["run"]);
    const PathBundle b = simulate_default(m, cfg, v, cfg["seed"].get<std::uint64_t>());
    const BsdeSolution sol = solve_bsde(b, m.problem.spec, ControlPolicy::constant(v), make_regression(cfg["solver"]["regression"]));
    write_bsde_csv(sol, b, (out / "bsde_paths.csv").string(), cfg["run"]["csv_paths"].get<std::size_t>());
    json j = {{"y0", json_number(sol.y0)}, {"y0_stderr", json_number(sol.y0_stderr)},
              {"regression_basis", sol.regression_basis}, {"control", json_vector(v)},
              {"paths", sol.n_paths}, {"steps", sol.n_steps}};
    write_json(j, out / "bsde_summary.json");
    return {true, "y0 = " + fmt17(sol.y0) + " +- " + fmt17(sol.y0_stderr)};
}

inline Outcome run_solve_hjb(const json& cfg, const std::filesystem::path& out) {
    const Model m = build_model(cfg);
    const json& s = cfg["solver"];
    const ControlGrid cg = make_control_grid(m, s);
    const SpaceTimeGrid g = make_grid(m, s, s["grid"]["fine_nodes"].get<std::size_t>(), cg);
    const ValueGrid u = solve_hjb(g, m.problem.sde, m.problem.spec, cg);
    write_value_grid_csv(u, (out / "value_grid.csv").string());
    const double u0 = u.interpolate(0.0, m.x0);
    json j = {{"u_t0_x0", json_number(u0)}, {"cfl_max", json_number(u.cfl_max)}, {"cfl_margin", json_number(u.cfl_margin)},
              {"boundary", boundary_name(g.boundary)}, {"trust_margin", s["grid"]["trust_margin"]},
              {"nodes", u.nodes()}, {"time_steps", g.time_steps}, {"controls", cg.size()}};
    write_json(j, out / "hjb_summary.json");
    return {true, "u(0, x0) = " + fmt17(u0) + ", CFL margin " + fmt17(u.cfl_margin)};
}

inline std::vector<std::pair<double, Vec>> dpp_probes(const json& s) {
    std::vector<std::pair<double, Vec>> probes;
    for (const auto& p : s["dpp"]["probes"]) probes.push_back({p[0].get<double>(), Vec{p[1].get<double>()}});
    return probes;
}

inline Outcome run_verify_dpp(const json& cfg, const std::filesystem::path& out) {
    const Model m = build_model(cfg);
    const json& s = cfg["solver"];
    const ControlGrid cg = make_control_grid(m, s);
    const ValueGrid fine = solve_hjb(make_grid(m, s, s["grid"]["fine_nodes"].get<std::size_t>(), cg), m.problem.sde,
                                     m.problem.spec, cg);
    const ValueGrid coarse = solve_hjb(make_grid(m, s, s["grid"]["coarse_nodes"].get<std::size_t>(), cg), m.problem.sde,
                                       m.problem.spec, cg);
    DppConfig dc;
    dc.delta = s["dpp"]["delta_fraction"].get<double>() * m.problem.sde.horizon;
    dc.tol_factor = s["tol_factor"].get<double>();
    dc.mc = {s["dpp"]["paths"].get<std::size_t>(), s["dpp"]["steps"].get<std::size_t>(), cfg["seed"].get<std::uint64_t>()};
    dc.reg = make_regression(s["regression"]);
    DppReport rep = verify_dpp(fine, coarse, m.problem, dpp_probes(s), cg, dc);
    rep.trust_margin = s["grid"]["trust_margin"].get<double>();
    write_json(to_json(rep), out / "dpp_report.json");
    write_value_grid_csv(fine, (out / "value_grid.csv").string());
    return {rep.pass, std::string("DPP ") + (rep.pass ? "pass" : "FAIL") + ", max |residual| = " + fmt17(rep.max_abs_residual)};
}

inline Outcome run_compare(const json& cfg, const std::filesystem::path& out) {
    const Model m = build_model(cfg);
    const Vec v = default_control(m, cfg["run"]);
    const double off = cfg["run"]["compare_offset"].get<double>();
    DriverSpec lower = m.problem.spec;
    const DriverSpec upper = m.problem.spec;
    const auto f = upper.f;
    const auto h = upper.h;
    lower.name = upper.name + "_shifted";
    lower.f = [f, off](double t, std::span<const double> x, double y, std::span<const double> z, std::span<const double> c) {
        return f(t, x, y, z, c) - off;
    };
    lower.h = [h, off](std::span<const double> x) { return h(x) - off; };
    if (lower.y_upper < kInf || lower.y_lower > -kInf)
        fail(Errc::config_error, "/run/compare_offset: comparison runs need a driver on the whole real line");
    const PathBundle b = simulate_default(m, cfg, v, cfg["seed"].get<std::uint64_t>());
    const ComparisonResult r = comparison_check(b, lower, upper, ControlPolicy::constant(v),
                                                make_regression(cfg["solver"]["regression"]), m.audit_box);
    auto idx = json::array();
    for (auto k : r.indices) idx.push_back(k);
    json j = {{"ordered", r.ordered}, {"worst_violation", json_number(r.worst_violation)},
              {"tolerance", json_number(r.tolerance)}, {"min_fraction", json_number(r.min_fraction)},
              {"indices", idx}, {"offset", json_number(off)}};
    write_json(j, out / "comparison.json");
    return {r.ordered, std::string("comparison ") + (r.ordered ? "ordered" : "VIOLATED")};
}

/// Scenario settings of an ez_market config; x positions in the config are absolute wealth levels.
inline ScenarioConfig scenario_config(const json& cfg, const EzProblem& ez) {
    const json& s = cfg["solver"];
    const std::uint64_t seed = cfg["seed"].get<std::uint64_t>();
    ScenarioConfig sc;
    sc.fine_nodes = s["grid"]["fine_nodes"].get<std::size_t>();
    sc.coarse_nodes = s["grid"]["coarse_nodes"].get<std::size_t>();
    sc.control_resolution.clear();
    for (const auto& r : s["controls"]["resolution"]) sc.control_resolution.push_back(r.get<std::size_t>());
    sc.cfl_safety = s["grid"]["cfl_safety"].get<double>();
    sc.boundary = s["grid"]["boundary"] == "extrapolate" ? Boundary::extrapolate : Boundary::dirichlet;
    sc.trust_margin = s["grid"]["trust_margin"].get<double>();
    const double x0 = ez.market.x0;
    sc.cross_check_x.clear();
    for (const auto& x : s["brute_force"]["x"]) sc.cross_check_x.push_back(x.get<double>() / x0);
    sc.dpp_probes.clear();
    for (const auto& p : s["dpp"]["probes"]) sc.dpp_probes.push_back({p[0].get<double>(), p[1].get<double>() / x0});
    sc.dpp_delta_fraction = s["dpp"]["delta_fraction"].get<double>();
    sc.dpp_mc = {s["dpp"]["paths"].get<std::size_t>(), s["dpp"]["steps"].get<std::size_t>(), seed};
    sc.brute_mc = {s["brute_force"]["paths"].get<std::size_t>(), s["brute_force"]["steps"].get<std::size_t>(), seed + 1};
    sc.brute_pieces = s["brute_force"]["pieces"].get<std::size_t>();
    sc.tol_factor = s["tol_factor"].get<double>();
    sc.reg = make_regression(s["regression"]);
    return sc;
}

inline Outcome run_ez_demo(const json& cfg, const std::filesystem::path& out) {
    const Model m = build_model(cfg);
    if (!m.ez) fail(Errc::config_error, "/problem/kind: ez-demo needs an ez_market problem");
    const ScenarioConfig sc = scenario_config(cfg, *m.ez);
    const ScenarioReport rep = run_scenario(*m.ez, sc);
    write_scenario_outputs(rep, out.string());
    bool cross_ok = true;
    for (const auto& r : rep.cross_check) cross_ok = cross_ok && r.pass;
    json j = {{"regime", regime_name(m.ez->regime.regime)},
              {"dpp_pass", rep.dpp.pass},
              {"cross_check_pass", cross_ok},
              {"monotone_in_x", rep.monotone_in_x},
              {"min_wealth", json_number(rep.min_wealth)},
              {"clamp_events", rep.clamp_events},
              {"lipschitz_x", {{"fine", json_number(rep.regularity_fine.lipschitz_x)},
                               {"coarse", json_number(rep.regularity_coarse.lipschitz_x)}}},
              {"holder_t", {{"fine", json_number(rep.regularity_fine.holder_t)},
                            {"coarse", json_number(rep.regularity_coarse.holder_t)}}},
              {"growth_c", json_number(rep.regularity_fine.growth_c)},
              {"cfl_margin", json_number(rep.fine.cfl_margin)},
              {"boundary", boundary_name(rep.fine.grid.boundary)}};
    write_json(j, out / "scenario_summary.json");
    const bool ok = rep.dpp.pass && cross_ok && rep.monotone_in_x && rep.min_wealth > 0.0;
    return {ok, std::string("ez-demo ") + (ok ? "pass" : "FAIL") + " (DPP " + (rep.dpp.pass ? "pass" : "fail") +
                    ", cross-check " + (cross_ok ? "pass" : "fail") + ")"};
}

inline Outcome run_audit_driver(const json& cfg, const std::filesystem::path& out) {
    Model m;
    try {
        m = build_model(cfg, false);
    } catch (const Error& e) {
        if (e.code() != Errc::condition_audit_failed) throw;
        write_json(json{{"passed", false}, {"message", e.what()}}, out / "audit.json");
        return {false, e.what()};
    }
    write_json(audit_json(m.audit, m.problem.spec), out / "audit.json");
    std::string msg = m.audit.passed() ? "audit passed" : "audit FAILED: " + std::to_string(m.audit.violations.size()) + " violation(s)";
    if (!m.audit.passed()) {
        const auto& v = m.audit.violations.front();
        msg += ", first " + v.condition + " at y=" + fmt17(v.y) + " (quotient " + fmt17(v.quotient) + " > declared " +
               fmt17(v.declared) + ")";
    }
    return {m.audit.passed(), msg};
}

/// Runs one subcommand; returns the exit code (0 pass, 1 checks failed, 2 configuration, 3 numerical).
inline int dispatch(const std::string& sub, const json& cfg, const std::filesystem::path& out, std::ostream& err) {
    try {
        std::filesystem::create_directories(out);
        Outcome o;
        if (sub == "simulate") o = run_simulate(cfg, out);
        else if (sub == "solve-bsde") o = run_solve_bsde(cfg, out);
        else if (sub == "solve-hjb") o = run_solve_hjb(cfg, out);
        else if (sub == "verify-dpp") o = run_verify_dpp(cfg, out);
        else if (sub == "compare") o = run_compare(cfg, out);
        else if (sub == "ez-demo") o = run_ez_demo(cfg, out);
        else if (sub == "audit-driver") o = run_audit_driver(cfg, out);
        else {
            err << "unknown subcommand '" << sub << "'\n";
            return 2;
        }
        write_meta(cfg, sub, out);
        err << sub << ": " << o.summary << '\n';
        return o.checks_passed ? 0 : 1;
    } catch (const Error& e) {
        err << sub << ": " << e.what() << '\n';
        return error_class(e.code()) == ErrorClass::configuration ? 2 : 3;
    } catch (const std::filesystem::filesystem_error& e) {
        err << sub << ": IoError: " << e.what() << '\n';
        return 2;
    } catch (const json::exception& e) {
        err << sub << ": ConfigError: " << e.what() << '\n';
        return 2;
    }
}

/// Seed precedence: --seed flag, then RCL_SEED, then the config file.
inline void apply_seed_override(json& cfg, std::optional<std::uint64_t> flag) {
    if (flag) {
        cfg["seed"] = *flag;
        return;
    }
    if (const char* env = std::getenv("RCL_SEED"); env != nullptr && *env != '\0') {
        char* end = nullptr;
        const unsigned long long v = std::strtoull(env, &end, 10);
        if (end == nullptr || *end != '\0') throw ConfigErrors({"RCL_SEED: expected a nonnegative integer"});
        cfg["seed"] = v;
    }
}

}  // namespace rcl::cli
