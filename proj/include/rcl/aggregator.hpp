#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rcl/common.hpp"
#include "rcl/quadrature.hpp"

namespace rcl {

/// f(t, x, y, z, v)
using DriverFn = std::function<double(double, std::span<const double>, double, std::span<const double>,
                                      std::span<const double>)>;
/// h(x)
using TerminalFn = std::function<double(std::span<const double>)>;

/// Constants of the growth and monotonicity conditions on the driver.
struct DriverConstants {
    double lambda = 0.0;  // Lipschitz in (x, z), and of h
    double mu = 0.0;      // one-sided monotonicity in y
    double kappa = 1.0;   // polynomial growth scale in y
    double p = 1.0;       // polynomial growth exponent in y
};

/// BSDE driver together with its terminal map and audited constants.
struct DriverSpec {
    std::string name;
    DriverFn f;
    TerminalFn h;
    /// Optional analytic df/dy; the implicit solver falls back to finite differences.
    DriverFn dfdy;
    /// Value of f at y = 0 for drivers whose y-domain excludes 0 (continuous extension).
    DriverFn zero_level;
    bool z_free = true;
    DriverConstants constants;
    bool audited = false;
    /// Open y-domain; evaluation outside it is rejected by the driver itself.
    double y_lower = -kInf;
    double y_upper = kInf;

    double operator()(double t, std::span<const double> x, double y, std::span<const double> z,
                      std::span<const double> v) const {
        return f(t, x, y, z, v);
    }

    double at_zero(double t, std::span<const double> x, std::span<const double> z,
                   std::span<const double> v) const {
        return zero_level ? zero_level(t, x, 0.0, z, v) : f(t, x, 0.0, z, v);
    }

    bool in_domain(double y) const { return y > y_lower && y < y_upper; }
};

// ---------------------------------------------------------------------------
// Audit
// ---------------------------------------------------------------------------

/// Compact box on which the conditions are sampled.
struct AuditBox {
    double t_lower = 0.0;
    double t_upper = 1.0;
    Vec x_lower{0.0};
    Vec x_upper{0.0};
    double y_lower = -1.0;
    double y_upper = 1.0;
    Vec z_lower;  // empty for z-free drivers
    Vec z_upper;
    Vec v_lower;
    Vec v_upper;
};

struct AuditViolation {
    std::string condition;  // "H4-x", "H4-z", "H4-h", "H5", "H6"
    double t = 0.0;
    Vec x;
    double y = 0.0;
    double y_other = 0.0;
    Vec v;
    double quotient = 0.0;
    double declared = 0.0;
};

struct AuditReport {
    double lambda_hat = 0.0;
    double mu_hat = -kInf;
    double kappa_hat = 0.0;
    double p_hat = 1.0;
    std::vector<AuditViolation> violations;
    std::size_t samples = 0;

    bool passed() const { return violations.empty(); }
};

namespace detail {

struct AuditPoint {
    double t;
    Vec x, z, v;
    double y;
};

inline double lerp01(double lo, double hi, double u) { return lo + (hi - lo) * u; }

inline void check_finite(double value, const AuditPoint& pt, const char* what) {
    if (!std::isfinite(value)) {
        std::string where = std::string(what) + " at t=" + fmt17(pt.t) + ", y=" + fmt17(pt.y);
        for (double xi : pt.x) where += ", x=" + fmt17(xi);
        fail(Errc::evaluation_error, "non-finite " + where);
    }
}

}  // namespace detail

/// Samples the Lipschitz (H4), monotonicity (H5) and growth (H6) conditions on a deterministic
/// Halton point set. Returns the observed constants and every sample violating the declared ones;
/// marks the driver audited iff nothing was violated.
inline AuditReport audit_conditions(DriverSpec& spec, const AuditBox& box, std::size_t sample_budget = 4096) {
    const std::size_t n = box.x_lower.size();
    const std::size_t dz = box.z_lower.size();
    const std::size_t m = box.v_lower.size();
    require(box.x_upper.size() == n && box.z_upper.size() == dz && box.v_upper.size() == m,
            "audit box bounds differ in dimension");
    const std::size_t dim = 2 + 2 * n + 2 * dz + m + 1;
    const DriverConstants& c = spec.constants;
    const double rel = 1e-9;

    AuditReport rep;
    rep.samples = sample_budget;
    Vec u(dim);
    std::vector<std::pair<double, double>> growth;  // (|y|, |f(y) - f(0)|) for the exponent fit

    for (std::size_t s = 0; s < sample_budget; ++s) {
        halton_point(s, u);
        const bool near = (s % 2) == 1;
        detail::AuditPoint a;
        a.t = detail::lerp01(box.t_lower, box.t_upper, u[0]);
        a.y = detail::lerp01(box.y_lower, box.y_upper, u[1]);
        a.x.resize(n);
        a.z.resize(dz);
        a.v.resize(m);
        Vec x2(n), z2(dz);
        std::size_t o = 2;
        for (std::size_t j = 0; j < n; ++j, ++o) a.x[j] = detail::lerp01(box.x_lower[j], box.x_upper[j], u[o]);
        for (std::size_t j = 0; j < n; ++j, ++o) {
            const double w = box.x_upper[j] - box.x_lower[j];
            x2[j] = near ? std::clamp(a.x[j] + (u[o] - 0.5) * 1e-3 * w, box.x_lower[j], box.x_upper[j])
                         : detail::lerp01(box.x_lower[j], box.x_upper[j], u[o]);
        }
        for (std::size_t j = 0; j < dz; ++j, ++o) a.z[j] = detail::lerp01(box.z_lower[j], box.z_upper[j], u[o]);
        for (std::size_t j = 0; j < dz; ++j, ++o) {
            const double w = box.z_upper[j] - box.z_lower[j];
            z2[j] = near ? std::clamp(a.z[j] + (u[o] - 0.5) * 1e-3 * w, box.z_lower[j], box.z_upper[j])
                         : detail::lerp01(box.z_lower[j], box.z_upper[j], u[o]);
        }
        for (std::size_t j = 0; j < m; ++j, ++o) a.v[j] = detail::lerp01(box.v_lower[j], box.v_upper[j], u[o]);
        const double wy = box.y_upper - box.y_lower;
        const double y2 = near ? std::clamp(a.y + (u[o] - 0.5) * 1e-3 * wy, box.y_lower, box.y_upper)
                               : detail::lerp01(box.y_lower, box.y_upper, u[o]);

        const double f0 = spec.f(a.t, a.x, a.y, a.z, a.v);
        detail::check_finite(f0, a, "f");

        // H4 in x (f and h)
        if (n > 0) {
            const double dx = dist2(a.x, x2);
            if (dx > 0.0) {
                const double fx = spec.f(a.t, x2, a.y, a.z, a.v);
                detail::check_finite(fx, a, "f");
                const double q = std::abs(f0 - fx) / dx;
                rep.lambda_hat = std::max(rep.lambda_hat, q);
                if (q > c.lambda * (1 + rel) + rel)
                    rep.violations.push_back({"H4-x", a.t, a.x, a.y, a.y, a.v, q, c.lambda});
                if (spec.h) {
                    const double h1 = spec.h(a.x);
                    const double h2 = spec.h(x2);
                    detail::check_finite(h1, a, "h");
                    const double qh = std::abs(h1 - h2) / dx;
                    rep.lambda_hat = std::max(rep.lambda_hat, qh);
                    if (qh > c.lambda * (1 + rel) + rel)
                        rep.violations.push_back({"H4-h", a.t, a.x, a.y, a.y, a.v, qh, c.lambda});
                }
            }
        }
        // H4 in z
        if (dz > 0) {
            const double dzn = dist2(a.z, z2);
            if (dzn > 0.0) {
                const double fz = spec.f(a.t, a.x, a.y, z2, a.v);
                detail::check_finite(fz, a, "f");
                const double q = std::abs(f0 - fz) / dzn;
                rep.lambda_hat = std::max(rep.lambda_hat, q);
                if (q > c.lambda * (1 + rel) + rel)
                    rep.violations.push_back({"H4-z", a.t, a.x, a.y, a.y, a.v, q, c.lambda});
            }
        }
        // H5: (y - y')(f(y) - f(y')) <= mu |y - y'|^2
        if (y2 != a.y) {
            const double fy2 = spec.f(a.t, a.x, y2, a.z, a.v);
            detail::check_finite(fy2, a, "f");
            const double q = (a.y - y2) * (f0 - fy2) / ((a.y - y2) * (a.y - y2));
            rep.mu_hat = std::max(rep.mu_hat, q);
            if (q > c.mu + rel * (1.0 + std::abs(c.mu)))
                rep.violations.push_back({"H5", a.t, a.x, a.y, y2, a.v, q, c.mu});
        }
        // H6: |f(y) - f(0)| <= kappa (1 + |y|^p)
        {
            const double fzero = spec.at_zero(a.t, a.x, a.z, a.v);
            detail::check_finite(fzero, a, "f(y=0)");
            const double g = std::abs(f0 - fzero);
            const double q = g / (1.0 + std::pow(std::abs(a.y), c.p));
            rep.kappa_hat = std::max(rep.kappa_hat, q);
            if (q > c.kappa * (1 + rel) + rel)
                rep.violations.push_back({"H6", a.t, a.x, a.y, 0.0, a.v, q, c.kappa});
            growth.emplace_back(std::abs(a.y), g);
        }
    }

    // Growth exponent: log-log slope of |f(y) - f(0)| against |y| over the samples with |y| >= 1,
    // or over all nonzero samples when the box stays inside the unit ball.
    {
        double thr = 1.0;
        std::size_t count = 0;
        for (auto& [ay, g] : growth)
            if (ay >= thr && g > 0) ++count;
        if (count < 8) thr = 0.0;
        double sx = 0, sy = 0, sxx = 0, sxy = 0;
        std::size_t k = 0;
        for (auto& [ay, g] : growth) {
            if (ay > thr && ay > 0 && g > 0) {
                const double lx = std::log(ay), ly = std::log(g);
                sx += lx;
                sy += ly;
                sxx += lx * lx;
                sxy += lx * ly;
                ++k;
            }
        }
        const double den = static_cast<double>(k) * sxx - sx * sx;
        rep.p_hat = (k >= 2 && den > 1e-12) ? std::max(1.0, (static_cast<double>(k) * sxy - sx * sy) / den) : 1.0;
    }

    spec.audited = rep.passed();
    return rep;
}

// ---------------------------------------------------------------------------
// Mollification in y
// ---------------------------------------------------------------------------

/// Smooth even bump kernel supported in [-1/n, 1/n], integrated by Gauss-Legendre quadrature.
struct Mollifier {
    int n = 1;
    std::size_t quadrature_nodes = 64;
    Vec offsets;  // a_i
    Vec weights;  // quadrature weight times kernel value; sums to 1

    static double bump(double s) { return std::abs(s) < 1.0 ? std::exp(-1.0 / (1.0 - s * s)) : 0.0; }

    static Mollifier make(int n, std::size_t nodes = 64) {
        require(n >= 1, "mollifier index n must be positive");
        require(nodes >= 2, "mollifier needs at least two quadrature nodes");
        const QuadratureRule rule = gauss_legendre(nodes);
        Mollifier m;
        m.n = n;
        m.quadrature_nodes = nodes;
        const double r = 1.0 / n;
        m.offsets.resize(nodes);
        m.weights.resize(nodes);
        double mass = 0.0;
        for (std::size_t i = 0; i < nodes; ++i) {
            m.offsets[i] = r * rule.nodes[i];
            m.weights[i] = r * rule.weights[i] * bump(rule.nodes[i]);
            mass += m.weights[i];
        }
        for (auto& w : m.weights) w /= mass;
        return m;
    }

    /// Normalized kernel density rho_n(a).
    double density(double a) const {
        const QuadratureRule rule = gauss_legendre(quadrature_nodes);
        double mass = 0.0;
        for (std::size_t i = 0; i < quadrature_nodes; ++i) mass += rule.weights[i] * bump(rule.nodes[i]);
        return n * bump(n * a) / mass;
    }

    template <class F>
    double convolve(F&& g, double y) const {
        double s = 0.0;
        for (std::size_t i = 0; i < offsets.size(); ++i) s += weights[i] * g(y - offsets[i]);
        return s;
    }
};

/// f_n(t,x,y,v) = integral of f(t,x,y-a,v) rho_n(a) da. Requires a z-free driver.
inline DriverSpec mollify(const DriverSpec& spec, const Mollifier& moll) {
    if (!spec.z_free) fail(Errc::z_not_supported, "mollification is defined for z-free drivers only");
    DriverSpec out = spec;
    const auto parent = std::make_shared<const DriverSpec>(spec);
    const auto kernel = std::make_shared<const Mollifier>(moll);
    out.name = spec.name + "_moll" + std::to_string(moll.n);
    out.f = [parent, kernel](double t, std::span<const double> x, double y, std::span<const double> z,
                             std::span<const double> v) {
        return kernel->convolve([&](double yy) { return parent->f(t, x, yy, z, v); }, y);
    };
    if (spec.dfdy) {
        out.dfdy = [parent, kernel](double t, std::span<const double> x, double y, std::span<const double> z,
                                    std::span<const double> v) {
            return kernel->convolve([&](double yy) { return parent->dfdy(t, x, yy, z, v); }, y);
        };
    } else {
        out.dfdy = nullptr;
    }
    out.zero_level = nullptr;
    const double r = 1.0 / moll.n;
    out.y_lower = spec.y_lower + r;
    out.y_upper = spec.y_upper - r;
    // Convolution with a unit-mass nonnegative kernel keeps lambda and mu; the growth scale widens.
    out.constants.kappa = spec.constants.kappa * (3.0 + std::pow(2.0, spec.constants.p - 1.0));
    return out;
}

// ---------------------------------------------------------------------------
// Truncation of the zero level
// ---------------------------------------------------------------------------

/// Radial projection onto the ball of radius m; Pi_m(0) = 0.
inline double radial_clip(double value, double m) {
    const double a = std::abs(value);
    if (a <= m) return value;
    return value * (m / a);
}

/// f_m = f - f(.,0,.) + Pi_m(f(.,0,.)). Where |f(.,0,.)| <= m the parent value is returned unchanged.
inline DriverSpec truncate(const DriverSpec& spec, double m) {
    require(m > 0.0, "truncation level must be positive");
    DriverSpec out = spec;
    const auto parent = std::make_shared<const DriverSpec>(spec);
    out.name = spec.name + "_trunc";
    out.f = [parent, m](double t, std::span<const double> x, double y, std::span<const double> z,
                        std::span<const double> v) {
        const double level = parent->at_zero(t, x, z, v);
        const double fy = parent->f(t, x, y, z, v);
        if (std::abs(level) <= m) return fy;
        return fy - level + radial_clip(level, m);
    };
    if (spec.zero_level) {
        out.zero_level = [parent, m](double t, std::span<const double> x, double, std::span<const double> z,
                                     std::span<const double> v) { return radial_clip(parent->at_zero(t, x, z, v), m); };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Uniform gap on a compact box
// ---------------------------------------------------------------------------

struct GapGrid {
    std::size_t y_points = 201;
    std::size_t other_points = 5;
};

/// max |f_a - f_b| over a deterministic tensor grid on the box (z fixed at the box lower corner).
inline double uniform_gap(const DriverSpec& a, const DriverSpec& b, const AuditBox& box, const GapGrid& grid = {}) {
    const std::size_t n = box.x_lower.size();
    const std::size_t m = box.v_lower.size();
    const auto axis = [](double lo, double hi, std::size_t pts) { return lo == hi ? Vec{lo} : linspace(lo, hi, pts); };
    const Vec ts = axis(box.t_lower, box.t_upper, grid.other_points);
    const Vec ys = axis(box.y_lower, box.y_upper, grid.y_points);
    std::vector<Vec> xs(n), vs(m);
    for (std::size_t j = 0; j < n; ++j) xs[j] = axis(box.x_lower[j], box.x_upper[j], grid.other_points);
    for (std::size_t j = 0; j < m; ++j) vs[j] = axis(box.v_lower[j], box.v_upper[j], grid.other_points);
    std::vector<const Vec*> axes;
    for (auto& v : xs) axes.push_back(&v);
    for (auto& v : vs) axes.push_back(&v);
    std::size_t total = 1;
    for (auto* ax : axes) total *= ax->size();

    Vec x(n), v(m), z(box.z_lower);
    double gap = 0.0;
    for (double t : ts) {
        for (std::size_t flat = 0; flat < total; ++flat) {
            std::size_t rem = flat;
            for (std::size_t j = axes.size(); j-- > 0;) {
                const double val = (*axes[j])[rem % axes[j]->size()];
                rem /= axes[j]->size();
                if (j < n)
                    x[j] = val;
                else
                    v[j - n] = val;
            }
            for (double y : ys) gap = std::max(gap, std::abs(a.f(t, x, y, z, v) - b.f(t, x, y, z, v)));
        }
    }
    return gap;
}

// ---------------------------------------------------------------------------
// Epstein-Zin aggregator
// ---------------------------------------------------------------------------

struct EZParams {
    double delta = 0.1;  // rate of time preference
    double gamma = 2.0;  // relative risk aversion
    double psi = 2.0;    // elasticity of intertemporal substitution
};

enum class Regime { case_i, case_ii, unsupported };

struct RegimeInfo {
    Regime regime = Regime::unsupported;
    /// Whether a zero consumption floor (a1 = 0) keeps the aggregator continuous in c.
    bool admits_zero_floor = false;
};

inline RegimeInfo classify_regime(const EZParams& p) {
    if (!(p.delta > 0.0)) fail(Errc::out_of_model, "rate of time preference must be positive");
    if (!(p.gamma > 0.0) || p.gamma == 1.0) fail(Errc::out_of_model, "risk aversion must satisfy 0 < gamma != 1");
    if (!(p.psi > 0.0) || p.psi == 1.0) fail(Errc::out_of_model, "EIS must satisfy 0 < psi != 1");
    RegimeInfo info;
    if (p.gamma > 1.0 && p.psi > 1.0)
        info.regime = Regime::case_i;
    else if (p.gamma < 1.0 && p.psi < 1.0)
        info.regime = Regime::case_ii;
    info.admits_zero_floor = info.regime == Regime::case_i;
    return info;
}

inline const char* regime_name(Regime r) {
    switch (r) {
        case Regime::case_i: return "case_i";
        case Regime::case_ii: return "case_ii";
        default: return "unsupported";
    }
}

/// Evaluates the aggregator at consumption c and utility u. The base (1-gamma)u must be positive.
inline double epstein_zin_value(const EZParams& p, double c, double u) {
    const double w = (1.0 - p.gamma) * u;
    if (!(w > 0.0)) fail(Errc::domain_violation, "(1-gamma)u must be positive, got u=" + fmt17(u));
    const double theta = 1.0 - 1.0 / p.psi;
    const double scale = p.delta / theta;
    // (c / w^{1/(1-gamma)})^theta = exp(theta (ln c - ln w / (1-gamma)))
    double ratio_pow;
    if (c == 0.0) {
        ratio_pow = theta > 0.0 ? 0.0 : kInf;
    } else {
        ratio_pow = std::exp(theta * (std::log(c) - std::log(w) / (1.0 - p.gamma)));
    }
    return scale * w * (ratio_pow - 1.0);
}

inline double epstein_zin_dfdu(const EZParams& p, double c, double u) {
    const double w = (1.0 - p.gamma) * u;
    if (!(w > 0.0)) fail(Errc::domain_violation, "(1-gamma)u must be positive, got u=" + fmt17(u));
    const double theta = 1.0 - 1.0 / p.psi;
    const double e = 1.0 - theta / (1.0 - p.gamma);
    const double ratio_pow = c == 0.0 ? (theta > 0.0 ? 0.0 : kInf)
                                      : std::exp(theta * (std::log(c) - std::log(w) / (1.0 - p.gamma)));
    return p.delta / theta * (1.0 - p.gamma) * (e * ratio_pow - 1.0);
}

/// Epstein-Zin driver f(c, u) with control v = (pi, c), c in [a1, a2]. Case (i) lives on u < 0,
/// case (ii) on u > 0.
inline DriverSpec epstein_zin_driver(const EZParams& p, double a1, double a2) {
    const RegimeInfo info = classify_regime(p);
    if (info.regime == Regime::unsupported)
        fail(Errc::unsupported_regime, "only gamma>1,psi>1 or gamma<1,psi<1 are supported");
    require(a1 >= 0.0 && a2 > a1, "consumption bounds must satisfy 0 <= a1 < a2");
    if (a1 == 0.0 && !info.admits_zero_floor)
        fail(Errc::unsupported_regime, "a zero consumption floor is only admissible in case (i)");

    const double theta = 1.0 - 1.0 / p.psi;
    const double e = 1.0 - theta / (1.0 - p.gamma);
    DriverSpec spec;
    spec.name = "epstein_zin";
    spec.z_free = true;
    spec.f = [p](double, std::span<const double>, double y, std::span<const double>, std::span<const double> v) {
        return epstein_zin_value(p, v[v.size() - 1], y);
    };
    spec.dfdy = [p](double, std::span<const double>, double y, std::span<const double>, std::span<const double> v) {
        return epstein_zin_dfdu(p, v[v.size() - 1], y);
    };
    spec.zero_level = [](double, std::span<const double>, double, std::span<const double>,
                         std::span<const double>) { return 0.0; };
    if (info.regime == Regime::case_i)
        spec.y_upper = 0.0;
    else
        spec.y_lower = 0.0;
    const double c_theta_max = std::max(a1 > 0.0 || theta > 0.0 ? std::pow(a1, theta) : kInf, std::pow(a2, theta));
    spec.constants.mu = p.delta * (p.gamma - 1.0) / theta;
    spec.constants.p = e;
    spec.constants.kappa =
        p.delta / std::abs(theta) * (c_theta_max * std::pow(std::abs(1.0 - p.gamma), e) + std::abs(1.0 - p.gamma));
    spec.constants.lambda = 0.0;
    return spec;
}

}  // namespace rcl
