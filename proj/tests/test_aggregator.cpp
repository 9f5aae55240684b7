#include <gtest/gtest.h>

#include "rcl/aggregator.hpp"

using namespace rcl;

namespace {

DriverSpec y_driver(std::string name, std::function<double(double)> g, DriverConstants c) {
    DriverSpec s;
    s.name = std::move(name);
    s.f = [g](double, std::span<const double>, double y, std::span<const double>, std::span<const double>) {
        return g(y);
    };
    s.h = [](std::span<const double> x) { return x[0]; };
    s.constants = c;
    return s;
}

AuditBox y_box(double lo, double hi) {
    AuditBox b;
    b.x_lower = {-1.0};
    b.x_upper = {1.0};
    b.y_lower = lo;
    b.y_upper = hi;
    b.v_lower = {0.0};
    b.v_upper = {0.0};
    return b;
}

double eval(const DriverSpec& s, double y, double c = 0.0) {
    const Vec x{0.0}, v{0.0, c};
    return s.f(0.0, x, y, {}, v);
}

}  // namespace

TEST(Audit, LinearMonotoneDriverPasses) {
    auto s = y_driver("linear", [](double y) { return -y; }, {1.0, -1.0, 1.0, 1.0});
    const auto rep = audit_conditions(s, y_box(-3, 3));
    EXPECT_TRUE(rep.passed());
    EXPECT_LE(rep.mu_hat, -1.0 + 1e-9);
    EXPECT_TRUE(s.audited);
}

TEST(Audit, SquareDriverViolatesMonotonicity) {
    auto s = y_driver("square", [](double y) { return y * y; }, {1.0, 0.0, 10.0, 2.0});
    const auto rep = audit_conditions(s, y_box(-3, 3));
    EXPECT_FALSE(rep.passed());
    EXPECT_FALSE(s.audited);
    bool has_h5 = false;
    for (const auto& v : rep.violations) has_h5 |= v.condition == "H5";
    EXPECT_TRUE(has_h5);
    // Independent oracle: the quotient (y - y')(y^2 - y'^2)/(y - y')^2 = y + y' reaches ~6 on the box.
    EXPECT_GT(rep.mu_hat, 5.0);
    EXPECT_LE(rep.mu_hat, 6.0 + 1e-9);
}

TEST(Audit, GrowthExponentFit) {
    auto s = y_driver("cubic", [](double y) { return -y * y * y; }, {1.0, 0.0, 1.0, 3.0});
    const auto rep = audit_conditions(s, y_box(-4, 4));
    EXPECT_TRUE(rep.passed());
    EXPECT_NEAR(rep.p_hat, 3.0, 1e-6);
}

TEST(Audit, NonFiniteDriverRaises) {
    auto s = y_driver("log", [](double y) { return std::log(y); }, {1.0, 0.0, 1.0, 1.0});
    try {
        audit_conditions(s, y_box(-1, 1));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::evaluation_error);
    }
}

TEST(Audit, TerminalLipschitzChecked) {
    auto s = y_driver("linear", [](double y) { return -y; }, {1.0, -1.0, 1.0, 1.0});
    s.h = [](std::span<const double> x) { return 3.0 * x[0]; };
    const auto rep = audit_conditions(s, y_box(-1, 1));
    bool has_h = false;
    for (const auto& v : rep.violations) has_h |= v.condition == "H4-h";
    EXPECT_TRUE(has_h);
}

TEST(Mollifier, UnitMassAndSymmetry) {
    for (int n : {1, 4, 16, 64}) {
        const auto m = Mollifier::make(n);
        double mass = 0.0;
        for (double w : m.weights) mass += w;
        EXPECT_NEAR(mass, 1.0, 1e-10);
        const std::size_t q = m.offsets.size();
        for (std::size_t i = 0; i < q; ++i) {
            EXPECT_EQ(m.offsets[i], -m.offsets[q - 1 - i]);
            EXPECT_EQ(m.weights[i], m.weights[q - 1 - i]);
            EXPECT_LE(std::abs(m.offsets[i]), 1.0 / n);
        }
        EXPECT_EQ(m.density(0.3 / n), m.density(-0.3 / n));
        EXPECT_EQ(m.density(1.0 / n), 0.0);
    }
}

TEST(Mollify, ConstantIsReproduced) {
    const auto s = y_driver("const", [](double) { return 2.5; }, {0, 0, 1, 1});
    const auto sn = mollify(s, Mollifier::make(8));
    for (double y : {-1.0, 0.0, 0.7}) EXPECT_NEAR(eval(sn, y), 2.5, 1e-12);
}

TEST(Mollify, LinearIsReproduced) {
    const auto s = y_driver("lin", [](double y) { return 3.0 * y - 1.0; }, {0, 3, 3, 1});
    const auto sn = mollify(s, Mollifier::make(4));
    for (double y : {-2.0, -0.1, 0.0, 0.3, 5.0}) EXPECT_NEAR(eval(sn, y), 3.0 * y - 1.0, 1e-8);
}

TEST(Mollify, AbsAtZero) {
    const auto s = y_driver("abs", [](double y) { return std::abs(y); }, {0, 1, 1, 1});
    for (int n : {1, 4, 16, 64}) {
        const double v = eval(mollify(s, Mollifier::make(n)), 0.0);
        EXPECT_GT(v, 0.0);
        EXPECT_LE(v, 1.0 / n);
        // Independent oracle: E|a| under the bump density, by composite Simpson on [0, 1/n].
        // The kink of |y| limits Gauss-Legendre to algebraic accuracy, hence the looser budget.
        const auto bump = [](double u) { return std::abs(u) < 1 ? std::exp(-1.0 / (1 - u * u)) : 0.0; };
        const int K = 20000;
        double num = 0.0, den = 0.0;
        for (int i = 0; i <= K; ++i) {
            const double u = static_cast<double>(i) / K;
            const double w = (i == 0 || i == K) ? 1.0 : (i % 2 ? 4.0 : 2.0);
            num += w * u * bump(u);
            den += w * bump(u);
        }
        EXPECT_NEAR(v, num / den / n, 1e-3 / n);
    }
}

TEST(Mollify, RejectsZDependentDriver) {
    auto s = y_driver("z", [](double y) { return y; }, {});
    s.z_free = false;
    try {
        mollify(s, Mollifier::make(2));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::z_not_supported);
    }
}

TEST(Mollify, PreservesMonotonicity) {
    auto s = y_driver("cubic", [](double y) { return -y * y * y + std::abs(y); }, {0.0, 1.0, 2.0, 3.0});
    const auto base = audit_conditions(s, y_box(-2, 2));
    for (int n : {2, 8, 32}) {
        auto sn = mollify(s, Mollifier::make(n));
        const auto rep = audit_conditions(sn, y_box(-2, 2));
        EXPECT_LE(rep.mu_hat, base.mu_hat + 1e-8) << n;
    }
}

TEST(Mollify, FiniteLipschitzForEachN) {
    const auto s = y_driver("sqrt", [](double y) { return -std::cbrt(y); }, {0, 0, 1, 1});
    for (int n : {2, 8, 32}) {
        const auto sn = mollify(s, Mollifier::make(n));
        double q = 0.0;
        const Vec ys = linspace(-1, 1, 401);
        for (std::size_t i = 1; i < ys.size(); ++i)
            q = std::max(q, std::abs(eval(sn, ys[i]) - eval(sn, ys[i - 1])) / (ys[i] - ys[i - 1]));
        EXPECT_TRUE(std::isfinite(q));
        EXPECT_LT(q, 10.0 * n);
    }
}

TEST(UniformGap, MollifiedAbsShrinks) {
    const auto s = y_driver("abs", [](double y) { return std::abs(y); }, {0, 1, 1, 1});
    const auto box = y_box(-1, 1);
    EXPECT_EQ(uniform_gap(s, s, box), 0.0);
    double prev = kInf;
    for (int n : {4, 16, 64}) {
        const double gap = uniform_gap(s, mollify(s, Mollifier::make(n)), box);
        EXPECT_LE(gap, 1.0 / n);
        EXPECT_LT(gap, prev);
        prev = gap;
    }
}

TEST(Truncate, ClipsZeroLevel) {
    const auto s = y_driver("shift", [](double y) { return -y - 5.0; }, {0, -1, 1, 1});
    const auto sm = truncate(s, 2.0);
    EXPECT_EQ(eval(sm, 0.0), -2.0);
    // Differences in y are untouched.
    for (double y : {-3.0, 0.5, 4.0}) EXPECT_EQ(eval(sm, y) - eval(sm, 0.0), eval(s, y) - eval(s, 0.0));
}

TEST(Truncate, InactiveInsideBall) {
    const auto s = y_driver("cubic", [](double y) { return -y * y * y + 0.5; }, {0, 0, 1, 3});
    const auto sm = truncate(s, 1.0);
    const auto box = y_box(-2, 2);
    EXPECT_EQ(uniform_gap(s, sm, box), 0.0);
    for (double y : {-1.5, -0.2, 0.0, 1.9}) EXPECT_EQ(eval(sm, y), eval(s, y));
}

TEST(Truncate, ZeroConvention) {
    EXPECT_EQ(radial_clip(0.0, 1.0), 0.0);
    const auto s = y_driver("odd", [](double y) { return -y; }, {0, -1, 1, 1});
    const auto sm = truncate(s, 0.5);
    EXPECT_EQ(eval(sm, 0.0), 0.0);
    EXPECT_EQ(eval(sm, 0.3), eval(s, 0.3));
}

TEST(EpsteinZin, HandArithmetic) {
    const EZParams p{0.1, 2.0, 2.0};
    EXPECT_NEAR(epstein_zin_value(p, 1.0, -1.0), 0.0, 1e-15);
    EXPECT_NEAR(epstein_zin_value(p, 4.0, -1.0), 0.2, 1e-14);
    // Direct transcription of the aggregator with pow, as an independent oracle.
    const auto direct = [](const EZParams& q, double c, double u) {
        const double th = 1.0 - 1.0 / q.psi;
        const double w = (1.0 - q.gamma) * u;
        return q.delta / th * w * (std::pow(c / std::pow(w, 1.0 / (1.0 - q.gamma)), th) - 1.0);
    };
    for (const EZParams q : {EZParams{0.1, 2, 2}, EZParams{0.05, 5, 1.5}, EZParams{0.2, 0.5, 0.5}}) {
        const double sign = q.gamma > 1 ? -1.0 : 1.0;
        for (double c : {0.01, 0.5, 1.0}) {
            for (double u : {0.2, 1.0, 7.0}) {
                EXPECT_NEAR(epstein_zin_value(q, c, sign * u), direct(q, c, sign * u),
                            1e-12 * (1 + std::abs(direct(q, c, sign * u))));
                const double h = 1e-6;
                const double fd =
                    (epstein_zin_value(q, c, sign * u + h) - epstein_zin_value(q, c, sign * u - h)) / (2 * h);
                EXPECT_NEAR(epstein_zin_dfdu(q, c, sign * u), fd, 1e-5 * (1 + std::abs(fd)));
            }
        }
    }
}

TEST(EpsteinZin, RegimeClassification) {
    EXPECT_EQ(classify_regime({0.1, 2.0, 2.0}).regime, Regime::case_i);
    EXPECT_EQ(classify_regime({0.1, 0.5, 0.5}).regime, Regime::case_ii);
    EXPECT_EQ(classify_regime({0.1, 2.0, 0.5}).regime, Regime::unsupported);
    EXPECT_TRUE(classify_regime({0.1, 2.0, 2.0}).admits_zero_floor);
    EXPECT_FALSE(classify_regime({0.1, 0.5, 0.5}).admits_zero_floor);
    try {
        classify_regime({0.1, 1.0, 2.0});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::out_of_model);
    }
    EXPECT_THROW(classify_regime({0.1, 2.0, 1.0}), Error);
}

TEST(EpsteinZin, UnsupportedRegimeRejected) {
    try {
        epstein_zin_driver({0.1, 2.0, 0.5}, 0.01, 1.0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::unsupported_regime);
    }
    try {
        epstein_zin_driver({0.1, 0.5, 0.5}, 0.0, 1.0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::unsupported_regime);
    }
    EXPECT_NO_THROW(epstein_zin_driver({0.1, 2.0, 2.0}, 0.0, 1.0));
}

TEST(EpsteinZin, DomainViolation) {
    const auto s = epstein_zin_driver({0.1, 2.0, 2.0}, 0.01, 1.0);
    try {
        eval(s, 0.5, 0.5);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::domain_violation);
    }
}

TEST(EpsteinZin, AuditCaseOne) {
    auto s = epstein_zin_driver({0.1, 2.0, 2.0}, 0.01, 1.0);
    AuditBox box;
    box.x_lower = {0.05};
    box.x_upper = {4.0};
    box.y_lower = -5.0;
    box.y_upper = -0.1;
    box.v_lower = {-1.0, 0.01};
    box.v_upper = {1.0, 1.0};
    const auto rep = audit_conditions(s, box);
    EXPECT_TRUE(rep.passed()) << rep.violations.front().condition;
    EXPECT_TRUE(std::isfinite(rep.mu_hat));
    EXPECT_LE(rep.mu_hat, s.constants.mu + 1e-9);
    // Grid-maximization oracle for the one-sided constant: sup of df/du over the box.
    double grid_mu = -kInf;
    for (double u : linspace(-5, -0.1, 200))
        for (double c : linspace(0.01, 1.0, 50)) grid_mu = std::max(grid_mu, epstein_zin_dfdu({0.1, 2, 2}, c, u));
    EXPECT_LE(rep.mu_hat, grid_mu + 1e-9);
    EXPECT_GE(rep.mu_hat, 0.9 * grid_mu);
    EXPECT_GE(rep.p_hat, 1.0);
}

TEST(EpsteinZin, AuditCaseTwo) {
    auto s = epstein_zin_driver({0.1, 0.5, 0.5}, 0.1, 1.0);
    AuditBox box;
    box.x_lower = {0.05};
    box.x_upper = {4.0};
    box.y_lower = 0.1;
    box.y_upper = 5.0;
    box.v_lower = {-1.0, 0.1};
    box.v_upper = {1.0, 1.0};
    const auto rep = audit_conditions(s, box);
    EXPECT_TRUE(rep.passed());
}

TEST(EpsteinZin, MollifiedDriverStaysInDomain) {
    const auto s = epstein_zin_driver({0.1, 2.0, 2.0}, 0.01, 1.0);
    const auto sn = mollify(s, Mollifier::make(16));
    EXPECT_EQ(sn.y_upper, -1.0 / 16);
    EXPECT_TRUE(std::isfinite(eval(sn, -0.5, 0.5)));
    EXPECT_NEAR(eval(sn, -1.0, 1.0), eval(s, -1.0, 1.0), 1e-3);
}
