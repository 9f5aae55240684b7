#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "rcl/common.hpp"

namespace rcl {

struct RegressionConfig {
    enum class Basis { polynomial, bins };
    Basis basis = Basis::polynomial;
    int degree = 3;           // total degree of the polynomial basis
    std::size_t bins = 32;    // piecewise-constant basis, 1-D only
    double ridge = 1e-8;      // penalty on all non-constant coefficients, per sample
};

/// Exponent multi-indices of total degree <= D in n variables, constant term first.
inline std::vector<std::vector<int>> monomial_exponents(std::size_t n, int degree) {
    std::vector<std::vector<int>> out;
    std::vector<int> e(n, 0);
    for (int total = 0; total <= degree; ++total) {
        // enumerate compositions of `total` into n parts in lexicographic order
        const auto rec = [&](auto&& self, std::size_t pos, int left) -> void {
            if (pos + 1 == n) {
                e[pos] = left;
                out.push_back(e);
                return;
            }
            for (int a = left; a >= 0; --a) {
                e[pos] = a;
                self(self, pos + 1, left - a);
            }
        };
        if (n == 0) {
            if (total == 0) out.push_back({});
        } else {
            rec(rec, 0, total);
        }
    }
    return out;
}

/// Least-squares estimator of E[target | X] from one cross-section of states.
/// Fits several targets against the same design at once and predicts in-sample.
class CrossSectionRegression {
public:
    CrossSectionRegression(const RegressionConfig& cfg, std::size_t dim) : cfg_(cfg), dim_(dim) {
        require(cfg.degree >= 0, "regression degree must be nonnegative");
        require(cfg.ridge >= 0.0, "ridge must be nonnegative");
        if (cfg.basis == RegressionConfig::Basis::bins) {
            require(dim == 1, "the piecewise-constant basis is available for one-dimensional states only");
            require(cfg.bins >= 1, "bin count must be positive");
        } else {
            exps_ = monomial_exponents(dim, cfg.degree);
        }
    }

    std::string describe() const {
        if (cfg_.basis == RegressionConfig::Basis::bins) return "bins:" + std::to_string(cfg_.bins);
        return "poly:" + std::to_string(cfg_.degree);
    }

    /// xs: M * dim states, targets: T columns of length M. Writes fitted values into fitted[j].
    /// `step` only labels errors.
    void fit_predict(std::span<const double> xs, const std::vector<std::span<const double>>& targets,
                     std::vector<Vec>& fitted, std::size_t step) const {
        const std::size_t M = xs.size() / std::max<std::size_t>(dim_, 1);
        fitted.assign(targets.size(), Vec(M));
        if (cfg_.basis == RegressionConfig::Basis::bins)
            fit_bins(xs, targets, fitted, M, step);
        else
            fit_poly(xs, targets, fitted, M, step);
    }

private:
    void standardize(std::span<const double> xs, std::size_t M, Vec& mean, Vec& scale) const {
        mean.assign(dim_, 0.0);
        scale.assign(dim_, 1.0);
        for (std::size_t j = 0; j < dim_; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < M; ++i) s += xs[i * dim_ + j];
            mean[j] = s / static_cast<double>(M);
            double ss = 0.0;
            for (std::size_t i = 0; i < M; ++i) {
                const double d = xs[i * dim_ + j] - mean[j];
                ss += d * d;
            }
            const double sd = std::sqrt(ss / static_cast<double>(M));
            scale[j] = sd > 1e-300 * (1.0 + std::abs(mean[j])) ? sd : 0.0;
        }
    }

    void basis_row(const double* x, const Vec& mean, const Vec& scale, double* row) const {
        double zs[16];
        for (std::size_t j = 0; j < dim_; ++j) zs[j] = scale[j] > 0.0 ? (x[j] - mean[j]) / scale[j] : 0.0;
        for (std::size_t b = 0; b < exps_.size(); ++b) {
            double v = 1.0;
            for (std::size_t j = 0; j < dim_; ++j)
                for (int p = 0; p < exps_[b][j]; ++p) v *= zs[j];
            row[b] = v;
        }
    }

    void fit_poly(std::span<const double> xs, const std::vector<std::span<const double>>& targets,
                  std::vector<Vec>& fitted, std::size_t M, std::size_t step) const {
        require(dim_ <= 16, "regression supports at most 16 state dimensions");
        const std::size_t P = exps_.size();
        const std::size_t T = targets.size();
        Vec mean, scale;
        standardize(xs, M, mean, scale);

        struct Normal {
            Eigen::MatrixXd gram;
            Eigen::MatrixXd rhs;
        };
        const Normal zero{Eigen::MatrixXd::Zero(P, P), Eigen::MatrixXd::Zero(P, T)};
        const Normal acc = chunked_reduce(
            M, zero,
            [&](std::size_t lo, std::size_t hi) {
                Normal part = zero;
                Vec row(P);
                for (std::size_t i = lo; i < hi; ++i) {
                    basis_row(&xs[i * dim_], mean, scale, row.data());
                    for (std::size_t a = 0; a < P; ++a) {
                        for (std::size_t b = a; b < P; ++b) part.gram(a, b) += row[a] * row[b];
                        for (std::size_t t = 0; t < T; ++t) part.rhs(a, t) += row[a] * targets[t][i];
                    }
                }
                return part;
            },
            [](Normal a, const Normal& b) {
                a.gram += b.gram;
                a.rhs += b.rhs;
                return a;
            });

        Eigen::MatrixXd gram = acc.gram.selfadjointView<Eigen::Upper>();
        for (std::size_t a = 1; a < P; ++a) gram(a, a) += cfg_.ridge * static_cast<double>(M);
        // Columns that vanish identically (degenerate state directions) are pinned to zero.
        for (std::size_t a = 0; a < P; ++a)
            if (gram(a, a) == 0.0) gram(a, a) = 1.0;
        const Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
        const Eigen::MatrixXd coef = ldlt.solve(acc.rhs);
        if (ldlt.info() != Eigen::Success || !coef.allFinite())
            fail(Errc::regression_error, "non-finite regression coefficients at step " + std::to_string(step));

        parallel_for(M, [&](std::size_t lo, std::size_t hi) {
            Vec row(P);
            for (std::size_t i = lo; i < hi; ++i) {
                basis_row(&xs[i * dim_], mean, scale, row.data());
                for (std::size_t t = 0; t < T; ++t) {
                    double s = 0.0;
                    for (std::size_t a = 0; a < P; ++a) s += coef(a, t) * row[a];
                    fitted[t][i] = s;
                }
            }
        });
    }

    void fit_bins(std::span<const double> xs, const std::vector<std::span<const double>>& targets,
                  std::vector<Vec>& fitted, std::size_t M, std::size_t step) const {
        double lo = kInf, hi = -kInf;
        for (std::size_t i = 0; i < M; ++i) {
            lo = std::min(lo, xs[i]);
            hi = std::max(hi, xs[i]);
        }
        const std::size_t K = cfg_.bins;
        const double width = (hi - lo) / static_cast<double>(K);
        std::vector<std::size_t> bin(M, 0);
        if (width > 0.0)
            for (std::size_t i = 0; i < M; ++i)
                bin[i] = std::min(K - 1, static_cast<std::size_t>((xs[i] - lo) / width));
        Vec count(K, 0.0);
        for (std::size_t i = 0; i < M; ++i) count[bin[i]] += 1.0;
        for (std::size_t t = 0; t < targets.size(); ++t) {
            Vec sum(K, 0.0);
            for (std::size_t i = 0; i < M; ++i) sum[bin[i]] += targets[t][i];
            for (std::size_t i = 0; i < M; ++i) {
                const double v = sum[bin[i]] / count[bin[i]];
                if (!std::isfinite(v)) fail(Errc::regression_error, "non-finite bin mean at step " + std::to_string(step));
                fitted[t][i] = v;
            }
        }
    }

    RegressionConfig cfg_;
    std::size_t dim_;
    std::vector<std::vector<int>> exps_;
};

}  // namespace rcl
