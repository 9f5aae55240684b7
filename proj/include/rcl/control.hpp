#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rcl/common.hpp"

namespace rcl {

/// Compact control set U, represented as a box [lower, upper] in R^m.
struct ControlSet {
    Vec lower;
    Vec upper;

    static ControlSet box(Vec lo, Vec hi) {
        require(lo.size() == hi.size(), "control box bounds differ in dimension");
        for (std::size_t j = 0; j < lo.size(); ++j)
            require(lo[j] <= hi[j], "control box lower bound exceeds upper bound");
        return {std::move(lo), std::move(hi)};
    }

    static ControlSet point(Vec v) { return {v, v}; }

    std::size_t dim() const { return lower.size(); }
    bool empty() const { return lower.empty(); }

    bool contains(std::span<const double> v, double tol = 1e-12) const {
        if (v.size() != lower.size()) return false;
        for (std::size_t j = 0; j < v.size(); ++j) {
            const double slack = tol * (1.0 + std::abs(lower[j]) + std::abs(upper[j]));
            if (!(v[j] >= lower[j] - slack && v[j] <= upper[j] + slack)) return false;
        }
        return true;
    }
};

/// Admissible control process: constant, piecewise constant in time, or a state feedback.
class ControlPolicy {
public:
    enum class Kind { constant, piecewise, feedback };
    using FeedbackMap = std::function<void(double, std::span<const double>, std::span<double>)>;

    static ControlPolicy constant(Vec v) {
        ControlPolicy p;
        p.kind_ = Kind::constant;
        p.dim_ = v.size();
        p.values_.push_back(std::move(v));
        return p;
    }

    /// values[j] applies on [breakpoints[j-1], breakpoints[j]); values.size() == breakpoints.size() + 1.
    static ControlPolicy piecewise(Vec breakpoints, std::vector<Vec> values) {
        require(values.size() == breakpoints.size() + 1, "piecewise policy needs one more value than breakpoints");
        for (std::size_t j = 1; j < breakpoints.size(); ++j)
            require(breakpoints[j - 1] < breakpoints[j], "piecewise breakpoints must increase");
        ControlPolicy p;
        p.kind_ = Kind::piecewise;
        p.dim_ = values.front().size();
        for (const auto& v : values) require(v.size() == p.dim_, "piecewise values differ in dimension");
        p.breakpoints_ = std::move(breakpoints);
        p.values_ = std::move(values);
        return p;
    }

    static ControlPolicy feedback(std::size_t dim, FeedbackMap map) {
        ControlPolicy p;
        p.kind_ = Kind::feedback;
        p.dim_ = dim;
        p.feedback_ = std::make_shared<FeedbackMap>(std::move(map));
        return p;
    }

    Kind kind() const { return kind_; }
    std::size_t dim() const { return dim_; }
    bool state_dependent() const { return kind_ == Kind::feedback; }
    const Vec& breakpoints() const { return breakpoints_; }
    const std::vector<Vec>& values() const { return values_; }

    void control_at(double t, std::span<const double> x, std::span<double> out) const {
        switch (kind_) {
            case Kind::constant:
                std::copy(values_[0].begin(), values_[0].end(), out.begin());
                return;
            case Kind::piecewise: {
                const auto it = std::upper_bound(breakpoints_.begin(), breakpoints_.end(), t);
                const auto& v = values_[static_cast<std::size_t>(it - breakpoints_.begin())];
                std::copy(v.begin(), v.end(), out.begin());
                return;
            }
            case Kind::feedback:
                (*feedback_)(t, x, out);
                return;
        }
    }

private:
    Kind kind_ = Kind::constant;
    std::size_t dim_ = 0;
    Vec breakpoints_;
    std::vector<Vec> values_;
    std::shared_ptr<const FeedbackMap> feedback_;
};

/// Finite set of control points covering U; the sup over U is replaced by a max over it.
struct ControlGrid {
    std::vector<Vec> points;
    std::vector<std::size_t> resolution;  // points per dimension, empty for explicit lists

    std::size_t size() const { return points.size(); }
    std::size_t dim() const { return points.empty() ? 0 : points.front().size(); }

    /// Tensor grid with resolution[j] uniformly spaced points per dimension.
    /// Dimensions with a single point use the midpoint of the interval.
    static ControlGrid uniform(const ControlSet& set, std::vector<std::size_t> res) {
        require(res.size() == set.dim(), "control grid resolution must match control dimension");
        std::vector<Vec> axes(res.size());
        for (std::size_t j = 0; j < res.size(); ++j) {
            require(res[j] >= 1, "control grid needs at least one point per dimension");
            if (res[j] == 1 || set.lower[j] == set.upper[j])
                axes[j] = {res[j] == 1 ? 0.5 * (set.lower[j] + set.upper[j]) : set.lower[j]};
            else
                axes[j] = linspace(set.lower[j], set.upper[j], res[j]);
            res[j] = axes[j].size();
        }
        ControlGrid g;
        g.resolution = res;
        std::size_t total = 1;
        for (auto& a : axes) total *= a.size();
        g.points.reserve(total);
        Vec v(res.size());
        for (std::size_t flat = 0; flat < total; ++flat) {
            std::size_t rem = flat;
            for (std::size_t j = res.size(); j-- > 0;) {
                v[j] = axes[j][rem % axes[j].size()];
                rem /= axes[j].size();
            }
            g.points.push_back(v);
        }
        return g;
    }

    static ControlGrid from_points(std::vector<Vec> pts) {
        require(!pts.empty(), "control grid must not be empty");
        ControlGrid g;
        g.points = std::move(pts);
        return g;
    }

    /// Doubles the resolution (r -> 2r - 1 points per dimension), which keeps every old point.
    ControlGrid refined(const ControlSet& set) const {
        require(!resolution.empty(), "only tensor grids can be refined");
        std::vector<std::size_t> r = resolution;
        for (auto& k : r)
            if (k > 1) k = 2 * k - 1;
        return uniform(set, r);
    }

    bool within(const ControlSet& set) const {
        for (const auto& p : points)
            if (!set.contains(p)) return false;
        return true;
    }
};

}  // namespace rcl
