#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <functional>
#include <limits>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace rcl {

using Vec = std::vector<double>;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

enum class Errc {
    invalid_argument,
    config_error,
    io_error,
    diverged_path,
    invalid_control,
    degenerate_comparison,
    unstable_moment,
    evaluation_error,
    z_not_supported,
    unsupported_regime,
    domain_violation,
    out_of_model,
    root_bracket_failure,
    regression_error,
    time_step_too_large,
    premise_violated,
    scheme_not_monotone,
    diverged,
    reachability_error,
    budget_exceeded,
    condition_audit_failed,
};

constexpr std::string_view errc_name(Errc code) {
    switch (code) {
        case Errc::invalid_argument: return "InvalidArgument";
        case Errc::config_error: return "ConfigError";
        case Errc::io_error: return "IoError";
        case Errc::diverged_path: return "DivergedPath";
        case Errc::invalid_control: return "InvalidControl";
        case Errc::degenerate_comparison: return "DegenerateComparison";
        case Errc::unstable_moment: return "UnstableMoment";
        case Errc::evaluation_error: return "EvaluationError";
        case Errc::z_not_supported: return "ZNotSupported";
        case Errc::unsupported_regime: return "UnsupportedRegime";
        case Errc::domain_violation: return "DomainViolation";
        case Errc::out_of_model: return "OutOfModel";
        case Errc::root_bracket_failure: return "RootBracketFailure";
        case Errc::regression_error: return "RegressionError";
        case Errc::time_step_too_large: return "TimeStepTooLarge";
        case Errc::premise_violated: return "PremiseViolated";
        case Errc::scheme_not_monotone: return "SchemeNotMonotone";
        case Errc::diverged: return "Diverged";
        case Errc::reachability_error: return "ReachabilityError";
        case Errc::budget_exceeded: return "BudgetExceeded";
        case Errc::condition_audit_failed: return "ConditionAuditFailed";
    }
    return "Unknown";
}

/// Whether an error stems from bad inputs (configuration) or from the numerics.
enum class ErrorClass { configuration, numerical };

constexpr ErrorClass error_class(Errc code) {
    switch (code) {
        case Errc::invalid_argument:
        case Errc::config_error:
        case Errc::io_error:
        case Errc::invalid_control:
        case Errc::z_not_supported:
        case Errc::unsupported_regime:
        case Errc::out_of_model:
        case Errc::premise_violated:
        case Errc::budget_exceeded:
        case Errc::condition_audit_failed:
            return ErrorClass::configuration;
        default:
            return ErrorClass::numerical;
    }
}

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& detail)
        : std::runtime_error(std::string(errc_name(code)) + ": " + detail), code_(code) {}

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& detail) { throw Error(code, detail); }

inline void require(bool cond, const std::string& detail) {
    if (!cond) fail(Errc::invalid_argument, detail);
}

// ---------------------------------------------------------------------------
// Formatting
// ---------------------------------------------------------------------------

/// Round-trip formatting with 17 significant digits.
inline std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// ---------------------------------------------------------------------------
// Threading
// ---------------------------------------------------------------------------

namespace detail {
inline std::size_t& thread_setting() {
    static std::size_t threads = 1;
    return threads;
}
}  // namespace detail

/// Sets the worker count for path- and node-parallel loops. 0 selects the hardware count.
inline void set_threads(std::size_t k) { detail::thread_setting() = k; }

inline std::size_t worker_count() {
    std::size_t k = detail::thread_setting();
    if (k == 0) k = std::max<std::size_t>(1, std::thread::hardware_concurrency());
    return k;
}

/// Runs fn(begin, end) over contiguous slices of [0, n). Work items must be independent;
/// the slicing never influences results. The exception from the lowest slice is rethrown.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const std::size_t workers = std::min(worker_count(), n);
    if (workers <= 1) {
        if (n > 0) fn(std::size_t{0}, n);
        return;
    }
    std::vector<std::exception_ptr> errors(workers);
    {
        std::vector<std::jthread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) {
            const std::size_t b = n * w / workers;
            const std::size_t e = n * (w + 1) / workers;
            pool.emplace_back([&, w, b, e] {
                try {
                    fn(b, e);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
    }
    for (auto& err : errors)
        if (err) std::rethrow_exception(err);
}

inline constexpr std::size_t kReductionChunk = 4096;

/// Deterministic reduction: partial results over fixed-size chunks are combined in
/// chunk order, so the result is independent of the worker count.
template <class T, class Map, class Combine>
T chunked_reduce(std::size_t n, T init, Map&& map, Combine&& combine) {
    const std::size_t chunks = (n + kReductionChunk - 1) / kReductionChunk;
    std::vector<T> partial(chunks, init);
    parallel_for(chunks, [&](std::size_t b, std::size_t e) {
        for (std::size_t c = b; c < e; ++c) {
            const std::size_t lo = c * kReductionChunk;
            const std::size_t hi = std::min(n, lo + kReductionChunk);
            partial[c] = map(lo, hi);
        }
    });
    T acc = std::move(init);
    for (auto& p : partial) acc = combine(std::move(acc), p);
    return acc;
}

// ---------------------------------------------------------------------------
// Small numerics helpers
// ---------------------------------------------------------------------------

struct MeanStderr {
    double mean = 0.0;
    double stderr_ = 0.0;
    double stddev = 0.0;
};

inline MeanStderr mean_stderr(std::span<const double> xs) {
    MeanStderr r;
    const std::size_t n = xs.size();
    if (n == 0) return r;
    double s = 0.0;
    for (double x : xs) s += x;
    r.mean = s / static_cast<double>(n);
    if (n < 2) return r;
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.stddev = std::sqrt(ss / static_cast<double>(n - 1));
    r.stderr_ = r.stddev / std::sqrt(static_cast<double>(n));
    return r;
}

inline double norm2(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

inline double dist2(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

inline Vec linspace(double lo, double hi, std::size_t n) {
    Vec v(n);
    if (n == 1) {
        v[0] = lo;
        return v;
    }
    for (std::size_t i = 0; i < n; ++i)
        v[i] = (i + 1 == n) ? hi : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
    return v;
}

/// Radical inverse in the given prime base; building block of the Halton point set.
inline double radical_inverse(std::uint64_t index, std::uint32_t base) {
    double inv = 1.0 / base;
    double f = inv;
    double r = 0.0;
    while (index > 0) {
        r += f * static_cast<double>(index % base);
        index /= base;
        f *= inv;
    }
    return r;
}

/// Deterministic low-discrepancy point in [0,1)^dim (Halton, skipping index 0).
inline void halton_point(std::uint64_t index, std::span<double> out) {
    static constexpr std::uint32_t primes[] = {2,  3,  5,  7,  11, 13, 17, 19, 23, 29, 31,
                                               37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79};
    for (std::size_t j = 0; j < out.size(); ++j)
        out[j] = radical_inverse(index + 1, primes[j % (sizeof primes / sizeof primes[0])]);
}

}  // namespace rcl
