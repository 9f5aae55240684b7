#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace rcl {

/// Philox4x32-10 counter-based generator. Every draw is a pure function of
/// (key, counter), so substreams can be addressed directly by (seed, path, step).
class Philox4x32 {
public:
    using Counter = std::array<std::uint32_t, 4>;

    explicit Philox4x32(std::uint64_t seed)
        : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)} {}

    Counter operator()(Counter ctr) const {
        std::array<std::uint32_t, 2> key = key_;
        for (int round = 0; round < 10; ++round) {
            const std::uint64_t p0 = std::uint64_t{kMul0} * ctr[0];
            const std::uint64_t p1 = std::uint64_t{kMul1} * ctr[2];
            const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
            const auto lo0 = static_cast<std::uint32_t>(p0);
            const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
            const auto lo1 = static_cast<std::uint32_t>(p1);
            ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
            key[0] += kWeyl0;
            key[1] += kWeyl1;
        }
        return ctr;
    }

private:
    static constexpr std::uint32_t kMul0 = 0xD2511F53u;
    static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
    static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
    static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
    std::array<std::uint32_t, 2> key_;
};

/// Standard normal draws addressed by (path, step, pair index). Each Philox block
/// yields two normals via Box-Muller.
class NormalStream {
public:
    explicit NormalStream(std::uint64_t seed, std::uint32_t stream_tag = 0)
        : gen_(seed), tag_(stream_tag) {}

    std::array<double, 2> pair(std::uint64_t path, std::uint32_t step, std::uint32_t block) const {
        const auto out = gen_({static_cast<std::uint32_t>(path), step, block,
                               tag_ ^ static_cast<std::uint32_t>(path >> 32)});
        const double u1 = to_open_unit((std::uint64_t{out[0]} << 32) | out[1]);
        const double u2 = to_open_unit((std::uint64_t{out[2]} << 32) | out[3]);
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        return {r * std::cos(a), r * std::sin(a)};
    }

    /// Fills out[j] for j < out.size() with independent N(0,1) draws.
    template <class Span>
    void fill(std::uint64_t path, std::uint32_t step, Span&& out) const {
        const std::size_t n = out.size();
        for (std::size_t j = 0; j < n; j += 2) {
            const auto z = pair(path, step, static_cast<std::uint32_t>(j / 2));
            out[j] = z[0];
            if (j + 1 < n) out[j + 1] = z[1];
        }
    }

private:
    static double to_open_unit(std::uint64_t bits) {
        return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
    }

    Philox4x32 gen_;
    std::uint32_t tag_;
};

}  // namespace rcl
