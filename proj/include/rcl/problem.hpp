#pragma once

#include <string>

#include "rcl/aggregator.hpp"
#include "rcl/sde.hpp"

namespace rcl {

/// State equation plus recursive-utility driver: the data of one stochastic recursive control problem.
struct ControlProblem {
    std::string name;
    ControlledSDE sde;
    DriverSpec spec;
};

/// Monte Carlo sizes shared by the probabilistic pipelines.
struct McConfig {
    std::size_t paths = 20000;
    std::size_t steps = 50;  // time steps on the simulated interval
    std::uint64_t seed = 1;
};

}  // namespace rcl
