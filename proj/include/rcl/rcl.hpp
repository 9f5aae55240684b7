#pragma once

#include "rcl/common.hpp"
#include "rcl/rng.hpp"
#include "rcl/control.hpp"
#include "rcl/sde.hpp"
#include "rcl/quadrature.hpp"
#include "rcl/aggregator.hpp"
#include "rcl/regression.hpp"
#include "rcl/bsde.hpp"
#include "rcl/hjb.hpp"
#include "rcl/problem.hpp"
#include "rcl/dpp.hpp"
#include "rcl/ez_example.hpp"
#include "rcl/cli.hpp"
