#pragma once

#include "fpgrain/errors.hpp"
#include "fpgrain/grid.hpp"
#include "fpgrain/expr.hpp"
#include "fpgrain/coeff.hpp"
#include "fpgrain/equilibrium.hpp"
#include "fpgrain/kernel.hpp"
#include "fpgrain/picard.hpp"
#include "fpgrain/fvsolver.hpp"
#include "fpgrain/config.hpp"

namespace fpgrain {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace fpgrain
