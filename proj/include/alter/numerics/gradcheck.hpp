#pragma once

#include "alter/numerics/tape.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>

namespace alter {

using ScalarFn = std::function<Var(Tape&)>;

struct GradCheckResult {
    /// max over coordinates of |g_autodiff - g_central| / max(1, |g_central|)
    double max_rel_error = 0.0;
    std::string worst_parameter;
    Index worst_index = -1;
    std::size_t coordinates = 0;
};

struct GradCheckOptions {
    double step = 1e-5;
    /// Per-parameter cap on probed coordinates (0 = all), drawn by seed.
    std::size_t max_coords_per_param = 0;
    std::uint64_t seed = 0;
};

/// Compares tape gradients of the scalar `f` with central differences
/// over the listed parameters. Parameter values are restored on return.
GradCheckResult finite_diff_check(const ScalarFn& f, std::span<Parameter* const> params, const GradCheckOptions& opts = {});

/// Same check with respect to a free input point.
GradCheckResult finite_diff_check(const std::function<Var(Tape&, const Var&)>& f, const Matrix& point,
                                  const GradCheckOptions& opts = {});

}  // namespace alter
