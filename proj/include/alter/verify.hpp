#pragma once

// Finite-difference sweep over every differentiable component, plus the
// Cox closed-form comparison.

#include <cstdint>
#include <string>
#include <vector>

namespace alter {

struct ComponentCheck {
    std::string name;
    double max_rel_error = 0.0;
    std::string worst_parameter;
    bool passed = false;
};

struct GradcheckReport {
    std::vector<ComponentCheck> components;
    /// Max |autodiff - closed form| over the Cox instances.
    double cox_deviation = 0.0;
    int cox_instances = 0;
    double tolerance = 1e-4;
    double cox_tolerance = 1e-8;

    bool passed() const;
    std::string to_text() const;
};

struct GradcheckOptions {
    std::uint64_t seed = 0;
    /// Adds a component whose backward pass flips the gradient sign.
    bool inject_fault = false;
    std::size_t coords_per_param = 6;
    int cox_instances = 50;
};

GradcheckReport run_gradcheck(const GradcheckOptions& opts = {});

}  // namespace alter
