#pragma once

#include "alter/numerics/tensor.hpp"

#include <cstdint>
#include <map>
#include <string>

namespace alter {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    /// Global gradient-norm clip; 0 disables clipping.
    double max_grad_norm = 0.0;
};

struct AdamMoments {
    Matrix first;
    Matrix second;
};

struct AdamState {
    AdamConfig config;
    std::int64_t step = 0;
    std::map<std::string, AdamMoments> moments;
};

/// One bias-corrected Adam update of every trainable parameter from its
/// accumulated `grad`. Throws NumericError on a non-finite gradient before
/// touching any parameter.
void adam_step(ParamStore& store, AdamState& state);

/// Single-tensor form of the same update, used where no store exists.
void adam_update(Matrix& param, const Matrix& grad, AdamMoments& moments, std::int64_t step, const AdamConfig& config);

}  // namespace alter
