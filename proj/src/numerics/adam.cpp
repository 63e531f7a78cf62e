#include "alter/numerics/adam.hpp"

#include <cmath>

namespace alter {

void adam_update(Matrix& param, const Matrix& grad, AdamMoments& m, std::int64_t step, const AdamConfig& c) {
    if (grad.rows() != param.rows() || grad.cols() != param.cols()) throw NumericError("adam: gradient shape mismatch");
    if (m.first.size() == 0) {
        m.first.setZero(param.rows(), param.cols());
        m.second.setZero(param.rows(), param.cols());
    }
    m.first = c.beta1 * m.first + (1.0 - c.beta1) * grad;
    m.second = c.beta2 * m.second + (1.0 - c.beta2) * grad.cwiseProduct(grad);
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(step));
    param.array() -= c.lr * (m.first.array() / bc1) / ((m.second.array() / bc2).sqrt() + c.eps);
}

void adam_step(ParamStore& store, AdamState& state) {
    if (state.step < 0) throw NumericError("adam: negative step count");
    double sq = 0.0;
    for (const Parameter* p : store.all()) {
        if (!p->trainable) continue;
        if (!p->grad.allFinite()) throw NumericError("adam: non-finite gradient in " + p->name);
        sq += p->grad.squaredNorm();
    }
    double factor = 1.0;
    if (state.config.max_grad_norm > 0.0) {
        const double norm = std::sqrt(sq);
        if (norm > state.config.max_grad_norm) factor = state.config.max_grad_norm / norm;
    }
    ++state.step;
    for (Parameter* p : store.all()) {
        if (!p->trainable) continue;
        AdamMoments& m = state.moments[p->name];
        if (factor != 1.0) {
            Matrix g = p->grad * factor;
            adam_update(p->value, g, m, state.step, state.config);
        } else {
            adam_update(p->value, p->grad, m, state.step, state.config);
        }
    }
}

}  // namespace alter
