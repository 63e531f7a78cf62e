#include "alter/numerics/gradcheck.hpp"

#include "alter/numerics/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace alter {

namespace {

double evaluate(const ScalarFn& f) {
    Tape tape;
    const double v = f(tape).scalar();
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: non-finite function value at probe point");
    return v;
}

}  // namespace

GradCheckResult finite_diff_check(const ScalarFn& f, std::span<Parameter* const> params, const GradCheckOptions& opts) {
    std::vector<Matrix> saved_grads;
    for (Parameter* p : params) {
        saved_grads.push_back(p->grad);
        p->zero_grad();
    }
    {
        Tape tape;
        Var loss = f(tape);
        if (!std::isfinite(loss.scalar())) throw NumericError("finite_diff_check: non-finite function value");
        tape.backward(loss);
    }
    std::vector<Matrix> analytic;
    for (Parameter* p : params) analytic.push_back(p->grad);

    GradCheckResult res;
    Rng rng = make_rng(opts.seed, {0x67636b});
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Parameter& p = *params[pi];
        std::vector<Index> coords(static_cast<std::size_t>(p.value.size()));
        std::iota(coords.begin(), coords.end(), Index{0});
        if (opts.max_coords_per_param > 0 && coords.size() > opts.max_coords_per_param) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(opts.max_coords_per_param);
        }
        for (Index c : coords) {
            double& x = p.value.data()[c];
            const double x0 = x;
            x = x0 + opts.step;
            const double fp = evaluate(f);
            x = x0 - opts.step;
            const double fm = evaluate(f);
            x = x0;
            const double central = (fp - fm) / (2.0 * opts.step);
            const double err = std::abs(analytic[pi].data()[c] - central) / std::max(1.0, std::abs(central));
            ++res.coordinates;
            if (err > res.max_rel_error || res.worst_index < 0) {
                res.max_rel_error = err;
                res.worst_parameter = p.name;
                res.worst_index = c;
            }
        }
    }
    for (std::size_t pi = 0; pi < params.size(); ++pi) params[pi]->grad = saved_grads[pi];
    return res;
}

GradCheckResult finite_diff_check(const std::function<Var(Tape&, const Var&)>& f, const Matrix& point,
                                  const GradCheckOptions& opts) {
    Parameter x{"input", point, Matrix::Zero(point.rows(), point.cols()), true};
    Parameter* ps[] = {&x};
    return finite_diff_check([&](Tape& t) { return f(t, t.param(x)); }, ps, opts);
}

}  // namespace alter
