#include "alter/numerics/ops.hpp"

#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

namespace alter {

namespace {

void require(bool ok, const char* what) {
    if (!ok) throw NumericError(what);
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw NumericError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                           std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                           std::to_string(b.cols()));
}

bool allowed_at(const BoolMatrix* allowed, Index i, Index j) { return allowed == nullptr || (*allowed)(i, j); }

}  // namespace

Var matmul(const Var& a, const Var& b) {
    require(a.cols() == b.rows(), "matmul: inner dimensions differ");
    Tape& t = a.tape();
    return t.record(a.value() * b.value(), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
        if (t.requires_grad(a)) t.accumulate_expr(a, g * b.value().transpose());
        if (t.requires_grad(b)) t.accumulate_expr(b, a.value().transpose() * g);
    });
}

Var matmul_nt(const Var& a, const Var& b) {
    require(a.cols() == b.cols(), "matmul_nt: inner dimensions differ");
    Tape& t = a.tape();
    return t.record(a.value() * b.value().transpose(), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
        if (t.requires_grad(a)) t.accumulate_expr(a, g * b.value());
        if (t.requires_grad(b)) t.accumulate_expr(b, g.transpose() * a.value());
    });
}

Var transpose(const Var& a) {
    Tape& t = a.tape();
    return t.record(a.value().transpose(), {a},
                    [a](Tape& t, const Matrix& g, const Matrix&) { t.accumulate_expr(a, g.transpose()); });
}

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    Tape& t = a.tape();
    return t.record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    Tape& t = a.tape();
    return t.record(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
        t.accumulate(a, g);
        if (t.requires_grad(b)) t.accumulate_expr(b, -g);
    });
}

Var hadamard(const Var& a, const Var& b) {
    require_same_shape(a, b, "hadamard");
    Tape& t = a.tape();
    return t.record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Tape& t, const Matrix& g, const Matrix&) {
        if (t.requires_grad(a)) t.accumulate_expr(a, g.cwiseProduct(b.value()));
        if (t.requires_grad(b)) t.accumulate_expr(b, g.cwiseProduct(a.value()));
    });
}

Var add_rowwise(const Var& a, const Var& row) {
    require(row.rows() == 1 && row.cols() == a.cols(), "add_rowwise: row must be 1 x cols(a)");
    Tape& t = a.tape();
    Matrix out = a.value().rowwise() + row.value().row(0);
    return t.record(std::move(out), {a, row}, [a, row](Tape& t, const Matrix& g, const Matrix&) {
        t.accumulate(a, g);
        if (t.requires_grad(row)) t.accumulate_expr(row, g.colwise().sum());
    });
}

Var scale(const Var& a, double c) {
    Tape& t = a.tape();
    return t.record(a.value() * c, {a}, [a, c](Tape& t, const Matrix& g, const Matrix&) { t.accumulate_expr(a, g * c); });
}

Var add_const(const Var& a, double c) {
    Tape& t = a.tape();
    Matrix out = a.value().array() + c;
    return t.record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) { t.accumulate(a, g); });
}

Var mul_scalar(const Var& a, const Var& s) {
    require(s.rows() == 1 && s.cols() == 1, "mul_scalar: s must be 1 x 1");
    Tape& t = a.tape();
    return t.record(a.value() * s.scalar(), {a, s}, [a, s](Tape& t, const Matrix& g, const Matrix&) {
        if (t.requires_grad(a)) t.accumulate_expr(a, g * s.scalar());
        if (t.requires_grad(s)) t.accumulate(s, Matrix::Constant(1, 1, g.cwiseProduct(a.value()).sum()));
    });
}

Var exp(const Var& a) {
    Tape& t = a.tape();
    Matrix out = a.value().array().exp();
    return t.record(std::move(out), {a},
                    [a](Tape& t, const Matrix& g, const Matrix& y) { t.accumulate_expr(a, g.cwiseProduct(y)); });
}

Var log(const Var& a) {
    require((a.value().array() > 0.0).all(), "log: nonpositive input");
    Tape& t = a.tape();
    Matrix out = a.value().array().log();
    return t.record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
        t.accumulate_expr(a, (g.array() / a.value().array()).matrix());
    });
}

Var sqrt(const Var& a) {
    require((a.value().array() >= 0.0).all(), "sqrt: negative input");
    Tape& t = a.tape();
    Matrix out = a.value().array().sqrt();
    return t.record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix& y) {
        Matrix d = (y.array() > 0.0).select(0.5 * g.array() / y.array(), 0.0);
        t.accumulate(a, d);
    });
}

Var square(const Var& a) {
    Tape& t = a.tape();
    Matrix out = a.value().array().square();
    return t.record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
        t.accumulate_expr(a, (2.0 * g.array() * a.value().array()).matrix());
    });
}

Var sigmoid(const Var& a) {
    Tape& t = a.tape();
    Matrix out = a.value().unaryExpr([](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
    });
    return t.record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix& y) {
        t.accumulate_expr(a, (g.array() * y.array() * (1.0 - y.array())).matrix());
    });
}

Var log_sigmoid(const Var& a) {
    Tape& t = a.tape();
    // log sigma(x) = -softplus(-x)
    Matrix out = a.value().unaryExpr([](double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); });
    return t.record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
        // d/dx log sigma(x) = 1 - sigma(x) = sigma(-x)
        Matrix d = a.value().unaryExpr([](double x) {
            if (x >= 0) {
                const double e = std::exp(-x);
                return e / (1.0 + e);
            }
            return 1.0 / (1.0 + std::exp(x));
        });
        t.accumulate_expr(a, g.cwiseProduct(d));
    });
}

Var relu(const Var& a) {
    Tape& t = a.tape();
    Matrix out = a.value().cwiseMax(0.0);
    return t.record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
        Matrix d = (a.value().array() > 0.0).select(g.array(), 0.0);
        t.accumulate(a, d);
    });
}

Var gelu(const Var& a) {
    Tape& t = a.tape();
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    Matrix out = a.value().unaryExpr([](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); });
    return t.record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
        const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
        Matrix d = a.value().unaryExpr([inv_sqrt_2pi](double x) {
            return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
        });
        t.accumulate_expr(a, g.cwiseProduct(d));
    });
}

Var clamp(const Var& a, double lo, double hi) {
    Tape& t = a.tape();
    Matrix out = a.value().cwiseMax(lo).cwiseMin(hi);
    return t.record(std::move(out), {a}, [a, lo, hi](Tape& t, const Matrix& g, const Matrix&) {
        Matrix d = ((a.value().array() > lo) && (a.value().array() < hi)).select(g.array(), 0.0);
        t.accumulate(a, d);
    });
}

Var sum(const Var& a) {
    Tape& t = a.tape();
    return t.record(Matrix::Constant(1, 1, a.value().sum()), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
        t.accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
    });
}

Var mean(const Var& a) {
    require(a.value().size() > 0, "mean: empty tensor");
    const double n = static_cast<double>(a.value().size());
    Tape& t = a.tape();
    return t.record(Matrix::Constant(1, 1, a.value().sum() / n), {a}, [a, n](Tape& t, const Matrix& g, const Matrix&) {
        t.accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0) / n));
    });
}

Var row_sum(const Var& a) {
    Tape& t = a.tape();
    Matrix out = a.value().rowwise().sum();
    return t.record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix&) {
        Matrix d = g.col(0).replicate(1, a.cols());
        t.accumulate(a, d);
    });
}

Matrix softmax_rows(const Matrix& a) {
    Matrix out(a.rows(), a.cols());
    for (Index i = 0; i < a.rows(); ++i) {
        const double m = a.row(i).maxCoeff();
        out.row(i) = (a.row(i).array() - m).exp();
        out.row(i) /= out.row(i).sum();
    }
    return out;
}

namespace {

Matrix masked_softmax(const Matrix& a, const BoolMatrix* allowed, Matrix* log_out) {
    Matrix out = Matrix::Zero(a.rows(), a.cols());
    if (log_out) log_out->setZero(a.rows(), a.cols());
    for (Index i = 0; i < a.rows(); ++i) {
        double m = -std::numeric_limits<double>::infinity();
        for (Index j = 0; j < a.cols(); ++j)
            if (allowed_at(allowed, i, j)) m = std::max(m, a(i, j));
        if (!std::isfinite(m)) throw NumericError("softmax: row with no admissible entries");
        double z = 0.0;
        for (Index j = 0; j < a.cols(); ++j)
            if (allowed_at(allowed, i, j)) {
                out(i, j) = std::exp(a(i, j) - m);
                z += out(i, j);
            }
        out.row(i) /= z;
        if (log_out) {
            const double lz = m + std::log(z);
            for (Index j = 0; j < a.cols(); ++j)
                if (allowed_at(allowed, i, j)) (*log_out)(i, j) = a(i, j) - lz;
        }
    }
    return out;
}

}  // namespace

Var softmax_rows(const Var& a, const BoolMatrix* allowed) {
    if (a.cols() == 0) throw NumericError("softmax: empty axis");
    if (allowed) require(allowed->rows() == a.rows() && allowed->cols() == a.cols(), "softmax: mask shape mismatch");
    Tape& t = a.tape();
    Matrix out = masked_softmax(a.value(), allowed, nullptr);
    return t.record(std::move(out), {a}, [a](Tape& t, const Matrix& g, const Matrix& y) {
        // Masked entries have y == 0 so they receive no gradient.
        Vector dot = g.cwiseProduct(y).rowwise().sum();
        Matrix d = y.cwiseProduct(g - dot.replicate(1, g.cols()));
        t.accumulate(a, d);
    });
}

Var log_softmax_rows(const Var& a, const BoolMatrix* allowed) {
    if (a.cols() == 0) throw NumericError("log_softmax: empty axis");
    if (allowed) require(allowed->rows() == a.rows() && allowed->cols() == a.cols(), "log_softmax: mask shape mismatch");
    Tape& t = a.tape();
    Matrix logp;
    Matrix p = masked_softmax(a.value(), allowed, &logp);
    std::shared_ptr<const BoolMatrix> mask = allowed ? std::make_shared<BoolMatrix>(*allowed) : nullptr;
    return t.record(std::move(logp), {a}, [a, p = std::move(p), mask](Tape& t, const Matrix& g, const Matrix&) {
        Matrix gm = g;
        if (mask) gm = mask->select(g.array(), 0.0).matrix();
        Vector s = gm.rowwise().sum();
        Matrix d = gm - p.cwiseProduct(s.replicate(1, g.cols()));
        t.accumulate(a, d);
    });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const Index n = x.rows(), d = x.cols();
    require(d >= 1, "layer_norm: empty feature axis");
    require(gamma.rows() == 1 && gamma.cols() == d && beta.rows() == 1 && beta.cols() == d,
            "layer_norm: gamma/beta must be 1 x d");
    const Matrix& xv = x.value();
    auto xhat = std::make_shared<Matrix>(n, d);
    auto inv_std = std::make_shared<Vector>(n);
    for (Index i = 0; i < n; ++i) {
        const double mu = xv.row(i).mean();
        const double var = (xv.row(i).array() - mu).square().mean();
        (*inv_std)(i) = 1.0 / std::sqrt(var + eps);
        xhat->row(i) = (xv.row(i).array() - mu) * (*inv_std)(i);
    }
    Matrix out = (xhat->array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
    Tape& t = x.tape();
    return t.record(std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, inv_std, d](Tape& t, const Matrix& g, const Matrix&) {
        if (t.requires_grad(gamma)) t.accumulate_expr(gamma, g.cwiseProduct(*xhat).colwise().sum());
        if (t.requires_grad(beta)) t.accumulate_expr(beta, g.colwise().sum());
        if (!t.requires_grad(x)) return;
        Matrix dxhat = g.array().rowwise() * gamma.value().row(0).array();
        Matrix dx(dxhat.rows(), d);
        for (Index i = 0; i < dxhat.rows(); ++i) {
            const double m1 = dxhat.row(i).mean();
            const double m2 = dxhat.row(i).cwiseProduct(xhat->row(i)).mean();
            dx.row(i) = (*inv_std)(i) * (dxhat.row(i).array() - m1 - xhat->row(i).array() * m2);
        }
        t.accumulate(x, dx);
    });
}

Var l2_normalize_rows(const Var& a, double eps) {
    const Matrix& av = a.value();
    auto norms = std::make_shared<Vector>(av.rows());
    Matrix out(av.rows(), av.cols());
    for (Index i = 0; i < av.rows(); ++i) {
        (*norms)(i) = std::max(av.row(i).norm(), eps);
        out.row(i) = av.row(i) / (*norms)(i);
    }
    Tape& t = a.tape();
    return t.record(std::move(out), {a}, [a, norms](Tape& t, const Matrix& g, const Matrix& y) {
        Matrix d(g.rows(), g.cols());
        for (Index i = 0; i < g.rows(); ++i) {
            const double dot = g.row(i).dot(y.row(i));
            d.row(i) = (g.row(i) - y.row(i) * dot) / (*norms)(i);
        }
        t.accumulate(a, d);
    });
}

Var slice_rows(const Var& a, Index start, Index count) {
    require(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows: out of range");
    Tape& t = a.tape();
    Matrix out = a.value().middleRows(start, count);
    return t.record(std::move(out), {a}, [a, start, count](Tape& t, const Matrix& g, const Matrix&) {
        if (!t.requires_grad(a)) return;
        t.grad_slot(a).middleRows(start, count) += g;
    });
}

Var slice_cols(const Var& a, Index start, Index count) {
    require(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols: out of range");
    Tape& t = a.tape();
    Matrix out = a.value().middleCols(start, count);
    return t.record(std::move(out), {a}, [a, start, count](Tape& t, const Matrix& g, const Matrix&) {
        if (!t.requires_grad(a)) return;
        t.grad_slot(a).middleCols(start, count) += g;
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_rows: no inputs");
    const Index c = parts.front().cols();
    Index r = 0;
    for (const Var& p : parts) {
        require(p.cols() == c, "concat_rows: column mismatch");
        r += p.rows();
    }
    Matrix out(r, c);
    Index off = 0;
    for (const Var& p : parts) {
        out.middleRows(off, p.rows()) = p.value();
        off += p.rows();
    }
    Tape& t = parts.front().tape();
    return t.record(std::move(out), parts, [parts](Tape& t, const Matrix& g, const Matrix&) {
        Index o = 0;
        for (const Var& p : parts) {
            if (t.requires_grad(p)) t.accumulate(p, g.middleRows(o, p.rows()));
            o += p.rows();
        }
    });
}

Var concat_cols(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_cols: no inputs");
    const Index r = parts.front().rows();
    Index c = 0;
    for (const Var& p : parts) {
        require(p.rows() == r, "concat_cols: row mismatch");
        c += p.cols();
    }
    Matrix out(r, c);
    Index off = 0;
    for (const Var& p : parts) {
        out.middleCols(off, p.cols()) = p.value();
        off += p.cols();
    }
    Tape& t = parts.front().tape();
    return t.record(std::move(out), parts, [parts](Tape& t, const Matrix& g, const Matrix&) {
        Index o = 0;
        for (const Var& p : parts) {
            if (t.requires_grad(p)) t.accumulate(p, g.middleCols(o, p.cols()));
            o += p.cols();
        }
    });
}

Var gather_rows(const Var& table, std::span<const Index> indices) {
    const Matrix& tv = table.value();
    Matrix out(static_cast<Index>(indices.size()), tv.cols());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        require(indices[i] >= 0 && indices[i] < tv.rows(), "gather_rows: index out of range");
        out.row(static_cast<Index>(i)) = tv.row(indices[i]);
    }
    std::vector<Index> idx(indices.begin(), indices.end());
    Tape& t = table.tape();
    return t.record(std::move(out), {table}, [table, idx = std::move(idx)](Tape& t, const Matrix& g, const Matrix&) {
        if (!t.requires_grad(table)) return;
        Matrix& slot = t.grad_slot(table);
        for (std::size_t i = 0; i < idx.size(); ++i) slot.row(idx[i]) += g.row(static_cast<Index>(i));
    });
}

Var pick(const Var& a, std::span<const Index> cols) {
    require(static_cast<Index>(cols.size()) == a.rows(), "pick: one column index per row required");
    Matrix out(a.rows(), 1);
    for (Index i = 0; i < a.rows(); ++i) {
        require(cols[static_cast<std::size_t>(i)] >= 0 && cols[static_cast<std::size_t>(i)] < a.cols(),
                "pick: column index out of range");
        out(i, 0) = a.value()(i, cols[static_cast<std::size_t>(i)]);
    }
    std::vector<Index> c(cols.begin(), cols.end());
    Tape& t = a.tape();
    return t.record(std::move(out), {a}, [a, c = std::move(c)](Tape& t, const Matrix& g, const Matrix&) {
        if (!t.requires_grad(a)) return;
        Matrix& slot = t.grad_slot(a);
        for (std::size_t i = 0; i < c.size(); ++i) slot(static_cast<Index>(i), c[i]) += g(static_cast<Index>(i), 0);
    });
}

Var group_mean_rows(const Var& a, const IndexGroups& groups) {
    const Matrix& av = a.value();
    Matrix out(static_cast<Index>(groups.size()), av.cols());
    for (std::size_t k = 0; k < groups.size(); ++k) {
        require(!groups[k].empty(), "group_mean_rows: empty group");
        RowVector acc = RowVector::Zero(av.cols());
        for (Index r : groups[k]) {
            require(r >= 0 && r < av.rows(), "group_mean_rows: row index out of range");
            acc += av.row(r);
        }
        out.row(static_cast<Index>(k)) = acc / static_cast<double>(groups[k].size());
    }
    Tape& t = a.tape();
    return t.record(std::move(out), {a}, [a, groups](Tape& t, const Matrix& g, const Matrix&) {
        if (!t.requires_grad(a)) return;
        Matrix& slot = t.grad_slot(a);
        for (std::size_t k = 0; k < groups.size(); ++k) {
            const double w = 1.0 / static_cast<double>(groups[k].size());
            for (Index r : groups[k]) slot.row(r) += w * g.row(static_cast<Index>(k));
        }
    });
}

Var overwrite_rows(const Var& a, std::span<const Index> rows, const Var& row) {
    require(row.rows() == 1 && row.cols() == a.cols(), "overwrite_rows: replacement must be 1 x cols(a)");
    Matrix out = a.value();
    for (Index r : rows) {
        require(r >= 0 && r < a.rows(), "overwrite_rows: row index out of range");
        out.row(r) = row.value().row(0);
    }
    std::vector<Index> rs(rows.begin(), rows.end());
    Tape& t = a.tape();
    return t.record(std::move(out), {a, row}, [a, row, rs = std::move(rs)](Tape& t, const Matrix& g, const Matrix&) {
        if (t.requires_grad(a)) {
            Matrix ga = g;
            for (Index r : rs) ga.row(r).setZero();
            t.accumulate(a, ga);
        }
        if (t.requires_grad(row)) {
            Matrix gr = Matrix::Zero(1, g.cols());
            std::vector<bool> seen(static_cast<std::size_t>(g.rows()), false);
            for (Index r : rs) {
                if (seen[static_cast<std::size_t>(r)]) continue;
                seen[static_cast<std::size_t>(r)] = true;
                gr += g.row(r);
            }
            t.accumulate(row, gr);
        }
    });
}

Var attention(const Var& q, const Var& k, const Var& v, int heads, const AttentionMask& mask) {
    const Index lq = q.rows(), lk = k.rows(), width = q.cols();
    if (heads <= 0 || width % heads != 0)
        throw ConfigError("attention: width " + std::to_string(width) + " not divisible by " + std::to_string(heads) + " heads");
    require(k.cols() == width && v.cols() == width && v.rows() == lk, "attention: q/k/v shapes inconsistent");
    require(mask.key_visible.empty() || static_cast<Index>(mask.key_visible.size()) == lk,
            "attention: key mask length mismatch");
    const Index dh = width / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    BoolMatrix allowed(lq, lk);
    for (Index i = 0; i < lq; ++i)
        for (Index j = 0; j < lk; ++j)
            allowed(i, j) = (mask.key_visible.empty() || mask.key_visible[static_cast<std::size_t>(j)]) &&
                            (!mask.causal || j <= i);

    auto probs = std::make_shared<std::vector<Matrix>>(static_cast<std::size_t>(heads));
    Matrix out(lq, width);
    const Matrix& qv = q.value();
    const Matrix& kv = k.value();
    const Matrix& vv = v.value();
    for (int h = 0; h < heads; ++h) {
        Matrix s = (qv.middleCols(h * dh, dh) * kv.middleCols(h * dh, dh).transpose()) * scale;
        Matrix p = masked_softmax(s, &allowed, nullptr);
        out.middleCols(h * dh, dh) = p * vv.middleCols(h * dh, dh);
        (*probs)[static_cast<std::size_t>(h)] = std::move(p);
    }

    Tape& t = q.tape();
    return t.record(std::move(out), {q, k, v}, [q, k, v, heads, dh, scale, probs](Tape& t, const Matrix& g, const Matrix&) {
        const bool gq = t.requires_grad(q), gk = t.requires_grad(k), gv = t.requires_grad(v);
        Matrix dq = gq ? Matrix::Zero(q.rows(), q.cols()) : Matrix();
        Matrix dk = gk ? Matrix::Zero(k.rows(), k.cols()) : Matrix();
        Matrix dv = gv ? Matrix::Zero(v.rows(), v.cols()) : Matrix();
        for (int h = 0; h < heads; ++h) {
            const Matrix& p = (*probs)[static_cast<std::size_t>(h)];
            const auto go = g.middleCols(h * dh, dh);
            if (gv) dv.middleCols(h * dh, dh).noalias() = p.transpose() * go;
            if (!gq && !gk) continue;
            Matrix dp = go * v.value().middleCols(h * dh, dh).transpose();
            Vector dot = dp.cwiseProduct(p).rowwise().sum();
            Matrix ds = p.cwiseProduct(dp - dot.replicate(1, dp.cols())) * scale;
            if (gq) dq.middleCols(h * dh, dh).noalias() = ds * k.value().middleCols(h * dh, dh);
            if (gk) dk.middleCols(h * dh, dh).noalias() = ds.transpose() * q.value().middleCols(h * dh, dh);
        }
        if (gq) t.accumulate(q, dq);
        if (gk) t.accumulate(k, dk);
        if (gv) t.accumulate(v, dv);
    });
}

}  // namespace alter
