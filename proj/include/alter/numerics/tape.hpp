#pragma once

#include "alter/numerics/tensor.hpp"

#include <deque>
#include <functional>
#include <unordered_map>
#include <vector>

namespace alter {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
class Var {
public:
    Var() = default;

    const Matrix& value() const;
    Index rows() const { return value().rows(); }
    Index cols() const { return value().cols(); }
    double scalar() const;
    bool valid() const { return tape_ != nullptr; }
    Tape& tape() const { return *tape_; }
    std::size_t id() const { return id_; }

private:
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
    friend class Tape;
};

/// Records a forward computation and replays it backwards.
///
/// Nodes are appended in creation order, which is a topological order, so
/// `backward` walks the node list once from the root towards the leaves.
/// A tape is single-use and must not be shared between threads.
class Tape {
public:
    /// Receives the node's output gradient and its forward value.
    using BackwardFn = std::function<void(Tape&, const Matrix& grad_out, const Matrix& out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Matrix value);
    /// A leaf whose gradient is kept on the tape (read it back with `grad`).
    Var variable(Matrix value);
    /// One node per parameter per tape; frozen parameters enter as constants.
    Var param(Parameter& p);

    Var record(Matrix value, std::initializer_list<Var> parents, BackwardFn fn);
    Var record(Matrix value, const std::vector<Var>& parents, BackwardFn fn);

    bool requires_grad(const Var& v) const { return nodes_[v.id_].requires_grad; }
    const Matrix& value(const Var& v) const { return nodes_[v.id_].value; }

    /// Adds `g` into the gradient slot of `v`; no-op for constants.
    void accumulate(const Var& v, const Matrix& g);
    template <class Expr>
    void accumulate_expr(const Var& v, const Expr& g) {
        Node& n = nodes_[v.id_];
        if (!n.requires_grad) return;
        ensure_grad(n);
        n.grad += g;
    }
    Matrix& grad_slot(const Var& v);

    /// Gradient of the last backward root with respect to `v` (zeros if unused).
    Matrix grad(const Var& v) const;

    /// Seeds d(root)/d(root) = 1 and propagates. Parameter gradients are
    /// added into Parameter::grad.
    void backward(const Var& root);

    /// Parameters read by this tape, in first-read order.
    const std::vector<const Parameter*>& parameters_read() const { return read_order_; }
    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        BackwardFn backward;
        Parameter* param = nullptr;
        bool requires_grad = false;
    };

    static void ensure_grad(Node& n) {
        if (n.grad.size() == 0) n.grad.setZero(n.value.rows(), n.value.cols());
    }

    std::deque<Node> nodes_;
    std::unordered_map<const Parameter*, std::size_t> param_nodes_;
    std::vector<const Parameter*> read_order_;
};

inline const Matrix& Var::value() const { return tape_->value(*this); }

inline double Var::scalar() const {
    const Matrix& v = value();
    if (v.size() != 1) throw NumericError("scalar() on a tensor with " + std::to_string(v.size()) + " elements");
    return v(0, 0);
}

}  // namespace alter
