#include "alter/numerics/tape.hpp"

#include "alter/numerics/rng.hpp"

#include <cmath>

namespace alter {

Parameter& ParamStore::add(const std::string& name, Index rows, Index cols, Init init, double fan_in) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter>();
    p->name = name;
    switch (init) {
        case Init::zeros: p->value.setZero(rows, cols); break;
        case Init::ones: p->value.setOnes(rows, cols); break;
        case Init::uniform_fan_in: {
            const double fi = fan_in > 0.0 ? fan_in : static_cast<double>(rows);
            const double bound = 1.0 / std::sqrt(fi);
            Rng rng = make_rng(seed_, {hash_name(name)});
            std::uniform_real_distribution<double> u(-bound, bound);
            p->value.resize(rows, cols);
            for (Index i = 0; i < p->value.size(); ++i) p->value.data()[i] = u(rng);
            break;
        }
    }
    p->zero_grad();
    Parameter* raw = p.get();
    params_.push_back(std::move(p));
    index_[name] = raw;
    return *raw;
}

Parameter* ParamStore::find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : it->second;
}

const Parameter* ParamStore::find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : it->second;
}

Parameter& ParamStore::at(const std::string& name) {
    if (auto* p = find(name)) return *p;
    throw ConfigError("unknown parameter: " + name);
}

const Parameter& ParamStore::at(const std::string& name) const {
    if (const auto* p = find(name)) return *p;
    throw ConfigError("unknown parameter: " + name);
}

std::vector<Parameter*> ParamStore::all() {
    std::vector<Parameter*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(p.get());
    return out;
}

std::vector<const Parameter*> ParamStore::all() const {
    std::vector<const Parameter*> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.get());
    return out;
}

std::vector<Parameter*> ParamStore::with_prefix(const std::string& prefix) {
    std::vector<Parameter*> out;
    for (auto& p : params_)
        if (p->name.compare(0, prefix.size(), prefix) == 0) out.push_back(p.get());
    return out;
}

void ParamStore::zero_grad() {
    for (auto& p : params_) p->zero_grad();
}

std::size_t ParamStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
    return n;
}

Var Tape::constant(Matrix value) {
    nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
    return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Matrix value) {
    nodes_.push_back(Node{std::move(value), {}, {}, nullptr, true});
    return Var(this, nodes_.size() - 1);
}

Var Tape::param(Parameter& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var(this, it->second);
    nodes_.push_back(Node{p.value, {}, {}, &p, p.trainable});
    const std::size_t id = nodes_.size() - 1;
    param_nodes_.emplace(&p, id);
    read_order_.push_back(&p);
    return Var(this, id);
}

Var Tape::record(Matrix value, std::initializer_list<Var> parents, BackwardFn fn) {
    bool rg = false;
    for (const Var& p : parents) rg = rg || nodes_[p.id_].requires_grad;
    nodes_.push_back(Node{std::move(value), {}, rg ? std::move(fn) : BackwardFn{}, nullptr, rg});
    return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, const std::vector<Var>& parents, BackwardFn fn) {
    bool rg = false;
    for (const Var& p : parents) rg = rg || nodes_[p.id_].requires_grad;
    nodes_.push_back(Node{std::move(value), {}, rg ? std::move(fn) : BackwardFn{}, nullptr, rg});
    return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(const Var& v, const Matrix& g) {
    Node& n = nodes_[v.id_];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
        n.grad = g;
    } else {
        n.grad += g;
    }
}

Matrix& Tape::grad_slot(const Var& v) {
    Node& n = nodes_[v.id_];
    ensure_grad(n);
    return n.grad;
}

Matrix Tape::grad(const Var& v) const {
    const Node& n = nodes_[v.id_];
    if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
}

void Tape::backward(const Var& root) {
    if (root.tape_ != this) throw NumericError("backward root belongs to another tape");
    if (nodes_[root.id_].value.size() != 1) throw NumericError("backward root must be a scalar");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    Node& r = nodes_[root.id_];
    if (!r.requires_grad) return;
    r.grad = Matrix::Ones(1, 1);
    for (std::size_t i = root.id_ + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.grad.size() == 0) continue;
        if (n.backward) n.backward(*this, n.grad, n.value);
        if (n.param != nullptr) n.param->grad += n.grad;
    }
}

}  // namespace alter
