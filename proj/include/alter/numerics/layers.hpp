#pragma once

#include "alter/numerics/ops.hpp"

#include <string>

namespace alter {

/// y = x W + b with W: in x out, b: 1 x out.
struct Linear {
    Parameter* weight = nullptr;
    Parameter* bias = nullptr;

    static Linear create(ParamStore& store, const std::string& name, Index in, Index out);
    Var operator()(Tape& tape, const Var& x) const;
    Index in_features() const { return weight->rows(); }
    Index out_features() const { return weight->cols(); }
};

struct LayerNorm {
    Parameter* gamma = nullptr;
    Parameter* beta = nullptr;
    double eps = 1e-5;

    static LayerNorm create(ParamStore& store, const std::string& name, Index width, double eps = 1e-5);
    Var operator()(Tape& tape, const Var& x) const;
};

/// Projected multi-head attention: out = Attn(x_q W_q, x_kv W_k, x_kv W_v) W_o.
struct MultiHeadAttention {
    Linear query, key, value, output;
    int heads = 1;

    static MultiHeadAttention create(ParamStore& store, const std::string& name, Index width, int heads);
    Var operator()(Tape& tape, const Var& x_q, const Var& x_kv, const AttentionMask& mask = {}) const;
};

/// Two-layer GELU perceptron, hidden width `hidden`.
struct FeedForward {
    Linear up, down;

    static FeedForward create(ParamStore& store, const std::string& name, Index width, Index hidden, Index out = -1);
    Var operator()(Tape& tape, const Var& x) const;
};

/// Pre-norm encoder layer: x + MHA(LN(x)); then + FFN(LN(x)).
struct TransformerLayer {
    LayerNorm attn_norm;
    MultiHeadAttention attn;
    LayerNorm ffn_norm;
    FeedForward ffn;

    static TransformerLayer create(ParamStore& store, const std::string& name, Index width, int heads, Index ffn_mult);
    Var operator()(Tape& tape, const Var& x, const AttentionMask& mask = {}) const;
};

}  // namespace alter
