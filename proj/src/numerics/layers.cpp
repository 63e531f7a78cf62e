#include "alter/numerics/layers.hpp"

namespace alter {

Linear Linear::create(ParamStore& store, const std::string& name, Index in, Index out) {
    Linear l;
    l.weight = &store.add(name + ".weight", in, out, Init::uniform_fan_in, static_cast<double>(in));
    l.bias = &store.add(name + ".bias", 1, out, Init::uniform_fan_in, static_cast<double>(in));
    return l;
}

Var Linear::operator()(Tape& tape, const Var& x) const {
    return add_rowwise(matmul(x, tape.param(*weight)), tape.param(*bias));
}

LayerNorm LayerNorm::create(ParamStore& store, const std::string& name, Index width, double eps) {
    LayerNorm n;
    n.gamma = &store.add(name + ".gamma", 1, width, Init::ones);
    n.beta = &store.add(name + ".beta", 1, width, Init::zeros);
    n.eps = eps;
    return n;
}

Var LayerNorm::operator()(Tape& tape, const Var& x) const {
    return layer_norm(x, tape.param(*gamma), tape.param(*beta), eps);
}

MultiHeadAttention MultiHeadAttention::create(ParamStore& store, const std::string& name, Index width, int heads) {
    if (heads <= 0 || width % heads != 0)
        throw ConfigError("model width " + std::to_string(width) + " is not divisible by " + std::to_string(heads) + " heads");
    MultiHeadAttention m;
    m.query = Linear::create(store, name + ".query", width, width);
    m.key = Linear::create(store, name + ".key", width, width);
    m.value = Linear::create(store, name + ".value", width, width);
    m.output = Linear::create(store, name + ".output", width, width);
    m.heads = heads;
    return m;
}

Var MultiHeadAttention::operator()(Tape& tape, const Var& x_q, const Var& x_kv, const AttentionMask& mask) const {
    Var q = query(tape, x_q);
    Var k = key(tape, x_kv);
    Var v = value(tape, x_kv);
    return output(tape, attention(q, k, v, heads, mask));
}

FeedForward FeedForward::create(ParamStore& store, const std::string& name, Index width, Index hidden, Index out) {
    FeedForward f;
    f.up = Linear::create(store, name + ".up", width, hidden);
    f.down = Linear::create(store, name + ".down", hidden, out < 0 ? width : out);
    return f;
}

Var FeedForward::operator()(Tape& tape, const Var& x) const { return down(tape, gelu(up(tape, x))); }

TransformerLayer TransformerLayer::create(ParamStore& store, const std::string& name, Index width, int heads,
                                          Index ffn_mult) {
    TransformerLayer l;
    l.attn_norm = LayerNorm::create(store, name + ".attn_norm", width);
    l.attn = MultiHeadAttention::create(store, name + ".attn", width, heads);
    l.ffn_norm = LayerNorm::create(store, name + ".ffn_norm", width);
    l.ffn = FeedForward::create(store, name + ".ffn", width, ffn_mult * width);
    return l;
}

Var TransformerLayer::operator()(Tape& tape, const Var& x, const AttentionMask& mask) const {
    Var normed = attn_norm(tape, x);
    Var h = add(x, attn(tape, normed, normed, mask));
    return add(h, ffn(tape, ffn_norm(tape, h)));
}

}  // namespace alter
