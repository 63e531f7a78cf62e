#include "alter/fusion.hpp"

namespace alter {

Index ModalitySet::total_length() const {
    Index n = 0;
    for (std::size_t i = 0; i < 3; ++i)
        if (present[i]) n += spans[i].length;
    return n;
}

Segment Segment::from_encoded(const Encoded& e) { return {concat_rows({e.cls, e.tokens}), {}}; }

Segment Segment::from_text(const Encoded& e, const TokenSequence& seq) { return {e.tokens, seq.real}; }

Index FusedState::cls_index(Modality m) const {
    if (!set.has(m)) throw DataError(std::string("modality ") + std::string(long_name(m)) + " is absent");
    return set.span(m).start;
}

Var FusedState::cls(Modality m) const { return slice_rows(tokens, cls_index(m), 1); }

Var FusedState::span_tokens(Modality m) const {
    const Span& s = set.span(m);
    if (!set.has(m)) throw DataError(std::string("modality ") + std::string(long_name(m)) + " is absent");
    return slice_rows(tokens, s.start, s.length);
}

AttentionMask FusedState::mask() const {
    AttentionMask m;
    bool any_hidden = false;
    for (bool v : key_visible) any_hidden = any_hidden || !v;
    if (any_hidden) m.key_visible = key_visible;
    return m;
}

FusionBlock FusionBlock::create(ParamStore& store, const std::string& name, const ModelConfig& cfg) {
    FusionBlock b;
    b.attn_norm = LayerNorm::create(store, name + ".attn_norm", cfg.hidden_dim);
    b.attn = MultiHeadAttention::create(store, name + ".attn", cfg.hidden_dim, cfg.heads);
    b.expert_norm = LayerNorm::create(store, name + ".expert_norm", cfg.hidden_dim);
    for (Modality m : kModalities)
        b.experts[static_cast<std::size_t>(index_of(m))] = FeedForward::create(
            store, name + ".expert_" + std::string(long_name(m)), cfg.hidden_dim, cfg.ffn_mult * cfg.hidden_dim);
    return b;
}

FusedState FusionBlock::operator()(Tape& tape, const FusedState& state) const {
    Var normed = attn_norm(tape, state.tokens);
    Var shared = add(state.tokens, attn(tape, normed, normed, state.mask()));

    std::vector<Var> parts;
    for (Modality m : kModalities) {
        if (!state.set.has(m)) continue;
        const Span& s = state.set.span(m);
        Var span = slice_rows(shared, s.start, s.length);
        const FeedForward& expert = experts[static_cast<std::size_t>(index_of(m))];
        parts.push_back(add(span, expert(tape, expert_norm(tape, span))));
    }
    FusedState out = state;
    out.tokens = parts.size() == 1 ? parts.front() : concat_rows(parts);
    return out;
}

Fusion Fusion::create(ParamStore& store, const ModelConfig& cfg) {
    cfg.validate();
    Fusion f;
    for (int i = 0; i < cfg.n_blocks; ++i) f.blocks_.push_back(FusionBlock::create(store, "fusion.block" + std::to_string(i), cfg));
    if (cfg.modality_embeddings)
        for (Modality m : kModalities)
            f.type_embedding_[static_cast<std::size_t>(index_of(m))] =
                &store.add("fusion.type_" + std::string(long_name(m)), 1, cfg.hidden_dim, Init::uniform_fan_in,
                           static_cast<double>(cfg.hidden_dim));
    return f;
}

FusedState Fusion::assemble(Tape& tape, const SegmentSet& segments) const {
    FusedState st;
    std::vector<Var> rows;
    Index offset = 0;
    for (Modality m : kModalities) {
        const auto i = static_cast<std::size_t>(index_of(m));
        if (!segments[i]) continue;
        const Segment& seg = *segments[i];
        const Index n = seg.rows.rows();
        if (n < 1) throw DataError("assemble_sequence: empty segment for " + std::string(long_name(m)));
        if (!seg.visible.empty() && static_cast<Index>(seg.visible.size()) != n)
            throw DataError("assemble_sequence: visibility mask length mismatch");
        Var r = seg.rows;
        if (type_embedding_[i] != nullptr) r = add_rowwise(r, tape.param(*type_embedding_[i]));
        rows.push_back(r);
        st.set.present[i] = true;
        st.set.spans[i] = {offset, n};
        if (seg.visible.empty()) {
            st.key_visible.insert(st.key_visible.end(), static_cast<std::size_t>(n), true);
        } else {
            st.key_visible.insert(st.key_visible.end(), seg.visible.begin(), seg.visible.end());
        }
        offset += n;
    }
    if (rows.empty()) throw DataError("assemble_sequence: no modality present");
    st.tokens = rows.size() == 1 ? rows.front() : concat_rows(rows);
    return st;
}

FusedState Fusion::block(Tape& tape, const FusedState& state, int index) const {
    return blocks_.at(static_cast<std::size_t>(index))(tape, state);
}

FusedState Fusion::fuse(Tape& tape, FusedState state, int n_blocks) const {
    const int n = n_blocks < 0 ? this->n_blocks() : n_blocks;
    if (n < 1 || n > this->n_blocks())
        throw ConfigError("fuse: n_blocks " + std::to_string(n) + " outside [1, " + std::to_string(this->n_blocks()) + "]");
    for (int i = 0; i < n; ++i) state = block(tape, state, i);
    return state;
}

}  // namespace alter
