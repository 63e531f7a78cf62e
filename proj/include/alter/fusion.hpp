#pragma once

// Universal sequence transformer: shared self-attention over whatever
// modalities are present, then one feed-forward expert per modality
// applied to that modality's span only.

#include "alter/encoders.hpp"

#include <array>
#include <optional>

namespace alter {

struct Span {
    Index start = 0;
    Index length = 0;
};

struct ModalitySet {
    std::array<bool, 3> present{};
    std::array<Span, 3> spans{};

    bool has(Modality m) const { return present[static_cast<std::size_t>(index_of(m))]; }
    const Span& span(Modality m) const { return spans[static_cast<std::size_t>(index_of(m))]; }
    int count() const { return static_cast<int>(present[0]) + present[1] + present[2]; }
    Index total_length() const;
};

/// One modality's contribution to the fused sequence: CLS first.
struct Segment {
    Var rows;
    /// Attention visibility per row; empty means all rows visible.
    std::vector<bool> visible;

    static Segment from_encoded(const Encoded& e);
    static Segment from_text(const Encoded& e, const TokenSequence& seq);
};

using SegmentSet = std::array<std::optional<Segment>, 3>;

struct FusedState {
    Var tokens;
    ModalitySet set;
    std::vector<bool> key_visible;

    Index cls_index(Modality m) const;
    Var cls(Modality m) const;
    Var span_tokens(Modality m) const;
    AttentionMask mask() const;
};

struct FusionBlock {
    LayerNorm attn_norm;
    MultiHeadAttention attn;
    LayerNorm expert_norm;
    std::array<FeedForward, 3> experts;

    static FusionBlock create(ParamStore& store, const std::string& name, const ModelConfig& cfg);
    /// Stage 1: Z' = Z + Phi(LN(Z)). Stage 2: per present span F = Z' + f_m(LN(Z')).
    FusedState operator()(Tape& tape, const FusedState& state) const;
};

class Fusion {
public:
    static Fusion create(ParamStore& store, const ModelConfig& cfg);

    /// Concatenates present segments in H, G, T order and adds each
    /// modality's type embedding to its rows. Throws DataError when empty.
    FusedState assemble(Tape& tape, const SegmentSet& segments) const;
    FusedState block(Tape& tape, const FusedState& state, int index) const;
    /// Runs the first `n_blocks` blocks (all when negative).
    FusedState fuse(Tape& tape, FusedState state, int n_blocks = -1) const;

    int n_blocks() const { return static_cast<int>(blocks_.size()); }
    const FusionBlock& block_params(int i) const { return blocks_.at(static_cast<std::size_t>(i)); }

private:
    std::vector<FusionBlock> blocks_;
    std::array<Parameter*, 3> type_embedding_{};
};

}  // namespace alter
