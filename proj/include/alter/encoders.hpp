#pragma once

// Modality encoders: each maps a raw modality to a CLS row plus a token
// sequence of width d, with grid-region pooling for slides and pathway
// pooling for genes.

#include "alter/model_config.hpp"
#include "alter/numerics/layers.hpp"

#include <filesystem>
#include <span>
#include <vector>

namespace alter {

/// Serialized slide: one row of width d_w per patch.
struct FeatureBag {
    Matrix features;
    Index size() const { return features.rows(); }
};

using Pathways = std::vector<std::vector<Index>>;

struct GeneProfile {
    Vector values;  // nonnegative expression levels
    Pathways pathways;
};

struct TokenSequence {
    std::vector<Index> ids;
    /// true for real tokens (CLS included), false for padding.
    std::vector<bool> real;

    Index size() const { return static_cast<Index>(ids.size()); }
    Index real_count() const;
    /// CLS, then `words`, then padding up to `length` (words are truncated).
    static TokenSequence from_words(std::span<const Index> words, Index length);
};

/// Row-major s x s layout of N tokens with s = ceil(sqrt(N)); trailing
/// cells beyond N are padding (-1).
struct TokenGrid {
    Index side = 0;
    Index n_real = 0;
    std::vector<Index> cells;

    Index at(Index r, Index c) const { return cells[static_cast<std::size_t>(r * side + c)]; }
    bool padded(Index r, Index c) const { return at(r, c) < 0; }
};

TokenGrid reshape_to_grid(Index n_tokens);

/// Real-cell index groups of the non-overlapping a x b regions, scanned
/// row-major; all-padding regions are dropped and the list is cut to
/// exactly floor(N / ab) groups.
IndexGroups region_groups(const TokenGrid& grid, Index a, Index b);

/// Mean of each region's real cells: floor(N/ab) x d.
Var region_aggregate(const Var& tokens, const TokenGrid& grid, Index a, Index b);

/// Pathway index sets plus a trailing catch-all group for genes no pathway
/// claims. Throws DataError on empty, overlapping or out-of-range sets.
IndexGroups pathway_groups(const Pathways& pathways, Index n_genes);

/// Mean of each pathway's gene rows: N_p x d.
Var pathway_aggregate(const Var& gene_tokens, const IndexGroups& groups);

Pathways read_pathways(const std::filesystem::path& path);
void write_pathways(const std::filesystem::path& path, const Pathways& pathways);
Pathways contiguous_pathways(Index n_genes, Index block);

/// Quantile binning of expression levels. Zero (and any value <= 0) maps
/// to bin 0; positive values map monotonically onto 1 .. bins-1 with edges
/// at quantiles of the positive values seen at fit time.
class ExpressionBinner {
public:
    ExpressionBinner() = default;
    static ExpressionBinner fit(std::span<const double> cohort_values, int bins = 7);
    static ExpressionBinner from_edges(std::vector<double> edges, int bins, bool degenerate = false);

    Index operator()(double value) const;
    std::vector<Index> operator()(std::span<const double> values) const;
    int bins() const { return bins_; }
    const std::vector<double>& edges() const { return edges_; }
    /// true when every fitted value was identical; all values then map to 0.
    bool degenerate() const { return degenerate_; }

private:
    int bins_ = 7;
    bool degenerate_ = true;
    std::vector<double> edges_;
};

std::vector<Index> discretize_expression(std::span<const double> values, int bins = 7);

/// CLS row and the sequence it summarises. For slides and genes `tokens`
/// excludes the CLS; for text it is the full N_t sequence with CLS at row 0.
struct Encoded {
    Var cls;
    Var tokens;
};

/// Slide encoder: project d_w -> d, prepend CLS, exact-attention transformer
/// layers without positions.
class SlideEncoder {
public:
    static SlideEncoder create(ParamStore& store, const ModelConfig& cfg);

    /// (h^(1), re-embedded N_h x d tokens). Listed patch rows are replaced
    /// by the learned mask vector before projection.
    Encoded encode(Tape& tape, const FeatureBag& bag, std::span<const Index> masked_patches = {}) const;
    /// encode, then grid-region pooling: (h^(1), floor(N_h/ab) x d).
    Encoded encode_aggregated(Tape& tape, const FeatureBag& bag, std::span<const Index> masked_patches = {}) const;

    Parameter& mask_vector() const { return *mask_; }
    int depth() const { return static_cast<int>(layers_.size()); }

private:
    Linear project_;
    Parameter* cls_ = nullptr;
    Parameter* mask_ = nullptr;
    std::vector<TransformerLayer> layers_;
    LayerNorm final_norm_;
    Index region_a_ = 2, region_b_ = 2;
};

/// Gene encoder: gene-identity embedding + expression-bin embedding,
/// CLS prepended, transformer layers without positions.
class GeneEncoder {
public:
    static GeneEncoder create(ParamStore& store, const ModelConfig& cfg);

    /// (g^(1), N_g x d). Masked genes take the mask embedding in place of
    /// their bin embedding.
    Encoded encode(Tape& tape, std::span<const Index> bins, std::span<const Index> masked_genes = {}) const;
    /// encode, then pathway pooling: (g^(1), N_p x d).
    Encoded encode_aggregated(Tape& tape, std::span<const Index> bins, const IndexGroups& pathways,
                              std::span<const Index> masked_genes = {}) const;

    /// Per-gene input embeddings before attention (identity + bin).
    Var input_embeddings(Tape& tape, std::span<const Index> bins, std::span<const Index> masked_genes = {}) const;
    Parameter& identity_table() const { return *identity_; }
    Index n_genes() const { return identity_->rows(); }

private:
    Parameter* identity_ = nullptr;
    Parameter* bin_table_ = nullptr;
    Parameter* mask_ = nullptr;
    Parameter* cls_ = nullptr;
    std::vector<TransformerLayer> layers_;
    LayerNorm final_norm_;
};

/// Text encoder: token + position embeddings, transformer layers with
/// padding excluded from attention. Row 0 of the output is t^(1).
class TextEncoder {
public:
    static TextEncoder create(ParamStore& store, const ModelConfig& cfg);

    Encoded encode(Tape& tape, const TokenSequence& seq) const;
    Index max_length() const { return positions_->rows(); }

private:
    Parameter* tokens_ = nullptr;
    Parameter* positions_ = nullptr;
    std::vector<TransformerLayer> layers_;
    LayerNorm final_norm_;
};

AttentionMask padding_mask(const TokenSequence& seq);

}  // namespace alter
