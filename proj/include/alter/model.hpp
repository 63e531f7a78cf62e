#pragma once

// The assembled network: three encoders, the fusion stack and the heads
// used by pretraining, plus the per-sample forward pass.

#include "alter/data.hpp"
#include "alter/fusion.hpp"
#include "alter/tasks.hpp"

#include <optional>

namespace alter {

/// A record with gene expression already discretized.
struct PreparedSample {
    Index row = 0;  // index into the cohort
    const FeatureBag* slide = nullptr;
    std::optional<std::vector<Index>> bins;
    const TokenSequence* text = nullptr;
    int label = 0;

    bool has(Modality m) const;
};

struct Dataset {
    const Cohort* cohort = nullptr;
    IndexGroups pathways;
    ExpressionBinner binner;
    std::vector<PreparedSample> samples;

    /// Modalities present in at least one sample, in H, G, T order.
    std::vector<Modality> modalities() const;
};

/// Binner fitted on `fit_rows` (all rows when empty); samples for `rows`.
Dataset prepare_dataset(const Cohort& cohort, std::span<const Index> rows, int bins,
                        std::span<const Index> fit_rows = {});
Dataset prepare_dataset(const Cohort& cohort, std::span<const Index> rows, const ExpressionBinner& binner);

ModelConfig model_config_for(const CohortSpec& spec, ModelConfig base);

/// Masked-modeling plan for one sample and one modality.
struct MaskPlan {
    Modality modality = Modality::text;
    /// WSI: region ids; genes: gene ids; text: sequence positions.
    std::vector<Index> masked;
    /// WSI only: patch rows covered by the masked regions.
    std::vector<Index> masked_patches;
    /// WSI only: |M| x d_w region means of the original features.
    Matrix region_targets;
    /// Genes: original bins; text: original ids.
    std::vector<Index> target_ids;
    /// Genes only: pathway group of each masked gene.
    std::vector<Index> pathway_of;
    /// Text only: the input sequence after the 80/10/10 policy.
    std::optional<TokenSequence> text_input;
    /// Text only, per masked position: 0 mask token, 1 random token, 2 kept.
    std::vector<int> policy;

    bool empty() const { return masked.empty(); }
};

MaskPlan mask_wsi(const FeatureBag& bag, Index a, Index b, double ratio, std::uint64_t seed);
MaskPlan mask_genes(std::span<const Index> bins, const IndexGroups& pathways, double ratio, std::uint64_t seed);
MaskPlan mask_text(const TokenSequence& seq, double ratio, Index vocab_size, std::uint64_t seed);

struct SampleForward {
    std::array<std::optional<Encoded>, 3> encoded;  // encoder outputs, aggregated
    FusedState fused;

    /// Encoder-level CLS of a present modality.
    Var encoder_cls(Modality m) const;
    /// Fused CLS rows concatenated to 1 x 3d, zeros where absent.
    Var sample_embedding(Tape& tape, Index d) const;
};

class AlterModel {
public:
    static AlterModel create(ParamStore& store, const ModelConfig& cfg, double tau_init = 0.07);

    /// Encodes present modalities (applying `plan` to its modality), then
    /// fuses. `only` restricts to a subset (bit m set = modality m kept).
    SampleForward forward(Tape& tape, const PreparedSample& s, const IndexGroups& pathways,
                          const MaskPlan* plan = nullptr, unsigned only = 7u) const;

    /// Mean masked-modeling loss of one sample under its plan.
    Var mlm_loss(Tape& tape, const SampleForward& f, const MaskPlan& plan) const;

    const ModelConfig& config() const { return cfg_; }
    Parameter& log_tau() const { return *log_tau_; }
    /// exp(log tau) with log tau clamped to [ln 1e-3, ln 100].
    Var inverse_temperature(Tape& tape) const;

    SlideEncoder slide;
    GeneEncoder genes;
    TextEncoder text;
    Fusion fusion;
    Linear wsi_decoder;
    MlpHead gene_decoder;
    Linear text_decoder;

private:
    ModelConfig cfg_;
    Parameter* log_tau_ = nullptr;
};

}  // namespace alter
