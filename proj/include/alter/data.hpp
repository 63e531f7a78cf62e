#pragma once

// Synthetic cohorts with planted cross-modal structure, the on-disk
// container, and the stratified 7:2:1 split.

#include "alter/encoders.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace alter {

struct SurvivalLabel {
    double time = 0.0;
    /// 1 = censored (event not observed), 0 = event observed.
    int censored = 0;
};

struct SampleRecord {
    std::string id;
    std::optional<FeatureBag> slide;
    /// Raw nonnegative expression levels, N_g.
    std::optional<Vector> genes;
    std::optional<TokenSequence> text;
    int cancer_class = 0;
    /// Binary marker read off the second latent coordinate.
    int mutation = 0;
    SurvivalLabel survival;
    /// Report words (no CLS/BOS/EOS); empty when no report exists.
    std::vector<Index> report;
    /// Planted latent; kept so oracles can score the generator itself.
    Vector latent;

    bool has(Modality m) const;
    int modality_count() const { return has(Modality::slide) + has(Modality::genes) + has(Modality::text); }
};

struct CohortSpec {
    Index n = 512;
    int classes = 4;
    Index latent_dim = 4;
    Index n_patches = 16;
    Index patch_dim = 32;
    Index n_genes = 24;
    Index pathway_block = 6;
    Index text_len = 16;
    Index vocab_size = 64;
    /// Marginal missing rates for H, G, T.
    std::array<double, 3> missing{0.0, 0.0, 0.0};
    double noise = 0.1;
    double censor_rate = 0.3;
    /// Log-hazard slope on latent coordinate 0.
    double risk_strength = 12.0;
    /// Latent-quantized slot tokens appended to each report.
    Index report_slots = 4;
    Index slot_levels = 6;
    /// Key report templates on (class, sign of z0) instead of class alone.
    bool latent_templates = true;
    std::uint64_t seed = 0;

    void validate() const;
};

struct Cohort {
    CohortSpec spec;
    Pathways pathways;
    std::vector<std::string> class_names;
    std::vector<std::string> vocabulary;
    std::vector<SampleRecord> records;

    Index size() const { return static_cast<Index>(records.size()); }
};

/// Per-modality drop probabilities that, after resampling the all-missing
/// draws, reproduce the requested marginals.
std::array<double, 3> calibrated_drop_rates(const std::array<double, 3>& marginal);

Cohort generate_cohort(const CohortSpec& spec);

struct Split {
    std::vector<Index> train, val, test;
};

/// Class-stratified split; falls back to a plain shuffle with a warning when
/// some class has fewer than 3 members.
Split split_cohort(const Cohort& cohort, std::array<double, 3> ratios = {0.7, 0.2, 0.1}, std::uint64_t seed = 0);

/// Generator parameters as pretty-printed JSON.
std::string cohort_manifest(const CohortSpec& spec);

std::string serialize_cohort(const Cohort& cohort);
Cohort parse_cohort(const std::string& bytes);
void save_cohort(const std::filesystem::path& path, const Cohort& cohort);
Cohort load_cohort(const std::filesystem::path& path);

/// Quantile binner fitted on every expression value in the listed records.
ExpressionBinner fit_expression_binner(const Cohort& cohort, std::span<const Index> rows, int bins);

}  // namespace alter
