#pragma once

#include "alter/numerics/tensor.hpp"

#include <array>
#include <string_view>

namespace alter {

enum class Modality : int { slide = 0, genes = 1, text = 2 };
inline constexpr std::array<Modality, 3> kModalities = {Modality::slide, Modality::genes, Modality::text};

inline constexpr int index_of(Modality m) { return static_cast<int>(m); }
inline constexpr std::string_view short_name(Modality m) {
    switch (m) {
        case Modality::slide: return "H";
        case Modality::genes: return "G";
        case Modality::text: return "T";
    }
    return "?";
}
inline constexpr std::string_view long_name(Modality m) {
    switch (m) {
        case Modality::slide: return "slide";
        case Modality::genes: return "genes";
        case Modality::text: return "text";
    }
    return "?";
}

/// Report vocabulary layout: five reserved ids, then words.
namespace vocab {
inline constexpr Index pad = 0;
inline constexpr Index cls = 1;
inline constexpr Index mask = 2;
inline constexpr Index bos = 3;
inline constexpr Index eos = 4;
inline constexpr Index first_word = 5;
}  // namespace vocab

struct ModelConfig {
    Index hidden_dim = 512;
    int heads = 8;
    int n_blocks = 4;
    int encoder_depth = 2;
    Index ffn_mult = 4;
    Index patch_dim = 1024;
    Index region_a = 2;
    Index region_b = 2;
    Index n_genes = 0;
    int expression_bins = 7;
    Index vocab_size = 64;
    Index max_text_len = 512;
    bool modality_embeddings = true;
    /// Width of the pooled patient embedding used by survival heads.
    Index patient_dim() const { return 2 * hidden_dim; }

    /// Throws ConfigError on an inconsistent configuration.
    void validate() const;
};

}  // namespace alter
