#pragma once

// Downstream heads and task losses: discrete-time survival NLL, Cox partial
// likelihood (with its closed-form gradient), cross-entropy, the pooled
// multimodal head, MLP heads, a greedy report decoder and a linear probe.

#include "alter/fusion.hpp"

#include <span>
#include <vector>

namespace alter {

/// Interval edges at the quantiles of the uncensored times; bin(t) counts
/// the edges strictly below t.
struct TimeBins {
    std::vector<double> edges;
    int bins = 4;

    Index operator()(double t) const;
    std::vector<Index> operator()(std::span<const double> times) const;
};

/// Throws DataError when the uncensored times hold fewer distinct values
/// than bins.
TimeBins bin_times(std::span<const double> times, std::span<const int> censored, int bins = 4);

/// Per-bin hazards sigma(clamp(logit, -30, 30)).
Matrix hazards(const Matrix& logits);
/// S(j) = prod_{k<=j} (1 - h_k), row per patient.
Matrix survival_curve(const Matrix& logits);

/// Mean over patients of the all-negated discrete-time likelihood:
/// censored  -log S(y);  uncensored  -log S(y-1) - log h(y).
Var nll_survival_loss(const Var& logits, std::span<const Index> bins, std::span<const int> censored);

/// Cox negative partial log-likelihood on scores (n x 1), averaged over the
/// uncensored set; risk sets include tied times. Throws DataError when no
/// event is observed.
Var cox_loss(const Var& scores, std::span<const double> times, std::span<const int> censored);

/// dL/dX for L = cox_loss(X theta), evaluated directly from the risk-set
/// softmax: -(1/|U|) [delta_k theta - sum_{i in U, k in R_i} p_ik theta].
Matrix cox_closed_form_gradient(const Matrix& x, const Matrix& theta, std::span<const double> times,
                                std::span<const int> censored);
/// Max absolute deviation between the tape gradient and the closed form.
double cox_gradient_check(const Matrix& x, const Matrix& theta, std::span<const double> times,
                          std::span<const int> censored);

/// Mean of -log softmax(logits)[label] over rows.
Var cross_entropy(const Var& logits, std::span<const Index> labels);

struct MlpHead {
    Linear hidden, out;

    static MlpHead create(ParamStore& store, const std::string& name, Index in, Index hidden, Index classes);
    Var operator()(Tape& tape, const Var& x) const;
};

/// Pools a fused state into x_patient (1 x 2d). With two or more
/// modalities each CLS cross-attends over the other modalities' tokens (with
/// a residual), the three re-embedded CLS rows are concatenated (zeros for an
/// absent one) and projected; with one modality an MLP maps its CLS to 2d.
class MultimodalHead {
public:
    static MultimodalHead create(ParamStore& store, const ModelConfig& cfg, const std::string& name = "head");
    Var operator()(Tape& tape, const FusedState& fused) const;
    const MultiHeadAttention& cross_attention(Modality m) const {
        return cross_[static_cast<std::size_t>(index_of(m))];
    }

private:
    std::array<MultiHeadAttention, 3> cross_;
    Linear project_;
    MlpHead fallback_;
    Index width_ = 0;
};

struct DecoderLayer {
    LayerNorm self_norm;
    MultiHeadAttention self_attn;
    LayerNorm cross_norm;
    MultiHeadAttention cross_attn;
    LayerNorm ffn_norm;
    FeedForward ffn;
};

/// Causal transformer decoder cross-attending to fused slide tokens.
class ReportDecoder {
public:
    static ReportDecoder create(ParamStore& store, const ModelConfig& cfg, Index max_len, int depth = 2,
                                const std::string& name = "decoder");

    /// Next-token logits for every prefix position of `inputs` (BOS first).
    Var logits(Tape& tape, const Var& memory, std::span<const Index> inputs) const;
    /// Teacher-forced cross-entropy of BOS+words -> words+EOS.
    Var loss(Tape& tape, const Var& memory, std::span<const Index> words) const;
    /// Greedy decoding; stops at EOS (not emitted) or after max_len tokens.
    std::vector<Index> generate(const Var& memory, Index max_len) const;
    Index max_length() const { return positions_->rows() - 1; }

private:
    Parameter* tokens_ = nullptr;
    Parameter* positions_ = nullptr;
    std::vector<DecoderLayer> layers_;
    LayerNorm final_norm_;
    Linear out_;
};

struct ProbeOptions {
    int steps = 400;
    double lr = 0.05;
    double l2 = 1e-3;
};

struct ProbeResult {
    double accuracy = 0.0;
    std::vector<int> predictions;
};

/// Multinomial logistic regression on standardized features, trained full
/// batch with Adam, scored on the held-out rows.
ProbeResult linear_probe(const Matrix& train_x, std::span<const int> train_y, const Matrix& test_x,
                         std::span<const int> test_y, int classes, const ProbeOptions& opts = {});

}  // namespace alter
