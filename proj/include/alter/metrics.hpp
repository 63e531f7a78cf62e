#pragma once

// Evaluation metrics: concordance, ROC AUC, macro-F1, BLEU-n, ROUGE-L,
// and a small key=value / JSON report writer.

#include "alter/numerics/tensor.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace alter {

/// Harrell's C: among pairs with t_i < t_j and i uncensored, the fraction
/// where risk_i > risk_j; risk ties count 0.5. `censored[i]` is 1 when the
/// event was not observed. Throws DataError without comparable pairs.
double concordance_index(std::span<const double> risk, std::span<const double> time, std::span<const int> censored);

/// Mann-Whitney AUC for binary labels (1 = positive); score ties count 0.5.
double auc_roc(std::span<const double> scores, std::span<const int> labels);
/// One-vs-rest macro AUC over the columns of `scores` (n x C).
double auc_macro_ovr(const Matrix& scores, std::span<const int> labels);

/// Unweighted mean of per-class F1; classes never predicted nor present count 0.
double macro_f1(std::span<const int> predictions, std::span<const int> labels, int classes);
double accuracy(std::span<const int> predictions, std::span<const int> labels);

using Tokens = std::vector<long>;

struct BleuCounts {
    std::vector<double> matches;  // clipped k-gram matches, k = 1..n
    std::vector<double> totals;   // hypothesis k-grams
    double hyp_length = 0;
    double ref_length = 0;

    void add(const BleuCounts& other);
};

BleuCounts bleu_counts(const Tokens& hypothesis, const Tokens& reference, int n);
/// Geometric mean of modified precisions times exp(min(0, 1 - r/c)).
/// `smooth` adds 1e-9 to zero match counts (sentence-level mode).
double bleu_from_counts(const BleuCounts& c, bool smooth = false);
double sentence_bleu(const Tokens& hypothesis, const Tokens& reference, int n, bool smooth = true);
/// Counts summed over the corpus before the precisions are formed.
double corpus_bleu(const std::vector<Tokens>& hypotheses, const std::vector<Tokens>& references, int n);

std::size_t lcs_length(const Tokens& a, const Tokens& b);
/// LCS F-measure, F = (1 + b^2) P R / (R + b^2 P).
double rouge_l(const Tokens& hypothesis, const Tokens& reference, double beta = 1.2);

/// Ordered metric list written as "key=value" lines and as JSON.
class MetricReport {
public:
    void set(const std::string& key, double value);
    void set_text(const std::string& key, const std::string& value);
    double get(const std::string& key) const;
    bool has(const std::string& key) const;

    std::string to_text() const;
    std::string to_json() const;
    /// Writes <stem>.txt and <stem>.json.
    void save(const std::filesystem::path& stem) const;

private:
    std::vector<std::pair<std::string, double>> values_;
    std::vector<std::pair<std::string, std::string>> text_;
};

}  // namespace alter
