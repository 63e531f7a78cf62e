#include "alter/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

namespace alter {

double concordance_index(std::span<const double> risk, std::span<const double> time, std::span<const int> censored) {
    if (risk.size() != time.size() || risk.size() != censored.size())
        throw DataError("concordance_index: input lengths differ");
    double agree = 0.0, comparable = 0.0;
    for (std::size_t i = 0; i < risk.size(); ++i) {
        if (censored[i]) continue;
        for (std::size_t j = 0; j < risk.size(); ++j) {
            if (!(time[i] < time[j])) continue;
            comparable += 1.0;
            if (risk[i] > risk[j]) {
                agree += 1.0;
            } else if (risk[i] == risk[j]) {
                agree += 0.5;
            }
        }
    }
    if (comparable == 0.0) throw DataError("concordance_index: no comparable pairs");
    return agree / comparable;
}

double auc_roc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw DataError("auc_roc: input lengths differ");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // Average ranks over tied runs, then U = R_pos - n_pos (n_pos + 1) / 2.
    double rank_sum = 0.0, n_pos = 0.0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t k = i; k < j; ++k)
            if (labels[order[k]] == 1) rank_sum += avg_rank;
        i = j;
    }
    for (int l : labels) n_pos += l == 1 ? 1.0 : 0.0;
    const double n_neg = static_cast<double>(labels.size()) - n_pos;
    if (n_pos == 0.0 || n_neg == 0.0) throw DataError("auc_roc: both classes must be present");
    return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

double auc_macro_ovr(const Matrix& scores, std::span<const int> labels) {
    if (scores.rows() != static_cast<Index>(labels.size())) throw DataError("auc_macro_ovr: row count != labels");
    double total = 0.0;
    for (Index c = 0; c < scores.cols(); ++c) {
        std::vector<double> s(static_cast<std::size_t>(scores.rows()));
        std::vector<int> y(labels.size());
        for (Index i = 0; i < scores.rows(); ++i) {
            s[static_cast<std::size_t>(i)] = scores(i, c);
            y[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(i)] == c ? 1 : 0;
        }
        total += auc_roc(s, y);
    }
    return total / static_cast<double>(scores.cols());
}

double macro_f1(std::span<const int> pred, std::span<const int> labels, int classes) {
    if (pred.size() != labels.size()) throw DataError("macro_f1: input lengths differ");
    if (classes < 2) throw ConfigError("macro_f1 needs at least 2 classes");
    double total = 0.0;
    for (int c = 0; c < classes; ++c) {
        double tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            tp += pred[i] == c && labels[i] == c;
            fp += pred[i] == c && labels[i] != c;
            fn += pred[i] != c && labels[i] == c;
        }
        const double den = 2 * tp + fp + fn;
        total += den > 0 ? 2 * tp / den : 0.0;
    }
    return total / classes;
}

double accuracy(std::span<const int> pred, std::span<const int> labels) {
    if (pred.size() != labels.size() || pred.empty()) throw DataError("accuracy: bad input lengths");
    double hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
    return hit / static_cast<double>(pred.size());
}

void BleuCounts::add(const BleuCounts& o) {
    if (matches.size() < o.matches.size()) {
        matches.resize(o.matches.size());
        totals.resize(o.totals.size());
    }
    for (std::size_t k = 0; k < o.matches.size(); ++k) {
        matches[k] += o.matches[k];
        totals[k] += o.totals[k];
    }
    hyp_length += o.hyp_length;
    ref_length += o.ref_length;
}

BleuCounts bleu_counts(const Tokens& hyp, const Tokens& ref, int n) {
    if (n < 1 || n > 4) throw ConfigError("BLEU order must lie in 1..4");
    BleuCounts c;
    c.matches.assign(static_cast<std::size_t>(n), 0.0);
    c.totals.assign(static_cast<std::size_t>(n), 0.0);
    c.hyp_length = static_cast<double>(hyp.size());
    c.ref_length = static_cast<double>(ref.size());
    for (int k = 1; k <= n; ++k) {
        std::map<Tokens, int> ref_grams;
        for (std::size_t i = 0; i + static_cast<std::size_t>(k) <= ref.size(); ++i)
            ++ref_grams[Tokens(ref.begin() + static_cast<long>(i), ref.begin() + static_cast<long>(i) + k)];
        std::map<Tokens, int> hyp_grams;
        for (std::size_t i = 0; i + static_cast<std::size_t>(k) <= hyp.size(); ++i)
            ++hyp_grams[Tokens(hyp.begin() + static_cast<long>(i), hyp.begin() + static_cast<long>(i) + k)];
        double clipped = 0, total = 0;
        for (const auto& [g, cnt] : hyp_grams) {
            total += cnt;
            const auto it = ref_grams.find(g);
            if (it != ref_grams.end()) clipped += std::min(cnt, it->second);
        }
        c.matches[static_cast<std::size_t>(k - 1)] = clipped;
        c.totals[static_cast<std::size_t>(k - 1)] = total;
    }
    return c;
}

double bleu_from_counts(const BleuCounts& c, bool smooth) {
    if (c.hyp_length == 0.0) return 0.0;
    double log_p = 0.0;
    for (std::size_t k = 0; k < c.matches.size(); ++k) {
        double m = c.matches[k];
        if (m == 0.0) {
            if (!smooth) return 0.0;
            m = 1e-9;
        }
        log_p += std::log(m / std::max(c.totals[k], 1.0));
    }
    log_p /= static_cast<double>(c.matches.size());
    const double bp = std::min(0.0, 1.0 - c.ref_length / c.hyp_length);
    return std::exp(log_p + bp);
}

double sentence_bleu(const Tokens& hyp, const Tokens& ref, int n, bool smooth) {
    return bleu_from_counts(bleu_counts(hyp, ref, n), smooth);
}

double corpus_bleu(const std::vector<Tokens>& hyps, const std::vector<Tokens>& refs, int n) {
    if (hyps.size() != refs.size()) throw DataError("corpus_bleu: hypothesis/reference counts differ");
    BleuCounts total;
    for (std::size_t i = 0; i < hyps.size(); ++i) total.add(bleu_counts(hyps[i], refs[i], n));
    return bleu_from_counts(total, false);
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

double rouge_l(const Tokens& hyp, const Tokens& ref, double beta) {
    if (ref.empty()) throw DataError("rouge_l: empty reference");
    if (hyp.empty()) return 0.0;
    const double lcs = static_cast<double>(lcs_length(hyp, ref));
    if (lcs == 0.0) return 0.0;
    const double p = lcs / static_cast<double>(hyp.size());
    const double r = lcs / static_cast<double>(ref.size());
    const double b2 = beta * beta;
    return (1.0 + b2) * p * r / (r + b2 * p);
}

void MetricReport::set(const std::string& key, double value) {
    for (auto& [k, v] : values_)
        if (k == key) {
            v = value;
            return;
        }
    values_.emplace_back(key, value);
}

void MetricReport::set_text(const std::string& key, const std::string& value) {
    for (auto& [k, v] : text_)
        if (k == key) {
            v = value;
            return;
        }
    text_.emplace_back(key, value);
}

bool MetricReport::has(const std::string& key) const {
    return std::any_of(values_.begin(), values_.end(), [&](const auto& kv) { return kv.first == key; });
}

double MetricReport::get(const std::string& key) const {
    for (const auto& [k, v] : values_)
        if (k == key) return v;
    throw DataError("metric not found: " + key);
}

std::string MetricReport::to_text() const {
    std::ostringstream out;
    out << std::setprecision(17);
    for (const auto& [k, v] : text_) out << k << '=' << v << '\n';
    for (const auto& [k, v] : values_) out << k << '=' << v << '\n';
    return out.str();
}

std::string MetricReport::to_json() const {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& [k, v] : text_) j[k] = v;
    for (const auto& [k, v] : values_) j[k] = v;
    return j.dump(2) + "\n";
}

void MetricReport::save(const std::filesystem::path& stem) const {
    auto write = [](const std::filesystem::path& p, const std::string& s) {
        std::ofstream out(p);
        if (!out) throw DataError("cannot write metrics file: " + p.string());
        out << s;
    };
    write(std::filesystem::path(stem.string() + ".txt"), to_text());
    write(std::filesystem::path(stem.string() + ".json"), to_json());
}

}  // namespace alter
