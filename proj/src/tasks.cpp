#include "alter/tasks.hpp"

#include "alter/numerics/adam.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace alter {

Index TimeBins::operator()(double t) const {
    Index b = 0;
    for (double e : edges)
        if (e < t) ++b;
    return b;
}

std::vector<Index> TimeBins::operator()(std::span<const double> times) const {
    std::vector<Index> out;
    out.reserve(times.size());
    for (double t : times) out.push_back((*this)(t));
    return out;
}

TimeBins bin_times(std::span<const double> times, std::span<const int> censored, int bins) {
    if (times.size() != censored.size()) throw DataError("bin_times: times and censoring differ in length");
    if (bins < 1) throw ConfigError("bin_times: need at least one bin");
    std::vector<double> observed;
    for (std::size_t i = 0; i < times.size(); ++i)
        if (!censored[i]) observed.push_back(times[i]);
    std::sort(observed.begin(), observed.end());
    const std::set<double> distinct(observed.begin(), observed.end());
    if (static_cast<int>(distinct.size()) < bins)
        throw DataError("bin_times: " + std::to_string(distinct.size()) + " distinct uncensored times for " +
                        std::to_string(bins) + " bins");
    TimeBins tb;
    tb.bins = bins;
    const double n = static_cast<double>(observed.size());
    for (int k = 1; k < bins; ++k) {
        const double at = (n - 1.0) * k / bins;
        const auto lo = static_cast<std::size_t>(std::floor(at));
        const auto hi = std::min(lo + 1, observed.size() - 1);
        tb.edges.push_back(observed[lo] + (at - static_cast<double>(lo)) * (observed[hi] - observed[lo]));
    }
    return tb;
}

Matrix hazards(const Matrix& logits) {
    return logits.unaryExpr([](double z) { return 1.0 / (1.0 + std::exp(-std::clamp(z, -30.0, 30.0))); });
}

Matrix survival_curve(const Matrix& logits) {
    Matrix s = (1.0 - hazards(logits).array()).matrix();
    for (Index j = 1; j < s.cols(); ++j) s.col(j).array() *= s.col(j - 1).array();
    return s;
}

Var nll_survival_loss(const Var& logits, std::span<const Index> bins, std::span<const int> censored) {
    const Index n = logits.rows(), k = logits.cols();
    if (static_cast<Index>(bins.size()) != n || static_cast<Index>(censored.size()) != n)
        throw DataError("nll_survival_loss: label count != batch size");
    // Selector weights for log(1 - h) and log h terms.
    Matrix survive = Matrix::Zero(n, k), event = Matrix::Zero(n, k);
    for (Index i = 0; i < n; ++i) {
        const Index y = bins[static_cast<std::size_t>(i)];
        if (y < 0 || y >= k) throw DataError("nll_survival_loss: bin out of range");
        if (censored[static_cast<std::size_t>(i)]) {
            survive.row(i).head(y + 1).setOnes();
        } else {
            survive.row(i).head(y).setOnes();
            event(i, y) = 1.0;
        }
    }
    Tape& t = logits.tape();
    Var z = clamp(logits, -30.0, 30.0);
    Var ll = sum(hadamard(t.constant(survive), log_sigmoid(scale(z, -1.0)))) + sum(hadamard(t.constant(event), log_sigmoid(z)));
    return scale(ll, -1.0 / static_cast<double>(n));
}

namespace {

struct RiskSets {
    std::vector<Index> events;
    BoolMatrix allowed;  // events x n
};

RiskSets risk_sets(std::span<const double> times, std::span<const int> censored) {
    RiskSets r;
    const auto n = static_cast<Index>(times.size());
    for (Index i = 0; i < n; ++i)
        if (!censored[static_cast<std::size_t>(i)]) r.events.push_back(i);
    if (r.events.empty()) throw DataError("cox_loss: no uncensored patient");
    r.allowed.resize(static_cast<Index>(r.events.size()), n);
    for (std::size_t e = 0; e < r.events.size(); ++e)
        for (Index j = 0; j < n; ++j)
            r.allowed(static_cast<Index>(e), j) =
                times[static_cast<std::size_t>(j)] >= times[static_cast<std::size_t>(r.events[e])];
    return r;
}

}  // namespace

Var cox_loss(const Var& scores, std::span<const double> times, std::span<const int> censored) {
    const Index n = scores.rows();
    if (scores.cols() != 1) throw DataError("cox_loss: scores must be a column");
    if (static_cast<Index>(times.size()) != n || static_cast<Index>(censored.size()) != n)
        throw DataError("cox_loss: label count != batch size");
    const RiskSets r = risk_sets(times, censored);
    Tape& t = scores.tape();
    const auto u = static_cast<Index>(r.events.size());
    Var grid = matmul(t.constant(Matrix::Ones(u, 1)), transpose(scores));
    Var lp = log_softmax_rows(grid, &r.allowed);
    return scale(sum(pick(lp, r.events)), -1.0 / static_cast<double>(u));
}

Matrix cox_closed_form_gradient(const Matrix& x, const Matrix& theta, std::span<const double> times,
                                std::span<const int> censored) {
    const RiskSets r = risk_sets(times, censored);
    const Matrix s = x * theta;
    const Index n = x.rows();
    Vector weight = Vector::Zero(n);  // delta_k - sum_i p_ik
    for (std::size_t e = 0; e < r.events.size(); ++e) {
        const Index i = r.events[e];
        weight(i) += 1.0;
        double mx = -1e300;
        for (Index j = 0; j < n; ++j)
            if (r.allowed(static_cast<Index>(e), j)) mx = std::max(mx, s(j, 0));
        double z = 0.0;
        for (Index j = 0; j < n; ++j)
            if (r.allowed(static_cast<Index>(e), j)) z += std::exp(s(j, 0) - mx);
        for (Index j = 0; j < n; ++j)
            if (r.allowed(static_cast<Index>(e), j)) weight(j) -= std::exp(s(j, 0) - mx) / z;
    }
    return -(weight * theta.transpose()) / static_cast<double>(r.events.size());
}

double cox_gradient_check(const Matrix& x, const Matrix& theta, std::span<const double> times,
                          std::span<const int> censored) {
    Tape t;
    Var xv = t.variable(x);
    t.backward(cox_loss(matmul(xv, t.constant(theta)), times, censored));
    return (t.grad(xv) - cox_closed_form_gradient(x, theta, times, censored)).cwiseAbs().maxCoeff();
}

Var cross_entropy(const Var& logits, std::span<const Index> labels) {
    if (static_cast<Index>(labels.size()) != logits.rows()) throw DataError("cross_entropy: label count != rows");
    for (Index y : labels)
        if (y < 0 || y >= logits.cols()) throw DataError("cross_entropy: label out of range");
    return scale(sum(pick(log_softmax_rows(logits), labels)), -1.0 / static_cast<double>(labels.size()));
}

MlpHead MlpHead::create(ParamStore& store, const std::string& name, Index in, Index hidden, Index classes) {
    return {Linear::create(store, name + ".hidden", in, hidden), Linear::create(store, name + ".out", hidden, classes)};
}

Var MlpHead::operator()(Tape& tape, const Var& x) const { return out(tape, gelu(hidden(tape, x))); }

MultimodalHead MultimodalHead::create(ParamStore& store, const ModelConfig& cfg, const std::string& name) {
    MultimodalHead h;
    h.width_ = cfg.hidden_dim;
    for (Modality m : kModalities)
        h.cross_[static_cast<std::size_t>(index_of(m))] =
            MultiHeadAttention::create(store, name + ".xattn_" + std::string(long_name(m)), cfg.hidden_dim, cfg.heads);
    h.project_ = Linear::create(store, name + ".project", 3 * cfg.hidden_dim, cfg.patient_dim());
    h.fallback_ = MlpHead::create(store, name + ".single", cfg.hidden_dim, cfg.patient_dim(), cfg.patient_dim());
    return h;
}

Var MultimodalHead::operator()(Tape& tape, const FusedState& fused) const {
    if (fused.set.count() == 1) {
        for (Modality m : kModalities)
            if (fused.set.has(m)) return fallback_(tape, fused.cls(m));
    }
    std::vector<Var> parts;
    for (Modality m : kModalities) {
        if (!fused.set.has(m)) {
            parts.push_back(tape.constant(Matrix::Zero(1, width_)));
            continue;
        }
        std::vector<Var> others;
        AttentionMask mask;
        bool hidden = false;
        for (Modality o : kModalities) {
            if (o == m || !fused.set.has(o)) continue;
            const Span& s = fused.set.span(o);
            others.push_back(fused.span_tokens(o));
            for (Index i = s.start; i < s.start + s.length; ++i) {
                const bool v = fused.key_visible[static_cast<std::size_t>(i)];
                mask.key_visible.push_back(v);
                hidden = hidden || !v;
            }
        }
        if (!hidden) mask.key_visible.clear();
        Var kv = others.size() == 1 ? others.front() : concat_rows(others);
        Var cls = fused.cls(m);
        parts.push_back(add(cls, cross_[static_cast<std::size_t>(index_of(m))](tape, cls, kv, mask)));
    }
    return project_(tape, concat_cols(parts));
}

ReportDecoder ReportDecoder::create(ParamStore& store, const ModelConfig& cfg, Index max_len, int depth,
                                   const std::string& name) {
    if (max_len < 1) throw ConfigError("report decoder max_len must be >= 1");
    ReportDecoder d;
    const Index w = cfg.hidden_dim;
    d.tokens_ = &store.add(name + ".tokens", cfg.vocab_size, w, Init::uniform_fan_in, static_cast<double>(w));
    d.positions_ = &store.add(name + ".positions", max_len + 1, w, Init::uniform_fan_in, static_cast<double>(w));
    for (int i = 0; i < depth; ++i) {
        const std::string p = name + ".layer" + std::to_string(i);
        d.layers_.push_back({LayerNorm::create(store, p + ".self_norm", w),
                             MultiHeadAttention::create(store, p + ".self_attn", w, cfg.heads),
                             LayerNorm::create(store, p + ".cross_norm", w),
                             MultiHeadAttention::create(store, p + ".cross_attn", w, cfg.heads),
                             LayerNorm::create(store, p + ".ffn_norm", w),
                             FeedForward::create(store, p + ".ffn", w, cfg.ffn_mult * w)});
    }
    d.final_norm_ = LayerNorm::create(store, name + ".final_norm", w);
    d.out_ = Linear::create(store, name + ".out", w, cfg.vocab_size);
    return d;
}

Var ReportDecoder::logits(Tape& tape, const Var& memory, std::span<const Index> inputs) const {
    const auto n = static_cast<Index>(inputs.size());
    if (n < 1 || n > positions_->rows()) throw DataError("report decoder: input length out of range");
    for (Index id : inputs)
        if (id < 0 || id >= tokens_->rows()) throw DataError("report decoder: token id out of vocabulary");
    Var x = add(gather_rows(tape.param(*tokens_), inputs), slice_rows(tape.param(*positions_), 0, n));
    AttentionMask causal;
    causal.causal = true;
    for (const auto& l : layers_) {
        Var h = l.self_norm(tape, x);
        x = add(x, l.self_attn(tape, h, h, causal));
        x = add(x, l.cross_attn(tape, l.cross_norm(tape, x), memory));
        x = add(x, l.ffn(tape, l.ffn_norm(tape, x)));
    }
    return out_(tape, final_norm_(tape, x));
}

Var ReportDecoder::loss(Tape& tape, const Var& memory, std::span<const Index> words) const {
    if (static_cast<Index>(words.size()) > max_length()) throw DataError("report longer than decoder max_len");
    std::vector<Index> in{vocab::bos}, target(words.begin(), words.end());
    in.insert(in.end(), words.begin(), words.end());
    target.push_back(vocab::eos);
    return cross_entropy(logits(tape, memory, in), target);
}

std::vector<Index> ReportDecoder::generate(const Var& memory, Index max_len) const {
    max_len = std::min(max_len, max_length());
    std::vector<Index> seq{vocab::bos};
    std::vector<Index> out;
    while (static_cast<Index>(out.size()) < max_len) {
        Tape t;
        Var mem = t.constant(memory.value());
        const Matrix l = logits(t, mem, seq).value();
        Index best = 0;
        l.row(l.rows() - 1).maxCoeff(&best);
        if (best == vocab::eos) break;
        out.push_back(best);
        seq.push_back(best);
    }
    return out;
}

ProbeResult linear_probe(const Matrix& train_x, std::span<const int> train_y, const Matrix& test_x,
                         std::span<const int> test_y, int classes, const ProbeOptions& opts) {
    if (train_x.rows() != static_cast<Index>(train_y.size()) || test_x.rows() != static_cast<Index>(test_y.size()))
        throw DataError("linear_probe: label counts differ from rows");
    if (train_x.rows() == 0 || test_x.rows() == 0) throw DataError("linear_probe: empty split");
    const RowVector mu = train_x.colwise().mean();
    RowVector sd = ((train_x.rowwise() - mu).array().square().colwise().mean()).sqrt().matrix();
    for (Index j = 0; j < sd.size(); ++j)
        if (sd(j) < 1e-12) sd(j) = 1.0;
    auto standardize = [&](const Matrix& x) -> Matrix {
        return ((x.rowwise() - mu).array().rowwise() / sd.array()).matrix();
    };
    const Matrix xs = standardize(train_x), ts = standardize(test_x);
    std::vector<Index> y(train_y.begin(), train_y.end());

    Parameter w{"probe.w", Matrix::Zero(xs.cols(), classes), Matrix(), true};
    Parameter b{"probe.b", Matrix::Zero(1, classes), Matrix(), true};
    AdamConfig cfg;
    cfg.lr = opts.lr;
    AdamMoments mw, mb;
    for (int step = 1; step <= opts.steps; ++step) {
        Tape t;
        Var wv = t.param(w), bv = t.param(b);
        w.zero_grad();
        b.zero_grad();
        Var loss = cross_entropy(add_rowwise(matmul(t.constant(xs), wv), bv), y) + scale(sum(square(wv)), opts.l2);
        t.backward(loss);
        adam_update(w.value, w.grad, mw, step, cfg);
        adam_update(b.value, b.grad, mb, step, cfg);
    }
    const Matrix scores = (ts * w.value).rowwise() + RowVector(b.value.row(0));
    ProbeResult r;
    for (Index i = 0; i < scores.rows(); ++i) {
        Index best = 0;
        scores.row(i).maxCoeff(&best);
        r.predictions.push_back(static_cast<int>(best));
    }
    double hit = 0;
    for (std::size_t i = 0; i < r.predictions.size(); ++i) hit += r.predictions[i] == test_y[i];
    r.accuracy = hit / static_cast<double>(r.predictions.size());
    return r;
}

}  // namespace alter
