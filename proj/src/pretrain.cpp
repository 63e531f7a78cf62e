#include "alter/pretrain.hpp"

#include "alter/log.hpp"
#include "alter/numerics/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace alter {

void PretrainConfig::validate() const {
    model.validate();
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (!(mask_ratio > 0.0 && mask_ratio <= 1.0)) fail("mask_ratio must lie in (0, 1]");
    if (!(tau_init > 0.0)) fail("tau_init must be positive");
    if (!(margin >= 0.0)) fail("margin must be nonnegative");
    if (!(weights.alpha >= 0.0) || !(weights.beta >= 0.0)) fail("alpha and beta must be nonnegative");
    if (!(lr > 0.0)) fail("lr must be positive");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (epochs < 0) fail("epochs must be >= 0");
    if (mlm_switch_period < 1) fail("mlm_switch_period must be >= 1");
}

Var clip_pair_loss(Tape& tape, const Var& x, const Var& y, const Var& inv_tau) {
    if (x.rows() != y.rows() || x.cols() != y.cols()) throw DataError("clip_pair_loss: x and y differ in shape");
    const Index n = x.rows();
    if (n == 0) {
        warn("contrastive pair has no co-present samples; contributing 0");
        return tape.constant(Matrix::Zero(1, 1));
    }
    Var s = mul_scalar(matmul_nt(l2_normalize_rows(x), l2_normalize_rows(y)), inv_tau);
    std::vector<Index> diag(static_cast<std::size_t>(n));
    std::iota(diag.begin(), diag.end(), Index{0});
    Var both = add(sum(pick(log_softmax_rows(s), diag)), sum(pick(log_softmax_rows(transpose(s)), diag)));
    return scale(both, -1.0 / (2.0 * static_cast<double>(n)));
}

Var clip_pair_loss(Tape& tape, const Var& x, const Var& y, double tau) {
    if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
    return clip_pair_loss(tape, x, y, tape.constant(Matrix::Constant(1, 1, 1.0 / tau)));
}

namespace {

constexpr std::array<std::array<int, 2>, 3> kPairs{{{0, 1}, {1, 2}, {2, 0}}};

std::array<int, 3> co_present(const std::vector<ClsTriple>& batch) {
    std::array<int, 3> n{};
    for (std::size_t p = 0; p < 3; ++p)
        for (const auto& t : batch)
            n[p] += t[static_cast<std::size_t>(kPairs[p][0])] && t[static_cast<std::size_t>(kPairs[p][1])];
    return n;
}

}  // namespace

Var clip_total(Tape& tape, const std::vector<ClsTriple>& batch, const Var& inv_tau) {
    Var total = tape.constant(Matrix::Zero(1, 1));
    for (const auto& [a, b] : kPairs) {
        std::vector<Var> xs, ys;
        for (const auto& t : batch) {
            const auto& x = t[static_cast<std::size_t>(a)];
            const auto& y = t[static_cast<std::size_t>(b)];
            if (x && y) {
                xs.push_back(*x);
                ys.push_back(*y);
            }
        }
        if (xs.empty()) {
            warn(std::string("no sample holds both ") + std::string(long_name(kModalities[static_cast<std::size_t>(a)])) +
                 " and " + std::string(long_name(kModalities[static_cast<std::size_t>(b)])) + "; pair contributes 0");
            continue;
        }
        total = add(total, clip_pair_loss(tape, concat_rows(xs), concat_rows(ys), inv_tau));
    }
    return total;
}

std::vector<Triplet> mine_triplets(std::span<const int> labels, std::size_t cap, std::uint64_t seed) {
    std::vector<Triplet> all;
    const auto n = static_cast<Index>(labels.size());
    for (Index a = 0; a < n; ++a)
        for (Index p = 0; p < n; ++p) {
            if (p == a || labels[static_cast<std::size_t>(p)] != labels[static_cast<std::size_t>(a)]) continue;
            for (Index q = 0; q < n; ++q)
                if (labels[static_cast<std::size_t>(q)] != labels[static_cast<std::size_t>(a)]) all.push_back({a, p, q});
        }
    if (cap > 0 && all.size() > cap) {
        Rng rng = make_rng(seed, {hash_name("triplets")});
        std::shuffle(all.begin(), all.end(), rng);
        all.resize(cap);
        std::sort(all.begin(), all.end());
    }
    return all;
}

Var triplet_loss(Tape& tape, const Var& anchors, std::span<const Triplet> triplets, double margin) {
    if (triplets.empty()) {
        warn("batch has no valid triplet; triplet loss contributes 0");
        return tape.constant(Matrix::Zero(1, 1));
    }
    std::vector<Index> ia, ip, in;
    for (const auto& t : triplets) {
        for (Index i : t)
            if (i < 0 || i >= anchors.rows()) throw DataError("triplet index outside the batch");
        ia.push_back(t[0]);
        ip.push_back(t[1]);
        in.push_back(t[2]);
    }
    Var a = gather_rows(anchors, ia);
    Var dp = sqrt(row_sum(square(sub(a, gather_rows(anchors, ip)))));
    Var dn = sqrt(row_sum(square(sub(a, gather_rows(anchors, in)))));
    return mean(relu(add_const(sub(dp, dn), margin)));
}

Var triplet_loss(Tape& tape, const Var& anchors, std::span<const int> labels, double margin, std::size_t cap,
                 std::uint64_t seed) {
    if (static_cast<Index>(labels.size()) != anchors.rows()) throw DataError("triplet_loss: label count != rows");
    const auto triplets = mine_triplets(labels, cap, seed);
    return triplet_loss(tape, anchors, triplets, margin);
}

Var total_loss(const Var& mlm, const Var& clip, const Var& triplet, const LossWeights& w) {
    return add(add(scale(mlm, w.alpha), scale(clip, w.beta)), triplet);
}

namespace {

bool maskable(const PreparedSample& s, Modality m, const ModelConfig& cfg) {
    if (!s.has(m)) return false;
    switch (m) {
        case Modality::slide: return s.slide->size() >= cfg.region_a * cfg.region_b;
        case Modality::genes: return !s.bins->empty();
        case Modality::text: return s.text->real_count() > 1;
    }
    return false;
}

}  // namespace

BatchLoss batch_loss(Tape& tape, const AlterModel& model, const Dataset& ds, std::span<const Index> members,
                     Modality mlm_modality, const PretrainConfig& cfg, std::uint64_t batch_seed) {
    const ModelConfig& mc = model.config();
    BatchLoss out;
    std::vector<ClsTriple> cls;
    std::vector<Var> embeddings, mlm_terms;
    std::vector<int> labels;
    for (Index k : members) {
        const PreparedSample& s = ds.samples.at(static_cast<std::size_t>(k));
        std::optional<MaskPlan> plan;
        if (maskable(s, mlm_modality, mc)) {
            const std::uint64_t seed = derive_seed(batch_seed, {static_cast<std::uint64_t>(s.row)});
            switch (mlm_modality) {
                case Modality::slide:
                    plan = mask_wsi(*s.slide, mc.region_a, mc.region_b, cfg.mask_ratio, seed);
                    break;
                case Modality::genes: plan = mask_genes(*s.bins, ds.pathways, cfg.mask_ratio, seed); break;
                case Modality::text: plan = mask_text(*s.text, cfg.mask_ratio, mc.vocab_size, seed); break;
            }
        }
        SampleForward f = model.forward(tape, s, ds.pathways, plan ? &*plan : nullptr);
        if (plan) mlm_terms.push_back(model.mlm_loss(tape, f, *plan));
        ClsTriple t;
        for (Modality m : kModalities)
            if (f.encoded[static_cast<std::size_t>(index_of(m))]) t[static_cast<std::size_t>(index_of(m))] = f.encoder_cls(m);
        cls.push_back(t);
        embeddings.push_back(f.sample_embedding(tape, mc.hidden_dim));
        labels.push_back(s.label);
    }

    out.mlm_samples = static_cast<int>(mlm_terms.size());
    out.mlm = mlm_terms.empty() ? tape.constant(Matrix::Zero(1, 1))
                                : scale(sum(concat_rows(mlm_terms)), 1.0 / static_cast<double>(mlm_terms.size()));
    out.pairs = co_present(cls);
    out.clip = clip_total(tape, cls, model.inverse_temperature(tape));
    const auto triplets = mine_triplets(labels, cfg.max_triplets, derive_seed(batch_seed, {hash_name("triplet")}));
    out.triplets = static_cast<int>(triplets.size());
    out.triplet = embeddings.empty() ? tape.constant(Matrix::Zero(1, 1))
                                     : triplet_loss(tape, concat_rows(embeddings), triplets, cfg.margin);
    out.total = total_loss(out.mlm, out.clip, out.triplet, cfg.weights);
    return out;
}

Modality mlm_modality_for(int epoch, const PretrainConfig& cfg, std::span<const Modality> available) {
    if (available.empty()) throw DataError("dataset holds no modality");
    const auto window = static_cast<std::uint64_t>(epoch / cfg.mlm_switch_period);
    Rng rng = make_rng(cfg.seed, {hash_name("mlm_modality"), window});
    std::uniform_int_distribution<std::size_t> pick_one(0, available.size() - 1);
    return available[pick_one(rng)];
}

Index batches_per_epoch(Index n, Index batch_size) { return (n + batch_size - 1) / batch_size; }

std::vector<Index> epoch_order(Index n, int epoch, std::uint64_t seed) {
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    Rng rng = make_rng(seed, {hash_name("epoch"), static_cast<std::uint64_t>(epoch)});
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

long pretrain_loop(const AlterModel& model, ParamStore& store, const Dataset& ds, const PretrainConfig& cfg,
                   TrainProgress& progress, long max_steps, const std::function<void(const LossRecord&)>& on_batch) {
    cfg.validate();
    const auto n = static_cast<Index>(ds.samples.size());
    if (n == 0) throw DataError("pretraining dataset is empty");
    const Index nb = batches_per_epoch(n, cfg.batch_size);
    const auto available = ds.modalities();
    progress.adam.config.lr = cfg.lr;

    long done = 0;
    std::vector<Index> order;
    int order_epoch = -1;
    while (progress.epoch < cfg.epochs && (max_steps < 0 || done < max_steps)) {
        if (order_epoch != progress.epoch) {
            order = epoch_order(n, progress.epoch, cfg.seed);
            order_epoch = progress.epoch;
        }
        const Index start = progress.batch * cfg.batch_size;
        const Index count = std::min(cfg.batch_size, n - start);
        std::span<const Index> members(order.data() + start, static_cast<std::size_t>(count));

        LossRecord rec;
        rec.epoch = progress.epoch;
        rec.batch = progress.batch;
        rec.mlm_modality = mlm_modality_for(progress.epoch, cfg, available);
        rec.rows = count;

        Tape tape;
        const std::uint64_t seed = derive_seed(
            cfg.seed, {hash_name("batch"), static_cast<std::uint64_t>(progress.epoch), static_cast<std::uint64_t>(progress.batch)});
        BatchLoss bl = batch_loss(tape, model, ds, members, rec.mlm_modality, cfg, seed);
        if (bl.empty()) {
            warn("epoch " + std::to_string(rec.epoch) + " batch " + std::to_string(rec.batch) +
                 " has nothing to train on; skipped");
            rec.skipped = true;
        } else {
            rec.mlm = bl.mlm.scalar();
            rec.clip = bl.clip.scalar();
            rec.triplet = bl.triplet.scalar();
            rec.total = bl.total.scalar();
            store.zero_grad();
            tape.backward(bl.total);
            adam_step(store, progress.adam);
        }
        progress.history.push_back(rec);
        if (on_batch) on_batch(rec);

        if (++progress.batch == nb) {
            progress.batch = 0;
            ++progress.epoch;
        }
        ++done;
    }
    return done;
}

Matrix sample_embeddings(const AlterModel& model, const Dataset& ds) {
    const Index d = model.config().hidden_dim;
    Matrix out(static_cast<Index>(ds.samples.size()), 3 * d);
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        Tape tape;
        SampleForward f = model.forward(tape, ds.samples[i], ds.pathways);
        out.row(static_cast<Index>(i)) = f.sample_embedding(tape, d).value();
    }
    return out;
}

Matrix encoder_cls_matrix(const AlterModel& model, const Dataset& ds, Modality m) {
    const Index d = model.config().hidden_dim;
    Matrix out = Matrix::Zero(static_cast<Index>(ds.samples.size()), d);
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        if (!ds.samples[i].has(m)) continue;
        Tape tape;
        // Only the requested encoder runs; fusion needs nothing else.
        SampleForward f = model.forward(tape, ds.samples[i], ds.pathways, nullptr, 1u << index_of(m));
        out.row(static_cast<Index>(i)) = f.encoder_cls(m).value();
    }
    return out;
}

double retrieval_top1(const Matrix& x, const Matrix& y) {
    if (x.rows() != y.rows() || x.cols() != y.cols() || x.rows() == 0)
        throw DataError("retrieval_top1: x and y must share a nonempty shape");
    Matrix xn = x.rowwise().normalized(), yn = y.rowwise().normalized();
    const Matrix s = xn * yn.transpose();
    Index hits = 0;
    for (Index i = 0; i < s.rows(); ++i) {
        Index best = 0;
        s.row(i).maxCoeff(&best);
        hits += best == i;
    }
    return static_cast<double>(hits) / static_cast<double>(s.rows());
}

}  // namespace alter
