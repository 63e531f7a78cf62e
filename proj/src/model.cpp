#include "alter/model.hpp"

#include "alter/numerics/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace alter {

namespace {

// ceil(ratio * n) with a little slack so 0.15 * 20 gives 3, not 4.
Index masked_count(double ratio, Index n) {
    const auto k = static_cast<Index>(std::ceil(ratio * static_cast<double>(n) - 1e-9));
    return std::clamp<Index>(k, 1, n);
}

void check_ratio(double ratio) {
    if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("mask ratio must lie in (0, 1]");
}

// k distinct sorted picks from [0, n).
std::vector<Index> choose(Index n, Index k, Rng& rng) {
    std::vector<Index> all(static_cast<std::size_t>(n));
    std::iota(all.begin(), all.end(), Index{0});
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(static_cast<std::size_t>(k));
    std::sort(all.begin(), all.end());
    return all;
}

}  // namespace

bool PreparedSample::has(Modality m) const {
    switch (m) {
        case Modality::slide: return slide != nullptr;
        case Modality::genes: return bins.has_value();
        case Modality::text: return text != nullptr;
    }
    return false;
}

std::vector<Modality> Dataset::modalities() const {
    std::vector<Modality> out;
    for (Modality m : kModalities)
        if (std::any_of(samples.begin(), samples.end(), [m](const PreparedSample& s) { return s.has(m); }))
            out.push_back(m);
    return out;
}

Dataset prepare_dataset(const Cohort& cohort, std::span<const Index> rows, const ExpressionBinner& binner) {
    Dataset ds;
    ds.cohort = &cohort;
    ds.pathways = pathway_groups(cohort.pathways, cohort.spec.n_genes);
    ds.binner = binner;
    for (Index r : rows) {
        if (r < 0 || r >= cohort.size()) throw DataError("sample row " + std::to_string(r) + " out of range");
        const SampleRecord& rec = cohort.records[static_cast<std::size_t>(r)];
        PreparedSample s;
        s.row = r;
        s.label = rec.cancer_class;
        if (rec.slide) s.slide = &*rec.slide;
        if (rec.text) s.text = &*rec.text;
        if (rec.genes) s.bins = binner(std::span<const double>(rec.genes->data(), static_cast<std::size_t>(rec.genes->size())));
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

Dataset prepare_dataset(const Cohort& cohort, std::span<const Index> rows, int bins, std::span<const Index> fit_rows) {
    std::vector<Index> all;
    if (fit_rows.empty()) {
        all.resize(static_cast<std::size_t>(cohort.size()));
        std::iota(all.begin(), all.end(), Index{0});
        fit_rows = all;
    }
    return prepare_dataset(cohort, rows, fit_expression_binner(cohort, fit_rows, bins));
}

ModelConfig model_config_for(const CohortSpec& spec, ModelConfig base) {
    base.patch_dim = spec.patch_dim;
    base.n_genes = spec.n_genes;
    base.vocab_size = spec.vocab_size;
    base.max_text_len = spec.text_len;
    base.validate();
    return base;
}

MaskPlan mask_wsi(const FeatureBag& bag, Index a, Index b, double ratio, std::uint64_t seed) {
    check_ratio(ratio);
    const TokenGrid grid = reshape_to_grid(bag.size());
    const IndexGroups regions = region_groups(grid, a, b);
    const auto r = static_cast<Index>(regions.size());
    if (r == 0) throw DataError("mask_wsi: slide has no regions");
    Rng rng = make_rng(seed, {hash_name("mask_wsi")});
    MaskPlan plan;
    plan.modality = Modality::slide;
    plan.masked = choose(r, masked_count(ratio, r), rng);
    plan.region_targets.resize(static_cast<Index>(plan.masked.size()), bag.features.cols());
    for (std::size_t i = 0; i < plan.masked.size(); ++i) {
        const auto& cells = regions[static_cast<std::size_t>(plan.masked[i])];
        RowVector acc = RowVector::Zero(bag.features.cols());
        for (Index c : cells) {
            acc += bag.features.row(c);
            plan.masked_patches.push_back(c);
        }
        plan.region_targets.row(static_cast<Index>(i)) = acc / static_cast<double>(cells.size());
    }
    std::sort(plan.masked_patches.begin(), plan.masked_patches.end());
    if (!plan.region_targets.allFinite()) throw DataError("mask_wsi: non-finite region target");
    return plan;
}

MaskPlan mask_genes(std::span<const Index> bins, const IndexGroups& pathways, double ratio, std::uint64_t seed) {
    check_ratio(ratio);
    Rng rng = make_rng(seed, {hash_name("mask_genes")});
    MaskPlan plan;
    plan.modality = Modality::genes;
    std::vector<std::pair<Index, Index>> picked;  // (gene, pathway)
    for (std::size_t p = 0; p < pathways.size(); ++p) {
        const auto& members = pathways[p];
        const auto n = static_cast<Index>(members.size());
        if (n == 0) continue;
        for (Index i : choose(n, masked_count(ratio, n), rng))
            picked.emplace_back(members[static_cast<std::size_t>(i)], static_cast<Index>(p));
    }
    std::sort(picked.begin(), picked.end());
    for (auto [g, p] : picked) {
        if (g < 0 || g >= static_cast<Index>(bins.size())) throw DataError("mask_genes: gene outside profile");
        plan.masked.push_back(g);
        plan.pathway_of.push_back(p);
        plan.target_ids.push_back(bins[static_cast<std::size_t>(g)]);
    }
    return plan;
}

MaskPlan mask_text(const TokenSequence& seq, double ratio, Index vocab_size, std::uint64_t seed) {
    check_ratio(ratio);
    if (vocab_size <= vocab::first_word) throw ConfigError("mask_text: vocabulary has no words");
    std::vector<Index> maskable;
    for (Index i = 1; i < seq.size(); ++i)
        if (seq.real[static_cast<std::size_t>(i)]) maskable.push_back(i);
    if (maskable.empty()) throw DataError("mask_text: no maskable token");

    Rng rng = make_rng(seed, {hash_name("mask_text")});
    MaskPlan plan;
    plan.modality = Modality::text;
    TokenSequence input = seq;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<Index> word(vocab::first_word, vocab_size - 1);
    for (Index i : choose(static_cast<Index>(maskable.size()), masked_count(ratio, static_cast<Index>(maskable.size())), rng)) {
        const Index pos = maskable[static_cast<std::size_t>(i)];
        plan.masked.push_back(pos);
        plan.target_ids.push_back(seq.ids[static_cast<std::size_t>(pos)]);
        const double draw = u(rng);
        int policy = 2;
        if (draw < 0.8) {
            policy = 0;
            input.ids[static_cast<std::size_t>(pos)] = vocab::mask;
        } else if (draw < 0.9) {
            policy = 1;
            input.ids[static_cast<std::size_t>(pos)] = word(rng);
        }
        plan.policy.push_back(policy);
    }
    plan.text_input = std::move(input);
    return plan;
}

Var SampleForward::encoder_cls(Modality m) const {
    const auto& e = encoded[static_cast<std::size_t>(index_of(m))];
    if (!e) throw DataError(std::string("modality ") + std::string(long_name(m)) + " is absent");
    return e->cls;
}

Var SampleForward::sample_embedding(Tape& tape, Index d) const {
    std::vector<Var> parts;
    for (Modality m : kModalities)
        parts.push_back(fused.set.has(m) ? fused.cls(m) : tape.constant(Matrix::Zero(1, d)));
    return concat_cols(parts);
}

AlterModel AlterModel::create(ParamStore& store, const ModelConfig& cfg, double tau_init) {
    cfg.validate();
    if (!(tau_init > 0.0)) throw ConfigError("tau_init must be positive");
    AlterModel m;
    m.cfg_ = cfg;
    m.slide = SlideEncoder::create(store, cfg);
    m.genes = GeneEncoder::create(store, cfg);
    m.text = TextEncoder::create(store, cfg);
    m.fusion = Fusion::create(store, cfg);
    m.wsi_decoder = Linear::create(store, "mlm.slide", cfg.hidden_dim, cfg.patch_dim);
    m.gene_decoder = MlpHead::create(store, "mlm.genes", cfg.hidden_dim, cfg.hidden_dim, cfg.expression_bins);
    m.text_decoder = Linear::create(store, "mlm.text", cfg.hidden_dim, cfg.vocab_size);
    m.log_tau_ = &store.add("clip.log_tau", 1, 1, Init::zeros);
    m.log_tau_->value(0, 0) = std::log(tau_init);
    return m;
}

Var AlterModel::inverse_temperature(Tape& tape) const {
    return exp(scale(clamp(tape.param(*log_tau_), std::log(1e-3), std::log(100.0)), -1.0));
}

SampleForward AlterModel::forward(Tape& tape, const PreparedSample& s, const IndexGroups& pathways,
                                  const MaskPlan* plan, unsigned only) const {
    auto use = [&](Modality m) { return s.has(m) && (only & (1u << index_of(m))) != 0; };
    auto planned = [&](Modality m) { return plan != nullptr && plan->modality == m; };

    SampleForward f;
    SegmentSet segments;
    if (use(Modality::slide)) {
        std::span<const Index> masked;
        if (planned(Modality::slide)) masked = plan->masked_patches;
        Encoded e = slide.encode_aggregated(tape, *s.slide, masked);
        segments[0] = Segment::from_encoded(e);
        f.encoded[0] = e;
    }
    if (use(Modality::genes)) {
        std::span<const Index> masked;
        if (planned(Modality::genes)) masked = plan->masked;
        Encoded e = genes.encode_aggregated(tape, *s.bins, pathways, masked);
        segments[1] = Segment::from_encoded(e);
        f.encoded[1] = e;
    }
    if (use(Modality::text)) {
        const TokenSequence& seq = planned(Modality::text) ? *plan->text_input : *s.text;
        Encoded e = text.encode(tape, seq);
        segments[2] = Segment::from_text(e, seq);
        f.encoded[2] = e;
    }
    f.fused = fusion.fuse(tape, fusion.assemble(tape, segments));
    return f;
}

Var AlterModel::mlm_loss(Tape& tape, const SampleForward& f, const MaskPlan& plan) const {
    if (plan.empty()) throw DataError("mlm_loss: empty mask set");
    Var span = f.fused.span_tokens(plan.modality);
    switch (plan.modality) {
        case Modality::slide: {
            // Region tokens follow the CLS row.
            std::vector<Index> rows(plan.masked.size());
            std::transform(plan.masked.begin(), plan.masked.end(), rows.begin(), [](Index r) { return r + 1; });
            Var pred = wsi_decoder(tape, gather_rows(span, rows));
            return mean(square(sub(pred, tape.constant(plan.region_targets))));
        }
        case Modality::genes: {
            std::vector<Index> rows(plan.pathway_of.size());
            std::transform(plan.pathway_of.begin(), plan.pathway_of.end(), rows.begin(), [](Index p) { return p + 1; });
            Var x = add(gather_rows(span, rows), gather_rows(tape.param(genes.identity_table()), plan.masked));
            return cross_entropy(gene_decoder(tape, x), plan.target_ids);
        }
        case Modality::text:
            return cross_entropy(text_decoder(tape, gather_rows(span, plan.masked)), plan.target_ids);
    }
    throw DataError("mlm_loss: unknown modality");
}

}  // namespace alter
