#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "alter/log.hpp"
#include "alter/numerics/checkpoint.hpp"
#include "alter/numerics/gradcheck.hpp"
#include "alter/pretrain.hpp"
#include "test_util.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

using namespace alter;
using alter::testing::bit_equal;
using alter::testing::random_matrix;
using alter::testing::tiny_config;

namespace {

CohortSpec tiny_cohort_spec(std::uint64_t seed = 0) {
    CohortSpec s;
    s.n = 16;
    s.classes = 2;
    s.n_patches = 9;
    s.patch_dim = 6;
    s.n_genes = 10;
    s.pathway_block = 5;
    s.text_len = 12;
    s.vocab_size = 24;
    s.report_slots = 2;
    s.slot_levels = 3;
    s.seed = seed;
    return s;
}

std::vector<Index> iota_rows(Index n) {
    std::vector<Index> r(static_cast<std::size_t>(n));
    std::iota(r.begin(), r.end(), Index{0});
    return r;
}

struct Fixture {
    Cohort cohort;
    Dataset ds;
    PretrainConfig cfg;
    ParamStore store;
    AlterModel model;

    explicit Fixture(std::uint64_t seed = 0, Index n = 16) : store(seed) {
        CohortSpec spec = tiny_cohort_spec(seed);
        spec.n = n;
        cohort = generate_cohort(spec);
        const auto rows = iota_rows(n);
        ds = prepare_dataset(cohort, rows, tiny_config().expression_bins);
        cfg.model = model_config_for(spec, tiny_config());
        cfg.batch_size = 4;
        cfg.seed = seed;
        model = AlterModel::create(store, cfg.model, cfg.tau_init);
    }
};

// Captures warnings for the lifetime of the object.
struct WarningCapture {
    std::vector<std::string> seen;
    WarningCapture() {
        set_warning_sink([this](const std::string& m) { seen.push_back(m); });
    }
    ~WarningCapture() { set_warning_sink({}); }
};

Matrix grads(ParamStore& store) {
    std::vector<Matrix> parts;
    Index total = 0;
    for (const Parameter* p : store.all()) total += p->grad.size();
    Matrix out(1, total);
    Index at = 0;
    for (const Parameter* p : store.all()) {
        out.block(0, at, 1, p->grad.size()) = Eigen::Map<const RowVector>(p->grad.data(), p->grad.size());
        at += p->grad.size();
    }
    return out;
}

Matrix random_rotation(Index n, Rng& rng) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(Eigen::MatrixXd(random_matrix(n, n, rng)));
    return Matrix(qr.householderQ());
}

}  // namespace

TEST_CASE("slide masking") {
    Rng rng(1);
    FeatureBag bag{random_matrix(100, 4, rng)};
    // 100 patches on a 10x10 grid with 2x2 regions: R = 25.
    MaskPlan p = mask_wsi(bag, 2, 2, 1e-6, 3);
    CHECK(p.masked.size() == 1);
    CHECK(p.masked_patches.size() == 4);
    CHECK(mask_wsi(bag, 2, 2, 0.15, 3).masked.size() == 4);
    const MaskPlan a = mask_wsi(bag, 2, 2, 0.3, 9), b = mask_wsi(bag, 2, 2, 0.3, 9);
    CHECK(a.masked == b.masked);
    CHECK(bit_equal(a.region_targets, b.region_targets));

    // Targets are the region means of the original rows.
    const IndexGroups regions = region_groups(reshape_to_grid(100), 2, 2);
    for (std::size_t i = 0; i < a.masked.size(); ++i) {
        RowVector m = RowVector::Zero(4);
        for (Index c : regions[static_cast<std::size_t>(a.masked[i])]) m += bag.features.row(c);
        CHECK((a.region_targets.row(static_cast<Index>(i)) - m / 4.0).cwiseAbs().maxCoeff() <= 1e-15);
    }

    FeatureBag same{Matrix::Zero(16, 3)};
    same.features.rowwise() += RowVector::LinSpaced(3, 1.0, 3.0);
    const MaskPlan s = mask_wsi(same, 2, 2, 0.5, 0);
    for (Index i = 0; i < s.region_targets.rows(); ++i) CHECK(s.region_targets.row(i) == same.features.row(0));

    CHECK_THROWS_AS(mask_wsi(bag, 2, 2, 0.0, 0), ConfigError);
    FeatureBag tiny{random_matrix(3, 4, rng)};
    CHECK_THROWS_AS(mask_wsi(tiny, 2, 2, 0.15, 0), DataError);
}

TEST_CASE("gene masking") {
    std::vector<Index> bins{3, 1, 4, 1, 5, 0, 2, 6, 5, 3, 5, 0, 1, 2, 3, 4, 5, 6, 0, 1, 2};
    IndexGroups groups;
    groups.push_back({0});
    groups.push_back(iota_rows(10));
    for (auto& g : groups.back()) g += 1;
    groups.push_back(iota_rows(10));
    for (auto& g : groups.back()) g += 11;
    const MaskPlan p = mask_genes(bins, groups, 0.2, 4);
    CHECK(std::count(p.pathway_of.begin(), p.pathway_of.end(), 0) == 1);
    CHECK(std::count(p.pathway_of.begin(), p.pathway_of.end(), 1) == 2);
    CHECK(std::count(p.pathway_of.begin(), p.pathway_of.end(), 2) == 2);
    CHECK(std::find(p.masked.begin(), p.masked.end(), 0) != p.masked.end());
    for (std::size_t i = 0; i < p.masked.size(); ++i) {
        CHECK(p.target_ids[i] == bins[static_cast<std::size_t>(p.masked[i])]);
        const auto& g = groups[static_cast<std::size_t>(p.pathway_of[i])];
        CHECK(std::find(g.begin(), g.end(), p.masked[i]) != g.end());
    }
    CHECK(mask_genes(bins, groups, 0.2, 4).masked == p.masked);
}

TEST_CASE("text masking") {
    std::vector<Index> words{5, 6, 7, 8, 9, 10, 11, 12, 13};
    const TokenSequence seq = TokenSequence::from_words(words, 14);  // 10 real with CLS
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const MaskPlan p = mask_text(seq, 0.3, 20, seed);
        CHECK(p.masked.size() == 3);
        for (std::size_t i = 0; i < p.masked.size(); ++i) {
            const Index pos = p.masked[i];
            CHECK(pos >= 1);
            CHECK(seq.real[static_cast<std::size_t>(pos)]);
            CHECK(p.target_ids[i] == seq.ids[static_cast<std::size_t>(pos)]);
        }
        // Unmasked positions keep their ids, bit for bit.
        for (Index i = 0; i < seq.size(); ++i)
            if (std::find(p.masked.begin(), p.masked.end(), i) == p.masked.end())
                CHECK(p.text_input->ids[static_cast<std::size_t>(i)] == seq.ids[static_cast<std::size_t>(i)]);
    }
    CHECK(mask_text(seq, 1.0, 20, 0).masked.size() == 9);
    const TokenSequence ten = TokenSequence::from_words(std::vector<Index>(10, 7), 12);
    CHECK(mask_text(ten, 1.0, 20, 0).masked.size() == 10);
    CHECK_THROWS_AS(mask_text(TokenSequence::from_words({}, 4), 0.15, 20, 0), DataError);

    // 80/10/10 policy, estimated over 10^4 seeds.
    std::array<double, 3> counts{};
    double total = 0;
    for (std::uint64_t seed = 0; seed < 10000; ++seed) {
        const MaskPlan p = mask_text(seq, 0.15, 20, seed);
        for (std::size_t i = 0; i < p.policy.size(); ++i) {
            counts[static_cast<std::size_t>(p.policy[i])] += 1;
            total += 1;
            const Index got = p.text_input->ids[static_cast<std::size_t>(p.masked[i])];
            if (p.policy[i] == 0) CHECK(got == vocab::mask);
            if (p.policy[i] == 1) CHECK((got >= vocab::first_word && got < 20));
            if (p.policy[i] == 2) CHECK(got == p.target_ids[i]);
        }
    }
    CHECK(std::abs(counts[0] / total - 0.8) <= 0.02);
    CHECK(std::abs(counts[1] / total - 0.1) <= 0.02);
    CHECK(std::abs(counts[2] / total - 0.1) <= 0.02);
}

TEST_CASE("masking leaves unmasked inputs untouched") {
    Fixture f;
    const PreparedSample& s = f.ds.samples[0];
    REQUIRE(s.bins);
    const MaskPlan p = mask_genes(*s.bins, f.ds.pathways, 0.3, 1);
    Tape tape;
    const Matrix clean = f.model.genes.input_embeddings(tape, *s.bins).value();
    const Matrix masked = f.model.genes.input_embeddings(tape, *s.bins, p.masked).value();
    for (Index g = 0; g < clean.rows(); ++g) {
        const bool m = std::find(p.masked.begin(), p.masked.end(), g) != p.masked.end();
        CHECK(bit_equal(clean.row(g), masked.row(g)) != m);
    }

    const MaskPlan w = mask_wsi(*s.slide, 2, 2, 0.3, 1);
    Var x = tape.constant(s.slide->features);
    const Matrix over = overwrite_rows(x, w.masked_patches, tape.param(f.model.slide.mask_vector())).value();
    for (Index r = 0; r < over.rows(); ++r) {
        const bool m = std::find(w.masked_patches.begin(), w.masked_patches.end(), r) != w.masked_patches.end();
        CHECK(bit_equal(over.row(r), m ? f.model.slide.mask_vector().value : s.slide->features.row(r)));
    }
}

TEST_CASE("mlm loss closed forms") {
    Fixture f;
    const PreparedSample& s = f.ds.samples[1];
    const Index v = f.cfg.model.vocab_size;

    // Zero decoder weights give uniform logits: ln V and ln bins.
    f.model.text_decoder.weight->value.setZero();
    f.model.text_decoder.bias->value.setZero();
    f.model.gene_decoder.out.weight->value.setZero();
    f.model.gene_decoder.out.bias->value.setZero();
    {
        Tape tape;
        const MaskPlan p = mask_text(*s.text, 0.3, v, 2);
        SampleForward fw = f.model.forward(tape, s, f.ds.pathways, &p);
        CHECK(std::abs(f.model.mlm_loss(tape, fw, p).scalar() - std::log(static_cast<double>(v))) <= 1e-12);
    }
    {
        Tape tape;
        const MaskPlan p = mask_genes(*s.bins, f.ds.pathways, 0.3, 2);
        SampleForward fw = f.model.forward(tape, s, f.ds.pathways, &p);
        CHECK(std::abs(f.model.mlm_loss(tape, fw, p).scalar() - std::log(5.0)) <= 1e-12);
    }
    // A confident decoder on the single masked target approaches 0.
    {
        const TokenSequence one = TokenSequence::from_words(std::vector<Index>{9}, 4);
        PreparedSample t = s;
        t.text = &one;
        const MaskPlan p = mask_text(one, 0.15, v, 0);
        REQUIRE(p.masked.size() == 1);
        f.model.text_decoder.bias->value(0, 9) = 60.0;
        Tape tape;
        SampleForward fw = f.model.forward(tape, t, f.ds.pathways, &p);
        CHECK(f.model.mlm_loss(tape, fw, p).scalar() <= 1e-20);
    }
    // A slide head that outputs the exact region mean scores 0.
    {
        const MaskPlan p = mask_wsi(*s.slide, 2, 2, 0.15, 5);
        REQUIRE(p.masked.size() == 1);
        f.model.wsi_decoder.weight->value.setZero();
        f.model.wsi_decoder.bias->value = p.region_targets;
        Tape tape;
        SampleForward fw = f.model.forward(tape, s, f.ds.pathways, &p);
        CHECK(f.model.mlm_loss(tape, fw, p).scalar() == 0.0);
    }
    Tape tape;
    SampleForward fw = f.model.forward(tape, s, f.ds.pathways);
    CHECK_THROWS_AS(f.model.mlm_loss(tape, fw, MaskPlan{}), DataError);
}

TEST_CASE("clip pair loss") {
    for (Index n : {2, 8, 32}) {
        Tape tape;
        Rng rng(static_cast<std::uint64_t>(n));
        const Matrix row = random_matrix(1, 6, rng);
        Var x = tape.constant(row.replicate(n, 1)), y = tape.constant(row.replicate(n, 1) * 3.0);
        CHECK(std::abs(clip_pair_loss(tape, x, y, 0.07).scalar() - std::log(static_cast<double>(n))) <= 1e-9);
    }
    {
        Tape tape;
        Var e = tape.constant(Matrix::Identity(2, 2));
        CHECK(std::abs(clip_pair_loss(tape, e, e, 1.0).scalar() - std::log(1.0 + std::exp(-1.0))) <= 1e-9);
        CHECK(std::abs(clip_pair_loss(tape, e, e, 1.0).scalar() - 0.3133) <= 1e-4);
    }
    {
        Tape tape;
        Rng rng(2);
        CHECK(clip_pair_loss(tape, tape.constant(random_matrix(1, 4, rng)), tape.constant(random_matrix(1, 4, rng)), 0.5)
                  .scalar() == 0.0);
        WarningCapture w;
        CHECK(clip_pair_loss(tape, tape.constant(Matrix(0, 4)), tape.constant(Matrix(0, 4)), 0.5).scalar() == 0.0);
        CHECK(w.seen.size() == 1);
    }
    // Matched similarity c grows, mismatched stay at 0: the loss falls.
    double prev = std::numeric_limits<double>::infinity();
    for (double c = 0.0; c <= 1.0 + 1e-12; c += 0.1) {
        Tape tape;
        Matrix x = Matrix::Zero(4, 5), y = Matrix::Zero(4, 5);
        for (Index i = 0; i < 4; ++i) {
            x(i, i) = 1.0;
            y(i, i) = c;
            y(i, 4) = std::sqrt(std::max(0.0, 1.0 - c * c));
        }
        const double l = clip_pair_loss(tape, tape.constant(x), tape.constant(y), 0.2).scalar();
        CHECK(l >= 0.0);
        CHECK(l < prev);
        prev = l;
    }
}

TEST_CASE("learnable temperature is clamped") {
    Fixture f;
    {
        Tape tape;
        CHECK(std::abs(f.model.inverse_temperature(tape).scalar() - 1.0 / 0.07) <= 1e-9);
    }
    f.model.log_tau().value(0, 0) = 50.0;
    {
        Tape tape;
        CHECK(std::abs(f.model.inverse_temperature(tape).scalar() - 0.01) <= 1e-15);
    }
    f.model.log_tau().value(0, 0) = -50.0;
    Tape tape;
    CHECK(std::abs(f.model.inverse_temperature(tape).scalar() - 1000.0) <= 1e-9);
}

TEST_CASE("clip total") {
    Rng rng(3);
    const Index n = 6;
    std::array<Matrix, 3> cls{random_matrix(n, 5, rng), random_matrix(n, 5, rng), random_matrix(n, 5, rng)};
    auto build = [&](Tape& tape, const std::array<Matrix, 3>& c, std::array<std::vector<bool>, 3> present) {
        std::vector<ClsTriple> b(static_cast<std::size_t>(n));
        for (std::size_t m = 0; m < 3; ++m)
            for (Index i = 0; i < n; ++i)
                if (present[m][static_cast<std::size_t>(i)]) b[static_cast<std::size_t>(i)][m] = tape.constant(c[m].row(i));
        return b;
    };
    std::array<std::vector<bool>, 3> all{std::vector<bool>(n, true), std::vector<bool>(n, true), std::vector<bool>(n, true)};

    {
        Tape tape;
        std::array<Matrix, 3> same;
        for (auto& m : same) m = Matrix::Ones(n, 5);
        CHECK(std::abs(clip_total(tape, build(tape, same, all), tape.constant(Matrix::Constant(1, 1, 3.0))).scalar() -
                       3.0 * std::log(static_cast<double>(n))) <= 1e-9);
    }
    {
        // Each sample holds one modality only.
        Tape tape;
        std::array<std::vector<bool>, 3> one{std::vector<bool>(n, false), std::vector<bool>(n, false), std::vector<bool>(n, false)};
        for (Index i = 0; i < n; ++i) one[static_cast<std::size_t>(i % 3)][static_cast<std::size_t>(i)] = true;
        WarningCapture w;
        CHECK(clip_total(tape, build(tape, cls, one), tape.constant(Matrix::Ones(1, 1))).scalar() == 0.0);
        CHECK(w.seen.size() == 3);
    }
    {
        // Relabeling the modalities with the embeddings moved along.
        const std::array<std::array<int, 3>, 6> perms{{{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}}};
        std::array<std::vector<bool>, 3> mixed = all;
        mixed[0][1] = false;
        mixed[1][2] = false;
        mixed[2][3] = false;
        Tape tape;
        Var it = tape.constant(Matrix::Constant(1, 1, 2.0));
        const double base = clip_total(tape, build(tape, cls, mixed), it).scalar();
        for (const auto& p : perms) {
            std::array<Matrix, 3> c;
            std::array<std::vector<bool>, 3> pr;
            for (std::size_t m = 0; m < 3; ++m) {
                c[static_cast<std::size_t>(p[m])] = cls[m];
                pr[static_cast<std::size_t>(p[m])] = mixed[m];
            }
            CHECK(std::abs(clip_total(tape, build(tape, c, pr), it).scalar() - base) <= 1e-12);
        }
    }
}

TEST_CASE("triplet loss") {
    auto line = [](std::vector<double> xs) {
        Matrix m = Matrix::Zero(static_cast<Index>(xs.size()), 3);
        for (std::size_t i = 0; i < xs.size(); ++i) m(static_cast<Index>(i), 0) = xs[i];
        return m;
    };
    const std::vector<Triplet> t{{0, 1, 2}};
    {
        Tape tape;
        CHECK(triplet_loss(tape, tape.constant(line({0, 0, 2})), t, 1.0).scalar() == 0.0);
        CHECK(triplet_loss(tape, tape.constant(line({0, 0.7, -0.7})), t, 1.0).scalar() == 1.0);
        CHECK(triplet_loss(tape, tape.constant(line({0, 1.5, 1.0})), t, 0.5).scalar() == doctest::Approx(1.0).epsilon(1e-15));
    }

    // Brute count: every class contributes c (c - 1) (n - c) triplets.
    const std::vector<int> labels{0, 0, 1, 1, 1, 2, 0, 2};
    auto mined = mine_triplets(labels, 0, 0);
    CHECK(mined.size() == 3 * 2 * 5 + 3 * 2 * 5 + 2 * 1 * 6);
    for (const auto& [a, p, n] : mined) {
        CHECK(a != p);
        CHECK(labels[static_cast<std::size_t>(a)] == labels[static_cast<std::size_t>(p)]);
        CHECK(labels[static_cast<std::size_t>(a)] != labels[static_cast<std::size_t>(n)]);
    }
    const auto capped = mine_triplets(labels, 64, 7);
    CHECK(capped.size() == 64);
    CHECK(capped == mine_triplets(labels, 64, 7));
    CHECK(std::set<Triplet>(capped.begin(), capped.end()).size() == 64);

    // A joint rotation of all anchors leaves distances alone.
    Rng rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix x = random_matrix(8, 12, rng);
        const Matrix q = random_rotation(12, rng);
        Tape tape;
        const double a = triplet_loss(tape, tape.constant(x), labels, 1.0).scalar();
        const double b = triplet_loss(tape, tape.constant(x * q), labels, 1.0).scalar();
        CHECK(std::abs(a - b) <= 1e-12);
    }

    WarningCapture w;
    Tape tape;
    CHECK(triplet_loss(tape, tape.constant(Matrix::Ones(3, 2)), std::vector<int>{1, 1, 1}, 1.0).scalar() == 0.0);
    CHECK(triplet_loss(tape, tape.constant(Matrix::Ones(3, 2)), std::vector<int>{0, 1, 2}, 1.0).scalar() == 0.0);
    CHECK(w.seen.size() == 2);
}

TEST_CASE("total loss and gradient linearity") {
    Tape tape;
    auto c = [&](double v) { return tape.constant(Matrix::Constant(1, 1, v)); };
    CHECK(total_loss(c(1), c(1), c(1), {}).scalar() == 3.0);
    CHECK(total_loss(c(2), c(5), c(0.25), {0.0, 0.0}).scalar() == 0.25);
    CHECK(total_loss(c(2), c(5), c(0.25), {2.0, 1.0}).scalar() - total_loss(c(2), c(5), c(0.25), {}).scalar() == 2.0);

    Fixture f;
    f.cfg.weights = {0.7, 1.3};
    const std::vector<Index> members{0, 1, 2, 3, 4, 5};
    auto grad_of = [&](int which) {
        f.store.zero_grad();
        Tape t;
        BatchLoss bl = batch_loss(t, f.model, f.ds, members, Modality::text, f.cfg, 11);
        const Var roots[4] = {bl.total, bl.mlm, bl.clip, bl.triplet};
        t.backward(roots[which]);
        return grads(f.store);
    };
    const Matrix total = grad_of(0);
    const Matrix combo = 0.7 * grad_of(1) + 1.3 * grad_of(2) + grad_of(3);
    CHECK((total - combo).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK(total.cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("absent modality receives no gradient") {
    Fixture f;
    WarningCapture quiet;
    for (Modality gone : kModalities) {
        Dataset ds = f.ds;
        for (auto& s : ds.samples) {
            if (gone == Modality::slide) s.slide = nullptr;
            if (gone == Modality::genes) s.bins.reset();
            if (gone == Modality::text) s.text = nullptr;
        }
        const std::vector<Index> members{0, 1, 2, 3, 4, 5, 6, 7};
        for (Modality mlm : kModalities) {
            f.store.zero_grad();
            Tape tape;
            BatchLoss bl = batch_loss(tape, f.model, ds, members, mlm, f.cfg, 3);
            tape.backward(bl.total);
            const std::string name(long_name(gone));
            for (const Parameter* p : f.store.all()) {
                const bool owned = p->name.rfind(name + ".", 0) == 0 || p->name.find("expert_" + name) != std::string::npos ||
                                   p->name == "fusion.type_" + name || p->name.rfind("mlm." + name, 0) == 0;
                if (owned) {
                    CHECK(p->grad.cwiseAbs().maxCoeff() == 0.0);
                    const auto& read = tape.parameters_read();
                    CHECK(std::find(read.begin(), read.end(), p) == read.end());
                }
            }
        }
    }
}

TEST_CASE("objective gradients match central differences") {
    Fixture f;
    const std::vector<Index> members{0, 1, 2, 3, 4};
    std::vector<Parameter*> params = f.store.all();
    GradCheckOptions opts;
    opts.max_coords_per_param = 6;
    opts.seed = 4;
    for (Modality mlm : kModalities) {
        auto component = [&](int which) {
            return [&, which](Tape& tape) {
                BatchLoss bl = batch_loss(tape, f.model, f.ds, members, mlm, f.cfg, 21);
                return which == 0 ? bl.mlm : which == 1 ? bl.clip : bl.triplet;
            };
        };
        for (int which = 0; which < 3; ++which) {
            if (mlm != Modality::slide && which > 0) continue;  // CLIP and triplet checked once
            const GradCheckResult r = finite_diff_check(component(which), params, opts);
            INFO("component " << which << " mlm " << short_name(mlm) << " worst " << r.worst_parameter);
            CHECK(r.max_rel_error < 1e-4);
        }
    }
}

TEST_CASE("pretrain loop schedule") {
    CHECK(batches_per_epoch(4, 2) == 2);
    CHECK(batches_per_epoch(5, 2) == 3);
    {
        Fixture f(0, 4);
        f.cfg.batch_size = 2;
        f.cfg.epochs = 1;
        TrainProgress p;
        CHECK(pretrain_loop(f.model, f.store, f.ds, f.cfg, p) == 2);
        CHECK(p.adam.step == 2);
        CHECK(p.history.size() == 2);
        CHECK(p.epoch == 1);
    }

    // Epochs 0-9 share one draw; later windows draw again.
    PretrainConfig cfg;
    const std::vector<Modality> all(kModalities.begin(), kModalities.end());
    int changed = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        cfg.seed = seed;
        const Modality first = mlm_modality_for(0, cfg, all);
        for (int e = 1; e < 10; ++e) CHECK(mlm_modality_for(e, cfg, all) == first);
        const Modality second = mlm_modality_for(10, cfg, all);
        for (int e = 11; e < 20; ++e) CHECK(mlm_modality_for(e, cfg, all) == second);
        changed += second != first;
    }
    CHECK(changed > 0);
    const std::vector<Modality> only_text{Modality::text};
    CHECK(mlm_modality_for(37, cfg, only_text) == Modality::text);
}

TEST_CASE("batches with nothing to learn are skipped") {
    Fixture f(0, 4);
    const TokenSequence empty = TokenSequence::from_words({}, 6);
    Dataset ds = f.ds;
    ds.samples.resize(1);
    ds.samples[0].slide = nullptr;
    ds.samples[0].bins.reset();
    ds.samples[0].text = &empty;
    f.cfg.epochs = 2;
    const ParamStore& cs = f.store;
    const auto before = parameter_digest(cs.all());
    WarningCapture w;
    TrainProgress p;
    CHECK(pretrain_loop(f.model, f.store, ds, f.cfg, p) == 2);
    CHECK(p.history.size() == 2);
    CHECK(p.history[0].skipped);
    CHECK(p.adam.step == 0);
    CHECK(parameter_digest(cs.all()) == before);
    CHECK(std::any_of(w.seen.begin(), w.seen.end(), [](const std::string& s) { return s.find("skipped") != std::string::npos; }));
}

TEST_CASE("resume reproduces the next steps bit-exactly") {
    auto run = [](long first, long second) {
        Fixture f(5);
        f.cfg.epochs = 3;
        TrainProgress p;
        pretrain_loop(f.model, f.store, f.ds, f.cfg, p, first);
        if (second == 0) return snapshot(f.store);
        Checkpoint c = snapshot(f.store);
        append_adam_state(c, p.adam);
        // Fresh process: new store, new model, state from the checkpoint.
        Fixture g(5);
        g.cfg.epochs = 3;
        restore(g.store, c);
        TrainProgress q;
        restore_adam_state(c, q.adam);
        q.epoch = p.epoch;
        q.batch = p.batch;
        pretrain_loop(g.model, g.store, g.ds, g.cfg, q, second);
        return snapshot(g.store);
    };
    const Checkpoint straight = run(7, 0);
    const Checkpoint resumed = run(5, 2);
    REQUIRE(straight.tensors.size() == resumed.tensors.size());
    for (std::size_t i = 0; i < straight.tensors.size(); ++i) {
        INFO(straight.tensors[i].first);
        CHECK(bit_equal(straight.tensors[i].second, resumed.tensors[i].second));
    }
}

TEST_CASE("loss falls over the first epochs on planted data") {
    int decreasing = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        CohortSpec spec;
        spec.n = 128;
        spec.seed = seed;
        const Cohort cohort = generate_cohort(spec);
        const auto rows = iota_rows(spec.n);
        ModelConfig base = tiny_config();
        base.hidden_dim = 16;
        PretrainConfig cfg;
        cfg.model = model_config_for(spec, base);
        const Dataset ds = prepare_dataset(cohort, rows, cfg.model.expression_bins);
        cfg.batch_size = 32;
        cfg.epochs = 5;
        cfg.seed = seed;
        ParamStore store(seed);
        AlterModel model = AlterModel::create(store, cfg.model, cfg.tau_init);
        std::array<double, 5> epoch_loss{};
        TrainProgress p;
        pretrain_loop(model, store, ds, cfg, p, -1,
                      [&](const LossRecord& r) { epoch_loss[static_cast<std::size_t>(r.epoch)] += r.total; });
        bool ok = true;
        for (std::size_t e = 1; e < 5; ++e) ok = ok && epoch_loss[e] < epoch_loss[e - 1];
        MESSAGE("seed " << seed << " epoch losses " << epoch_loss[0] << " .. " << epoch_loss[4]);
        decreasing += ok;
    }
    CHECK(decreasing >= 4);
}
