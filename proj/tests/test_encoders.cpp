#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "alter/encoders.hpp"
#include "alter/numerics/gradcheck.hpp"
#include "test_util.hpp"

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <set>

using namespace alter;
using alter::testing::bit_equal;
using alter::testing::random_matrix;
using alter::testing::tiny_config;

TEST_CASE("slide encoder shapes") {
    ModelConfig cfg = tiny_config();
    cfg.hidden_dim = 64;
    cfg.heads = 4;
    cfg.patch_dim = 1024;
    ParamStore store(3);
    SlideEncoder enc = SlideEncoder::create(store, cfg);
    Rng rng(1);
    Tape t;
    FeatureBag bag{random_matrix(100, 1024, rng)};
    Encoded e = enc.encode(t, bag);
    CHECK(e.cls.rows() == 1);
    CHECK(e.cls.cols() == 64);
    CHECK(e.tokens.rows() == 100);
    CHECK(e.tokens.cols() == 64);

    Encoded agg = enc.encode_aggregated(t, bag);
    CHECK(agg.tokens.rows() == 25);
    CHECK(concat_rows({agg.cls, agg.tokens}).rows() == 26);

    Encoded one = enc.encode(t, FeatureBag{random_matrix(1, 1024, rng)});
    CHECK(one.cls.value().allFinite());
    CHECK(one.tokens.rows() == 1);

    CHECK_THROWS_AS(enc.encode(t, FeatureBag{Matrix(0, 1024)}), DataError);
}

TEST_CASE("grid reshape") {
    TokenGrid g9 = reshape_to_grid(9);
    CHECK(g9.side == 3);
    CHECK(std::count(g9.cells.begin(), g9.cells.end(), -1) == 0);
    TokenGrid g10 = reshape_to_grid(10);
    CHECK(g10.side == 4);
    CHECK(std::count(g10.cells.begin(), g10.cells.end(), -1) == 6);
    CHECK(g10.at(2, 1) == 9);
    CHECK(g10.padded(2, 2));
    TokenGrid g1 = reshape_to_grid(1);
    CHECK(g1.side == 1);
    CHECK(g1.at(0, 0) == 0);
    CHECK_THROWS_AS(reshape_to_grid(0), DataError);
}

TEST_CASE("region aggregation") {
    Tape t;
    Matrix four(4, 1);
    four << 1, 3, 5, 7;
    Var out = region_aggregate(t.constant(four), reshape_to_grid(4), 2, 2);
    CHECK(out.rows() == 1);
    CHECK(out.value()(0, 0) == 4.0);

    Rng rng(2);
    for (Index n : {1, 5, 10, 17, 30}) {
        Matrix x = random_matrix(n, 3, rng);
        Var id = region_aggregate(t.constant(x), reshape_to_grid(n), 1, 1);
        CHECK(bit_equal(id.value(), x));
    }

    CHECK_THROWS_AS(region_groups(reshape_to_grid(3), 2, 2), DataError);
    CHECK_THROWS_AS(region_groups(reshape_to_grid(9), 4, 1), ConfigError);
    CHECK_THROWS_AS(region_groups(reshape_to_grid(9), 0, 1), ConfigError);

    // N=10 on a 4x4 grid: regions hold 4, 2, 4, 0 real cells; keep floor(10/4) = 2.
    IndexGroups g = region_groups(reshape_to_grid(10), 2, 2);
    REQUIRE(g.size() == 2);
    CHECK(g[0] == std::vector<Index>{0, 1, 4, 5});
    CHECK(g[1] == std::vector<Index>{2, 3, 6, 7});
}

TEST_CASE("expression binning") {
    std::vector<double> zeros(20, 0.0);
    for (Index b : discretize_expression(zeros)) CHECK(b == 0);
    std::vector<double> same(20, 2.5);
    for (Index b : discretize_expression(same)) CHECK(b == 0);

    Rng rng(4);
    std::exponential_distribution<double> ex(1.0);
    std::vector<double> v(200);
    for (auto& x : v) x = ex(rng);
    v[7] = 0.0;
    const ExpressionBinner bin = ExpressionBinner::fit(v, 7);
    const auto top = std::max_element(v.begin(), v.end());
    CHECK(bin(*top) == 6);
    CHECK(bin(0.0) == 0);
    std::vector<double> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 1; i < sorted.size(); ++i) CHECK(bin(sorted[i - 1]) <= bin(sorted[i]));
    std::set<Index> used;
    for (double x : v) used.insert(bin(x));
    CHECK(used.size() == 7);

    std::vector<double> bad{1.0, -1.0};
    CHECK_THROWS_AS(ExpressionBinner::fit(bad), DataError);
}

TEST_CASE("gene encoder") {
    ModelConfig cfg = tiny_config();
    cfg.hidden_dim = 64;
    cfg.heads = 4;
    cfg.n_genes = 50;
    ParamStore store(5);
    GeneEncoder enc = GeneEncoder::create(store, cfg);
    std::vector<Index> bins(50);
    for (std::size_t i = 0; i < bins.size(); ++i) bins[i] = static_cast<Index>(i % 5);
    Tape t;
    Encoded e = enc.encode(t, bins);
    CHECK(concat_rows({e.cls, e.tokens}).rows() == 51);
    CHECK(e.tokens.cols() == 64);

    // Identical identity rows and bins give identical inputs.
    Parameter& id = enc.identity_table();
    id.value.row(3) = id.value.row(8);
    bins[3] = bins[8];
    Tape fresh;
    Matrix in = enc.input_embeddings(fresh, bins).value();
    CHECK(bit_equal(in.row(3), in.row(8)));
}

TEST_CASE("gene encoder is permutation equivariant") {
    ModelConfig cfg = tiny_config();
    cfg.n_genes = 7;
    ParamStore store(6);
    GeneEncoder enc = GeneEncoder::create(store, cfg);
    std::vector<Index> bins{0, 1, 2, 3, 4, 1, 2};
    std::vector<Index> perm{6, 2, 0, 5, 1, 4, 3};

    Tape t1;
    Matrix base = enc.encode(t1, bins).tokens.value();

    // Permuting genes means permuting identity rows alongside the bins.
    Parameter& id = enc.identity_table();
    const Matrix saved = id.value;
    std::vector<Index> pbins(7);
    for (std::size_t i = 0; i < 7; ++i) {
        id.value.row(static_cast<Index>(i)) = saved.row(perm[i]);
        pbins[i] = bins[static_cast<std::size_t>(perm[i])];
    }
    Tape t2;
    Matrix permuted = enc.encode(t2, pbins).tokens.value();
    id.value = saved;
    for (Index i = 0; i < 7; ++i)
        CHECK((permuted.row(i) - base.row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("pathway aggregation") {
    Rng rng(7);
    Tape t;
    Matrix x = random_matrix(4, 5, rng);
    IndexGroups g = pathway_groups({{0, 1}, {2, 3}}, 4);
    Var p = pathway_aggregate(t.constant(x), g);
    CHECK(p.rows() == 2);
    CHECK((p.value().row(1) - 0.5 * (x.row(2) + x.row(3))).cwiseAbs().maxCoeff() <= 1e-12);

    Matrix same = Matrix::Ones(6, 1) * random_matrix(1, 5, rng);
    Var one = pathway_aggregate(t.constant(same), pathway_groups({{0, 1, 2, 3, 4, 5}}, 6));
    CHECK((one.value() - same.row(0)).cwiseAbs().maxCoeff() <= 1e-12);

    Matrix y = random_matrix(9, 3, rng);
    IndexGroups none = pathway_groups({}, 9);
    REQUIRE(none.size() == 1);
    Var all = pathway_aggregate(t.constant(y), none);
    CHECK((all.value() - y.colwise().mean()).cwiseAbs().maxCoeff() <= 1e-12);

    IndexGroups partial = pathway_groups({{4, 1}}, 5);
    REQUIRE(partial.size() == 2);
    CHECK(partial[1] == std::vector<Index>{0, 2, 3});

    CHECK_THROWS_AS(pathway_groups({{0}, {}}, 3), DataError);
    CHECK_THROWS_AS(pathway_groups({{0, 1}, {1}}, 3), DataError);
    CHECK_THROWS_AS(pathway_groups({{5}}, 3), DataError);
    CHECK_THROWS_AS(pathway_aggregate(t.constant(y), IndexGroups{}), DataError);
}

TEST_CASE("pathway file round-trip") {
    const auto path = std::filesystem::temp_directory_path() / "alter_pathways_test.txt";
    Pathways p{{0, 1, 2}, {5}, {3, 4}};
    write_pathways(path, p);
    CHECK(read_pathways(path) == p);
    std::filesystem::remove(path);
    CHECK(contiguous_pathways(7, 3) == Pathways{{0, 1, 2}, {3, 4, 5}, {6}});
}

TEST_CASE("text encoder") {
    ModelConfig cfg = tiny_config();
    cfg.hidden_dim = 64;
    cfg.heads = 4;
    cfg.max_text_len = 512;
    cfg.vocab_size = 64;
    ParamStore store(8);
    TextEncoder enc = TextEncoder::create(store, cfg);

    std::vector<Index> words{7, 9, 11, 20, 33};
    Tape t;
    Encoded e = enc.encode(t, TokenSequence::from_words(words, 512));
    CHECK(e.tokens.rows() == 512);
    CHECK(e.tokens.cols() == 64);
    CHECK(bit_equal(e.cls.value(), e.tokens.value().row(0)));

    Encoded empty = enc.encode(t, TokenSequence::from_words({}, 512));
    CHECK(empty.cls.value().allFinite());

    TokenSequence a = TokenSequence::from_words(words, 16);
    TokenSequence b = a;
    for (Index i = 6; i < 16; ++i) b.ids[static_cast<std::size_t>(i)] = 5 + i;
    Matrix ya = enc.encode(t, a).tokens.value();
    Matrix yb = enc.encode(t, b).tokens.value();
    CHECK(bit_equal(ya.topRows(6), yb.topRows(6)));

    TokenSequence no_cls = a;
    no_cls.ids[0] = 7;
    CHECK_THROWS_AS(enc.encode(t, no_cls), DataError);
    TokenSequence oov = a;
    oov.ids[2] = 64;
    CHECK_THROWS_AS(enc.encode(t, oov), DataError);
    CHECK_THROWS_AS(enc.encode(t, TokenSequence::from_words(words, 513)), DataError);
}

TEST_CASE("slide encoder ignores patch multiplicity") {
    ModelConfig cfg = tiny_config();
    ParamStore store(9);
    SlideEncoder enc = SlideEncoder::create(store, cfg);
    Rng rng(10);
    Matrix x = random_matrix(5, cfg.patch_dim, rng);
    Matrix xx(10, cfg.patch_dim);
    xx << x, x;
    Tape t;
    Encoded once = enc.encode(t, FeatureBag{x});
    Encoded twice = enc.encode(t, FeatureBag{xx});
    // No positions: copies of a patch come out identical (up to GEMM
    // summation order), so the doubled bag has the original number of
    // distinct rows. Values shift slightly because the CLS key now holds a
    // smaller share of attention.
    const Matrix& y = twice.tokens.value();
    for (Index i = 0; i < 5; ++i) CHECK((y.row(i) - y.row(i + 5)).cwiseAbs().maxCoeff() <= 1e-12);
    for (Index i = 0; i < 5; ++i)
        for (Index j = i + 1; j < 5; ++j) CHECK((y.row(i) - y.row(j)).cwiseAbs().maxCoeff() > 1e-6);
    CHECK(once.tokens.rows() == 5);
}

TEST_CASE("shape contracts under random draws") {
    Rng rng(11);
    std::uniform_int_distribution<Index> nh(1, 400), ng(1, 200), ab(1, 4);
    Tape t;
    for (int draw = 0; draw < 1000; ++draw) {
        const Index n = nh(rng);
        const TokenGrid grid = reshape_to_grid(n);
        CHECK(grid.side * grid.side >= n);
        CHECK((grid.side - 1) * (grid.side - 1) < n);
        const Index a = std::min(ab(rng), grid.side), b = std::min(ab(rng), grid.side);
        if (a * b > n) {
            CHECK_THROWS_AS(region_groups(grid, a, b), DataError);
        } else {
            IndexGroups g = region_groups(grid, a, b);
            CHECK(static_cast<Index>(g.size()) == n / (a * b));
            for (const auto& r : g) CHECK(!r.empty());
        }

        const Index genes = ng(rng);
        std::vector<Index> order(static_cast<std::size_t>(genes));
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        const Index claimed = std::uniform_int_distribution<Index>(0, genes)(rng);
        Pathways p;
        for (Index i = 0; i < claimed;) {
            const Index len = std::min(claimed - i, std::uniform_int_distribution<Index>(1, 12)(rng));
            p.emplace_back(order.begin() + i, order.begin() + i + len);
            i += len;
        }
        IndexGroups groups = pathway_groups(p, genes);
        CHECK(groups.size() == p.size() + (claimed < genes ? 1 : 0));
        Index covered = 0;
        for (const auto& gset : groups) covered += static_cast<Index>(gset.size());
        CHECK(covered == genes);
    }
}

TEST_CASE("encoder readouts pass finite differences") {
    ModelConfig cfg = tiny_config();
    ParamStore store(12);
    SlideEncoder slide = SlideEncoder::create(store, cfg);
    GeneEncoder genes = GeneEncoder::create(store, cfg);
    TextEncoder text = TextEncoder::create(store, cfg);
    Rng rng(13);
    const FeatureBag bag{random_matrix(6, cfg.patch_dim, rng)};
    const std::vector<Index> bins{0, 1, 4, 2, 3, 1, 0, 2, 2, 4};
    const IndexGroups groups = pathway_groups({{0, 1, 2}, {5, 6}}, cfg.n_genes);
    const TokenSequence seq = TokenSequence::from_words(std::vector<Index>{6, 9, 12}, 6);
    const std::vector<Index> masked{2};
    const Matrix probe = random_matrix(1, cfg.hidden_dim, rng);

    auto readout = [&](Tape& t, const Encoded& e) {
        Var p = t.constant(probe);
        return sum(hadamard(add_rowwise(e.tokens, e.cls), add_rowwise(e.tokens, p))) + sum(hadamard(e.cls, p));
    };
    GradCheckOptions opts;
    opts.max_coords_per_param = 6;
    opts.seed = 1;

    auto sp = store.with_prefix("slide.");
    CHECK(finite_diff_check([&](Tape& t) { return readout(t, slide.encode_aggregated(t, bag, masked)); }, sp, opts)
              .max_rel_error < 1e-4);
    auto gp = store.with_prefix("genes.");
    CHECK(finite_diff_check([&](Tape& t) { return readout(t, genes.encode_aggregated(t, bins, groups, masked)); }, gp,
                            opts)
              .max_rel_error < 1e-4);
    auto tp = store.with_prefix("text.");
    CHECK(finite_diff_check([&](Tape& t) { return readout(t, text.encode(t, seq)); }, tp, opts).max_rel_error < 1e-4);
}
