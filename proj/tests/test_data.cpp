#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "alter/data.hpp"
#include "alter/log.hpp"
#include "test_util.hpp"

#include <algorithm>
#include <map>
#include <set>

using namespace alter;

namespace {

CohortSpec small_spec(Index n = 64, std::uint64_t seed = 1) {
    CohortSpec s;
    s.n = n;
    s.seed = seed;
    return s;
}

// Brute-force Harrell concordance, independent of the metrics module.
double brute_cindex(const std::vector<double>& risk, const std::vector<SurvivalLabel>& y) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < y.size(); ++i)
        for (std::size_t j = 0; j < y.size(); ++j) {
            if (!(y[i].time < y[j].time) || y[i].censored) continue;
            den += 1;
            num += risk[i] > risk[j] ? 1.0 : (risk[i] == risk[j] ? 0.5 : 0.0);
        }
    return num / den;
}

}  // namespace

TEST_CASE("generator basics") {
    Cohort c = generate_cohort(small_spec());
    CHECK(c.size() == 64);
    for (const auto& r : c.records) {
        CHECK(r.modality_count() == 3);
        CHECK(r.slide->features.rows() == c.spec.n_patches);
        CHECK(r.slide->features.cols() == c.spec.patch_dim);
        CHECK(r.genes->size() == c.spec.n_genes);
        CHECK(r.genes->minCoeff() >= 0.0);
        CHECK(r.text->size() == c.spec.text_len);
        CHECK(r.text->ids[0] == vocab::cls);
        CHECK(r.cancer_class >= 0);
        CHECK(r.cancer_class < c.spec.classes);
        for (Index id : r.report) CHECK(id < c.spec.vocab_size);
        CHECK(static_cast<Index>(c.vocabulary.size()) == c.spec.vocab_size);
    }
    CHECK(serialize_cohort(c) == serialize_cohort(generate_cohort(small_spec())));
    CHECK(serialize_cohort(c) != serialize_cohort(generate_cohort(small_spec(64, 2))));

    CohortSpec bad = small_spec();
    bad.missing = {0.2, 1.0, 0.0};
    CHECK_THROWS_AS(generate_cohort(bad), ConfigError);
    bad = small_spec(0);
    CHECK_THROWS_AS(generate_cohort(bad), ConfigError);
}

TEST_CASE("reports are templates keyed by class and latent sign") {
    CohortSpec s = small_spec(120);
    s.noise = 0.0;
    s.report_slots = 0;
    Cohort c = generate_cohort(s);
    std::map<std::pair<int, bool>, std::vector<Index>> seen;
    for (const auto& r : c.records) {
        auto key = std::make_pair(r.cancer_class, r.latent(0) > 0.0);
        auto [it, inserted] = seen.emplace(key, r.report);
        if (!inserted) CHECK(it->second == r.report);
    }
    std::set<std::vector<Index>> distinct;
    for (const auto& [k, v] : seen) distinct.insert(v);
    CHECK(distinct.size() == seen.size());

    s.latent_templates = false;
    Cohort by_class = generate_cohort(s);
    std::map<int, std::vector<Index>> per_class;
    for (const auto& r : by_class.records) {
        auto [it, inserted] = per_class.emplace(r.cancer_class, r.report);
        if (!inserted) CHECK(it->second == r.report);
    }
}

TEST_CASE("planted risk orders survival") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        Cohort c = generate_cohort(small_spec(512, seed));
        std::vector<double> risk;
        std::vector<SurvivalLabel> y;
        Index censored = 0;
        for (const auto& r : c.records) {
            risk.push_back(r.latent(0));
            y.push_back(r.survival);
            censored += r.survival.censored;
        }
        CHECK(brute_cindex(risk, y) >= 0.95);
        CHECK(std::abs(static_cast<double>(censored) / 512.0 - 0.3) < 0.06);
    }
}

TEST_CASE("mean patch features are linearly separable by class") {
    Cohort c = generate_cohort(small_spec(400, 4));
    Split sp = split_cohort(c, {0.5, 0.0, 0.5}, 1);
    std::map<int, std::pair<RowVector, int>> centroid;
    auto mean_patch = [&](Index i) -> RowVector {
        return c.records[static_cast<std::size_t>(i)].slide->features.colwise().mean();
    };
    for (Index i : sp.train) {
        auto& [sum, n] = centroid[c.records[static_cast<std::size_t>(i)].cancer_class];
        if (n == 0) sum = RowVector::Zero(c.spec.patch_dim);
        sum += mean_patch(i);
        ++n;
    }
    // Nearest centroid is a linear rule: argmax_k mu_k.x - |mu_k|^2 / 2.
    int correct = 0;
    for (Index i : sp.test) {
        const RowVector x = mean_patch(i);
        int best = -1;
        double best_score = -1e300;
        for (const auto& [k, acc] : centroid) {
            const RowVector mu = acc.first / acc.second;
            const double score = mu.dot(x) - 0.5 * mu.squaredNorm();
            if (score > best_score) best_score = score, best = k;
        }
        correct += best == c.records[static_cast<std::size_t>(i)].cancer_class;
    }
    CHECK(static_cast<double>(correct) / static_cast<double>(sp.test.size()) >= 0.8);
}

TEST_CASE("missing rates are realised after resampling") {
    CohortSpec s = small_spec(2000, 5);
    s.n_patches = 2;
    s.patch_dim = 2;
    s.missing = {0.4, 0.3, 0.5};
    Cohort c = generate_cohort(s);
    std::array<double, 3> missing{};
    for (const auto& r : c.records) {
        CHECK(r.modality_count() >= 1);
        for (Modality m : kModalities) missing[static_cast<std::size_t>(index_of(m))] += r.has(m) ? 0.0 : 1.0;
        if (!r.text) CHECK(r.report.empty());
    }
    for (std::size_t m = 0; m < 3; ++m) CHECK(std::abs(missing[m] / 2000.0 - s.missing[m]) <= 0.03);

    const auto q = calibrated_drop_rates(s.missing);
    const double all = q[0] * q[1] * q[2];
    for (std::size_t m = 0; m < 3; ++m) CHECK(std::abs((q[m] - all) / (1.0 - all) - s.missing[m]) < 1e-12);
}

TEST_CASE("split") {
    Cohort c = generate_cohort(small_spec(100, 6));
    Split s = split_cohort(c, {0.7, 0.2, 0.1}, 3);
    CHECK(s.train.size() == 70);
    CHECK(s.val.size() == 20);
    CHECK(s.test.size() == 10);
    std::vector<Index> all;
    for (auto* p : {&s.train, &s.val, &s.test}) all.insert(all.end(), p->begin(), p->end());
    std::sort(all.begin(), all.end());
    for (Index i = 0; i < 100; ++i) CHECK(all[static_cast<std::size_t>(i)] == i);

    Split again = split_cohort(c, {0.7, 0.2, 0.1}, 3);
    CHECK(again.train == s.train);
    CHECK(again.test == s.test);

    // Each class keeps roughly its share of the training split.
    std::map<int, std::pair<int, int>> counts;
    for (Index i = 0; i < 100; ++i) counts[c.records[static_cast<std::size_t>(i)].cancer_class].second++;
    for (Index i : s.train) counts[c.records[static_cast<std::size_t>(i)].cancer_class].first++;
    for (const auto& [k, v] : counts) CHECK(std::abs(v.first - 0.7 * v.second) <= 1.5);

    CHECK_THROWS_AS(split_cohort(c, {0.5, 0.2, 0.2}, 0), ConfigError);

    Cohort tiny = generate_cohort(small_spec(5, 7));
    std::vector<std::string> warnings;
    set_warning_sink([&](const std::string& m) { warnings.push_back(m); });
    Split t = split_cohort(tiny, {0.6, 0.2, 0.2}, 0);
    set_warning_sink(nullptr);
    CHECK(warnings.size() == 1);
    CHECK(t.train.size() + t.val.size() + t.test.size() == 5);
}

TEST_CASE("cohort container round-trip") {
    CohortSpec s = small_spec(40, 8);
    s.missing = {0.3, 0.3, 0.5};
    Cohort c = generate_cohort(s);
    const bool has_absent_text = std::any_of(c.records.begin(), c.records.end(), [](const auto& r) { return !r.text; });
    CHECK(has_absent_text);
    const std::string bytes = serialize_cohort(c);
    Cohort back = parse_cohort(bytes);
    CHECK(serialize_cohort(back) == bytes);
    for (std::size_t i = 0; i < c.records.size(); ++i) {
        CHECK(back.records[i].has(Modality::text) == c.records[i].has(Modality::text));
        CHECK(back.records[i].report == c.records[i].report);
    }

    std::string corrupt = bytes;
    corrupt[corrupt.size() - 20] = static_cast<char>(corrupt[corrupt.size() - 20] ^ 0x10);
    CHECK_THROWS_WITH_AS(parse_cohort(corrupt), doctest::Contains("checksum"), DataError);
    CHECK_THROWS_WITH_AS(parse_cohort(bytes.substr(0, bytes.size() - 3)), doctest::Contains("truncated"), DataError);
    std::string version = bytes;
    version[13] = '9';
    CHECK_THROWS_WITH_AS(parse_cohort(version), doctest::Contains("version"), DataError);
    CHECK_THROWS_AS(parse_cohort("nope\n"), DataError);

    const auto path = std::filesystem::temp_directory_path() / "alter_cohort_test.bin";
    CohortSpec big = small_spec(1000, 9);
    big.n_patches = 4;
    Cohort large = generate_cohort(big);
    save_cohort(path, large);
    CHECK(serialize_cohort(load_cohort(path)) == serialize_cohort(large));
    std::filesystem::remove(path);
}
