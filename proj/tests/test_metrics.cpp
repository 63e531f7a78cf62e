#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "alter/metrics.hpp"
#include "alter/numerics/rng.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace alter;

namespace {

double pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t j = 0; j < s.size(); ++j)
            if (y[i] == 1 && y[j] == 0) {
                den += 1;
                num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
            }
    return num / den;
}

std::size_t brute_lcs(const Tokens& a, const Tokens& b) {
    // Enumerate every subsequence of a and test it against b.
    std::size_t best = 0;
    for (unsigned mask = 0; mask < (1u << a.size()); ++mask) {
        Tokens sub;
        for (std::size_t i = 0; i < a.size(); ++i)
            if (mask & (1u << i)) sub.push_back(a[i]);
        std::size_t j = 0;
        for (long t : b)
            if (j < sub.size() && sub[j] == t) ++j;
        if (j == sub.size()) best = std::max(best, sub.size());
    }
    return best;
}

}  // namespace

TEST_CASE("concordance index") {
    std::vector<double> t{1, 2, 3, 4};
    std::vector<int> c{0, 0, 0, 0};
    CHECK(concordance_index(std::vector<double>{4, 3, 2, 1}, t, c) == 1.0);
    CHECK(concordance_index(std::vector<double>{1, 2, 3, 4}, t, c) == 0.0);
    CHECK(concordance_index(std::vector<double>{5, 5, 5, 5}, t, c) == 0.5);

    // Censored subjects only count as the later member of a pair.
    std::vector<int> cens{1, 0, 0, 1};
    // Comparable pairs are (1,2), (1,3), (2,3).
    CHECK(concordance_index(std::vector<double>{0, 3, 1, 2}, t, cens) == doctest::Approx(2.0 / 3.0));
    // A risk tie on (1,2) counts half.
    CHECK(concordance_index(std::vector<double>{0, 3, 3, 2}, t, cens) == doctest::Approx(2.5 / 3.0));
    // Equal times are not comparable.
    CHECK_THROWS_AS(concordance_index(std::vector<double>{1, 2}, std::vector<double>{3, 3}, std::vector<int>{0, 0}),
                    DataError);
    CHECK_THROWS_AS(concordance_index(std::vector<double>{1, 2}, std::vector<double>{1, 3}, std::vector<int>{1, 1}),
                    DataError);

    Rng rng(3);
    std::normal_distribution<double> n;
    std::vector<double> r(30), tt(30);
    std::vector<int> cc(30);
    for (std::size_t i = 0; i < 30; ++i) {
        r[i] = n(rng);
        tt[i] = std::abs(n(rng));
        cc[i] = static_cast<int>(i % 3 == 0);
    }
    std::vector<double> neg(30);
    for (std::size_t i = 0; i < 30; ++i) neg[i] = -r[i];
    CHECK(concordance_index(neg, tt, cc) == doctest::Approx(1.0 - concordance_index(r, tt, cc)).epsilon(1e-14));
}

TEST_CASE("auc") {
    CHECK(auc_roc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<int>{0, 0, 1, 1}) == 1.0);
    CHECK(auc_roc(std::vector<double>{1, 1, 1, 1}, std::vector<int>{0, 1, 0, 1}) == 0.5);
    CHECK_THROWS_AS(auc_roc(std::vector<double>{1, 2}, std::vector<int>{1, 1}), DataError);

    Rng rng(4);
    std::uniform_int_distribution<int> coin(0, 1), level(0, 5);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> s(20);
        std::vector<int> y(20);
        for (std::size_t i = 0; i < 20; ++i) {
            s[i] = level(rng);  // coarse levels force ties
            y[i] = coin(rng);
        }
        y[0] = 0;
        y[1] = 1;
        CHECK(std::abs(auc_roc(s, y) - pairwise_auc(s, y)) <= 1e-12);
        std::vector<double> mono(20);
        for (std::size_t i = 0; i < 20; ++i) mono[i] = std::exp(3 * s[i]) - 7;
        CHECK(auc_roc(mono, y) == auc_roc(s, y));
    }

    Matrix scores(4, 3);
    scores << 0.9, 0.05, 0.05, 0.1, 0.8, 0.1, 0.2, 0.2, 0.6, 0.7, 0.2, 0.1;
    CHECK(auc_macro_ovr(scores, std::vector<int>{0, 1, 2, 0}) == 1.0);
}

TEST_CASE("macro F1") {
    std::vector<int> y{0, 0, 1, 1};
    CHECK(macro_f1(y, y, 2) == 1.0);
    CHECK(macro_f1(std::vector<int>{0, 0, 0, 0}, y, 2) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    std::vector<int> p{0, 1, 1, 2, 2, 0}, l{0, 1, 2, 2, 1, 0};
    std::vector<int> pp, ll;
    for (int v : p) pp.push_back((v + 1) % 3);
    for (int v : l) ll.push_back((v + 1) % 3);
    CHECK(macro_f1(pp, ll, 3) == doctest::Approx(macro_f1(p, l, 3)).epsilon(1e-15));
    CHECK(accuracy(p, l) == doctest::Approx(4.0 / 6.0));
}

TEST_CASE("bleu") {
    Tokens ref{1, 2, 3, 4, 5};
    for (int n = 1; n <= 4; ++n) {
        CHECK(sentence_bleu(ref, ref, n, false) == doctest::Approx(1.0).epsilon(1e-15));
        CHECK(corpus_bleu({ref}, {ref}, n) == doctest::Approx(1.0).epsilon(1e-15));
    }
    CHECK(sentence_bleu(Tokens{7, 8}, ref, 1, false) == 0.0);
    CHECK(sentence_bleu(Tokens{}, ref, 1, true) == 0.0);
    CHECK(std::abs(sentence_bleu(Tokens{1, 2}, Tokens{1, 2, 3, 4}, 1, false) - std::exp(-1.0)) <= 1e-9);
    CHECK(sentence_bleu(Tokens{1, 2}, Tokens{1, 2, 3, 4}, 4, true) > 0.0);
    CHECK(sentence_bleu(Tokens{1, 2}, Tokens{1, 2, 3, 4}, 4, false) == 0.0);
    // Clipping: repeated hypothesis words count at most the reference count.
    CHECK(sentence_bleu(Tokens{1, 1, 1, 1}, Tokens{1, 2, 3, 4}, 1, false) == doctest::Approx(0.25));

    // Nonincreasing in n on random corpora, except where the next-order
    // precision beats the geometric mean of the lower ones (reported).
    Rng rng(5);
    std::uniform_int_distribution<long> w(0, 5);
    std::uniform_int_distribution<int> len(4, 10);
    int violations = 0;
    for (int trial = 0; trial < 200; ++trial) {
        Tokens h(static_cast<std::size_t>(len(rng))), r(static_cast<std::size_t>(len(rng)));
        for (auto& x : h) x = w(rng);
        for (auto& x : r) x = w(rng);
        for (int n = 1; n < 4; ++n) {
            const double a = sentence_bleu(h, r, n, true), b = sentence_bleu(h, r, n + 1, true);
            CHECK(a >= 0.0);
            CHECK(a <= 1.0);
            if (b > a + 1e-15) {
                ++violations;
                const BleuCounts k = bleu_counts(h, r, n + 1);
                double lower = 0.0;
                for (int q = 0; q < n; ++q)
                    lower += std::log(std::max(k.matches[static_cast<std::size_t>(q)], 1e-9) /
                                      std::max(k.totals[static_cast<std::size_t>(q)], 1.0));
                const double next = std::log(std::max(k.matches[static_cast<std::size_t>(n)], 1e-9) /
                                             std::max(k.totals[static_cast<std::size_t>(n)], 1.0));
                CHECK(next > lower / n);
            }
        }
    }
    MESSAGE("BLEU-n monotonicity violations over 600 comparisons: " << violations);
}

TEST_CASE("rouge-l") {
    Tokens ref{1, 2, 3, 4, 5};
    CHECK(rouge_l(ref, ref) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(rouge_l(Tokens{9, 8}, ref) == 0.0);
    const double p = 1.0, r = 0.6, b2 = 1.44;
    CHECK(lcs_length(Tokens{1, 3, 5}, ref) == 3);
    CHECK(rouge_l(Tokens{1, 3, 5}, ref) == doctest::Approx((1 + b2) * p * r / (r + b2 * p)).epsilon(1e-15));
    CHECK_THROWS_AS(rouge_l(ref, Tokens{}), DataError);

    Rng rng(6);
    std::uniform_int_distribution<long> w(0, 3);
    std::uniform_int_distribution<int> len(0, 8);
    for (int trial = 0; trial < 300; ++trial) {
        Tokens a(static_cast<std::size_t>(len(rng))), b(static_cast<std::size_t>(len(rng)));
        for (auto& x : a) x = w(rng);
        for (auto& x : b) x = w(rng);
        CHECK(lcs_length(a, b) == brute_lcs(a, b));
        if (!b.empty()) {
            const double f = rouge_l(a, b);
            CHECK(f >= 0.0);
            CHECK(f <= 1.0);
        }
    }
}

TEST_CASE("metric report") {
    MetricReport m;
    m.set_text("task", "subtype");
    m.set("auc", 0.75);
    m.set("f1", 0.5);
    m.set("auc", 0.8);
    CHECK(m.to_text() == "task=subtype\nauc=0.80000000000000004\nf1=0.5\n");
    CHECK(m.to_json().find("\"auc\": 0.8") != std::string::npos);
    CHECK(m.get("f1") == 0.5);
    CHECK_THROWS_AS(m.get("nope"), DataError);
    const auto stem = std::filesystem::temp_directory_path() / "alter_metrics_test";
    m.save(stem);
    std::ifstream in(stem.string() + ".txt");
    std::string first;
    std::getline(in, first);
    CHECK(first == "task=subtype");
    std::filesystem::remove(stem.string() + ".txt");
    std::filesystem::remove(stem.string() + ".json");
}
