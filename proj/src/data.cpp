#include "alter/data.hpp"

#include "alter/log.hpp"
#include "alter/numerics/rng.hpp"

#include <json.hpp>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace alter {

namespace {
constexpr Index kTemplateWords() { return 5; }
}  // namespace

bool SampleRecord::has(Modality m) const {
    switch (m) {
        case Modality::slide: return slide.has_value();
        case Modality::genes: return genes.has_value();
        case Modality::text: return text.has_value();
    }
    return false;
}

void CohortSpec::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("cohort spec: " + m); };
    if (n < 1) fail("n must be >= 1");
    if (classes < 1) fail("classes must be >= 1");
    if (latent_dim < 2) fail("latent_dim must be >= 2");
    if (n_patches < 1 || patch_dim < 1) fail("n_patches and patch_dim must be >= 1");
    if (n_genes < 1 || pathway_block < 1) fail("n_genes and pathway_block must be >= 1");
    for (double m : missing)
        if (!(m >= 0.0 && m < 1.0)) fail("missing rates must lie in [0, 1)");
    if (!(noise >= 0.0)) fail("noise must be >= 0");
    if (!(censor_rate >= 0.0 && censor_rate < 1.0)) fail("censor_rate must lie in [0, 1)");
    if (report_slots < 0 || report_slots > latent_dim) fail("report_slots must lie in [0, latent_dim]");
    if (slot_levels < 1) fail("slot_levels must be >= 1");
    if (vocab_size < vocab::first_word + report_slots * slot_levels + 8)
        fail("vocab_size too small for the template words and slot tokens");
    if (text_len < 1 + kTemplateWords() + report_slots) fail("text_len cannot hold CLS, template and slot tokens");
}

namespace {

constexpr Index kComponents = 2;

std::uint64_t tag(std::string_view s) { return hash_name(s); }

struct Planted {
    std::vector<Matrix> prototypes;  // per class: kComponents x patch_dim
    Matrix patch_loading;           // latent_dim x patch_dim
    Matrix gene_loading;            // latent_dim x n_genes (sparse)
    Matrix gene_offset;             // classes x n_genes
    std::vector<std::vector<Index>> templates;
};

Matrix normal_matrix(Index r, Index c, Rng& rng, double sd = 1.0) {
    std::normal_distribution<double> n(0.0, sd);
    Matrix m(r, c);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

Index word_pool(const CohortSpec& s) { return s.vocab_size - vocab::first_word - s.report_slots * s.slot_levels; }

Planted plant(const CohortSpec& s) {
    Planted p;
    Rng rng = make_rng(s.seed, {tag("prototypes")});
    for (int k = 0; k < s.classes; ++k) p.prototypes.push_back(normal_matrix(kComponents, s.patch_dim, rng));
    Rng lr = make_rng(s.seed, {tag("patch-loading")});
    p.patch_loading = normal_matrix(s.latent_dim, s.patch_dim, lr, 1.0 / std::sqrt(static_cast<double>(s.latent_dim)));

    Rng gr = make_rng(s.seed, {tag("gene-loading")});
    p.gene_loading = normal_matrix(s.latent_dim, s.n_genes, gr);
    std::bernoulli_distribution keep(0.5);
    for (Index i = 0; i < p.gene_loading.size(); ++i)
        if (!keep(gr)) p.gene_loading.data()[i] = 0.0;
    p.gene_offset = normal_matrix(s.classes, s.n_genes, gr, 0.5);

    Rng tr = make_rng(s.seed, {tag("templates")});
    const Index keys = s.classes * (s.latent_templates ? 2 : 1);
    std::uniform_int_distribution<Index> word(0, word_pool(s) - 1);
    while (static_cast<Index>(p.templates.size()) < keys) {
        std::vector<Index> t(static_cast<std::size_t>(kTemplateWords()));
        for (auto& w : t) w = vocab::first_word + word(tr);
        if (std::find(p.templates.begin(), p.templates.end(), t) == p.templates.end()) p.templates.push_back(t);
    }
    return p;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

}  // namespace

std::array<double, 3> calibrated_drop_rates(const std::array<double, 3>& p) {
    std::array<double, 3> q = p;
    for (int it = 0; it < 1000; ++it) {
        const double all = q[0] * q[1] * q[2];
        std::array<double, 3> next{};
        double delta = 0.0;
        for (std::size_t m = 0; m < 3; ++m) {
            next[m] = p[m] * (1.0 - all) + all;
            delta = std::max(delta, std::abs(next[m] - q[m]));
        }
        q = next;
        if (delta < 1e-15) break;
    }
    for (double v : q)
        if (!(v < 1.0)) throw ConfigError("missing rates leave no modality with positive probability");
    return q;
}

Cohort generate_cohort(const CohortSpec& spec) {
    spec.validate();
    const Planted planted = plant(spec);
    const auto drop = calibrated_drop_rates(spec.missing);

    Cohort c;
    c.spec = spec;
    c.pathways = contiguous_pathways(spec.n_genes, spec.pathway_block);
    for (int k = 0; k < spec.classes; ++k) c.class_names.push_back("class" + std::to_string(k));
    c.vocabulary = {"[PAD]", "[CLS]", "[MASK]", "[BOS]", "[EOS]"};
    for (Index w = 0; w < word_pool(spec); ++w) c.vocabulary.push_back("w" + std::to_string(w));
    for (Index j = 0; j < spec.report_slots; ++j)
        for (Index q = 0; q < spec.slot_levels; ++q)
            c.vocabulary.push_back("s" + std::to_string(j) + "_" + std::to_string(q));

    const Index slot_base = vocab::first_word + word_pool(spec);
    for (Index i = 0; i < spec.n; ++i) {
        Rng rng = make_rng(spec.seed, {tag("sample"), static_cast<std::uint64_t>(i)});
        std::normal_distribution<double> normal;
        std::uniform_real_distribution<double> unit;
        SampleRecord r;
        r.id = "s" + std::to_string(i);
        r.cancer_class = std::uniform_int_distribution<int>(0, spec.classes - 1)(rng);
        r.latent.resize(spec.latent_dim);
        for (Index j = 0; j < spec.latent_dim; ++j) r.latent(j) = normal(rng);
        r.mutation = r.latent(1) > 0.0 ? 1 : 0;
        const auto k = static_cast<std::size_t>(r.cancer_class);
        const RowVector z = r.latent.transpose();

        Matrix patches(spec.n_patches, spec.patch_dim);
        const RowVector shared = z * planted.patch_loading;
        std::bernoulli_distribution pick_component(0.5);
        for (Index p = 0; p < spec.n_patches; ++p) {
            patches.row(p) = planted.prototypes[k].row(pick_component(rng) ? 1 : 0) + shared;
            for (Index j = 0; j < spec.patch_dim; ++j) patches(p, j) += spec.noise * normal(rng);
        }

        Vector genes = (z * planted.gene_loading + planted.gene_offset.row(static_cast<Index>(k))).transpose();
        for (Index g = 0; g < spec.n_genes; ++g) genes(g) = std::max(0.0, 0.5 + genes(g) + spec.noise * normal(rng));

        const Index key = spec.latent_templates ? 2 * r.cancer_class + (r.latent(0) > 0.0 ? 1 : 0) : r.cancer_class;
        std::vector<Index> words = planted.templates[static_cast<std::size_t>(key)];
        for (Index j = 0; j < spec.report_slots; ++j) {
            const auto q = std::min(spec.slot_levels - 1,
                                    static_cast<Index>(std::floor(normal_cdf(r.latent(j)) * static_cast<double>(spec.slot_levels))));
            words.push_back(slot_base + j * spec.slot_levels + q);
        }

        const double rate = std::exp(spec.risk_strength * r.latent(0));
        const double event = std::exponential_distribution<double>(1.0)(rng) / rate;
        const bool censored = unit(rng) < spec.censor_rate;
        const double fraction = unit(rng);
        r.survival = {censored ? event * fraction : event, censored ? 1 : 0};

        std::array<bool, 3> present{};
        do {
            for (std::size_t m = 0; m < 3; ++m) present[m] = unit(rng) >= drop[m];
        } while (!(present[0] || present[1] || present[2]));

        if (present[0]) r.slide = FeatureBag{std::move(patches)};
        if (present[1]) r.genes = std::move(genes);
        if (present[2]) {
            r.text = TokenSequence::from_words(words, spec.text_len);
            r.report = std::move(words);
        }
        c.records.push_back(std::move(r));
    }
    return c;
}

Split split_cohort(const Cohort& cohort, std::array<double, 3> ratios, std::uint64_t seed) {
    if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9 || *std::min_element(ratios.begin(), ratios.end()) < 0.0)
        throw ConfigError("split ratios must be nonnegative and sum to 1");
    const Index n = cohort.size();
    std::vector<std::vector<Index>> by_class(static_cast<std::size_t>(std::max(cohort.spec.classes, 1)));
    for (Index i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(cohort.records[static_cast<std::size_t>(i)].cancer_class);
        if (k >= by_class.size()) by_class.resize(k + 1);
        by_class[k].push_back(i);
    }
    bool stratify = true;
    for (const auto& members : by_class)
        if (!members.empty() && members.size() < 3) stratify = false;

    // Each sample gets a key in [0, 1): its rank position within its class
    // (or within the whole cohort when not stratifying). Cutting the key
    // order at global counts keeps each class close to the requested ratio.
    std::vector<std::pair<double, Index>> keyed;
    if (stratify) {
        for (std::size_t k = 0; k < by_class.size(); ++k) {
            auto members = by_class[k];
            Rng rng = make_rng(seed, {tag("split"), k});
            std::shuffle(members.begin(), members.end(), rng);
            const double m = static_cast<double>(members.size());
            for (std::size_t r = 0; r < members.size(); ++r)
                keyed.emplace_back((static_cast<double>(r) + 0.5) / m, members[r]);
        }
    } else {
        warn("split: a class has fewer than 3 members; using a non-stratified split");
        std::vector<Index> all(static_cast<std::size_t>(n));
        std::iota(all.begin(), all.end(), 0);
        Rng rng = make_rng(seed, {tag("split")});
        std::shuffle(all.begin(), all.end(), rng);
        for (std::size_t r = 0; r < all.size(); ++r)
            keyed.emplace_back((static_cast<double>(r) + 0.5) / static_cast<double>(n), all[r]);
    }
    std::stable_sort(keyed.begin(), keyed.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

    const auto n_train = static_cast<std::size_t>(std::llround(ratios[0] * static_cast<double>(n)));
    const auto n_val = std::min(keyed.size() - n_train,
                                static_cast<std::size_t>(std::llround(ratios[1] * static_cast<double>(n))));
    Split s;
    for (std::size_t i = 0; i < keyed.size(); ++i) {
        auto& dst = i < n_train ? s.train : (i < n_train + n_val ? s.val : s.test);
        dst.push_back(keyed[i].second);
    }
    for (auto* part : {&s.train, &s.val, &s.test}) std::sort(part->begin(), part->end());
    return s;
}

// ---------------------------------------------------------------------------
// Container: "ALTER-COHORT <version>\n", one JSON header line, then
// "payload <bytes> <crc32>\n" and the little-endian record payload.

namespace {

constexpr const char* kCohortMagic = "ALTER-COHORT";
constexpr int kCohortVersion = 1;

class Writer {
public:
    void u8(unsigned v) { out_.push_back(static_cast<char>(v & 0xffu)); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) u8((v >> (8 * i)) & 0xffu);
    }
    void i32(std::int64_t v) {
        if (v < INT32_MIN || v > INT32_MAX) throw DataError("cohort value out of 32-bit range");
        u32(static_cast<std::uint32_t>(static_cast<std::int32_t>(v)));
    }
    void f64(double v) {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        for (int i = 0; i < 8; ++i) u8(static_cast<unsigned>((bits >> (8 * i)) & 0xffu));
    }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        out_ += s;
    }
    std::string& bytes() { return out_; }

private:
    std::string out_;
};

class Reader {
public:
    Reader(const std::string& s, std::size_t pos) : s_(s), pos_(pos) {}
    unsigned u8() {
        need(1);
        return static_cast<unsigned char>(s_[pos_++]);
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s_[pos_++])) << (8 * i);
        return v;
    }
    std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
    double f64() {
        need(8);
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(s_[pos_++])) << (8 * i);
        return std::bit_cast<double>(bits);
    }
    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string out = s_.substr(pos_, n);
        pos_ += n;
        return out;
    }
    std::size_t count(std::size_t elem_bytes) {
        const std::uint32_t n = u32();
        need(static_cast<std::size_t>(n) * elem_bytes);
        return n;
    }
    bool done() const { return pos_ == s_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > s_.size()) throw DataError("cohort payload truncated");
    }
    const std::string& s_;
    std::size_t pos_;
};

nlohmann::json spec_to_json(const CohortSpec& s) {
    return {{"n", s.n},
            {"classes", s.classes},
            {"latent_dim", s.latent_dim},
            {"n_patches", s.n_patches},
            {"patch_dim", s.patch_dim},
            {"n_genes", s.n_genes},
            {"pathway_block", s.pathway_block},
            {"text_len", s.text_len},
            {"vocab_size", s.vocab_size},
            {"missing", s.missing},
            {"noise", s.noise},
            {"censor_rate", s.censor_rate},
            {"risk_strength", s.risk_strength},
            {"report_slots", s.report_slots},
            {"slot_levels", s.slot_levels},
            {"latent_templates", s.latent_templates},
            {"seed", s.seed}};
}

CohortSpec spec_from_json(const nlohmann::json& j) {
    CohortSpec s;
    s.n = j.at("n").get<Index>();
    s.classes = j.at("classes").get<int>();
    s.latent_dim = j.at("latent_dim").get<Index>();
    s.n_patches = j.at("n_patches").get<Index>();
    s.patch_dim = j.at("patch_dim").get<Index>();
    s.n_genes = j.at("n_genes").get<Index>();
    s.pathway_block = j.at("pathway_block").get<Index>();
    s.text_len = j.at("text_len").get<Index>();
    s.vocab_size = j.at("vocab_size").get<Index>();
    s.missing = j.at("missing").get<std::array<double, 3>>();
    s.noise = j.at("noise").get<double>();
    s.censor_rate = j.at("censor_rate").get<double>();
    s.risk_strength = j.at("risk_strength").get<double>();
    s.report_slots = j.at("report_slots").get<Index>();
    s.slot_levels = j.at("slot_levels").get<Index>();
    s.latent_templates = j.at("latent_templates").get<bool>();
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
}

std::uint32_t crc(const std::string& s, std::size_t from) {
    uLong c = crc32(0L, Z_NULL, 0);
    c = crc32(c, reinterpret_cast<const Bytef*>(s.data() + from), static_cast<uInt>(s.size() - from));
    return static_cast<std::uint32_t>(c);
}

}  // namespace

std::string cohort_manifest(const CohortSpec& spec) { return spec_to_json(spec).dump(2) + "\n"; }

std::string serialize_cohort(const Cohort& c) {
    Writer w;
    for (const auto& r : c.records) {
        w.str(r.id);
        w.u8((r.slide ? 1u : 0u) | (r.genes ? 2u : 0u) | (r.text ? 4u : 0u));
        w.i32(r.cancer_class);
        w.i32(r.mutation);
        w.f64(r.survival.time);
        w.u8(static_cast<unsigned>(r.survival.censored));
        w.u32(static_cast<std::uint32_t>(r.latent.size()));
        for (Index i = 0; i < r.latent.size(); ++i) w.f64(r.latent(i));
        if (r.slide) {
            const Matrix& f = r.slide->features;
            w.u32(static_cast<std::uint32_t>(f.rows()));
            w.u32(static_cast<std::uint32_t>(f.cols()));
            for (Index i = 0; i < f.rows(); ++i)
                for (Index j = 0; j < f.cols(); ++j) w.f64(f(i, j));
        }
        if (r.genes) {
            w.u32(static_cast<std::uint32_t>(r.genes->size()));
            for (Index i = 0; i < r.genes->size(); ++i) w.f64((*r.genes)(i));
        }
        if (r.text) {
            w.u32(static_cast<std::uint32_t>(r.text->ids.size()));
            for (Index id : r.text->ids) w.i32(id);
            for (bool b : r.text->real) w.u8(b ? 1u : 0u);
        }
        w.u32(static_cast<std::uint32_t>(r.report.size()));
        for (Index id : r.report) w.i32(id);
    }
    nlohmann::json head = {{"spec", spec_to_json(c.spec)},
                           {"records", c.records.size()},
                           {"pathways", c.pathways},
                           {"class_names", c.class_names},
                           {"vocabulary", c.vocabulary}};
    std::ostringstream out;
    out << kCohortMagic << ' ' << kCohortVersion << '\n'
        << head.dump() << '\n'
        << "payload " << w.bytes().size() << ' ' << crc(w.bytes(), 0) << '\n';
    return out.str() + w.bytes();
}

Cohort parse_cohort(const std::string& bytes) {
    std::size_t pos = 0;
    auto line = [&]() {
        const auto nl = bytes.find('\n', pos);
        if (nl == std::string::npos) throw DataError("cohort header truncated");
        std::string l = bytes.substr(pos, nl - pos);
        pos = nl + 1;
        return l;
    };
    {
        std::istringstream first(line());
        std::string magic;
        int version = 0;
        first >> magic >> version;
        if (magic != kCohortMagic) throw DataError("not a cohort file (bad magic)");
        if (version != kCohortVersion)
            throw DataError("cohort version " + std::to_string(version) + " unsupported (expected " +
                            std::to_string(kCohortVersion) + ")");
    }
    nlohmann::json head;
    try {
        head = nlohmann::json::parse(line());
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("cohort header is not valid JSON: ") + e.what());
    }
    std::size_t payload = 0;
    std::uint32_t expected_crc = 0;
    {
        std::istringstream pl(line());
        std::string word;
        pl >> word >> payload >> expected_crc;
        if (word != "payload" || !pl) throw DataError("cohort payload line malformed");
    }
    if (bytes.size() - pos < payload) throw DataError("cohort payload truncated");
    if (bytes.size() - pos > payload) throw DataError("cohort file has trailing bytes");
    if (crc(bytes, pos) != expected_crc) throw DataError("cohort checksum mismatch (file corrupted)");

    Cohort c;
    try {
        c.spec = spec_from_json(head.at("spec"));
        c.pathways = head.at("pathways").get<Pathways>();
        c.class_names = head.at("class_names").get<std::vector<std::string>>();
        c.vocabulary = head.at("vocabulary").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("cohort header missing field: ") + e.what());
    }
    const auto n = head.at("records").get<std::size_t>();
    Reader r(bytes, pos);
    for (std::size_t i = 0; i < n; ++i) {
        SampleRecord s;
        s.id = r.str();
        const unsigned flags = r.u8();
        s.cancer_class = r.i32();
        s.mutation = r.i32();
        s.survival.time = r.f64();
        s.survival.censored = static_cast<int>(r.u8());
        s.latent.resize(static_cast<Index>(r.count(8)));
        for (Index j = 0; j < s.latent.size(); ++j) s.latent(j) = r.f64();
        if (flags & 1u) {
            const auto rows = static_cast<Index>(r.u32());
            const auto cols = static_cast<Index>(r.u32());
            Matrix f(rows, cols);
            for (Index a = 0; a < rows; ++a)
                for (Index b = 0; b < cols; ++b) f(a, b) = r.f64();
            s.slide = FeatureBag{std::move(f)};
        }
        if (flags & 2u) {
            Vector g(static_cast<Index>(r.count(8)));
            for (Index j = 0; j < g.size(); ++j) g(j) = r.f64();
            s.genes = std::move(g);
        }
        if (flags & 4u) {
            TokenSequence t;
            const std::size_t len = r.count(5);
            for (std::size_t j = 0; j < len; ++j) t.ids.push_back(r.i32());
            for (std::size_t j = 0; j < len; ++j) t.real.push_back(r.u8() != 0);
            s.text = std::move(t);
        }
        const std::size_t rep = r.count(4);
        for (std::size_t j = 0; j < rep; ++j) s.report.push_back(r.i32());
        c.records.push_back(std::move(s));
    }
    if (!r.done()) throw DataError("cohort payload has unread bytes");
    return c;
}

void save_cohort(const std::filesystem::path& path, const Cohort& cohort) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write cohort: " + path.string());
    const std::string bytes = serialize_cohort(cohort);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("failed writing cohort: " + path.string());
}

Cohort load_cohort(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open cohort: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_cohort(ss.str());
}

ExpressionBinner fit_expression_binner(const Cohort& cohort, std::span<const Index> rows, int bins) {
    std::vector<double> values;
    for (Index i : rows) {
        const auto& r = cohort.records[static_cast<std::size_t>(i)];
        if (r.genes) values.insert(values.end(), r.genes->data(), r.genes->data() + r.genes->size());
    }
    return ExpressionBinner::fit(values, bins);
}

}  // namespace alter
