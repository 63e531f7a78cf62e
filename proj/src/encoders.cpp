#include "alter/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace alter {

void ModelConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (hidden_dim <= 0) fail("hidden_dim must be positive");
    if (heads <= 0 || hidden_dim % heads != 0)
        fail("hidden_dim " + std::to_string(hidden_dim) + " is not divisible by heads " + std::to_string(heads));
    if (n_blocks < 1) fail("n_blocks must be >= 1");
    if (encoder_depth < 0) fail("encoder depth must be >= 0");
    if (ffn_mult < 1) fail("ffn_mult must be >= 1");
    if (patch_dim <= 0) fail("patch_dim must be positive");
    if (region_a < 1 || region_b < 1) fail("region_a and region_b must be >= 1");
    if (n_genes < 1) fail("n_genes must be >= 1");
    if (expression_bins < 2) fail("expression_bins must be >= 2");
    if (vocab_size <= vocab::first_word) fail("vocab_size must exceed the reserved ids");
    if (max_text_len < 1) fail("max_text_len must be >= 1");
}

Index TokenSequence::real_count() const {
    return static_cast<Index>(std::count(real.begin(), real.end(), true));
}

TokenSequence TokenSequence::from_words(std::span<const Index> words, Index length) {
    if (length < 1) throw DataError("token sequence length must be >= 1");
    TokenSequence s;
    s.ids.assign(static_cast<std::size_t>(length), vocab::pad);
    s.real.assign(static_cast<std::size_t>(length), false);
    s.ids[0] = vocab::cls;
    s.real[0] = true;
    const std::size_t n = std::min(words.size(), static_cast<std::size_t>(length - 1));
    for (std::size_t i = 0; i < n; ++i) {
        s.ids[i + 1] = words[i];
        s.real[i + 1] = true;
    }
    return s;
}

TokenGrid reshape_to_grid(Index n_tokens) {
    if (n_tokens < 1) throw DataError("reshape_to_grid: need at least one token");
    Index s = static_cast<Index>(std::sqrt(static_cast<double>(n_tokens)));
    while (s * s < n_tokens) ++s;
    while (s > 1 && (s - 1) * (s - 1) >= n_tokens) --s;
    TokenGrid g;
    g.side = s;
    g.n_real = n_tokens;
    g.cells.assign(static_cast<std::size_t>(s * s), -1);
    for (Index i = 0; i < n_tokens; ++i) g.cells[static_cast<std::size_t>(i)] = i;
    return g;
}

IndexGroups region_groups(const TokenGrid& grid, Index a, Index b) {
    if (a < 1 || b < 1) throw ConfigError("region size must be >= 1");
    if (a > grid.side || b > grid.side)
        throw ConfigError("region " + std::to_string(a) + "x" + std::to_string(b) + " exceeds grid side " +
                          std::to_string(grid.side));
    if (a * b > grid.n_real)
        throw DataError("region area " + std::to_string(a * b) + " exceeds token count " + std::to_string(grid.n_real));
    const Index target = grid.n_real / (a * b);
    IndexGroups groups;
    for (Index r0 = 0; r0 < grid.side; r0 += a) {
        for (Index c0 = 0; c0 < grid.side; c0 += b) {
            std::vector<Index> members;
            for (Index r = r0; r < std::min(r0 + a, grid.side); ++r)
                for (Index c = c0; c < std::min(c0 + b, grid.side); ++c)
                    if (!grid.padded(r, c)) members.push_back(grid.at(r, c));
            if (!members.empty()) groups.push_back(std::move(members));
        }
    }
    // Every region holds at most ab cells, so at least ceil(N/ab) >= target
    // groups are non-empty: cutting never needs zero padding.
    groups.resize(static_cast<std::size_t>(target));
    return groups;
}

Var region_aggregate(const Var& tokens, const TokenGrid& grid, Index a, Index b) {
    if (tokens.rows() != grid.n_real) throw DataError("region_aggregate: token count does not match grid");
    return group_mean_rows(tokens, region_groups(grid, a, b));
}

IndexGroups pathway_groups(const Pathways& pathways, Index n_genes) {
    std::vector<bool> claimed(static_cast<std::size_t>(n_genes), false);
    IndexGroups groups;
    for (std::size_t p = 0; p < pathways.size(); ++p) {
        if (pathways[p].empty()) throw DataError("pathway " + std::to_string(p) + " is empty");
        for (Index g : pathways[p]) {
            if (g < 0 || g >= n_genes)
                throw DataError("pathway " + std::to_string(p) + " references gene " + std::to_string(g) +
                                " outside [0, " + std::to_string(n_genes) + ")");
            if (claimed[static_cast<std::size_t>(g)])
                throw DataError("gene " + std::to_string(g) + " appears in more than one pathway");
            claimed[static_cast<std::size_t>(g)] = true;
        }
        groups.push_back(pathways[p]);
    }
    std::vector<Index> rest;
    for (Index g = 0; g < n_genes; ++g)
        if (!claimed[static_cast<std::size_t>(g)]) rest.push_back(g);
    if (!rest.empty()) groups.push_back(std::move(rest));
    return groups;
}

Var pathway_aggregate(const Var& gene_tokens, const IndexGroups& groups) {
    if (groups.empty()) throw DataError("pathway_aggregate: no pathways");
    return group_mean_rows(gene_tokens, groups);
}

Pathways read_pathways(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open pathway file: " + path.string());
    Pathways out;
    std::string line;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::vector<Index> p;
        std::string tok;
        while (ls >> tok) {
            std::size_t used = 0;
            long long v = 0;
            try {
                v = std::stoll(tok, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != tok.size() || v < 0) throw DataError("bad gene index '" + tok + "' in " + path.string());
            p.push_back(static_cast<Index>(v));
        }
        if (!p.empty()) out.push_back(std::move(p));
    }
    return out;
}

void write_pathways(const std::filesystem::path& path, const Pathways& pathways) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write pathway file: " + path.string());
    for (const auto& p : pathways) {
        for (std::size_t i = 0; i < p.size(); ++i) out << (i ? " " : "") << p[i];
        out << '\n';
    }
}

Pathways contiguous_pathways(Index n_genes, Index block) {
    if (block < 1) throw ConfigError("pathway block size must be >= 1");
    Pathways out;
    for (Index start = 0; start < n_genes; start += block) {
        std::vector<Index> p;
        for (Index g = start; g < std::min(n_genes, start + block); ++g) p.push_back(g);
        out.push_back(std::move(p));
    }
    return out;
}

ExpressionBinner ExpressionBinner::fit(std::span<const double> values, int bins) {
    if (bins < 2) throw ConfigError("expression binning needs at least 2 bins");
    ExpressionBinner b;
    b.bins_ = bins;
    std::vector<double> pos;
    for (double v : values) {
        if (!(v >= 0.0) || !std::isfinite(v)) throw DataError("expression values must be finite and nonnegative");
        if (v > 0.0) pos.push_back(v);
    }
    const bool identical =
        values.empty() || std::all_of(values.begin(), values.end(), [&](double v) { return v == values.front(); });
    b.degenerate_ = identical || pos.empty();
    if (b.degenerate_) return b;
    std::sort(pos.begin(), pos.end());
    const double n = static_cast<double>(pos.size());
    for (int k = 1; k <= bins - 2; ++k) {
        const double at = (n - 1.0) * static_cast<double>(k) / static_cast<double>(bins - 1);
        const auto lo = static_cast<std::size_t>(std::floor(at));
        const auto hi = std::min(lo + 1, pos.size() - 1);
        const double frac = at - static_cast<double>(lo);
        b.edges_.push_back(pos[lo] + frac * (pos[hi] - pos[lo]));
    }
    return b;
}

ExpressionBinner ExpressionBinner::from_edges(std::vector<double> edges, int bins, bool degenerate) {
    ExpressionBinner b;
    b.bins_ = bins;
    b.degenerate_ = degenerate;
    if (!degenerate && static_cast<int>(edges.size()) != bins - 2) throw DataError("expression edge count mismatch");
    b.edges_ = std::move(edges);
    return b;
}

Index ExpressionBinner::operator()(double v) const {
    if (degenerate_ || v <= 0.0) return 0;
    Index bin = 1;
    for (double e : edges_)
        if (v >= e) ++bin;
    return bin;
}

std::vector<Index> ExpressionBinner::operator()(std::span<const double> values) const {
    std::vector<Index> out;
    out.reserve(values.size());
    for (double v : values) out.push_back((*this)(v));
    return out;
}

std::vector<Index> discretize_expression(std::span<const double> values, int bins) {
    return ExpressionBinner::fit(values, bins)(values);
}

namespace {

std::vector<TransformerLayer> make_layers(ParamStore& store, const std::string& prefix, const ModelConfig& cfg) {
    std::vector<TransformerLayer> layers;
    for (int i = 0; i < cfg.encoder_depth; ++i)
        layers.push_back(
            TransformerLayer::create(store, prefix + ".layer" + std::to_string(i), cfg.hidden_dim, cfg.heads, cfg.ffn_mult));
    return layers;
}

Var run_layers(Tape& tape, const std::vector<TransformerLayer>& layers, Var x, const AttentionMask& mask = {}) {
    for (const auto& l : layers) x = l(tape, x, mask);
    return x;
}

}  // namespace

SlideEncoder SlideEncoder::create(ParamStore& store, const ModelConfig& cfg) {
    cfg.validate();
    SlideEncoder e;
    e.project_ = Linear::create(store, "slide.project", cfg.patch_dim, cfg.hidden_dim);
    e.cls_ = &store.add("slide.cls", 1, cfg.hidden_dim, Init::uniform_fan_in, static_cast<double>(cfg.hidden_dim));
    e.mask_ = &store.add("slide.mask", 1, cfg.patch_dim, Init::uniform_fan_in, static_cast<double>(cfg.patch_dim));
    e.layers_ = make_layers(store, "slide", cfg);
    e.final_norm_ = LayerNorm::create(store, "slide.final_norm", cfg.hidden_dim);
    e.region_a_ = cfg.region_a;
    e.region_b_ = cfg.region_b;
    return e;
}

Encoded SlideEncoder::encode(Tape& tape, const FeatureBag& bag, std::span<const Index> masked_patches) const {
    if (bag.size() < 1) throw DataError("encode_slide: empty feature bag");
    if (bag.features.cols() != project_.in_features())
        throw DataError("encode_slide: patch width " + std::to_string(bag.features.cols()) + " != configured " +
                        std::to_string(project_.in_features()));
    Var x = tape.constant(bag.features);
    if (!masked_patches.empty()) x = overwrite_rows(x, masked_patches, tape.param(*mask_));
    Var h = concat_rows({tape.param(*cls_), project_(tape, x)});
    h = final_norm_(tape, run_layers(tape, layers_, h));
    return {slice_rows(h, 0, 1), slice_rows(h, 1, bag.size())};
}

Encoded SlideEncoder::encode_aggregated(Tape& tape, const FeatureBag& bag, std::span<const Index> masked_patches) const {
    Encoded e = encode(tape, bag, masked_patches);
    const TokenGrid grid = reshape_to_grid(bag.size());
    return {e.cls, region_aggregate(e.tokens, grid, region_a_, region_b_)};
}

GeneEncoder GeneEncoder::create(ParamStore& store, const ModelConfig& cfg) {
    cfg.validate();
    GeneEncoder e;
    const auto d = static_cast<double>(cfg.hidden_dim);
    e.identity_ = &store.add("genes.identity", cfg.n_genes, cfg.hidden_dim, Init::uniform_fan_in, d);
    e.bin_table_ = &store.add("genes.bins", cfg.expression_bins, cfg.hidden_dim, Init::uniform_fan_in, d);
    e.mask_ = &store.add("genes.mask", 1, cfg.hidden_dim, Init::uniform_fan_in, d);
    e.cls_ = &store.add("genes.cls", 1, cfg.hidden_dim, Init::uniform_fan_in, d);
    e.layers_ = make_layers(store, "genes", cfg);
    e.final_norm_ = LayerNorm::create(store, "genes.final_norm", cfg.hidden_dim);
    return e;
}

Var GeneEncoder::input_embeddings(Tape& tape, std::span<const Index> bins, std::span<const Index> masked_genes) const {
    if (static_cast<Index>(bins.size()) != n_genes())
        throw DataError("encode_genes: got " + std::to_string(bins.size()) + " genes, configured " +
                        std::to_string(n_genes()));
    for (Index b : bins)
        if (b < 0 || b >= bin_table_->rows()) throw DataError("encode_genes: bin id out of range");
    Var bin_emb = gather_rows(tape.param(*bin_table_), bins);
    if (!masked_genes.empty()) bin_emb = overwrite_rows(bin_emb, masked_genes, tape.param(*mask_));
    return add(tape.param(*identity_), bin_emb);
}

Encoded GeneEncoder::encode(Tape& tape, std::span<const Index> bins, std::span<const Index> masked_genes) const {
    if (bins.empty()) throw DataError("encode_genes: empty profile");
    Var x = concat_rows({tape.param(*cls_), input_embeddings(tape, bins, masked_genes)});
    x = final_norm_(tape, run_layers(tape, layers_, x));
    return {slice_rows(x, 0, 1), slice_rows(x, 1, static_cast<Index>(bins.size()))};
}

Encoded GeneEncoder::encode_aggregated(Tape& tape, std::span<const Index> bins, const IndexGroups& pathways,
                                       std::span<const Index> masked_genes) const {
    Encoded e = encode(tape, bins, masked_genes);
    return {e.cls, pathway_aggregate(e.tokens, pathways)};
}

TextEncoder TextEncoder::create(ParamStore& store, const ModelConfig& cfg) {
    cfg.validate();
    TextEncoder e;
    const auto d = static_cast<double>(cfg.hidden_dim);
    e.tokens_ = &store.add("text.tokens", cfg.vocab_size, cfg.hidden_dim, Init::uniform_fan_in, d);
    e.positions_ = &store.add("text.positions", cfg.max_text_len, cfg.hidden_dim, Init::uniform_fan_in, d);
    e.layers_ = make_layers(store, "text", cfg);
    e.final_norm_ = LayerNorm::create(store, "text.final_norm", cfg.hidden_dim);
    return e;
}

AttentionMask padding_mask(const TokenSequence& seq) {
    AttentionMask m;
    m.key_visible = seq.real;
    return m;
}

Encoded TextEncoder::encode(Tape& tape, const TokenSequence& seq) const {
    const Index n = seq.size();
    if (n < 1 || static_cast<Index>(seq.real.size()) != n) throw DataError("encode_text: malformed token sequence");
    if (n > max_length())
        throw DataError("encode_text: sequence length " + std::to_string(n) + " exceeds " + std::to_string(max_length()));
    if (seq.ids[0] != vocab::cls || !seq.real[0]) throw DataError("encode_text: position 0 must hold the CLS token");
    for (Index id : seq.ids)
        if (id < 0 || id >= tokens_->rows()) throw DataError("encode_text: token id out of vocabulary");
    Var x = add(gather_rows(tape.param(*tokens_), seq.ids), slice_rows(tape.param(*positions_), 0, n));
    x = final_norm_(tape, run_layers(tape, layers_, x, padding_mask(seq)));
    return {slice_rows(x, 0, 1), x};
}

}  // namespace alter
