#include "alter/cli.hpp"

#include "alter/finetune.hpp"
#include "alter/numerics/checkpoint.hpp"
#include "alter/pretrain.hpp"
#include "alter/verify.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

namespace alter {

namespace fs = std::filesystem;

const std::vector<KeySpec>& gen_keys() {
    static const std::vector<KeySpec> k{
        {"n", "512", "number of samples"},
        {"classes", "4", "cancer classes"},
        {"latent_dim", "4", "planted latent width"},
        {"n_patches", "16", "patches per slide"},
        {"patch_dim", "32", "patch feature width"},
        {"n_genes", "24", "genes per profile"},
        {"pathway_block", "6", "genes per contiguous pathway"},
        {"text_len", "16", "token sequence length incl. CLS"},
        {"vocab_size", "64", "report vocabulary size"},
        {"missing_h", "0", "marginal missing rate, slides"},
        {"missing_g", "0", "marginal missing rate, genes"},
        {"missing_t", "0", "marginal missing rate, text"},
        {"noise", "0.1", "observation noise"},
        {"censor_rate", "0.3", "censoring probability"},
        {"risk_strength", "12", "log-hazard slope on the latent"},
        {"report_slots", "4", "latent slot tokens per report"},
        {"slot_levels", "6", "quantization levels per slot"},
        {"latent_templates", "true", "key report templates on class and latent sign"},
        {"seed", "0", "generator seed"},
    };
    return k;
}

const std::vector<KeySpec>& pretrain_keys() {
    static const std::vector<KeySpec> k{
        {"hidden_dim", "32", "model width d"},
        {"heads", "4", "attention heads"},
        {"n_blocks", "2", "fusion blocks"},
        {"encoder_depth", "1", "transformer layers per encoder"},
        {"ffn_mult", "2", "feed-forward expansion"},
        {"region_a", "2", "slide region rows"},
        {"region_b", "2", "slide region columns"},
        {"expression_bins", "7", "expression bins"},
        {"modality_embeddings", "true", "add per-modality type embeddings before fusion"},
        {"mask_ratio", "0.15", "masked fraction"},
        {"tau_init", "0.07", "initial contrastive temperature"},
        {"margin", "1", "triplet margin"},
        {"alpha", "1", "MLM weight"},
        {"beta", "1", "CLIP weight"},
        {"lr", "0.001", "Adam learning rate"},
        {"batch_size", "16", "samples per batch"},
        {"epochs", "10", "epochs"},
        {"seed", "0", "training seed (also the split seed)"},
        {"mlm_switch_period", "10", "epochs between MLM modality draws"},
        {"max_triplets", "64", "triplets kept per batch"},
    };
    return k;
}

const std::vector<KeySpec>& finetune_keys() {
    static const std::vector<KeySpec> k{
        {"epochs", "20", "epochs"},
        {"lr", "0.001", "Adam learning rate"},
        {"batch_size", "16", "samples per batch"},
        {"seed", "0", "head initialization and shuffling seed"},
        {"time_bins", "4", "discrete survival intervals"},
        {"decoder_depth", "1", "report decoder layers"},
    };
    return k;
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

bool in_schema(const std::vector<KeySpec>& schema, const std::string& key) {
    for (const auto& k : schema)
        if (k.name == key) return true;
    return false;
}

}  // namespace

Settings parse_settings(const std::string& text, const std::vector<KeySpec>& schema, const std::string& origin) {
    Settings out;
    std::istringstream in(text);
    std::string line;
    int no = 0;
    while (std::getline(in, line)) {
        ++no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(no) + ": expected key=value, got '" + line + "'");
        const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        if (!in_schema(schema, key)) throw ConfigError(origin + ":" + std::to_string(no) + ": unknown key '" + key + "'");
        out[key] = value;
    }
    return out;
}

namespace {

// ---- typed settings -------------------------------------------------------

std::string fmt(double v) {
    std::ostringstream o;
    o.precision(17);
    o << v;
    return o.str();
}

long long as_int(const Settings& s, const std::string& key) {
    const std::string& v = s.at(key);
    long long out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected an integer, got '" + v + "'");
    return out;
}

double as_double(const Settings& s, const std::string& key) {
    const std::string& v = s.at(key);
    try {
        std::size_t used = 0;
        const double out = std::stod(v, &used);
        if (used == v.size()) return out;
    } catch (const std::exception&) {
    }
    throw ConfigError(key + ": expected a number, got '" + v + "'");
}

bool as_bool(const Settings& s, const std::string& key) {
    const std::string& v = s.at(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::uint64_t as_seed(const Settings& s, const std::string& key) {
    const long long v = as_int(s, key);
    if (v < 0) throw ConfigError(key + " must be >= 0");
    return static_cast<std::uint64_t>(v);
}

CohortSpec cohort_spec_from(const Settings& s) {
    CohortSpec c;
    c.n = as_int(s, "n");
    if (c.n < 1) throw ConfigError("n must be >= 1");
    c.classes = static_cast<int>(as_int(s, "classes"));
    c.latent_dim = as_int(s, "latent_dim");
    c.n_patches = as_int(s, "n_patches");
    c.patch_dim = as_int(s, "patch_dim");
    c.n_genes = as_int(s, "n_genes");
    c.pathway_block = as_int(s, "pathway_block");
    c.text_len = as_int(s, "text_len");
    c.vocab_size = as_int(s, "vocab_size");
    c.missing = {as_double(s, "missing_h"), as_double(s, "missing_g"), as_double(s, "missing_t")};
    c.noise = as_double(s, "noise");
    c.censor_rate = as_double(s, "censor_rate");
    c.risk_strength = as_double(s, "risk_strength");
    c.report_slots = as_int(s, "report_slots");
    c.slot_levels = as_int(s, "slot_levels");
    c.latent_templates = as_bool(s, "latent_templates");
    c.seed = as_seed(s, "seed");
    c.validate();
    return c;
}

PretrainConfig pretrain_config_from(const Settings& s, const CohortSpec& cohort) {
    ModelConfig m;
    m.hidden_dim = as_int(s, "hidden_dim");
    m.heads = static_cast<int>(as_int(s, "heads"));
    m.n_blocks = static_cast<int>(as_int(s, "n_blocks"));
    m.encoder_depth = static_cast<int>(as_int(s, "encoder_depth"));
    m.ffn_mult = as_int(s, "ffn_mult");
    m.region_a = as_int(s, "region_a");
    m.region_b = as_int(s, "region_b");
    m.expression_bins = static_cast<int>(as_int(s, "expression_bins"));
    m.modality_embeddings = as_bool(s, "modality_embeddings");
    PretrainConfig c;
    c.model = model_config_for(cohort, m);
    c.mask_ratio = as_double(s, "mask_ratio");
    c.tau_init = as_double(s, "tau_init");
    c.margin = as_double(s, "margin");
    c.weights = {as_double(s, "alpha"), as_double(s, "beta")};
    c.lr = as_double(s, "lr");
    c.batch_size = as_int(s, "batch_size");
    c.epochs = static_cast<int>(as_int(s, "epochs"));
    c.seed = as_seed(s, "seed");
    c.mlm_switch_period = static_cast<int>(as_int(s, "mlm_switch_period"));
    const long long cap = as_int(s, "max_triplets");
    if (cap < 0) throw ConfigError("max_triplets must be >= 0");
    c.max_triplets = static_cast<std::size_t>(cap);
    c.validate();
    return c;
}

// ---- files ----------------------------------------------------------------

fs::path resolve_out(const std::string& out) {
    fs::path p(out);
    if (p.is_relative()) {
        if (const char* root = std::getenv(kOutputRootEnv); root != nullptr && *root != '\0') p = fs::path(root) / p;
    }
    fs::create_directories(p);
    return p;
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path.string());
    f << text;
    if (!f) throw DataError("write failed: " + path.string());
}

std::string read_file(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot read " + path.string());
    std::ostringstream o;
    o << f.rdbuf();
    return o.str();
}

std::string settings_text(const Settings& s, const std::vector<KeySpec>& schema) {
    std::string out;
    for (const auto& k : schema) out += k.name + "=" + s.at(k.name) + "\n";
    return out;
}

std::string join(const std::vector<Index>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out;
}

std::string join(const std::vector<double>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt(v[i]);
    return out;
}

template <class T>
std::vector<T> split_list(const std::string& s) {
    std::vector<T> out;
    std::istringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) {
        if (item.empty()) continue;
        if constexpr (std::is_same_v<T, double>)
            out.push_back(std::stod(item));
        else
            out.push_back(static_cast<T>(std::stoll(item)));
    }
    return out;
}

const std::string& meta(const Checkpoint& c, const std::string& key) {
    const auto it = c.meta.find(key);
    if (it == c.meta.end()) throw DataError("checkpoint lacks '" + key + "'");
    return it->second;
}

// Cohort dimensions a checkpoint was built for.
constexpr std::array<const char*, 5> kCohortDims{"patch_dim", "n_genes", "vocab_size", "text_len", "classes"};

Index cohort_dim(const CohortSpec& c, const std::string& name) {
    if (name == "patch_dim") return c.patch_dim;
    if (name == "n_genes") return c.n_genes;
    if (name == "vocab_size") return c.vocab_size;
    if (name == "text_len") return c.text_len;
    return c.classes;
}

void put_cohort_dims(Checkpoint& c, const CohortSpec& spec) {
    for (const char* d : kCohortDims) c.meta[std::string("cohort.") + d] = std::to_string(cohort_dim(spec, d));
}

void check_cohort_dims(const Checkpoint& c, const CohortSpec& spec) {
    for (const char* d : kCohortDims) {
        const Index want = std::stoll(meta(c, std::string("cohort.") + d));
        if (want != cohort_dim(spec, d))
            throw DataError(std::string("dimension mismatch: checkpoint was built for ") + d + "=" + std::to_string(want) +
                            " but the cohort has " + d + "=" + std::to_string(cohort_dim(spec, d)));
    }
}

void put_settings(Checkpoint& c, const std::string& prefix, const Settings& s) {
    for (const auto& [k, v] : s) c.meta[prefix + k] = v;
}

Settings get_settings(const Checkpoint& c, const std::string& prefix, const std::vector<KeySpec>& schema) {
    Settings s;
    for (const auto& k : schema) s[k.name] = meta(c, prefix + k.name);
    return s;
}

void put_split(Checkpoint& c, const Split& sp) {
    c.meta["split.train"] = join(sp.train);
    c.meta["split.val"] = join(sp.val);
    c.meta["split.test"] = join(sp.test);
}

Split get_split(const Checkpoint& c) {
    return {split_list<Index>(meta(c, "split.train")), split_list<Index>(meta(c, "split.val")),
            split_list<Index>(meta(c, "split.test"))};
}

void put_binner(Checkpoint& c, const ExpressionBinner& b) {
    c.meta["binner.bins"] = std::to_string(b.bins());
    c.meta["binner.edges"] = join(b.edges());
    c.meta["binner.degenerate"] = b.degenerate() ? "1" : "0";
}

ExpressionBinner get_binner(const Checkpoint& c) {
    return ExpressionBinner::from_edges(split_list<double>(meta(c, "binner.edges")),
                                        static_cast<int>(std::stoll(meta(c, "binner.bins"))),
                                        meta(c, "binner.degenerate") == "1");
}

// Loss history as a tensor so resumed runs keep it bit-exact.
constexpr Index kHistoryCols = 9;

Matrix history_tensor(const std::vector<LossRecord>& h) {
    Matrix m(static_cast<Index>(h.size()), kHistoryCols);
    for (std::size_t i = 0; i < h.size(); ++i) {
        const auto& r = h[i];
        m.row(static_cast<Index>(i)) << r.epoch, r.batch, index_of(r.mlm_modality), static_cast<double>(r.rows),
            r.skipped ? 1.0 : 0.0, r.mlm, r.clip, r.triplet, r.total;
    }
    return m;
}

std::vector<LossRecord> history_from(const Matrix& m) {
    if (m.cols() != kHistoryCols) throw DataError("checkpoint loss history has the wrong width");
    std::vector<LossRecord> h;
    for (Index i = 0; i < m.rows(); ++i) {
        LossRecord r;
        r.epoch = static_cast<int>(m(i, 0));
        r.batch = static_cast<int>(m(i, 1));
        r.mlm_modality = static_cast<Modality>(static_cast<int>(m(i, 2)));
        r.rows = static_cast<Index>(m(i, 3));
        r.skipped = m(i, 4) != 0.0;
        r.mlm = m(i, 5);
        r.clip = m(i, 6);
        r.triplet = m(i, 7);
        r.total = m(i, 8);
        h.push_back(r);
    }
    return h;
}

std::string loss_log(const std::vector<LossRecord>& h, const LossWeights& w) {
    std::string out = "epoch\tbatch\tmlm_modality\trows\tskipped\tmlm\tweighted_mlm\tclip\tweighted_clip\ttriplet\ttotal\n";
    for (const auto& r : h) {
        out += std::to_string(r.epoch) + "\t" + std::to_string(r.batch) + "\t" + std::string(short_name(r.mlm_modality)) +
               "\t" + std::to_string(r.rows) + "\t" + (r.skipped ? "1" : "0") + "\t" + fmt(r.mlm) + "\t" +
               fmt(w.alpha * r.mlm) + "\t" + fmt(r.clip) + "\t" + fmt(w.beta * r.clip) + "\t" + fmt(r.triplet) + "\t" +
               fmt(r.total) + "\n";
    }
    return out;
}

std::string digest_hex(std::uint64_t d) {
    std::ostringstream o;
    o << std::hex << std::setw(16) << std::setfill('0') << d;
    return o.str();
}

std::vector<const Parameter*> backbone_const(ParamStore& store) {
    std::vector<const Parameter*> out;
    for (Parameter* p : backbone_parameters(store)) out.push_back(p);
    return out;
}

// ---- option plumbing ------------------------------------------------------

std::string dashed(std::string s) {
    for (auto& c : s)
        if (c == '_') c = '-';
    return s;
}

struct KeyOptions {
    const std::vector<KeySpec>* schema = nullptr;
    std::string config_path;
    Settings flags;

    void attach(CLI::App* app, const std::vector<KeySpec>& keys) {
        schema = &keys;
        app->add_option("--config", config_path, "key=value configuration file");
        for (const auto& k : keys)
            app->add_option_function<std::string>(
                "--" + dashed(k.name), [this, name = k.name](const std::string& v) { flags[name] = v; },
                k.help + " (default " + k.fallback + ")")
                ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    }

    /// defaults, then `base`, then the config file, then flags.
    Settings resolve(const Settings& base = {}) const {
        Settings s;
        for (const auto& k : *schema) s[k.name] = k.fallback;
        for (const auto& [k, v] : base) s[k] = v;
        if (!config_path.empty())
            for (const auto& [k, v] : parse_settings(read_file(config_path), *schema, config_path)) s[k] = v;
        for (const auto& [k, v] : flags) s[k] = v;
        return s;
    }
};

// ---- subcommands ----------------------------------------------------------

int cmd_gen(const KeyOptions& keys, const std::string& out_dir, std::ostream& out) {
    const Settings s = keys.resolve();
    const CohortSpec spec = cohort_spec_from(s);
    const fs::path dir = resolve_out(out_dir);
    const Cohort cohort = generate_cohort(spec);
    save_cohort(dir / "cohort.alc", cohort);
    write_file(dir / "manifest.json", cohort_manifest(spec));
    out << "wrote " << cohort.size() << " samples to " << (dir / "cohort.alc").string() << "\n";
    return kExitOk;
}

struct PretrainArgs {
    std::string cohort, out, resume;
    long max_steps = -1;
};

int cmd_pretrain(const KeyOptions& keys, const PretrainArgs& a, std::ostream& out) {
    std::optional<Checkpoint> resume;
    Settings base;
    if (!a.resume.empty()) {
        resume = load_checkpoint(a.resume);
        if (meta(*resume, "kind") != "pretrain") throw DataError(a.resume + " is not a pretraining checkpoint");
        base = get_settings(*resume, "config.", pretrain_keys());
    }
    const Settings s = keys.resolve(base);
    const Cohort cohort = load_cohort(a.cohort);
    if (resume) check_cohort_dims(*resume, cohort.spec);
    const PretrainConfig cfg = pretrain_config_from(s, cohort.spec);

    const Split split = resume ? get_split(*resume) : split_cohort(cohort, {0.7, 0.2, 0.1}, cfg.seed);
    const ExpressionBinner binner =
        resume ? get_binner(*resume) : fit_expression_binner(cohort, split.train, cfg.model.expression_bins);
    const Dataset ds = prepare_dataset(cohort, split.train, binner);

    ParamStore store(cfg.seed);
    const AlterModel model = AlterModel::create(store, cfg.model, cfg.tau_init);
    TrainProgress progress;
    if (resume) {
        restore(store, *resume);
        restore_adam_state(*resume, progress.adam);
        progress.epoch = static_cast<int>(std::stoll(meta(*resume, "progress.epoch")));
        progress.batch = static_cast<int>(std::stoll(meta(*resume, "progress.batch")));
        if (const Matrix* h = resume->find("progress.history")) progress.history = history_from(*h);
    }
    const long steps = pretrain_loop(model, store, ds, cfg, progress, a.max_steps);

    const fs::path dir = resolve_out(a.out);
    Checkpoint ck = snapshot(store);
    append_adam_state(ck, progress.adam);
    ck.tensors.emplace_back("progress.history", history_tensor(progress.history));
    ck.meta["kind"] = "pretrain";
    put_settings(ck, "config.", s);
    put_cohort_dims(ck, cohort.spec);
    put_split(ck, split);
    put_binner(ck, binner);
    ck.meta["progress.epoch"] = std::to_string(progress.epoch);
    ck.meta["progress.batch"] = std::to_string(progress.batch);
    save_checkpoint(dir / "checkpoint.ckpt", ck);

    write_file(dir / "loss_log.tsv", loss_log(progress.history, cfg.weights));
    std::string schedule = "epoch\tmlm_modality\n";
    const auto available = ds.modalities();
    for (int e = 0; e < cfg.epochs; ++e)
        schedule += std::to_string(e) + "\t" + std::string(short_name(mlm_modality_for(e, cfg, available))) + "\n";
    write_file(dir / "mlm_schedule.tsv", schedule);
    write_file(dir / "run_config.txt", settings_text(s, pretrain_keys()));

    out << "pretrain: " << steps << " steps this run, epoch " << progress.epoch << " batch " << progress.batch << " of "
        << cfg.epochs << " epochs\n";
    if (!progress.history.empty()) out << "last batch total loss " << fmt(progress.history.back().total) << "\n";
    return kExitOk;
}

struct FinetuneArgs {
    std::string task, checkpoint, cohort, out;
    bool freeze = false;
};

// Model + heads in a fresh store, matching the checkpoint's configuration.
struct Rebuilt {
    std::unique_ptr<ParamStore> store;
    AlterModel model;
    TaskHeads heads;
};

Rebuilt rebuild(const Settings& pre, const Settings& ft, const CohortSpec& spec, Task task) {
    const PretrainConfig pc = pretrain_config_from(pre, spec);
    Rebuilt r;
    r.store = std::make_unique<ParamStore>(as_seed(ft, "seed"));
    r.model = AlterModel::create(*r.store, pc.model, pc.tau_init);
    r.heads = TaskHeads::create(*r.store, pc.model, task, spec.classes, spec.text_len,
                                static_cast<int>(as_int(ft, "decoder_depth")), static_cast<int>(as_int(ft, "time_bins")));
    return r;
}

int cmd_finetune(const KeyOptions& keys, const FinetuneArgs& a, std::ostream& out) {
    const Task task = parse_task(a.task);
    const Checkpoint pre = load_checkpoint(a.checkpoint);
    if (meta(pre, "kind") != "pretrain") throw DataError(a.checkpoint + " is not a pretraining checkpoint");
    const Settings pre_settings = get_settings(pre, "config.", pretrain_keys());
    const Settings s = keys.resolve();
    const Cohort cohort = load_cohort(a.cohort);
    check_cohort_dims(pre, cohort.spec);

    Rebuilt r = rebuild(pre_settings, s, cohort.spec, task);
    for (Parameter* p : backbone_parameters(*r.store))
        if (pre.find(p->name) == nullptr) throw DataError("pretraining checkpoint lacks " + p->name);
    restore(*r.store, pre, /*allow_missing=*/true);

    FinetuneConfig fc;
    fc.task = task;
    fc.epochs = static_cast<int>(as_int(s, "epochs"));
    fc.lr = as_double(s, "lr");
    fc.batch_size = as_int(s, "batch_size");
    fc.seed = as_seed(s, "seed");
    fc.time_bins = static_cast<int>(as_int(s, "time_bins"));
    fc.decoder_depth = static_cast<int>(as_int(s, "decoder_depth"));
    fc.freeze_fusion = a.freeze;

    const Split split = get_split(pre);
    const ExpressionBinner binner = get_binner(pre);
    const Dataset train = prepare_dataset(cohort, split.train, binner);
    const Dataset val = prepare_dataset(cohort, split.val, binner);

    const std::uint64_t before = parameter_digest(backbone_const(*r.store));
    std::vector<FinetuneRecord> history;
    const TimeBins bins = finetune_loop(r.model, r.heads, *r.store, train, fc, &history);
    const std::uint64_t after = parameter_digest(backbone_const(*r.store));
    if (a.freeze && before != after) throw NumericError("--freeze-fusion: backbone parameters changed");

    MetricReport rep = evaluate_task(r.model, r.heads, val);
    rep.set_text("split", "val");
    rep.set_text("freeze_fusion", a.freeze ? "true" : "false");
    rep.set_text("backbone_digest_before", digest_hex(before));
    rep.set_text("backbone_digest_after", digest_hex(after));

    const fs::path dir = resolve_out(a.out);
    Checkpoint ck = snapshot(*r.store);
    ck.meta["kind"] = "finetune";
    ck.meta["task"] = task_name(task);
    ck.meta["freeze_fusion"] = a.freeze ? "true" : "false";
    put_settings(ck, "config.", pre_settings);
    put_settings(ck, "finetune.", s);
    put_cohort_dims(ck, cohort.spec);
    put_split(ck, split);
    put_binner(ck, binner);
    ck.meta["time_bins.edges"] = join(bins.edges);
    save_checkpoint(dir / "task.ckpt", ck);
    rep.save(dir / "metrics_val");

    std::string log = "epoch\tbatch\tskipped\tloss\n";
    for (const auto& h : history)
        log += std::to_string(h.epoch) + "\t" + std::to_string(h.batch) + "\t" + (h.skipped ? "1" : "0") + "\t" +
               fmt(h.loss) + "\n";
    write_file(dir / "finetune_log.tsv", log);
    write_file(dir / "run_config.txt", settings_text(s, finetune_keys()));
    out << rep.to_text();
    return kExitOk;
}

struct EvalArgs {
    std::string checkpoint, cohort, split = "test", out;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
    const Checkpoint ck = load_checkpoint(a.checkpoint);
    if (meta(ck, "kind") != "finetune") throw DataError(a.checkpoint + " is not a fine-tuned task checkpoint");
    const Cohort cohort = load_cohort(a.cohort);
    check_cohort_dims(ck, cohort.spec);
    const Split split = get_split(ck);

    const std::vector<Index>* rows = nullptr;
    if (a.split == "train") rows = &split.train;
    else if (a.split == "val") rows = &split.val;
    else if (a.split == "test") rows = &split.test;
    else throw ConfigError("--split must be train, val or test");
    for (Index r : *rows)
        if (r < 0 || r >= cohort.size()) throw DataError("stored split references row " + std::to_string(r) + " outside the cohort");
    if (a.split != "train") {
        const std::set<Index> train(split.train.begin(), split.train.end());
        for (Index r : *rows)
            if (train.count(r)) throw DataError(a.split + " split overlaps training row " + std::to_string(r));
    }

    const Task task = parse_task(meta(ck, "task"));
    Rebuilt r = rebuild(get_settings(ck, "config.", pretrain_keys()), get_settings(ck, "finetune.", finetune_keys()),
                        cohort.spec, task);
    restore(*r.store, ck);
    const Dataset ds = prepare_dataset(cohort, *rows, get_binner(ck));
    MetricReport rep = evaluate_task(r.model, r.heads, ds);
    rep.set_text("split", a.split);
    const fs::path dir = resolve_out(a.out);
    rep.save(dir / ("metrics_" + a.split));
    out << rep.to_text();
    return kExitOk;
}

struct GradcheckArgs {
    std::uint64_t seed = 0;
    std::string out;
    bool inject_fault = false;
};

int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
    GradcheckOptions o;
    o.seed = a.seed;
    o.inject_fault = a.inject_fault;
    const GradcheckReport rep = run_gradcheck(o);
    const std::string text = rep.to_text();
    out << text;
    if (!a.out.empty()) write_file(resolve_out(a.out) / "gradcheck.txt", text);
    return rep.passed() ? kExitOk : kExitVerify;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Multimodal pretraining and fine-tuning on synthetic cohorts"};
    app.name(args.empty() ? "alter" : args.front());
    app.require_subcommand(1);

    std::function<int()> run;

    KeyOptions gen_opts;
    std::string gen_out;
    auto* gen = app.add_subcommand("gen", "generate a synthetic cohort");
    gen_opts.attach(gen, gen_keys());
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->callback([&] { run = [&] { return cmd_gen(gen_opts, gen_out, out); }; });

    KeyOptions pre_opts;
    PretrainArgs pre_args;
    auto* pre = app.add_subcommand("pretrain", "pretrain the encoders and fusion stack");
    pre_opts.attach(pre, pretrain_keys());
    pre->add_option("--cohort", pre_args.cohort, "cohort file")->required();
    pre->add_option("--out", pre_args.out, "output directory")->required();
    pre->add_option("--resume", pre_args.resume, "continue from a pretraining checkpoint");
    pre->add_option("--max-steps", pre_args.max_steps, "stop after this many batches");
    pre->callback([&] { run = [&] { return cmd_pretrain(pre_opts, pre_args, out); }; });

    KeyOptions ft_opts;
    FinetuneArgs ft_args;
    auto* ft = app.add_subcommand("finetune", "train a task head on a pretrained checkpoint");
    ft_opts.attach(ft, finetune_keys());
    ft->add_option("--task", ft_args.task, "survival-nll | survival-cox | subtype | mutation | report")->required();
    ft->add_option("--checkpoint", ft_args.checkpoint, "pretraining checkpoint")->required();
    ft->add_option("--cohort", ft_args.cohort, "cohort file")->required();
    ft->add_option("--out", ft_args.out, "output directory")->required();
    ft->add_flag("--freeze-fusion", ft_args.freeze, "keep encoder and fusion parameters fixed");
    ft->callback([&] { run = [&] { return cmd_finetune(ft_opts, ft_args, out); }; });

    EvalArgs ev_args;
    auto* ev = app.add_subcommand("eval", "evaluate a task checkpoint on a split");
    ev->add_option("--checkpoint", ev_args.checkpoint, "task checkpoint")->required();
    ev->add_option("--cohort", ev_args.cohort, "cohort file")->required();
    ev->add_option("--split", ev_args.split, "train | val | test")->capture_default_str();
    ev->add_option("--out", ev_args.out, "output directory")->required();
    ev->callback([&] { run = [&] { return cmd_eval(ev_args, out); }; });

    GradcheckArgs gc_args;
    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every component");
    gc->add_option("--seed", gc_args.seed, "seed")->capture_default_str();
    gc->add_option("--out", gc_args.out, "also write gradcheck.txt here");
    gc->add_flag("--inject-fault", gc_args.inject_fault)->group("");
    gc->callback([&] { run = [&] { return cmd_gradcheck(gc_args, out); }; });

    std::vector<std::string> rest(args.size() > 1 ? args.begin() + 1 : args.end(), args.end());
    std::reverse(rest.begin(), rest.end());  // CLI11 consumes a reversed vector
    try {
        app.parse(rest);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }
    try {
        return run ? run() : kExitUsage;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const NumericError& e) {
        err << "verification failure: " << e.what() << "\n";
        return kExitVerify;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "data error: " << e.what() << "\n";
        return kExitData;
    }
}

int run_cli(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    return run_cli(args, std::cout, std::cerr);
}

}  // namespace alter
