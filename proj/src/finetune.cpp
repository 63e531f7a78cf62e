#include "alter/finetune.hpp"

#include "alter/log.hpp"
#include "alter/numerics/checkpoint.hpp"
#include "alter/numerics/rng.hpp"

#include <algorithm>
#include <numeric>

namespace alter {

namespace {

constexpr std::array<std::pair<Task, const char*>, 5> kTaskNames{{{Task::survival_nll, "survival-nll"},
                                                                   {Task::survival_cox, "survival-cox"},
                                                                   {Task::subtype, "subtype"},
                                                                   {Task::mutation, "mutation"},
                                                                   {Task::report, "report"}}};

bool is_survival(Task t) { return t == Task::survival_nll || t == Task::survival_cox; }
bool is_classification(Task t) { return t == Task::subtype || t == Task::mutation; }

const SampleRecord& record_of(const Dataset& ds, const PreparedSample& s) {
    return ds.cohort->records.at(static_cast<std::size_t>(s.row));
}

int class_label(const Dataset& ds, const PreparedSample& s, Task t) {
    const SampleRecord& r = record_of(ds, s);
    return t == Task::mutation ? r.mutation : r.cancer_class;
}

bool readable(const PreparedSample& s, unsigned mods) {
    for (Modality m : kModalities)
        if (s.has(m) && (mods & (1u << index_of(m)))) return true;
    return false;
}

Var patient_embedding(Tape& tape, const AlterModel& model, const TaskHeads& heads, const Dataset& ds,
                      const PreparedSample& s) {
    SampleForward f = model.forward(tape, s, ds.pathways, nullptr, task_modalities(heads.task));
    return heads.pool(tape, f.fused);
}

}  // namespace

Task parse_task(const std::string& name) {
    for (const auto& [t, n] : kTaskNames)
        if (name == n) return t;
    throw ConfigError("unknown task '" + name + "' (survival-nll, survival-cox, subtype, mutation, report)");
}

std::string task_name(Task t) {
    for (const auto& [k, n] : kTaskNames)
        if (k == t) return n;
    return "?";
}

void FinetuneConfig::validate() const {
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (time_bins < 2) throw ConfigError("time_bins must be >= 2");
    if (decoder_depth < 1) throw ConfigError("decoder_depth must be >= 1");
}

TaskHeads TaskHeads::create(ParamStore& store, const ModelConfig& cfg, Task task, int classes, Index report_len,
                            int decoder_depth, int time_bins) {
    TaskHeads h;
    h.task = task;
    h.pool = MultimodalHead::create(store, cfg, "head");
    const Index p = cfg.patient_dim();
    switch (task) {
        case Task::survival_nll: h.linear = Linear::create(store, "task.nll", p, time_bins); break;
        case Task::survival_cox: h.linear = Linear::create(store, "task.cox", p, 1); break;
        case Task::subtype:
            if (classes < 2) throw ConfigError("subtype task needs at least 2 classes");
            h.classes = classes;
            h.mlp = MlpHead::create(store, "task.subtype", p, cfg.hidden_dim, classes);
            break;
        case Task::mutation:
            h.classes = 2;
            h.mlp = MlpHead::create(store, "task.mutation", p, cfg.hidden_dim, 2);
            break;
        case Task::report:
            h.report_len = report_len;
            h.decoder = ReportDecoder::create(store, cfg, report_len, decoder_depth, "task.decoder");
            break;
    }
    return h;
}

std::vector<Parameter*> backbone_parameters(ParamStore& store) {
    std::vector<Parameter*> out;
    for (const char* prefix : {"slide.", "genes.", "text.", "fusion."})
        for (Parameter* p : store.with_prefix(prefix)) out.push_back(p);
    return out;
}

void set_backbone_trainable(ParamStore& store, bool trainable) {
    for (Parameter* p : backbone_parameters(store)) p->trainable = trainable;
}

unsigned task_modalities(Task t) { return t == Task::report ? 3u : 7u; }

std::vector<Index> task_members(const Dataset& ds, Task t) {
    std::vector<Index> out;
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        const PreparedSample& s = ds.samples[i];
        if (!readable(s, task_modalities(t))) continue;
        if (t == Task::report && record_of(ds, s).report.empty()) continue;
        out.push_back(static_cast<Index>(i));
    }
    return out;
}

TimeBins fit_time_bins(const Dataset& train, int bins) {
    std::vector<double> times;
    std::vector<int> cens;
    for (const auto& s : train.samples) {
        times.push_back(record_of(train, s).survival.time);
        cens.push_back(record_of(train, s).survival.censored);
    }
    return bin_times(times, cens, bins);
}

Var task_loss(Tape& tape, const AlterModel& model, const TaskHeads& heads, const Dataset& ds,
              std::span<const Index> members, const TimeBins& bins) {
    if (members.empty()) throw DataError("task_loss: empty batch");
    if (heads.task == Task::report) {
        std::vector<Var> terms;
        for (Index k : members) {
            const PreparedSample& s = ds.samples.at(static_cast<std::size_t>(k));
            SampleForward f = model.forward(tape, s, ds.pathways, nullptr, task_modalities(Task::report));
            terms.push_back(heads.decoder.loss(tape, f.fused.tokens, record_of(ds, s).report));
        }
        return scale(sum(concat_rows(terms)), 1.0 / static_cast<double>(terms.size()));
    }

    std::vector<Var> rows;
    std::vector<double> times;
    std::vector<int> cens;
    std::vector<Index> labels;
    for (Index k : members) {
        const PreparedSample& s = ds.samples.at(static_cast<std::size_t>(k));
        rows.push_back(patient_embedding(tape, model, heads, ds, s));
        const SampleRecord& r = record_of(ds, s);
        times.push_back(r.survival.time);
        cens.push_back(r.survival.censored);
        labels.push_back(class_label(ds, s, heads.task));
    }
    Var x = rows.size() == 1 ? rows.front() : concat_rows(rows);
    switch (heads.task) {
        case Task::survival_nll: {
            if (static_cast<Index>(bins.edges.size()) + 1 != heads.linear.out_features())
                throw ConfigError("survival head width does not match the time bins");
            return nll_survival_loss(heads.linear(tape, x), bins(times), cens);
        }
        case Task::survival_cox: return cox_loss(heads.linear(tape, x), times, cens);
        default: return cross_entropy(heads.mlp(tape, x), labels);
    }
}

TimeBins finetune_loop(const AlterModel& model, const TaskHeads& heads, ParamStore& store, const Dataset& train,
                       const FinetuneConfig& cfg, std::vector<FinetuneRecord>* history) {
    cfg.validate();
    if (cfg.task != heads.task) throw ConfigError("finetune config task differs from the heads");
    const std::vector<Index> members = task_members(train, cfg.task);
    if (members.empty()) throw DataError("no training sample carries what task " + task_name(cfg.task) + " needs");
    TimeBins bins;
    if (cfg.task == Task::survival_nll) bins = fit_time_bins(train, cfg.time_bins);

    // Pretraining-only heads are never read here; keep them out of Adam.
    for (const char* prefix : {"mlm.", "clip."})
        for (Parameter* p : store.with_prefix(prefix)) p->trainable = false;
    set_backbone_trainable(store, !cfg.freeze_fusion);
    std::vector<const Parameter*> frozen;
    for (Parameter* p : backbone_parameters(store)) frozen.push_back(p);
    const std::uint64_t before = parameter_digest(frozen);

    AdamState adam;
    adam.config.lr = cfg.lr;
    const auto n = static_cast<Index>(members.size());
    const Index nb = (n + cfg.batch_size - 1) / cfg.batch_size;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<Index> order = members;
        Rng rng = make_rng(cfg.seed, {hash_name("finetune"), static_cast<std::uint64_t>(epoch)});
        std::shuffle(order.begin(), order.end(), rng);
        for (Index b = 0; b < nb; ++b) {
            const Index start = b * cfg.batch_size;
            std::span<const Index> batch(order.data() + start,
                                         static_cast<std::size_t>(std::min(cfg.batch_size, n - start)));
            FinetuneRecord rec{epoch, static_cast<int>(b), false, 0.0};
            Tape tape;
            try {
                Var loss = task_loss(tape, model, heads, train, batch, bins);
                rec.loss = loss.scalar();
                store.zero_grad();
                tape.backward(loss);
                adam_step(store, adam);
            } catch (const DataError& e) {
                // A Cox batch without an observed event has no likelihood.
                warn("epoch " + std::to_string(epoch) + " batch " + std::to_string(b) + " skipped: " + e.what());
                rec.skipped = true;
            }
            if (history) history->push_back(rec);
        }
    }
    if (cfg.freeze_fusion && parameter_digest(frozen) != before)
        throw NumericError("frozen backbone parameters changed during fine-tuning");
    return bins;
}

TaskPredictions predict(const AlterModel& model, const TaskHeads& heads, const Dataset& ds) {
    TaskPredictions out;
    out.members = task_members(ds, heads.task);
    if (is_classification(heads.task)) out.probabilities.resize(static_cast<Index>(out.members.size()), heads.classes);
    for (std::size_t i = 0; i < out.members.size(); ++i) {
        const PreparedSample& s = ds.samples[static_cast<std::size_t>(out.members[i])];
        Tape tape;
        if (heads.task == Task::report) {
            SampleForward f = model.forward(tape, s, ds.pathways, nullptr, task_modalities(Task::report));
            const auto words = heads.decoder.generate(f.fused.tokens, heads.report_len);
            out.reports.emplace_back(words.begin(), words.end());
            continue;
        }
        Var x = patient_embedding(tape, model, heads, ds, s);
        if (heads.task == Task::survival_cox) {
            out.risk.push_back(heads.linear(tape, x).scalar());
        } else if (heads.task == Task::survival_nll) {
            // Higher risk = less expected survival mass.
            out.risk.push_back(-survival_curve(heads.linear(tape, x).value()).sum());
        } else {
            out.probabilities.row(static_cast<Index>(i)) = softmax_rows(heads.mlp(tape, x).value());
        }
    }
    return out;
}

MetricReport evaluate_task(const AlterModel& model, const TaskHeads& heads, const Dataset& ds) {
    const TaskPredictions p = predict(model, heads, ds);
    MetricReport rep;
    rep.set_text("task", task_name(heads.task));
    rep.set("samples", static_cast<double>(p.members.size()));
    if (p.members.empty()) throw DataError("no evaluation sample carries what the task needs");

    if (is_survival(heads.task)) {
        std::vector<double> times;
        std::vector<int> cens;
        for (Index k : p.members) {
            const auto& r = record_of(ds, ds.samples[static_cast<std::size_t>(k)]);
            times.push_back(r.survival.time);
            cens.push_back(r.survival.censored);
        }
        rep.set("c_index", concordance_index(p.risk, times, cens));
        return rep;
    }
    if (heads.task == Task::report) {
        std::vector<Tokens> refs;
        for (Index k : p.members) {
            const auto& words = record_of(ds, ds.samples[static_cast<std::size_t>(k)]).report;
            refs.emplace_back(words.begin(), words.end());
        }
        for (int n = 1; n <= 4; ++n) rep.set("bleu_" + std::to_string(n), corpus_bleu(p.reports, refs, n));
        double rl = 0.0;
        for (std::size_t i = 0; i < refs.size(); ++i) rl += rouge_l(p.reports[i], refs[i]);
        rep.set("rouge_l", rl / static_cast<double>(refs.size()));
        return rep;
    }

    std::vector<int> labels, pred;
    for (std::size_t i = 0; i < p.members.size(); ++i) {
        labels.push_back(class_label(ds, ds.samples[static_cast<std::size_t>(p.members[i])], heads.task));
        Index best = 0;
        p.probabilities.row(static_cast<Index>(i)).maxCoeff(&best);
        pred.push_back(static_cast<int>(best));
    }
    // One-vs-rest AUC over the classes that occur in this split.
    double auc = 0.0;
    int used = 0;
    for (int c = 0; c < heads.classes; ++c) {
        std::vector<int> y(labels.size());
        for (std::size_t i = 0; i < labels.size(); ++i) y[i] = labels[i] == c;
        const int pos = std::accumulate(y.begin(), y.end(), 0);
        if (pos == 0 || pos == static_cast<int>(y.size())) continue;
        std::vector<double> s(labels.size());
        for (std::size_t i = 0; i < labels.size(); ++i) s[i] = p.probabilities(static_cast<Index>(i), c);
        auc += auc_roc(s, y);
        ++used;
        if (heads.classes == 2) break;  // both columns give the same AUC
    }
    if (used == 0) {
        warn("evaluation split holds a single class; AUC undefined");
    } else {
        rep.set("auc", auc / used);
    }
    rep.set("f1", macro_f1(pred, labels, heads.classes));
    rep.set("accuracy", accuracy(pred, labels));
    return rep;
}

}  // namespace alter
