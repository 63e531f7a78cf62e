#include "alter/verify.hpp"

#include "alter/finetune.hpp"
#include "alter/log.hpp"
#include "alter/numerics/gradcheck.hpp"
#include "alter/numerics/rng.hpp"
#include "alter/pretrain.hpp"

#include <iomanip>
#include <sstream>

namespace alter {

bool GradcheckReport::passed() const {
    for (const auto& c : components)
        if (!c.passed) return false;
    return cox_deviation <= cox_tolerance;
}

std::string GradcheckReport::to_text() const {
    std::ostringstream o;
    o << std::setprecision(3) << std::scientific;
    for (const auto& c : components)
        o << std::left << std::setw(24) << c.name << ' ' << c.max_rel_error << ' ' << (c.passed ? "ok" : "FAIL")
          << (c.worst_parameter.empty() ? "" : "  worst=" + c.worst_parameter) << '\n';
    o << std::left << std::setw(24) << "cox.closed_form" << ' ' << cox_deviation << ' '
      << (cox_deviation <= cox_tolerance ? "ok" : "FAIL") << "  instances=" << cox_instances << '\n';
    o << "result " << (passed() ? "PASS" : "FAIL") << '\n';
    return o.str();
}

namespace {

CohortSpec check_cohort_spec(std::uint64_t seed) {
    CohortSpec s;
    s.n = 8;
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

ModelConfig check_model_config(const CohortSpec& spec) {
    ModelConfig c;
    c.hidden_dim = 8;
    c.heads = 2;
    c.n_blocks = 2;
    c.encoder_depth = 1;
    c.ffn_mult = 2;
    c.expression_bins = 5;
    return model_config_for(spec, c);
}

// <x, R> for a fixed random R of x's shape: every output coordinate matters.
Var probe(Tape& tape, const Var& x, std::uint64_t seed) {
    Rng rng = make_rng(seed, {static_cast<std::uint64_t>(x.rows()), static_cast<std::uint64_t>(x.cols())});
    std::normal_distribution<double> n;
    Matrix r(x.rows(), x.cols());
    for (Index i = 0; i < r.size(); ++i) r.data()[i] = n(rng);
    return sum(hadamard(x, tape.constant(std::move(r))));
}

Matrix random_point(Index rows, Index cols, std::uint64_t seed) {
    Rng rng = make_rng(seed, {static_cast<std::uint64_t>(rows), static_cast<std::uint64_t>(cols)});
    std::normal_distribution<double> n;
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

}  // namespace

GradcheckReport run_gradcheck(const GradcheckOptions& opts) {
    GradcheckReport rep;
    // Empty-pair warnings are expected for single-modality subsets.
    set_warning_sink([](const std::string&) {});
    struct Restore {
        ~Restore() { set_warning_sink({}); }
    } restore_sink;

    const CohortSpec spec = check_cohort_spec(opts.seed);
    const Cohort cohort = generate_cohort(spec);
    std::vector<Index> rows(static_cast<std::size_t>(cohort.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<Index>(i);
    PretrainConfig pc;
    pc.model = check_model_config(spec);
    pc.seed = opts.seed;
    const Dataset ds = prepare_dataset(cohort, rows, pc.model.expression_bins);

    ParamStore store(opts.seed);
    const AlterModel model = AlterModel::create(store, pc.model, pc.tau_init);
    const TaskHeads cox = TaskHeads::create(store, pc.model, Task::survival_cox, spec.classes, spec.text_len);
    ParamStore head_store(opts.seed + 1);
    const AlterModel head_model = AlterModel::create(head_store, pc.model, pc.tau_init);
    const TaskHeads subtype = TaskHeads::create(head_store, pc.model, Task::subtype, spec.classes, spec.text_len);
    ParamStore dec_store(opts.seed + 2);
    const AlterModel dec_model = AlterModel::create(dec_store, pc.model, pc.tau_init);
    const TaskHeads report = TaskHeads::create(dec_store, pc.model, Task::report, spec.classes, spec.text_len);

    GradCheckOptions gc;
    gc.max_coords_per_param = opts.coords_per_param;
    gc.seed = opts.seed;

    auto record = [&](const std::string& name, const GradCheckResult& r) {
        rep.components.push_back({name, r.max_rel_error, r.worst_parameter, r.max_rel_error < rep.tolerance});
    };
    auto check_params = [&](const std::string& name, ParamStore& s, const ScalarFn& f) {
        std::vector<Parameter*> params = s.all();
        record(name, finite_diff_check(f, params, gc));
    };

    // A sample holding every modality.
    const PreparedSample* full = nullptr;
    for (const auto& s : ds.samples)
        if (s.has(Modality::slide) && s.has(Modality::genes) && s.has(Modality::text)) full = &s;
    if (full == nullptr) throw DataError("gradcheck cohort has no tri-modal sample");

    check_params("encoder.slide", store, [&](Tape& t) {
        Encoded e = model.slide.encode_aggregated(t, *full->slide);
        return probe(t, concat_rows({e.cls, e.tokens}), 1);
    });
    check_params("encoder.genes", store, [&](Tape& t) {
        Encoded e = model.genes.encode_aggregated(t, *full->bins, ds.pathways);
        return probe(t, concat_rows({e.cls, e.tokens}), 2);
    });
    check_params("encoder.text", store, [&](Tape& t) { return probe(t, model.text.encode(t, *full->text).tokens, 3); });

    for (unsigned subset = 1; subset < 8; ++subset) {
        std::string tag;
        for (Modality m : kModalities)
            if (subset & (1u << index_of(m))) tag += short_name(m);
        check_params("fusion." + tag, store, [&, subset](Tape& t) {
            return probe(t, model.forward(t, *full, ds.pathways, nullptr, subset).fused.tokens, 10 + subset);
        });
    }

    const std::vector<Index> batch{0, 1, 2, 3, 4, 5};
    for (Modality m : kModalities)
        check_params("loss.mlm_" + std::string(long_name(m)), store,
                     [&, m](Tape& t) { return batch_loss(t, model, ds, batch, m, pc, 7).mlm; });
    check_params("loss.clip", store, [&](Tape& t) { return batch_loss(t, model, ds, batch, Modality::text, pc, 7).clip; });
    check_params("loss.triplet", store,
                 [&](Tape& t) { return batch_loss(t, model, ds, batch, Modality::text, pc, 7).triplet; });

    {
        const std::vector<Index> bins{0, 1, 3, 2, 1, 0, 3, 2};
        const std::vector<int> cens{0, 1, 0, 0, 1, 0, 1, 0};
        record("loss.survival_nll", finite_diff_check([&](Tape&, const Var& x) { return nll_survival_loss(x, bins, cens); },
                                                      random_point(8, 4, opts.seed), gc));
        const std::vector<double> times{3.0, 1.0, 2.0, 2.0, 5.0, 0.5, 4.0, 2.5};
        record("loss.survival_cox", finite_diff_check([&](Tape&, const Var& x) { return cox_loss(x, times, cens); },
                                                      random_point(8, 1, opts.seed + 1), gc));
        const std::vector<Index> labels{0, 2, 1, 1, 0, 2, 2, 1};
        record("loss.cross_entropy", finite_diff_check([&](Tape&, const Var& x) { return cross_entropy(x, labels); },
                                                       random_point(8, 3, opts.seed + 2), gc));
    }

    const TimeBins none;
    check_params("head.multimodal_cox", store, [&](Tape& t) { return task_loss(t, model, cox, ds, batch, none); });
    check_params("head.mlp_subtype", head_store,
                 [&](Tape& t) { return task_loss(t, head_model, subtype, ds, batch, none); });
    {
        std::vector<Index> with_report;
        for (Index k : task_members(ds, Task::report))
            if (with_report.size() < 3) with_report.push_back(k);
        check_params("head.report_decoder", dec_store,
                     [&](Tape& t) { return task_loss(t, dec_model, report, ds, with_report, none); });
    }

    if (opts.inject_fault) {
        // Identity with a sign-flipped backward pass on a real parameter.
        Parameter& p = store.at("slide.cls");
        record("fault.injected", finite_diff_check(
                                     [&](Tape& t) {
                                         Var x = t.param(p);
                                         Var bad = t.record(x.value(), {x}, [x](Tape& tt, const Matrix& g, const Matrix&) {
                                             tt.accumulate(x, -g);
                                         });
                                         return probe(t, bad, 99);
                                     },
                                     std::vector<Parameter*>{&p}, gc));
    }

    Rng rng = make_rng(opts.seed, {hash_name("cox_instances")});
    std::normal_distribution<double> n;
    std::uniform_int_distribution<int> coarse(1, 6), coin(0, 3);
    rep.cox_instances = opts.cox_instances;
    for (int k = 0; k < opts.cox_instances; ++k) {
        Matrix x(10, 3), theta(3, 1);
        for (Index i = 0; i < x.size(); ++i) x.data()[i] = n(rng);
        for (Index i = 0; i < theta.size(); ++i) theta.data()[i] = n(rng);
        std::vector<double> times(10);
        std::vector<int> cens(10);
        for (std::size_t i = 0; i < 10; ++i) {
            times[i] = coarse(rng);  // coarse times give ties
            cens[i] = coin(rng) == 0;
        }
        cens[0] = 0;
        rep.cox_deviation = std::max(rep.cox_deviation, cox_gradient_check(x, theta, times, cens));
    }
    return rep;
}

}  // namespace alter
