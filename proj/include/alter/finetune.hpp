#pragma once

// Downstream fine-tuning on top of the pretrained network: task heads,
// the training loop (optionally with the backbone frozen) and evaluation.

#include "alter/metrics.hpp"
#include "alter/model.hpp"
#include "alter/numerics/adam.hpp"

#include <string>

namespace alter {

enum class Task { survival_nll, survival_cox, subtype, mutation, report };

Task parse_task(const std::string& name);
std::string task_name(Task t);

struct FinetuneConfig {
    Task task = Task::subtype;
    int epochs = 20;
    double lr = 1e-3;
    Index batch_size = 16;
    std::uint64_t seed = 0;
    bool freeze_fusion = false;
    int time_bins = 4;
    int decoder_depth = 1;

    void validate() const;
};

/// Pooled patient head plus the one head the task needs.
struct TaskHeads {
    Task task = Task::subtype;
    MultimodalHead pool;
    Linear linear;   // survival: 2d -> bins or 2d -> 1
    MlpHead mlp;     // classification: 2d -> d -> classes
    ReportDecoder decoder;
    int classes = 0;
    Index report_len = 0;

    /// `classes` for subtype; mutation is always binary.
    static TaskHeads create(ParamStore& store, const ModelConfig& cfg, Task task, int classes, Index report_len,
                            int decoder_depth = 1, int time_bins = 4);
};

/// Encoder and fusion parameters; `trainable` toggles them together.
std::vector<Parameter*> backbone_parameters(ParamStore& store);
void set_backbone_trainable(ParamStore& store, bool trainable);

/// Modalities a task may read (the report task never sees the report).
unsigned task_modalities(Task t);
/// Samples usable by the task (those with at least one readable modality).
std::vector<Index> task_members(const Dataset& ds, Task t);

/// Mean task loss over `members` (indices into ds.samples).
Var task_loss(Tape& tape, const AlterModel& model, const TaskHeads& heads, const Dataset& ds,
              std::span<const Index> members, const TimeBins& bins);

struct FinetuneRecord {
    int epoch = 0;
    int batch = 0;
    bool skipped = false;
    double loss = 0.0;
};

/// Trains the heads (and the backbone unless frozen). With the backbone
/// frozen its parameter digest is checked unchanged and NumericError is
/// thrown otherwise. Returns the time bins fitted on `train` (used by the
/// NLL task; empty edges otherwise).
TimeBins finetune_loop(const AlterModel& model, const TaskHeads& heads, ParamStore& store, const Dataset& train,
                       const FinetuneConfig& cfg, std::vector<FinetuneRecord>* history = nullptr);

/// Fits survival bins on the training records.
TimeBins fit_time_bins(const Dataset& train, int bins);

/// Per-sample outputs: risk for survival tasks, class probabilities for
/// classification, generated word ids for reports.
struct TaskPredictions {
    std::vector<Index> members;
    std::vector<double> risk;
    Matrix probabilities;
    std::vector<Tokens> reports;
};

TaskPredictions predict(const AlterModel& model, const TaskHeads& heads, const Dataset& ds);

/// Survival: c_index. Classification: auc, f1, accuracy. Report: bleu_1..4,
/// rouge_l. Counts and the task name are included.
MetricReport evaluate_task(const AlterModel& model, const TaskHeads& heads, const Dataset& ds);

}  // namespace alter
