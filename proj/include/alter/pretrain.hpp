#pragma once

// Pretraining objective: masked modeling on one modality at a time, pairwise
// contrastive losses between encoder CLS rows, and a class triplet loss on
// fused sample embeddings; plus the epoch loop that drives them.

#include "alter/model.hpp"
#include "alter/numerics/adam.hpp"

#include <functional>

namespace alter {

struct LossWeights {
    double alpha = 1.0;  // MLM
    double beta = 1.0;   // CLIP
};

struct PretrainConfig {
    ModelConfig model;
    double mask_ratio = 0.15;
    double tau_init = 0.07;
    double margin = 1.0;
    LossWeights weights;
    double lr = 1e-3;
    Index batch_size = 16;
    int epochs = 10;
    std::uint64_t seed = 0;
    int mlm_switch_period = 10;
    std::size_t max_triplets = 64;

    void validate() const;
};

/// Symmetric InfoNCE between matched rows of x and y (N x d each) after L2
/// normalization; `inv_tau` is 1 x 1. N == 0 gives 0 with a warning.
Var clip_pair_loss(Tape& tape, const Var& x, const Var& y, const Var& inv_tau);
Var clip_pair_loss(Tape& tape, const Var& x, const Var& y, double tau);

/// Per-sample encoder CLS rows, nullopt where the modality is absent.
using ClsTriple = std::array<std::optional<Var>, 3>;

/// L_HG + L_GT + L_TH, each over the samples holding both modalities.
Var clip_total(Tape& tape, const std::vector<ClsTriple>& batch, const Var& inv_tau);

using Triplet = std::array<Index, 3>;  // anchor, positive, negative

/// Every (a, p, n) with label p == label a, p != a, label n != label a;
/// subsampled to `cap` by seed when there are more.
std::vector<Triplet> mine_triplets(std::span<const int> labels, std::size_t cap, std::uint64_t seed);

/// Mean hinge max(d(a,p) - d(a,n) + margin, 0) over the listed triplets with
/// Euclidean d on rows of `anchors`. No triplets gives 0 with a warning.
Var triplet_loss(Tape& tape, const Var& anchors, std::span<const Triplet> triplets, double margin);
Var triplet_loss(Tape& tape, const Var& anchors, std::span<const int> labels, double margin, std::size_t cap = 64,
                 std::uint64_t seed = 0);

/// alpha * mlm + beta * clip + triplet.
Var total_loss(const Var& mlm, const Var& clip, const Var& triplet, const LossWeights& w);

struct BatchLoss {
    Var total, mlm, clip, triplet;
    int mlm_samples = 0;
    std::array<int, 3> pairs{};  // HG, GT, TH co-present counts
    int triplets = 0;

    bool empty() const { return mlm_samples == 0 && pairs[0] + pairs[1] + pairs[2] == 0 && triplets == 0; }
};

/// One batch of the objective; `members` index into ds.samples.
BatchLoss batch_loss(Tape& tape, const AlterModel& model, const Dataset& ds, std::span<const Index> members,
                     Modality mlm_modality, const PretrainConfig& cfg, std::uint64_t batch_seed);

/// Modality drawn for the window containing `epoch`, uniformly among `available`.
Modality mlm_modality_for(int epoch, const PretrainConfig& cfg, std::span<const Modality> available);

struct LossRecord {
    int epoch = 0;
    int batch = 0;
    Modality mlm_modality = Modality::slide;
    Index rows = 0;
    bool skipped = false;
    double mlm = 0.0;  // raw, before alpha
    double clip = 0.0;
    double triplet = 0.0;
    double total = 0.0;
};

/// Position in the schedule; everything needed to resume bit-exactly.
struct TrainProgress {
    int epoch = 0;
    int batch = 0;
    AdamState adam;
    std::vector<LossRecord> history;
};

Index batches_per_epoch(Index n, Index batch_size);
/// Sample order for one epoch.
std::vector<Index> epoch_order(Index n, int epoch, std::uint64_t seed);

/// Runs from `progress` until cfg.epochs are done or `max_steps` batches
/// have been processed (negative = unlimited). Returns batches processed.
long pretrain_loop(const AlterModel& model, ParamStore& store, const Dataset& ds, const PretrainConfig& cfg,
                   TrainProgress& progress, long max_steps = -1,
                   const std::function<void(const LossRecord&)>& on_batch = {});

/// Fused sample embeddings (N x 3d) and encoder CLS rows (N x d, zero rows
/// where absent), evaluated without masking.
Matrix sample_embeddings(const AlterModel& model, const Dataset& ds);
Matrix encoder_cls_matrix(const AlterModel& model, const Dataset& ds, Modality m);

/// Fraction of rows i whose most cosine-similar row of y is y_i.
double retrieval_top1(const Matrix& x, const Matrix& y);

}  // namespace alter
