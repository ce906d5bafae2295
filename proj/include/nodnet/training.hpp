#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nodnet/adam.hpp"
#include "nodnet/dataset.hpp"
#include "nodnet/losses.hpp"
#include "nodnet/network.hpp"
#include "nodnet/rng.hpp"

namespace nodnet {

struct TrainConfig {
    double alpha = 0.001;        // adversarial loss scaling in J_Net = J_Seg - alpha * J_Adv
    double learning_rate = 1e-4;
    int epochs_stage1 = 35;
    int epochs_stage2 = 50;
    int batch_size = 4;
    std::uint64_t seed = 0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    int max_iterations = 0;        // 0: run the full epoch budget
    bool use_discriminator = true;  // false: plain segmentation loop (requires alpha == 0)

    void validate() const {
        if (alpha < 0) throw std::invalid_argument("TrainConfig: alpha must be >= 0");
        if (learning_rate <= 0) throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
        if (epochs_stage1 < 1 || epochs_stage2 < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
        if (!use_discriminator && alpha != 0)
            throw std::invalid_argument("TrainConfig: alpha must be 0 when the discriminator is disabled");
    }

    AdamConfig adam() const { return {learning_rate, adam_beta1, adam_beta2, adam_epsilon}; }
};

// ---------------------------------------------------------------------------
// Shuffled two-channel stacks for the Turing-test discriminator
// ---------------------------------------------------------------------------

/// Ground truth and prediction stacked in randomized channel order, plus the
/// one-hot order label: [1,0] iff channel 0 holds the ground truth.
template <typename S>
struct DiscriminatorBatch {
    Tensor<S> stacked;                    // [2,H,W] for a single pair, [N,2,H,W] batched
    Tensor<S> target;                     // [2] / [N,2]
    std::vector<std::uint8_t> gt_first;   // per-pair channel order actually drawn
};

/// Stacks each (gt, pred) pair into two channels in the per-pair order given
/// by `gt_first`. Gradients flow back through whichever channel holds the
/// prediction (and through gt if it requires gradients).
template <typename S>
Tensor<S> shuffled_stack(const Tensor<S>& gt, const Tensor<S>& pred, const std::vector<std::uint8_t>& gt_first) {
    detail::check_rank("shuffled_stack", gt, 4);
    detail::check_same_shape("shuffled_stack", gt, pred);
    if (gt.dim(1) != 1) throw std::invalid_argument("shuffled_stack: inputs must be single-channel");
    const int n = gt.dim(0), h = gt.dim(2), w = gt.dim(3);
    if (static_cast<int>(gt_first.size()) != n)
        throw std::invalid_argument("shuffled_stack: order flags do not match batch size");
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    Tensor<S> out(Shape{n, 2, h, w});
    for (int i = 0; i < n; ++i) {
        const S* g = gt.data().data() + i * plane;
        const S* p = pred.data().data() + i * plane;
        S* dst = out.data().data() + static_cast<std::int64_t>(i) * 2 * plane;
        std::copy_n(gt_first[i] ? g : p, plane, dst);
        std::copy_n(gt_first[i] ? p : g, plane, dst + plane);
    }
    if (auto* tape = Tape<S>::current(); tape && (gt.requires_grad() || pred.requires_grad())) {
        out.set_requires_grad(true);
        auto gi = gt.impl(), pi = pred.impl(), oi = out.impl();
        auto order = std::make_shared<std::vector<std::uint8_t>>(gt_first);
        tape->record(oi, [gi, pi, oi, order, n, plane] {
            if (oi->grad.empty()) return;
            if (pi->requires_grad) detail::ensure_grad(*pi);
            if (gi->requires_grad) detail::ensure_grad(*gi);
            for (int i = 0; i < n; ++i) {
                const std::int64_t base = static_cast<std::int64_t>(i) * 2 * plane;
                const std::int64_t pred_off = (*order)[i] ? plane : 0;
                if (pi->requires_grad)
                    for (std::int64_t j = 0; j < plane; ++j)
                        pi->grad[i * plane + j] += oi->grad[base + pred_off + j];
                if (gi->requires_grad)
                    for (std::int64_t j = 0; j < plane; ++j)
                        gi->grad[i * plane + j] += oi->grad[base + (plane - pred_off) + j];
            }
        });
    }
    return out;
}

/// Batched shuffle: one rng draw per pair decides the channel order.
template <typename S>
DiscriminatorBatch<S> shuffle_concat_batch(const Tensor<S>& gt, const Tensor<S>& pred, Rng& rng) {
    const int n = gt.dim(0);
    std::vector<std::uint8_t> order(static_cast<std::size_t>(n));
    for (auto& o : order) o = rng.bernoulli(0.5) ? 1 : 0;
    Tensor<S> target(Shape{n, 2});
    for (int i = 0; i < n; ++i) {
        target.data()[2 * i] = order[i] ? S(1) : S(0);
        target.data()[2 * i + 1] = order[i] ? S(0) : S(1);
    }
    return {shuffled_stack(gt, pred, order), target, std::move(order)};
}

/// Single-pair form on [H,W] masks: exactly one rng draw is consumed.
template <typename S>
DiscriminatorBatch<S> shuffle_concat(const Tensor<S>& gt, const Tensor<S>& pred, Rng& rng) {
    detail::check_rank("shuffle_concat", gt, 2);
    detail::check_same_shape("shuffle_concat", gt, pred);
    const int h = gt.dim(0), w = gt.dim(1);
    auto batch = shuffle_concat_batch(reshape(gt, {1, 1, h, w}), reshape(pred, {1, 1, h, w}), rng);
    return {reshape(batch.stacked, {2, h, w}), reshape(batch.target, {2}), std::move(batch.gt_first)};
}

// ---------------------------------------------------------------------------
// Stage 1: adversarial segmenter training
// ---------------------------------------------------------------------------

struct SegSample {
    Tensor<float> image;  // [H,W], values in [0,1]
    Tensor<float> mask;   // [H,W], binary
};
using SegDataset = std::vector<SegSample>;

struct StepLog {
    double j_seg = 0, j_adv = 0, j_net = 0;
    double disc_accuracy = 0;  // this step's discriminator batch accuracy
};

struct HistoryRow {
    long iter = 0;
    double j_seg = 0, j_adv = 0, j_net = 0;
    double disc_acc = 0;    // windowed mean of discriminator batch accuracy
    double val_dice = -1;   // only meaningful when has_val
    bool has_val = false;
};

struct History {
    std::vector<HistoryRow> rows;
    std::string to_csv() const;  // header: iter,j_seg,j_adv,j_net,disc_acc,val_dice
    void save(const std::string& path) const;
};

/// One discriminator update on a frozen segmenter: forward the segmenter
/// without gradient retention, shuffle each pair, minimize the cross-entropy
/// of the order prediction w.r.t. discriminator parameters only.
StepLog train_discriminator_step(const NetworkSpec& seg_spec, WeightStore<float>& seg, const NetworkSpec& disc_spec,
                                 WeightStore<float>& disc, AdamState<float>& disc_state, const AdamConfig& adam_cfg,
                                 const Tensor<float>& images, const Tensor<float>& gts, Rng& shuffle_rng);

/// One segmenter update against a frozen discriminator, minimizing
/// J_Net = J_Seg - alpha * J_Adv. With alpha == 0 (or no discriminator) the
/// step reduces exactly to plain segmentation training. disc_spec/disc may
/// be null when alpha == 0.
StepLog train_segmenter_step(const NetworkSpec& seg_spec, WeightStore<float>& seg, const NetworkSpec* disc_spec,
                             WeightStore<float>* disc, AdamState<float>& seg_state, const AdamConfig& adam_cfg,
                             const Tensor<float>& images, const Tensor<float>& gts, double alpha, Rng& shuffle_rng);

struct Stage1Result {
    WeightStore<float> segmenter;      // best-validation checkpoint
    WeightStore<float> discriminator;  // final state (empty when disabled)
    History history;
    double best_val_dice = -1;
};

/// Per iteration: one discriminator step, then one segmenter step. Validation
/// Dice is recorded at every epoch end (and at the iteration cap); the
/// best-validation segmenter weights are retained. Rng streams for data
/// order, shuffle_concat and init are independent, so a run with alpha == 0
/// matches the discriminator-free loop bitwise.
Stage1Result train_stage1(const SegDataset& train, const SegDataset& val, const NetworkSpec& seg_spec,
                          const NetworkSpec& disc_spec, const TrainConfig& cfg);

/// Mean validation Dice of thresholded (0.5) eval-phase predictions.
double mean_val_dice(const NetworkSpec& seg_spec, WeightStore<float>& seg, const SegDataset& data, int batch_size);

// ---------------------------------------------------------------------------
// Stage 2: patch classifier training
// ---------------------------------------------------------------------------

/// Classifier output index for a patch label; class scores are ordered
/// [C1, C2].
inline int class_index(PatchLabel label) { return label == PatchLabel::C1 ? 0 : 1; }

struct Stage2Row {
    int epoch = 0;
    double train_loss = 0;
    double val_accuracy = 0, val_sensitivity = 0, val_specificity = 0;
};

struct Stage2Result {
    WeightStore<float> classifier;  // best-validation-accuracy checkpoint
    std::vector<Stage2Row> history;
    double best_val_accuracy = -1;
};

std::string stage2_history_csv(const std::vector<Stage2Row>& rows);

/// Minimizes two-class cross-entropy over the patches; tracks accuracy,
/// sensitivity and specificity on the validation split each epoch. Rejects
/// single-class datasets.
Stage2Result train_stage2(const std::vector<PatchRecord>& train, const std::vector<PatchRecord>& val,
                          const NetworkSpec& clf_spec, const TrainConfig& cfg);

/// Argmax class predictions for a patch set, batched eval-phase forward.
std::vector<int> classify_patches(const NetworkSpec& clf_spec, WeightStore<float>& clf,
                                  const std::vector<PatchRecord>& patches, int batch_size);

}  // namespace nodnet
