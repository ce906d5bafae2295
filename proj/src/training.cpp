#include "nodnet/training.hpp"

#include <cmath>
#include <cstdio>
#include <deque>
#include <numeric>

#include "nodnet/metrics.hpp"
#include "nodnet/serialize.hpp"

namespace nodnet {

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

void check_finite_loss(const char* what, double v) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite ") + what);
}

// [H,W] samples at `order[begin..end)` -> images/masks [N,1,H,W]
void assemble_batch(const SegDataset& data, const std::vector<int>& order, std::size_t begin, std::size_t end,
                    Tensor<float>& images, Tensor<float>& masks) {
    const int n = static_cast<int>(end - begin);
    const int h = data[order[begin]].image.dim(0), w = data[order[begin]].image.dim(1);
    images = Tensor<float>(Shape{n, 1, h, w});
    masks = Tensor<float>(Shape{n, 1, h, w});
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    for (int i = 0; i < n; ++i) {
        const SegSample& s = data[order[begin + i]];
        std::copy_n(s.image.data().data(), plane, images.data().data() + i * plane);
        std::copy_n(s.mask.data().data(), plane, masks.data().data() + i * plane);
    }
}

double batch_accuracy(const Tensor<float>& probs, const Tensor<float>& target) {
    const int n = probs.dim(0);
    int correct = 0;
    for (int i = 0; i < n; ++i) {
        const bool pred_first = probs.data()[2 * i] >= probs.data()[2 * i + 1];
        const bool true_first = target.data()[2 * i] >= target.data()[2 * i + 1];
        correct += pred_first == true_first;
    }
    return static_cast<double>(correct) / n;
}

}  // namespace

std::string History::to_csv() const {
    std::string out = "iter,j_seg,j_adv,j_net,disc_acc,val_dice\n";
    for (const auto& r : rows) {
        out += std::to_string(r.iter) + "," + fmt(r.j_seg) + "," + fmt(r.j_adv) + "," + fmt(r.j_net) + "," +
               fmt(r.disc_acc) + ",";
        if (r.has_val) out += fmt(r.val_dice);
        out += "\n";
    }
    return out;
}

void History::save(const std::string& path) const { atomic_write_file(path, to_csv()); }

StepLog train_discriminator_step(const NetworkSpec& seg_spec, WeightStore<float>& seg, const NetworkSpec& disc_spec,
                                 WeightStore<float>& disc, AdamState<float>& disc_state, const AdamConfig& adam_cfg,
                                 const Tensor<float>& images, const Tensor<float>& gts, Rng& shuffle_rng) {
    Tensor<float> preds;
    {
        NoRecordScope<float> quiet;
        preds = forward(seg_spec, seg, images, Phase::Frozen);
    }
    StepLog log;
    {
        Tape<float> tape;
        auto batch = shuffle_concat_batch(gts, preds, shuffle_rng);
        Tensor<float> out = forward(disc_spec, disc, batch.stacked, Phase::Train);
        Tensor<float> loss = adv_loss(out, batch.target);
        log.j_adv = loss.item();
        check_finite_loss("discriminator loss", log.j_adv);
        log.disc_accuracy = batch_accuracy(out, batch.target);
        tape.backward(loss);
    }
    adam_step(disc, disc_state, adam_cfg);
    disc.zero_grad();
    return log;
}

StepLog train_segmenter_step(const NetworkSpec& seg_spec, WeightStore<float>& seg, const NetworkSpec* disc_spec,
                             WeightStore<float>* disc, AdamState<float>& seg_state, const AdamConfig& adam_cfg,
                             const Tensor<float>& images, const Tensor<float>& gts, double alpha, Rng& shuffle_rng) {
    StepLog log;
    {
        Tape<float> tape;
        Tensor<float> preds = forward(seg_spec, seg, images, Phase::Train);
        Tensor<float> j_seg = seg_loss(preds, gts);
        log.j_seg = j_seg.item();
        check_finite_loss("segmentation loss", log.j_seg);
        Tensor<float> j_net;
        if (alpha != 0.0) {
            if (!disc_spec || !disc)
                throw std::invalid_argument("train_segmenter_step: alpha != 0 requires a discriminator");
            auto batch = shuffle_concat_batch(gts, preds, shuffle_rng);
            Tensor<float> out = forward(*disc_spec, *disc, batch.stacked, Phase::Frozen);
            Tensor<float> j_adv = adv_loss(out, batch.target);
            log.j_adv = j_adv.item();
            check_finite_loss("adversarial loss", log.j_adv);
            j_net = sub(j_seg, scale(j_adv, static_cast<float>(alpha)));
        } else {
            j_net = j_seg;
        }
        log.j_net = j_net.item();
        check_finite_loss("J_Net", log.j_net);
        tape.backward(j_net);
    }
    adam_step(seg, seg_state, adam_cfg);
    seg.zero_grad();
    if (disc) disc->zero_grad();  // gradients that flowed through the frozen discriminator are discarded
    return log;
}

double mean_val_dice(const NetworkSpec& seg_spec, WeightStore<float>& seg, const SegDataset& data, int batch_size) {
    if (data.empty()) throw std::invalid_argument("mean_val_dice: empty dataset");
    NoRecordScope<float> quiet;
    std::vector<int> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    double acc = 0.0;
    for (std::size_t begin = 0; begin < data.size(); begin += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(data.size(), begin + static_cast<std::size_t>(batch_size));
        Tensor<float> images, masks;
        assemble_batch(data, order, begin, end, images, masks);
        Tensor<float> preds = forward(seg_spec, seg, images, Phase::Eval);
        const int h = preds.dim(2), w = preds.dim(3);
        const std::int64_t plane = static_cast<std::int64_t>(h) * w;
        for (std::size_t i = begin; i < end; ++i) {
            const float* p = preds.data().data() + static_cast<std::int64_t>(i - begin) * plane;
            Tensor<float> pred_mask = binarize(Tensor<float>::from_data({h, w}, {p, p + plane}));
            acc += dice(pred_mask, data[order[i]].mask);
        }
    }
    return acc / static_cast<double>(data.size());
}

Stage1Result train_stage1(const SegDataset& train, const SegDataset& val, const NetworkSpec& seg_spec,
                          const NetworkSpec& disc_spec, const TrainConfig& cfg) {
    cfg.validate();
    if (train.empty()) throw std::invalid_argument("train_stage1: empty dataset");
    if (val.empty()) throw std::invalid_argument("train_stage1: empty validation set");

    // Independent streams so that the discriminator's consumption never
    // shifts the segmenter's draws (the alpha=0 equivalence depends on it).
    Rng master(cfg.seed);
    Rng init_rng = master.fork("init");
    Rng data_rng = master.fork("data-order");
    Rng shuffle_rng = master.fork("shuffle-concat");

    WeightStore<float> seg = init_weights<float>(seg_spec, init_rng.next_u64());
    WeightStore<float> disc;
    if (cfg.use_discriminator) disc = init_weights<float>(disc_spec, init_rng.next_u64());

    AdamState<float> seg_state, disc_state;
    const AdamConfig adam_cfg = cfg.adam();

    Stage1Result result;
    std::deque<double> acc_window;
    constexpr std::size_t kAccWindow = 50;
    long iter = 0;
    bool done = false;

    const auto run_validation = [&] {
        const double d = mean_val_dice(seg_spec, seg, val, cfg.batch_size);
        result.history.rows.back().val_dice = d;
        result.history.rows.back().has_val = true;
        if (d > result.best_val_dice) {
            result.best_val_dice = d;
            result.segmenter = seg.clone();
        }
    };

    for (int epoch = 0; epoch < cfg.epochs_stage1 && !done; ++epoch) {
        std::vector<int> order(train.size());
        std::iota(order.begin(), order.end(), 0);
        data_rng.shuffle(order);
        for (std::size_t begin = 0; begin < order.size() && !done; begin += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
            Tensor<float> images, masks;
            assemble_batch(train, order, begin, end, images, masks);

            if (cfg.use_discriminator) {
                StepLog dlog = train_discriminator_step(seg_spec, seg, disc_spec, disc, disc_state, adam_cfg, images,
                                                        masks, shuffle_rng);
                acc_window.push_back(dlog.disc_accuracy);
                if (acc_window.size() > kAccWindow) acc_window.pop_front();
            }
            StepLog slog = train_segmenter_step(seg_spec, seg, cfg.use_discriminator ? &disc_spec : nullptr,
                                                cfg.use_discriminator ? &disc : nullptr, seg_state, adam_cfg, images,
                                                masks, cfg.alpha, shuffle_rng);
            ++iter;
            HistoryRow row;
            row.iter = iter;
            row.j_seg = slog.j_seg;
            row.j_adv = slog.j_adv;
            row.j_net = slog.j_net;
            row.disc_acc = acc_window.empty()
                               ? 0.0
                               : std::accumulate(acc_window.begin(), acc_window.end(), 0.0) / acc_window.size();
            result.history.rows.push_back(row);
            if (cfg.max_iterations > 0 && iter >= cfg.max_iterations) done = true;
        }
        run_validation();
    }
    result.discriminator = std::move(disc);
    return result;
}

std::vector<int> classify_patches(const NetworkSpec& clf_spec, WeightStore<float>& clf,
                                  const std::vector<PatchRecord>& patches, int batch_size) {
    NoRecordScope<float> quiet;
    std::vector<int> out;
    out.reserve(patches.size());
    for (std::size_t begin = 0; begin < patches.size(); begin += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(patches.size(), begin + static_cast<std::size_t>(batch_size));
        const int n = static_cast<int>(end - begin);
        Tensor<float> batch(Shape{n, 1, kPatchSize, kPatchSize});
        for (int i = 0; i < n; ++i)
            std::copy_n(patches[begin + i].pixels.data().data(), kPatchSize * kPatchSize,
                        batch.data().data() + static_cast<std::int64_t>(i) * kPatchSize * kPatchSize);
        Tensor<float> probs = forward(clf_spec, clf, batch, Phase::Eval);
        for (int i = 0; i < n; ++i) out.push_back(probs.data()[2 * i] >= probs.data()[2 * i + 1] ? 0 : 1);
    }
    return out;
}

namespace {

void check_both_classes(const char* what, const std::vector<PatchRecord>& patches) {
    bool c1 = false, c2 = false;
    for (const auto& p : patches) (p.label == PatchLabel::C1 ? c1 : c2) = true;
    if (!c1 || !c2)
        throw std::invalid_argument(std::string("train_stage2: ") + what +
                                    " split is single-class; accuracy/sensitivity/specificity undefined");
}

ClassificationReport patch_report(const NetworkSpec& clf_spec, WeightStore<float>& clf,
                                  const std::vector<PatchRecord>& patches, int batch_size) {
    const std::vector<int> cls = classify_patches(clf_spec, clf, patches, batch_size);
    std::vector<int> preds(cls.size()), labels(cls.size());
    for (std::size_t i = 0; i < cls.size(); ++i) {
        preds[i] = cls[i] == 0 ? 1 : 0;  // class index 0 is C1 = positive
        labels[i] = patches[i].label == PatchLabel::C1 ? 1 : 0;
    }
    return classification_report(preds, labels);
}

}  // namespace

std::string stage2_history_csv(const std::vector<Stage2Row>& rows) {
    std::string out = "epoch,train_loss,val_acc,val_sens,val_spec\n";
    for (const auto& r : rows)
        out += std::to_string(r.epoch) + "," + fmt(r.train_loss) + "," + fmt(r.val_accuracy) + "," +
               fmt(r.val_sensitivity) + "," + fmt(r.val_specificity) + "\n";
    return out;
}

Stage2Result train_stage2(const std::vector<PatchRecord>& train, const std::vector<PatchRecord>& val,
                          const NetworkSpec& clf_spec, const TrainConfig& cfg) {
    cfg.validate();
    if (train.empty() || val.empty()) throw std::invalid_argument("train_stage2: empty dataset");
    check_both_classes("training", train);
    check_both_classes("validation", val);

    Rng master(cfg.seed);
    Rng init_rng = master.fork("init");
    Rng data_rng = master.fork("data-order");
    WeightStore<float> clf = init_weights<float>(clf_spec, init_rng.next_u64());
    AdamState<float> state;
    const AdamConfig adam_cfg = cfg.adam();

    Stage2Result result;
    for (int epoch = 0; epoch < cfg.epochs_stage2; ++epoch) {
        std::vector<int> order(train.size());
        std::iota(order.begin(), order.end(), 0);
        data_rng.shuffle(order);
        double loss_sum = 0.0;
        for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
            const int n = static_cast<int>(end - begin);
            Tensor<float> batch(Shape{n, 1, kPatchSize, kPatchSize});
            std::vector<int> labels(n);
            for (int i = 0; i < n; ++i) {
                const PatchRecord& p = train[order[begin + i]];
                std::copy_n(p.pixels.data().data(), kPatchSize * kPatchSize,
                            batch.data().data() + static_cast<std::int64_t>(i) * kPatchSize * kPatchSize);
                labels[i] = class_index(p.label);
            }
            {
                Tape<float> tape;
                Tensor<float> probs = forward(clf_spec, clf, batch, Phase::Train);
                Tensor<float> loss = cross_entropy(probs, labels);
                const double v = loss.item();
                check_finite_loss("classifier loss", v);
                loss_sum += v * n;
                tape.backward(loss);
            }
            adam_step(clf, state, adam_cfg);
            clf.zero_grad();
        }
        Stage2Row row;
        row.epoch = epoch + 1;
        row.train_loss = loss_sum / static_cast<double>(train.size());
        const ClassificationReport rep = patch_report(clf_spec, clf, val, cfg.batch_size);
        row.val_accuracy = rep.accuracy();
        row.val_sensitivity = rep.sensitivity();
        row.val_specificity = rep.specificity();
        result.history.push_back(row);
        if (row.val_accuracy > result.best_val_accuracy) {
            result.best_val_accuracy = row.val_accuracy;
            result.classifier = clf.clone();
        }
    }
    return result;
}

}  // namespace nodnet
