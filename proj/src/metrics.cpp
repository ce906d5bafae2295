#include "nodnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace nodnet {

namespace {

void check_binary(const char* op, const Tensor<float>& mask) {
    for (float v : mask.data())
        if (v != 0.0f && v != 1.0f)
            throw std::invalid_argument(std::string(op) + ": mask is not binary (found " + std::to_string(v) + ")");
}

void check_labels(const char* op, const std::vector<int>& labels) {
    for (int v : labels)
        if (v != 0 && v != 1)
            throw std::invalid_argument(std::string(op) + ": labels must be 0 (C2) or 1 (C1), found " +
                                        std::to_string(v));
}

struct ClassCounts {
    long pos = 0, neg = 0;
};

ClassCounts count_classes(const char* op, const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw std::invalid_argument(std::string(op) + ": " + std::to_string(scores.size()) + " scores vs " +
                                    std::to_string(labels.size()) + " labels");
    check_labels(op, labels);
    ClassCounts c;
    for (int v : labels) (v == 1 ? c.pos : c.neg) += 1;
    if (c.pos == 0 || c.neg == 0)
        throw std::invalid_argument(std::string(op) + ": both classes must be present");
    return c;
}

}  // namespace

Tensor<float> binarize(const Tensor<float>& probs, double threshold) {
    Tensor<float> out(probs.shape());
    for (std::int64_t i = 0; i < probs.numel(); ++i)
        out.data()[i] = probs.data()[i] >= static_cast<float>(threshold) ? 1.0f : 0.0f;
    return out;
}

double dice(const Tensor<float>& pred, const Tensor<float>& gt) {
    if (pred.shape() != gt.shape())
        throw std::invalid_argument("dice: shape mismatch " + shape_string(pred.shape()) + " vs " +
                                    shape_string(gt.shape()));
    check_binary("dice", pred);
    check_binary("dice", gt);
    long p = 0, g = 0, inter = 0;
    for (std::int64_t i = 0; i < pred.numel(); ++i) {
        const bool a = pred.data()[i] != 0.0f, b = gt.data()[i] != 0.0f;
        p += a;
        g += b;
        inter += a && b;
    }
    if (p + g == 0) return 1.0;  // both empty: perfect agreement
    return 2.0 * static_cast<double>(inter) / static_cast<double>(p + g);
}

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    const ClassCounts c = count_classes("roc_auc", scores, labels);
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // midranks over tie groups, accumulate positive ranks
    double pos_rank_sum = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));  // 1-based
        for (std::size_t t = i; t < j; ++t)
            if (labels[order[t]] == 1) pos_rank_sum += midrank;
        i = j;
    }
    const double u = pos_rank_sum - 0.5 * static_cast<double>(c.pos) * (static_cast<double>(c.pos) + 1.0);
    return u / (static_cast<double>(c.pos) * static_cast<double>(c.neg));
}

double roc_auc_trapezoid(const std::vector<double>& scores, const std::vector<int>& labels) {
    const ClassCounts c = count_classes("roc_auc_trapezoid", scores, labels);
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    double area = 0.0;
    long tp = 0, fp = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        long dtp = 0, dfp = 0;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            (labels[order[j]] == 1 ? dtp : dfp) += 1;
            ++j;
        }
        // all samples of a tie group cross the threshold together
        area += static_cast<double>(dfp) * (static_cast<double>(tp) + 0.5 * static_cast<double>(dtp));
        tp += dtp;
        fp += dfp;
        i = j;
    }
    return area / (static_cast<double>(c.pos) * static_cast<double>(c.neg));
}

std::vector<std::pair<int, int>> boundary_pixels(const Tensor<float>& mask) {
    if (mask.rank() != 2)
        throw std::invalid_argument("boundary_pixels: expected a [H,W] mask, got " + shape_string(mask.shape()));
    check_binary("boundary_pixels", mask);
    const int h = mask.dim(0), w = mask.dim(1);
    const auto fg = [&](int r, int c) { return mask.data()[static_cast<std::int64_t>(r) * w + c] != 0.0f; };
    std::vector<std::pair<int, int>> out;
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            if (!fg(r, c)) continue;
            const bool edge = r == 0 || c == 0 || r == h - 1 || c == w - 1;
            if (edge || !fg(r - 1, c) || !fg(r + 1, c) || !fg(r, c - 1) || !fg(r, c + 1)) out.emplace_back(r, c);
        }
    }
    return out;
}

namespace {

double directed_hausdorff_sq(const std::vector<std::pair<int, int>>& from,
                             const std::vector<std::pair<int, int>>& to) {
    double worst = 0.0;
    for (const auto& [r, c] : from) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& [r2, c2] : to) {
            const double dr = r - r2, dc = c - c2;
            best = std::min(best, dr * dr + dc * dc);
            if (best == 0.0) break;
        }
        worst = std::max(worst, best);
    }
    return worst;
}

}  // namespace

double hausdorff(const Tensor<float>& a, const Tensor<float>& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("hausdorff: shape mismatch " + shape_string(a.shape()) + " vs " +
                                    shape_string(b.shape()));
    const auto ba = boundary_pixels(a);
    const auto bb = boundary_pixels(b);
    if (ba.empty() || bb.empty()) throw std::invalid_argument("hausdorff: undefined for an empty mask");
    return std::sqrt(std::max(directed_hausdorff_sq(ba, bb), directed_hausdorff_sq(bb, ba)));
}

ClassificationReport classification_report(const std::vector<int>& predictions, const std::vector<int>& labels) {
    if (predictions.empty()) throw std::invalid_argument("classification_report: empty input");
    if (predictions.size() != labels.size())
        throw std::invalid_argument("classification_report: " + std::to_string(predictions.size()) +
                                    " predictions vs " + std::to_string(labels.size()) + " labels");
    check_labels("classification_report", predictions);
    check_labels("classification_report", labels);
    ClassificationReport r;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == 1)
            (predictions[i] == 1 ? r.tp : r.fn) += 1;
        else
            (predictions[i] == 0 ? r.tn : r.fp) += 1;
    }
    return r;
}

}  // namespace nodnet
