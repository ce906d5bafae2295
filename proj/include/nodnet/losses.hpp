#pragma once

#include <cmath>
#include <vector>

#include "nodnet/ops.hpp"

namespace nodnet {

/// Probabilities are clamped this far from {0,1} inside every cross-entropy,
/// which bounds the losses near saturation.
inline constexpr double kProbClamp = 1e-7;

/// Mean binary cross-entropy between a probability map and a binary target
/// of the same shape. Gradients flow to `pred` only; clamped coordinates get
/// zero gradient.
template <typename S>
Tensor<S> seg_loss(const Tensor<S>& pred, const Tensor<S>& target) {
    detail::check_same_shape("seg_loss", pred, target);
    if (pred.empty()) throw std::invalid_argument("seg_loss: empty tensors");
    const S lo = static_cast<S>(kProbClamp), hi = static_cast<S>(1.0 - kProbClamp);
    double acc = 0.0;
    for (std::int64_t i = 0; i < pred.numel(); ++i) {
        const S p = std::min(hi, std::max(lo, pred.data()[i]));
        const S t = target.data()[i];
        acc -= t * std::log(p) + (S(1) - t) * std::log(S(1) - p);
    }
    const std::int64_t n = pred.numel();
    Tensor<S> out = Tensor<S>::scalar(static_cast<S>(acc / static_cast<double>(n)));
    if (auto* tape = Tape<S>::current(); tape && pred.requires_grad()) {
        out.set_requires_grad(true);
        auto pi = pred.impl(), ti = target.impl(), oi = out.impl();
        tape->record(oi, [pi, ti, oi, lo, hi, n] {
            if (oi->grad.empty()) return;
            detail::ensure_grad(*pi);
            const S g = oi->grad[0] / static_cast<S>(n);
            for (std::size_t i = 0; i < pi->value.size(); ++i) {
                const S p = pi->value[i];
                if (p <= lo || p >= hi) continue;  // clamped: flat
                pi->grad[i] += g * (p - ti->value[i]) / (p * (S(1) - p));
            }
        });
    }
    return out;
}

/// Cross-entropy between predicted class probabilities and one-hot targets:
/// -sum_i t[i] log p[i], averaged over rows for a batched [N,K] input.
/// Rows must already be normalized (post-softmax); a row sum off by more
/// than 1e-5 is rejected.
template <typename S>
Tensor<S> adv_loss(const Tensor<S>& probs, const Tensor<S>& target) {
    detail::check_same_shape("adv_loss", probs, target);
    if (probs.rank() < 1 || probs.rank() > 2)
        throw std::invalid_argument("adv_loss: expected [K] or [N,K], got " + shape_string(probs.shape()));
    const int n = probs.rank() == 2 ? probs.dim(0) : 1;
    const int k = probs.rank() == 2 ? probs.dim(1) : probs.dim(0);
    const S lo = static_cast<S>(kProbClamp), hi = static_cast<S>(1.0 - kProbClamp);
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        double row_sum = 0.0;
        for (int j = 0; j < k; ++j) {
            const S p = probs.data()[static_cast<std::int64_t>(i) * k + j];
            if (p < S(0) || p > S(1))
                throw std::invalid_argument("adv_loss: probability " + std::to_string(static_cast<double>(p)) +
                                            " outside [0,1]");
            row_sum += p;
        }
        if (std::abs(row_sum - 1.0) > 1e-5)
            throw std::invalid_argument("adv_loss: probabilities sum to " + std::to_string(row_sum) +
                                        ", expected 1 within 1e-5");
        for (int j = 0; j < k; ++j) {
            const std::int64_t at = static_cast<std::int64_t>(i) * k + j;
            const S p = std::min(hi, std::max(lo, probs.data()[at]));
            acc -= target.data()[at] * std::log(p);
        }
    }
    Tensor<S> out = Tensor<S>::scalar(static_cast<S>(acc / n));
    if (auto* tape = Tape<S>::current(); tape && probs.requires_grad()) {
        out.set_requires_grad(true);
        auto pi = probs.impl(), ti = target.impl(), oi = out.impl();
        tape->record(oi, [pi, ti, oi, lo, hi, n] {
            if (oi->grad.empty()) return;
            detail::ensure_grad(*pi);
            const S g = oi->grad[0] / static_cast<S>(n);
            for (std::size_t i = 0; i < pi->value.size(); ++i) {
                const S p = pi->value[i];
                if (p <= lo || p >= hi) continue;
                pi->grad[i] -= g * ti->value[i] / p;
            }
        });
    }
    return out;
}

/// Two-or-more-class cross-entropy against integer labels, mean over the
/// batch. probs is [N,K] post-softmax.
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& probs, const std::vector<int>& labels) {
    detail::check_rank("cross_entropy", probs, 2);
    const int n = probs.dim(0), k = probs.dim(1);
    if (static_cast<int>(labels.size()) != n)
        throw std::invalid_argument("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                                    std::to_string(n));
    Tensor<S> onehot(Shape{n, k});
    for (int i = 0; i < n; ++i) {
        if (labels[i] < 0 || labels[i] >= k)
            throw std::invalid_argument("cross_entropy: label " + std::to_string(labels[i]) + " outside [0, " +
                                        std::to_string(k) + ")");
        onehot.data()[static_cast<std::int64_t>(i) * k + labels[i]] = S(1);
    }
    return adv_loss(probs, onehot);
}

}  // namespace nodnet
