#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "nodnet/errors.hpp"
#include "nodnet/tensor.hpp"

namespace nodnet {

template <typename S>
class NoRecordScope;

/// Execution-order record of differentiable operations. Constructing a Tape
/// installs it as the recording target for the current thread; ops record a
/// node whenever any of their inputs requires gradients. backward() replays
/// the closures in reverse order. Gradients accumulate: calling backward()
/// again without reset() adds another pass on top of the existing grads.
template <typename S>
class Tape {
  public:
    Tape() : prev_(current_) { current_ = this; }
    ~Tape() { current_ = prev_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current() noexcept { return current_; }

    void record(std::shared_ptr<detail::TensorImpl<S>> out, std::function<void()> backprop) {
        outputs_.insert(out.get());
        nodes_.push_back(Node{std::move(out), std::move(backprop)});
    }

    void backward(const Tensor<S>& loss) {
        if (loss.numel() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_string(loss.shape()));
        if (!loss.requires_grad() || !produced(loss))
            throw std::invalid_argument("backward: loss is detached from this tape");
        // Cotangents of node outputs are per-pass scratch; only leaves (which
        // are never node outputs) accumulate across passes.
        for (auto& node : nodes_)
            if (!node.out->grad.empty()) node.out->grad.assign(node.out->grad.size(), S(0));
        Tensor<S> seed = loss;  // non-const view of the same storage
        seed.grad()[0] = S(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backprop();
    }

    void reset() {
        nodes_.clear();
        outputs_.clear();
    }

    std::size_t size() const { return nodes_.size(); }

    bool produced(const Tensor<S>& t) const { return outputs_.count(t.impl().get()) > 0; }

  private:
    friend class NoRecordScope<S>;

    struct Node {
        std::shared_ptr<detail::TensorImpl<S>> out;
        std::function<void()> backprop;
    };

    std::vector<Node> nodes_;
    std::unordered_set<const void*> outputs_;
    Tape* prev_ = nullptr;
    static thread_local Tape* current_;
};

template <typename S>
thread_local Tape<S>* Tape<S>::current_ = nullptr;

/// Suspends tape recording for the enclosing scope (frozen forward passes,
/// finite-difference evaluations).
template <typename S>
class NoRecordScope {
  public:
    NoRecordScope() : saved_(Tape<S>::current_) { Tape<S>::current_ = nullptr; }
    ~NoRecordScope() { Tape<S>::current_ = saved_; }
    NoRecordScope(const NoRecordScope&) = delete;
    NoRecordScope& operator=(const NoRecordScope&) = delete;

  private:
    Tape<S>* saved_;
};

/// Central-difference check of reverse-mode gradients. `f` must map a tensor
/// to a scalar tensor using ops that record on the active tape. Returns
/// max over coordinates of |analytic - central difference| / max(1, |analytic|).
/// Run in double; finite differences are unreliable in float.
inline double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                         const Tensor<double>& point, double epsilon = 1e-5) {
    if (!(epsilon >= 1e-7 && epsilon <= 1e-3))
        throw std::invalid_argument("grad_check: epsilon must lie in [1e-7, 1e-3]");

    Tensor<double> x = point.clone();
    x.set_requires_grad(true);
    std::vector<double> analytic;
    {
        Tape<double> tape;
        Tensor<double> y = f(x);
        tape.backward(y);
        analytic.assign(x.grad().begin(), x.grad().end());
    }

    NoRecordScope<double> quiet;
    Tensor<double> probe = point.clone();
    double worst = 0.0;
    for (std::int64_t i = 0; i < probe.numel(); ++i) {
        const double saved = probe.data()[i];
        probe.data()[i] = saved + epsilon;
        const double up = f(probe).item();
        probe.data()[i] = saved - epsilon;
        const double down = f(probe).item();
        probe.data()[i] = saved;
        if (!std::isfinite(up) || !std::isfinite(down))
            throw NumericError("grad_check: non-finite function value at perturbed point");
        const double fd = (up - down) / (2.0 * epsilon);
        const double err = std::abs(analytic[static_cast<std::size_t>(i)] - fd) /
                           std::max(1.0, std::abs(analytic[static_cast<std::size_t>(i)]));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace nodnet
