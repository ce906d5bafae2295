#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <utility>
#include <vector>

#include "nodnet/errors.hpp"
#include "nodnet/network.hpp"

namespace nodnet {

struct AdamConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

template <typename S>
struct AdamState {
    struct Moments {
        std::vector<S> m, v;
    };
    std::map<std::pair<int, int>, Moments> moments;  // (layer index, role)
    std::int64_t step = 0;
};

/// One bias-corrected Adam update over every trainable tensor in the store,
/// in place. Tensors without an allocated gradient are treated as having
/// zero gradient (their moments still decay). Throws NumericError naming the
/// parameter on a non-finite gradient.
template <typename S>
void adam_step(WeightStore<S>& store, AdamState<S>& state, const AdamConfig& cfg) {
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    store.for_each_trainable([&](int idx, ParamRole role, Tensor<S>& param) {
        auto& mom = state.moments[{idx, static_cast<int>(role)}];
        if (mom.m.empty()) {
            mom.m.assign(param.data().size(), S(0));
            mom.v.assign(param.data().size(), S(0));
        }
        const bool has_grad = param.grad_allocated();
        auto values = param.data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double g = has_grad ? static_cast<double>(param.grad()[i]) : 0.0;
            if (!std::isfinite(g))
                throw NumericError("adam_step: non-finite gradient in " + store.layer_label(idx) + " " +
                                   to_string(role));
            const double m = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g;
            const double v = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g * g;
            mom.m[i] = static_cast<S>(m);
            mom.v[i] = static_cast<S>(v);
            const double m_hat = m / bc1;
            const double v_hat = v / bc2;
            values[i] -= static_cast<S>(cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon));
        }
    });
}

}  // namespace nodnet
