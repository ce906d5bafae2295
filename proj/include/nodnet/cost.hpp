#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nodnet/network.hpp"

namespace nodnet {

struct CostRow {
    std::string name;
    long long params = 0;  // trainable scalars (batch-norm running stats excluded)
    long long macs = 0;    // multiply-accumulates
    long long flops = 0;   // 2*MACs for conv/linear; 1 per output element for pool/activation/norm
    Shape out_shape;       // without the batch axis
};

struct CostReport {
    std::string network;
    Shape input_shape;
    bool macs_only = false;  // FLOPs column reports MACs for conv/linear instead of 2*MACs
    std::vector<CostRow> rows;
    long long total_params = 0, total_macs = 0, total_flops = 0;
};

/// Static per-layer parameter/MAC/FLOP accounting for one sample of the
/// spec's declared input shape. Conv params in*out*k^2+out, linear
/// in*out+out, batch-norm 2*ch trainable. Conv MACs out_H*out_W*out_ch*
/// in_ch*k^2, linear in*out. Non-MAC layers count 1 FLOP per output element;
/// pure data movement (flatten, concat, repeat, unpool placement) counts 0.
CostReport analyze_cost(const NetworkSpec& spec, bool macs_only = false);

long long count_params(const NetworkSpec& spec);

/// Literal enumeration of every trainable scalar in a materialized store;
/// must equal count_params exactly.
template <typename S>
long long brute_force_param_oracle(const WeightStore<S>& store) {
    long long n = 0;
    store.for_each([&](int, ParamRole role, const Tensor<S>& t) {
        if (is_trainable(role)) n += t.numel();
    });
    return n;
}

/// Aligned text table with the counting conventions stated in the header.
std::string render_cost_table(const CostReport& report);

/// CSV: layer,params,macs,flops,out_shape + totals row.
std::string render_cost_csv(const CostReport& report);

}  // namespace nodnet
