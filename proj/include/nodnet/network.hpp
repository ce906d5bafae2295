#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "nodnet/ops.hpp"
#include "nodnet/rng.hpp"
#include "nodnet/serialize.hpp"
#include "nodnet/tensor.hpp"

namespace nodnet {

// ---------------------------------------------------------------------------
// Declarative layer graph. Pool layers export their argmax indices AND their
// pre-pool activation under `tag`; MaxUnpool2x2 consumes the indices, and
// ConcatChannels appends the saved activation (the skip connections of the
// segmenter).
// ---------------------------------------------------------------------------

struct Conv2dSpec {
    int in_ch, out_ch, kernel;
    int stride = 1, padding = 0;
};
struct BatchNorm2dSpec {
    int ch;
    double epsilon = 1e-5;
    double momentum = 0.1;
};
struct ReLUSpec {};
struct SigmoidSpec {};
struct SoftmaxSpec {};
struct MaxPool2x2Spec {
    int tag;
};
struct MaxUnpool2x2Spec {
    int tag;
};
struct ConcatSpec {
    int tag;
};
struct LinearSpec {
    int in_features, out_features;
};
struct FlattenSpec {};
struct RepeatChannelsSpec {
    int times;
};

using LayerSpec = std::variant<Conv2dSpec, BatchNorm2dSpec, ReLUSpec, SigmoidSpec, SoftmaxSpec, MaxPool2x2Spec,
                               MaxUnpool2x2Spec, ConcatSpec, LinearSpec, FlattenSpec, RepeatChannelsSpec>;

struct Layer {
    std::string name;
    LayerSpec spec;
};

enum class OutputKind { PixelMap, ClassScores };
enum class Scale { Tiny, Full };

struct NetworkSpec {
    std::string name;
    Shape input_shape;  // {C, H, W}, batch-agnostic
    OutputKind output = OutputKind::PixelMap;
    std::vector<Layer> layers;
};

/// Per-layer output shapes (without the batch axis) for the spec's declared
/// input. Throws std::invalid_argument naming the offending layer when
/// channel counts or tag links are inconsistent.
std::vector<Shape> infer_shapes(const NetworkSpec& spec);

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

enum class ParamRole : std::uint8_t {
    Weight = 0,
    Bias = 1,
    Gamma = 2,
    Beta = 3,
    RunningMean = 4,
    RunningVar = 5,
};

inline const char* to_string(ParamRole role) {
    switch (role) {
        case ParamRole::Weight: return "weight";
        case ParamRole::Bias: return "bias";
        case ParamRole::Gamma: return "gamma";
        case ParamRole::Beta: return "beta";
        case ParamRole::RunningMean: return "running_mean";
        case ParamRole::RunningVar: return "running_var";
    }
    return "?";
}

inline bool is_trainable(ParamRole role) {
    return role != ParamRole::RunningMean && role != ParamRole::RunningVar;
}

template <typename S>
struct LayerParams {
    std::optional<Tensor<S>> weight, bias, gamma, beta, running_mean, running_var;

    std::optional<Tensor<S>>& by_role(ParamRole role) {
        switch (role) {
            case ParamRole::Weight: return weight;
            case ParamRole::Bias: return bias;
            case ParamRole::Gamma: return gamma;
            case ParamRole::Beta: return beta;
            case ParamRole::RunningMean: return running_mean;
            case ParamRole::RunningVar: return running_var;
        }
        return weight;
    }
};

inline constexpr ParamRole kAllRoles[] = {ParamRole::Weight, ParamRole::Bias,        ParamRole::Gamma,
                                          ParamRole::Beta,   ParamRole::RunningMean, ParamRole::RunningVar};

template <typename S>
struct WeightStore {
    std::map<int, LayerParams<S>> layers;
    std::map<int, std::string> names;  // layer index -> layer name, for reports and errors

    /// Visits tensors in (layer, role) order — the deterministic order every
    /// optimizer step and serialization pass relies on.
    template <typename F>
    void for_each(F&& fn) {
        for (auto& [idx, params] : layers)
            for (ParamRole role : kAllRoles)
                if (auto& t = params.by_role(role); t.has_value()) fn(idx, role, *t);
    }
    template <typename F>
    void for_each(F&& fn) const {
        for (auto& [idx, params] : layers)
            for (ParamRole role : kAllRoles)
                if (auto& t = const_cast<LayerParams<S>&>(params).by_role(role); t.has_value())
                    fn(idx, role, const_cast<const Tensor<S>&>(*t));
    }
    template <typename F>
    void for_each_trainable(F&& fn) {
        for_each([&](int idx, ParamRole role, Tensor<S>& t) {
            if (is_trainable(role)) fn(idx, role, t);
        });
    }

    std::string layer_label(int idx) const {
        auto it = names.find(idx);
        return it != names.end() ? it->second : ("layer " + std::to_string(idx));
    }

    void zero_grad() {
        for_each([](int, ParamRole, Tensor<S>& t) { t.zero_grad(); });
    }

    WeightStore clone() const {
        WeightStore out;
        out.names = names;
        for (auto& [idx, params] : layers)
            for (ParamRole role : kAllRoles)
                if (auto& t = const_cast<LayerParams<S>&>(params).by_role(role); t.has_value())
                    out.layers[idx].by_role(role) = t->clone();
        return out;
    }
};

/// Fan-in scaled random init: conv/linear weights ~ N(0, 2/fan_in), biases 0,
/// batch-norm gamma 1 / beta 0, running stats (0, 1). Same seed, same bits.
template <typename S>
WeightStore<S> init_weights(const NetworkSpec& spec, std::uint64_t seed) {
    infer_shapes(spec);  // validates the graph before materializing anything
    WeightStore<S> store;
    Rng rng(mix64(seed ^ hash64("init")));
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const int idx = static_cast<int>(i);
        if (const auto* conv = std::get_if<Conv2dSpec>(&spec.layers[i].spec)) {
            const double std_dev = std::sqrt(2.0 / (static_cast<double>(conv->in_ch) * conv->kernel * conv->kernel));
            Tensor<S> w(Shape{conv->out_ch, conv->in_ch, conv->kernel, conv->kernel});
            for (auto& v : w.data()) v = static_cast<S>(rng.normal() * std_dev);
            store.layers[idx].weight = w.set_requires_grad(true);
            store.layers[idx].bias = Tensor<S>(Shape{conv->out_ch}, S(0), true);
            store.names[idx] = spec.layers[i].name;
        } else if (const auto* lin = std::get_if<LinearSpec>(&spec.layers[i].spec)) {
            const double std_dev = std::sqrt(2.0 / static_cast<double>(lin->in_features));
            Tensor<S> w(Shape{lin->in_features, lin->out_features});
            for (auto& v : w.data()) v = static_cast<S>(rng.normal() * std_dev);
            store.layers[idx].weight = w.set_requires_grad(true);
            store.layers[idx].bias = Tensor<S>(Shape{lin->out_features}, S(0), true);
            store.names[idx] = spec.layers[i].name;
        } else if (const auto* bn = std::get_if<BatchNorm2dSpec>(&spec.layers[i].spec)) {
            store.layers[idx].gamma = Tensor<S>(Shape{bn->ch}, S(1), true);
            store.layers[idx].beta = Tensor<S>(Shape{bn->ch}, S(0), true);
            store.layers[idx].running_mean = Tensor<S>(Shape{bn->ch}, S(0));
            store.layers[idx].running_var = Tensor<S>(Shape{bn->ch}, S(1));
            store.names[idx] = spec.layers[i].name;
        }
    }
    return store;
}

// ---------------------------------------------------------------------------
// ".wts" weight file: magic "WTS1", u32 entry count, then per entry
// u32 layer index, u8 role code, embedded ".ten" tensor.
// ---------------------------------------------------------------------------

template <typename S>
void save_weights(const WeightStore<S>& store, const std::string& path) {
    std::ostringstream ss(std::ios::binary);
    std::uint32_t count = 0;
    store.for_each([&](int, ParamRole, const Tensor<S>&) { ++count; });
    ss.write("WTS1", 4);
    detail::write_le<std::uint32_t>(ss, count);
    store.for_each([&](int idx, ParamRole role, const Tensor<S>& t) {
        detail::write_le<std::uint32_t>(ss, static_cast<std::uint32_t>(idx));
        detail::write_le<std::uint8_t>(ss, static_cast<std::uint8_t>(role));
        write_ten(ss, t);
    });
    atomic_write_file(path, ss.str());
}

template <typename S>
WeightStore<S> load_weights(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "WTS1", 4) != 0) throw DataError("bad weight-file magic (expected WTS1) in " + path);
    const std::uint32_t count = detail::read_le<std::uint32_t>(in, "weight entry count");
    WeightStore<S> store;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto idx = static_cast<int>(detail::read_le<std::uint32_t>(in, "layer index"));
        const auto role_code = detail::read_le<std::uint8_t>(in, "param role");
        if (role_code > static_cast<std::uint8_t>(ParamRole::RunningVar))
            throw DataError("unknown param role code " + std::to_string(role_code) + " in " + path);
        const auto role = static_cast<ParamRole>(role_code);
        Tensor<S> t = read_ten<S>(in);
        t.set_requires_grad(is_trainable(role));
        store.layers[idx].by_role(role) = std::move(t);
    }
    return store;
}

/// Checks that `store` provides exactly the parameters `spec` requires, with
/// matching shapes. Used after load_weights before running a network.
template <typename S>
void check_weights(const NetworkSpec& spec, const WeightStore<S>& store);

// ---------------------------------------------------------------------------
// Forward execution
// ---------------------------------------------------------------------------

/// Runs the layer graph on a [N,C,H,W] batch. Records on the active tape
/// whenever store parameters (or the input) require gradients.
template <typename S>
Tensor<S> forward(const NetworkSpec& spec, WeightStore<S>& store, const Tensor<S>& input, Phase phase) {
    detail::check_rank("forward input", input, 4);
    if (input.dim(1) != spec.input_shape[0] || input.dim(2) != spec.input_shape[1] ||
        input.dim(3) != spec.input_shape[2])
        throw std::invalid_argument("forward: input " + shape_string(input.shape()) + " does not match " + spec.name +
                                    " input " + shape_string(spec.input_shape));
    std::map<int, Tensor<S>> saved_act;
    std::map<int, IndexArray> saved_idx;
    std::map<int, Shape> saved_shape;
    Tensor<S> x = input;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const int idx = static_cast<int>(i);
        const auto fail = [&](const std::string& msg) {
            throw std::invalid_argument("forward: " + spec.name + " layer " + std::to_string(idx) + " (" +
                                        spec.layers[i].name + "): " + msg);
        };
        std::visit(
            [&](const auto& layer) {
                using L = std::decay_t<decltype(layer)>;
                if constexpr (std::is_same_v<L, Conv2dSpec>) {
                    auto& p = store.layers.at(idx);
                    x = conv2d(x, *p.weight, *p.bias, layer.stride, layer.padding);
                } else if constexpr (std::is_same_v<L, BatchNorm2dSpec>) {
                    auto& p = store.layers.at(idx);
                    x = batchnorm2d(x, *p.gamma, *p.beta, *p.running_mean, *p.running_var, phase, layer.momentum,
                                    layer.epsilon);
                } else if constexpr (std::is_same_v<L, ReLUSpec>) {
                    x = relu(x);
                } else if constexpr (std::is_same_v<L, SigmoidSpec>) {
                    x = sigmoid(x);
                } else if constexpr (std::is_same_v<L, SoftmaxSpec>) {
                    x = softmax_channels(x);
                } else if constexpr (std::is_same_v<L, MaxPool2x2Spec>) {
                    saved_act.insert_or_assign(layer.tag, x);
                    saved_shape.insert_or_assign(layer.tag, x.shape());
                    auto pooled = maxpool2x2_with_indices(x);
                    saved_idx.insert_or_assign(layer.tag, pooled.indices);
                    x = pooled.values;
                } else if constexpr (std::is_same_v<L, MaxUnpool2x2Spec>) {
                    auto it = saved_idx.find(layer.tag);
                    if (it == saved_idx.end()) fail("unpool tag " + std::to_string(layer.tag) + " has no earlier pool");
                    x = max_unpool2x2(x, it->second, saved_shape.at(layer.tag));
                } else if constexpr (std::is_same_v<L, ConcatSpec>) {
                    auto it = saved_act.find(layer.tag);
                    if (it == saved_act.end()) fail("concat tag " + std::to_string(layer.tag) + " has no saved activation");
                    x = concat_channels(x, it->second);
                } else if constexpr (std::is_same_v<L, LinearSpec>) {
                    auto& p = store.layers.at(idx);
                    x = linear(x, *p.weight, *p.bias);
                } else if constexpr (std::is_same_v<L, FlattenSpec>) {
                    x = flatten(x);
                } else if constexpr (std::is_same_v<L, RepeatChannelsSpec>) {
                    x = repeat_channels(x, layer.times);
                }
            },
            spec.layers[i].spec);
    }
    return x;
}

template <typename S>
void check_weights(const NetworkSpec& spec, const WeightStore<S>& store) {
    const auto require = [&](int idx, ParamRole role, const Shape& shape) {
        auto it = store.layers.find(idx);
        const auto* t = it == store.layers.end()
                            ? nullptr
                            : const_cast<LayerParams<S>&>(it->second).by_role(role).has_value()
                                  ? &*const_cast<LayerParams<S>&>(it->second).by_role(role)
                                  : nullptr;
        if (!t)
            throw DataError("weight store missing " + std::string(to_string(role)) + " for " + spec.name + " layer " +
                            std::to_string(idx) + " (" + spec.layers[idx].name + ")");
        if (t->shape() != shape)
            throw DataError("weight store " + std::string(to_string(role)) + " for layer " + std::to_string(idx) +
                            " has shape " + shape_string(t->shape()) + ", expected " + shape_string(shape));
    };
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const int idx = static_cast<int>(i);
        if (const auto* conv = std::get_if<Conv2dSpec>(&spec.layers[i].spec)) {
            require(idx, ParamRole::Weight, {conv->out_ch, conv->in_ch, conv->kernel, conv->kernel});
            require(idx, ParamRole::Bias, {conv->out_ch});
        } else if (const auto* lin = std::get_if<LinearSpec>(&spec.layers[i].spec)) {
            require(idx, ParamRole::Weight, {lin->in_features, lin->out_features});
            require(idx, ParamRole::Bias, {lin->out_features});
        } else if (const auto* bn = std::get_if<BatchNorm2dSpec>(&spec.layers[i].spec)) {
            require(idx, ParamRole::Gamma, {bn->ch});
            require(idx, ParamRole::Beta, {bn->ch});
            require(idx, ParamRole::RunningMean, {bn->ch});
            require(idx, ParamRole::RunningVar, {bn->ch});
        }
    }
}

// ---------------------------------------------------------------------------
// Network builders
// ---------------------------------------------------------------------------

/// Encoder-decoder segmenter: VGG16-pattern encoder (13 convs in 5 blocks at
/// full scale, each conv + BatchNorm + ReLU, index-exporting pools between
/// blocks), mirrored decoder driven by the recorded pool indices with the
/// pre-pool encoder activation concatenated at each block entry, final
/// 1-channel sigmoid map. Tiny scale: channel widths / 8, one fewer encoder
/// block, 64x64 input.
NetworkSpec build_segmenter(Scale scale);

/// Turing-test discriminator on a [2,H,W] stack: conv(k4,s2,p1)+BN+ReLU
/// stages halving the spatial dims to <= 4x4, then flatten + linear to two
/// softmax scores. Widths 16/32/64 then capped (64/128/256 capped at full).
NetworkSpec build_discriminator(Scale scale);

/// Patch classifier on 1x64x64 inputs, LeNet pattern with a third k5 conv,
/// an extra 256-unit fully connected layer, and a 2-way softmax head.
/// Class order of the output: index 0 = C1 (nodule), index 1 = C2.
NetworkSpec build_classifier();

/// The 13-conv VGG16 feature stack (3x224x224 input); reference network for
/// the cost analyzer.
NetworkSpec build_vgg16_conv_stack();

}  // namespace nodnet
