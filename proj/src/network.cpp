#include "nodnet/network.hpp"

#include <algorithm>
#include <set>

namespace nodnet {

std::vector<Shape> infer_shapes(const NetworkSpec& spec) {
    if (spec.input_shape.size() != 3)
        throw std::invalid_argument(spec.name + ": input shape must be {C,H,W}, got " +
                                    shape_string(spec.input_shape));
    std::vector<Shape> out;
    out.reserve(spec.layers.size());
    Shape cur = spec.input_shape;
    std::map<int, Shape> pool_input;  // tag -> pre-pool {C,H,W}
    std::set<int> pool_tags;
    const auto fail = [&](std::size_t i, const std::string& msg) {
        throw std::invalid_argument(spec.name + " layer " + std::to_string(i) + " (" + spec.layers[i].name +
                                    "): " + msg);
    };
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        std::visit(
            [&](const auto& layer) {
                using L = std::decay_t<decltype(layer)>;
                if constexpr (std::is_same_v<L, Conv2dSpec>) {
                    if (cur.size() != 3) fail(i, "conv on non-spatial input " + shape_string(cur));
                    if (cur[0] != layer.in_ch)
                        fail(i, "expects " + std::to_string(layer.in_ch) + " channels, gets " + std::to_string(cur[0]));
                    const int oh = (cur[1] + 2 * layer.padding - layer.kernel) / layer.stride + 1;
                    const int ow = (cur[2] + 2 * layer.padding - layer.kernel) / layer.stride + 1;
                    if (cur[1] + 2 * layer.padding < layer.kernel || oh < 1 || ow < 1)
                        fail(i, "zero-size output from " + shape_string(cur));
                    cur = {layer.out_ch, oh, ow};
                } else if constexpr (std::is_same_v<L, BatchNorm2dSpec>) {
                    if (cur.size() != 3 || cur[0] != layer.ch)
                        fail(i, "batchnorm over " + std::to_string(layer.ch) + " channels on " + shape_string(cur));
                } else if constexpr (std::is_same_v<L, MaxPool2x2Spec>) {
                    if (cur.size() != 3) fail(i, "pool on non-spatial input");
                    if (cur[1] % 2 != 0 || cur[2] % 2 != 0) fail(i, "odd spatial dims " + shape_string(cur));
                    if (!pool_tags.insert(layer.tag).second)
                        fail(i, "duplicate pool tag " + std::to_string(layer.tag));
                    pool_input[layer.tag] = cur;
                    cur = {cur[0], cur[1] / 2, cur[2] / 2};
                } else if constexpr (std::is_same_v<L, MaxUnpool2x2Spec>) {
                    auto it = pool_input.find(layer.tag);
                    if (it == pool_input.end()) fail(i, "unpool tag " + std::to_string(layer.tag) + " has no pool");
                    const Shape& pre = it->second;
                    if (cur.size() != 3 || cur[0] != pre[0] || cur[1] * 2 != pre[1] || cur[2] * 2 != pre[2])
                        fail(i, "unpool input " + shape_string(cur) + " does not match pool input " +
                                    shape_string(pre));
                    cur = pre;
                } else if constexpr (std::is_same_v<L, ConcatSpec>) {
                    auto it = pool_input.find(layer.tag);
                    if (it == pool_input.end()) fail(i, "concat tag " + std::to_string(layer.tag) + " has no saved activation");
                    const Shape& pre = it->second;
                    if (cur.size() != 3 || cur[1] != pre[1] || cur[2] != pre[2])
                        fail(i, "concat of " + shape_string(cur) + " with " + shape_string(pre));
                    cur = {cur[0] + pre[0], cur[1], cur[2]};
                } else if constexpr (std::is_same_v<L, LinearSpec>) {
                    if (cur.size() != 1) fail(i, "linear on unflattened input " + shape_string(cur));
                    if (cur[0] != layer.in_features)
                        fail(i, "expects " + std::to_string(layer.in_features) + " features, gets " +
                                    std::to_string(cur[0]));
                    cur = {layer.out_features};
                } else if constexpr (std::is_same_v<L, FlattenSpec>) {
                    cur = {static_cast<int>(shape_numel(cur))};
                } else if constexpr (std::is_same_v<L, RepeatChannelsSpec>) {
                    if (cur.size() != 3) fail(i, "repeat_channels on non-spatial input");
                    cur = {cur[0] * layer.times, cur[1], cur[2]};
                } else if constexpr (std::is_same_v<L, SoftmaxSpec>) {
                    if (cur.size() != 1 && cur.size() != 3)
                        fail(i, "softmax on " + shape_string(cur));
                }
                // ReLU / Sigmoid keep the shape
            },
            spec.layers[i].spec);
        out.push_back(cur);
    }
    return out;
}

namespace {

void add_conv_bn_relu(NetworkSpec& net, const std::string& stem, int& ch, int out_ch, int kernel, int stride,
                      int padding) {
    net.layers.push_back({stem + "_conv", Conv2dSpec{ch, out_ch, kernel, stride, padding}});
    net.layers.push_back({stem + "_bn", BatchNorm2dSpec{out_ch}});
    net.layers.push_back({stem + "_relu", ReLUSpec{}});
    ch = out_ch;
}

}  // namespace

NetworkSpec build_segmenter(Scale scale) {
    const bool full = scale == Scale::Full;
    const std::vector<int> widths = full ? std::vector<int>{64, 128, 256, 512, 512} : std::vector<int>{8, 16, 32, 64};
    const std::vector<int> convs = full ? std::vector<int>{2, 2, 3, 3, 3} : std::vector<int>{2, 2, 3, 3};
    const int side = full ? 512 : 64;
    const int blocks = static_cast<int>(widths.size());

    NetworkSpec net;
    net.name = full ? "segmenter" : "segmenter_tiny";
    net.input_shape = {1, side, side};
    net.output = OutputKind::PixelMap;
    net.layers.push_back({"input_repeat", RepeatChannelsSpec{3}});

    int ch = 3;
    for (int b = 0; b < blocks; ++b) {
        const std::string block = "enc" + std::to_string(b + 1);
        for (int j = 0; j < convs[b]; ++j)
            add_conv_bn_relu(net, block + "_" + std::to_string(j + 1), ch, widths[b], 3, 1, 1);
        net.layers.push_back({"pool" + std::to_string(b + 1), MaxPool2x2Spec{b + 1}});
    }
    for (int b = blocks - 1; b >= 0; --b) {
        const std::string block = "dec" + std::to_string(b + 1);
        net.layers.push_back({"unpool" + std::to_string(b + 1), MaxUnpool2x2Spec{b + 1}});
        net.layers.push_back({"concat" + std::to_string(b + 1), ConcatSpec{b + 1}});
        ch = 2 * widths[b];
        for (int j = 0; j < convs[b]; ++j) {
            const int out_ch = (j == convs[b] - 1) ? widths[std::max(0, b - 1)] : widths[b];
            add_conv_bn_relu(net, block + "_" + std::to_string(j + 1), ch, out_ch, 3, 1, 1);
        }
    }
    net.layers.push_back({"out_conv", Conv2dSpec{widths[0], 1, 3, 1, 1}});
    net.layers.push_back({"out_sigmoid", SigmoidSpec{}});
    infer_shapes(net);
    return net;
}

NetworkSpec build_discriminator(Scale scale) {
    const bool full = scale == Scale::Full;
    const int side = full ? 512 : 64;
    const std::vector<int> widths = full ? std::vector<int>{64, 128, 256} : std::vector<int>{16, 32, 64};

    NetworkSpec net;
    net.name = full ? "discriminator" : "discriminator_tiny";
    net.input_shape = {2, side, side};
    net.output = OutputKind::ClassScores;

    int ch = 2, h = side, stage = 0;
    while (h > 4) {
        const int out_ch = widths[std::min<std::size_t>(stage, widths.size() - 1)];
        add_conv_bn_relu(net, "stage" + std::to_string(stage + 1), ch, out_ch, 4, 2, 1);
        h /= 2;
        ++stage;
    }
    net.layers.push_back({"flatten", FlattenSpec{}});
    net.layers.push_back({"fc", LinearSpec{ch * h * h, 2}});
    net.layers.push_back({"softmax", SoftmaxSpec{}});
    infer_shapes(net);
    return net;
}

NetworkSpec build_classifier() {
    NetworkSpec net;
    net.name = "classifier";
    net.input_shape = {1, 64, 64};
    net.output = OutputKind::ClassScores;

    int ch = 1;
    net.layers.push_back({"conv1", Conv2dSpec{ch, 6, 5, 1, 0}});
    net.layers.push_back({"relu1", ReLUSpec{}});
    net.layers.push_back({"pool1", MaxPool2x2Spec{1}});
    net.layers.push_back({"conv2", Conv2dSpec{6, 16, 5, 1, 1}});  // pad 1 keeps the pooling dims even
    net.layers.push_back({"relu2", ReLUSpec{}});
    net.layers.push_back({"pool2", MaxPool2x2Spec{2}});
    net.layers.push_back({"conv3", Conv2dSpec{16, 32, 5, 1, 0}});
    net.layers.push_back({"relu3", ReLUSpec{}});
    net.layers.push_back({"pool3", MaxPool2x2Spec{3}});
    net.layers.push_back({"flatten", FlattenSpec{}});
    net.layers.push_back({"fc1", LinearSpec{32 * 5 * 5, 256}});
    net.layers.push_back({"fc1_relu", ReLUSpec{}});
    net.layers.push_back({"fc2", LinearSpec{256, 2}});
    net.layers.push_back({"softmax", SoftmaxSpec{}});
    infer_shapes(net);
    return net;
}

NetworkSpec build_vgg16_conv_stack() {
    NetworkSpec net;
    net.name = "vgg16_convs";
    net.input_shape = {3, 224, 224};
    net.output = OutputKind::PixelMap;
    const int widths[] = {64, 128, 256, 512, 512};
    const int convs[] = {2, 2, 3, 3, 3};
    int ch = 3;
    for (int b = 0; b < 5; ++b) {
        for (int j = 0; j < convs[b]; ++j) {
            const std::string stem = "conv" + std::to_string(b + 1) + "_" + std::to_string(j + 1);
            net.layers.push_back({stem, Conv2dSpec{ch, widths[b], 3, 1, 1}});
            net.layers.push_back({stem + "_relu", ReLUSpec{}});
            ch = widths[b];
        }
        net.layers.push_back({"pool" + std::to_string(b + 1), MaxPool2x2Spec{b + 1}});
    }
    infer_shapes(net);
    return net;
}

}  // namespace nodnet
