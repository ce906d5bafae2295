#include "nodnet/rise.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "nodnet/rng.hpp"
#include "nodnet/serialize.hpp"

namespace nodnet {

void RiseConfig::validate(int patch_side) const {
    if (mask_count < 1) throw std::invalid_argument("RiseConfig: mask_count must be >= 1");
    if (grid < 1 || grid >= patch_side)
        throw std::invalid_argument("RiseConfig: grid must lie in [1, patch side), got " + std::to_string(grid));
    if (!(keep_probability > 0.0 && keep_probability < 1.0))
        throw std::invalid_argument("RiseConfig: keep_probability must lie in (0,1)");
    if (batch_size < 1) throw std::invalid_argument("RiseConfig: batch_size must be >= 1");
}

namespace {

// bilinear resize with the pixel-center convention; border samples clamp
void bilinear_resize(const std::vector<float>& src, int sh, int sw, std::vector<float>& dst, int dh, int dw) {
    dst.resize(static_cast<std::size_t>(dh) * dw);
    const double sy = static_cast<double>(sh) / dh, sx = static_cast<double>(sw) / dw;
    for (int y = 0; y < dh; ++y) {
        const double fy = (y + 0.5) * sy - 0.5;
        const int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, sh - 1);
        const int y1 = std::min(y0 + 1, sh - 1);
        const double wy = std::clamp(fy - y0, 0.0, 1.0);
        for (int x = 0; x < dw; ++x) {
            const double fx = (x + 0.5) * sx - 0.5;
            const int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, sw - 1);
            const int x1 = std::min(x0 + 1, sw - 1);
            const double wx = std::clamp(fx - x0, 0.0, 1.0);
            const double top = src[static_cast<std::size_t>(y0) * sw + x0] * (1.0 - wx) +
                               src[static_cast<std::size_t>(y0) * sw + x1] * wx;
            const double bot = src[static_cast<std::size_t>(y1) * sw + x0] * (1.0 - wx) +
                               src[static_cast<std::size_t>(y1) * sw + x1] * wx;
            dst[static_cast<std::size_t>(y) * dw + x] = static_cast<float>(top * (1.0 - wy) + bot * wy);
        }
    }
}

}  // namespace

std::vector<Tensor<float>> generate_masks(const RiseConfig& config, int height, int width) {
    config.validate(std::min(height, width));
    Rng rng(mix64(config.seed ^ hash64("rise-masks")));
    const int s = config.grid;
    const int cell_h = (height + s - 1) / s, cell_w = (width + s - 1) / s;
    const int up_h = (s + 1) * cell_h, up_w = (s + 1) * cell_w;

    std::vector<Tensor<float>> masks;
    masks.reserve(static_cast<std::size_t>(config.mask_count));
    std::vector<float> grid(static_cast<std::size_t>(s) * s), up;
    for (int m = 0; m < config.mask_count; ++m) {
        for (auto& g : grid) g = rng.bernoulli(config.keep_probability) ? 1.0f : 0.0f;
        const int dy = rng.uniform_int(0, cell_h - 1);
        const int dx = rng.uniform_int(0, cell_w - 1);
        bilinear_resize(grid, s, s, up, up_h, up_w);
        Tensor<float> mask(Shape{height, width});
        for (int y = 0; y < height; ++y)
            std::copy_n(up.data() + static_cast<std::size_t>(y + dy) * up_w + dx, width,
                        mask.data().data() + static_cast<std::int64_t>(y) * width);
        masks.push_back(std::move(mask));
    }
    return masks;
}

Tensor<float> rise_saliency(const ScoreModel& model, const Tensor<float>& patch, const RiseConfig& config) {
    if (patch.rank() != 2)
        throw std::invalid_argument("rise_saliency: expected a [H,W] patch, got " + shape_string(patch.shape()));
    const int h = patch.dim(0), w = patch.dim(1);
    const auto masks = generate_masks(config, h, w);
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;

    std::vector<double> accum(static_cast<std::size_t>(plane), 0.0);
    for (std::size_t begin = 0; begin < masks.size(); begin += static_cast<std::size_t>(config.batch_size)) {
        const std::size_t end = std::min(masks.size(), begin + static_cast<std::size_t>(config.batch_size));
        const int n = static_cast<int>(end - begin);
        Tensor<float> batch(Shape{n, 1, h, w});
        for (int i = 0; i < n; ++i) {
            float* dst = batch.data().data() + static_cast<std::int64_t>(i) * plane;
            const float* m = masks[begin + i].data().data();
            for (std::int64_t j = 0; j < plane; ++j) dst[j] = patch.data()[j] * m[j];
        }
        const Tensor<float> probs = model(batch);
        if (probs.rank() != 2 || probs.dim(0) != n || probs.dim(1) < 2)
            throw std::invalid_argument("rise_saliency: model output " + shape_string(probs.shape()) +
                                        " is not an [N,K>=2] probability matrix");
        const int k = probs.dim(1);
        for (int i = 0; i < n; ++i) {
            double row_sum = 0.0;
            for (int j = 0; j < k; ++j) {
                const float p = probs.data()[static_cast<std::int64_t>(i) * k + j];
                if (p < -1e-6f || p > 1.0f + 1e-6f)
                    throw std::invalid_argument("rise_saliency: model output " + std::to_string(p) +
                                                " is not a probability");
                row_sum += p;
            }
            if (std::abs(row_sum - 1.0) > 1e-4)
                throw std::invalid_argument("rise_saliency: model output rows must sum to 1, got " +
                                            std::to_string(row_sum));
            const double score = probs.data()[static_cast<std::int64_t>(i) * k];  // class C1
            const float* m = masks[begin + i].data().data();
            for (std::int64_t j = 0; j < plane; ++j) accum[static_cast<std::size_t>(j)] += score * m[j];
        }
    }

    const double norm = 1.0 / (static_cast<double>(config.mask_count) * config.keep_probability);
    Tensor<float> map(Shape{h, w});
    for (std::int64_t j = 0; j < plane; ++j)
        map.data()[j] = static_cast<float>(accum[static_cast<std::size_t>(j)] * norm);
    return map;
}

ScoreModel classifier_model(const NetworkSpec& spec, WeightStore<float>& store) {
    // the spec and store must outlive the returned callable
    return [&spec, &store](const Tensor<float>& batch) {
        NoRecordScope<float> quiet;
        return forward(spec, store, batch, Phase::Eval);
    };
}

void write_saliency_csv(const Tensor<float>& map, const std::string& path) {
    if (map.rank() != 2)
        throw std::invalid_argument("write_saliency_csv: expected [H,W], got " + shape_string(map.shape()));
    std::string out = "row,col,score\n";
    char buf[64];
    for (int r = 0; r < map.dim(0); ++r)
        for (int c = 0; c < map.dim(1); ++c) {
            std::snprintf(buf, sizeof(buf), "%d,%d,%.9g\n", r, c, static_cast<double>(map.at(r, c)));
            out += buf;
        }
    atomic_write_file(path, out);
}

}  // namespace nodnet
