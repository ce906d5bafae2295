#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nodnet/network.hpp"
#include "nodnet/tensor.hpp"

namespace nodnet {

struct RiseConfig {
    int mask_count = 1000;         // N
    int grid = 8;                  // s: low-res Bernoulli grid side
    double keep_probability = 0.5; // p1
    std::uint64_t seed = 0;
    int batch_size = 64;           // masked patches per model call

    void validate(int patch_side) const;
};

/// N masks in [0,1]^{HxW}: each an s x s Bernoulli(p1) grid bilinearly
/// upsampled with a random sub-cell shift.
std::vector<Tensor<float>> generate_masks(const RiseConfig& config, int height, int width);

/// Batched scorer: [N,1,H,W] -> [N,K] class probabilities (rows sum to 1).
using ScoreModel = std::function<Tensor<float>(const Tensor<float>&)>;

/// Importance map (1/(N*p1)) * sum_i f_C1(patch * M_i) * M_i, where f_C1 is
/// the model's probability for class C1 (output index 0). Accumulation order
/// is fixed, so a given seed always produces the same map.
Tensor<float> rise_saliency(const ScoreModel& model, const Tensor<float>& patch, const RiseConfig& config);

/// Adapter running the patch classifier in eval phase.
ScoreModel classifier_model(const NetworkSpec& spec, WeightStore<float>& store);

/// CSV of `row,col,score` for every pixel of a saliency map.
void write_saliency_csv(const Tensor<float>& map, const std::string& path);

}  // namespace nodnet
