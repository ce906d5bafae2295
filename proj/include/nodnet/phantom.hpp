#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "nodnet/dataset.hpp"
#include "nodnet/mhd.hpp"
#include "nodnet/tensor.hpp"

namespace nodnet {

/// Synthetic chest-slice generator: a gray body disk, two dark lung
/// ellipses (the ground-truth lung mask), additive noise, and bright nodule
/// spheres placed inside the lungs, wall-attached with the configured
/// probability. Spacing is 1mm/px with zero offset, so annotation world
/// coordinates equal voxel coordinates.
struct PhantomConfig {
    int size = 64;    // square slice side, px
    int slices = 8;   // Z extent of the generated volume
    std::pair<double, double> body_intensity{0.50, 0.65};
    std::pair<double, double> lung_intensity{0.05, 0.18};
    std::pair<double, double> nodule_intensity{0.75, 0.95};
    std::pair<int, int> nodule_count{1, 3};
    std::pair<int, int> nodule_diameter_px{4, 10};
    double wall_attach_probability = 0.3;
    double noise_amplitude = 0.03;
    std::uint64_t seed = 0;

    void validate() const;
};

struct Phantom {
    Tensor<float> image;        // [Z,Y,X], values in [0,1]
    Tensor<float> lung_mask;    // [Z,Y,X], binary
    Tensor<float> nodule_mask;  // [Z,Y,X], binary (union of all nodules)
    std::vector<NoduleAnnotation> annotations;
    VolumeMeta meta;
};

/// Deterministic per (config.seed, series). Throws DataError with placement
/// diagnostics when a nodule cannot fit after retrying.
Phantom phantom_generate(const PhantomConfig& config, const std::string& series = "phantom");

}  // namespace nodnet
