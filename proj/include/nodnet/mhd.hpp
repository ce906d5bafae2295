#pragma once

#include <array>
#include <string>

#include "nodnet/tensor.hpp"

namespace nodnet {

enum class MhdElementType { Int16, Float32 };

/// MetaImage header fields. dims are in file order (X,Y,Z); voxel tensors
/// are [Z,Y,X].
struct VolumeMeta {
    std::array<int, 3> dims{0, 0, 0};
    std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm per voxel
    std::array<double, 3> offset{0.0, 0.0, 0.0};   // world mm of voxel (0,0,0)
    MhdElementType element_type = MhdElementType::Float32;
    std::string series;  // not part of the header; taken from the file stem
};

struct Volume {
    VolumeMeta meta;
    Tensor<float> voxels;  // [Z,Y,X]
};

/// Reads an .mhd header plus its .raw payload. Supports NDims 2 (read as a
/// single-slice volume) and 3, MET_SHORT and MET_FLOAT, little-endian data.
/// Unknown keys are ignored with a warning on stderr; a payload whose byte
/// count disagrees with DimSize is rejected naming both counts.
Volume read_mhd(const std::string& header_path);

/// Writes header and raw data (little-endian); the raw file sits next to the
/// header with extension .raw. Int16 output requires integral voxel values
/// in int16 range.
void write_mhd(const VolumeMeta& meta, const Tensor<float>& voxels, const std::string& header_path);

/// Slice z of a volume as a [Y,X] tensor.
Tensor<float> volume_slice(const Volume& vol, int z);

}  // namespace nodnet
