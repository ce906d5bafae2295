#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nodnet/mhd.hpp"
#include "nodnet/tensor.hpp"

namespace nodnet {

inline constexpr int kPatchSize = 64;
inline constexpr double kPatchLungCoverage = 0.25;  // min fraction of lung pixels per kept window
inline constexpr int kDefaultPatchStride = 32;

// ---------------------------------------------------------------------------
// Annotations: world-coordinate spheres (LUNA-style)
// ---------------------------------------------------------------------------

struct NoduleAnnotation {
    std::string series;
    double x = 0, y = 0, z = 0;  // world mm
    double diameter_mm = 0;
};

/// CSV with header `seriesuid,coordX,coordY,coordZ,diameter_mm`. Diameters
/// above 30mm are tolerated with a warning on stderr.
std::vector<NoduleAnnotation> read_annotations(const std::string& path);
void write_annotations(const std::vector<NoduleAnnotation>& annotations, const std::string& path);

// ---------------------------------------------------------------------------
// Slice-level geometry
// ---------------------------------------------------------------------------

/// Linear map of the HU window [center-width/2, center+width/2] to [0,1],
/// clipped. Defaults are a standard lung window.
Tensor<float> hu_window(const Tensor<float>& slice, double center = -600.0, double width = 1500.0);

/// Rasterizes the sphere's cross-section on slice `slice_index`: pixels
/// whose world (x,y) lie within radius sqrt(R^2 - dz^2) of the in-plane
/// center, R = diameter/2, dz = world-z distance from the sphere center to
/// the slice plane. All-zero when |dz| > R. The annotation's series must
/// match the volume's.
Tensor<float> nodule_mask(const NoduleAnnotation& annotation, const VolumeMeta& meta, int slice_index);

/// Union of all matching annotations' cross-sections on one slice.
Tensor<float> nodule_mask_union(const std::vector<NoduleAnnotation>& annotations, const VolumeMeta& meta,
                                int slice_index);

/// Balances nodule-bearing and nodule-free slices: keeps every minority
/// slice and drops excess majority slices by a uniform deterministic stride.
/// Returns the kept indices in original order; both kinds must be present.
std::vector<int> systematic_sample(const std::vector<bool>& has_nodule);

// ---------------------------------------------------------------------------
// Patches
// ---------------------------------------------------------------------------

enum class PatchLabel : std::uint8_t { C2 = 0, C1 = 1 };  // C1 = nodule present

struct PatchRecord {
    Tensor<float> pixels;  // [64,64]
    PatchLabel label = PatchLabel::C2;
    int slice_index = 0;
    int top_row = 0, top_col = 0;
};

/// 64x64 windows on a stride grid over the lung-mask bounding box, keeping
/// windows with >= 25% lung pixels (lung walls included); label C1 iff the
/// window overlaps at least one nodule-mask pixel. Windows are clipped to
/// the image, so every record lies fully in bounds. Empty lung mask: empty
/// list.
std::vector<PatchRecord> extract_patches(const Tensor<float>& image, const Tensor<float>& lung_mask,
                                         const Tensor<float>& nodule_mask, int stride = kDefaultPatchStride,
                                         int slice_index = 0);

/// "PCH1" patch dataset: magic, u32 count, then per record 64x64 f32 pixels,
/// u8 label (1 = C1), u32 slice index, u32 top row, u32 top col.
void save_patches(const std::vector<PatchRecord>& patches, const std::string& path);
std::vector<PatchRecord> load_patches(const std::string& path);

/// Subsamples the majority class down to the minority count with a
/// deterministic shuffle from `seed`; order of the kept records is
/// re-randomized from the same stream.
std::vector<PatchRecord> balance_patches(std::vector<PatchRecord> patches, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Splits and mask post-processing
// ---------------------------------------------------------------------------

struct KfoldSplit {
    std::vector<std::string> train, val, test;
};

/// Deterministic hash-ordered partition into k parts; part `fold` validates,
/// part (fold+1) mod k tests, the rest train.
KfoldSplit kfold_split(std::vector<std::string> subject_ids, int k, int fold);

/// Threshold at 0.5 (configurable), keep the two largest 4-connected
/// components, fill enclosed holes.
Tensor<float> postprocess_mask(const Tensor<float>& prob_map, double threshold = 0.5);

/// 8-bit binary PGM (P5); values mapped linearly from [lo,hi] to 0..255.
void write_pgm(const Tensor<float>& image, const std::string& path, double lo = 0.0, double hi = 1.0);

}  // namespace nodnet
