#include "nodnet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include "nodnet/errors.hpp"
#include "nodnet/rng.hpp"
#include "nodnet/serialize.hpp"

namespace nodnet {

namespace {

constexpr const char* kAnnotationHeader = "seriesuid,coordX,coordY,coordZ,diameter_mm";

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream in(line);
    while (std::getline(in, field, ',')) out.push_back(field);
    return out;
}

std::string strip_cr(std::string s) {
    if (!s.empty() && s.back() == '\r') s.pop_back();
    return s;
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

std::vector<NoduleAnnotation> read_annotations(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open: " + path);
    std::string line;
    if (!std::getline(in, line) || strip_cr(line) != kAnnotationHeader)
        throw DataError("annotations: expected header \"" + std::string(kAnnotationHeader) + "\" in " + path);
    std::vector<NoduleAnnotation> out;
    while (std::getline(in, line)) {
        line = strip_cr(line);
        if (line.empty()) continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != 5)
            throw DataError("annotations: expected 5 fields, got " + std::to_string(fields.size()) + " in \"" + line +
                            "\"");
        NoduleAnnotation a;
        a.series = fields[0];
        try {
            a.x = std::stod(fields[1]);
            a.y = std::stod(fields[2]);
            a.z = std::stod(fields[3]);
            a.diameter_mm = std::stod(fields[4]);
        } catch (const std::exception&) {
            throw DataError("annotations: non-numeric field in \"" + line + "\"");
        }
        if (a.diameter_mm <= 0) throw DataError("annotations: non-positive diameter in \"" + line + "\"");
        if (a.diameter_mm > 30.0)
            std::cerr << "annotations: diameter " << a.diameter_mm << "mm exceeds the 30mm nodule definition ("
                      << a.series << ")\n";
        out.push_back(std::move(a));
    }
    return out;
}

void write_annotations(const std::vector<NoduleAnnotation>& annotations, const std::string& path) {
    std::string out = std::string(kAnnotationHeader) + "\n";
    for (const auto& a : annotations)
        out += a.series + "," + fmt_double(a.x) + "," + fmt_double(a.y) + "," + fmt_double(a.z) + "," +
               fmt_double(a.diameter_mm) + "\n";
    atomic_write_file(path, out);
}

Tensor<float> hu_window(const Tensor<float>& slice, double center, double width) {
    if (width <= 0) throw std::invalid_argument("hu_window: width must be > 0");
    const double lo = center - width / 2.0;
    Tensor<float> out(slice.shape());
    for (std::int64_t i = 0; i < slice.numel(); ++i) {
        const double v = (slice.data()[i] - lo) / width;
        out.data()[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
    return out;
}

Tensor<float> nodule_mask(const NoduleAnnotation& annotation, const VolumeMeta& meta, int slice_index) {
    if (!meta.series.empty() && annotation.series != meta.series)
        throw std::invalid_argument("nodule_mask: annotation series \"" + annotation.series +
                                    "\" does not match volume \"" + meta.series + "\"");
    if (slice_index < 0 || slice_index >= meta.dims[2])
        throw std::invalid_argument("nodule_mask: slice " + std::to_string(slice_index) + " outside [0, " +
                                    std::to_string(meta.dims[2]) + ")");
    const int ys = meta.dims[1], xs = meta.dims[0];
    Tensor<float> mask(Shape{ys, xs});
    const double radius = annotation.diameter_mm / 2.0;
    const double z_world = meta.offset[2] + slice_index * meta.spacing[2];
    const double dz = z_world - annotation.z;
    if (std::abs(dz) > radius) return mask;
    const double r_plane = std::sqrt(radius * radius - dz * dz);

    const double cx_px = (annotation.x - meta.offset[0]) / meta.spacing[0];
    const double cy_px = (annotation.y - meta.offset[1]) / meta.spacing[1];
    const int x_lo = std::max(0, static_cast<int>(std::floor(cx_px - r_plane / meta.spacing[0])) - 1);
    const int x_hi = std::min(xs - 1, static_cast<int>(std::ceil(cx_px + r_plane / meta.spacing[0])) + 1);
    const int y_lo = std::max(0, static_cast<int>(std::floor(cy_px - r_plane / meta.spacing[1])) - 1);
    const int y_hi = std::min(ys - 1, static_cast<int>(std::ceil(cy_px + r_plane / meta.spacing[1])) + 1);
    const double r2 = r_plane * r_plane;
    for (int y = y_lo; y <= y_hi; ++y) {
        const double wy = meta.offset[1] + y * meta.spacing[1];
        for (int x = x_lo; x <= x_hi; ++x) {
            const double wx = meta.offset[0] + x * meta.spacing[0];
            const double dx = wx - annotation.x, dy = wy - annotation.y;
            if (dx * dx + dy * dy <= r2) mask.data()[static_cast<std::int64_t>(y) * xs + x] = 1.0f;
        }
    }
    return mask;
}

Tensor<float> nodule_mask_union(const std::vector<NoduleAnnotation>& annotations, const VolumeMeta& meta,
                                int slice_index) {
    Tensor<float> mask(Shape{meta.dims[1], meta.dims[0]});
    for (const auto& a : annotations) {
        if (!meta.series.empty() && a.series != meta.series) continue;
        const Tensor<float> one = nodule_mask(a, meta, slice_index);
        for (std::int64_t i = 0; i < mask.numel(); ++i)
            if (one.data()[i] != 0.0f) mask.data()[i] = 1.0f;
    }
    return mask;
}

std::vector<int> systematic_sample(const std::vector<bool>& has_nodule) {
    std::vector<int> pos, neg;
    for (std::size_t i = 0; i < has_nodule.size(); ++i) (has_nodule[i] ? pos : neg).push_back(static_cast<int>(i));
    if (pos.empty() || neg.empty())
        throw std::invalid_argument("systematic_sample: both nodule-bearing and nodule-free slices are required");
    const auto& minority = pos.size() <= neg.size() ? pos : neg;
    const auto& majority = pos.size() <= neg.size() ? neg : pos;
    const std::size_t m = minority.size(), big = majority.size();
    std::vector<bool> keep(has_nodule.size(), false);
    for (int i : minority) keep[static_cast<std::size_t>(i)] = true;
    for (std::size_t k = 0; k < m; ++k) keep[static_cast<std::size_t>(majority[k * big / m])] = true;
    std::vector<int> out;
    for (std::size_t i = 0; i < keep.size(); ++i)
        if (keep[i]) out.push_back(static_cast<int>(i));
    return out;
}

std::vector<PatchRecord> extract_patches(const Tensor<float>& image, const Tensor<float>& lung_mask,
                                         const Tensor<float>& nodule_mask, int stride, int slice_index) {
    if (image.rank() != 2 || image.shape() != lung_mask.shape() || image.shape() != nodule_mask.shape())
        throw std::invalid_argument("extract_patches: image/lung/nodule shapes must match, got " +
                                    shape_string(image.shape()) + ", " + shape_string(lung_mask.shape()) + ", " +
                                    shape_string(nodule_mask.shape()));
    const int h = image.dim(0), w = image.dim(1);
    if (h < kPatchSize || w < kPatchSize)
        throw std::invalid_argument("extract_patches: image " + shape_string(image.shape()) + " smaller than " +
                                    std::to_string(kPatchSize) + "x" + std::to_string(kPatchSize));
    if (stride < 1) throw std::invalid_argument("extract_patches: stride must be >= 1");

    int r_min = h, r_max = -1, c_min = w, c_max = -1;
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            if (lung_mask.data()[static_cast<std::int64_t>(r) * w + c] != 0.0f) {
                r_min = std::min(r_min, r);
                r_max = std::max(r_max, r);
                c_min = std::min(c_min, c);
                c_max = std::max(c_max, c);
            }
    std::vector<PatchRecord> out;
    if (r_max < 0) return out;  // empty lung mask

    // stride grid anchored at the bbox corner; starts clamp to the image so
    // windows near the far edge stay fully in bounds
    std::set<int> row_starts, col_starts;
    for (int r = r_min; r <= r_max; r += stride) row_starts.insert(std::min(r, h - kPatchSize));
    for (int c = c_min; c <= c_max; c += stride) col_starts.insert(std::min(c, w - kPatchSize));

    const long min_lung = static_cast<long>(kPatchLungCoverage * kPatchSize * kPatchSize);
    for (int r : row_starts) {
        for (int c : col_starts) {
            long lung = 0;
            bool nodule = false;
            for (int y = r; y < r + kPatchSize; ++y)
                for (int x = c; x < c + kPatchSize; ++x) {
                    const std::int64_t at = static_cast<std::int64_t>(y) * w + x;
                    lung += lung_mask.data()[at] != 0.0f;
                    nodule |= nodule_mask.data()[at] != 0.0f;
                }
            if (lung < min_lung) continue;
            PatchRecord rec;
            rec.pixels = Tensor<float>(Shape{kPatchSize, kPatchSize});
            for (int y = 0; y < kPatchSize; ++y)
                std::copy_n(image.data().data() + static_cast<std::int64_t>(r + y) * w + c, kPatchSize,
                            rec.pixels.data().data() + static_cast<std::int64_t>(y) * kPatchSize);
            rec.label = nodule ? PatchLabel::C1 : PatchLabel::C2;
            rec.slice_index = slice_index;
            rec.top_row = r;
            rec.top_col = c;
            out.push_back(std::move(rec));
        }
    }
    return out;
}

void save_patches(const std::vector<PatchRecord>& patches, const std::string& path) {
    std::ostringstream ss(std::ios::binary);
    ss.write("PCH1", 4);
    detail::write_le<std::uint32_t>(ss, static_cast<std::uint32_t>(patches.size()));
    for (const auto& p : patches) {
        if (p.pixels.shape() != Shape{kPatchSize, kPatchSize})
            throw std::invalid_argument("save_patches: patch pixels must be 64x64, got " +
                                        shape_string(p.pixels.shape()));
        for (float v : p.pixels.data()) detail::write_le<float>(ss, v);
        detail::write_le<std::uint8_t>(ss, static_cast<std::uint8_t>(p.label));
        detail::write_le<std::uint32_t>(ss, static_cast<std::uint32_t>(p.slice_index));
        detail::write_le<std::uint32_t>(ss, static_cast<std::uint32_t>(p.top_row));
        detail::write_le<std::uint32_t>(ss, static_cast<std::uint32_t>(p.top_col));
    }
    atomic_write_file(path, ss.str());
}

std::vector<PatchRecord> load_patches(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "PCH1", 4) != 0) throw DataError("bad patch-file magic (expected PCH1) in " + path);
    const std::uint32_t count = detail::read_le<std::uint32_t>(in, "patch count");
    std::vector<PatchRecord> out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        PatchRecord p;
        p.pixels = Tensor<float>(Shape{kPatchSize, kPatchSize});
        for (auto& v : p.pixels.data()) v = detail::read_le<float>(in, "patch pixels");
        const std::uint8_t label = detail::read_le<std::uint8_t>(in, "patch label");
        if (label > 1) throw DataError("patch label byte " + std::to_string(label) + " is not 0 (C2) or 1 (C1)");
        p.label = static_cast<PatchLabel>(label);
        p.slice_index = static_cast<int>(detail::read_le<std::uint32_t>(in, "patch slice"));
        p.top_row = static_cast<int>(detail::read_le<std::uint32_t>(in, "patch row"));
        p.top_col = static_cast<int>(detail::read_le<std::uint32_t>(in, "patch col"));
        out.push_back(std::move(p));
    }
    in.peek();
    if (!in.eof()) throw DataError("trailing bytes after patch records in " + path);
    return out;
}

std::vector<PatchRecord> balance_patches(std::vector<PatchRecord> patches, std::uint64_t seed) {
    Rng rng(mix64(seed ^ hash64("patch-balance")));
    std::vector<std::size_t> c1, c2;
    for (std::size_t i = 0; i < patches.size(); ++i)
        (patches[i].label == PatchLabel::C1 ? c1 : c2).push_back(i);
    rng.shuffle(c1);
    rng.shuffle(c2);
    const std::size_t keep = std::min(c1.size(), c2.size());
    std::vector<std::size_t> kept(c1.begin(), c1.begin() + static_cast<std::ptrdiff_t>(keep));
    kept.insert(kept.end(), c2.begin(), c2.begin() + static_cast<std::ptrdiff_t>(keep));
    rng.shuffle(kept);
    std::vector<PatchRecord> out;
    out.reserve(kept.size());
    for (std::size_t i : kept) out.push_back(std::move(patches[i]));
    return out;
}

KfoldSplit kfold_split(std::vector<std::string> subject_ids, int k, int fold) {
    if (k < 3) throw std::invalid_argument("kfold_split: k must be >= 3");
    if (fold < 0 || fold >= k) throw std::invalid_argument("kfold_split: fold must lie in [0, k)");
    if (static_cast<int>(subject_ids.size()) < k)
        throw std::invalid_argument("kfold_split: " + std::to_string(subject_ids.size()) + " subjects for k = " +
                                    std::to_string(k));
    std::sort(subject_ids.begin(), subject_ids.end(), [](const std::string& a, const std::string& b) {
        const auto ha = mix64(hash64(a)), hb = mix64(hash64(b));
        return ha != hb ? ha < hb : a < b;
    });
    KfoldSplit split;
    for (std::size_t i = 0; i < subject_ids.size(); ++i) {
        const int part = static_cast<int>(i % static_cast<std::size_t>(k));
        if (part == fold)
            split.val.push_back(subject_ids[i]);
        else if (part == (fold + 1) % k)
            split.test.push_back(subject_ids[i]);
        else
            split.train.push_back(subject_ids[i]);
    }
    return split;
}

Tensor<float> postprocess_mask(const Tensor<float>& prob_map, double threshold) {
    if (prob_map.rank() != 2)
        throw std::invalid_argument("postprocess_mask: expected [H,W], got " + shape_string(prob_map.shape()));
    const int h = prob_map.dim(0), w = prob_map.dim(1);
    std::vector<int> label(static_cast<std::size_t>(h) * w, -1);
    const auto fg = [&](int r, int c) {
        return prob_map.data()[static_cast<std::int64_t>(r) * w + c] >= static_cast<float>(threshold);
    };

    // 4-connected components of the thresholded foreground
    std::vector<long> sizes;
    std::vector<std::pair<int, int>> stack;
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            if (!fg(r, c) || label[static_cast<std::size_t>(r) * w + c] >= 0) continue;
            const int id = static_cast<int>(sizes.size());
            sizes.push_back(0);
            stack.assign(1, {r, c});
            label[static_cast<std::size_t>(r) * w + c] = id;
            while (!stack.empty()) {
                const auto [cr, cc] = stack.back();
                stack.pop_back();
                ++sizes[static_cast<std::size_t>(id)];
                const int nr[] = {cr - 1, cr + 1, cr, cr};
                const int nc[] = {cc, cc, cc - 1, cc + 1};
                for (int i = 0; i < 4; ++i) {
                    if (nr[i] < 0 || nr[i] >= h || nc[i] < 0 || nc[i] >= w) continue;
                    auto& l = label[static_cast<std::size_t>(nr[i]) * w + nc[i]];
                    if (l < 0 && fg(nr[i], nc[i])) {
                        l = id;
                        stack.push_back({nr[i], nc[i]});
                    }
                }
            }
        }
    }

    Tensor<float> out(prob_map.shape());
    if (sizes.empty()) return out;

    // keep the two largest components (lungs), or one if only one exists
    std::vector<int> ids(sizes.size());
    std::iota(ids.begin(), ids.end(), 0);
    std::sort(ids.begin(), ids.end(), [&](int a, int b) {
        return sizes[static_cast<std::size_t>(a)] != sizes[static_cast<std::size_t>(b)]
                   ? sizes[static_cast<std::size_t>(a)] > sizes[static_cast<std::size_t>(b)]
                   : a < b;
    });
    std::vector<bool> kept(sizes.size(), false);
    for (std::size_t i = 0; i < std::min<std::size_t>(2, ids.size()); ++i) kept[static_cast<std::size_t>(ids[i])] = true;
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out.data()[i] = (label[static_cast<std::size_t>(i)] >= 0 && kept[static_cast<std::size_t>(label[i])]) ? 1.0f : 0.0f;

    // fill holes: background not reachable from the border becomes foreground
    std::vector<bool> reach(static_cast<std::size_t>(h) * w, false);
    stack.clear();
    for (int r = 0; r < h; ++r)
        for (int c : {0, w - 1})
            if (out.data()[static_cast<std::int64_t>(r) * w + c] == 0.0f && !reach[static_cast<std::size_t>(r) * w + c]) {
                reach[static_cast<std::size_t>(r) * w + c] = true;
                stack.push_back({r, c});
            }
    for (int c = 0; c < w; ++c)
        for (int r : {0, h - 1})
            if (out.data()[static_cast<std::int64_t>(r) * w + c] == 0.0f && !reach[static_cast<std::size_t>(r) * w + c]) {
                reach[static_cast<std::size_t>(r) * w + c] = true;
                stack.push_back({r, c});
            }
    while (!stack.empty()) {
        const auto [cr, cc] = stack.back();
        stack.pop_back();
        const int nr[] = {cr - 1, cr + 1, cr, cr};
        const int nc[] = {cc, cc, cc - 1, cc + 1};
        for (int i = 0; i < 4; ++i) {
            if (nr[i] < 0 || nr[i] >= h || nc[i] < 0 || nc[i] >= w) continue;
            const std::size_t at = static_cast<std::size_t>(nr[i]) * w + nc[i];
            if (!reach[at] && out.data()[at] == 0.0f) {
                reach[at] = true;
                stack.push_back({nr[i], nc[i]});
            }
        }
    }
    for (std::int64_t i = 0; i < out.numel(); ++i)
        if (out.data()[i] == 0.0f && !reach[static_cast<std::size_t>(i)]) out.data()[i] = 1.0f;
    return out;
}

void write_pgm(const Tensor<float>& image, const std::string& path, double lo, double hi) {
    if (image.rank() != 2)
        throw std::invalid_argument("write_pgm: expected [H,W], got " + shape_string(image.shape()));
    if (!(hi > lo)) throw std::invalid_argument("write_pgm: hi must exceed lo");
    std::string out = "P5\n" + std::to_string(image.dim(1)) + " " + std::to_string(image.dim(0)) + "\n255\n";
    out.reserve(out.size() + static_cast<std::size_t>(image.numel()));
    for (float v : image.data()) {
        const double t = std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(t * 255.0))));
    }
    atomic_write_file(path, out);
}

}  // namespace nodnet
