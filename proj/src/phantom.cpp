#include "nodnet/phantom.hpp"

#include <algorithm>
#include <cmath>

#include "nodnet/errors.hpp"
#include "nodnet/rng.hpp"

namespace nodnet {

void PhantomConfig::validate() const {
    if (size < 32) throw std::invalid_argument("PhantomConfig: size must be >= 32");
    if (slices < 1) throw std::invalid_argument("PhantomConfig: slices must be >= 1");
    const auto check_range = [](const char* what, std::pair<double, double> r) {
        if (r.first > r.second || r.first < 0.0 || r.second > 1.0)
            throw std::invalid_argument(std::string("PhantomConfig: bad intensity range for ") + what);
    };
    check_range("body", body_intensity);
    check_range("lung", lung_intensity);
    check_range("nodule", nodule_intensity);
    if (nodule_count.first < 0 || nodule_count.second < nodule_count.first)
        throw std::invalid_argument("PhantomConfig: bad nodule count range");
    if (nodule_diameter_px.first < 3 || nodule_diameter_px.second < nodule_diameter_px.first)
        throw std::invalid_argument("PhantomConfig: nodule diameter must be >= 3px");
    if (wall_attach_probability < 0.0 || wall_attach_probability > 1.0)
        throw std::invalid_argument("PhantomConfig: wall_attach_probability must lie in [0,1]");
    if (noise_amplitude < 0.0) throw std::invalid_argument("PhantomConfig: noise amplitude must be >= 0");
}

namespace {

struct Ellipse {
    double cx, cy, a, b;
    bool contains(double x, double y) const {
        const double u = (x - cx) / a, v = (y - cy) / b;
        return u * u + v * v <= 1.0;
    }
};

// min Euclidean distance from each lung pixel to a non-lung pixel, brute
// force over the boundary ring; desk-scale sizes keep this cheap
std::vector<double> lung_depth(const Tensor<float>& lung, int size) {
    std::vector<std::pair<int, int>> outside_ring;
    const auto at = [&](int r, int c) { return lung.data()[static_cast<std::int64_t>(r) * size + c] != 0.0f; };
    for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c) {
            if (at(r, c)) continue;
            const bool near_lung = (r > 0 && at(r - 1, c)) || (r + 1 < size && at(r + 1, c)) ||
                                   (c > 0 && at(r, c - 1)) || (c + 1 < size && at(r, c + 1));
            if (near_lung) outside_ring.emplace_back(r, c);
        }
    std::vector<double> depth(static_cast<std::size_t>(size) * size, 0.0);
    for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c) {
            if (!at(r, c)) continue;
            double best = 1e18;
            for (const auto& [br, bc] : outside_ring) {
                const double dr = r - br, dc = c - bc;
                best = std::min(best, dr * dr + dc * dc);
            }
            depth[static_cast<std::size_t>(r) * size + c] = std::sqrt(best);
        }
    return depth;
}

}  // namespace

Phantom phantom_generate(const PhantomConfig& config, const std::string& series) {
    config.validate();
    Rng rng(mix64(config.seed ^ hash64(series)));
    const int size = config.size, slices = config.slices;

    Phantom out;
    out.meta.dims = {size, size, slices};
    out.meta.spacing = {1.0, 1.0, 1.0};
    out.meta.offset = {0.0, 0.0, 0.0};
    out.meta.element_type = MhdElementType::Float32;
    out.meta.series = series;

    const double body_v = rng.uniform(config.body_intensity.first, config.body_intensity.second);
    const double lung_v = rng.uniform(config.lung_intensity.first, config.lung_intensity.second);
    const double cx = size / 2.0, cy = size / 2.0;
    // body small enough that patch windows reach the black outside-body air,
    // the way windowed CT patches near the chest wall do
    const double body_r = 0.40 * size;

    // lung fraction stays in roughly [0.28, 0.37] of the slice, which keeps
    // whole-slice windows above the 25% patch coverage threshold
    const auto jitter = [&] { return 1.0 + rng.uniform(-0.07, 0.07); };
    const Ellipse left{cx - 0.19 * size, cy + rng.uniform(-0.02, 0.02) * size, 0.165 * size * jitter(),
                       0.31 * size * jitter()};
    const Ellipse right{cx + 0.19 * size, cy + rng.uniform(-0.02, 0.02) * size, 0.165 * size * jitter(),
                        0.31 * size * jitter()};

    Tensor<float> lung2d(Shape{size, size});
    Tensor<float> base(Shape{size, size}, 0.0f);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double dx = x - cx, dy = y - cy;
            const std::int64_t at = static_cast<std::int64_t>(y) * size + x;
            if (dx * dx + dy * dy <= body_r * body_r) base.data()[at] = static_cast<float>(body_v);
            if (left.contains(x, y) || right.contains(x, y)) {
                lung2d.data()[at] = 1.0f;
                base.data()[at] = static_cast<float>(lung_v);
            }
        }
    }

    const std::vector<double> depth = lung_depth(lung2d, size);

    // nodule spheres: center drawn among lung pixels whose wall distance
    // suits the attached/isolated draw; dilate-by-2 containment follows from
    // depth >= r-2
    const int n_nodules = rng.uniform_int(config.nodule_count.first, config.nodule_count.second);
    for (int k = 0; k < n_nodules; ++k) {
        const int d_px = rng.uniform_int(config.nodule_diameter_px.first, config.nodule_diameter_px.second);
        const double r = d_px / 2.0;
        const bool attach = rng.bernoulli(config.wall_attach_probability);
        bool placed = false;
        for (int attempt = 0; attempt < 400 && !placed; ++attempt) {
            const int x = rng.uniform_int(0, size - 1);
            const int y = rng.uniform_int(0, size - 1);
            const double dep = depth[static_cast<std::size_t>(y) * size + x];
            if (dep <= 0.0) continue;  // not a lung pixel
            const bool fits_attached = attach && dep >= r - 2.0 && dep <= r;
            const bool fits_isolated = !attach && dep > r;
            if (!fits_attached && !fits_isolated) continue;
            const double z = rng.uniform(0.0, static_cast<double>(slices - 1));
            NoduleAnnotation ann;
            ann.series = series;
            ann.x = static_cast<double>(x);
            ann.y = static_cast<double>(y);
            ann.z = z;
            ann.diameter_mm = static_cast<double>(d_px);
            out.annotations.push_back(std::move(ann));
            placed = true;
        }
        if (!placed)
            throw DataError("phantom_generate: could not place a " + std::to_string(d_px) + "px " +
                            (attach ? std::string("wall-attached") : std::string("isolated")) +
                            " nodule inside the lungs of " + series + " after 400 attempts (size " +
                            std::to_string(size) + ")");
    }

    out.image = Tensor<float>(Shape{slices, size, size});
    out.lung_mask = Tensor<float>(Shape{slices, size, size});
    out.nodule_mask = Tensor<float>(Shape{slices, size, size});
    const std::int64_t plane = static_cast<std::int64_t>(size) * size;
    for (int z = 0; z < slices; ++z) {
        std::copy_n(base.data().data(), plane, out.image.data().data() + z * plane);
        std::copy_n(lung2d.data().data(), plane, out.lung_mask.data().data() + z * plane);
        const Tensor<float> nod = nodule_mask_union(out.annotations, out.meta, z);
        std::copy_n(nod.data().data(), plane, out.nodule_mask.data().data() + z * plane);
    }
    // per-nodule intensities come from a fork so painting cannot perturb the
    // placement stream
    Rng paint_rng = rng.fork("paint");
    for (const auto& ann : out.annotations) {
        const double nod_v = paint_rng.uniform(config.nodule_intensity.first, config.nodule_intensity.second);
        for (int z = 0; z < slices; ++z) {
            const Tensor<float> nod = nodule_mask(ann, out.meta, z);
            for (std::int64_t i = 0; i < plane; ++i)
                if (nod.data()[i] != 0.0f) out.image.data()[z * plane + i] = static_cast<float>(nod_v);
        }
    }
    if (config.noise_amplitude > 0.0) {
        for (std::int64_t i = 0; i < out.image.numel(); ++i) {
            const double noisy =
                out.image.data()[i] + rng.uniform(-config.noise_amplitude, config.noise_amplitude);
            out.image.data()[i] = static_cast<float>(std::clamp(noisy, 0.0, 1.0));
        }
    }
    return out;
}

}  // namespace nodnet
