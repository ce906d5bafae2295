#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "nodnet/tape.hpp"
#include "nodnet/tensor.hpp"

namespace nodnet {

/// Forward-pass mode. Train uses batch statistics and updates batch-norm
/// running stats; Frozen uses batch statistics without updating them (the
/// adversarial freeze steps depend on this leaving the store bit-identical);
/// Eval normalizes with the running stats.
enum class Phase { Train, Frozen, Eval };

namespace detail {

template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapMat = Eigen::Map<MatRM<S>>;
template <typename S>
using ConstMapMat = Eigen::Map<const MatRM<S>>;

template <typename S>
inline void ensure_grad(TensorImpl<S>& t) {
    if (t.grad.empty()) t.grad.assign(t.value.size(), S(0));
}

template <typename S>
inline void check_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                    shape_string(b.shape()));
}

template <typename S>
inline void check_rank(const char* op, const Tensor<S>& t, int rank) {
    if (t.rank() != rank)
        throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                                    shape_string(t.shape()));
}

// cols is [C*k*k, oH*oW] row-major.
template <typename S>
void im2col(const S* x, int C, int H, int W, int k, int stride, int pad, int oH, int oW, S* cols) {
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                S* row = cols + (static_cast<std::size_t>((c * k + ky) * k + kx)) * (static_cast<std::size_t>(oH) * oW);
                for (int oy = 0; oy < oH; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    for (int ox = 0; ox < oW; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        row[oy * oW + ox] =
                            (iy >= 0 && iy < H && ix >= 0 && ix < W) ? x[(c * H + iy) * W + ix] : S(0);
                    }
                }
            }
        }
    }
}

template <typename S>
void col2im_add(const S* cols, int C, int H, int W, int k, int stride, int pad, int oH, int oW, S* x) {
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const S* row =
                    cols + (static_cast<std::size_t>((c * k + ky) * k + kx)) * (static_cast<std::size_t>(oH) * oW);
                for (int oy = 0; oy < oH; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    for (int ox = 0; ox < oW; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= W) continue;
                        x[(c * H + iy) * W + ix] += row[oy * oW + ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops. Binary ops require identical shapes; scalar constants are
// the only broadcast (scale). Outputs join the tape when any input requires
// gradients.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_same_shape("add", a, b);
    Tensor<S> out(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (auto* tape = Tape<S>::current(); tape && (a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        tape->record(oi, [ai, bi, oi] {
            if (oi->grad.empty()) return;
            if (ai->requires_grad) {
                detail::ensure_grad(*ai);
                for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
            }
            if (bi->requires_grad) {
                detail::ensure_grad(*bi);
                for (std::size_t i = 0; i < oi->grad.size(); ++i) bi->grad[i] += oi->grad[i];
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_same_shape("sub", a, b);
    Tensor<S> out(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    if (auto* tape = Tape<S>::current(); tape && (a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        tape->record(oi, [ai, bi, oi] {
            if (oi->grad.empty()) return;
            if (ai->requires_grad) {
                detail::ensure_grad(*ai);
                for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
            }
            if (bi->requires_grad) {
                detail::ensure_grad(*bi);
                for (std::size_t i = 0; i < oi->grad.size(); ++i) bi->grad[i] -= oi->grad[i];
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_same_shape("mul", a, b);
    Tensor<S> out(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (auto* tape = Tape<S>::current(); tape && (a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        tape->record(oi, [ai, bi, oi] {
            if (oi->grad.empty()) return;
            if (ai->requires_grad) {
                detail::ensure_grad(*ai);
                for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i] * bi->value[i];
            }
            if (bi->requires_grad) {
                detail::ensure_grad(*bi);
                for (std::size_t i = 0; i < oi->grad.size(); ++i) bi->grad[i] += oi->grad[i] * ai->value[i];
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
    Tensor<S> out(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * factor;
    if (auto* tape = Tape<S>::current(); tape && a.requires_grad()) {
        out.set_requires_grad(true);
        auto ai = a.impl();
        auto oi = out.impl();
        tape->record(oi, [ai, oi, factor] {
            if (oi->grad.empty()) return;
            detail::ensure_grad(*ai);
            for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i] * factor;
        });
    }
    return out;
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) {
    return scale(a, S(-1));
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
    Tensor<S> out(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] > S(0) ? a.data()[i] : S(0);
    if (auto* tape = Tape<S>::current(); tape && a.requires_grad()) {
        out.set_requires_grad(true);
        auto ai = a.impl();
        auto oi = out.impl();
        // relu'(0) = 0 by convention
        tape->record(oi, [ai, oi] {
            if (oi->grad.empty()) return;
            detail::ensure_grad(*ai);
            for (std::size_t i = 0; i < oi->grad.size(); ++i)
                if (ai->value[i] > S(0)) ai->grad[i] += oi->grad[i];
        });
    }
    return out;
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
    Tensor<S> out(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        const S x = a.data()[i];
        if (x >= S(0)) {
            out.data()[i] = S(1) / (S(1) + std::exp(-x));
        } else {
            const S e = std::exp(x);
            out.data()[i] = e / (S(1) + e);
        }
    }
    if (auto* tape = Tape<S>::current(); tape && a.requires_grad()) {
        out.set_requires_grad(true);
        auto ai = a.impl();
        auto oi = out.impl();
        tape->record(oi, [ai, oi] {
            if (oi->grad.empty()) return;
            detail::ensure_grad(*ai);
            for (std::size_t i = 0; i < oi->grad.size(); ++i) {
                const S y = oi->value[i];
                ai->grad[i] += oi->grad[i] * y * (S(1) - y);
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> log(const Tensor<S>& a) {
    Tensor<S> out(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        if (!(a.data()[i] > S(0)))
            throw std::invalid_argument("log: non-positive value " + std::to_string(static_cast<double>(a.data()[i])) +
                                        " at flat index " + std::to_string(i));
        out.data()[i] = std::log(a.data()[i]);
    }
    if (auto* tape = Tape<S>::current(); tape && a.requires_grad()) {
        out.set_requires_grad(true);
        auto ai = a.impl();
        auto oi = out.impl();
        tape->record(oi, [ai, oi] {
            if (oi->grad.empty()) return;
            detail::ensure_grad(*ai);
            for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i] / ai->value[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
    if (a.empty()) throw std::invalid_argument("sum: empty tensor");
    S acc = S(0);
    for (std::int64_t i = 0; i < a.numel(); ++i) acc += a.data()[i];
    Tensor<S> out = Tensor<S>::scalar(acc);
    if (auto* tape = Tape<S>::current(); tape && a.requires_grad()) {
        out.set_requires_grad(true);
        auto ai = a.impl();
        auto oi = out.impl();
        tape->record(oi, [ai, oi] {
            if (oi->grad.empty()) return;
            detail::ensure_grad(*ai);
            for (auto& g : ai->grad) g += oi->grad[0];
        });
    }
    return out;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
    if (a.empty()) throw std::invalid_argument("mean: empty tensor");
    S acc = S(0);
    for (std::int64_t i = 0; i < a.numel(); ++i) acc += a.data()[i];
    const S inv_n = S(1) / static_cast<S>(a.numel());
    Tensor<S> out = Tensor<S>::scalar(acc * inv_n);
    if (auto* tape = Tape<S>::current(); tape && a.requires_grad()) {
        out.set_requires_grad(true);
        auto ai = a.impl();
        auto oi = out.impl();
        tape->record(oi, [ai, oi, inv_n] {
            if (oi->grad.empty()) return;
            detail::ensure_grad(*ai);
            for (auto& g : ai->grad) g += oi->grad[0] * inv_n;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape ops (copying; gradients copied back)
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw std::invalid_argument("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
    Tensor<S> out = Tensor<S>::from_data(std::move(shape), {a.data().begin(), a.data().end()});
    if (auto* tape = Tape<S>::current(); tape && a.requires_grad()) {
        out.set_requires_grad(true);
        auto ai = a.impl();
        auto oi = out.impl();
        tape->record(oi, [ai, oi] {
            if (oi->grad.empty()) return;
            detail::ensure_grad(*ai);
            for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
        });
    }
    return out;
}

/// [N, ...] -> [N, product of the rest].
template <typename S>
Tensor<S> flatten(const Tensor<S>& a) {
    if (a.rank() < 2) throw std::invalid_argument("flatten: expected rank >= 2, got " + shape_string(a.shape()));
    const int n = a.dim(0);
    return reshape(a, Shape{n, static_cast<int>(a.numel() / n)});
}

// ---------------------------------------------------------------------------
// Convolution (NCHW, square kernels, symmetric zero padding)
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias, int stride = 1,
                 int padding = 0) {
    detail::check_rank("conv2d input", input, 4);
    detail::check_rank("conv2d weight", weight, 4);
    detail::check_rank("conv2d bias", bias, 1);
    if (weight.dim(2) != weight.dim(3))
        throw std::invalid_argument("conv2d: kernel must be square, got " + shape_string(weight.shape()));
    if (weight.dim(1) != input.dim(1))
        throw std::invalid_argument("conv2d: input channels " + std::to_string(input.dim(1)) +
                                    " do not match weight " + shape_string(weight.shape()));
    if (bias.dim(0) != weight.dim(0))
        throw std::invalid_argument("conv2d: bias size " + std::to_string(bias.dim(0)) + " does not match out_ch " +
                                    std::to_string(weight.dim(0)));
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");

    const int n = input.dim(0), c_in = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int c_out = weight.dim(0), k = weight.dim(2);
    const int oh = (h + 2 * padding - k) / stride + 1;
    const int ow = (w + 2 * padding - k) / stride + 1;
    if (h + 2 * padding < k || w + 2 * padding < k || oh < 1 || ow < 1)
        throw std::invalid_argument("conv2d: zero-size output (computed " + std::to_string(oh) + "x" +
                                    std::to_string(ow) + " from input " + shape_string(input.shape()) + ", kernel " +
                                    std::to_string(k) + ", stride " + std::to_string(stride) + ", padding " +
                                    std::to_string(padding) + ")");

    const int patch = c_in * k * k;
    const std::int64_t plane = static_cast<std::int64_t>(oh) * ow;
    Tensor<S> out(Shape{n, c_out, oh, ow});
    std::vector<S> cols(static_cast<std::size_t>(patch) * plane);
    detail::ConstMapMat<S> w_mat(weight.data().data(), c_out, patch);
    for (int i = 0; i < n; ++i) {
        detail::im2col(input.data().data() + static_cast<std::int64_t>(i) * c_in * h * w, c_in, h, w, k, stride,
                       padding, oh, ow, cols.data());
        detail::ConstMapMat<S> col_mat(cols.data(), patch, plane);
        detail::MapMat<S> out_mat(out.data().data() + static_cast<std::int64_t>(i) * c_out * plane, c_out, plane);
        out_mat.noalias() = w_mat * col_mat;
        for (int o = 0; o < c_out; ++o) out_mat.row(o).array() += bias.data()[o];
    }

    if (auto* tape = Tape<S>::current();
        tape && (input.requires_grad() || weight.requires_grad() || bias.requires_grad())) {
        out.set_requires_grad(true);
        auto xi = input.impl(), wi = weight.impl(), bi = bias.impl(), oi = out.impl();
        tape->record(oi, [xi, wi, bi, oi, n, c_in, h, w, c_out, k, stride, padding, oh, ow, patch, plane] {
            if (oi->grad.empty()) return;
            std::vector<S> cols(static_cast<std::size_t>(patch) * plane);
            std::vector<S> dcols;
            detail::ConstMapMat<S> w_mat(wi->value.data(), c_out, patch);
            if (xi->requires_grad) {
                detail::ensure_grad(*xi);
                dcols.resize(cols.size());
            }
            if (wi->requires_grad) detail::ensure_grad(*wi);
            if (bi->requires_grad) detail::ensure_grad(*bi);
            for (int i = 0; i < n; ++i) {
                detail::ConstMapMat<S> g_mat(oi->grad.data() + static_cast<std::int64_t>(i) * c_out * plane, c_out,
                                             plane);
                if (wi->requires_grad || xi->requires_grad)
                    detail::im2col(xi->value.data() + static_cast<std::int64_t>(i) * c_in * h * w, c_in, h, w, k,
                                   stride, padding, oh, ow, cols.data());
                if (wi->requires_grad) {
                    detail::ConstMapMat<S> col_mat(cols.data(), patch, plane);
                    detail::MapMat<S> dw_mat(wi->grad.data(), c_out, patch);
                    dw_mat.noalias() += g_mat * col_mat.transpose();
                }
                if (bi->requires_grad) {
                    for (int o = 0; o < c_out; ++o) bi->grad[o] += g_mat.row(o).sum();
                }
                if (xi->requires_grad) {
                    detail::MapMat<S> dcol_mat(dcols.data(), patch, plane);
                    dcol_mat.noalias() = w_mat.transpose() * g_mat;
                    detail::col2im_add(dcols.data(), c_in, h, w, k, stride, padding, oh, ow,
                                       xi->grad.data() + static_cast<std::int64_t>(i) * c_in * h * w);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// 2x2 max pooling with index export, and its inverse
// ---------------------------------------------------------------------------

template <typename S>
struct Pooled {
    Tensor<S> values;
    IndexArray indices;
};

/// Halves H and W. Indices store the flat position of each window maximum
/// within the input tensor; ties go to the lowest flat index.
template <typename S>
Pooled<S> maxpool2x2_with_indices(const Tensor<S>& input) {
    detail::check_rank("maxpool2x2", input, 4);
    const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (h % 2 != 0 || w % 2 != 0)
        throw std::invalid_argument("maxpool2x2: spatial dims must be even, got " + shape_string(input.shape()));
    const int oh = h / 2, ow = w / 2;
    Tensor<S> out(Shape{n, c, oh, ow});
    std::vector<std::int64_t> idx(static_cast<std::size_t>(out.numel()));
    const S* x = input.data().data();
    std::int64_t o = 0;
    for (int i = 0; i < n; ++i) {
        for (int ch = 0; ch < c; ++ch) {
            const std::int64_t base = (static_cast<std::int64_t>(i) * c + ch) * h * w;
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox, ++o) {
                    std::int64_t best = base + (2 * oy) * w + 2 * ox;
                    S best_v = x[best];
                    for (int dy = 0; dy < 2; ++dy) {
                        for (int dx = 0; dx < 2; ++dx) {
                            const std::int64_t p = base + (2 * oy + dy) * w + (2 * ox + dx);
                            if (x[p] > best_v) {
                                best_v = x[p];
                                best = p;
                            }
                        }
                    }
                    out.data()[o] = best_v;
                    idx[static_cast<std::size_t>(o)] = best;
                }
            }
        }
    }
    IndexArray indices(out.shape(), std::move(idx));
    if (auto* tape = Tape<S>::current(); tape && input.requires_grad()) {
        out.set_requires_grad(true);
        auto xi = input.impl();
        auto oi = out.impl();
        auto ind = indices.data;
        tape->record(oi, [xi, oi, ind] {
            if (oi->grad.empty()) return;
            detail::ensure_grad(*xi);
            for (std::size_t i = 0; i < oi->grad.size(); ++i) xi->grad[(*ind)[i]] += oi->grad[i];
        });
    }
    return {out, indices};
}

/// Scatters pooled values back to their recorded positions; everything else
/// is zero. out_shape must double the pooled spatial dims.
template <typename S>
Tensor<S> max_unpool2x2(const Tensor<S>& pooled, const IndexArray& indices, const Shape& out_shape) {
    detail::check_rank("max_unpool2x2", pooled, 4);
    if (indices.shape != pooled.shape())
        throw std::invalid_argument("max_unpool2x2: indices shape " + shape_string(indices.shape) +
                                    " does not match pooled " + shape_string(pooled.shape()));
    if (out_shape.size() != 4 || out_shape[0] != pooled.dim(0) || out_shape[1] != pooled.dim(1) ||
        out_shape[2] != 2 * pooled.dim(2) || out_shape[3] != 2 * pooled.dim(3))
        throw std::invalid_argument("max_unpool2x2: out_shape " + shape_string(out_shape) +
                                    " must double the spatial dims of " + shape_string(pooled.shape()));
    Tensor<S> out(out_shape);
    const std::int64_t limit = out.numel();
    for (std::size_t i = 0; i < indices.data->size(); ++i) {
        const std::int64_t p = (*indices.data)[i];
        if (p < 0 || p >= limit)
            throw std::invalid_argument("max_unpool2x2: index " + std::to_string(p) + " out of range [0, " +
                                        std::to_string(limit) + ")");
        out.data()[p] = pooled.data()[i];
    }
    if (auto* tape = Tape<S>::current(); tape && pooled.requires_grad()) {
        out.set_requires_grad(true);
        auto pi = pooled.impl();
        auto oi = out.impl();
        auto ind = indices.data;
        tape->record(oi, [pi, oi, ind] {
            if (oi->grad.empty()) return;
            detail::ensure_grad(*pi);
            for (std::size_t i = 0; i < pi->grad.size(); ++i) pi->grad[i] += oi->grad[(*ind)[i]];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batch normalization over N,H,W per channel
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> batchnorm2d(const Tensor<S>& input, const Tensor<S>& gamma, const Tensor<S>& beta, Tensor<S>& running_mean,
                      Tensor<S>& running_var, Phase phase, double momentum = 0.1, double epsilon = 1e-5) {
    detail::check_rank("batchnorm2d", input, 4);
    const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c || running_var.numel() != c)
        throw std::invalid_argument("batchnorm2d: parameter size does not match " + std::to_string(c) + " channels");

    const std::int64_t m = static_cast<std::int64_t>(n) * h * w;
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    std::vector<double> mean_c(c), inv_c(c);
    const bool use_batch = phase != Phase::Eval;
    if (use_batch) {
        for (int ch = 0; ch < c; ++ch) {
            double s = 0.0, s2 = 0.0;
            for (int i = 0; i < n; ++i) {
                const S* p = input.data().data() + ((static_cast<std::int64_t>(i) * c + ch) * plane);
                for (std::int64_t j = 0; j < plane; ++j) {
                    s += p[j];
                    s2 += static_cast<double>(p[j]) * p[j];
                }
            }
            const double mu = s / static_cast<double>(m);
            const double var = std::max(0.0, s2 / static_cast<double>(m) - mu * mu);  // biased
            mean_c[ch] = mu;
            inv_c[ch] = 1.0 / std::sqrt(var + epsilon);
            if (phase == Phase::Train) {
                running_mean.data()[ch] = static_cast<S>((1.0 - momentum) * running_mean.data()[ch] + momentum * mu);
                running_var.data()[ch] = static_cast<S>((1.0 - momentum) * running_var.data()[ch] + momentum * var);
            }
        }
    } else {
        for (int ch = 0; ch < c; ++ch) {
            mean_c[ch] = running_mean.data()[ch];
            inv_c[ch] = 1.0 / std::sqrt(static_cast<double>(running_var.data()[ch]) + epsilon);
        }
    }

    Tensor<S> out(input.shape());
    auto xhat = std::make_shared<std::vector<S>>(input.data().size());
    for (int i = 0; i < n; ++i) {
        for (int ch = 0; ch < c; ++ch) {
            const std::int64_t base = (static_cast<std::int64_t>(i) * c + ch) * plane;
            const S g = gamma.data()[ch], b = beta.data()[ch];
            for (std::int64_t j = 0; j < plane; ++j) {
                const S xh = static_cast<S>((input.data()[base + j] - mean_c[ch]) * inv_c[ch]);
                (*xhat)[base + j] = xh;
                out.data()[base + j] = g * xh + b;
            }
        }
    }

    if (auto* tape = Tape<S>::current();
        tape && (input.requires_grad() || gamma.requires_grad() || beta.requires_grad())) {
        out.set_requires_grad(true);
        auto xi = input.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl();
        auto inv = std::make_shared<std::vector<double>>(inv_c);
        tape->record(oi, [xi, gi, bi, oi, xhat, inv, n, c, plane, m, use_batch] {
            if (oi->grad.empty()) return;
            if (gi->requires_grad) detail::ensure_grad(*gi);
            if (bi->requires_grad) detail::ensure_grad(*bi);
            if (xi->requires_grad) detail::ensure_grad(*xi);
            for (int ch = 0; ch < c; ++ch) {
                double sum_g = 0.0, sum_gx = 0.0;
                for (int i = 0; i < n; ++i) {
                    const std::int64_t base = (static_cast<std::int64_t>(i) * c + ch) * plane;
                    for (std::int64_t j = 0; j < plane; ++j) {
                        sum_g += oi->grad[base + j];
                        sum_gx += static_cast<double>(oi->grad[base + j]) * (*xhat)[base + j];
                    }
                }
                if (gi->requires_grad) gi->grad[ch] += static_cast<S>(sum_gx);
                if (bi->requires_grad) bi->grad[ch] += static_cast<S>(sum_g);
                if (xi->requires_grad) {
                    const double scale = gi->value[ch] * (*inv)[ch];
                    const double mg = use_batch ? sum_g / static_cast<double>(m) : 0.0;
                    const double mgx = use_batch ? sum_gx / static_cast<double>(m) : 0.0;
                    for (int i = 0; i < n; ++i) {
                        const std::int64_t base = (static_cast<std::int64_t>(i) * c + ch) * plane;
                        for (std::int64_t j = 0; j < plane; ++j)
                            xi->grad[base + j] +=
                                static_cast<S>(scale * (oi->grad[base + j] - mg - (*xhat)[base + j] * mgx));
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Fully connected
// ---------------------------------------------------------------------------

/// input [N,F] x weight [F,O] + bias [O] -> [N,O].
template <typename S>
Tensor<S> linear(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias) {
    detail::check_rank("linear input", input, 2);
    detail::check_rank("linear weight", weight, 2);
    detail::check_rank("linear bias", bias, 1);
    if (input.dim(1) != weight.dim(0) || bias.dim(0) != weight.dim(1))
        throw std::invalid_argument("linear: shape mismatch, input " + shape_string(input.shape()) + ", weight " +
                                    shape_string(weight.shape()) + ", bias " + shape_string(bias.shape()));
    const int n = input.dim(0), f = input.dim(1), o = weight.dim(1);
    Tensor<S> out(Shape{n, o});
    detail::ConstMapMat<S> x_mat(input.data().data(), n, f);
    detail::ConstMapMat<S> w_mat(weight.data().data(), f, o);
    detail::MapMat<S> out_mat(out.data().data(), n, o);
    out_mat.noalias() = x_mat * w_mat;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < o; ++j) out.data()[static_cast<std::int64_t>(i) * o + j] += bias.data()[j];

    if (auto* tape = Tape<S>::current();
        tape && (input.requires_grad() || weight.requires_grad() || bias.requires_grad())) {
        out.set_requires_grad(true);
        auto xi = input.impl(), wi = weight.impl(), bi = bias.impl(), oi = out.impl();
        tape->record(oi, [xi, wi, bi, oi, n, f, o] {
            if (oi->grad.empty()) return;
            detail::ConstMapMat<S> g_mat(oi->grad.data(), n, o);
            if (xi->requires_grad) {
                detail::ensure_grad(*xi);
                detail::ConstMapMat<S> w_mat(wi->value.data(), f, o);
                detail::MapMat<S> dx_mat(xi->grad.data(), n, f);
                dx_mat.noalias() += g_mat * w_mat.transpose();
            }
            if (wi->requires_grad) {
                detail::ensure_grad(*wi);
                detail::ConstMapMat<S> x_mat(xi->value.data(), n, f);
                detail::MapMat<S> dw_mat(wi->grad.data(), f, o);
                dw_mat.noalias() += x_mat.transpose() * g_mat;
            }
            if (bi->requires_grad) {
                detail::ensure_grad(*bi);
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < o; ++j) bi->grad[j] += oi->grad[static_cast<std::int64_t>(i) * o + j];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Channel plumbing
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_rank("concat_channels", a, 4);
    detail::check_rank("concat_channels", b, 4);
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw std::invalid_argument("concat_channels: incompatible shapes " + shape_string(a.shape()) + " vs " +
                                    shape_string(b.shape()));
    const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), w = a.dim(3);
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    Tensor<S> out(Shape{n, ca + cb, h, w});
    for (int i = 0; i < n; ++i) {
        std::copy_n(a.data().data() + static_cast<std::int64_t>(i) * ca * plane, ca * plane,
                    out.data().data() + static_cast<std::int64_t>(i) * (ca + cb) * plane);
        std::copy_n(b.data().data() + static_cast<std::int64_t>(i) * cb * plane, cb * plane,
                    out.data().data() + (static_cast<std::int64_t>(i) * (ca + cb) + ca) * plane);
    }
    if (auto* tape = Tape<S>::current(); tape && (a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        tape->record(oi, [ai, bi, oi, n, ca, cb, plane] {
            if (oi->grad.empty()) return;
            for (int i = 0; i < n; ++i) {
                const std::int64_t obase = static_cast<std::int64_t>(i) * (ca + cb) * plane;
                if (ai->requires_grad) {
                    detail::ensure_grad(*ai);
                    for (std::int64_t j = 0; j < ca * plane; ++j)
                        ai->grad[static_cast<std::int64_t>(i) * ca * plane + j] += oi->grad[obase + j];
                }
                if (bi->requires_grad) {
                    detail::ensure_grad(*bi);
                    for (std::int64_t j = 0; j < cb * plane; ++j)
                        bi->grad[static_cast<std::int64_t>(i) * cb * plane + j] += oi->grad[obase + ca * plane + j];
                }
            }
        });
    }
    return out;
}

/// Tiles the channel block `times` times: out channel t*C+c copies channel c.
template <typename S>
Tensor<S> repeat_channels(const Tensor<S>& a, int times) {
    detail::check_rank("repeat_channels", a, 4);
    if (times < 1) throw std::invalid_argument("repeat_channels: times must be >= 1");
    const int n = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    Tensor<S> out(Shape{n, c * times, h, w});
    for (int i = 0; i < n; ++i)
        for (int t = 0; t < times; ++t)
            std::copy_n(a.data().data() + static_cast<std::int64_t>(i) * c * plane, c * plane,
                        out.data().data() + (static_cast<std::int64_t>(i) * times + t) * c * plane);
    if (auto* tape = Tape<S>::current(); tape && a.requires_grad()) {
        out.set_requires_grad(true);
        auto ai = a.impl();
        auto oi = out.impl();
        tape->record(oi, [ai, oi, n, c, times, plane] {
            if (oi->grad.empty()) return;
            detail::ensure_grad(*ai);
            for (int i = 0; i < n; ++i)
                for (int t = 0; t < times; ++t)
                    for (std::int64_t j = 0; j < c * plane; ++j)
                        ai->grad[static_cast<std::int64_t>(i) * c * plane + j] +=
                            oi->grad[(static_cast<std::int64_t>(i) * times + t) * c * plane + j];
        });
    }
    return out;
}

/// Softmax over axis 1 ([N,K] rows or NCHW channel fibers), numerically
/// stabilized by max subtraction.
template <typename S>
Tensor<S> softmax_channels(const Tensor<S>& a) {
    if (a.rank() < 2)
        throw std::invalid_argument("softmax_channels: expected rank >= 2, got " + shape_string(a.shape()));
    const int n = a.dim(0), c = a.dim(1);
    const std::int64_t spatial = a.numel() / (static_cast<std::int64_t>(n) * c);
    Tensor<S> out(a.shape());
    for (int i = 0; i < n; ++i) {
        for (std::int64_t s = 0; s < spatial; ++s) {
            const std::int64_t base = static_cast<std::int64_t>(i) * c * spatial + s;
            S mx = a.data()[base];
            for (int ch = 1; ch < c; ++ch) mx = std::max(mx, a.data()[base + ch * spatial]);
            S denom = S(0);
            for (int ch = 0; ch < c; ++ch) {
                const S e = std::exp(a.data()[base + ch * spatial] - mx);
                out.data()[base + ch * spatial] = e;
                denom += e;
            }
            for (int ch = 0; ch < c; ++ch) out.data()[base + ch * spatial] /= denom;
        }
    }
    if (auto* tape = Tape<S>::current(); tape && a.requires_grad()) {
        out.set_requires_grad(true);
        auto ai = a.impl();
        auto oi = out.impl();
        tape->record(oi, [ai, oi, n, c, spatial] {
            if (oi->grad.empty()) return;
            detail::ensure_grad(*ai);
            for (int i = 0; i < n; ++i) {
                for (std::int64_t s = 0; s < spatial; ++s) {
                    const std::int64_t base = static_cast<std::int64_t>(i) * c * spatial + s;
                    S dot = S(0);
                    for (int ch = 0; ch < c; ++ch) dot += oi->grad[base + ch * spatial] * oi->value[base + ch * spatial];
                    for (int ch = 0; ch < c; ++ch)
                        ai->grad[base + ch * spatial] +=
                            oi->value[base + ch * spatial] * (oi->grad[base + ch * spatial] - dot);
                }
            }
        });
    }
    return out;
}

/// Stacks same-shape samples along a new leading batch axis. Plain data
/// assembly for inputs and targets; not differentiable.
template <typename S>
Tensor<S> stack_samples(const std::vector<Tensor<S>>& samples) {
    if (samples.empty()) throw std::invalid_argument("stack_samples: empty batch");
    Shape out_shape = samples[0].shape();
    out_shape.insert(out_shape.begin(), static_cast<int>(samples.size()));
    Tensor<S> out(out_shape);
    const std::int64_t step = samples[0].numel();
    for (std::size_t i = 0; i < samples.size(); ++i) {
        detail::check_same_shape("stack_samples", samples[i], samples[0]);
        std::copy_n(samples[i].data().data(), step, out.data().data() + static_cast<std::int64_t>(i) * step);
    }
    return out;
}

}  // namespace nodnet
