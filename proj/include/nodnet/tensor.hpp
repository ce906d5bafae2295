#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nodnet {

/// Dimension list, row-major layout. An empty shape is a rank-0 scalar.
using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

namespace detail {

template <typename S>
struct TensorImpl {
    Shape shape;
    std::vector<S> value;
    std::vector<S> grad;  // empty until first touched
    bool requires_grad = false;
};

}  // namespace detail

/// Dense row-major tensor (NCHW convention for 4-d data) with optional
/// gradient storage. Value-semantic handle over shared storage; the free
/// functions in ops.hpp register backward closures on the active Tape when
/// any input requires gradients. Scalar type is float for training and
/// double for finite-difference gradient checks.
template <typename S>
class Tensor {
  public:
    using Scalar = S;

    Tensor() : Tensor(Shape{}) {}

    explicit Tensor(Shape shape, S fill = S(0), bool requires_grad = false)
        : impl_(std::make_shared<detail::TensorImpl<S>>()) {
        validate_dims(shape);
        impl_->shape = std::move(shape);
        impl_->value.assign(static_cast<std::size_t>(shape_numel(impl_->shape)), fill);
        impl_->requires_grad = requires_grad;
    }

    static Tensor from_data(Shape shape, std::vector<S> data, bool requires_grad = false) {
        validate_dims(shape);
        if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
            throw std::invalid_argument("Tensor: shape " + shape_string(shape) + " does not match data length " +
                                        std::to_string(data.size()));
        Tensor t;
        t.impl_->shape = std::move(shape);
        t.impl_->value = std::move(data);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(S v, bool requires_grad = false) {
        return from_data({}, {v}, requires_grad);
    }

    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int i) const { return impl_->shape.at(static_cast<std::size_t>(i)); }
    std::int64_t numel() const { return static_cast<std::int64_t>(impl_->value.size()); }
    bool empty() const { return impl_->value.empty(); }

    std::span<S> data() { return impl_->value; }
    std::span<const S> data() const { return impl_->value; }

    /// Sole element of a one-element tensor.
    S item() const {
        if (numel() != 1)
            throw std::invalid_argument("Tensor::item: tensor has " + std::to_string(numel()) + " elements");
        return impl_->value[0];
    }

    template <typename... I>
    S& at(I... idx) {
        return impl_->value[offset(idx...)];
    }
    template <typename... I>
    S at(I... idx) const {
        return impl_->value[offset(idx...)];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        impl_->requires_grad = b;
        return *this;
    }

    bool grad_allocated() const { return !impl_->grad.empty(); }

    /// Gradient buffer, zero-initialized on first access.
    std::span<S> grad() {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->value.size(), S(0));
        return impl_->grad;
    }
    std::span<const S> grad() const {
        if (impl_->grad.empty())
            throw std::logic_error("Tensor::grad: no gradient has been recorded");
        return impl_->grad;
    }

    void zero_grad() {
        if (!impl_->grad.empty()) impl_->grad.assign(impl_->value.size(), S(0));
    }

    /// Deep copy of the values (gradient not copied).
    Tensor clone() const {
        return from_data(impl_->shape, impl_->value, impl_->requires_grad);
    }

    template <typename T>
    Tensor<T> cast() const {
        std::vector<T> out(impl_->value.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(impl_->value[i]);
        return Tensor<T>::from_data(impl_->shape, std::move(out), impl_->requires_grad);
    }

    bool all_finite() const {
        for (S v : impl_->value)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    std::shared_ptr<detail::TensorImpl<S>>& impl() { return impl_; }
    const std::shared_ptr<detail::TensorImpl<S>>& impl() const { return impl_; }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  private:
    static void validate_dims(const Shape& shape) {
        for (int d : shape)
            if (d < 0) throw std::invalid_argument("Tensor: negative dimension in " + shape_string(shape));
    }

    template <typename... I>
    std::size_t offset(I... idx) const {
        const int ids[] = {static_cast<int>(idx)...};
        const std::size_t n = sizeof...(idx);
        if (n != impl_->shape.size())
            throw std::invalid_argument("Tensor::at: " + std::to_string(n) + " indices for rank " +
                                        std::to_string(impl_->shape.size()));
        std::size_t off = 0;
        for (std::size_t i = 0; i < n; ++i) off = off * static_cast<std::size_t>(impl_->shape[i]) + static_cast<std::size_t>(ids[i]);
        return off;
    }

    std::shared_ptr<detail::TensorImpl<S>> impl_;
};

/// Integer positions recorded by maxpool2x2_with_indices: for each pooled
/// element, the flat index of its argmax within the pool input tensor.
/// Shared storage so tape closures can hold it without copying.
struct IndexArray {
    Shape shape;
    std::shared_ptr<std::vector<std::int64_t>> data;

    IndexArray() : data(std::make_shared<std::vector<std::int64_t>>()) {}
    IndexArray(Shape s, std::vector<std::int64_t> idx)
        : shape(std::move(s)), data(std::make_shared<std::vector<std::int64_t>>(std::move(idx))) {}

    std::int64_t numel() const { return static_cast<std::int64_t>(data->size()); }
};

}  // namespace nodnet
