// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace selfroute {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Type-erased part of a tensor that the tape needs: identity and grad reset.
class TensorNode {
public:
    virtual ~TensorNode() = default;
    virtual void reset_grad() = 0;

    std::int64_t node = -1; ///< tape position of the producing op, -1 for leaves
};

/// std::allocator that default-initializes on value-less construction, so
/// resizing a buffer of arithmetic type leaves the new elements unwritten.
template <typename T>
struct DefaultInitAllocator : std::allocator<T> {
    template <typename U>
    struct rebind {
        using other = DefaultInitAllocator<U>;
    };
    DefaultInitAllocator() noexcept = default;
    template <typename U>
    DefaultInitAllocator(const DefaultInitAllocator<U>&) noexcept {}

    template <typename U>
    void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
        ::new (static_cast<void*>(p)) U;
    }
    template <typename U, typename... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

template <typename T>
using Buffer = std::vector<T, DefaultInitAllocator<T>>;

template <typename T>
struct TensorStorage final : TensorNode {
    Shape shape;
    Buffer<T> data;
    Buffer<T> grad; ///< empty until first touched
    bool requires_grad = false;

    void reset_grad() override {
        if (!grad.empty()) {
            std::fill(grad.begin(), grad.end(), T(0));
        }
    }
};

/// Dense row-major array participating in reverse-mode autodiff.
///
/// A tensor is a shared handle: copies refer to the same storage, which is
/// what lets recorded backward rules find the tensors they write into. The
/// last dimension is the "column" dimension; all leading dimensions are
/// flattened into rows by the primitives.
template <typename T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() = default;

    static BasicTensor zeros(Shape shape, bool requires_grad = false);
    static BasicTensor full(Shape shape, T value, bool requires_grad = false);
    static BasicTensor from(Shape shape, std::span<const T> values, bool requires_grad = false);
    static BasicTensor from(Shape shape, std::initializer_list<T> values, bool requires_grad = false) {
        return from(std::move(shape), std::span<const T>(values.begin(), values.size()), requires_grad);
    }
    /// Values left unwritten; for producers that assign every element.
    static BasicTensor uninitialized(Shape shape, bool requires_grad = false);
    static BasicTensor scalar(T value, bool requires_grad = false);

    bool defined() const noexcept { return static_cast<bool>(impl_); }

    const Shape& shape() const { return impl_->shape; }
    std::int64_t dim(int axis) const;
    std::size_t ndim() const { return impl_->shape.size(); }
    std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }
    std::int64_t cols() const { return impl_->shape.back(); }
    std::int64_t rows() const { return numel() / cols(); }

    std::span<T> data() { return impl_->data; }
    std::span<const T> data() const { return impl_->data; }
    T* ptr() { return impl_->data.data(); }
    const T* ptr() const { return impl_->data.data(); }
    T item() const;

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool value) { impl_->requires_grad = value; }

    /// Gradient buffer, allocated (zero-filled) on first access.
    std::span<T> grad();
    std::span<const T> grad() const;
    bool has_grad() const { return !impl_->grad.empty(); }
    void zero_grad();
    /// Back to "no gradient"; the buffer's memory is kept for reuse.
    void release_grad() { impl_->grad.clear(); }

    /// Fresh storage with the same values and no autodiff history.
    BasicTensor detach() const;

    bool same(const BasicTensor& other) const noexcept { return impl_ == other.impl_; }

    const std::shared_ptr<TensorStorage<T>>& storage() const { return impl_; }

private:
    explicit BasicTensor(std::shared_ptr<TensorStorage<T>> impl) : impl_(std::move(impl)) {}

    std::shared_ptr<TensorStorage<T>> impl_;
};

using Tensor = BasicTensor<float>;

extern template class BasicTensor<float>;
extern template class BasicTensor<double>;

} // namespace selfroute
