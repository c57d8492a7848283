// SPDX-License-Identifier: Apache-2.0
#include "selfroute/tensor.hpp"

#include "selfroute/errors.hpp"

#include <algorithm>
#include <sstream>

namespace selfroute {

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        out << (i ? "," : "") << shape[i];
    }
    out << ']';
    return out.str();
}

namespace {

void check_shape(const Shape& shape) {
    if (shape.empty()) {
        throw ShapeError("tensor shape must have at least one dimension");
    }
    for (auto d : shape) {
        if (d <= 0) {
            throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape));
        }
    }
}

} // namespace

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
    check_shape(shape);
    auto impl = std::make_shared<TensorStorage<T>>();
    impl->data.assign(static_cast<std::size_t>(shape_numel(shape)), value);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return BasicTensor(std::move(impl));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::uninitialized(Shape shape, bool requires_grad) {
    check_shape(shape);
    auto impl = std::make_shared<TensorStorage<T>>();
    impl->data.resize(static_cast<std::size_t>(shape_numel(shape)));
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return BasicTensor(std::move(impl));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from(Shape shape, std::span<const T> values, bool requires_grad) {
    check_shape(shape);
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
        throw ShapeError("shape " + shape_string(shape) + " does not match " + std::to_string(values.size()) +
                         " values");
    }
    auto impl = std::make_shared<TensorStorage<T>>();
    impl->shape = std::move(shape);
    impl->data.assign(values.begin(), values.end());
    impl->requires_grad = requires_grad;
    return BasicTensor(std::move(impl));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
    return full({1}, value, requires_grad);
}

template <typename T>
std::int64_t BasicTensor<T>::dim(int axis) const {
    const auto n = static_cast<int>(impl_->shape.size());
    const int a = axis < 0 ? axis + n : axis;
    if (a < 0 || a >= n) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_string(impl_->shape));
    }
    return impl_->shape[static_cast<std::size_t>(a)];
}

template <typename T>
T BasicTensor<T>::item() const {
    if (impl_->data.size() != 1) {
        throw ContractError("item() on tensor of shape " + shape_string(impl_->shape));
    }
    return impl_->data[0];
}

template <typename T>
std::span<T> BasicTensor<T>::grad() {
    if (impl_->grad.empty()) {
        impl_->grad.assign(impl_->data.size(), T(0));
    }
    return impl_->grad;
}

template <typename T>
std::span<const T> BasicTensor<T>::grad() const {
    if (impl_->grad.empty()) {
        impl_->grad.assign(impl_->data.size(), T(0));
    }
    return impl_->grad;
}

template <typename T>
void BasicTensor<T>::zero_grad() {
    impl_->reset_grad();
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
    return from(impl_->shape, impl_->data, false);
}

template class BasicTensor<float>;
template class BasicTensor<double>;

} // namespace selfroute
