// SPDX-License-Identifier: Apache-2.0

#include "grass/tensor.hpp"

#include <cmath>
#include <sstream>

#include "grass/error.hpp"

namespace grass {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i != 0) {
            os << ',';
        }
        os << shape[i];
    }
    os << ']';
    return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    for (std::size_t d : shape_) {
        if (d == 0) {
            throw ShapeError("tensor: zero extent in shape " + shape_str(shape_));
        }
    }
    if (shape_numel(shape_) != data_.size()) {
        throw ShapeError("tensor: shape " + shape_str(shape_) + " does not match data length " +
                         std::to_string(data_.size()));
    }
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
    return full(std::move(shape), T{0});
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
    return Tensor(Shape{}, std::vector<T>{value});
}

template <typename T>
T Tensor<T>::item() const {
    if (data_.size() != 1) {
        throw UsageError("tensor: item() on tensor of shape " + shape_str(shape_));
    }
    return data_[0];
}

template <typename T>
bool Tensor<T>::all_finite() const noexcept {
    for (T x : data_) {
        if (!std::isfinite(x)) {
            return false;
        }
    }
    return true;
}

template class Tensor<float>;
template class Tensor<double>;

} // namespace grass
