// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors. Precision is a template parameter; the library is
// instantiated for float (training runs) and double (oracle checks).

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace grass {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    Tensor(Shape shape, std::vector<T> data);

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, T value);
    static Tensor scalar(T value);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t bytes() const noexcept { return data_.size() * sizeof(T); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<const T> data() const noexcept { return data_; }
    std::span<T> mutable_data() noexcept { return data_; }

    T operator[](std::size_t i) const { return data_[i]; }
    T& operator[](std::size_t i) { return data_[i]; }

    // Value of a rank-0 or single-element tensor.
    T item() const;

    bool all_finite() const noexcept;

    friend bool operator==(const Tensor& a, const Tensor& b) = default;

private:
    Shape shape_;
    std::vector<T> data_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

} // namespace grass
