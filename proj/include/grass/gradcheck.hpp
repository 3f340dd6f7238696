// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <concepts>
#include <string>

#include "grass/error.hpp"
#include "grass/tensor.hpp"

namespace grass {

// Central-difference estimate of df/dtheta, one coordinate at a time:
// (f(theta + h e_i) - f(theta - h e_i)) / (2h).
template <typename T, std::invocable<const Tensor<T>&> F>
Tensor<T> finite_difference_gradient(F&& f, const Tensor<T>& theta, T h) {
    if (!(h > T{0})) {
        throw UsageError("finite_difference_gradient: step must be positive");
    }
    Tensor<T> probe = theta;
    Tensor<T> grad = Tensor<T>::zeros(theta.shape());
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const T x = theta[i];
        probe[i] = x + h;
        const T up = static_cast<T>(f(static_cast<const Tensor<T>&>(probe)));
        probe[i] = x - h;
        const T down = static_cast<T>(f(static_cast<const Tensor<T>&>(probe)));
        probe[i] = x;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw NumericalFault("finite_difference_gradient: non-finite f at coordinate " + std::to_string(i));
        }
        grad[i] = (up - down) / (T{2} * h);
    }
    return grad;
}

} // namespace grass
