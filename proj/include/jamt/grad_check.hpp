#pragma once

#include <cmath>
#include <vector>

#include "jamt/error.hpp"
#include "jamt/tensor.hpp"

namespace jamt {

// Compares the taped gradient of a scalar-valued function against central
// finite differences at `point`. Returns the max over coordinates of
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
template <class T, class Fn>
T grad_check(Fn&& fn, TensorT<T> point, T h) {
    if (h <= T(0)) throw ValueError("grad_check step must be > 0");
    point.set_requires_grad(true);
    std::vector<T> analytic;
    {
        TapeT<T> tape;
        TapeScopeT<T> scope(tape);
        TensorT<T> loss = fn(point);
        if (loss.size() != 1) throw ShapeError("grad_check requires a scalar-valued function");
        if (!std::isfinite(loss.item())) throw NumericError("grad_check function produced a non-finite value");
        point.grad();
        point.zero_grad();
        tape.backward(loss);
        analytic = point.grad();
    }
    T max_err = 0;
    const T floor = T(1e-8);
    for (std::int64_t i = 0; i < point.size(); ++i) {
        const T orig = point.data()[i];
        point.data()[i] = orig + h;
        const T f_plus = fn(point).item();
        point.data()[i] = orig - h;
        const T f_minus = fn(point).item();
        point.data()[i] = orig;
        if (!std::isfinite(f_plus) || !std::isfinite(f_minus))
            throw NumericError("grad_check function produced a non-finite value");
        const T numeric = (f_plus - f_minus) / (T(2) * h);
        const T a = analytic[static_cast<std::size_t>(i)];
        const T denom = std::max({std::abs(a), std::abs(numeric), floor});
        max_err = std::max(max_err, std::abs(a - numeric) / denom);
    }
    return max_err;
}

}  // namespace jamt
