#pragma once

// Central finite-difference verification of reverse-mode gradients.
// Meant to run on double-precision graphs (eps 1e-5).

#include <functional>

#include "stit/params.hpp"
#include "stit/tensor.hpp"

namespace stit {

// max over components of |analytic - central difference| / max(1, |analytic|)
template <class T>
double finite_difference_check(const std::function<Tensor<T>(Tensor<T>&)>& f, Tensor<T>& x,
                               double eps = 1e-5) {
    x.set_requires_grad(true);
    x.zero_grad();
    {
        Tensor<T> loss = f(x);
        if (loss.numel() != 1)
            throw TensorError("finite_difference_check: f must be scalar-valued");
        backward(loss);
    }
    std::vector<T> analytic = x.grad();
    double worst = 0.0;
    for (size_t i = 0; i < x.numel(); ++i) {
        const T saved = x.data()[i];
        x.data()[i] = saved + T(eps);
        double up;
        {
            NoGradGuard ng;
            up = double(f(x).item());
        }
        x.data()[i] = saved - T(eps);
        double down;
        {
            NoGradGuard ng;
            down = double(f(x).item());
        }
        x.data()[i] = saved;
        if (!std::isfinite(up) || !std::isfinite(down))
            throw TensorError("finite_difference_check: non-finite perturbed value");
        const double numeric = (up - down) / (2.0 * eps);
        const double a = double(analytic[i]);
        const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(a));
        worst = std::max(worst, rel);
    }
    return worst;
}

// same check applied to every entry of a parameter set, against a loss
// recomputed by `f()` (which must read the parameters each call)
template <class T>
double finite_difference_check_params(const std::function<Tensor<T>()>& f, ParameterSet<T>& params,
                                      double eps = 1e-5) {
    params.zero_grads();
    {
        Tensor<T> loss = f();
        if (loss.numel() != 1)
            throw TensorError("finite_difference_check: f must be scalar-valued");
        backward(loss);
    }
    double worst = 0.0;
    for (auto& [name, t] : params.entries()) {
        const std::vector<T> analytic = t.grad();
        for (size_t i = 0; i < t.numel(); ++i) {
            const T saved = t.data()[i];
            t.data()[i] = saved + T(eps);
            double up;
            {
                NoGradGuard ng;
                up = double(f().item());
            }
            t.data()[i] = saved - T(eps);
            double down;
            {
                NoGradGuard ng;
                down = double(f().item());
            }
            t.data()[i] = saved;
            if (!std::isfinite(up) || !std::isfinite(down))
                throw TensorError("finite_difference_check: non-finite perturbed value");
            const double numeric = (up - down) / (2.0 * eps);
            const double a = double(analytic[i]);
            const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(a));
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace stit
