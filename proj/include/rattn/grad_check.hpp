#pragma once

#include <functional>

#include "rattn/tensor.hpp"

namespace rattn {

/// Worst relative error between an analytic gradient and central finite
/// differences of `loss`. Relative error uses max(|analytic|,|numeric|) with
/// the denominator floored at 1e-8. `sample` > 0 checks a deterministic
/// random subset of coordinates instead of all of them.
template <class T>
double central_diff_check(const std::function<double(const Tensor<T>&)>& loss, const Tensor<T>& x0,
                          const Tensor<T>& analytic, double step, int64_t sample = 0,
                          uint64_t seed = 7) {
    if (step <= 0) throw std::invalid_argument("central_diff_check: step must be positive");
    Tensor<T> x = x0.clone();
    std::vector<int64_t> coords;
    if (sample > 0 && sample < x.numel()) {
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<int64_t> pick(0, x.numel() - 1);
        for (int64_t i = 0; i < sample; ++i) coords.push_back(pick(rng));
    } else {
        coords.resize(x.numel());
        for (int64_t i = 0; i < x.numel(); ++i) coords[i] = i;
    }
    double worst = 0;
    for (int64_t i : coords) {
        T keep = x[i];
        x[i] = keep + static_cast<T>(step);
        double up = loss(x);
        x[i] = keep - static_cast<T>(step);
        double down = loss(x);
        x[i] = keep;
        if (!std::isfinite(up) || !std::isfinite(down))
            throw std::runtime_error("central_diff_check: loss is non-finite");
        double numeric = (up - down) / (2.0 * step);
        double a = static_cast<double>(analytic[i]);
        double denom = std::max(1e-8, std::max(std::abs(a), std::abs(numeric)));
        worst = std::max(worst, std::abs(a - numeric) / denom);
    }
    return worst;
}

/// End-to-end checker: `f` maps a (possibly watched) tensor to a scalar loss.
/// The tape gradient of f at x0 is compared against central differences.
template <class T>
double grad_check(const std::function<Tensor<T>(Tensor<T>&, Tape<T>*)>& f, const Tensor<T>& x0,
                  double step, int64_t sample = 0, uint64_t seed = 7) {
    Tape<T> tape;
    Tensor<T> x = x0.clone();
    tape.watch(x);
    Tensor<T> out = f(x, &tape);
    tape.backward(out);
    Tensor<T> analytic = tape.grad(x);
    auto loss = [&f](const Tensor<T>& xv) {
        Tensor<T> tmp = xv.clone();
        return static_cast<double>(f(tmp, nullptr).item());
    };
    return central_diff_check<T>(loss, x0, analytic, step, sample, seed);
}

}  // namespace rattn
