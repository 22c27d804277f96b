#pragma once

#include <algorithm>
#include <functional>

#include "p2rec/params.hpp"
#include "p2rec/rng.hpp"

namespace p2rec {

struct GradCheckResult {
    double max_rel_error = 0.0;
    size_t coords_checked = 0;
    std::string worst_param;
};

// Compares analytic gradients against central finite differences on a random
// sample of trainable coordinates (about 1%, at least min_per_param each).
// loss_fn(with_grad) must build the graph, run backward into param grads when
// with_grad is set, and return the loss; it must be deterministic across
// calls. Run with T = double.
template <typename T>
GradCheckResult grad_check(ParamSet<T>& params, const std::function<double(bool)>& loss_fn,
                           double h = 1e-5, uint64_t seed = 12345, size_t min_per_param = 2,
                           double sample_fraction = 0.01) {
    params.zero_grads();
    loss_fn(true);
    std::vector<std::vector<T>> analytic(params.size());
    for (size_t i = 0; i < params.size(); ++i) analytic[i] = params[i].grad.v;

    Rng rng(seed);
    GradCheckResult res;
    for (size_t i = 0; i < params.size(); ++i) {
        Param<T>& p = params[i];
        if (!p.trainable) continue;
        size_t n = p.value.numel();
        size_t n_sample = std::min(n, std::max(min_per_param,
                                               static_cast<size_t>(sample_fraction * n)));
        for (size_t s = 0; s < n_sample; ++s) {
            size_t j = rng.uniform_index(n);
            T saved = p.value.v[j];
            p.value.v[j] = saved + static_cast<T>(h);
            double lp = loss_fn(false);
            p.value.v[j] = saved - static_cast<T>(h);
            double lm = loss_fn(false);
            p.value.v[j] = saved;
            double numeric = (lp - lm) / (2.0 * h);
            double a = static_cast<double>(analytic[i][j]);
            double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-6});
            double rel = std::fabs(a - numeric) / denom;
            ++res.coords_checked;
            if (rel > res.max_rel_error) {
                res.max_rel_error = rel;
                res.worst_param = p.name;
            }
        }
    }
    return res;
}

}  // namespace p2rec
