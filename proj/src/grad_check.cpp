#include "iclforge/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace iclforge {

double grad_check(const std::function<double(const Tensor&)>& fn, const Tensor& x,
                  const Tensor& analytic, double eps) {
    require_shape(analytic, x.shape, "grad_check analytic");
    // Entries are judged against their own magnitude or the tensor's gradient
    // scale, whichever is larger. Structurally flat directions (a key-
    // projection bias shifts every attention score in a row equally, so
    // softmax cancels it exactly) have zero analytic gradient but pick up
    // float32 rounding noise in the difference quotient; without the scale
    // floor their relative error is 1 by construction.
    double scale = 0.0;
    for (std::size_t i = 0; i < analytic.numel(); ++i)
        scale = std::max(scale, static_cast<double>(std::abs(analytic.data[i])));
    Tensor probe = x;
    double worst = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const float orig = probe.data[i];
        probe.data[i] = static_cast<float>(orig + eps);
        const double up = fn(probe);
        probe.data[i] = static_cast<float>(orig - eps);
        const double down = fn(probe);
        probe.data[i] = orig;
        const double numeric = (up - down) / (2.0 * eps);
        const double a = static_cast<double>(analytic.data[i]);
        const double denom = std::max({1e-8, std::abs(numeric) + std::abs(a), scale});
        worst = std::max(worst, std::abs(numeric - a) / denom);
    }
    return worst;
}

}  // namespace iclforge
