#pragma once

// Adam with bias correction, plus global-norm gradient clipping.
// Moment tensors are kept in a flat list aligned with the parameter list.

#include <span>
#include <vector>

#include "iclforge/tensor.hpp"

namespace iclforge {

struct AdamConfig {
    float beta1 = 0.9f;
    float beta2 = 0.99f;
    float eps = 1e-8f;
};

struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    long step = 0;  // completed update count

    static AdamState init(std::span<const Tensor* const> params);
};

// One update over all parameter/gradient pairs; increments state.step once.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads,
               AdamState& state, float lr, const AdamConfig& cfg = {});

double global_grad_norm(std::span<const Tensor* const> grads);

// Scales all gradients by max_norm/norm when norm exceeds max_norm.
// Returns the pre-clip norm. Applying it twice gives identical bytes.
double clip_global_norm(std::span<Tensor* const> grads, double max_norm);

}  // namespace iclforge
