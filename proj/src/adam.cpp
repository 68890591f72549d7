#include "iclforge/adam.hpp"

#include <cmath>

namespace iclforge {

AdamState AdamState::init(std::span<const Tensor* const> params) {
    AdamState s;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const Tensor* p : params) {
        s.m.emplace_back(p->shape);
        s.v.emplace_back(p->shape);
    }
    return s;
}

void adam_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads,
               AdamState& state, float lr, const AdamConfig& cfg) {
    if (params.size() != grads.size() || params.size() != state.m.size())
        throw ShapeError("adam_step: param/grad/state list sizes differ");
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const float c1 = 1.0f / static_cast<float>(1.0 - std::pow(cfg.beta1, t));
    const float c2 = 1.0f / static_cast<float>(1.0 - std::pow(cfg.beta2, t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        const Tensor& g = *grads[i];
        Tensor& m = state.m[i];
        Tensor& v = state.v[i];
        if (!p.same_shape(g) || !p.same_shape(m))
            throw ShapeError("adam_step: shape mismatch at tensor " + std::to_string(i));
        float* pp = p.ptr();
        const float* gp = g.ptr();
        float* mp = m.ptr();
        float* vp = v.ptr();
        const std::size_t n = p.numel();
        for (std::size_t j = 0; j < n; ++j) {
            mp[j] = cfg.beta1 * mp[j] + (1.0f - cfg.beta1) * gp[j];
            vp[j] = cfg.beta2 * vp[j] + (1.0f - cfg.beta2) * gp[j] * gp[j];
            const float mhat = mp[j] * c1;
            const float vhat = vp[j] * c2;
            pp[j] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

double global_grad_norm(std::span<const Tensor* const> grads) {
    double sq = 0.0;
    for (const Tensor* g : grads)
        for (float x : g->data) sq += static_cast<double>(x) * static_cast<double>(x);
    return std::sqrt(sq);
}

double clip_global_norm(std::span<Tensor* const> grads, double max_norm) {
    double norm = 0.0;
    for (Tensor* g : grads)
        for (float x : g->data) norm += static_cast<double>(x) * static_cast<double>(x);
    norm = std::sqrt(norm);
    // The tolerance absorbs float rounding in the scaled values: once scaled to
    // the boundary, a second pass must leave the bytes alone.
    if (norm > max_norm * (1.0 + 1e-6)) {
        const float scale = static_cast<float>(max_norm / norm);
        for (Tensor* g : grads)
            for (float& x : g->data) x *= scale;
    }
    return norm;
}

}  // namespace iclforge
