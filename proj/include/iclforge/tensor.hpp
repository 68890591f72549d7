#pragma once

// Dense row-major float32 tensor. Plain storage, no views, no autograd;
// gradients are produced by hand-written backward passes in ops.cpp/model.cpp.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <new>
#include <string>
#include <vector>

#include "iclforge/errors.hpp"

namespace iclforge {

// Allocator pinning float buffers to a fixed 64-byte alignment. Optimized
// builds split vectorized loops into peel/body/tail by the buffer address;
// a buffer whose alignment depends on heap history would make the same
// arithmetic round differently between otherwise identical runs.
template <typename T, std::size_t Align>
struct AlignedAlloc {
    using value_type = T;

    AlignedAlloc() = default;
    template <typename U>
    AlignedAlloc(const AlignedAlloc<U, Align>&) {}

    template <typename U>
    struct rebind {
        using other = AlignedAlloc<U, Align>;
    };

    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(Align)));
    }
    void deallocate(T* p, std::size_t) { ::operator delete(p, std::align_val_t(Align)); }

    template <typename U>
    bool operator==(const AlignedAlloc<U, Align>&) const {
        return true;
    }
};

using FloatVec = std::vector<float, AlignedAlloc<float, 64>>;

struct Tensor {
    std::vector<int> shape;
    FloatVec data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) { data.assign(count(shape), 0.0f); }
    Tensor(std::vector<int> s, std::initializer_list<float> v)
        : shape(std::move(s)), data(v.begin(), v.end()) {
        if (data.size() != count(shape)) throw ShapeError("tensor data size does not match shape");
    }

    static std::size_t count(const std::vector<int>& s) {
        std::size_t n = 1;
        for (int d : s) {
            if (d < 0) throw ShapeError("negative extent");
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
    std::size_t numel() const { return data.size(); }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    float* ptr() { return data.data(); }
    const float* ptr() const { return data.data(); }

    float& at(int i) { return data[static_cast<std::size_t>(i)]; }
    float at(int i) const { return data[static_cast<std::size_t>(i)]; }
    float& at(int i, int j) { return data[static_cast<std::size_t>(i) * dim(1) + j]; }
    float at(int i, int j) const { return data[static_cast<std::size_t>(i) * dim(1) + j]; }
    float& at(int i, int j, int k) {
        return data[(static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k];
    }
    float at(int i, int j, int k) const {
        return data[(static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k];
    }

    // Pointer to row i of a rank >= 2 tensor (all trailing dims flattened).
    float* row(int i) { return data.data() + static_cast<std::size_t>(i) * (numel() / dim(0)); }
    const float* row(int i) const {
        return data.data() + static_cast<std::size_t>(i) * (numel() / dim(0));
    }

    void zero() { std::fill(data.begin(), data.end(), 0.0f); }
    void fill(float v) { std::fill(data.begin(), data.end(), v); }

    bool all_finite() const {
        for (float v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_str() const {
        std::string s = "[";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }
};

inline std::string shape_to_string(const std::vector<int>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

inline void require_shape(const Tensor& t, const std::vector<int>& s, const char* what) {
    if (t.shape != s)
        throw ShapeError(std::string(what) + ": expected " + shape_to_string(s) + ", got " + t.shape_str());
}

}  // namespace iclforge
