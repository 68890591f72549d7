#pragma once

// Numeric building blocks: forward ops plus hand-derived backward passes.
// The kernel layer works on raw float pointers so the model can run on
// preallocated workspaces; the Tensor layer wraps it with shape checks.

#include "iclforge/tensor.hpp"

namespace iclforge {

// ---- raw kernels (row-major, no aliasing between inputs and outputs) ----
namespace kernels {

// c[m,n] = a[m,k] * b[k,n]
void matmul(const float* a, const float* b, float* c, int m, int k, int n);
// c[m,n] += a[m,k] * b[k,n]
void matmul_acc(const float* a, const float* b, float* c, int m, int k, int n);
// c[m,n] += a[k,m]^T * b[k,n]   (a transposed)
void matmul_at_b_acc(const float* a, const float* b, float* c, int m, int k, int n);
// c[m,n] += a[m,k] * b[n,k]^T   (b transposed)
void matmul_a_bt_acc(const float* a, const float* b, float* c, int m, int k, int n);

// y[m,n] = x[m,k] * w[k,n] + b[n]
void linear(const float* x, const float* w, const float* b, float* y, int m, int k, int n);
// dx += dy * w^T ; dw += x^T * dy ; db += column sums of dy
void linear_backward(const float* x, const float* w, const float* dy, float* dx, float* dw,
                     float* db, int m, int k, int n);

// In-place softmax over the first `n` entries of row.
void softmax_row(float* row, int n);

// Causal single-head attention over T tokens of width dh.
// q,k,v:[T,dh]  out:[T,dh]  weights:[T,T] (strictly lower-triangular incl. diag)
void causal_attention(const float* q, const float* k, const float* v, float* out, float* weights,
                      int T, int dh);
void causal_attention_backward(const float* q, const float* k, const float* v,
                               const float* weights, const float* dout, float* dq, float* dk,
                               float* dv, float* scratch /* [2*T*T] */, int T, int dh);

// Row-wise layer norm with population variance: y = gain * (x-mu)/sqrt(var+eps) + bias.
void layer_norm(const float* x, const float* gain, const float* bias, float* y, int rows, int n,
                float eps);
void layer_norm_backward(const float* x, const float* gain, const float* dy, float* dx,
                         float* dgain, float* dbias, int rows, int n, float eps);

// GELU, tanh approximation. Forward caches tanh(u) for the backward pass.
void gelu(const float* x, float* y, float* tanh_cache, std::size_t n);
void gelu_backward(const float* x, const float* tanh_cache, const float* dy, float* dx,
                   std::size_t n);

void relu(const float* x, float* y, std::size_t n);
void relu_backward(const float* y, const float* dy, float* dx, std::size_t n);

// 3x3 conv, padding 1. in:[cin,h,w] out:[cout,oh,ow], oh=ceil(h/stride).
void conv3x3(const float* in, const float* w, const float* b, float* out, int cin, int h, int wd,
             int cout, int stride);
void conv3x3_backward(const float* in, const float* w, const float* dout, float* din, float* dw,
                      float* db, int cin, int h, int wd, int cout, int stride);
// 1x1 conv, stride 2 (residual shortcut path).
void conv1x1_s2(const float* in, const float* w, const float* b, float* out, int cin, int h,
                int wd, int cout);
void conv1x1_s2_backward(const float* in, const float* w, const float* dout, float* din, float* dw,
                         float* db, int cin, int h, int wd, int cout);

void global_avg_pool(const float* in, float* out, int c, int hw);
void global_avg_pool_backward(const float* dout, float* din, int c, int hw);

}  // namespace kernels

// ---- Tensor-level API ----

Tensor matmul(const Tensor& a, const Tensor& b);
void matmul_backward(const Tensor& a, const Tensor& b, const Tensor& dout, Tensor& da, Tensor& db);

struct AttentionOut {
    Tensor out;      // [T, dh]
    Tensor weights;  // [T, T] post-softmax, zero above the diagonal
};
AttentionOut causal_attention(const Tensor& q, const Tensor& k, const Tensor& v);
void causal_attention_backward(const Tensor& q, const Tensor& k, const Tensor& v,
                               const Tensor& weights, const Tensor& dout, Tensor& dq, Tensor& dk,
                               Tensor& dv);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps = 1e-5f);
void layer_norm_backward(const Tensor& x, const Tensor& gain, const Tensor& dy, Tensor& dx,
                         Tensor& dgain, Tensor& dbias, float eps = 1e-5f);

Tensor gelu(const Tensor& x);
void gelu_backward(const Tensor& x, const Tensor& dy, Tensor& dx);

// Cross-entropy of the last row of `logits` [T,V] against `target`.
// Returns the loss; writes d(loss)/d(logits) (zero except the last row).
double softmax_xent_last(const Tensor& logits, int target, Tensor& dlogits);
double softmax_xent_last(const Tensor& logits, int target);

}  // namespace iclforge
