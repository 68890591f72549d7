#include "iclforge/ops.hpp"

#include <cmath>
#include <cstring>

namespace iclforge {
namespace kernels {

void matmul_acc(const float* a, const float* b, float* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const float* ar = a + static_cast<std::size_t>(i) * k;
        float* cr = c + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const float av = ar[p];
            const float* br = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

void matmul(const float* a, const float* b, float* c, int m, int k, int n) {
    std::memset(c, 0, static_cast<std::size_t>(m) * n * sizeof(float));
    matmul_acc(a, b, c, m, k, n);
}

void matmul_at_b_acc(const float* a, const float* b, float* c, int m, int k, int n) {
    // c[m,n] += a[k,m]^T b[k,n]
    for (int p = 0; p < k; ++p) {
        const float* ar = a + static_cast<std::size_t>(p) * m;
        const float* br = b + static_cast<std::size_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            const float av = ar[i];
            float* cr = c + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

void matmul_a_bt_acc(const float* a, const float* b, float* c, int m, int k, int n) {
    // c[m,n] += a[m,k] b[n,k]^T : rows of b are contiguous, use dot products
    for (int i = 0; i < m; ++i) {
        const float* ar = a + static_cast<std::size_t>(i) * k;
        float* cr = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const float* br = b + static_cast<std::size_t>(j) * k;
            float s = 0.0f;
            for (int p = 0; p < k; ++p) s += ar[p] * br[p];
            cr[j] += s;
        }
    }
}

void linear(const float* x, const float* w, const float* b, float* y, int m, int k, int n) {
    for (int i = 0; i < m; ++i) std::memcpy(y + static_cast<std::size_t>(i) * n, b, n * sizeof(float));
    matmul_acc(x, w, y, m, k, n);
}

void linear_backward(const float* x, const float* w, const float* dy, float* dx, float* dw,
                     float* db, int m, int k, int n) {
    if (dx) matmul_a_bt_acc(dy, w, dx, m, n, k);
    matmul_at_b_acc(x, dy, dw, k, m, n);
    for (int i = 0; i < m; ++i) {
        const float* dr = dy + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) db[j] += dr[j];
    }
}

void softmax_row(float* row, int n) {
    float mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    float sum = 0.0f;
    for (int j = 0; j < n; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
    }
    const float inv = 1.0f / sum;
    for (int j = 0; j < n; ++j) row[j] *= inv;
}

void causal_attention(const float* q, const float* k, const float* v, float* out, float* weights,
                      int T, int dh) {
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    std::memset(weights, 0, static_cast<std::size_t>(T) * T * sizeof(float));
    for (int i = 0; i < T; ++i) {
        const float* qi = q + static_cast<std::size_t>(i) * dh;
        float* wrow = weights + static_cast<std::size_t>(i) * T;
        for (int j = 0; j <= i; ++j) {
            const float* kj = k + static_cast<std::size_t>(j) * dh;
            float s = 0.0f;
            for (int p = 0; p < dh; ++p) s += qi[p] * kj[p];
            wrow[j] = s * scale;
        }
        softmax_row(wrow, i + 1);
        float* oi = out + static_cast<std::size_t>(i) * dh;
        std::memset(oi, 0, dh * sizeof(float));
        for (int j = 0; j <= i; ++j) {
            const float wij = wrow[j];
            const float* vj = v + static_cast<std::size_t>(j) * dh;
            for (int p = 0; p < dh; ++p) oi[p] += wij * vj[p];
        }
    }
}

void causal_attention_backward(const float* q, const float* k, const float* v,
                               const float* weights, const float* dout, float* dq, float* dk,
                               float* dv, float* scratch, int T, int dh) {
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    float* dw = scratch;                                   // [T,T]
    float* ds = scratch + static_cast<std::size_t>(T) * T;  // [T,T]
    // dv = W^T dout (entries above the diagonal are zero, so the full product is exact)
    matmul_at_b_acc(weights, dout, dv, T, T, dh);
    // dW_ij = dout_i . v_j
    std::memset(dw, 0, static_cast<std::size_t>(T) * T * sizeof(float));
    matmul_a_bt_acc(dout, v, dw, T, dh, T);
    // softmax backward per row: dS_ij = W_ij (dW_ij - sum_l W_il dW_il)
    for (int i = 0; i < T; ++i) {
        const float* wrow = weights + static_cast<std::size_t>(i) * T;
        const float* dwrow = dw + static_cast<std::size_t>(i) * T;
        float* dsrow = ds + static_cast<std::size_t>(i) * T;
        float dot = 0.0f;
        for (int j = 0; j <= i; ++j) dot += wrow[j] * dwrow[j];
        for (int j = 0; j <= i; ++j) dsrow[j] = wrow[j] * (dwrow[j] - dot) * scale;
        for (int j = i + 1; j < T; ++j) dsrow[j] = 0.0f;
    }
    // dq += dS k ; dk += dS^T q
    matmul_acc(ds, k, dq, T, T, dh);
    matmul_at_b_acc(ds, q, dk, T, T, dh);
}

void layer_norm(const float* x, const float* gain, const float* bias, float* y, int rows, int n,
                float eps) {
    const float invn = 1.0f / static_cast<float>(n);
    for (int r = 0; r < rows; ++r) {
        const float* xr = x + static_cast<std::size_t>(r) * n;
        float* yr = y + static_cast<std::size_t>(r) * n;
        float mu = 0.0f;
        for (int j = 0; j < n; ++j) mu += xr[j];
        mu *= invn;
        float var = 0.0f;
        for (int j = 0; j < n; ++j) {
            const float d = xr[j] - mu;
            var += d * d;
        }
        var *= invn;
        const float inv_sd = 1.0f / std::sqrt(var + eps);
        for (int j = 0; j < n; ++j) yr[j] = gain[j] * ((xr[j] - mu) * inv_sd) + bias[j];
    }
}

void layer_norm_backward(const float* x, const float* gain, const float* dy, float* dx,
                         float* dgain, float* dbias, int rows, int n, float eps) {
    const float invn = 1.0f / static_cast<float>(n);
    for (int r = 0; r < rows; ++r) {
        const float* xr = x + static_cast<std::size_t>(r) * n;
        const float* dyr = dy + static_cast<std::size_t>(r) * n;
        float* dxr = dx + static_cast<std::size_t>(r) * n;
        float mu = 0.0f;
        for (int j = 0; j < n; ++j) mu += xr[j];
        mu *= invn;
        float var = 0.0f;
        for (int j = 0; j < n; ++j) {
            const float d = xr[j] - mu;
            var += d * d;
        }
        var *= invn;
        const float inv_sd = 1.0f / std::sqrt(var + eps);
        float sum_g = 0.0f, sum_gx = 0.0f;
        for (int j = 0; j < n; ++j) {
            const float xhat = (xr[j] - mu) * inv_sd;
            const float g = gain[j] * dyr[j];
            sum_g += g;
            sum_gx += g * xhat;
            dgain[j] += dyr[j] * xhat;
            dbias[j] += dyr[j];
        }
        sum_g *= invn;
        sum_gx *= invn;
        for (int j = 0; j < n; ++j) {
            const float xhat = (xr[j] - mu) * inv_sd;
            dxr[j] += (gain[j] * dyr[j] - sum_g - xhat * sum_gx) * inv_sd;
        }
    }
}

namespace {
constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715f;
}  // namespace

void gelu(const float* x, float* y, float* tanh_cache, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        const float xi = x[i];
        const float t = std::tanh(kGeluC * (xi + kGeluA * xi * xi * xi));
        tanh_cache[i] = t;
        y[i] = 0.5f * xi * (1.0f + t);
    }
}

void gelu_backward(const float* x, const float* tanh_cache, const float* dy, float* dx,
                   std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        const float xi = x[i];
        const float t = tanh_cache[i];
        const float du = kGeluC * (1.0f + 3.0f * kGeluA * xi * xi);
        const float grad = 0.5f * (1.0f + t) + 0.5f * xi * (1.0f - t * t) * du;
        dx[i] += dy[i] * grad;
    }
}

void relu(const float* x, float* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_backward(const float* y, const float* dy, float* dx, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dx[i] += y[i] > 0.0f ? dy[i] : 0.0f;
}

void conv3x3(const float* in, const float* w, const float* b, float* out, int cin, int h, int wd,
             int cout, int stride) {
    const int oh = (h - 1) / stride + 1;
    const int ow = (wd - 1) / stride + 1;
    for (int co = 0; co < cout; ++co) {
        float* oc = out + static_cast<std::size_t>(co) * oh * ow;
        for (int i = 0; i < oh * ow; ++i) oc[i] = b[co];
        for (int ci = 0; ci < cin; ++ci) {
            const float* ic = in + static_cast<std::size_t>(ci) * h * wd;
            const float* wk = w + (static_cast<std::size_t>(co) * cin + ci) * 9;
            for (int oy = 0; oy < oh; ++oy) {
                const int iy0 = oy * stride - 1;
                for (int ox = 0; ox < ow; ++ox) {
                    const int ix0 = ox * stride - 1;
                    float s = 0.0f;
                    for (int ky = 0; ky < 3; ++ky) {
                        const int iy = iy0 + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            const int ix = ix0 + kx;
                            if (ix < 0 || ix >= wd) continue;
                            s += wk[ky * 3 + kx] * ic[iy * wd + ix];
                        }
                    }
                    oc[oy * ow + ox] += s;
                }
            }
        }
    }
}

void conv3x3_backward(const float* in, const float* w, const float* dout, float* din, float* dw,
                      float* db, int cin, int h, int wd, int cout, int stride) {
    const int oh = (h - 1) / stride + 1;
    const int ow = (wd - 1) / stride + 1;
    for (int co = 0; co < cout; ++co) {
        const float* doc = dout + static_cast<std::size_t>(co) * oh * ow;
        for (int i = 0; i < oh * ow; ++i) db[co] += doc[i];
        for (int ci = 0; ci < cin; ++ci) {
            const float* ic = in + static_cast<std::size_t>(ci) * h * wd;
            float* dic = din ? din + static_cast<std::size_t>(ci) * h * wd : nullptr;
            const float* wk = w + (static_cast<std::size_t>(co) * cin + ci) * 9;
            float* dwk = dw + (static_cast<std::size_t>(co) * cin + ci) * 9;
            for (int oy = 0; oy < oh; ++oy) {
                const int iy0 = oy * stride - 1;
                for (int ox = 0; ox < ow; ++ox) {
                    const int ix0 = ox * stride - 1;
                    const float g = doc[oy * ow + ox];
                    for (int ky = 0; ky < 3; ++ky) {
                        const int iy = iy0 + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            const int ix = ix0 + kx;
                            if (ix < 0 || ix >= wd) continue;
                            dwk[ky * 3 + kx] += g * ic[iy * wd + ix];
                            if (dic) dic[iy * wd + ix] += g * wk[ky * 3 + kx];
                        }
                    }
                }
            }
        }
    }
}

void conv1x1_s2(const float* in, const float* w, const float* b, float* out, int cin, int h,
                int wd, int cout) {
    const int oh = (h - 1) / 2 + 1;
    const int ow = (wd - 1) / 2 + 1;
    for (int co = 0; co < cout; ++co) {
        float* oc = out + static_cast<std::size_t>(co) * oh * ow;
        for (int i = 0; i < oh * ow; ++i) oc[i] = b[co];
        for (int ci = 0; ci < cin; ++ci) {
            const float* ic = in + static_cast<std::size_t>(ci) * h * wd;
            const float wv = w[static_cast<std::size_t>(co) * cin + ci];
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) oc[oy * ow + ox] += wv * ic[(oy * 2) * wd + ox * 2];
        }
    }
}

void conv1x1_s2_backward(const float* in, const float* w, const float* dout, float* din, float* dw,
                         float* db, int cin, int h, int wd, int cout) {
    const int oh = (h - 1) / 2 + 1;
    const int ow = (wd - 1) / 2 + 1;
    for (int co = 0; co < cout; ++co) {
        const float* doc = dout + static_cast<std::size_t>(co) * oh * ow;
        for (int i = 0; i < oh * ow; ++i) db[co] += doc[i];
        for (int ci = 0; ci < cin; ++ci) {
            const float* ic = in + static_cast<std::size_t>(ci) * h * wd;
            float* dic = din ? din + static_cast<std::size_t>(ci) * h * wd : nullptr;
            const float wv = w[static_cast<std::size_t>(co) * cin + ci];
            float acc = 0.0f;
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    const float g = doc[oy * ow + ox];
                    acc += g * ic[(oy * 2) * wd + ox * 2];
                    if (dic) dic[(oy * 2) * wd + ox * 2] += g * wv;
                }
            dw[static_cast<std::size_t>(co) * cin + ci] += acc;
        }
    }
}

void global_avg_pool(const float* in, float* out, int c, int hw) {
    const float inv = 1.0f / static_cast<float>(hw);
    for (int ci = 0; ci < c; ++ci) {
        const float* ic = in + static_cast<std::size_t>(ci) * hw;
        float s = 0.0f;
        for (int i = 0; i < hw; ++i) s += ic[i];
        out[ci] = s * inv;
    }
}

void global_avg_pool_backward(const float* dout, float* din, int c, int hw) {
    const float inv = 1.0f / static_cast<float>(hw);
    for (int ci = 0; ci < c; ++ci) {
        const float g = dout[ci] * inv;
        float* dc = din + static_cast<std::size_t>(ci) * hw;
        for (int i = 0; i < hw; ++i) dc[i] += g;
    }
}

}  // namespace kernels

// ---- Tensor-level wrappers ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul: rank-2 tensors required");
    if (a.dim(1) != b.dim(0))
        throw ShapeError("matmul: inner dims differ, " + a.shape_str() + " x " + b.shape_str());
    Tensor c({a.dim(0), b.dim(1)});
    kernels::matmul(a.ptr(), b.ptr(), c.ptr(), a.dim(0), a.dim(1), b.dim(1));
    return c;
}

void matmul_backward(const Tensor& a, const Tensor& b, const Tensor& dout, Tensor& da, Tensor& db) {
    require_shape(dout, {a.dim(0), b.dim(1)}, "matmul_backward dout");
    require_shape(da, a.shape, "matmul_backward da");
    require_shape(db, b.shape, "matmul_backward db");
    kernels::matmul_a_bt_acc(dout.ptr(), b.ptr(), da.ptr(), a.dim(0), b.dim(1), a.dim(1));
    kernels::matmul_at_b_acc(a.ptr(), dout.ptr(), db.ptr(), a.dim(1), a.dim(0), b.dim(1));
}

AttentionOut causal_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    if (q.rank() != 2 || !q.same_shape(k) || !q.same_shape(v))
        throw ShapeError("causal_attention: q,k,v must share shape [T,dh]");
    const int T = q.dim(0), dh = q.dim(1);
    AttentionOut r{Tensor({T, dh}), Tensor({T, T})};
    kernels::causal_attention(q.ptr(), k.ptr(), v.ptr(), r.out.ptr(), r.weights.ptr(), T, dh);
    return r;
}

void causal_attention_backward(const Tensor& q, const Tensor& k, const Tensor& v,
                               const Tensor& weights, const Tensor& dout, Tensor& dq, Tensor& dk,
                               Tensor& dv) {
    const int T = q.dim(0), dh = q.dim(1);
    require_shape(weights, {T, T}, "attention weights");
    require_shape(dout, {T, dh}, "attention dout");
    FloatVec scratch(static_cast<std::size_t>(2) * T * T);
    kernels::causal_attention_backward(q.ptr(), k.ptr(), v.ptr(), weights.ptr(), dout.ptr(),
                                       dq.ptr(), dk.ptr(), dv.ptr(), scratch.data(), T, dh);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
    const int n = x.dim(x.rank() - 1);
    require_shape(gain, {n}, "layer_norm gain");
    require_shape(bias, {n}, "layer_norm bias");
    Tensor y(x.shape);
    kernels::layer_norm(x.ptr(), gain.ptr(), bias.ptr(), y.ptr(),
                        static_cast<int>(x.numel() / static_cast<std::size_t>(n)), n, eps);
    return y;
}

void layer_norm_backward(const Tensor& x, const Tensor& gain, const Tensor& dy, Tensor& dx,
                         Tensor& dgain, Tensor& dbias, float eps) {
    const int n = x.dim(x.rank() - 1);
    kernels::layer_norm_backward(x.ptr(), gain.ptr(), dy.ptr(), dx.ptr(), dgain.ptr(), dbias.ptr(),
                                 static_cast<int>(x.numel() / static_cast<std::size_t>(n)), n, eps);
}

Tensor gelu(const Tensor& x) {
    Tensor y(x.shape);
    FloatVec cache(x.numel());
    kernels::gelu(x.ptr(), y.ptr(), cache.data(), x.numel());
    return y;
}

void gelu_backward(const Tensor& x, const Tensor& dy, Tensor& dx) {
    FloatVec y(x.numel()), cache(x.numel());
    kernels::gelu(x.ptr(), y.data(), cache.data(), x.numel());
    kernels::gelu_backward(x.ptr(), cache.data(), dy.ptr(), dx.ptr(), x.numel());
}

double softmax_xent_last(const Tensor& logits, int target, Tensor& dlogits) {
    if (logits.rank() != 2) throw ShapeError("softmax_xent_last: [T,V] logits required");
    const int T = logits.dim(0), V = logits.dim(1);
    if (target < 0 || target >= V) throw ShapeError("softmax_xent_last: target out of range");
    require_shape(dlogits, logits.shape, "softmax_xent_last dlogits");
    const float* row = logits.row(T - 1);
    double mx = row[0];
    for (int j = 1; j < V; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double sum = 0.0;
    for (int j = 0; j < V; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
    const double loss = -(static_cast<double>(row[target]) - mx - std::log(sum));
    dlogits.zero();
    float* drow = dlogits.row(T - 1);
    for (int j = 0; j < V; ++j)
        drow[j] = static_cast<float>(std::exp(static_cast<double>(row[j]) - mx) / sum);
    drow[target] -= 1.0f;
    return loss;
}

double softmax_xent_last(const Tensor& logits, int target) {
    Tensor scratch(logits.shape);
    return softmax_xent_last(logits, target, scratch);
}

}  // namespace iclforge
