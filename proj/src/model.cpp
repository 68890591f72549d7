#include "iclforge/model.hpp"

#include <cmath>
#include <cstring>
#include <unordered_map>

#include "iclforge/binio.hpp"
#include "iclforge/ops.hpp"

namespace iclforge {

void ModelConfig::validate() const {
    if (layers < 1 || heads < 1 || embed_dim < 1 || pairs < 1)
        throw ConfigError("layers, heads, embed-dim and pairs must be positive");
    if (label_vocab < 1) throw ConfigError("label-vocab must be positive");
    if (embed_dim % heads != 0)
        throw ConfigError("embed-dim " + std::to_string(embed_dim) + " not divisible by " +
                          std::to_string(heads) + " heads");
    if (!(init_std > 0.0f)) throw ConfigError("init-std must be positive");
    if (embedder == EmbedderKind::linear_vector) {
        if (input_dim < 2) throw ConfigError("linear-vector embedder needs input-dim >= 2");
    } else {
        if (input_h < 8 || input_w < 8) throw ConfigError("conv-raster embedder needs h,w >= 8");
        for (int c : conv_channels)
            if (c < 1) throw ConfigError("conv channels must be positive");
    }
}

namespace {

struct ConvDims {
    int cin, h, w, cout, oh, ow;
};

std::vector<ConvDims> conv_dims(const ModelConfig& c) {
    std::vector<ConvDims> out;
    int h = c.input_h, w = c.input_w, cin = 1;
    for (int ch : c.conv_channels) {
        ConvDims d;
        d.cin = cin;
        d.h = h;
        d.w = w;
        d.cout = ch;
        d.oh = (h - 1) / 2 + 1;
        d.ow = (w - 1) / 2 + 1;
        out.push_back(d);
        cin = ch;
        h = d.oh;
        w = d.ow;
    }
    return out;
}

TransformerModel make_model(const ModelConfig& config) {
    config.validate();
    TransformerModel m;
    m.config = config;
    const int d = config.embed_dim;
    if (config.embedder == EmbedderKind::linear_vector) {
        m.embed_w = Tensor({config.input_dim, d});
        m.embed_b = Tensor({d});
    } else {
        for (const ConvDims& cd : conv_dims(config)) {
            ConvBlockWeights b;
            b.w1 = Tensor({cd.cout, cd.cin, 3, 3});
            b.b1 = Tensor({cd.cout});
            b.w2 = Tensor({cd.cout, cd.cout, 3, 3});
            b.b2 = Tensor({cd.cout});
            b.wp = Tensor({cd.cout, cd.cin});
            b.bp = Tensor({cd.cout});
            m.conv.push_back(std::move(b));
        }
        m.conv_proj_w = Tensor({config.conv_channels.back(), d});
        m.conv_proj_b = Tensor({d});
    }
    m.label_embed = Tensor({config.label_vocab, d});
    m.pos_embed = Tensor({config.tokens(), d});
    for (int l = 0; l < config.layers; ++l) {
        LayerWeights lw;
        lw.ln1_g = Tensor({d});
        lw.ln1_b = Tensor({d});
        lw.qkv_w = Tensor({d, 3 * d});
        lw.qkv_b = Tensor({3 * d});
        lw.attn_w = Tensor({d, d});
        lw.attn_b = Tensor({d});
        lw.ln2_g = Tensor({d});
        lw.ln2_b = Tensor({d});
        lw.fc_w = Tensor({d, config.mlp_dim()});
        lw.fc_b = Tensor({config.mlp_dim()});
        lw.out_w = Tensor({config.mlp_dim(), d});
        lw.out_b = Tensor({d});
        m.layers.push_back(std::move(lw));
    }
    m.lnf_g = Tensor({d});
    m.lnf_b = Tensor({d});
    m.head_w = Tensor({d, config.label_vocab});
    m.head_b = Tensor({config.label_vocab});
    return m;
}

bool is_gain(const std::string& name) {
    return name.size() >= 2 && name.compare(name.size() - 2, 2, ".g") == 0;
}

bool is_bias(const std::string& name) {
    const auto dot = name.rfind('.');
    if (dot == std::string::npos) return false;
    const std::string leaf = name.substr(dot + 1);
    return leaf == "b" || leaf == "b1" || leaf == "b2" || leaf == "bp";
}

}  // namespace

std::vector<ParamRef> param_refs(TransformerModel& m) {
    std::vector<ParamRef> refs;
    if (m.config.embedder == EmbedderKind::linear_vector) {
        refs.push_back({"embed.w", &m.embed_w});
        refs.push_back({"embed.b", &m.embed_b});
    } else {
        for (std::size_t i = 0; i < m.conv.size(); ++i) {
            const std::string p = "conv" + std::to_string(i);
            refs.push_back({p + ".w1", &m.conv[i].w1});
            refs.push_back({p + ".b1", &m.conv[i].b1});
            refs.push_back({p + ".w2", &m.conv[i].w2});
            refs.push_back({p + ".b2", &m.conv[i].b2});
            refs.push_back({p + ".wp", &m.conv[i].wp});
            refs.push_back({p + ".bp", &m.conv[i].bp});
        }
        refs.push_back({"convp.w", &m.conv_proj_w});
        refs.push_back({"convp.b", &m.conv_proj_b});
    }
    refs.push_back({"label_embed.w", &m.label_embed});
    refs.push_back({"pos_embed.w", &m.pos_embed});
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        const std::string p = "layer" + std::to_string(l);
        LayerWeights& lw = m.layers[l];
        refs.push_back({p + ".ln1.g", &lw.ln1_g});
        refs.push_back({p + ".ln1.b", &lw.ln1_b});
        refs.push_back({p + ".qkv.w", &lw.qkv_w});
        refs.push_back({p + ".qkv.b", &lw.qkv_b});
        refs.push_back({p + ".attn.w", &lw.attn_w});
        refs.push_back({p + ".attn.b", &lw.attn_b});
        refs.push_back({p + ".ln2.g", &lw.ln2_g});
        refs.push_back({p + ".ln2.b", &lw.ln2_b});
        refs.push_back({p + ".fc.w", &lw.fc_w});
        refs.push_back({p + ".fc.b", &lw.fc_b});
        refs.push_back({p + ".out.w", &lw.out_w});
        refs.push_back({p + ".out.b", &lw.out_b});
    }
    refs.push_back({"lnf.g", &m.lnf_g});
    refs.push_back({"lnf.b", &m.lnf_b});
    refs.push_back({"head.w", &m.head_w});
    refs.push_back({"head.b", &m.head_b});
    return refs;
}

std::vector<const Tensor*> param_views(const TransformerModel& m) {
    auto refs = param_refs(const_cast<TransformerModel&>(m));
    std::vector<const Tensor*> out;
    out.reserve(refs.size());
    for (const auto& r : refs) out.push_back(r.tensor);
    return out;
}

TransformerModel init_model(const ModelConfig& config, std::uint64_t seed) {
    TransformerModel m = make_model(config);
    auto refs = param_refs(m);
    for (std::size_t i = 0; i < refs.size(); ++i) {
        if (is_bias(refs[i].name)) continue;  // biases stay zero
        if (is_gain(refs[i].name)) {
            refs[i].tensor->fill(1.0f);
            continue;
        }
        RngStream rng(seed, stream_ns::kParamInit | static_cast<std::uint64_t>(i));
        for (float& v : refs[i].tensor->data)
            v = config.init_std * static_cast<float>(rng.next_trunc_gaussian(2.0));
    }
    return m;
}

TransformerModel zeros_like(const TransformerModel& m) { return make_model(m.config); }

long param_count(const ModelConfig& config) {
    TransformerModel m = make_model(config);
    long n = 0;
    for (const auto& r : param_refs(m)) n += static_cast<long>(r.tensor->numel());
    return n;
}

std::vector<TokenRole> token_roles(int pairs) {
    std::vector<TokenRole> roles(static_cast<std::size_t>(2 * pairs + 1));
    for (int p = 0; p < 2 * pairs + 1; ++p)
        roles[static_cast<std::size_t>(p)] =
            p == 2 * pairs ? TokenRole::query : (p % 2 == 0 ? TokenRole::sample : TokenRole::label);
    return roles;
}

// ---- workspace ----

Workspace::Workspace(const ModelConfig& cfg) : config(cfg) {
    config.validate();
    const int T = cfg.tokens(), d = cfg.embed_dim, md = cfg.mlp_dim();
    const int in_floats = cfg.embedder == EmbedderKind::linear_vector ? cfg.input_dim
                                                                      : cfg.input_h * cfg.input_w;
    tokens = Tensor({T, d});
    exemplar_in = Tensor({cfg.pairs + 1, in_floats});
    if (cfg.embedder == EmbedderKind::conv_raster) {
        conv.resize(static_cast<std::size_t>(cfg.pairs) + 1);
        for (auto& cache : conv) {
            for (const ConvDims& cd : conv_dims(cfg)) {
                cache.in.emplace_back(std::vector<int>{cd.cin, cd.h, cd.w});
                cache.act1.emplace_back(std::vector<int>{cd.cout, cd.oh, cd.ow});
                cache.out.emplace_back(std::vector<int>{cd.cout, cd.oh, cd.ow});
            }
            cache.pooled = Tensor({cfg.conv_channels.back()});
        }
    }
    layers.resize(static_cast<std::size_t>(cfg.layers));
    for (auto& a : layers) {
        a.x_in = Tensor({T, d});
        a.ln1 = Tensor({T, d});
        a.qkv = Tensor({T, 3 * d});
        a.attn_w = Tensor({cfg.heads, T, T});
        a.attn_cat = Tensor({T, d});
        a.res1 = Tensor({T, d});
        a.ln2 = Tensor({T, d});
        a.fc_pre = Tensor({T, md});
        a.gelu_t = Tensor({T, md});
        a.gelu_out = Tensor({T, md});
    }
    x_final = Tensor({T, d});
    lnf = Tensor({T, d});
    logits = Tensor({T, cfg.label_vocab});
    d_res = Tensor({T, d});
    d_ln = Tensor({T, d});
    d_cat = Tensor({T, d});
    d_tokens = Tensor({T, d});
    d_qkv = Tensor({T, 3 * d});
    d_fc = Tensor({T, md});
    d_gelu = Tensor({T, md});
    attn_scratch = Tensor({2 * T * T});
    d_logits_last = Tensor({cfg.label_vocab});
    d_lnf_last = Tensor({d});
    d_exemplar = Tensor({in_floats});
}

// ---- embedders ----

void conv_embed(const TransformerModel& m, const float* img, float* out, ConvCache& cache) {
    const auto dims = conv_dims(m.config);
    const float* x = img;
    for (std::size_t b = 0; b < dims.size(); ++b) {
        const ConvDims& cd = dims[b];
        std::memcpy(cache.in[b].ptr(), x, cache.in[b].numel() * 4);
        Tensor& a1 = cache.act1[b];
        Tensor& o = cache.out[b];
        // stride-2 conv, relu, stride-1 conv, plus 1x1 stride-2 shortcut
        kernels::conv3x3(x, m.conv[b].w1.ptr(), m.conv[b].b1.ptr(), a1.ptr(), cd.cin, cd.h, cd.w,
                         cd.cout, 2);
        kernels::relu(a1.ptr(), a1.ptr(), a1.numel());
        kernels::conv3x3(a1.ptr(), m.conv[b].w2.ptr(), m.conv[b].b2.ptr(), o.ptr(), cd.cout, cd.oh,
                         cd.ow, cd.cout, 1);
        FloatVec sc(static_cast<std::size_t>(cd.cout) * cd.oh * cd.ow);
        kernels::conv1x1_s2(x, m.conv[b].wp.ptr(), m.conv[b].bp.ptr(), sc.data(), cd.cin, cd.h,
                            cd.w, cd.cout);
        for (std::size_t i = 0; i < o.numel(); ++i) o.data[i] += sc[i];
        kernels::relu(o.ptr(), o.ptr(), o.numel());
        x = o.ptr();
    }
    const ConvDims& last = dims.back();
    kernels::global_avg_pool(x, cache.pooled.ptr(), last.cout, last.oh * last.ow);
    kernels::linear(cache.pooled.ptr(), m.conv_proj_w.ptr(), m.conv_proj_b.ptr(), out, 1,
                    last.cout, m.config.embed_dim);
}

Tensor conv_embed(const TransformerModel& m, const Tensor& img) {
    if (m.config.embedder != EmbedderKind::conv_raster)
        throw ShapeError("conv_embed on a non-conv model");
    require_shape(img, {1, m.config.input_h, m.config.input_w}, "conv_embed input");
    Workspace ws(m.config);
    Tensor out({m.config.embed_dim});
    conv_embed(m, img.ptr(), out.ptr(), ws.conv[0]);
    return out;
}

namespace {

void conv_embed_backward(const TransformerModel& m, const float* d_out, ConvCache& cache,
                         TransformerModel& g) {
    const auto dims = conv_dims(m.config);
    const ConvDims& last = dims.back();
    const int d = m.config.embed_dim;
    // projection backward (input was the pooled vector)
    FloatVec d_pooled(static_cast<std::size_t>(last.cout), 0.0f);
    kernels::linear_backward(cache.pooled.ptr(), m.conv_proj_w.ptr(), d_out, d_pooled.data(),
                             g.conv_proj_w.ptr(), g.conv_proj_b.ptr(), 1, last.cout, d);
    FloatVec d_x(static_cast<std::size_t>(last.cout) * last.oh * last.ow, 0.0f);
    kernels::global_avg_pool_backward(d_pooled.data(), d_x.data(), last.cout, last.oh * last.ow);
    for (std::size_t b = dims.size(); b-- > 0;) {
        const ConvDims& cd = dims[b];
        Tensor& o = cache.out[b];
        Tensor& a1 = cache.act1[b];
        const float* block_in = cache.in[b].ptr();
        // through the final relu
        FloatVec d_sum(o.numel(), 0.0f);
        kernels::relu_backward(o.ptr(), d_x.data(), d_sum.data(), o.numel());
        // shortcut and main paths both receive d_sum
        FloatVec d_in(cache.in[b].numel(), 0.0f);
        const bool need_d_in = b > 0;
        kernels::conv1x1_s2_backward(block_in, m.conv[b].wp.ptr(), d_sum.data(),
                                     need_d_in ? d_in.data() : nullptr, g.conv[b].wp.ptr(),
                                     g.conv[b].bp.ptr(), cd.cin, cd.h, cd.w, cd.cout);
        FloatVec d_a1(a1.numel(), 0.0f);
        kernels::conv3x3_backward(a1.ptr(), m.conv[b].w2.ptr(), d_sum.data(), d_a1.data(),
                                  g.conv[b].w2.ptr(), g.conv[b].b2.ptr(), cd.cout, cd.oh, cd.ow,
                                  cd.cout, 1);
        FloatVec d_pre1(a1.numel(), 0.0f);
        kernels::relu_backward(a1.ptr(), d_a1.data(), d_pre1.data(), a1.numel());
        kernels::conv3x3_backward(block_in, m.conv[b].w1.ptr(), d_pre1.data(),
                                  need_d_in ? d_in.data() : nullptr, g.conv[b].w1.ptr(),
                                  g.conv[b].b1.ptr(), cd.cin, cd.h, cd.w, cd.cout, 2);
        d_x = std::move(d_in);
    }
}

// Fills ws.exemplar_in and ws.tokens.
void embed_into(const TransformerModel& m, const ExemplarStore& store, const Episode& ep,
                Workspace& ws, bool add_pos = true) {
    const ModelConfig& cfg = m.config;
    const int L = cfg.pairs, d = cfg.embed_dim;
    if (static_cast<int>(ep.context.size()) != L)
        throw ShapeError("episode has " + std::to_string(ep.context.size()) +
                         " context pairs, model expects " + std::to_string(L));
    if (cfg.embedder == EmbedderKind::conv_raster) {
        if (store.kind != StoreKind::raster || store.h != cfg.input_h || store.w != cfg.input_w)
            throw ShapeError("store rasters do not match the conv embedder input");
    } else {
        if (store.kind != StoreKind::vector || store.dim != cfg.input_dim)
            throw ShapeError("store vectors do not match the linear embedder input");
    }
    // gather exemplar floats: context order, then the query
    for (int i = 0; i <= L; ++i) {
        const ExemplarRef ref = i < L ? ep.context[static_cast<std::size_t>(i)].ref : ep.query;
        store.write_floats(ref.class_id, static_cast<int>(ref.index), ws.exemplar_in.row(i));
    }
    const int in_floats = ws.exemplar_in.dim(1);
    for (int i = 0; i <= L; ++i) {
        float* row = ws.tokens.row(2 * i);
        if (cfg.embedder == EmbedderKind::linear_vector) {
            kernels::linear(ws.exemplar_in.row(i), m.embed_w.ptr(), m.embed_b.ptr(), row, 1,
                            in_floats, d);
        } else {
            conv_embed(m, ws.exemplar_in.row(i), row, ws.conv[static_cast<std::size_t>(i)]);
        }
    }
    for (int i = 0; i < L; ++i) {
        const int label = ep.context[static_cast<std::size_t>(i)].label;
        if (label < 0 || label >= cfg.label_vocab)
            throw ShapeError("label " + std::to_string(label) + " outside vocab of " +
                             std::to_string(cfg.label_vocab));
        std::memcpy(ws.tokens.row(2 * i + 1), m.label_embed.row(label), static_cast<std::size_t>(d) * 4);
    }
    if (!add_pos) return;
    for (int t = 0; t < cfg.tokens(); ++t) {
        float* row = ws.tokens.row(t);
        const float* pos = m.pos_embed.row(t);
        for (int j = 0; j < d; ++j) row[j] += pos[j];
    }
}

// Transformer stack over ws.tokens; leaves the final residual stream in
// ws.x_final and all per-layer caches filled.
void run_stack(const TransformerModel& m, Workspace& ws, AttentionTrace* trace) {
    const ModelConfig& cfg = m.config;
    const int T = cfg.tokens(), d = cfg.embed_dim, H = cfg.heads, dh = cfg.head_dim();
    const int md = cfg.mlp_dim();
    Tensor q({T, dh}), k({T, dh}), v({T, dh}), o({T, dh});
    Tensor tmp({T, d});
    std::memcpy(ws.x_final.ptr(), ws.tokens.ptr(), ws.tokens.numel() * 4);
    for (int l = 0; l < cfg.layers; ++l) {
        LayerActs& a = ws.layers[static_cast<std::size_t>(l)];
        const LayerWeights& w = m.layers[static_cast<std::size_t>(l)];
        std::memcpy(a.x_in.ptr(), ws.x_final.ptr(), a.x_in.numel() * 4);
        kernels::layer_norm(a.x_in.ptr(), w.ln1_g.ptr(), w.ln1_b.ptr(), a.ln1.ptr(), T, d, 1e-5f);
        kernels::linear(a.ln1.ptr(), w.qkv_w.ptr(), w.qkv_b.ptr(), a.qkv.ptr(), T, d, 3 * d);
        for (int h = 0; h < H; ++h) {
            for (int t = 0; t < T; ++t) {
                const float* qr = a.qkv.row(t);
                std::memcpy(q.row(t), qr + h * dh, static_cast<std::size_t>(dh) * 4);
                std::memcpy(k.row(t), qr + d + h * dh, static_cast<std::size_t>(dh) * 4);
                std::memcpy(v.row(t), qr + 2 * d + h * dh, static_cast<std::size_t>(dh) * 4);
            }
            float* weights = a.attn_w.ptr() + static_cast<std::size_t>(h) * T * T;
            kernels::causal_attention(q.ptr(), k.ptr(), v.ptr(), o.ptr(), weights, T, dh);
            for (int t = 0; t < T; ++t)
                std::memcpy(a.attn_cat.row(t) + h * dh, o.row(t), static_cast<std::size_t>(dh) * 4);
            if (trace) {
                Tensor& dst = trace->weights[static_cast<std::size_t>(l) * H + h];
                std::memcpy(dst.ptr(), weights, static_cast<std::size_t>(T) * T * 4);
            }
        }
        kernels::linear(a.attn_cat.ptr(), w.attn_w.ptr(), w.attn_b.ptr(), tmp.ptr(), T, d, d);
        for (std::size_t i = 0; i < a.res1.numel(); ++i) a.res1.data[i] = a.x_in.data[i] + tmp.data[i];
        kernels::layer_norm(a.res1.ptr(), w.ln2_g.ptr(), w.ln2_b.ptr(), a.ln2.ptr(), T, d, 1e-5f);
        kernels::linear(a.ln2.ptr(), w.fc_w.ptr(), w.fc_b.ptr(), a.fc_pre.ptr(), T, d, md);
        kernels::gelu(a.fc_pre.ptr(), a.gelu_out.ptr(), a.gelu_t.ptr(), a.fc_pre.numel());
        kernels::linear(a.gelu_out.ptr(), w.out_w.ptr(), w.out_b.ptr(), tmp.ptr(), T, md, d);
        for (std::size_t i = 0; i < ws.x_final.numel(); ++i)
            ws.x_final.data[i] = a.res1.data[i] + tmp.data[i];
    }
}

double xent_last(const float* logits, int vocab, int target, float* d_logits) {
    double mx = logits[0];
    for (int j = 1; j < vocab; ++j) mx = std::max(mx, static_cast<double>(logits[j]));
    double sum = 0.0;
    for (int j = 0; j < vocab; ++j) sum += std::exp(static_cast<double>(logits[j]) - mx);
    const double loss = -(static_cast<double>(logits[target]) - mx - std::log(sum));
    if (d_logits) {
        for (int j = 0; j < vocab; ++j)
            d_logits[j] = static_cast<float>(std::exp(static_cast<double>(logits[j]) - mx) / sum);
        d_logits[target] -= 1.0f;
    }
    return loss;
}

}  // namespace

Tensor embed_episode(const TransformerModel& m, const ExemplarStore& store, const Episode& ep) {
    Workspace ws(m.config);
    embed_into(m, store, ep, ws);
    return ws.tokens;
}

Tensor embed_episode_raw(const TransformerModel& m, const ExemplarStore& store, const Episode& ep) {
    Workspace ws(m.config);
    embed_into(m, store, ep, ws, false);
    return ws.tokens;
}

ForwardResult forward(const TransformerModel& m, const Tensor& embedded, bool capture) {
    const ModelConfig& cfg = m.config;
    const int T = cfg.tokens(), d = cfg.embed_dim, V = cfg.label_vocab;
    require_shape(embedded, {T, d}, "forward input");
    Workspace ws(cfg);
    std::memcpy(ws.tokens.ptr(), embedded.ptr(), embedded.numel() * 4);
    ForwardResult r;
    if (capture) {
        r.has_trace = true;
        r.trace.layers = cfg.layers;
        r.trace.heads = cfg.heads;
        r.trace.tokens = T;
        r.trace.roles = token_roles(cfg.pairs);
        r.trace.weights.assign(static_cast<std::size_t>(cfg.layers) * cfg.heads, Tensor({T, T}));
    }
    run_stack(m, ws, capture ? &r.trace : nullptr);
    kernels::layer_norm(ws.x_final.ptr(), m.lnf_g.ptr(), m.lnf_b.ptr(), ws.lnf.ptr(), T, d, 1e-5f);
    kernels::linear(ws.lnf.ptr(), m.head_w.ptr(), m.head_b.ptr(), ws.logits.ptr(), T, d, V);
    if (!ws.logits.all_finite()) throw NumericError("non-finite logits in forward");
    r.logits = ws.logits;
    return r;
}

ForwardResult forward_episode(const TransformerModel& m, const ExemplarStore& store,
                              const Episode& ep, bool capture) {
    return forward(m, embed_episode(m, store, ep), capture);
}

void query_logits(const TransformerModel& m, const ExemplarStore& store, const Episode& ep,
                  Workspace& ws, float* out_logits) {
    const ModelConfig& cfg = m.config;
    const int T = cfg.tokens(), d = cfg.embed_dim;
    embed_into(m, store, ep, ws);
    run_stack(m, ws, nullptr);
    float* lnf_row = ws.lnf.row(T - 1);
    kernels::layer_norm(ws.x_final.row(T - 1), m.lnf_g.ptr(), m.lnf_b.ptr(), lnf_row, 1, d, 1e-5f);
    kernels::linear(lnf_row, m.head_w.ptr(), m.head_b.ptr(), out_logits, 1, d, cfg.label_vocab);
}

AttentionTrace capture_trace(const TransformerModel& m, const ExemplarStore& store,
                             const Episode& ep, Workspace& ws) {
    const ModelConfig& cfg = m.config;
    AttentionTrace trace;
    trace.layers = cfg.layers;
    trace.heads = cfg.heads;
    trace.tokens = cfg.tokens();
    trace.roles = token_roles(cfg.pairs);
    trace.weights.assign(static_cast<std::size_t>(cfg.layers) * cfg.heads,
                         Tensor({cfg.tokens(), cfg.tokens()}));
    embed_into(m, store, ep, ws);
    run_stack(m, ws, &trace);
    return trace;
}

namespace {

double loss_common(const TransformerModel& m, const ExemplarStore& store, const Episode& ep,
                   Workspace& ws, bool want_grad) {
    const ModelConfig& cfg = m.config;
    const int T = cfg.tokens(), d = cfg.embed_dim, V = cfg.label_vocab;
    if (ep.target < 0 || ep.target >= V)
        throw ShapeError("target " + std::to_string(ep.target) + " outside vocab");
    embed_into(m, store, ep, ws);
    run_stack(m, ws, nullptr);
    // only the final token's prediction is trained
    kernels::layer_norm(ws.x_final.row(T - 1), m.lnf_g.ptr(), m.lnf_b.ptr(), ws.lnf.row(T - 1), 1,
                        d, 1e-5f);
    kernels::linear(ws.lnf.row(T - 1), m.head_w.ptr(), m.head_b.ptr(), ws.logits.row(T - 1), 1, d,
                    V);
    return xent_last(ws.logits.row(T - 1), V, ep.target,
                     want_grad ? ws.d_logits_last.ptr() : nullptr);
}

}  // namespace

double episode_loss(const TransformerModel& m, const ExemplarStore& store, const Episode& ep,
                    Workspace& ws) {
    return loss_common(m, store, ep, ws, false);
}

double episode_loss_grad(const TransformerModel& m, const ExemplarStore& store, const Episode& ep,
                         TransformerModel& g, Workspace& ws) {
    const ModelConfig& cfg = m.config;
    const int T = cfg.tokens(), d = cfg.embed_dim, V = cfg.label_vocab, H = cfg.heads;
    const int dh = cfg.head_dim(), md = cfg.mlp_dim(), L = cfg.pairs;
    const double loss = loss_common(m, store, ep, ws, true);
    if (!std::isfinite(loss)) throw NumericError("non-finite training loss");

    // head: lnf_last was left in ws.lnf.row(T-1)
    ws.d_lnf_last.zero();
    kernels::linear_backward(ws.lnf.row(T - 1), m.head_w.ptr(), ws.d_logits_last.ptr(),
                             ws.d_lnf_last.ptr(), g.head_w.ptr(), g.head_b.ptr(), 1, d, V);
    ws.d_res.zero();
    kernels::layer_norm_backward(ws.x_final.row(T - 1), m.lnf_g.ptr(), ws.d_lnf_last.ptr(),
                                 ws.d_res.row(T - 1), g.lnf_g.ptr(), g.lnf_b.ptr(), 1, d, 1e-5f);

    Tensor q({T, dh}), k({T, dh}), v({T, dh});
    Tensor d_q({T, dh}), d_k({T, dh}), d_v({T, dh}), d_o({T, dh});
    for (int l = cfg.layers - 1; l >= 0; --l) {
        LayerActs& a = ws.layers[static_cast<std::size_t>(l)];
        const LayerWeights& w = m.layers[static_cast<std::size_t>(l)];
        LayerWeights& gw = g.layers[static_cast<std::size_t>(l)];
        // mlp: x_out = res1 + out(gelu(fc(ln2(res1))))
        ws.d_gelu.zero();
        kernels::linear_backward(a.gelu_out.ptr(), w.out_w.ptr(), ws.d_res.ptr(), ws.d_gelu.ptr(),
                                 gw.out_w.ptr(), gw.out_b.ptr(), T, md, d);
        ws.d_fc.zero();
        kernels::gelu_backward(a.fc_pre.ptr(), a.gelu_t.ptr(), ws.d_gelu.ptr(), ws.d_fc.ptr(),
                               a.fc_pre.numel());
        ws.d_ln.zero();
        kernels::linear_backward(a.ln2.ptr(), w.fc_w.ptr(), ws.d_fc.ptr(), ws.d_ln.ptr(),
                                 gw.fc_w.ptr(), gw.fc_b.ptr(), T, d, md);
        kernels::layer_norm_backward(a.res1.ptr(), w.ln2_g.ptr(), ws.d_ln.ptr(), ws.d_res.ptr(),
                                     gw.ln2_g.ptr(), gw.ln2_b.ptr(), T, d, 1e-5f);
        // attention: res1 = x_in + proj(cat)
        ws.d_cat.zero();
        kernels::linear_backward(a.attn_cat.ptr(), w.attn_w.ptr(), ws.d_res.ptr(), ws.d_cat.ptr(),
                                 gw.attn_w.ptr(), gw.attn_b.ptr(), T, d, d);
        ws.d_qkv.zero();
        for (int h = 0; h < H; ++h) {
            for (int t = 0; t < T; ++t) {
                const float* qr = a.qkv.row(t);
                std::memcpy(q.row(t), qr + h * dh, static_cast<std::size_t>(dh) * 4);
                std::memcpy(k.row(t), qr + d + h * dh, static_cast<std::size_t>(dh) * 4);
                std::memcpy(v.row(t), qr + 2 * d + h * dh, static_cast<std::size_t>(dh) * 4);
                std::memcpy(d_o.row(t), ws.d_cat.row(t) + h * dh, static_cast<std::size_t>(dh) * 4);
            }
            d_q.zero();
            d_k.zero();
            d_v.zero();
            kernels::causal_attention_backward(
                q.ptr(), k.ptr(), v.ptr(), a.attn_w.ptr() + static_cast<std::size_t>(h) * T * T,
                d_o.ptr(), d_q.ptr(), d_k.ptr(), d_v.ptr(), ws.attn_scratch.ptr(), T, dh);
            for (int t = 0; t < T; ++t) {
                float* dst = ws.d_qkv.row(t);
                const float* dq = d_q.row(t);
                const float* dk = d_k.row(t);
                const float* dv = d_v.row(t);
                for (int j = 0; j < dh; ++j) {
                    dst[h * dh + j] += dq[j];
                    dst[d + h * dh + j] += dk[j];
                    dst[2 * d + h * dh + j] += dv[j];
                }
            }
        }
        ws.d_ln.zero();
        kernels::linear_backward(a.ln1.ptr(), w.qkv_w.ptr(), ws.d_qkv.ptr(), ws.d_ln.ptr(),
                                 gw.qkv_w.ptr(), gw.qkv_b.ptr(), T, d, 3 * d);
        kernels::layer_norm_backward(a.x_in.ptr(), w.ln1_g.ptr(), ws.d_ln.ptr(), ws.d_res.ptr(),
                                     gw.ln1_g.ptr(), gw.ln1_b.ptr(), T, d, 1e-5f);
    }

    // token gradients: position table, label rows, exemplar embedder
    for (std::size_t i = 0; i < ws.d_res.numel(); ++i) g.pos_embed.data[i] += ws.d_res.data[i];
    for (int i = 0; i < L; ++i) {
        const int label = ep.context[static_cast<std::size_t>(i)].label;
        float* dst = g.label_embed.row(label);
        const float* src = ws.d_res.row(2 * i + 1);
        for (int j = 0; j < d; ++j) dst[j] += src[j];
    }
    const int in_floats = ws.exemplar_in.dim(1);
    for (int i = 0; i <= L; ++i) {
        const float* d_row = ws.d_res.row(2 * i);
        if (cfg.embedder == EmbedderKind::linear_vector) {
            ws.d_exemplar.zero();
            kernels::linear_backward(ws.exemplar_in.row(i), m.embed_w.ptr(), d_row,
                                     ws.d_exemplar.ptr(), g.embed_w.ptr(), g.embed_b.ptr(), 1,
                                     in_floats, d);
        } else {
            conv_embed_backward(m, d_row, ws.conv[static_cast<std::size_t>(i)], g);
        }
    }
    return loss;
}

// ---- ICLF checkpoints ----

namespace {

void write_config(ByteWriter& w, const ModelConfig& c) {
    w.u32(static_cast<std::uint32_t>(c.layers));
    w.u32(static_cast<std::uint32_t>(c.heads));
    w.u32(static_cast<std::uint32_t>(c.embed_dim));
    w.u32(static_cast<std::uint32_t>(c.label_vocab));
    w.u32(static_cast<std::uint32_t>(c.pairs));
    w.u8(static_cast<std::uint8_t>(c.embedder));
    w.u32(static_cast<std::uint32_t>(c.input_dim));
    w.u32(static_cast<std::uint32_t>(c.input_h));
    w.u32(static_cast<std::uint32_t>(c.input_w));
    for (int ch : c.conv_channels) w.u32(static_cast<std::uint32_t>(ch));
    w.f32(c.init_std);
}

ModelConfig read_config(ByteReader& r) {
    ModelConfig c;
    c.layers = static_cast<int>(r.u32());
    c.heads = static_cast<int>(r.u32());
    c.embed_dim = static_cast<int>(r.u32());
    c.label_vocab = static_cast<int>(r.u32());
    c.pairs = static_cast<int>(r.u32());
    const std::uint8_t kind = r.u8();
    if (kind > 1) throw FormatError("bad embedder kind", r.offset() - 1);
    c.embedder = static_cast<EmbedderKind>(kind);
    c.input_dim = static_cast<int>(r.u32());
    c.input_h = static_cast<int>(r.u32());
    c.input_w = static_cast<int>(r.u32());
    for (int& ch : c.conv_channels) ch = static_cast<int>(r.u32());
    c.init_std = r.f32();
    return c;
}

void write_tensor(ByteWriter& w, const std::string& name, const Tensor& t) {
    w.str(name);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) w.u32(static_cast<std::uint32_t>(t.dim(i)));
    w.f32_array(t.ptr(), t.numel());
}

}  // namespace

void save_checkpoint(const TransformerModel& m, const AdamState* opt, long step,
                     const std::string& path) {
    ByteWriter w;
    w.bytes("ICLF", 4);
    w.u8(1);  // version
    write_config(w, m.config);
    auto refs = param_refs(const_cast<TransformerModel&>(m));
    std::uint32_t count = static_cast<std::uint32_t>(refs.size()) + 1;
    if (opt) count += static_cast<std::uint32_t>(2 * refs.size()) + 1;
    w.u32(count);
    for (const auto& r : refs) write_tensor(w, r.name, *r.tensor);
    Tensor step_t({1}, {static_cast<float>(step)});
    write_tensor(w, "run.step", step_t);
    if (opt) {
        if (opt->m.size() != refs.size())
            throw ShapeError("optimizer state does not match parameter list");
        for (std::size_t i = 0; i < refs.size(); ++i) {
            write_tensor(w, "opt.m." + refs[i].name, opt->m[i]);
            write_tensor(w, "opt.v." + refs[i].name, opt->v[i]);
        }
        Tensor opt_step({1}, {static_cast<float>(opt->step)});
        write_tensor(w, "opt.step", opt_step);
    }
    w.save(path);
}

Checkpoint load_checkpoint(const std::string& path) {
    auto bytes = read_file_bytes(path);
    ByteReader r(bytes.data(), bytes.size());
    r.expect_magic("ICLF");
    const std::uint8_t version = r.u8();
    if (version != 1) throw FormatError("unsupported checkpoint version", r.offset() - 1);
    Checkpoint ck;
    ck.model = make_model(read_config(r));
    const std::uint32_t count = r.u32();

    auto refs = param_refs(ck.model);
    std::unordered_map<std::string, Tensor*> by_name;
    for (auto& ref : refs) by_name[ref.name] = ref.tensor;
    AdamState opt;
    opt.m.resize(refs.size());
    opt.v.resize(refs.size());
    std::unordered_map<std::string, Tensor*> opt_slots;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        opt_slots["opt.m." + refs[i].name] = &opt.m[i];
        opt_slots["opt.v." + refs[i].name] = &opt.v[i];
    }
    std::size_t params_seen = 0, opt_seen = 0;
    bool saw_opt_step = false, saw_run_step = false;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint64_t name_at = r.offset();
        const std::string name = r.str();
        const int rank = r.u8();
        std::vector<int> shape;
        for (int j = 0; j < rank; ++j) shape.push_back(static_cast<int>(r.u32()));
        Tensor t(shape);
        r.f32_array(t.ptr(), t.numel());
        if (name == "run.step") {
            ck.step = static_cast<long>(t.at(0));
            saw_run_step = true;
        } else if (name == "opt.step") {
            opt.step = static_cast<long>(t.at(0));
            saw_opt_step = true;
        } else if (auto it = by_name.find(name); it != by_name.end()) {
            if (it->second->shape != shape)
                throw FormatError("tensor " + name + " has shape " + shape_to_string(shape) +
                                      ", model needs " + it->second->shape_str(),
                                  name_at);
            *it->second = std::move(t);
            ++params_seen;
        } else if (auto ot = opt_slots.find(name); ot != opt_slots.end()) {
            *ot->second = std::move(t);
            ++opt_seen;
        } else {
            throw FormatError("unknown tensor \"" + name + "\" in checkpoint", name_at);
        }
    }
    r.expect_done();
    if (params_seen != refs.size())
        throw FormatError("checkpoint is missing parameter tensors", r.offset());
    if (!saw_run_step) throw FormatError("checkpoint is missing run.step", r.offset());
    if (opt_seen > 0) {
        if (opt_seen != 2 * refs.size() || !saw_opt_step)
            throw FormatError("checkpoint has partial optimizer state", r.offset());
        for (std::size_t i = 0; i < refs.size(); ++i)
            if (!opt.m[i].same_shape(*refs[i].tensor) || !opt.v[i].same_shape(*refs[i].tensor))
                throw FormatError("optimizer tensor shapes disagree with parameters", r.offset());
        ck.opt = std::move(opt);
        ck.has_opt = true;
    }
    return ck;
}

}  // namespace iclforge
