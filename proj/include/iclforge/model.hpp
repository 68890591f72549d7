#pragma once

// The causal decoder transformer over interleaved exemplar/label tokens,
// its exemplar embedders (linear for vectors, 3-block residual conv for
// rasters), attention-trace capture, hand-written backward, and ICLF
// checkpoint IO.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "iclforge/adam.hpp"
#include "iclforge/seqforge.hpp"
#include "iclforge/tensor.hpp"

namespace iclforge {

enum class EmbedderKind : std::uint8_t { conv_raster = 0, linear_vector = 1 };

struct ModelConfig {
    int layers = 3;
    int heads = 1;
    int embed_dim = 64;
    int label_vocab = 0;
    int pairs = 8;  // L: context pairs per episode; sequence holds 2L+1 tokens
    EmbedderKind embedder = EmbedderKind::linear_vector;
    int input_dim = 0;              // linear_vector
    int input_h = 0, input_w = 0;   // conv_raster
    std::array<int, 3> conv_channels{64, 128, 256};
    float init_std = 0.02f;

    int tokens() const { return 2 * pairs + 1; }
    int head_dim() const { return embed_dim / heads; }
    int mlp_dim() const { return 4 * embed_dim; }
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
    Tensor ln1_g, ln1_b;      // [d]
    Tensor qkv_w, qkv_b;      // [d,3d], [3d]
    Tensor attn_w, attn_b;    // [d,d], [d]
    Tensor ln2_g, ln2_b;      // [d]
    Tensor fc_w, fc_b;        // [d,4d], [4d]
    Tensor out_w, out_b;      // [4d,d], [d]
};

struct ConvBlockWeights {
    Tensor w1, b1;  // 3x3 stride 2: [cout*cin*9], [cout]
    Tensor w2, b2;  // 3x3 stride 1: [cout*cout*9], [cout]
    Tensor wp, bp;  // 1x1 stride 2 shortcut: [cout*cin], [cout]
};

struct TransformerModel {
    ModelConfig config;
    // exemplar embedder
    Tensor embed_w, embed_b;  // linear_vector: [input_dim,d], [d]
    std::vector<ConvBlockWeights> conv;  // conv_raster
    Tensor conv_proj_w, conv_proj_b;     // [c_last,d], [d]
    // token machinery
    Tensor label_embed;  // [vocab,d]
    Tensor pos_embed;    // [2L+1,d]
    std::vector<LayerWeights> layers;
    Tensor lnf_g, lnf_b;    // [d]
    Tensor head_w, head_b;  // [d,vocab], [vocab]
};

struct ParamRef {
    std::string name;
    Tensor* tensor;
};

TransformerModel init_model(const ModelConfig& config, std::uint64_t seed);
// Same structure as `m` with every tensor zeroed (gradient accumulator).
TransformerModel zeros_like(const TransformerModel& m);
// Stable name -> tensor enumeration; order is the checkpoint/optimizer order.
std::vector<ParamRef> param_refs(TransformerModel& m);
std::vector<const Tensor*> param_views(const TransformerModel& m);
long param_count(const ModelConfig& config);

enum class TokenRole : std::uint8_t { sample = 0, label = 1, query = 2 };
std::vector<TokenRole> token_roles(int pairs);

struct AttentionTrace {
    int layers = 0, heads = 0, tokens = 0;
    std::vector<Tensor> weights;  // layers*heads entries, each [T,T] post-softmax
    std::vector<TokenRole> roles;
    const Tensor& at(int layer, int head) const {
        return weights[static_cast<std::size_t>(layer) * heads + head];
    }
};

// Scratch and activation caches reused across episodes; create once per
// worker via Workspace(config).
struct LayerActs {
    Tensor x_in, ln1, qkv, attn_w, attn_cat, res1, ln2, fc_pre, gelu_t, gelu_out;
};
struct ConvCache {
    std::vector<Tensor> in, act1, out;  // one per block
    Tensor pooled;                      // [c_last]
};
struct Workspace {
    explicit Workspace(const ModelConfig& config);
    ModelConfig config;
    Tensor tokens;                  // [T,d] embedded input
    Tensor exemplar_in;             // [L+1, input floats]
    std::vector<ConvCache> conv;    // one per exemplar token (conv kind)
    std::vector<LayerActs> layers;
    Tensor x_final;                 // [T,d]
    Tensor lnf;                     // [T,d]
    Tensor logits;                  // [T,vocab]
    // backward scratch
    Tensor d_res, d_ln, d_cat, d_tokens;  // [T,d]
    Tensor d_qkv;                         // [T,3d]
    Tensor d_fc, d_gelu;                  // [T,4d]
    Tensor attn_scratch;                  // [2*T*T]
    Tensor d_logits_last;                 // [vocab]
    Tensor d_lnf_last;                    // [d]
    Tensor d_exemplar;                    // [input floats]
};

// Exemplar embedding. conv_embed consumes a [0,1]-scaled image laid out
// [1,H,W]; returns the projected embedding.
void conv_embed(const TransformerModel& m, const float* img, float* out, ConvCache& cache);
Tensor conv_embed(const TransformerModel& m, const Tensor& img);

// Token rows for an episode: exemplars at even positions, labels at odd,
// query at 2L. `raw` skips the position-embedding add.
Tensor embed_episode(const TransformerModel& m, const ExemplarStore& store, const Episode& ep);
Tensor embed_episode_raw(const TransformerModel& m, const ExemplarStore& store, const Episode& ep);

struct ForwardResult {
    Tensor logits;  // [T, vocab]
    AttentionTrace trace;
    bool has_trace = false;
};
ForwardResult forward(const TransformerModel& m, const Tensor& embedded, bool capture);

// Full forward on one episode (embed + stack + head over all rows).
ForwardResult forward_episode(const TransformerModel& m, const ExemplarStore& store,
                              const Episode& ep, bool capture);

// Logits of the last token only; the evaluation path.
void query_logits(const TransformerModel& m, const ExemplarStore& store, const Episode& ep,
                  Workspace& ws, float* out_logits);

// Attention trace without logits allocation (probe path).
AttentionTrace capture_trace(const TransformerModel& m, const ExemplarStore& store,
                             const Episode& ep, Workspace& ws);

// Training: cross-entropy of the query token's label prediction, gradients
// accumulated into `grads` (same structure as m). Returns the loss.
double episode_loss_grad(const TransformerModel& m, const ExemplarStore& store, const Episode& ep,
                         TransformerModel& grads, Workspace& ws);
// Loss only (finite-difference harness).
double episode_loss(const TransformerModel& m, const ExemplarStore& store, const Episode& ep,
                    Workspace& ws);

// ---- ICLF checkpoint format ----

struct Checkpoint {
    TransformerModel model;
    AdamState opt;
    bool has_opt = false;
    long step = 0;
};

void save_checkpoint(const TransformerModel& m, const AdamState* opt, long step,
                     const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace iclforge
