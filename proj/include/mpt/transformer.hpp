#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mpt/model_config.hpp"
#include "mpt/tensor.hpp"

namespace mpt {

// Q/K/V/output projections of one attention block.
struct ProjParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

// One encoder layer: self-attention + FFN with post-norm residuals.
// A single instance per layer index is shared by every pass (tied weights).
struct AttentionModuleParams {
    ProjParams attn;
    Tensor w1, b1, w2, b2;
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
};

struct DecoderLayerParams {
    ProjParams self_attn;
    ProjParams src_attn;
    Tensor w1, b1, w2, b2;
    Tensor ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
};

// One token table serves encoder input, decoder input, and the output
// projection. The positional table is sinusoidal and not trained.
struct EmbeddingParams {
    Tensor table;       // V x d_model, trainable
    Tensor positional;  // L_max x d_model, fixed
};

struct ModelParams {
    EmbeddingParams embedding;
    std::vector<AttentionModuleParams> encoder;
    std::vector<DecoderLayerParams> decoder;
    Tensor soft_logits;  // N x N, defined only for soft connections

    static ModelParams init(const MptConfig& cfg, Rng& rng);
    // Trainable parameters in a stable order; names match checkpoint entries.
    std::vector<std::pair<std::string, Tensor>> named() const;
};

// Boolean attention mask; true marks a disallowed (query, key) pair.
struct AttnMask {
    std::int64_t lq = 0, lk = 0;
    std::vector<std::uint8_t> disallowed;  // lq * lk

    static AttnMask causal(std::int64_t l);
};

Tensor sinusoidal_positions(std::int64_t max_len, std::int64_t d_model);

Tensor scaled_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                        const AttnMask* mask = nullptr);

Tensor multi_head_attention(Tape& tape, const Tensor& x_q, const Tensor& x_kv,
                            const ProjParams& p, int heads, const AttnMask* mask = nullptr);

struct EncoderModuleOut {
    Tensor mid;  // after self-attention sublayer's residual+norm
    Tensor out;  // after FFN sublayer's residual+norm
};

// pre_infusion is added to the sublayer input upstream of the first residual
// split; post_infusion right after the self-attention sublayer's
// residual+norm, upstream of the FFN sublayer only.
EncoderModuleOut encoder_module_forward(Tape& tape, const Tensor& s_in,
                                        const AttentionModuleParams& p, int heads,
                                        const Tensor* pre_infusion, const Tensor* post_infusion,
                                        double dropout_p, bool training, Rng& rng);

Tensor decoder_layer_forward(Tape& tape, const Tensor& t_in, const Tensor& memory,
                             const DecoderLayerParams& p, int heads, const AttnMask& causal_mask,
                             double dropout_p, bool training, Rng& rng);

Tensor embed_and_position(Tape& tape, const std::vector<int>& ids, const EmbeddingParams& p,
                          double dropout_p, bool training, Rng& rng);

// Projection by the transposed shared token table (tied softmax layer).
Tensor output_logits(Tape& tape, const Tensor& decoder_out, const EmbeddingParams& p);

// Shapes of all trainable parameters for a config, without allocating them.
std::vector<std::pair<std::string, Shape>> param_shapes(const MptConfig& cfg);

std::int64_t count_params(const MptConfig& cfg);

}  // namespace mpt
