#include "mpt/transformer.hpp"

#include <cmath>

#include "mpt/errors.hpp"

namespace mpt {

namespace {

constexpr double kMaskValue = -1e9;

Tensor xavier(Shape shape, Rng& rng) {
    const double fan_in = static_cast<double>(shape[0]);
    const double fan_out = static_cast<double>(shape[shape.size() - 1]);
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    auto n = shape_numel(shape);
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = rng.uniform(-limit, limit);
    return Tensor(std::move(shape), std::move(v), true);
}

ProjParams init_proj(std::int64_t d, Rng& rng) {
    ProjParams p;
    p.wq = xavier({d, d}, rng);
    p.bq = Tensor::zeros({d}, true);
    p.wk = xavier({d, d}, rng);
    p.bk = Tensor::zeros({d}, true);
    p.wv = xavier({d, d}, rng);
    p.bv = Tensor::zeros({d}, true);
    p.wo = xavier({d, d}, rng);
    p.bo = Tensor::zeros({d}, true);
    return p;
}

void proj_shapes(const std::string& prefix, std::int64_t d,
                 std::vector<std::pair<std::string, Shape>>& out) {
    for (const char* n : {"wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"}) {
        if (n[0] == 'w')
            out.emplace_back(prefix + "." + n, Shape{d, d});
        else
            out.emplace_back(prefix + "." + n, Shape{d});
    }
}

void named_proj(const std::string& prefix, const ProjParams& p,
                std::vector<std::pair<std::string, Tensor>>& out) {
    out.emplace_back(prefix + ".wq", p.wq);
    out.emplace_back(prefix + ".bq", p.bq);
    out.emplace_back(prefix + ".wk", p.wk);
    out.emplace_back(prefix + ".bk", p.bk);
    out.emplace_back(prefix + ".wv", p.wv);
    out.emplace_back(prefix + ".bv", p.bv);
    out.emplace_back(prefix + ".wo", p.wo);
    out.emplace_back(prefix + ".bo", p.bo);
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
    return tape.add(tape.matmul(x, w), b);
}

Tensor ffn(Tape& tape, const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2,
           const Tensor& b2) {
    return linear(tape, tape.relu(linear(tape, x, w1, b1)), w2, b2);
}

}  // namespace

Tensor sinusoidal_positions(std::int64_t max_len, std::int64_t d_model) {
    std::vector<double> v(static_cast<std::size_t>(max_len * d_model));
    for (std::int64_t p = 0; p < max_len; ++p)
        for (std::int64_t i = 0; i < d_model; ++i) {
            const double freq =
                std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d_model));
            const double angle = static_cast<double>(p) * freq;
            v[static_cast<std::size_t>(p * d_model + i)] =
                i % 2 == 0 ? std::sin(angle) : std::cos(angle);
        }
    return Tensor({max_len, d_model}, std::move(v), false);
}

AttnMask AttnMask::causal(std::int64_t l) {
    AttnMask m;
    m.lq = m.lk = l;
    m.disallowed.assign(static_cast<std::size_t>(l * l), 0);
    for (std::int64_t i = 0; i < l; ++i)
        for (std::int64_t j = i + 1; j < l; ++j)
            m.disallowed[static_cast<std::size_t>(i * l + j)] = 1;
    return m;
}

Tensor scaled_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                        const AttnMask* mask) {
    const Shape& sq = q.shape();
    const Shape& sk = k.shape();
    if (sq.size() < 2 || sk.size() < 2 || sq.back() != sk.back())
        throw DimensionError("attention d_K extents disagree: " + shape_str(sq) + " vs " +
                             shape_str(sk));
    const std::int64_t dk = sq.back();
    Tensor logits = tape.scale(tape.matmul(q, tape.transpose_last2(k)),
                               1.0 / std::sqrt(static_cast<double>(dk)));
    if (mask) {
        const std::int64_t lq = sq[sq.size() - 2], lk = sk[sk.size() - 2];
        if (mask->lq != lq || mask->lk != lk)
            throw DimensionError("mask shape [" + std::to_string(mask->lq) + "," +
                                 std::to_string(mask->lk) + "] vs attention [" +
                                 std::to_string(lq) + "," + std::to_string(lk) + "]");
        std::vector<double> bias(mask->disallowed.size(), 0.0);
        for (std::int64_t i = 0; i < lq; ++i) {
            bool any_allowed = false;
            for (std::int64_t j = 0; j < lk; ++j) {
                if (mask->disallowed[static_cast<std::size_t>(i * lk + j)])
                    bias[static_cast<std::size_t>(i * lk + j)] = kMaskValue;
                else
                    any_allowed = true;
            }
            if (!any_allowed)
                throw ContractError("attention row " + std::to_string(i) +
                                    " has no allowed positions");
        }
        logits = tape.add(logits, Tensor({lq, lk}, std::move(bias), false));
    }
    return tape.matmul(tape.softmax(logits, -1), v);
}

Tensor multi_head_attention(Tape& tape, const Tensor& x_q, const Tensor& x_kv,
                            const ProjParams& p, int heads, const AttnMask* mask) {
    Tensor q = tape.split_heads(linear(tape, x_q, p.wq, p.bq), heads);
    Tensor k = tape.split_heads(linear(tape, x_kv, p.wk, p.bk), heads);
    Tensor v = tape.split_heads(linear(tape, x_kv, p.wv, p.bv), heads);
    Tensor att = tape.merge_heads(scaled_attention(tape, q, k, v, mask));
    return linear(tape, att, p.wo, p.bo);
}

EncoderModuleOut encoder_module_forward(Tape& tape, const Tensor& s_in,
                                        const AttentionModuleParams& p, int heads,
                                        const Tensor* pre_infusion, const Tensor* post_infusion,
                                        double dropout_p, bool training, Rng& rng) {
    auto check_infusion = [&](const Tensor* f) {
        if (f && f->shape() != s_in.shape())
            throw ConfigError("infusion shape " + shape_str(f->shape()) + " vs layer input " +
                              shape_str(s_in.shape()));
    };
    check_infusion(pre_infusion);
    check_infusion(post_infusion);

    Tensor x = pre_infusion ? tape.add(s_in, *pre_infusion) : s_in;
    Tensor sa = multi_head_attention(tape, x, x, p.attn, heads);
    Tensor mid = tape.layernorm(tape.add(x, tape.dropout(sa, dropout_p, training, rng)), p.ln1_g,
                                p.ln1_b, -1, 1e-6);
    Tensor m = post_infusion ? tape.add(mid, *post_infusion) : mid;
    Tensor ff = ffn(tape, m, p.w1, p.b1, p.w2, p.b2);
    Tensor out = tape.layernorm(tape.add(m, tape.dropout(ff, dropout_p, training, rng)), p.ln2_g,
                                p.ln2_b, -1, 1e-6);
    return {mid, out};
}

Tensor decoder_layer_forward(Tape& tape, const Tensor& t_in, const Tensor& memory,
                             const DecoderLayerParams& p, int heads, const AttnMask& causal_mask,
                             double dropout_p, bool training, Rng& rng) {
    if (memory.shape().back() != t_in.shape().back())
        throw ConfigError("memory d_model " + std::to_string(memory.shape().back()) +
                          " vs decoder d_model " + std::to_string(t_in.shape().back()));
    Tensor sa = multi_head_attention(tape, t_in, t_in, p.self_attn, heads, &causal_mask);
    Tensor a1 = tape.layernorm(tape.add(t_in, tape.dropout(sa, dropout_p, training, rng)), p.ln1_g,
                               p.ln1_b, -1, 1e-6);
    Tensor src = multi_head_attention(tape, a1, memory, p.src_attn, heads);
    Tensor a2 = tape.layernorm(tape.add(a1, tape.dropout(src, dropout_p, training, rng)), p.ln2_g,
                               p.ln2_b, -1, 1e-6);
    Tensor ff = ffn(tape, a2, p.w1, p.b1, p.w2, p.b2);
    return tape.layernorm(tape.add(a2, tape.dropout(ff, dropout_p, training, rng)), p.ln3_g,
                          p.ln3_b, -1, 1e-6);
}

Tensor embed_and_position(Tape& tape, const std::vector<int>& ids, const EmbeddingParams& p,
                          double dropout_p, bool training, Rng& rng) {
    const std::int64_t l = static_cast<std::int64_t>(ids.size());
    const std::int64_t l_max = p.positional.shape()[0];
    const std::int64_t d = p.positional.shape()[1];
    if (l > l_max)
        throw LengthError("sequence length " + std::to_string(l) + " exceeds positional table " +
                          std::to_string(l_max));
    Tensor e = tape.embed(ids, p.table);
    std::vector<double> pos(p.positional.data().begin(),
                            p.positional.data().begin() + l * d);
    Tensor x = tape.add(e, Tensor({l, d}, std::move(pos), false));
    return tape.dropout(x, dropout_p, training, rng);
}

Tensor output_logits(Tape& tape, const Tensor& decoder_out, const EmbeddingParams& p) {
    return tape.matmul(decoder_out, tape.transpose_last2(p.table));
}

ModelParams ModelParams::init(const MptConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::int64_t d = cfg.d_model, dff = cfg.d_ff, v = cfg.vocab;
    ModelParams m;
    {
        std::vector<double> t(static_cast<std::size_t>(v * d));
        const double std = 1.0 / std::sqrt(static_cast<double>(d));
        for (auto& x : t) x = std * rng.normal();
        m.embedding.table = Tensor({v, d}, std::move(t), true);
        m.embedding.positional = sinusoidal_positions(cfg.max_len, d);
    }
    for (int k = 0; k < cfg.layers; ++k) {
        AttentionModuleParams p;
        p.attn = init_proj(d, rng);
        p.w1 = xavier({d, dff}, rng);
        p.b1 = Tensor::zeros({dff}, true);
        p.w2 = xavier({dff, d}, rng);
        p.b2 = Tensor::zeros({d}, true);
        p.ln1_g = Tensor::full({d}, 1.0, true);
        p.ln1_b = Tensor::zeros({d}, true);
        p.ln2_g = Tensor::full({d}, 1.0, true);
        p.ln2_b = Tensor::zeros({d}, true);
        m.encoder.push_back(std::move(p));
    }
    for (int k = 0; k < cfg.decoder_layers; ++k) {
        DecoderLayerParams p;
        p.self_attn = init_proj(d, rng);
        p.src_attn = init_proj(d, rng);
        p.w1 = xavier({d, dff}, rng);
        p.b1 = Tensor::zeros({dff}, true);
        p.w2 = xavier({dff, d}, rng);
        p.b2 = Tensor::zeros({d}, true);
        p.ln1_g = Tensor::full({d}, 1.0, true);
        p.ln1_b = Tensor::zeros({d}, true);
        p.ln2_g = Tensor::full({d}, 1.0, true);
        p.ln2_b = Tensor::zeros({d}, true);
        p.ln3_g = Tensor::full({d}, 1.0, true);
        p.ln3_b = Tensor::zeros({d}, true);
        m.decoder.push_back(std::move(p));
    }
    if (cfg.connection.kind == ConnKind::Soft)
        m.soft_logits = Tensor::zeros({cfg.layers, cfg.layers}, true);
    return m;
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("embedding.table", embedding.table);
    for (std::size_t k = 0; k < encoder.size(); ++k) {
        const auto& p = encoder[k];
        const std::string pre = "enc." + std::to_string(k);
        named_proj(pre + ".attn", p.attn, out);
        out.emplace_back(pre + ".ffn.w1", p.w1);
        out.emplace_back(pre + ".ffn.b1", p.b1);
        out.emplace_back(pre + ".ffn.w2", p.w2);
        out.emplace_back(pre + ".ffn.b2", p.b2);
        out.emplace_back(pre + ".ln1.g", p.ln1_g);
        out.emplace_back(pre + ".ln1.b", p.ln1_b);
        out.emplace_back(pre + ".ln2.g", p.ln2_g);
        out.emplace_back(pre + ".ln2.b", p.ln2_b);
    }
    for (std::size_t k = 0; k < decoder.size(); ++k) {
        const auto& p = decoder[k];
        const std::string pre = "dec." + std::to_string(k);
        named_proj(pre + ".self", p.self_attn, out);
        named_proj(pre + ".src", p.src_attn, out);
        out.emplace_back(pre + ".ffn.w1", p.w1);
        out.emplace_back(pre + ".ffn.b1", p.b1);
        out.emplace_back(pre + ".ffn.w2", p.w2);
        out.emplace_back(pre + ".ffn.b2", p.b2);
        out.emplace_back(pre + ".ln1.g", p.ln1_g);
        out.emplace_back(pre + ".ln1.b", p.ln1_b);
        out.emplace_back(pre + ".ln2.g", p.ln2_g);
        out.emplace_back(pre + ".ln2.b", p.ln2_b);
        out.emplace_back(pre + ".ln3.g", p.ln3_g);
        out.emplace_back(pre + ".ln3.b", p.ln3_b);
    }
    if (soft_logits.defined()) out.emplace_back("conn.soft_logits", soft_logits);
    return out;
}

std::vector<std::pair<std::string, Shape>> param_shapes(const MptConfig& cfg) {
    const std::int64_t d = cfg.d_model, dff = cfg.d_ff, v = cfg.vocab;
    std::vector<std::pair<std::string, Shape>> out;
    out.emplace_back("embedding.table", Shape{v, d});
    for (int k = 0; k < cfg.layers; ++k) {
        const std::string pre = "enc." + std::to_string(k);
        proj_shapes(pre + ".attn", d, out);
        out.emplace_back(pre + ".ffn.w1", Shape{d, dff});
        out.emplace_back(pre + ".ffn.b1", Shape{dff});
        out.emplace_back(pre + ".ffn.w2", Shape{dff, d});
        out.emplace_back(pre + ".ffn.b2", Shape{d});
        for (const char* n : {"ln1.g", "ln1.b", "ln2.g", "ln2.b"})
            out.emplace_back(pre + "." + n, Shape{d});
    }
    for (int k = 0; k < cfg.decoder_layers; ++k) {
        const std::string pre = "dec." + std::to_string(k);
        proj_shapes(pre + ".self", d, out);
        proj_shapes(pre + ".src", d, out);
        out.emplace_back(pre + ".ffn.w1", Shape{d, dff});
        out.emplace_back(pre + ".ffn.b1", Shape{dff});
        out.emplace_back(pre + ".ffn.w2", Shape{dff, d});
        out.emplace_back(pre + ".ffn.b2", Shape{d});
        for (const char* n : {"ln1.g", "ln1.b", "ln2.g", "ln2.b", "ln3.g", "ln3.b"})
            out.emplace_back(pre + "." + n, Shape{d});
    }
    if (cfg.connection.kind == ConnKind::Soft)
        out.emplace_back("conn.soft_logits", Shape{cfg.layers, cfg.layers});
    return out;
}

std::int64_t count_params(const MptConfig& cfg) {
    cfg.validate();
    std::int64_t n = 0;
    for (const auto& [name, shape] : param_shapes(cfg)) n += shape_numel(shape);
    return n;
}

}  // namespace mpt
