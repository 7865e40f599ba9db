#include "mpt/multipass.hpp"

#include <algorithm>
#include <cmath>

#include "mpt/errors.hpp"

namespace mpt {

Tensor soft_weights(Tape& tape, const Tensor& logits) {
    const Shape& s = logits.shape();
    if (s.size() != 2 || s[0] != s[1])
        throw DimensionError("soft connection logits must be square, got " + shape_str(s));
    return tape.softmax(logits, 1);
}

PassTrace multipass_forward_embedded(
    Tape& tape, const Tensor& embedded,
    const std::vector<const std::vector<AttentionModuleParams>*>& per_pass_layers,
    const Tensor& soft_logits, const MptConfig& cfg, bool training, Rng& rng) {
    cfg.validate();
    const int n = cfg.layers, p_count = cfg.passes;
    if (static_cast<int>(per_pass_layers.size()) != p_count)
        throw ConfigError("expected " + std::to_string(p_count) + " per-pass parameter sets");
    const ConnKind kind = cfg.connection.kind;
    if (kind == ConnKind::Soft && !soft_logits.defined())
        throw ConfigError("soft connection without logits");

    Tensor weights;  // N x N alphas, soft only
    if (kind == ConnKind::Soft) weights = soft_weights(tape, soft_logits);

    PassTrace trace;
    trace.mid.resize(static_cast<std::size_t>(p_count));
    trace.out.resize(static_cast<std::size_t>(p_count));

    for (int p = 0; p < p_count; ++p) {
        const auto& layers = *per_pass_layers[static_cast<std::size_t>(p)];
        if (static_cast<int>(layers.size()) != n)
            throw ConfigError("pass " + std::to_string(p) + " has " +
                              std::to_string(layers.size()) + " layers, expected " +
                              std::to_string(n));
        Tensor x;
        if (p == 0 || kind == ConnKind::Hard || kind == ConnKind::Soft)
            x = embedded;  // re-fed original input
        else
            x = trace.out[static_cast<std::size_t>(p - 1)].back();  // chained

        const bool infused = p > 0 && (kind == ConnKind::Hard || kind == ConnKind::Soft);
        const auto& prev_taps = infused ? (cfg.routing.tap == Tap::ModuleOutput
                                               ? trace.out[static_cast<std::size_t>(p - 1)]
                                               : trace.mid[static_cast<std::size_t>(p - 1)])
                                        : trace.out[0];

        for (int k = 0; k < n; ++k) {
            Tensor f;
            if (infused) {
                if (kind == ConnKind::Hard) {
                    f = prev_taps[static_cast<std::size_t>(cfg.connection.perm[static_cast<std::size_t>(k)])];
                } else {
                    f = tape.weighted_sum(tape.row(weights, k), prev_taps);
                }
            }
            const Tensor* pre = nullptr;
            const Tensor* post = nullptr;
            if (f.defined())
                (cfg.routing.inject == Inject::PreResidual ? pre : post) = &f;
            EncoderModuleOut mo = encoder_module_forward(tape, x, layers[static_cast<std::size_t>(k)],
                                                         cfg.heads, pre, post, cfg.dropout,
                                                         training, rng);
            trace.mid[static_cast<std::size_t>(p)].push_back(mo.mid);
            trace.out[static_cast<std::size_t>(p)].push_back(mo.out);
            x = mo.out;
        }
    }
    return trace;
}

PassTrace multipass_forward(Tape& tape, const std::vector<int>& src_ids, const ModelParams& params,
                            const MptConfig& cfg, bool training, Rng& rng) {
    Tensor embedded =
        embed_and_position(tape, src_ids, params.embedding, cfg.dropout, training, rng);
    std::vector<const std::vector<AttentionModuleParams>*> per_pass(
        static_cast<std::size_t>(cfg.passes), &params.encoder);
    return multipass_forward_embedded(tape, embedded, per_pass, params.soft_logits, cfg, training,
                                      rng);
}

Tensor encoder_output_for_decode(const PassTrace& trace, DecodeRegime regime) {
    if (trace.out.empty() || trace.out.front().empty())
        throw ContractError("encoder_output_for_decode on an empty trace");
    return regime == DecodeRegime::FirstPass ? trace.out.front().back() : trace.out.back().back();
}

double soft_hard_max_abs_diff(const ModelParams& params, const MptConfig& hard_cfg,
                              const std::vector<int>& src_ids) {
    if (hard_cfg.connection.kind != ConnKind::Hard)
        throw ConfigError("soft/hard check needs a hard-connection config");
    MptConfig soft_cfg = hard_cfg;
    soft_cfg.connection = ConnectionSpec::soft();
    soft_cfg.dropout = 0.0;
    MptConfig hard_nodrop = hard_cfg;
    hard_nodrop.dropout = 0.0;

    // Saturated one-hot logits matching the permutation.
    const int n = hard_cfg.layers;
    std::vector<double> logits(static_cast<std::size_t>(n) * n, 0.0);
    for (int k = 0; k < n; ++k)
        logits[static_cast<std::size_t>(k * n + hard_cfg.connection.perm[static_cast<std::size_t>(k)])] = 1e4;

    ModelParams soft_params = params;
    soft_params.soft_logits = Tensor({n, n}, std::move(logits), true);

    Rng rng(0);
    Tape tape(false);
    PassTrace hard_trace = multipass_forward(tape, src_ids, params, hard_nodrop, false, rng);
    PassTrace soft_trace = multipass_forward(tape, src_ids, soft_params, soft_cfg, false, rng);
    const auto& a = encoder_output_for_decode(hard_trace, DecodeRegime::FinalPass).data();
    const auto& b = encoder_output_for_decode(soft_trace, DecodeRegime::FinalPass).data();
    double diff = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a[i] - b[i]));
    return diff;
}

}  // namespace mpt
