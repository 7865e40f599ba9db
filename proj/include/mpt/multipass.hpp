#pragma once

#include <vector>

#include "mpt/model_config.hpp"
#include "mpt/tensor.hpp"
#include "mpt/transformer.hpp"

namespace mpt {

// Per-pass, per-layer intermediate (S^mid) and output (S^out) features.
struct PassTrace {
    std::vector<std::vector<Tensor>> mid;  // [pass][layer]
    std::vector<std::vector<Tensor>> out;
};

// Row-wise softmax over the N x N connection logits.
Tensor soft_weights(Tape& tape, const Tensor& logits);

// Runs the tied-weight encoder P times. Pass 0 is a plain stack on the
// embedded source; later passes re-feed the original embedding and receive
// infusions from the previous pass per the connection spec and routing
// pattern. The chained variant composes passes sequentially instead.
PassTrace multipass_forward(Tape& tape, const std::vector<int>& src_ids, const ModelParams& params,
                            const MptConfig& cfg, bool training, Rng& rng);

// Same, starting from an already-embedded source and with explicit per-pass
// layer parameters. Passing P distinct parameter sets yields the untied-clone
// construction used to verify tied-gradient accumulation.
PassTrace multipass_forward_embedded(
    Tape& tape, const Tensor& embedded,
    const std::vector<const std::vector<AttentionModuleParams>*>& per_pass_layers,
    const Tensor& soft_logits, const MptConfig& cfg, bool training, Rng& rng);

Tensor encoder_output_for_decode(const PassTrace& trace, DecodeRegime regime);

// Forward-output gap between a hard connection and soft connections with
// one-hot-saturated logits at the same permutation (dropout off).
double soft_hard_max_abs_diff(const ModelParams& params, const MptConfig& hard_cfg,
                              const std::vector<int>& src_ids);

}  // namespace mpt
