#pragma once

#include <functional>
#include <vector>

#include "mpt/multipass.hpp"

namespace mpt {

struct Batch {
    std::vector<std::vector<int>> src;
    std::vector<std::vector<int>> tgt;
};

constexpr int kPadId = 0;
constexpr int kBosId = 1;
constexpr int kEosId = 2;
constexpr int kNumSpecialTokens = 3;

// Encoder + decoder with the shared token table, built around the multipass
// encoder. Dropout draws come from the rng passed to each call, consumed in
// forward execution order (pass-major, then layer, then call order within a
// layer); callers seed one stream per run for reproducibility.
class Seq2Seq {
public:
    Seq2Seq(MptConfig cfg, std::uint64_t init_seed);
    Seq2Seq(MptConfig cfg, ModelParams params);

    const MptConfig& config() const { return cfg_; }
    ModelParams& params() { return params_; }
    const ModelParams& params() const { return params_; }

    PassTrace encode(Tape& tape, const std::vector<int>& src, bool training, Rng& rng) const;

    // Teacher-forced logits [len(tgt_in) x V] over memory.
    Tensor decode_logits(Tape& tape, const Tensor& memory, const std::vector<int>& tgt_in,
                         bool training, Rng& rng) const;

    // Mean label-smoothed loss of one sequence pair against the given memory.
    Tensor sequence_loss(Tape& tape, const Tensor& memory, const std::vector<int>& tgt,
                         double smoothing, bool training, Rng& rng) const;

    // Batch-mean loss for the chosen decode regime.
    Tensor batch_loss(Tape& tape, const Batch& batch, DecodeRegime regime, double smoothing,
                      bool training, Rng& rng) const;

    // Greedy/beam hook: log-probabilities of the next token given a target
    // prefix (without bos) and a precomputed memory.
    std::vector<double> next_token_logprobs(const Tensor& memory,
                                            const std::vector<int>& prefix) const;

private:
    MptConfig cfg_;
    ModelParams params_;
};

}  // namespace mpt
