#include "mpt/model.hpp"

#include <cmath>

#include "mpt/errors.hpp"

namespace mpt {

Seq2Seq::Seq2Seq(MptConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(init_seed);
    params_ = ModelParams::init(cfg_, rng);
}

Seq2Seq::Seq2Seq(MptConfig cfg, ModelParams params)
    : cfg_(std::move(cfg)), params_(std::move(params)) {
    cfg_.validate();
}

PassTrace Seq2Seq::encode(Tape& tape, const std::vector<int>& src, bool training, Rng& rng) const {
    return multipass_forward(tape, src, params_, cfg_, training, rng);
}

Tensor Seq2Seq::decode_logits(Tape& tape, const Tensor& memory, const std::vector<int>& tgt_in,
                              bool training, Rng& rng) const {
    Tensor x = embed_and_position(tape, tgt_in, params_.embedding, cfg_.dropout, training, rng);
    AttnMask causal = AttnMask::causal(static_cast<std::int64_t>(tgt_in.size()));
    for (const auto& layer : params_.decoder)
        x = decoder_layer_forward(tape, x, memory, layer, cfg_.heads, causal, cfg_.dropout,
                                  training, rng);
    return output_logits(tape, x, params_.embedding);
}

Tensor Seq2Seq::sequence_loss(Tape& tape, const Tensor& memory, const std::vector<int>& tgt,
                              double smoothing, bool training, Rng& rng) const {
    std::vector<int> tgt_in;
    tgt_in.reserve(tgt.size() + 1);
    tgt_in.push_back(kBosId);
    tgt_in.insert(tgt_in.end(), tgt.begin(), tgt.end());
    std::vector<int> tgt_out(tgt);
    tgt_out.push_back(kEosId);

    Tensor logits = decode_logits(tape, memory, tgt_in, training, rng);
    return tape.cross_entropy_smoothed(logits, tgt_out, smoothing, kPadId);
}

Tensor Seq2Seq::batch_loss(Tape& tape, const Batch& batch, DecodeRegime regime, double smoothing,
                           bool training, Rng& rng) const {
    if (batch.src.empty() || batch.src.size() != batch.tgt.size())
        throw ContractError("batch with " + std::to_string(batch.src.size()) + " sources and " +
                            std::to_string(batch.tgt.size()) + " targets");
    Tensor total;
    for (std::size_t i = 0; i < batch.src.size(); ++i) {
        PassTrace trace = encode(tape, batch.src[i], training, rng);
        Tensor memory = encoder_output_for_decode(trace, regime);
        Tensor loss = sequence_loss(tape, memory, batch.tgt[i], smoothing, training, rng);
        total = total.defined() ? tape.add(total, loss) : loss;
    }
    return tape.scale(total, 1.0 / static_cast<double>(batch.src.size()));
}

std::vector<double> Seq2Seq::next_token_logprobs(const Tensor& memory,
                                                 const std::vector<int>& prefix) const {
    std::vector<int> tgt_in;
    tgt_in.reserve(prefix.size() + 1);
    tgt_in.push_back(kBosId);
    tgt_in.insert(tgt_in.end(), prefix.begin(), prefix.end());

    Tape tape(false);
    Rng rng(0);  // dropout is off in evaluation; stream never consumed
    Tensor logits = decode_logits(tape, memory, tgt_in, false, rng);
    const std::int64_t v = logits.shape()[1];
    const std::int64_t last = (logits.shape()[0] - 1) * v;
    const double* x = logits.data().data() + last;
    double mx = x[0];
    for (std::int64_t j = 1; j < v; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (std::int64_t j = 0; j < v; ++j) z += std::exp(x[j] - mx);
    const double lse = mx + std::log(z);
    std::vector<double> lp(static_cast<std::size_t>(v));
    for (std::int64_t j = 0; j < v; ++j) lp[static_cast<std::size_t>(j)] = x[j] - lse;
    return lp;
}

}  // namespace mpt
