#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mpt/model.hpp"

namespace mpt {

struct TrainConfig {
    double base_lr = 0.0008;
    int warmup_steps = 200;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double adam_eps = 1e-9;
    double weight_decay = 0.0;
    double label_smoothing = 0.1;
    int tokens_per_batch = 256;
    int max_steps = 2000;
    int checkpoint_every = 200;
    int grad_accum = 1;
    std::uint64_t seed = 1;

    void validate() const;
};

// base_lr * min(step/warmup, sqrt(warmup/step)); peak exactly base_lr at the
// warmup step.
double lr_schedule(long step, const TrainConfig& cfg);

class Adam {
public:
    explicit Adam(const TrainConfig& cfg) : cfg_(cfg) {}

    // Applies one update from the accumulated gradients, then clears them.
    void step(std::vector<std::pair<std::string, Tensor>>& params, double lr);

    long t() const { return t_; }

private:
    struct State {
        std::vector<double> m, v;
    };
    TrainConfig cfg_;
    std::map<std::string, State> state_;
    long t_ = 0;
};

struct Checkpoint {
    long step = 0;
    std::string config_json;  // snapshot, informational
    std::vector<std::string> names;
    std::vector<Shape> shapes;
    std::vector<std::vector<double>> values;

    static Checkpoint from_params(const std::vector<std::pair<std::string, Tensor>>& params,
                                  long step, std::string config_json = "{}");
    void apply_to(std::vector<std::pair<std::string, Tensor>>& params) const;

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);
};

// Arithmetic mean per parameter; step = max step.
Checkpoint average_checkpoints(const std::vector<Checkpoint>& checkpoints);

struct StepResult {
    std::optional<double> loss_first;  // loss on the first-pass output
    std::optional<double> loss_final;  // loss on the final-pass output
    double lr = 0.0;
};

// One optimizer step on one batch; `step` is 1-based. The rng drives dropout
// and the RandomPass draw.
StepResult train_step(Seq2Seq& model, const Batch& batch, Adam& optimizer, const TrainConfig& cfg,
                      long step, Rng& rng);

struct TrainRunResult {
    std::vector<StepResult> trace;
    std::vector<Checkpoint> checkpoints;
};

// Deterministic loop: seeds one stream from cfg.seed, pulls batches from
// batch_fn, writes a loss CSV if given. Checkpoints every checkpoint_every
// steps and always at the end (including max_steps == 0).
TrainRunResult train_run(Seq2Seq& model, const TrainConfig& cfg,
                         const std::function<Batch(Rng&)>& batch_fn,
                         std::ostream* loss_csv = nullptr, const std::string& config_json = "{}");

}  // namespace mpt
