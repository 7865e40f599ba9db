#include "mpt/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "mpt/errors.hpp"

namespace mpt {

void TrainConfig::validate() const {
    if (base_lr <= 0.0) throw ConfigError("base_lr must be positive");
    if (warmup_steps < 1) throw ConfigError("warmup_steps must be >= 1");
    if (label_smoothing < 0.0 || label_smoothing >= 1.0)
        throw ConfigError("label_smoothing must be in [0,1)");
    if (tokens_per_batch < 1) throw ConfigError("tokens_per_batch must be >= 1");
    if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
    if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
    if (grad_accum < 1) throw ConfigError("grad_accum must be >= 1");
}

double lr_schedule(long step, const TrainConfig& cfg) {
    if (step < 1) throw ContractError("lr_schedule step must be >= 1");
    const double s = static_cast<double>(step);
    const double w = static_cast<double>(cfg.warmup_steps);
    return cfg.base_lr * std::min(s / w, std::sqrt(w / s));
}

void Adam::step(std::vector<std::pair<std::string, Tensor>>& params, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, p] : params) {
        auto& st = state_[name];
        auto& data = p.node()->data;
        p.node()->ensure_grad();
        auto& g = p.node()->grad;
        if (st.m.empty()) {
            st.m.assign(data.size(), 0.0);
            st.v.assign(data.size(), 0.0);
        }
        for (std::size_t i = 0; i < data.size(); ++i) {
            st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g[i];
            st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            const double mhat = st.m[i] / bc1;
            const double vhat = st.v[i] / bc2;
            data[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.adam_eps) + cfg_.weight_decay * data[i]);
        }
        std::fill(g.begin(), g.end(), 0.0);
    }
}

// ---------------------------------------------------------------------------

namespace {

// Builds the graph for one batch and runs backward; gradients accumulate into
// whatever is already in the parameter grad buffers.
StepResult backprop_batch(Seq2Seq& model, const Batch& batch, const TrainConfig& cfg, long step,
                          double grad_scale, Rng& rng) {
    const LossMode mode = model.config().loss_mode;
    DecodeRegime random_regime = DecodeRegime::FinalPass;
    if (mode == LossMode::RandomPass)
        random_regime = rng.uniform_int(2) == 0 ? DecodeRegime::FirstPass : DecodeRegime::FinalPass;

    Tape tape;
    Tensor first_total, final_total;
    for (std::size_t i = 0; i < batch.src.size(); ++i) {
        PassTrace trace = model.encode(tape, batch.src[i], true, rng);
        auto add_loss = [&](DecodeRegime regime, Tensor& total) {
            Tensor memory = encoder_output_for_decode(trace, regime);
            Tensor loss = model.sequence_loss(tape, memory, batch.tgt[i], cfg.label_smoothing,
                                              true, rng);
            total = total.defined() ? tape.add(total, loss) : loss;
        };
        switch (mode) {
            case LossMode::FinalPass:
                add_loss(DecodeRegime::FinalPass, final_total);
                break;
            case LossMode::SumAllPasses:
                add_loss(DecodeRegime::FirstPass, first_total);
                add_loss(DecodeRegime::FinalPass, final_total);
                break;
            case LossMode::RandomPass:
                add_loss(random_regime, random_regime == DecodeRegime::FirstPass ? first_total
                                                                                 : final_total);
                break;
        }
    }
    const double inv_b = 1.0 / static_cast<double>(batch.src.size());
    StepResult res;
    Tensor objective;
    if (first_total.defined()) {
        first_total = tape.scale(first_total, inv_b);
        res.loss_first = first_total.item();
        objective = first_total;
    }
    if (final_total.defined()) {
        final_total = tape.scale(final_total, inv_b);
        res.loss_final = final_total.item();
        objective = objective.defined() ? tape.add(objective, final_total) : final_total;
    }
    const double obj = objective.item();
    if (!std::isfinite(obj)) throw DivergedRunError("non-finite loss", step);
    if (grad_scale != 1.0) objective = tape.scale(objective, grad_scale);
    tape.backward(objective);
    return res;
}

void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

void write_f64(std::ostream& os, double d) {
    std::uint64_t v;
    std::memcpy(&v, &d, 8);
    write_u64(os, v);
}

std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

double read_f64(std::istream& is) {
    std::uint64_t v = read_u64(is);
    double d;
    std::memcpy(&d, &v, 8);
    return d;
}

constexpr char kCkptMagic[8] = {'M', 'P', 'T', 'C', 'K', 'P', 'T', '1'};

}  // namespace

StepResult train_step(Seq2Seq& model, const Batch& batch, Adam& optimizer, const TrainConfig& cfg,
                      long step, Rng& rng) {
    cfg.validate();
    auto params = model.params().named();
    for (auto& [name, p] : params) {
        p.node()->ensure_grad();
        std::fill(p.node()->grad.begin(), p.node()->grad.end(), 0.0);
    }
    StepResult res = backprop_batch(model, batch, cfg, step, 1.0, rng);
    res.lr = lr_schedule(step, cfg);
    optimizer.step(params, res.lr);
    return res;
}

TrainRunResult train_run(Seq2Seq& model, const TrainConfig& cfg,
                         const std::function<Batch(Rng&)>& batch_fn, std::ostream* loss_csv,
                         const std::string& config_json) {
    cfg.validate();
    Rng rng(cfg.seed);
    Adam optimizer(cfg);
    TrainRunResult result;

    auto fmt = [](const std::optional<double>& v) {
        if (!v) return std::string();
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.17g", *v);
        return std::string(buf);
    };
    if (loss_csv) *loss_csv << "step,lr,loss_first,loss_final\n";

    auto params = model.params().named();
    for (long step = 1; step <= cfg.max_steps; ++step) {
        for (auto& [name, p] : params) {
            p.node()->ensure_grad();
            std::fill(p.node()->grad.begin(), p.node()->grad.end(), 0.0);
        }
        StepResult res;
        const double scale = 1.0 / static_cast<double>(cfg.grad_accum);
        for (int micro = 0; micro < cfg.grad_accum; ++micro) {
            Batch batch = batch_fn(rng);
            StepResult micro_res = backprop_batch(model, batch, cfg, step, scale, rng);
            if (micro == 0) res = micro_res;
        }
        res.lr = lr_schedule(step, cfg);
        optimizer.step(params, res.lr);
        result.trace.push_back(res);
        if (loss_csv) {
            char lrbuf[32];
            std::snprintf(lrbuf, sizeof lrbuf, "%.17g", res.lr);
            *loss_csv << step << ',' << lrbuf << ',' << fmt(res.loss_first) << ','
                      << fmt(res.loss_final) << '\n';
        }
        if (step % cfg.checkpoint_every == 0)
            result.checkpoints.push_back(Checkpoint::from_params(params, step, config_json));
    }
    if (result.checkpoints.empty() || result.checkpoints.back().step != cfg.max_steps)
        result.checkpoints.push_back(Checkpoint::from_params(params, cfg.max_steps, config_json));
    return result;
}

// ---- checkpoints ----------------------------------------------------------

Checkpoint Checkpoint::from_params(const std::vector<std::pair<std::string, Tensor>>& params,
                                   long step, std::string config_json) {
    Checkpoint c;
    c.step = step;
    c.config_json = std::move(config_json);
    for (const auto& [name, p] : params) {
        c.names.push_back(name);
        c.shapes.push_back(p.shape());
        c.values.push_back(p.data());
    }
    return c;
}

void Checkpoint::apply_to(std::vector<std::pair<std::string, Tensor>>& params) const {
    if (params.size() != names.size())
        throw CheckpointError("parameter count mismatch: model has " +
                              std::to_string(params.size()) + ", checkpoint has " +
                              std::to_string(names.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& [name, p] = params[i];
        if (name != names[i]) throw CheckpointError("parameter name mismatch at " + names[i]);
        if (p.shape() != shapes[i]) throw CheckpointError("shape mismatch for " + names[i]);
        p.node()->data = values[i];
    }
}

void Checkpoint::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path);
    os.write(kCkptMagic, 8);
    write_u32(os, 1);
    write_u64(os, static_cast<std::uint64_t>(step));
    write_u64(os, config_json.size());
    os.write(config_json.data(), static_cast<std::streamsize>(config_json.size()));
    write_u32(os, static_cast<std::uint32_t>(names.size()));
    for (std::size_t i = 0; i < names.size(); ++i) {
        write_u32(os, static_cast<std::uint32_t>(names[i].size()));
        os.write(names[i].data(), static_cast<std::streamsize>(names[i].size()));
        write_u32(os, static_cast<std::uint32_t>(shapes[i].size()));
        for (auto e : shapes[i]) write_u64(os, static_cast<std::uint64_t>(e));
    }
    for (const auto& v : values)
        for (double d : v) write_f64(os, d);
    if (!os) throw IoError("failed writing " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCkptMagic, 8) != 0)
        throw CheckpointError(path + " is not a checkpoint file");
    if (read_u32(is) != 1) throw CheckpointError("unsupported checkpoint version in " + path);
    Checkpoint c;
    c.step = static_cast<long>(read_u64(is));
    const auto cfg_len = read_u64(is);
    c.config_json.resize(cfg_len);
    is.read(c.config_json.data(), static_cast<std::streamsize>(cfg_len));
    const auto n = read_u32(is);
    for (std::uint32_t i = 0; i < n; ++i) {
        const auto name_len = read_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        c.names.push_back(std::move(name));
        const auto ndims = read_u32(is);
        Shape s;
        for (std::uint32_t d = 0; d < ndims; ++d)
            s.push_back(static_cast<std::int64_t>(read_u64(is)));
        c.shapes.push_back(std::move(s));
    }
    for (std::uint32_t i = 0; i < n; ++i) {
        const auto count = shape_numel(c.shapes[i]);
        std::vector<double> v(static_cast<std::size_t>(count));
        for (auto& d : v) d = read_f64(is);
        c.values.push_back(std::move(v));
    }
    if (!is) throw CheckpointError("truncated checkpoint " + path);
    return c;
}

Checkpoint average_checkpoints(const std::vector<Checkpoint>& checkpoints) {
    if (checkpoints.empty()) throw CheckpointError("no checkpoints to average");
    Checkpoint avg = checkpoints.front();
    for (std::size_t c = 1; c < checkpoints.size(); ++c) {
        const Checkpoint& other = checkpoints[c];
        if (other.names != avg.names)
            throw CheckpointError("checkpoint schemas differ (parameter names)");
        for (std::size_t i = 0; i < avg.values.size(); ++i) {
            if (other.shapes[i] != avg.shapes[i])
                throw CheckpointError("shape mismatch for " + avg.names[i]);
            for (std::size_t j = 0; j < avg.values[i].size(); ++j)
                avg.values[i][j] += other.values[i][j];
        }
        avg.step = std::max(avg.step, other.step);
    }
    const double count = static_cast<double>(checkpoints.size());
    for (auto& v : avg.values)
        for (auto& d : v) d /= count;
    return avg;
}

}  // namespace mpt
