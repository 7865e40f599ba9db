#include "mpt/experiment_config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "nlohmann/json.hpp"

#include "mpt/errors.hpp"

namespace mpt {

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [key, value] : j.items())
        if (allowed.count(key) == 0)
            throw ConfigError("unknown key '" + key + "' in " + where);
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) {
        try {
            out = j.at(key).get<T>();
        } catch (const json::exception&) {
            throw ConfigError(std::string("bad value for '") + key + "'");
        }
    }
}

ConnectionSpec parse_connection(const json& j) {
    check_keys(j, "model.connection", {"kind", "perm"});
    std::string kind = "none";
    get_if(j, "kind", kind);
    if (kind == "none") return ConnectionSpec::none();
    if (kind == "chained") return ConnectionSpec::chained();
    if (kind == "soft") return ConnectionSpec::soft();
    if (kind == "hard") {
        std::vector<int> perm;
        get_if(j, "perm", perm);
        return ConnectionSpec::hard(std::move(perm));
    }
    throw ConfigError("unknown connection kind '" + kind + "'");
}

json connection_to_json(const ConnectionSpec& c) {
    json j;
    j["kind"] = conn_kind_name(c.kind);
    if (c.kind == ConnKind::Hard) j["perm"] = c.perm;
    return j;
}

MptConfig parse_model(const json& j, int task_vocab) {
    check_keys(j, "model",
               {"d_model", "heads", "d_ff", "layers", "passes", "vocab", "max_len",
                "decoder_layers", "dropout", "connection", "routing", "loss_mode"});
    MptConfig m;
    m.vocab = task_vocab;
    get_if(j, "d_model", m.d_model);
    get_if(j, "heads", m.heads);
    get_if(j, "d_ff", m.d_ff);
    get_if(j, "layers", m.layers);
    get_if(j, "passes", m.passes);
    get_if(j, "vocab", m.vocab);
    get_if(j, "max_len", m.max_len);
    get_if(j, "decoder_layers", m.decoder_layers);
    get_if(j, "dropout", m.dropout);
    if (j.contains("connection")) m.connection = parse_connection(j.at("connection"));
    if (j.contains("routing")) {
        std::string r = j.at("routing").get<std::string>();
        if (r.size() != 1) throw ConfigError("routing must be one of a/b/c/d");
        m.routing = RoutingPattern::from_letter(r[0]);
    }
    if (j.contains("loss_mode")) {
        std::string lm = j.at("loss_mode").get<std::string>();
        if (lm == "final_pass")
            m.loss_mode = LossMode::FinalPass;
        else if (lm == "sum_all_passes")
            m.loss_mode = LossMode::SumAllPasses;
        else if (lm == "random_pass")
            m.loss_mode = LossMode::RandomPass;
        else
            throw ConfigError("unknown loss_mode '" + lm + "'");
    }
    return m;
}

TrainConfig parse_train(const json& j) {
    check_keys(j, "train",
               {"base_lr", "warmup_steps", "beta1", "beta2", "adam_eps", "weight_decay",
                "label_smoothing", "tokens_per_batch", "max_steps", "checkpoint_every",
                "grad_accum", "seed"});
    TrainConfig t;
    get_if(j, "base_lr", t.base_lr);
    get_if(j, "warmup_steps", t.warmup_steps);
    get_if(j, "beta1", t.beta1);
    get_if(j, "beta2", t.beta2);
    get_if(j, "adam_eps", t.adam_eps);
    get_if(j, "weight_decay", t.weight_decay);
    get_if(j, "label_smoothing", t.label_smoothing);
    get_if(j, "tokens_per_batch", t.tokens_per_batch);
    get_if(j, "max_steps", t.max_steps);
    get_if(j, "checkpoint_every", t.checkpoint_every);
    get_if(j, "grad_accum", t.grad_accum);
    get_if(j, "seed", t.seed);
    return t;
}

ToyTask parse_task(const json& j) {
    check_keys(j, "task", {"kind", "vocab", "min_len", "max_len", "seed"});
    ToyTask t;
    if (j.contains("kind")) t.kind = task_kind_from_name(j.at("kind").get<std::string>());
    get_if(j, "vocab", t.vocab);
    get_if(j, "min_len", t.min_len);
    get_if(j, "max_len", t.max_len);
    get_if(j, "seed", t.seed);
    return t;
}

DecodeConfig parse_decode(const json& j) {
    check_keys(j, "decode", {"beam", "length_penalty", "max_len"});
    DecodeConfig d;
    get_if(j, "beam", d.beam);
    get_if(j, "length_penalty", d.length_penalty);
    get_if(j, "max_len", d.max_len);
    return d;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid JSON: ") + e.what());
    }
    check_keys(j, "config", {"model", "train", "task", "decode", "out_dir"});
    ExperimentConfig cfg;
    if (j.contains("task")) cfg.task = parse_task(j.at("task"));
    if (j.contains("model"))
        cfg.model = parse_model(j.at("model"), cfg.task.vocab);
    else
        cfg.model.vocab = cfg.task.vocab;
    if (j.contains("train")) cfg.train = parse_train(j.at("train"));
    if (j.contains("decode")) cfg.decode = parse_decode(j.at("decode"));
    get_if(j, "out_dir", cfg.out_dir);
    cfg.validate();
    return cfg;
}

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read config file " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return from_json_text(ss.str());
}

std::string ExperimentConfig::to_json_text() const {
    json j;
    j["model"] = {{"d_model", model.d_model},
                  {"heads", model.heads},
                  {"d_ff", model.d_ff},
                  {"layers", model.layers},
                  {"passes", model.passes},
                  {"vocab", model.vocab},
                  {"max_len", model.max_len},
                  {"decoder_layers", model.decoder_layers},
                  {"dropout", model.dropout},
                  {"connection", connection_to_json(model.connection)},
                  {"routing", std::string(1, model.routing.letter())},
                  {"loss_mode", model.loss_mode == LossMode::FinalPass      ? "final_pass"
                                : model.loss_mode == LossMode::SumAllPasses ? "sum_all_passes"
                                                                            : "random_pass"}};
    j["train"] = {{"base_lr", train.base_lr},
                  {"warmup_steps", train.warmup_steps},
                  {"beta1", train.beta1},
                  {"beta2", train.beta2},
                  {"adam_eps", train.adam_eps},
                  {"weight_decay", train.weight_decay},
                  {"label_smoothing", train.label_smoothing},
                  {"tokens_per_batch", train.tokens_per_batch},
                  {"max_steps", train.max_steps},
                  {"checkpoint_every", train.checkpoint_every},
                  {"grad_accum", train.grad_accum},
                  {"seed", train.seed}};
    j["task"] = {{"kind", task_kind_name(task.kind)},
                 {"vocab", task.vocab},
                 {"min_len", task.min_len},
                 {"max_len", task.max_len},
                 {"seed", task.seed}};
    j["decode"] = {{"beam", decode.beam},
                   {"length_penalty", decode.length_penalty},
                   {"max_len", decode.max_len}};
    j["out_dir"] = out_dir;
    return j.dump(2);
}

void ExperimentConfig::validate() const {
    task.validate();
    if (model.vocab != task.vocab)
        throw ConfigError("model.vocab " + std::to_string(model.vocab) + " != task.vocab " +
                          std::to_string(task.vocab));
    if (model.max_len < task.max_len + 2)
        throw ConfigError("model.max_len must cover task.max_len plus bos/eos");
    model.validate();
    train.validate();
    decode.validate();
}

}  // namespace mpt
