// Command-line front end: train / search / eval / gradcheck / ablate /
// export-soft-weights / average.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "mpt/errors.hpp"
#include "mpt/experiment_config.hpp"
#include "mpt/gradcheck.hpp"
#include "mpt/search.hpp"
#include "mpt/training.hpp"
#include "mpt/workbench.hpp"

namespace fs = std::filesystem;
using namespace mpt;

namespace {

std::string ckpt_path(const std::string& out_dir, long step) {
    return out_dir + "/ckpt-" + std::to_string(step) + ".bin";
}

Seq2Seq model_from_checkpoint(const ExperimentConfig& cfg, const std::string& path) {
    Seq2Seq model(cfg.model, cfg.train.seed);
    auto params = model.params().named();
    Checkpoint::load(path).apply_to(params);
    return model;
}

DecodeRegime regime_from_name(const std::string& name) {
    if (name == "first") return DecodeRegime::FirstPass;
    if (name == "final") return DecodeRegime::FinalPass;
    throw ConfigError("regime must be 'first' or 'final', got '" + name + "'");
}

int cmd_train(const std::string& config_path, std::optional<int> steps,
              std::optional<std::string> out_dir) {
    ExperimentConfig cfg = ExperimentConfig::from_json_file(config_path);
    if (steps) cfg.train.max_steps = *steps;
    if (out_dir) cfg.out_dir = *out_dir;
    cfg.validate();
    fs::create_directories(cfg.out_dir);

    auto eval_set = make_eval_set(cfg.task, 64);
    std::set<std::vector<int>> exclude;
    for (const auto& [src, tgt] : eval_set) exclude.insert(src);

    Seq2Seq model(cfg.model, cfg.train.seed ^ 0x9e3779b97f4a7c15ull);
    std::ofstream csv(cfg.out_dir + "/loss.csv");
    if (!csv) throw IoError("cannot write " + cfg.out_dir + "/loss.csv");
    {
        std::ofstream snapshot(cfg.out_dir + "/config.json");
        snapshot << cfg.to_json_text() << '\n';
    }

    auto batch_fn = [&](Rng& rng) {
        return generate_batch(cfg.task, rng, cfg.train.tokens_per_batch, &exclude);
    };
    auto result = train_run(model, cfg.train, batch_fn, &csv, cfg.to_json_text());
    for (const auto& c : result.checkpoints) c.save(ckpt_path(cfg.out_dir, c.step));

    auto metrics = evaluate_model(model, eval_set, DecodeRegime::FinalPass, cfg.decode);
    std::printf("trained %d steps, wrote %zu checkpoints to %s\n", cfg.train.max_steps,
                result.checkpoints.size(), cfg.out_dir.c_str());
    std::printf("final-pass eval: token_acc=%.4f seq_acc=%.4f bleu=%.2f\n",
                metrics.accuracy.token_acc, metrics.accuracy.seq_acc, metrics.bleu);
    return 0;
}

int cmd_search(int layers, int coarse, int fine, int top_m, std::uint64_t seed,
               const std::string& ledger_path, const std::string& config_path, bool enumerate) {
    SearchLedger ledger;
    if (!ledger_path.empty() && fs::exists(ledger_path)) {
        std::ifstream is(ledger_path);
        ledger = SearchLedger::load_jsonl(is);
        std::printf("resumed ledger with %zu entries\n", ledger.size());
    }
    std::ofstream jsonl;
    std::ostream* jsonl_ptr = nullptr;
    if (!ledger_path.empty()) {
        jsonl.open(ledger_path, std::ios::app);
        if (!jsonl) throw IoError("cannot write " + ledger_path);
        jsonl_ptr = &jsonl;
    }

    CandidateEvalConfig eval_cfg;
    if (!config_path.empty()) {
        ExperimentConfig cfg = ExperimentConfig::from_json_file(config_path);
        eval_cfg.model = cfg.model;
        eval_cfg.train = cfg.train;
        eval_cfg.task = cfg.task;
    } else {
        eval_cfg.model.d_model = 32;
        eval_cfg.model.heads = 2;
        eval_cfg.model.d_ff = 64;
        eval_cfg.model.passes = 2;
        eval_cfg.model.vocab = 16;
        eval_cfg.model.max_len = 16;
        eval_cfg.model.decoder_layers = 1;
        eval_cfg.model.dropout = 0.0;
        eval_cfg.task.kind = TaskKind::Reverse;
        eval_cfg.task.max_len = 8;
        eval_cfg.train.max_steps = 60;
        eval_cfg.train.warmup_steps = 30;
        eval_cfg.train.tokens_per_batch = 64;
    }
    eval_cfg.model.layers = layers;
    eval_cfg.model.connection = ConnectionSpec::hard({});  // replaced per candidate

    Evaluator evaluator = [&](const std::vector<int>& perm, std::uint64_t s) {
        return evaluate_candidate(perm, eval_cfg, s);
    };

    SearchSpace space{layers};
    std::vector<LedgerEntry> results;
    if (enumerate) {
        results = run_enumeration(space, seed, evaluator, ledger, jsonl_ptr);
    } else {
        SearchPolicy policy;
        policy.coarse_budget = coarse;
        policy.fine_budget = fine;
        policy.top_m = top_m;
        policy.seed = seed;
        results = run_search(space, policy, evaluator, ledger, jsonl_ptr);
    }
    std::printf("evaluated %zu permutations\n", ledger.size());
    const std::size_t show = std::min<std::size_t>(5, results.size());
    for (std::size_t i = 0; i < show; ++i)
        std::printf("%zu. %s score=%.6f phase=%s%s\n", i + 1,
                    perm_to_string(results[i].perm).c_str(), results[i].score,
                    results[i].phase.c_str(), results[i].failed ? " (failed)" : "");
    return 0;
}

int cmd_eval(const std::string& config_path, const std::string& checkpoint,
             const std::string& regime_name) {
    ExperimentConfig cfg = ExperimentConfig::from_json_file(config_path);
    Seq2Seq model = model_from_checkpoint(cfg, checkpoint);
    auto eval_set = make_eval_set(cfg.task, 64);
    auto metrics = evaluate_model(model, eval_set, regime_from_name(regime_name), cfg.decode);
    std::printf("regime=%s token_acc=%.4f seq_acc=%.4f bleu=%.2f\n", regime_name.c_str(),
                metrics.accuracy.token_acc, metrics.accuracy.seq_acc, metrics.bleu);
    return 0;
}

int cmd_gradcheck(const std::string& config_path, double h, double tol) {
    ExperimentConfig cfg;
    if (!config_path.empty()) {
        cfg = ExperimentConfig::from_json_file(config_path);
    } else {
        cfg.model.d_model = 8;
        cfg.model.heads = 2;
        cfg.model.d_ff = 16;
        cfg.model.layers = 3;
        cfg.model.passes = 2;
        cfg.model.vocab = 11;
        cfg.model.max_len = 8;
        cfg.model.decoder_layers = 1;
        cfg.model.dropout = 0.0;
        cfg.model.connection = ConnectionSpec::hard({2, 0, 1});
        cfg.task.vocab = 11;
        cfg.task.min_len = 3;
        cfg.task.max_len = 5;
        cfg.validate();
    }
    Seq2Seq model(cfg.model, cfg.train.seed);
    Rng rng = cfg.task.stream(0);
    Batch batch = generate_batch(cfg.task, rng, cfg.task.max_len);

    auto report = gradcheck(
        [&](Tape& tape) {
            Rng drop(0);
            return model.batch_loss(tape, batch, DecodeRegime::FinalPass, 0.1, false, drop);
        },
        model.params().named(), h, tol);
    std::string worst = "-";
    for (const auto& e : report.entries)
        if (e.max_rel_err == report.max_rel_err) worst = e.name;
    std::printf("max rel err %.3e at %s (tol %.1e)\n", report.max_rel_err, worst.c_str(), tol);
    std::printf("%s\n", report.pass ? "PASS" : "FAIL");
    return report.pass ? 0 : 1;
}

int cmd_ablate(const std::string& config_path, const std::string& perm_text,
               const std::string& out_path) {
    ExperimentConfig cfg = ExperimentConfig::from_json_file(config_path);
    std::vector<int> best_perm;
    if (!perm_text.empty()) {
        best_perm = perm_from_string(perm_text);
    } else {
        best_perm.resize(static_cast<std::size_t>(cfg.model.layers));
        for (int i = 0; i < cfg.model.layers; ++i) best_perm[static_cast<std::size_t>(i)] = i;
    }
    auto variants = standard_ablation_variants(cfg.model, best_perm);

    std::ofstream csv(out_path);
    if (!csv) throw IoError("cannot write " + out_path);
    auto rows = run_ablation(variants, cfg.train, cfg.task, cfg.decode, 32, &csv);
    std::printf("wrote %zu ablation rows to %s\n", rows.size(), out_path.c_str());
    return 0;
}

int cmd_export_soft(const std::string& checkpoint, const std::string& out_path) {
    Checkpoint c = Checkpoint::load(checkpoint);
    auto it = std::find(c.names.begin(), c.names.end(), "conn.soft_logits");
    if (it == c.names.end())
        throw CheckpointError(checkpoint + " holds no soft connection weights");
    const auto idx = static_cast<std::size_t>(it - c.names.begin());

    Tape tape(false);
    Tensor logits(c.shapes[idx], c.values[idx]);
    Tensor w = soft_weights(tape, logits);
    const auto n = w.shape()[0];

    std::ofstream os(out_path);
    if (!os) throw IoError("cannot write " + out_path);
    char buf[32];
    for (std::int64_t k = 0; k < n; ++k) {  // row k: weights of outer layer k over inner taps
        for (std::int64_t j = 0; j < n; ++j) {
            std::snprintf(buf, sizeof buf, "%.17g", w.data()[static_cast<std::size_t>(k * n + j)]);
            os << buf << (j + 1 < n ? "," : "\n");
        }
    }
    std::printf("wrote %lldx%lld soft weights to %s\n", static_cast<long long>(n),
                static_cast<long long>(n), out_path.c_str());
    return 0;
}

int cmd_average(std::vector<std::string> paths, int last_k, const std::string& out_path) {
    std::sort(paths.begin(), paths.end());
    if (last_k > 0 && static_cast<int>(paths.size()) > last_k)
        paths.erase(paths.begin(), paths.end() - last_k);
    if (paths.empty()) throw ConfigError("no checkpoints to average");
    std::vector<Checkpoint> cs;
    for (const auto& p : paths) cs.push_back(Checkpoint::load(p));
    std::sort(cs.begin(), cs.end(), [](const Checkpoint& a, const Checkpoint& b) {
        return a.step < b.step;
    });
    Checkpoint avg = average_checkpoints(cs);
    avg.save(out_path);
    std::printf("averaged %zu checkpoints (last step %ld) into %s\n", cs.size(), avg.step,
                out_path.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-pass transformer workbench"};
    app.require_subcommand(1);

    std::string config_path, out_dir, checkpoint, ledger_path, regime = "final";
    std::string perm_text, out_path;
    std::optional<int> steps_override;
    std::optional<std::string> out_override;
    int layers = 6, coarse = 20, fine = 20, top_m = 4, last_k = 5;
    std::uint64_t seed = 0;
    double h = 1e-5, tol = 1e-4;
    bool enumerate = false;
    std::vector<std::string> ckpt_list;

    auto* train = app.add_subcommand("train", "train a model from a JSON config");
    train->add_option("--config", config_path, "experiment config path")->required();
    train->add_option("--steps", steps_override, "override train.max_steps");
    train->add_option("--out", out_override, "override out_dir");

    auto* search = app.add_subcommand("search", "random + local search over hard permutations");
    search->add_option("--layers", layers, "encoder layers N");
    search->add_option("--coarse", coarse, "coarse random budget");
    search->add_option("--fine", fine, "fine neighborhood budget");
    search->add_option("--top-m", top_m, "coarse survivors explored in the fine phase");
    search->add_option("--seed", seed, "search seed");
    search->add_option("--ledger", ledger_path, "JSONL ledger path (resumable)");
    search->add_option("--config", config_path, "candidate training config");
    search->add_flag("--enumerate", enumerate, "evaluate all N! permutations instead");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the task's test stream");
    eval->add_option("--config", config_path, "experiment config path")->required();
    eval->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
    eval->add_option("--regime", regime, "decode regime: first|final");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    gc->add_option("--config", config_path, "experiment config (default: built-in tiny model)");
    gc->add_option("--fd-step", h, "finite-difference step");
    gc->add_option("--tol", tol, "max relative error tolerance");

    auto* ablate = app.add_subcommand("ablate", "run the standard variant table");
    ablate->add_option("--config", config_path, "experiment config path")->required();
    ablate->add_option("--perm", perm_text, "best permutation, e.g. 0,4,1,5,2,3");
    ablate->add_option("--out", out_path, "report CSV path")->required();

    auto* exps = app.add_subcommand("export-soft-weights", "dump softmaxed connection weights");
    exps->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
    exps->add_option("--out", out_path, "CSV path")->required();

    auto* avg = app.add_subcommand("average", "average the last k checkpoints");
    avg->add_option("checkpoints", ckpt_list, "checkpoint paths")->required();
    avg->add_option("--last-k", last_k, "how many (by step) to keep");
    avg->add_option("--out", out_path, "output checkpoint path")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return cmd_train(config_path, steps_override, out_override);
        if (search->parsed())
            return cmd_search(layers, coarse, fine, top_m, seed, ledger_path, config_path,
                              enumerate);
        if (eval->parsed()) return cmd_eval(config_path, checkpoint, regime);
        if (gc->parsed()) return cmd_gradcheck(config_path, h, tol);
        if (ablate->parsed()) return cmd_ablate(config_path, perm_text, out_path);
        if (exps->parsed()) return cmd_export_soft(checkpoint, out_path);
        if (avg->parsed()) return cmd_average(ckpt_list, last_k, out_path);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
