#include "mpt/workbench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "mpt/errors.hpp"

namespace mpt {

TaskKind task_kind_from_name(const std::string& name) {
    if (name == "copy") return TaskKind::Copy;
    if (name == "reverse") return TaskKind::Reverse;
    if (name == "sort") return TaskKind::SortDigits;
    throw ConfigError("unknown task kind '" + name + "'");
}

const char* task_kind_name(TaskKind k) {
    switch (k) {
        case TaskKind::Copy: return "copy";
        case TaskKind::Reverse: return "reverse";
        case TaskKind::SortDigits: return "sort";
    }
    return "?";
}

void ToyTask::validate() const {
    if (vocab <= kNumSpecialTokens)
        throw ConfigError("task vocab must exceed the " + std::to_string(kNumSpecialTokens) +
                          " special tokens");
    if (min_len < 1 || max_len < min_len) throw ConfigError("invalid task length range");
}

std::vector<int> ToyTask::target_for(const std::vector<int>& src) const {
    std::vector<int> tgt(src);
    switch (kind) {
        case TaskKind::Copy: break;
        case TaskKind::Reverse: std::reverse(tgt.begin(), tgt.end()); break;
        case TaskKind::SortDigits: std::sort(tgt.begin(), tgt.end()); break;
    }
    return tgt;
}

namespace {

std::vector<int> sample_source(const ToyTask& task, Rng& rng, int len) {
    std::vector<int> src(static_cast<std::size_t>(len));
    for (auto& t : src)
        t = kNumSpecialTokens +
            static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(task.vocab - kNumSpecialTokens)));
    return src;
}

int sample_length(const ToyTask& task, Rng& rng) {
    return task.min_len +
           static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(task.max_len - task.min_len + 1)));
}

}  // namespace

Batch generate_batch(const ToyTask& task, Rng& rng, int tokens_per_batch,
                     const std::set<std::vector<int>>* exclude) {
    task.validate();
    const int len = sample_length(task, rng);
    const int nseq = std::max(1, tokens_per_batch / len);
    Batch batch;
    for (int i = 0; i < nseq; ++i) {
        std::vector<int> src;
        for (int attempt = 0;; ++attempt) {
            src = sample_source(task, rng, len);
            if (!exclude || exclude->count(src) == 0) break;
            if (attempt > 10000)
                throw ContractError("cannot draw a training source disjoint from the eval set");
        }
        batch.tgt.push_back(task.target_for(src));
        batch.src.push_back(std::move(src));
    }
    return batch;
}

std::vector<std::pair<std::vector<int>, std::vector<int>>> make_eval_set(const ToyTask& task,
                                                                         int count) {
    task.validate();
    Rng rng = task.stream(2);
    std::set<std::vector<int>> seen;
    std::vector<std::pair<std::vector<int>, std::vector<int>>> out;
    while (static_cast<int>(out.size()) < count) {
        auto src = sample_source(task, rng, sample_length(task, rng));
        if (!seen.insert(src).second) continue;
        out.emplace_back(src, task.target_for(src));
    }
    return out;
}

// ---- decoding ---------------------------------------------------------------

void DecodeConfig::validate() const {
    if (beam < 1) throw ConfigError("beam size must be >= 1");
    if (length_penalty < 0.0) throw ConfigError("length penalty must be >= 0");
    if (max_len < 1) throw ConfigError("decode max_len must be >= 1");
}

DecodeResult beam_decode(const StepFn& step, int vocab, const DecodeConfig& cfg) {
    cfg.validate();
    struct Hyp {
        std::vector<int> tokens;
        double logp = 0.0;
    };
    auto normalized = [&cfg](double logp, std::size_t len_with_eos) {
        return logp / std::pow(static_cast<double>(len_with_eos), cfg.length_penalty);
    };

    std::vector<Hyp> live{Hyp{}};
    std::vector<DecodeResult> finished;
    for (int t = 0; t < cfg.max_len && !live.empty(); ++t) {
        std::vector<Hyp> candidates;
        for (const auto& h : live) {
            const auto lp = step(h.tokens);
            if (static_cast<int>(lp.size()) != vocab)
                throw ContractError("step function returned " + std::to_string(lp.size()) +
                                    " log-probs for vocab " + std::to_string(vocab));
            for (int v = 0; v < vocab; ++v) {
                Hyp c = h;
                c.tokens.push_back(v);
                c.logp += lp[static_cast<std::size_t>(v)];
                candidates.push_back(std::move(c));
            }
        }
        std::stable_sort(candidates.begin(), candidates.end(),
                         [](const Hyp& a, const Hyp& b) { return a.logp > b.logp; });
        if (static_cast<int>(candidates.size()) > cfg.beam)
            candidates.resize(static_cast<std::size_t>(cfg.beam));
        live.clear();
        for (auto& c : candidates) {
            if (c.tokens.back() == kEosId) {
                DecodeResult r;
                r.score = normalized(c.logp, c.tokens.size());
                c.tokens.pop_back();
                r.tokens = std::move(c.tokens);
                finished.push_back(std::move(r));
            } else {
                live.push_back(std::move(c));
            }
        }
    }
    if (!finished.empty()) {
        auto best = std::max_element(finished.begin(), finished.end(),
                                     [](const DecodeResult& a, const DecodeResult& b) {
                                         if (a.score != b.score) return a.score < b.score;
                                         return a.tokens > b.tokens;
                                     });
        return *best;
    }
    // Max length reached with no eos anywhere on the beam.
    auto best = std::max_element(live.begin(), live.end(), [&](const Hyp& a, const Hyp& b) {
        return normalized(a.logp, a.tokens.size() + 1) < normalized(b.logp, b.tokens.size() + 1);
    });
    DecodeResult r;
    r.tokens = best->tokens;
    r.score = normalized(best->logp, best->tokens.size() + 1);
    r.truncated = true;
    return r;
}

DecodeResult beam_decode_model(const Seq2Seq& model, const std::vector<int>& src,
                               DecodeRegime regime, const DecodeConfig& cfg) {
    Tape tape(false);
    Rng rng(0);
    PassTrace trace = model.encode(tape, src, false, rng);
    Tensor memory = encoder_output_for_decode(trace, regime);
    StepFn step = [&model, memory](const std::vector<int>& prefix) {
        return model.next_token_logprobs(memory, prefix);
    };
    return beam_decode(step, model.config().vocab, cfg);
}

// ---- metrics ----------------------------------------------------------------

double corpus_bleu(const std::vector<std::vector<int>>& hypotheses,
                   const std::vector<std::vector<int>>& references, int max_n) {
    if (hypotheses.empty()) throw ContractError("corpus_bleu on empty hypothesis set");
    if (hypotheses.size() != references.size())
        throw ContractError("corpus_bleu: " + std::to_string(hypotheses.size()) +
                            " hypotheses vs " + std::to_string(references.size()) + " references");
    for (const auto& r : references)
        if (r.empty()) throw ContractError("corpus_bleu with an empty reference");

    std::int64_t hyp_len = 0, ref_len = 0;
    std::vector<std::int64_t> matched(static_cast<std::size_t>(max_n), 0);
    std::vector<std::int64_t> total(static_cast<std::size_t>(max_n), 0);
    for (std::size_t s = 0; s < hypotheses.size(); ++s) {
        const auto& hyp = hypotheses[s];
        const auto& ref = references[s];
        hyp_len += static_cast<std::int64_t>(hyp.size());
        ref_len += static_cast<std::int64_t>(ref.size());
        for (int n = 1; n <= max_n; ++n) {
            std::map<std::vector<int>, std::int64_t> ref_counts;
            for (std::size_t i = 0; i + n <= ref.size(); ++i)
                ++ref_counts[std::vector<int>(ref.begin() + static_cast<std::ptrdiff_t>(i),
                                              ref.begin() + static_cast<std::ptrdiff_t>(i + n))];
            std::map<std::vector<int>, std::int64_t> hyp_counts;
            for (std::size_t i = 0; i + n <= hyp.size(); ++i)
                ++hyp_counts[std::vector<int>(hyp.begin() + static_cast<std::ptrdiff_t>(i),
                                              hyp.begin() + static_cast<std::ptrdiff_t>(i + n))];
            for (const auto& [gram, count] : hyp_counts) {
                total[static_cast<std::size_t>(n - 1)] += count;
                auto it = ref_counts.find(gram);
                if (it != ref_counts.end())
                    matched[static_cast<std::size_t>(n - 1)] += std::min(count, it->second);
            }
        }
    }

    double log_precision = 0.0;
    for (int n = 0; n < max_n; ++n) {
        if (total[static_cast<std::size_t>(n)] == 0 || matched[static_cast<std::size_t>(n)] == 0)
            return 0.0;
        log_precision += std::log(static_cast<double>(matched[static_cast<std::size_t>(n)]) /
                                  static_cast<double>(total[static_cast<std::size_t>(n)]));
    }
    log_precision /= static_cast<double>(max_n);
    const double bp =
        hyp_len >= ref_len
            ? 1.0
            : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
    return 100.0 * bp * std::exp(log_precision);
}

AccuracyResult token_and_sequence_accuracy(const std::vector<std::vector<int>>& hyps,
                                           const std::vector<std::vector<int>>& refs) {
    if (hyps.size() != refs.size()) throw ContractError("accuracy on unaligned pairs");
    std::int64_t correct = 0, total = 0, exact = 0;
    for (std::size_t s = 0; s < hyps.size(); ++s) {
        const auto& hyp = hyps[s];
        const auto& ref = refs[s];
        for (std::size_t i = 0; i < ref.size(); ++i) {
            if (ref[i] == kPadId) continue;
            ++total;
            if (i < hyp.size() && hyp[i] == ref[i]) ++correct;
        }
        if (hyp == ref) ++exact;
    }
    AccuracyResult r;
    r.token_acc = total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
    r.seq_acc = hyps.empty() ? 0.0 : static_cast<double>(exact) / static_cast<double>(hyps.size());
    return r;
}

EvalMetrics evaluate_model(const Seq2Seq& model,
                           const std::vector<std::pair<std::vector<int>, std::vector<int>>>& pairs,
                           DecodeRegime regime, const DecodeConfig& cfg) {
    std::vector<std::vector<int>> hyps, refs;
    for (const auto& [src, tgt] : pairs) {
        hyps.push_back(beam_decode_model(model, src, regime, cfg).tokens);
        refs.push_back(tgt);
    }
    EvalMetrics m;
    m.accuracy = token_and_sequence_accuracy(hyps, refs);
    m.bleu = corpus_bleu(hyps, refs);
    return m;
}

// ---- candidate evaluation ---------------------------------------------------

double evaluate_candidate(const std::vector<int>& perm, const CandidateEvalConfig& cfg,
                          std::uint64_t seed) {
    MptConfig model_cfg = cfg.model;
    model_cfg.connection = ConnectionSpec::hard(perm);
    model_cfg.validate();
    TrainConfig train_cfg = cfg.train;
    train_cfg.seed = seed;

    auto eval_pairs = make_eval_set(cfg.task, cfg.eval_pairs);
    std::set<std::vector<int>> exclude;
    for (const auto& [src, tgt] : eval_pairs) exclude.insert(src);

    Seq2Seq model(model_cfg, seed ^ 0x9e3779b97f4a7c15ull);
    auto batch_fn = [&](Rng& rng) {
        return generate_batch(cfg.task, rng, train_cfg.tokens_per_batch, &exclude);
    };
    train_run(model, train_cfg, batch_fn);

    DecodeConfig greedy{1, 0.0, std::min(2 * cfg.task.max_len + 2, model_cfg.max_len - 1)};
    return evaluate_model(model, eval_pairs, DecodeRegime::FinalPass, greedy).accuracy.token_acc;
}

// ---- ablation -----------------------------------------------------------------

std::vector<AblationVariant> standard_ablation_variants(const MptConfig& base,
                                                        const std::vector<int>& best_perm) {
    const int n = base.layers;
    std::vector<int> identity(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) identity[static_cast<std::size_t>(i)] = i;

    auto with = [&base](ConnectionSpec conn, int passes, RoutingPattern routing) {
        MptConfig c = base;
        c.connection = std::move(conn);
        c.passes = passes;
        c.routing = routing;
        return c;
    };
    const RoutingPattern a = RoutingPattern::from_letter('a');

    std::vector<AblationVariant> v;
    v.push_back({"baseline", with(ConnectionSpec::none(), 1, a)});
    v.push_back({"chained", with(ConnectionSpec::chained(), 2, a)});
    v.push_back({"hard_identity", with(ConnectionSpec::hard(identity), 2, a)});
    v.push_back({"hard_" + perm_to_string(best_perm), with(ConnectionSpec::hard(best_perm), 2, a)});
    v.push_back({"soft", with(ConnectionSpec::soft(), 2, a)});
    for (char c : {'a', 'b', 'c', 'd'})
        v.push_back({std::string("pattern_") + c,
                     with(ConnectionSpec::hard(identity), 2, RoutingPattern::from_letter(c))});
    return v;
}

std::vector<AblationRow> run_ablation(const std::vector<AblationVariant>& variants,
                                      const TrainConfig& train, const ToyTask& task,
                                      const DecodeConfig& decode, int eval_pairs,
                                      std::ostream* csv) {
    auto eval_set = make_eval_set(task, eval_pairs);
    std::set<std::vector<int>> exclude;
    for (const auto& [src, tgt] : eval_set) exclude.insert(src);

    std::vector<AblationRow> rows;
    for (const auto& variant : variants) {
        AblationRow row;
        row.name = variant.name;
        row.param_count = count_params(variant.model);
        row.steps = train.max_steps;
        try {
            Seq2Seq model(variant.model, train.seed ^ 0x9e3779b97f4a7c15ull);
            auto batch_fn = [&](Rng& rng) {
                return generate_batch(task, rng, train.tokens_per_batch, &exclude);
            };
            train_run(model, train, batch_fn);
            row.first_pass = evaluate_model(model, eval_set, DecodeRegime::FirstPass, decode);
            row.final_pass = evaluate_model(model, eval_set, DecodeRegime::FinalPass, decode);
        } catch (const DivergedRunError&) {
            row.diverged = true;
        }
        rows.push_back(std::move(row));
    }
    if (csv) write_ablation_csv(rows, *csv);
    return rows;
}

void write_ablation_csv(const std::vector<AblationRow>& rows, std::ostream& os) {
    os << "name,params,steps,diverged,first_token_acc,first_seq_acc,first_bleu,"
          "final_token_acc,final_seq_acc,final_bleu\n";
    char buf[256];
    for (const auto& r : rows) {
        if (r.diverged) {
            os << r.name << ',' << r.param_count << ',' << r.steps << ",1,,,,,,\n";
            continue;
        }
        std::snprintf(buf, sizeof buf, "%s,%lld,%d,0,%.6f,%.6f,%.4f,%.6f,%.6f,%.4f\n",
                      r.name.c_str(), static_cast<long long>(r.param_count), r.steps,
                      r.first_pass.accuracy.token_acc, r.first_pass.accuracy.seq_acc,
                      r.first_pass.bleu, r.final_pass.accuracy.token_acc,
                      r.final_pass.accuracy.seq_acc, r.final_pass.bleu);
        os << buf;
    }
}

}  // namespace mpt
