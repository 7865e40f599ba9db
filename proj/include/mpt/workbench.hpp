#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "mpt/model.hpp"
#include "mpt/training.hpp"

namespace mpt {

enum class TaskKind { Copy, Reverse, SortDigits };

TaskKind task_kind_from_name(const std::string& name);
const char* task_kind_name(TaskKind k);

// Synthetic seq2seq tasks over integer vocabularies. Content tokens live in
// [3, vocab); ids 0-2 are pad/bos/eos. Generation is integer-only and fully
// determined by the seed, with disjoint train/valid/test streams.
struct ToyTask {
    TaskKind kind = TaskKind::Copy;
    int vocab = 16;
    int min_len = 3;
    int max_len = 12;
    std::uint64_t seed = 7;

    void validate() const;
    std::vector<int> target_for(const std::vector<int>& src) const;
    Rng stream(int split) const { return Rng(seed * 1000003 + static_cast<std::uint64_t>(split)); }
};

// Length-bucketed batch: one length is sampled, then enough sequences of that
// exact length to reach tokens_per_batch. Sources in `exclude` are resampled.
Batch generate_batch(const ToyTask& task, Rng& rng, int tokens_per_batch,
                     const std::set<std::vector<int>>* exclude = nullptr);

// Deduplicated held-out set from the task's test stream.
std::vector<std::pair<std::vector<int>, std::vector<int>>> make_eval_set(const ToyTask& task,
                                                                         int count);

struct DecodeConfig {
    int beam = 4;
    double length_penalty = 0.2;
    int max_len = 32;

    void validate() const;
};

struct DecodeResult {
    std::vector<int> tokens;  // without bos/eos
    double score = 0.0;       // sum-log-prob / length^alpha, length includes eos
    bool truncated = false;   // max length reached without eos
};

// Log-probabilities of the next token given the generated prefix (no bos).
using StepFn = std::function<std::vector<double>(const std::vector<int>& prefix)>;

DecodeResult beam_decode(const StepFn& step, int vocab, const DecodeConfig& cfg);

DecodeResult beam_decode_model(const Seq2Seq& model, const std::vector<int>& src,
                               DecodeRegime regime, const DecodeConfig& cfg);

// Corpus-level BLEU in [0,100]: geometric mean of modified n-gram precisions
// (n <= max_n) times the brevity penalty, no smoothing.
double corpus_bleu(const std::vector<std::vector<int>>& hypotheses,
                   const std::vector<std::vector<int>>& references, int max_n = 4);

struct AccuracyResult {
    double token_acc = 0.0;
    double seq_acc = 0.0;
};

AccuracyResult token_and_sequence_accuracy(const std::vector<std::vector<int>>& hyps,
                                           const std::vector<std::vector<int>>& refs);

struct EvalMetrics {
    AccuracyResult accuracy;
    double bleu = 0.0;
};

EvalMetrics evaluate_model(const Seq2Seq& model,
                           const std::vector<std::pair<std::vector<int>, std::vector<int>>>& pairs,
                           DecodeRegime regime, const DecodeConfig& cfg);

// Default search evaluator: trains a small hard-MPT on the task for a fixed
// budget and returns held-out token accuracy in [0,1].
struct CandidateEvalConfig {
    MptConfig model;      // connection.perm is replaced per candidate
    TrainConfig train;
    ToyTask task;
    int eval_pairs = 32;
};

double evaluate_candidate(const std::vector<int>& perm, const CandidateEvalConfig& cfg,
                          std::uint64_t seed);

struct AblationRow {
    std::string name;
    std::int64_t param_count = 0;
    int steps = 0;
    bool diverged = false;
    EvalMetrics first_pass;
    EvalMetrics final_pass;
};

struct AblationVariant {
    std::string name;
    MptConfig model;
};

// Trains each variant on the shared task/budget and evaluates both decode
// regimes. Emits the report as CSV if a stream is given.
std::vector<AblationRow> run_ablation(const std::vector<AblationVariant>& variants,
                                      const TrainConfig& train, const ToyTask& task,
                                      const DecodeConfig& decode, int eval_pairs,
                                      std::ostream* csv = nullptr);

// The desk-scale analog of the paper-style ablation table over a base config:
// plain baseline, chained, hard identity, hard best, soft, routing a-d.
std::vector<AblationVariant> standard_ablation_variants(const MptConfig& base,
                                                        const std::vector<int>& best_perm);

void write_ablation_csv(const std::vector<AblationRow>& rows, std::ostream& os);

}  // namespace mpt
