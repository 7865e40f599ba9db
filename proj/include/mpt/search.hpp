#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "mpt/rng.hpp"

namespace mpt {

struct SearchSpace {
    int n = 6;  // layers; constrained space size is n!
};

std::int64_t factorial(int n);

struct LedgerEntry {
    std::vector<int> perm;
    std::uint64_t seed = 0;
    double score = 0.0;
    std::string phase;  // "coarse" | "fine" | "enum"
    double wall_time = 0.0;
    bool failed = false;
};

// Append-only record of evaluated permutations; rejects duplicates.
class SearchLedger {
public:
    bool contains(const std::vector<int>& perm) const { return seen_.count(perm) > 0; }
    std::size_t size() const { return entries_.size(); }
    const std::vector<LedgerEntry>& entries() const { return entries_; }

    // Appends and optionally persists one JSONL record.
    void append(LedgerEntry entry, std::ostream* jsonl = nullptr);

    // Restores previously evaluated permutations from a JSONL stream.
    static SearchLedger load_jsonl(std::istream& is);

private:
    std::vector<LedgerEntry> entries_;
    std::set<std::vector<int>> seen_;
};

struct SearchPolicy {
    int coarse_budget = 20;
    int fine_budget = 20;
    int top_m = 4;
    int neighbors_per_candidate = 1 << 20;  // effectively unlimited per parent
    std::uint64_t seed = 0;

    void validate() const;
};

// Uniform over permutations not yet in the ledger; nullopt when exhausted.
std::optional<std::vector<int>> sample_permutation(Rng& rng, int n, const SearchLedger& ledger);

// All C(n,2) single-swap neighbors, in lexicographic order.
std::vector<std::vector<int>> swap_neighbors(const std::vector<int>& perm);

// Deterministic given (permutation, seed). Throwing marks the evaluation
// failed; the candidate is skipped and the budget is consumed.
using Evaluator = std::function<double(const std::vector<int>& perm, std::uint64_t seed)>;

// Coarse random sampling, then single-swap exploration around the top_m
// coarse scorers (parents best-first, neighbors lexicographic). Returns the
// ledger entries ranked by score descending, lexicographically smaller
// permutation first on ties.
std::vector<LedgerEntry> run_search(const SearchSpace& space, const SearchPolicy& policy,
                                    const Evaluator& evaluator, SearchLedger& ledger,
                                    std::ostream* jsonl = nullptr);

// Evaluates every permutation of the space (lexicographic order).
std::vector<LedgerEntry> run_enumeration(const SearchSpace& space, std::uint64_t seed,
                                         const Evaluator& evaluator, SearchLedger& ledger,
                                         std::ostream* jsonl = nullptr);

std::vector<LedgerEntry> ranked(std::vector<LedgerEntry> entries);

std::string ledger_entry_to_json(const LedgerEntry& e);

}  // namespace mpt
