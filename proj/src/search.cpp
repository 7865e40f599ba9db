#include "mpt/search.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <istream>
#include <limits>

#include "nlohmann/json.hpp"

#include "mpt/errors.hpp"
#include "mpt/model_config.hpp"

namespace mpt {

std::int64_t factorial(int n) {
    std::int64_t f = 1;
    for (int i = 2; i <= n; ++i) f *= i;
    return f;
}

void SearchPolicy::validate() const {
    if (coarse_budget < 0 || fine_budget < 0) throw ConfigError("search budgets must be >= 0");
    if (fine_budget > 0 && top_m < 1) throw ConfigError("top_m must be >= 1 when fine_budget > 0");
    if (neighbors_per_candidate < 0) throw ConfigError("neighbors_per_candidate must be >= 0");
}

void SearchLedger::append(LedgerEntry entry, std::ostream* jsonl) {
    if (!is_bijection(entry.perm, static_cast<int>(entry.perm.size())))
        throw ContractError("ledger entry " + perm_to_string(entry.perm) + " is not a bijection");
    if (contains(entry.perm))
        throw ContractError("permutation " + perm_to_string(entry.perm) + " already evaluated");
    if (jsonl) *jsonl << ledger_entry_to_json(entry) << '\n';
    seen_.insert(entry.perm);
    entries_.push_back(std::move(entry));
}

std::string ledger_entry_to_json(const LedgerEntry& e) {
    nlohmann::json j;
    j["perm"] = perm_to_string(e.perm);
    j["seed"] = e.seed;
    if (e.failed)
        j["score"] = nullptr;
    else
        j["score"] = e.score;
    j["phase"] = e.phase;
    j["time"] = e.wall_time;
    return j.dump();
}

SearchLedger SearchLedger::load_jsonl(std::istream& is) {
    SearchLedger ledger;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        LedgerEntry e;
        e.perm = perm_from_string(j.at("perm").get<std::string>());
        e.seed = j.at("seed").get<std::uint64_t>();
        if (j.at("score").is_null()) {
            e.failed = true;
            e.score = -std::numeric_limits<double>::infinity();
        } else {
            e.score = j.at("score").get<double>();
        }
        e.phase = j.at("phase").get<std::string>();
        e.wall_time = j.value("time", 0.0);
        ledger.append(std::move(e));
    }
    return ledger;
}

std::optional<std::vector<int>> sample_permutation(Rng& rng, int n, const SearchLedger& ledger) {
    const std::int64_t total = factorial(n);
    if (static_cast<std::int64_t>(ledger.size()) >= total) return std::nullopt;
    for (int attempt = 0; attempt < 200; ++attempt) {
        auto perm = rng.permutation(n);
        if (!ledger.contains(perm)) return perm;
    }
    // Nearly exhausted space: enumerate the remainder and pick uniformly.
    std::vector<int> base(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) base[static_cast<std::size_t>(i)] = i;
    std::vector<std::vector<int>> remaining;
    do {
        if (!ledger.contains(base)) remaining.push_back(base);
    } while (std::next_permutation(base.begin(), base.end()));
    if (remaining.empty()) return std::nullopt;
    return remaining[static_cast<std::size_t>(rng.uniform_int(remaining.size()))];
}

std::vector<std::vector<int>> swap_neighbors(const std::vector<int>& perm) {
    std::string issues;
    if (!is_bijection(perm, static_cast<int>(perm.size()), &issues))
        throw ContractError("swap_neighbors of non-bijection " + perm_to_string(perm) + ":" + issues);
    std::vector<std::vector<int>> out;
    for (std::size_t i = 0; i < perm.size(); ++i)
        for (std::size_t j = i + 1; j < perm.size(); ++j) {
            auto q = perm;
            std::swap(q[i], q[j]);
            out.push_back(std::move(q));
        }
    std::sort(out.begin(), out.end());
    return out;
}

namespace {

void evaluate_into(const Evaluator& evaluator, std::vector<int> perm, std::uint64_t seed,
                   const std::string& phase, SearchLedger& ledger, std::ostream* jsonl) {
    const auto t0 = std::chrono::steady_clock::now();
    LedgerEntry e;
    e.perm = std::move(perm);
    e.seed = seed;
    e.phase = phase;
    try {
        e.score = evaluator(e.perm, seed);
        if (!std::isfinite(e.score)) throw ContractError("non-finite score");
    } catch (const std::exception&) {
        e.failed = true;
        e.score = -std::numeric_limits<double>::infinity();
    }
    e.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ledger.append(std::move(e), jsonl);
}

bool better(const LedgerEntry& a, const LedgerEntry& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.perm < b.perm;  // deterministic tie-break
}

}  // namespace

std::vector<LedgerEntry> ranked(std::vector<LedgerEntry> entries) {
    std::stable_sort(entries.begin(), entries.end(), better);
    return entries;
}

std::vector<LedgerEntry> run_search(const SearchSpace& space, const SearchPolicy& policy,
                                    const Evaluator& evaluator, SearchLedger& ledger,
                                    std::ostream* jsonl) {
    policy.validate();
    Rng rng(policy.seed);

    std::vector<LedgerEntry> coarse;
    for (int i = 0; i < policy.coarse_budget; ++i) {
        auto perm = sample_permutation(rng, space.n, ledger);
        if (!perm) break;  // space exhausted
        evaluate_into(evaluator, std::move(*perm), policy.seed, "coarse", ledger, jsonl);
        coarse.push_back(ledger.entries().back());
    }

    if (policy.fine_budget > 0) {
        auto parents = ranked(coarse);
        if (static_cast<int>(parents.size()) > policy.top_m)
            parents.resize(static_cast<std::size_t>(policy.top_m));
        int spent = 0;
        for (const auto& parent : parents) {
            if (spent >= policy.fine_budget) break;
            if (parent.failed) continue;  // no exploration around failures
            int used = 0;
            for (const auto& nb : swap_neighbors(parent.perm)) {
                if (spent >= policy.fine_budget || used >= policy.neighbors_per_candidate) break;
                if (ledger.contains(nb)) continue;
                evaluate_into(evaluator, nb, policy.seed, "fine", ledger, jsonl);
                ++spent;
                ++used;
            }
        }
    }
    return ranked(ledger.entries());
}

std::vector<LedgerEntry> run_enumeration(const SearchSpace& space, std::uint64_t seed,
                                         const Evaluator& evaluator, SearchLedger& ledger,
                                         std::ostream* jsonl) {
    std::vector<int> perm(static_cast<std::size_t>(space.n));
    for (int i = 0; i < space.n; ++i) perm[static_cast<std::size_t>(i)] = i;
    do {
        if (!ledger.contains(perm)) evaluate_into(evaluator, perm, seed, "enum", ledger, jsonl);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return ranked(ledger.entries());
}

}  // namespace mpt
