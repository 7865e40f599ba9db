#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>
#include <sstream>

#include "mpt/errors.hpp"
#include "mpt/model_config.hpp"
#include "mpt/search.hpp"

using namespace mpt;

namespace {

// Surrogate with a planted optimum: score counts positions matching target.
Evaluator planted(const std::vector<int>& target) {
    return [target](const std::vector<int>& perm, std::uint64_t) {
        double s = 0;
        for (std::size_t i = 0; i < perm.size(); ++i)
            if (perm[i] == target[i]) s += 1.0;
        return s;
    };
}

}  // namespace

TEST_CASE("factorial") {
    CHECK(factorial(0) == 1);
    CHECK(factorial(1) == 1);
    CHECK(factorial(4) == 24);
    CHECK(factorial(6) == 720);
}

TEST_CASE("sampling without replacement covers the space") {
    SearchLedger ledger;
    Rng rng(3);
    std::set<std::vector<int>> seen;
    for (int i = 0; i < 6; ++i) {
        auto perm = sample_permutation(rng, 3, ledger);
        REQUIRE(perm.has_value());
        CHECK(seen.insert(*perm).second);
        LedgerEntry e;
        e.perm = *perm;
        e.phase = "coarse";
        ledger.append(e);
    }
    CHECK(seen.size() == 6);
    CHECK_FALSE(sample_permutation(rng, 3, ledger).has_value());

    SearchLedger empty;
    Rng r2(0);
    CHECK(sample_permutation(r2, 1, empty) == std::vector<int>{0});
}

TEST_CASE("swap neighborhood enumeration") {
    auto nb3 = swap_neighbors({0, 1, 2});
    REQUIRE(nb3.size() == 3);
    CHECK(nb3[0] == std::vector<int>{0, 2, 1});
    CHECK(nb3[1] == std::vector<int>{1, 0, 2});
    CHECK(nb3[2] == std::vector<int>{2, 1, 0});

    CHECK(swap_neighbors({0, 4, 1, 5, 2, 3}).size() == 15);  // C(6,2)

    // symmetry: one swap away in both directions
    for (const auto& nb : swap_neighbors({2, 0, 1})) {
        auto back = swap_neighbors(nb);
        CHECK(std::find(back.begin(), back.end(), std::vector<int>{2, 0, 1}) != back.end());
    }

    CHECK_THROWS_AS(swap_neighbors({0, 0, 2}), ContractError);
}

TEST_CASE("ledger rejects duplicates and non-bijections") {
    SearchLedger ledger;
    LedgerEntry e;
    e.perm = {1, 0};
    e.phase = "coarse";
    ledger.append(e);
    CHECK_THROWS_AS(ledger.append(e), ContractError);
    LedgerEntry bad;
    bad.perm = {0, 0};
    CHECK_THROWS_AS(ledger.append(bad), ContractError);
}

TEST_CASE("ledger jsonl round trip and resume") {
    SearchLedger ledger;
    std::ostringstream jsonl;
    LedgerEntry ok;
    ok.perm = {2, 0, 1};
    ok.seed = 9;
    ok.score = 1.25;
    ok.phase = "coarse";
    ok.wall_time = 0.5;
    ledger.append(ok, &jsonl);
    LedgerEntry bad;
    bad.perm = {0, 1, 2};
    bad.seed = 9;
    bad.failed = true;
    bad.score = -std::numeric_limits<double>::infinity();
    bad.phase = "fine";
    ledger.append(bad, &jsonl);

    CHECK(ledger_entry_to_json(ok).find("\"perm\":\"[2,0,1]\"") != std::string::npos);
    CHECK(ledger_entry_to_json(bad).find("\"score\":null") != std::string::npos);

    std::istringstream is(jsonl.str());
    SearchLedger restored = SearchLedger::load_jsonl(is);
    REQUIRE(restored.size() == 2);
    CHECK(restored.contains({2, 0, 1}));
    CHECK(restored.contains({0, 1, 2}));
    CHECK(restored.entries()[0].score == doctest::Approx(1.25));
    CHECK(restored.entries()[1].failed);

    // resuming skips what the restored ledger already holds
    SearchSpace space{3};
    auto results = run_enumeration(space, 0, planted({2, 0, 1}), restored);
    CHECK(restored.size() == 6);
    CHECK(results.front().perm == std::vector<int>{2, 0, 1});
}

TEST_CASE("search consumes its budgets exactly") {
    SearchSpace space{4};
    SearchPolicy policy;
    policy.coarse_budget = 5;
    policy.fine_budget = 0;
    policy.seed = 1;
    SearchLedger ledger;
    run_search(space, policy, planted({0, 1, 2, 3}), ledger);
    CHECK(ledger.size() == 5);
    for (const auto& e : ledger.entries()) CHECK(e.phase == "coarse");

    SearchPolicy more = policy;
    more.fine_budget = 6;
    more.top_m = 2;
    SearchLedger ledger2;
    auto results = run_search(space, more, planted({0, 1, 2, 3}), ledger2);
    CHECK(ledger2.size() == 11);
    int fine = 0;
    for (const auto& e : ledger2.entries()) fine += e.phase == "fine";
    CHECK(fine == 6);
    CHECK(results.size() == ledger2.size());
}

TEST_CASE("fine candidates neighbor a top coarse parent") {
    SearchSpace space{5};
    SearchPolicy policy;
    policy.coarse_budget = 8;
    policy.fine_budget = 10;
    policy.top_m = 2;
    policy.seed = 4;
    SearchLedger ledger;
    run_search(space, policy, planted({4, 3, 2, 1, 0}), ledger);

    std::vector<LedgerEntry> coarse;
    for (const auto& e : ledger.entries())
        if (e.phase == "coarse") coarse.push_back(e);
    auto parents = ranked(coarse);
    parents.resize(2);

    for (const auto& e : ledger.entries()) {
        if (e.phase != "fine") continue;
        bool adjacent = false;
        for (const auto& p : parents) {
            auto nbs = swap_neighbors(p.perm);
            adjacent |= std::find(nbs.begin(), nbs.end(), e.perm) != nbs.end();
        }
        CHECK(adjacent);
    }
}

TEST_CASE("failed evaluations consume budget without exploration") {
    SearchSpace space{3};
    SearchPolicy policy;
    policy.coarse_budget = 3;
    policy.fine_budget = 3;
    policy.top_m = 3;
    policy.seed = 2;
    SearchLedger ledger;
    Evaluator always_throws = [](const std::vector<int>&, std::uint64_t) -> double {
        throw std::runtime_error("boom");
    };
    auto results = run_search(space, policy, always_throws, ledger);
    CHECK(ledger.size() == 3);  // only coarse; failed parents spawn no fine work
    for (const auto& e : results) {
        CHECK(e.failed);
        CHECK(e.score == -std::numeric_limits<double>::infinity());
    }
}

TEST_CASE("ranking is score-descending with lexicographic ties") {
    std::vector<LedgerEntry> entries(3);
    entries[0].perm = {1, 0, 2};
    entries[0].score = 1.0;
    entries[1].perm = {0, 1, 2};
    entries[1].score = 1.0;
    entries[2].perm = {2, 1, 0};
    entries[2].score = 3.0;
    auto r = ranked(entries);
    CHECK(r[0].perm == std::vector<int>{2, 1, 0});
    CHECK(r[1].perm == std::vector<int>{0, 1, 2});
    CHECK(r[2].perm == std::vector<int>{1, 0, 2});
}

TEST_CASE("enumeration visits every permutation once") {
    SearchSpace space{4};
    SearchLedger ledger;
    int calls = 0;
    auto results = run_enumeration(
        space, 0,
        [&](const std::vector<int>& perm, std::uint64_t) {
            ++calls;
            return planted({1, 3, 0, 2})(perm, 0);
        },
        ledger);
    CHECK(calls == 24);
    CHECK(ledger.size() == 24);
    CHECK(results.front().perm == std::vector<int>{1, 3, 0, 2});
    CHECK(results.front().score == doctest::Approx(4.0));
}

TEST_CASE("planted target is recovered across seeds") {
    const std::vector<int> target{3, 0, 4, 1, 2};
    int hits = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        SearchSpace space{5};
        SearchPolicy policy;
        policy.coarse_budget = 20;
        policy.fine_budget = 20;
        policy.seed = seed;
        SearchLedger ledger;
        auto results = run_search(space, policy, planted(target), ledger);
        hits += results.front().perm == target;
    }
    CHECK(hits >= 8);
}

TEST_CASE("search is deterministic for a fixed seed") {
    auto run = [] {
        SearchSpace space{5};
        SearchPolicy policy;
        policy.coarse_budget = 10;
        policy.fine_budget = 10;
        policy.seed = 6;
        SearchLedger ledger;
        run_search(space, policy, planted({0, 1, 2, 3, 4}), ledger);
        std::vector<std::vector<int>> order;
        for (const auto& e : ledger.entries()) order.push_back(e.perm);
        return order;
    };
    CHECK(run() == run());
}
