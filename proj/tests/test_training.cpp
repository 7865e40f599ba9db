#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "mpt/errors.hpp"
#include "mpt/training.hpp"

using namespace mpt;

namespace {

MptConfig toy_config() {
    MptConfig cfg;
    cfg.d_model = 8;
    cfg.heads = 2;
    cfg.d_ff = 16;
    cfg.layers = 2;
    cfg.passes = 2;
    cfg.vocab = 8;
    cfg.max_len = 12;
    cfg.decoder_layers = 1;
    cfg.dropout = 0.0;
    cfg.connection = ConnectionSpec::hard({0, 1});
    return cfg;
}

Batch fixed_batch() {
    Batch b;
    b.src = {{3, 4, 5}, {5, 3, 4}};
    b.tgt = {{3, 4, 5}, {5, 3, 4}};
    return b;
}

TrainConfig fast_train() {
    TrainConfig t;
    t.warmup_steps = 10;
    t.max_steps = 5;
    t.checkpoint_every = 2;
    t.tokens_per_batch = 8;
    return t;
}

}  // namespace

TEST_CASE("learning rate schedule fixed points") {
    TrainConfig cfg;
    cfg.base_lr = 0.0008;
    cfg.warmup_steps = 200;
    CHECK(lr_schedule(200, cfg) == doctest::Approx(0.0008).epsilon(1e-15));
    CHECK(lr_schedule(100, cfg) == doctest::Approx(0.0004).epsilon(1e-15));
    CHECK(lr_schedule(800, cfg) == doctest::Approx(0.0004).epsilon(1e-15));
    CHECK(lr_schedule(1, cfg) == doctest::Approx(0.0008 / 200).epsilon(1e-15));
    CHECK_THROWS_AS(lr_schedule(0, cfg), ContractError);
}

TEST_CASE("train config validation") {
    TrainConfig t;
    CHECK_NOTHROW(t.validate());
    t.label_smoothing = 1.0;
    CHECK_THROWS_AS(t.validate(), ConfigError);
    t = TrainConfig{};
    t.grad_accum = 0;
    CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("adam leaves parameters alone on zero gradients") {
    Seq2Seq model(toy_config(), 3);
    auto params = model.params().named();
    std::vector<std::vector<double>> before;
    for (auto& [n, p] : params) {
        p.node()->ensure_grad();
        before.push_back(p.data());
    }
    TrainConfig cfg;
    Adam opt(cfg);
    opt.step(params, 0.001);
    for (std::size_t i = 0; i < params.size(); ++i) CHECK(params[i].second.data() == before[i]);
}

TEST_CASE("one optimizer step is deterministic") {
    auto run = [] {
        Seq2Seq model(toy_config(), 17);
        TrainConfig cfg;
        Adam opt(cfg);
        Rng rng(5);
        train_step(model, fixed_batch(), opt, cfg, 1, rng);
        return model.params().embedding.table.data();
    };
    CHECK(run() == run());
}

TEST_CASE("fifty steps memorize a fixed batch") {
    Seq2Seq model(toy_config(), 29);
    TrainConfig cfg;
    cfg.warmup_steps = 20;
    Adam opt(cfg);
    Rng rng(7);
    std::vector<double> losses;
    for (long step = 1; step <= 50; ++step) {
        auto res = train_step(model, fixed_batch(), opt, cfg, step, rng);
        REQUIRE(res.loss_final.has_value());
        losses.push_back(*res.loss_final);
    }
    auto avg = [&](std::size_t from) {
        double s = 0;
        for (std::size_t i = from; i < from + 10; ++i) s += losses[i];
        return s / 10;
    };
    CHECK(avg(40) < avg(0));
}

TEST_CASE("loss modes report the expected components") {
    MptConfig mc = toy_config();
    TrainConfig tc;

    mc.loss_mode = LossMode::FinalPass;
    Seq2Seq fin(mc, 11);
    {
        Adam opt(tc);
        Rng rng(1);
        auto res = train_step(fin, fixed_batch(), opt, tc, 1, rng);
        CHECK_FALSE(res.loss_first.has_value());
        CHECK(res.loss_final.has_value());
    }

    mc.loss_mode = LossMode::SumAllPasses;
    Seq2Seq sum(mc, 11);  // identical initialization
    {
        Adam opt(tc);
        Rng rng(1);
        auto res = train_step(sum, fixed_batch(), opt, tc, 1, rng);
        REQUIRE(res.loss_first.has_value());
        REQUIRE(res.loss_final.has_value());
        // same parameters, dropout off: the shared component must agree
        Rng probe(1);
        Adam opt2(tc);
        mc.loss_mode = LossMode::FinalPass;
        Seq2Seq fin2(mc, 11);
        auto fref = train_step(fin2, fixed_batch(), opt2, tc, 1, probe);
        CHECK(*res.loss_final == doctest::Approx(*fref.loss_final).epsilon(1e-12));
    }

    mc.loss_mode = LossMode::RandomPass;
    Seq2Seq rnd(mc, 11);
    {
        Adam opt(tc);
        Rng rng(123);
        bool saw_first = false, saw_final = false;
        for (long s = 1; s <= 12; ++s) {
            auto res = train_step(rnd, fixed_batch(), opt, tc, s, rng);
            CHECK(res.loss_first.has_value() != res.loss_final.has_value());
            saw_first |= res.loss_first.has_value();
            saw_final |= res.loss_final.has_value();
        }
        CHECK(saw_first);
        CHECK(saw_final);
    }
}

TEST_CASE("divergence raises with the offending step") {
    Seq2Seq model(toy_config(), 2);
    for (auto& d : model.params().embedding.table.node()->data)
        d = std::numeric_limits<double>::quiet_NaN();
    TrainConfig cfg;
    Adam opt(cfg);
    Rng rng(0);
    try {
        train_step(model, fixed_batch(), opt, cfg, 7, rng);
        FAIL("expected DivergedRunError");
    } catch (const DivergedRunError& e) {
        CHECK(e.step == 7);
    }
}

TEST_CASE("train_run writes a reproducible loss csv and checkpoints") {
    auto run = [] {
        Seq2Seq model(toy_config(), 41);
        std::ostringstream csv;
        auto result = train_run(model, fast_train(), [](Rng&) { return fixed_batch(); }, &csv);
        return std::make_pair(csv.str(), result);
    };
    auto [csv1, res1] = run();
    auto [csv2, res2] = run();
    CHECK(csv1 == csv2);  // byte identical
    CHECK(csv1.rfind("step,lr,loss_first,loss_final\n", 0) == 0);
    CHECK(res1.trace.size() == 5);

    // checkpoint_every=2, max_steps=5: checkpoints at 2, 4, and the end
    REQUIRE(res1.checkpoints.size() == 3);
    CHECK(res1.checkpoints[0].step == 2);
    CHECK(res1.checkpoints[1].step == 4);
    CHECK(res1.checkpoints[2].step == 5);

    // zero-step run still snapshots the initialization
    Seq2Seq fresh(toy_config(), 41);
    TrainConfig zero = fast_train();
    zero.max_steps = 0;
    auto init_only = train_run(fresh, zero, [](Rng&) { return fixed_batch(); });
    REQUIRE(init_only.checkpoints.size() == 1);
    CHECK(init_only.checkpoints[0].step == 0);
}

TEST_CASE("gradient accumulation matches a doubled batch") {
    auto cfg = toy_config();
    Batch half1, half2;
    half1.src = {{3, 4, 5}};
    half1.tgt = {{3, 4, 5}};
    half2.src = {{5, 3, 4}};
    half2.tgt = {{5, 3, 4}};

    TrainConfig whole_cfg = fast_train();
    whole_cfg.max_steps = 1;
    Seq2Seq whole(cfg, 13);
    train_run(whole, whole_cfg, [](Rng&) { return fixed_batch(); });

    TrainConfig accum_cfg = whole_cfg;
    accum_cfg.grad_accum = 2;
    Seq2Seq split(cfg, 13);
    int calls = 0;
    train_run(split, accum_cfg, [&](Rng&) { return ++calls == 1 ? half1 : half2; });
    CHECK(calls == 2);

    const auto& a = whole.params().embedding.table.data();
    const auto& b = split.params().embedding.table.data();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-9));
}

TEST_CASE("checkpoint round trip through disk") {
    Seq2Seq model(toy_config(), 3);
    auto params = model.params().named();
    Checkpoint c = Checkpoint::from_params(params, 42, "{\"note\":1}");
    const char* path = "test_ckpt_roundtrip.bin";
    c.save(path);
    Checkpoint loaded = Checkpoint::load(path);
    std::remove(path);
    CHECK(loaded.step == 42);
    CHECK(loaded.config_json == "{\"note\":1}");
    CHECK(loaded.names == c.names);
    CHECK(loaded.shapes == c.shapes);
    CHECK(loaded.values == c.values);  // bit exact

    Seq2Seq other(toy_config(), 99);
    auto other_params = other.params().named();
    loaded.apply_to(other_params);
    CHECK(other.params().embedding.table.data() == model.params().embedding.table.data());

    CHECK_THROWS_AS(Checkpoint::load("no_such_file.bin"), IoError);
}

TEST_CASE("checkpoint averaging") {
    Seq2Seq model(toy_config(), 5);
    auto params = model.params().named();
    Checkpoint one = Checkpoint::from_params(params, 10);
    CHECK(average_checkpoints({one}).values == one.values);

    Checkpoint pos = one, neg = one;
    for (auto& v : neg.values)
        for (auto& d : v) d = -d;
    neg.step = 20;
    Checkpoint zero = average_checkpoints({pos, neg});
    CHECK(zero.step == 20);
    for (const auto& v : zero.values)
        for (double d : v) CHECK(d == doctest::Approx(0.0));

    // five random checkpoints vs a per-scalar mean computed by hand
    std::vector<Checkpoint> five;
    Rng rng(8);
    for (int k = 0; k < 5; ++k) {
        Checkpoint c = one;
        c.step = k;
        for (auto& v : c.values)
            for (auto& d : v) d = rng.uniform(-1.0, 1.0);
        five.push_back(std::move(c));
    }
    Checkpoint mean = average_checkpoints(five);
    for (std::size_t i = 0; i < mean.values.size(); ++i)
        for (std::size_t j = 0; j < mean.values[i].size(); ++j) {
            double s = 0;
            for (const auto& c : five) s += c.values[i][j];
            CHECK(mean.values[i][j] == doctest::Approx(s / 5).epsilon(1e-15));
        }

    Checkpoint renamed = one;
    renamed.names[0] = "imposter";
    CHECK_THROWS_AS(average_checkpoints({one, renamed}), CheckpointError);
    CHECK_THROWS_AS(average_checkpoints({}), CheckpointError);
}
