#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "stit/gradcheck.hpp"
#include "stit/heads.hpp"
#include "stit/runner.hpp"

using namespace stit;

namespace {

// small but complete experiment: two dense datasets + one sparse
RunConfig tiny_config(uint64_t seed = 11) {
    nlohmann::json j = {
        {"seed", seed},
        {"data",
         {{"h", 6},
          {"p", 4},
          {"train_stride", 24},
          {"n_train_regions", 3},
          {"n_zero_shot_regions", 2},
          {"train_days", 1},
          {"datasets",
           {{{"name", "dense-a"},
             {"task", "regression"},
             {"synth",
              {{"subject", "taxi"}, {"seed", 101}, {"regions", 6}, {"days", 2},
               {"base_rate", 14}, {"daily_amplitude", 8}, {"noise_scale", 0.5}}}},
            {{"name", "sparse-c"},
             {"task", "classification"},
             {"synth",
              {{"subject", "crime"}, {"seed", 103}, {"regions", 6}, {"days", 2},
               {"sparsity", 0.3},
               {"feature_names", {"burglary count", "robbery count"}}}}}}}}},
        {"encoder", {{"d_in", 8}, {"d_out", 8}, {"d_out_prime", 8}, {"d", 12}}},
        {"lm", {{"n_layers", 1}, {"n_heads", 2}, {"d_model", 16}, {"context_len", 512}}},
        {"train", {{"epochs", 1}, {"batch_size", 4}, {"d_prime", 8}}},
        {"eval", {{"stride", 6}, {"limit_windows_per_region", 1}, {"max_new_tokens", 30}}}};
    return parse_run_config(j);
}

}  // namespace

// ------------------------------------------------------------- heads

TEST_CASE("projection is the affine map it claims to be") {
    ParameterSet<double> params;
    AlignProjection<double> align(3, 4);
    align.bind(params, 3);
    auto& bp = params.get("align.bp");
    bp.data() = {0.1, 0.2, 0.3, 0.4};

    auto zero = align.project(Tensor<double>::zeros({2, 3}));
    for (int r = 0; r < 2; ++r)
        for (int j = 0; j < 4; ++j) CHECK(zero.data()[r * 4 + j] == bp.data()[size_t(j)]);

    Rng rng(5);
    std::vector<double> a(6), b(6);
    for (auto& v : a) v = rng.uniform(-1, 1);
    for (auto& v : b) v = rng.uniform(-1, 1);
    const double alpha = 0.3;
    std::vector<double> mix(6);
    for (int i = 0; i < 6; ++i) mix[size_t(i)] = alpha * a[size_t(i)] + (1 - alpha) * b[size_t(i)];
    auto pa = align.project(Tensor<double>::from_vector(a, {2, 3}));
    auto pb = align.project(Tensor<double>::from_vector(b, {2, 3}));
    auto pm = align.project(Tensor<double>::from_vector(mix, {2, 3}));
    for (size_t i = 0; i < pm.numel(); ++i)
        CHECK(pm.data()[i] ==
              doctest::Approx(alpha * pa.data()[i] + (1 - alpha) * pb.data()[i]).epsilon(1e-12));
}

TEST_CASE("identity projection passes the input through") {
    ParameterSet<double> params;
    AlignProjection<double> align(3, 3);
    align.bind(params, 3);
    auto& wp = params.get("align.wp");
    std::fill(wp.data().begin(), wp.data().end(), 0.0);
    for (int i = 0; i < 3; ++i) wp.data()[size_t(i) * 3 + i] = 1.0;
    params.get("align.bp").data() = {0, 0, 0};
    auto x = Tensor<double>::from_vector({1, 2, 3, 4, 5, 6}, {2, 3});
    auto h = align.project(x);
    for (size_t i = 0; i < 6; ++i) CHECK(h.data()[i] == x.data()[i]);
}

TEST_CASE("scalar regression head matches the hand evaluation") {
    // d_L=1, d'=1, P=1, W1=W2=[1], W3=[1,1], H=[2], Gamma=[3] -> 5
    ParameterSet<double> params;
    RegressionHead<double> head(1, 1, 1);
    head.bind(params, 1);
    params.get("reghead.w1").data() = {1.0};
    params.get("reghead.w2").data() = {1.0};
    params.get("reghead.w3").data() = {1.0, 1.0};
    auto y = head.regress(Tensor<double>::from_vector({2.0}, {1, 1}),
                          Tensor<double>::from_vector({3.0}, {1, 1}));
    CHECK(y.item() == doctest::Approx(5.0).epsilon(1e-12));
}

TEST_CASE("zero W1/W2 give zero predictions; the head is bias-free") {
    ParameterSet<float> params;
    RegressionHead<float> head(4, 3, 5);
    head.bind(params, 9);
    std::fill(params.get("reghead.w1").data().begin(), params.get("reghead.w1").data().end(), 0.f);
    std::fill(params.get("reghead.w2").data().begin(), params.get("reghead.w2").data().end(), 0.f);
    Rng rng(2);
    std::vector<float> h(8), g(8);
    for (auto& v : h) v = float(rng.uniform(-3, 3));
    for (auto& v : g) v = float(rng.uniform(-3, 3));
    auto y = head.regress(Tensor<float>::from_vector(h, {2, 4}),
                          Tensor<float>::from_vector(g, {2, 4}));
    for (float v : y.data()) CHECK(v == 0.0f);
}

TEST_CASE("zeroing W2 makes predictions invariant to the token states") {
    ParameterSet<float> params;
    RegressionHead<float> head(4, 3, 2);
    head.bind(params, 9);
    std::fill(params.get("reghead.w2").data().begin(), params.get("reghead.w2").data().end(), 0.f);
    auto h = Tensor<float>::from_vector({1, 2, 3, 4}, {1, 4});
    auto g1 = Tensor<float>::from_vector({9, 9, 9, 9}, {1, 4});
    auto g2 = Tensor<float>::from_vector({-5, 0, 2, 7}, {1, 4});
    auto y1 = head.regress(h, g1);
    auto y2 = head.regress(h, g2);
    CHECK(y1.data() == y2.data());
}

TEST_CASE("classification wrapper behaves like the logistic it is") {
    ParameterSet<float> params;
    RegressionHead<float> head(2, 2, 3);
    head.bind(params, 4);
    auto z = head.classify(Tensor<float>::zeros({1, 3}));
    for (float v : z.data()) CHECK(v == 0.5f);
    auto big = head.classify(Tensor<float>::from_vector({20.f, -20.f, 1.f}, {1, 3}));
    CHECK(big.data()[0] == doctest::Approx(1.0).epsilon(1e-8));
    CHECK(big.data()[1] == doctest::Approx(0.0).epsilon(1e-8));
    CHECK(big.data()[0] > big.data()[2]);  // monotone
}

// ------------------------------------------------------------- training

TEST_CASE("experiment assembles and the joint loss decomposes additively") {
    auto cfg = tiny_config();
    auto data = prepare_data(cfg);
    auto exp = build_experiment(cfg, data);
    REQUIRE(exp.corpora.size() == 2);
    REQUIRE(!exp.corpora[0].empty());

    std::vector<const CorpusEntry*> reg_batch = {&exp.corpora[0][0], &exp.corpora[0][1]};
    auto reg = compute_losses(exp.bundle, reg_batch);
    CHECK(reg.breakdown.l_c == 0.0);
    CHECK(reg.breakdown.l_r > 0.0);
    CHECK(reg.breakdown.total ==
          doctest::Approx(reg.breakdown.l_llm + reg.breakdown.l_r + reg.breakdown.l_c)
              .epsilon(1e-6));

    std::vector<const CorpusEntry*> cls_batch = {&exp.corpora[1][0]};
    auto cls = compute_losses(exp.bundle, cls_batch);
    CHECK(cls.breakdown.l_r == 0.0);  // task-gated by default
    CHECK(cls.breakdown.l_c > 0.0);
}

TEST_CASE("classification l_r can be switched on") {
    auto cfg = tiny_config();
    cfg.classification_includes_l_r = true;
    auto data = prepare_data(cfg);
    auto exp = build_experiment(cfg, data);
    std::vector<const CorpusEntry*> cls_batch = {&exp.corpora[1][0]};
    auto cls = compute_losses(exp.bundle, cls_batch);
    CHECK(cls.breakdown.l_r > 0.0);
    CHECK(cls.breakdown.l_c > 0.0);
}

TEST_CASE("zero learning rate leaves parameters untouched over an epoch") {
    auto cfg = tiny_config();
    cfg.train.learning_rate = 0.0;
    cfg.train.epochs = 1;
    auto data = prepare_data(cfg);
    auto exp = build_experiment(cfg, data);
    std::vector<float> before;
    for (auto& [name, t] : exp.bundle.params.entries())
        before.insert(before.end(), t.data().begin(), t.data().end());
    Trainer<float> trainer(exp.bundle, exp.corpora, cfg.train);
    trainer.train_epoch();
    std::vector<float> after;
    for (auto& [name, t] : exp.bundle.params.entries())
        after.insert(after.end(), t.data().begin(), t.data().end());
    CHECK(before == after);
}

TEST_CASE("fixed seed reproduces identical epoch losses") {
    auto run = [&] {
        auto cfg = tiny_config(77);
        auto data = prepare_data(cfg);
        auto exp = build_experiment(cfg, data);
        Trainer<float> trainer(exp.bundle, exp.corpora, cfg.train);
        return trainer.train_epoch();
    };
    auto a = run();
    auto b = run();
    CHECK(a.total == b.total);
    CHECK(a.l_llm == b.l_llm);
    CHECK(a.l_r == b.l_r);
    CHECK(a.l_c == b.l_c);
}

TEST_CASE("training reduces the loss on the tiny corpus") {
    auto cfg = tiny_config();
    cfg.train.epochs = 4;
    auto data = prepare_data(cfg);
    auto exp = build_experiment(cfg, data);
    Trainer<float> trainer(exp.bundle, exp.corpora, cfg.train);
    auto history = trainer.run();
    REQUIRE(history.size() == 4);
    CHECK(history.back().total < history.front().total);
}

TEST_CASE("checkpoint round-trip restores parameters bitwise") {
    auto cfg = tiny_config();
    auto data = prepare_data(cfg);
    auto exp = build_experiment(cfg, data);
    Trainer<float> trainer(exp.bundle, exp.corpora, cfg.train);
    trainer.train_epoch();
    const std::string path = "unit_ckpt.stit";
    trainer.save(path, {{"note", "unit"}});

    ParameterSet<float> restored;
    AdamOptimizer<float> opt;
    auto extras = load_checkpoint(path, restored, opt);
    CHECK(extras.configs.at("note") == "unit");
    CHECK(opt.step_count() == trainer.optimizer().step_count());
    REQUIRE(restored.size() == exp.bundle.params.size());
    for (auto& [name, t] : exp.bundle.params.entries()) {
        CHECK(restored.get(name).data() == t.data());
        CHECK(restored.get(name).shape() == t.shape());
    }
    // save -> load -> save is byte-identical
    ParameterSet<float> again;
    AdamOptimizer<float> opt2;
    load_checkpoint(path, again, opt2);
    CheckpointExtras ex2;
    ex2.configs = extras.configs;
    ex2.tokenizer = extras.tokenizer;
    ex2.rng_state = extras.rng_state;
    ex2.step_counter = extras.step_counter;
    save_checkpoint(path + ".2", again, opt2, ex2);
    std::ifstream f1(path, std::ios::binary), f2(path + ".2", std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    std::remove(path.c_str());
    std::remove((path + ".2").c_str());
}

TEST_CASE("resuming from a checkpoint equals uninterrupted training bitwise") {
    const std::string path = "unit_resume.stit";
    auto final_params = [&](bool interrupted) {
        auto cfg = tiny_config(5);
        auto data = prepare_data(cfg);
        auto exp = build_experiment(cfg, data);
        Trainer<float> trainer(exp.bundle, exp.corpora, cfg.train);
        if (!interrupted) {
            for (int e = 0; e < 4; ++e) trainer.train_epoch(e);
        } else {
            trainer.train_epoch(0);
            trainer.train_epoch(1);
            trainer.save(path);
            // fresh process state: rebuild everything, then restore
            auto cfg2 = tiny_config(5);
            auto data2 = prepare_data(cfg2);
            auto exp2 = build_experiment(cfg2, data2);
            Trainer<float> trainer2(exp2.bundle, exp2.corpora, cfg2.train);
            auto extras = load_checkpoint(path, exp2.bundle.params, trainer2.optimizer());
            exp2.bundle.bind(cfg2.seed);  // rebind handles onto restored tensors
            trainer2.restore_rng(extras.rng_state);
            trainer2.set_steps_done(extras.step_counter);
            trainer2.train_epoch(2);
            trainer2.train_epoch(3);
            std::vector<float> out;
            for (auto& [name, t] : exp2.bundle.params.entries())
                out.insert(out.end(), t.data().begin(), t.data().end());
            return out;
        }
        std::vector<float> out;
        for (auto& [name, t] : exp.bundle.params.entries())
            out.insert(out.end(), t.data().begin(), t.data().end());
        return out;
    };
    auto straight = final_params(false);
    auto resumed = final_params(true);
    CHECK(straight == resumed);
    std::remove(path.c_str());
}

TEST_CASE("corrupted checkpoints fail loudly and distinctly") {
    auto cfg = tiny_config();
    auto data = prepare_data(cfg);
    auto exp = build_experiment(cfg, data);
    Trainer<float> trainer(exp.bundle, exp.corpora, cfg.train);
    const std::string path = "unit_corrupt.stit";
    trainer.save(path);

    auto read_all = [&] {
        std::ifstream f(path, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    };
    auto bytes = read_all();

    {  // flip one payload byte -> checksum error
        auto bad = bytes;
        bad[bad.size() - 100] = char(bad[bad.size() - 100] ^ 0x40);
        std::ofstream(path + ".bad", std::ios::binary) << bad;
        ParameterSet<float> p;
        AdamOptimizer<float> o;
        CHECK_THROWS_WITH_AS(load_checkpoint(path + ".bad", p, o), doctest::Contains("checksum"),
                             CheckpointError);
    }
    {  // truncate -> truncation error
        std::ofstream(path + ".bad", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
        ParameterSet<float> p;
        AdamOptimizer<float> o;
        CHECK_THROWS_AS(load_checkpoint(path + ".bad", p, o), CheckpointError);
    }
    {  // version bump -> version error
        auto bad = bytes;
        bad[4] = 9;
        std::ofstream(path + ".bad", std::ios::binary) << bad;
        ParameterSet<float> p;
        AdamOptimizer<float> o;
        CHECK_THROWS_WITH_AS(load_checkpoint(path + ".bad", p, o), doctest::Contains("version"),
                             CheckpointError);
    }
    std::remove(path.c_str());
    std::remove((path + ".bad").c_str());
}

TEST_CASE("strict config parsing rejects unknown keys") {
    nlohmann::json j = {{"seed", 1}, {"data", {{"h", 12}, {"mystery", 3}}}};
    CHECK_THROWS_WITH_AS(parse_run_config(j), doctest::Contains("mystery"), ConfigError);
    nlohmann::json j2 = {{"sneed", 1}};
    CHECK_THROWS_AS(parse_run_config(j2), ConfigError);
}

TEST_CASE("seed is mandatory for building experiments") {
    auto cfg = tiny_config();
    cfg.seed_set = false;
    auto data = prepare_data(cfg);
    CHECK_THROWS_AS(build_experiment(cfg, data), ConfigError);
}
