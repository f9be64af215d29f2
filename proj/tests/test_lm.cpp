#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "stit/gradcheck.hpp"
#include "stit/lm.hpp"
#include "stit/prompt.hpp"
#include "stit/rng.hpp"
#include "stit/tokenizer.hpp"

using namespace stit;

namespace {

struct Fixture {
    Tokenizer tok;
    LMConfig cfg;
    ParameterSet<float> params;
    TinyLM<float> lm;

    Fixture() {
        tok.add_special(kStStart);
        tok.add_special(kStHis);
        tok.add_special(kStEnd);
        tok.add_special(kStPre);
        tok.build({"the quick brown fox jumps over a lazy dog 0 1 2 3 4 [ ] ."});
        cfg.n_layers = 2;
        cfg.n_heads = 4;
        cfg.d_model = 32;
        cfg.context_len = 64;
        lm = TinyLM<float>(cfg);
        lm.bind(params, tok.vocab_size(), 31);
        lm.set_substitution_token(tok.id(kStHis));
        lm.set_eos_token(tok.eos_id());
    }

    std::vector<int32_t> ids(const std::string& text) { return tok.encode(text, true); }
};

}  // namespace

TEST_CASE("hidden states come out at the model width") {
    Fixture fx;
    auto ids = fx.ids("the quick brown fox");
    auto out = fx.lm.forward(ids, 1, int(ids.size()));
    CHECK(out.hidden.shape() == Shape{1, int(ids.size()), 32});
    CHECK(out.logits.shape() == Shape{1, int(ids.size()), fx.tok.vocab_size()});
}

TEST_CASE("causality: changing token j leaves earlier logits bit-identical") {
    Fixture fx;
    auto ids = fx.ids("the quick brown fox jumps over a lazy dog");
    const int S = int(ids.size());
    auto base = fx.lm.forward(ids, 1, S);
    const int j = 5;
    auto changed = ids;
    changed[size_t(j)] = fx.ids("dog")[0];
    auto out = fx.lm.forward(changed, 1, S);
    const int V = fx.tok.vocab_size();
    for (int p = 0; p < j; ++p)
        for (int v = 0; v < V; ++v)
            CHECK(out.logits.data()[size_t(p) * V + v] == base.logits.data()[size_t(p) * V + v]);
    // and the changed position itself must differ somewhere at or after j
    bool differs = false;
    for (size_t i = size_t(j) * V; i < out.logits.numel(); ++i)
        differs = differs || out.logits.data()[i] != base.logits.data()[i];
    CHECK(differs);
}

TEST_CASE("substitution changes nothing before its position") {
    Fixture fx;
    auto ids = fx.ids("the quick brown");
    ids.push_back(fx.tok.id(kStHis));
    ids.push_back(fx.ids("dog")[0]);
    const int S = int(ids.size());
    const int j = 3;  // the <ST_HIS> slot
    auto base = fx.lm.forward(ids, 1, S);
    auto h = Tensor<float>::filled({32}, 0.37f);
    auto subbed = fx.lm.forward(ids, 1, S, {{0, j, h}});
    const int V = fx.tok.vocab_size();
    for (int p = 0; p < j; ++p)
        for (int v = 0; v < V; ++v)
            CHECK(subbed.logits.data()[size_t(p) * V + v] == base.logits.data()[size_t(p) * V + v]);
    bool differs = false;
    for (size_t i = size_t(j) * V; i < subbed.logits.numel(); ++i)
        differs = differs || subbed.logits.data()[i] != base.logits.data()[i];
    CHECK(differs);
}

TEST_CASE("substitution is rejected off the history token") {
    Fixture fx;
    auto ids = fx.ids("the quick brown");
    auto h = Tensor<float>::filled({32}, 0.1f);
    CHECK_THROWS_WITH_AS(fx.lm.forward(ids, 1, int(ids.size()), {{0, 1, h}}),
                         doctest::Contains("substitution"), TensorError);
}

TEST_CASE("vocabulary extension preserves old rows and old logits") {
    Fixture fx;
    auto ids = fx.ids("the quick brown fox");
    auto before = fx.lm.forward(ids, 1, int(ids.size()));
    const int old_vocab = fx.tok.vocab_size();
    auto old_embed = fx.params.get("lm.tok_embed").data();

    fx.tok.add_special("<ST_NEW>");
    fx.lm.extend_vocab_rows(1);
    CHECK(fx.tok.vocab_size() == old_vocab + 1);
    CHECK(fx.tok.id("<ST_NEW>") == old_vocab);  // prior ids untouched
    CHECK(fx.lm.vocab_size() == old_vocab + 1);

    // embedding rows for existing tokens are bitwise stable
    auto& grown = fx.params.get("lm.tok_embed").data();
    for (size_t i = 0; i < old_embed.size(); ++i) CHECK(grown[i] == old_embed[i]);

    // logits over old tokens unchanged; the probability mass renormalizes
    auto after = fx.lm.forward(ids, 1, int(ids.size()));
    const int V = old_vocab;
    for (int p = 0; p < int(ids.size()); ++p)
        for (int v = 0; v < V; ++v)
            CHECK(after.logits.data()[size_t(p) * (V + 1) + v] ==
                  before.logits.data()[size_t(p) * V + v]);
}

TEST_CASE("generation basics") {
    Fixture fx;
    auto ids = fx.ids("the quick");
    CHECK(fx.lm.generate(ids, 0).empty());
    auto a = fx.lm.generate(ids, 8);
    auto b = fx.lm.generate(ids, 8);
    CHECK(a == b);
    CHECK(a.size() <= 8);
}

TEST_CASE("context overflow is reported") {
    Fixture fx;
    std::vector<int32_t> ids(70, fx.ids("the")[0]);
    CHECK_THROWS_WITH_AS(fx.lm.forward(ids, 1, 70), doctest::Contains("context"), TensorError);
}

TEST_CASE("full-model gradients pass finite differences") {
    Tokenizer tok;
    tok.add_special(kStHis);
    tok.build({"a b c d 1 2"});
    LMConfig cfg;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_model = 8;
    cfg.context_len = 16;
    ParameterSet<double> params;
    TinyLM<double> lm(cfg);
    lm.bind(params, tok.vocab_size(), 41);
    lm.set_substitution_token(tok.id(kStHis));

    auto ids = tok.encode("a b c d", true);
    ids.push_back(tok.id(kStHis));
    auto h = Tensor<double>::filled({8}, 0.2, true);
    std::vector<int32_t> targets = {ids[1], ids[2], ids[3], ids[4], ids[0]};
    std::vector<uint8_t> mask = {1, 1, 1, 1, 1};
    auto f = [&]() {
        auto out = lm.forward(ids, 1, int(ids.size()), {{0, 4, h}});
        auto ce = cross_entropy_masked(out.logits, targets, mask);
        // pull the hidden-state tap into the loss as well
        auto tap = gather_rows(out.hidden, {4});
        return add(ce, mean_all(mul(tap, tap)));
    };
    CHECK(finite_difference_check_params<double>(f, params) < 1e-4);
    // and through the substituted vector
    params.zero_grads();
    auto fx = [&](Tensor<double>& hv) {
        auto out = lm.forward(ids, 1, int(ids.size()), {{0, 4, hv}});
        return cross_entropy_masked(out.logits, targets, mask);
    };
    CHECK(finite_difference_check<double>(fx, h) < 1e-4);
}
