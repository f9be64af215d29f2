#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "stit/gradcheck.hpp"
#include "stit/params.hpp"
#include "stit/rng.hpp"
#include "stit/tensor.hpp"

using namespace stit;

namespace {

Tensor<double> randd(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor<double>::from_vector(std::move(v), std::move(shape));
}

}  // namespace

TEST_CASE("elementwise forward values") {
    auto x = Tensor<float>::from_vector({0.0f}, {1});
    CHECK(sigmoid(x).item() == doctest::Approx(0.5));
    auto y = Tensor<float>::from_vector({-3.2f, 1.5f}, {2});
    auto r = relu(y);
    CHECK(r.data()[0] == 0.0f);
    CHECK(r.data()[1] == 1.5f);
}

TEST_CASE("sum backward gives ones") {
    auto x = Tensor<float>::from_vector({1.f, 2.f, 3.f}, {3}, true);
    backward(sum_all(x));
    auto g = x.grad();
    CHECK(g == std::vector<float>{1.f, 1.f, 1.f});
}

TEST_CASE("hand-differentiated sum of squares") {
    // loss = sum(x*x), x=[1,2] -> grad=[2,4]
    auto x = Tensor<float>::from_vector({1.f, 2.f}, {2}, true);
    backward(sum_all(mul(x, x)));
    auto g = x.grad();
    CHECK(g[0] == doctest::Approx(2.f));
    CHECK(g[1] == doctest::Approx(4.f));
}

TEST_CASE("sigmoid derivative at zero") {
    auto x = Tensor<float>::from_vector({0.f}, {1}, true);
    backward(sum_all(sigmoid(x)));
    CHECK(x.grad()[0] == doctest::Approx(0.25));
}

TEST_CASE("backward requires a scalar") {
    auto x = Tensor<float>::from_vector({1.f, 2.f}, {2}, true);
    auto y = mul(x, x);
    CHECK_THROWS_AS(backward(y), TensorError);
}

TEST_CASE("gradients accumulate across backward calls") {
    auto x = Tensor<float>::from_vector({3.f}, {1}, true);
    auto loss = sum_all(mul(x, x));
    backward(loss);
    backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(12.f));  // 2 * 2x
    x.zero_grad();
    backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(6.f));
}

TEST_CASE("off-path leaves keep zero gradient") {
    auto x = Tensor<float>::from_vector({1.f}, {1}, true);
    auto y = Tensor<float>::from_vector({5.f}, {1}, true);
    backward(sum_all(mul(x, x)));
    CHECK(y.grad()[0] == 0.f);
}

TEST_CASE("shape mismatch errors name the operator") {
    auto a = Tensor<float>::zeros({2, 3});
    auto b = Tensor<float>::zeros({3, 3});
    CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("add"), TensorError);
    auto w = Tensor<float>::zeros({4, 5});
    CHECK_THROWS_WITH_AS(matmul(a, w), doctest::Contains("matmul"), TensorError);
}

TEST_CASE("dilated conv output length") {
    // T=12, K=2, dilation=1 -> 11
    auto x = Tensor<float>::zeros({12, 1});
    auto w = Tensor<float>::zeros({2, 1, 1});
    auto b = Tensor<float>::zeros({1});
    CHECK(conv1d(x, w, b, 1).dim(0) == 11);
    // receptive field larger than input
    auto w8 = Tensor<float>::zeros({8, 1, 1});
    CHECK_THROWS_WITH_AS(conv1d(x, w8, b, 2), doctest::Contains("receptive field"), TensorError);
}

TEST_CASE("conv1d against a direct sliding-window oracle") {
    Rng rng(7);
    const int Tin = 16, Cin = 3, Cout = 2, K = 4, dil = 2;
    auto x = randd(rng, {Tin, Cin});
    auto w = randd(rng, {K, Cin, Cout});
    auto b = randd(rng, {Cout});
    auto y = conv1d(x, w, b, dil);
    const int Tout = Tin - dil * (K - 1);
    REQUIRE(y.dim(0) == Tout);
    for (int t = 0; t < Tout; ++t)
        for (int o = 0; o < Cout; ++o) {
            double want = b.data()[o];
            for (int k = 0; k < K; ++k)
                for (int c = 0; c < Cin; ++c)
                    want += x.data()[(t + k * dil) * Cin + c] * w.data()[(k * Cin + c) * Cout + o];
            CHECK(y.data()[t * Cout + o] == doctest::Approx(want).epsilon(1e-12));
        }
}

TEST_CASE("matmul against a triple-loop oracle") {
    Rng rng(3);
    auto a = randd(rng, {4, 5});
    auto w = randd(rng, {5, 3});
    auto y = matmul(a, w);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 3; ++j) {
            double want = 0;
            for (int k = 0; k < 5; ++k) want += a.data()[i * 5 + k] * w.data()[k * 3 + j];
            CHECK(y.data()[i * 3 + j] == doctest::Approx(want).epsilon(1e-12));
        }
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(11);
    auto x = randd(rng, {6, 9}, -4.0, 4.0);
    auto y = softmax_last(x);
    for (int r = 0; r < 6; ++r) {
        double s = 0;
        for (int j = 0; j < 9; ++j) s += y.data()[r * 9 + j];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("causal softmax zeroes the future") {
    Rng rng(13);
    auto x = randd(rng, {2, 5, 5}, -2.0, 2.0);
    auto y = softmax_causal(x);
    for (int g = 0; g < 2; ++g)
        for (int i = 0; i < 5; ++i) {
            double s = 0;
            for (int j = 0; j < 5; ++j) {
                double v = y.data()[(g * 5 + i) * 5 + j];
                if (j > i) CHECK(v == 0.0);
                s += v;
            }
            CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
        }
}

TEST_CASE("finite differences across the operator set") {
    Rng rng(21);
    int seeds = 0;
    double worst = 0.0;
    auto run = [&](const std::function<Tensor<double>(Tensor<double>&)>& f, Tensor<double> x) {
        worst = std::max(worst, finite_difference_check<double>(f, x));
        ++seeds;
    };

    for (int s = 0; s < 4; ++s) {
        run([](Tensor<double>& x) { return sum_all(mul(sigmoid(x), x)); }, randd(rng, {3, 4}));
        run([](Tensor<double>& x) { return mean_all(relu(x)); }, randd(rng, {17}, -2.0, 2.0));
        run([&](Tensor<double>& x) {
            auto w = Tensor<double>::from_vector({0.3, -0.7, 0.2, 0.9, -0.1, 0.4}, {3, 2});
            return sum_all(sigmoid(matmul(x, w)));
        },
            randd(rng, {4, 3}));
        run([](Tensor<double>& x) { return mean_all(softmax_last(x)); }, randd(rng, {2, 6}));
        run([](Tensor<double>& x) {
            auto g = Tensor<double>::filled({5}, 1.3);
            auto b = Tensor<double>::filled({5}, 0.2);
            return sum_all(mul(layer_norm(x, g, b), x));
        },
            randd(rng, {3, 5}));
        {
            auto w = randd(rng, {3, 2, 2});
            auto b = randd(rng, {2});
            run([w, b](Tensor<double>& x) { return sum_all(sigmoid(conv1d(x, w, b, 2))); },
                randd(rng, {11, 2}));
        }
        run([](Tensor<double>& x) {
            auto a = slice_rows(x, 1, 2);
            auto b = slice_last(x, 0, 2);
            return add(sum_all(a), sum_all(mul(b, b)));
        },
            randd(rng, {4, 3}));
        run([](Tensor<double>& x) {
            return sum_all(bmm_nt(x, x));  // shared operand
        },
            randd(rng, {2, 3, 4}));
        run([](Tensor<double>& x) { return mean_all(softmax_causal(bmm(x, x))); },
            randd(rng, {2, 3, 3}));
        run([](Tensor<double>& x) {
            auto att = causal_attention(x, x, x, 0.7);  // shared q/k/v operand
            return sum_all(mul(att, att));
        },
            randd(rng, {2, 4, 3}));
        {
            auto k = randd(rng, {2, 4, 3});
            auto v = randd(rng, {2, 4, 3});
            run([k, v](Tensor<double>& q) { return mean_all(causal_attention(q, k, v, 0.5)); },
                randd(rng, {2, 4, 3}));
        }
        run([](Tensor<double>& x) {
            auto t = Tensor<double>::filled({2, 3}, 0.3);
            return abs_error_mean(x, t);
        },
            randd(rng, {2, 3}, 0.5, 2.0));
        run([](Tensor<double>& x) {
            auto labels = Tensor<double>::from_vector({1, 0, 1, 0}, {4});
            return binary_cross_entropy_mean(sigmoid(x), labels);
        },
            randd(rng, {4}, -2.0, 2.0));
        run([](Tensor<double>& x) {
            std::vector<int32_t> targets = {1, 0, 2};
            std::vector<uint8_t> mask = {1, 0, 1};
            return cross_entropy_masked(x, targets, mask);
        },
            randd(rng, {3, 3}));
        run([](Tensor<double>& x) {
            auto m = merge_heads(split_heads(x, 2), 2);
            return sum_all(mul(m, m));
        },
            randd(rng, {2, 3, 4}));
        run([](Tensor<double>& x) { return sum_all(gather_rows(x, {2, 0, 2})); },
            randd(rng, {4, 3}));
        run([](Tensor<double>& x) { return sum_all(mul(mean_rows(x), mean_rows(x))); },
            randd(rng, {5, 3}));
        {
            auto b = randd(rng, {4});
            run([b](Tensor<double>& x) { return sum_all(sigmoid(add_bias(x, b))); },
                randd(rng, {3, 4}));
        }
        run([](Tensor<double>& x) {
            auto parts = concat_last(x, relu(x));
            return mean_all(mul(parts, parts));
        },
            randd(rng, {2, 3}));
    }
    CHECK(seeds >= 20);
    CHECK(worst < 1e-6);
}

TEST_CASE("constant function has zero gradient everywhere") {
    auto f = [](Tensor<double>& x) {
        (void)x;
        return Tensor<double>::scalar(3.5);
    };
    Rng rng(5);
    auto x = randd(rng, {4});
    CHECK(finite_difference_check<double>(f, x) == 0.0);
}

TEST_CASE("embedding substitution routes gradients to the external vector") {
    auto table = Tensor<double>::from_vector({1, 2, 3, 4, 5, 6}, {3, 2}, true);
    auto h = Tensor<double>::from_vector({10, 20}, {2}, true);
    std::vector<int32_t> ids = {0, 1, 2};
    auto y = embed_tokens<double>(ids, 1, 3, table, {{0, 1, h}});
    CHECK(y.data()[2] == 10.0);
    CHECK(y.data()[3] == 20.0);
    backward(sum_all(y));
    auto tg = table.grad();
    CHECK(tg[2] == 0.0);  // substituted row: no table gradient
    CHECK(tg[3] == 0.0);
    CHECK(tg[0] == 1.0);
    CHECK(h.grad() == std::vector<double>{1.0, 1.0});
}

TEST_CASE("non-finite detection") {
    auto x = Tensor<float>::from_vector({1.f, std::nanf("")}, {2});
    CHECK_THROWS_AS(assert_finite(x, "test tensor"), TensorError);
}

TEST_CASE("adaptive-moment first step moves by about lr") {
    // single scalar, grad=1, lr=0.1: bias-corrected first step = lr * 1/(1+eps)
    ParameterSet<float> params;
    auto& p = params.add("w", Tensor<float>::from_vector({2.0f}, {1}));
    p.raw().ensure_grad();
    p.raw().grad[0] = 1.0f;
    OptimizerConfig cfg;
    cfg.learning_rate = 0.1;
    AdamOptimizer<float> opt(cfg);
    opt.step(params);
    CHECK(p.data()[0] == doctest::Approx(1.9).epsilon(1e-4));
    CHECK(p.grad()[0] == 0.0f);  // cleared
}

TEST_CASE("optimizer with zero grads leaves parameters unchanged") {
    ParameterSet<float> params;
    auto& p = params.add("w", Tensor<float>::from_vector({1.5f, -2.f}, {2}));
    params.zero_grads();
    AdamOptimizer<float> opt;
    opt.step(params);
    CHECK(p.data()[0] == 1.5f);
    CHECK(p.data()[1] == -2.f);
}

TEST_CASE("optimizer requires populated grads") {
    ParameterSet<float> params;
    params.add("w", Tensor<float>::from_vector({1.f}, {1}));
    AdamOptimizer<float> opt;
    CHECK_THROWS_WITH_AS(opt.step(params), doctest::Contains("no gradient"), TensorError);
}

TEST_CASE("two identical-gradient steps move monotonically") {
    ParameterSet<float> params;
    auto& p = params.add("w", Tensor<float>::from_vector({0.0f}, {1}));
    AdamOptimizer<float> opt;
    float prev = 0.0f;
    for (int i = 0; i < 2; ++i) {
        p.raw().ensure_grad();
        p.raw().grad[0] = 1.0f;
        opt.step(params);
        CHECK(p.data()[0] < prev);
        prev = p.data()[0];
    }
}

TEST_CASE("graphs release their nodes when the root handle dies") {
    auto x = Tensor<float>::from_vector({0.5f, -0.5f}, {2}, true);
    {
        auto loss = sum_all(sigmoid(x));
        backward(loss);
    }
    // only the local handle may keep the leaf alive; a backward closure
    // capturing its own node would pin the whole graph here
    CHECK(x.node().use_count() == 2);  // x + the temporary from node()
    {
        auto sm = softmax_last(x);
        auto sc = softmax_causal(Tensor<float>::filled({1, 2, 2}, 0.3f, true));
    }
    CHECK(x.node().use_count() == 2);
}

TEST_CASE("forward determinism within a build") {
    Rng rng(99);
    auto x = randd(rng, {8, 8});
    auto w = randd(rng, {8, 8});
    auto r1 = sigmoid(matmul(x, w));
    auto r2 = sigmoid(matmul(x, w));
    CHECK(r1.data() == r2.data());
}
