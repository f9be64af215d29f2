#pragma once

// Alignment projection (encoder width d -> LM width d_L) and the
// bias-free regression layer over forecasting-token hidden states:
// Y = W3 [relu(W1 H), relu(W2 Gamma)], with a sigmoid wrapper for
// classification tasks.

#include <string>

#include "stit/params.hpp"
#include "stit/tensor.hpp"

namespace stit {

template <class T>
class AlignProjection {
public:
    AlignProjection() = default;
    AlignProjection(int d, int d_lm) : d_(d), d_lm_(d_lm) {}

    void bind(ParameterSet<T>& params, uint64_t seed) {
        if (params.contains("align.wp")) {
            wp_ = params.get("align.wp");
            bp_ = params.get("align.bp");
        } else {
            wp_ = params.add("align.wp", init_uniform_fanin<T>("align.wp", {d_, d_lm_}, d_, seed));
            bp_ = params.add("align.bp", Tensor<T>::zeros({d_lm_}));
        }
    }

    // [.., d] -> [.., d_L]
    Tensor<T> project(const Tensor<T>& psi) const { return add_bias(matmul(psi, wp_), bp_); }

private:
    int d_ = 64, d_lm_ = 128;
    Tensor<T> wp_, bp_;
};

template <class T>
class RegressionHead {
public:
    RegressionHead() = default;
    RegressionHead(int d_lm, int hidden, int horizon) : d_lm_(d_lm), hidden_(hidden), horizon_(horizon) {}

    int horizon() const { return horizon_; }

    void bind(ParameterSet<T>& params, uint64_t seed) {
        auto want = [&](const std::string& name, Shape shape, int fan_in) {
            if (params.contains(name)) return params.get(name);
            return params.add(name, init_uniform_fanin<T>(name, shape, fan_in, seed));
        };
        w1_ = want("reghead.w1", {hidden_, d_lm_}, d_lm_);
        w2_ = want("reghead.w2", {hidden_, d_lm_}, d_lm_);
        w3_ = want("reghead.w3", {horizon_, 2 * hidden_}, 2 * hidden_);
    }

    // h, gamma: [n, d_L] -> predictions [n, P]
    Tensor<T> regress(const Tensor<T>& h, const Tensor<T>& gamma) const {
        auto a = relu(matmul_nt(h, w1_));
        auto b = relu(matmul_nt(gamma, w2_));
        return matmul_nt(concat_last(a, b), w3_);
    }

    // probabilities in (0,1); decision threshold 0.5 at metric time
    Tensor<T> classify(const Tensor<T>& y) const { return sigmoid(y); }

private:
    int d_lm_ = 128, hidden_ = 128, horizon_ = 12;
    Tensor<T> w1_, w2_, w3_;
};

}  // namespace stit
