#pragma once

// Small decoder-only transformer: learned absolute positions, pre-norm
// blocks, ReLU MLP, causal attention, untied output matrix. External
// embedding substitution happens before the first block; final-layer
// hidden states are returned alongside logits.

#include <string>
#include <vector>

#include "stit/params.hpp"
#include "stit/tensor.hpp"

namespace stit {

struct LMConfig {
    int n_layers = 2;
    int n_heads = 4;
    int d_model = 128;  // d_L
    int context_len = 1024;
    double ln_eps = 1e-5;

    void validate() const {
        if (n_layers < 1 || n_heads < 1 || d_model < 1 || context_len < 1)
            throw TensorError("lm config: extents must be positive");
        if (d_model % n_heads != 0)
            throw TensorError("lm config: d_model " + std::to_string(d_model) +
                              " not divisible by " + std::to_string(n_heads) + " heads");
    }
};

template <class T>
struct LMForwardResult {
    Tensor<T> logits;  // [B, S, V]
    Tensor<T> hidden;  // [B, S, d_model] (after the final layer norm)
};

template <class T>
class TinyLM {
public:
    TinyLM() = default;
    explicit TinyLM(LMConfig cfg) : cfg_(cfg) { cfg_.validate(); }

    const LMConfig& config() const { return cfg_; }
    int vocab_size() const { return tok_embed_.dim(0); }

    // token id whose embedding rows may be overridden by the alignment
    void set_substitution_token(int32_t id) { st_his_id_ = id; }
    void set_eos_token(int32_t id) { eos_id_ = id; }

    void bind(ParameterSet<T>& params, int vocab_size, uint64_t seed) {
        auto want = [&](const std::string& name, Shape shape, int fan_in) {
            if (params.contains(name)) {
                auto& t = params.get(name);
                if (t.shape() != shape)
                    throw TensorError("parameter '" + name + "' has shape " +
                                      shape_str(t.shape()) + ", expected " + shape_str(shape));
                return t;
            }
            return params.add(name, init_uniform_fanin<T>(name, shape, fan_in, seed));
        };
        auto want_const = [&](const std::string& name, Shape shape, T fill) {
            if (params.contains(name)) return params.get(name);
            return params.add(name, Tensor<T>::filled(shape, fill));
        };
        const int D = cfg_.d_model;
        // vocabulary rows may have grown past the initial size via extension
        if (params.contains("lm.tok_embed")) {
            tok_embed_ = params.get("lm.tok_embed");
            out_w_ = params.get("lm.out_w");
            if (tok_embed_.dim(1) != D || tok_embed_.dim(0) < vocab_size)
                throw TensorError("lm.tok_embed shape " + shape_str(tok_embed_.shape()) +
                                  " incompatible with vocab " + std::to_string(vocab_size));
        } else {
            tok_embed_ = params.add("lm.tok_embed",
                                    init_uniform_fanin<T>("lm.tok_embed", {vocab_size, D}, D, seed));
            out_w_ = params.add("lm.out_w",
                                init_uniform_fanin<T>("lm.out_w", {vocab_size, D}, D, seed));
        }
        pos_embed_ = want("lm.pos_embed", {cfg_.context_len, D}, D);
        ln1g_.clear(); ln1b_.clear(); wq_.clear(); bq_.clear(); wk_.clear(); bk_.clear();
        wv_.clear(); bv_.clear(); wo_.clear(); bo_.clear(); ln2g_.clear(); ln2b_.clear();
        mw1_.clear(); mb1_.clear(); mw2_.clear(); mb2_.clear();
        for (int l = 0; l < cfg_.n_layers; ++l) {
            const std::string base = "lm.block" + std::to_string(l);
            ln1g_.push_back(want_const(base + ".ln1.g", {D}, T(1)));
            ln1b_.push_back(want_const(base + ".ln1.b", {D}, T(0)));
            wq_.push_back(want(base + ".attn.wq", {D, D}, D));
            bq_.push_back(want_const(base + ".attn.bq", {D}, T(0)));
            wk_.push_back(want(base + ".attn.wk", {D, D}, D));
            bk_.push_back(want_const(base + ".attn.bk", {D}, T(0)));
            wv_.push_back(want(base + ".attn.wv", {D, D}, D));
            bv_.push_back(want_const(base + ".attn.bv", {D}, T(0)));
            wo_.push_back(want(base + ".attn.wo", {D, D}, D));
            bo_.push_back(want_const(base + ".attn.bo", {D}, T(0)));
            ln2g_.push_back(want_const(base + ".ln2.g", {D}, T(1)));
            ln2b_.push_back(want_const(base + ".ln2.b", {D}, T(0)));
            mw1_.push_back(want(base + ".mlp.w1", {D, 4 * D}, D));
            mb1_.push_back(want_const(base + ".mlp.b1", {4 * D}, T(0)));
            mw2_.push_back(want(base + ".mlp.w2", {4 * D, D}, 4 * D));
            mb2_.push_back(want_const(base + ".mlp.b2", {D}, T(0)));
        }
        lnfg_ = want_const("lm.lnf.g", {D}, T(1));
        lnfb_ = want_const("lm.lnf.b", {D}, T(0));
    }

    // appends rows for newly registered special tokens; existing rows and
    // ids are untouched, new rows start at the mean of the existing ones
    void extend_vocab_rows(int n_new) {
        if (n_new < 1) throw TensorError("extend_vocab: nothing to add");
        for (Tensor<T>* m : {&tok_embed_, &out_w_}) {
            auto& node = m->raw();
            const int V = node.shape[0], D = node.shape[1];
            std::vector<T> mean(size_t(D), T(0));
            for (int v = 0; v < V; ++v)
                for (int j = 0; j < D; ++j) mean[size_t(j)] += node.value[size_t(v) * D + j];
            for (auto& x : mean) x /= T(V);
            for (int k = 0; k < n_new; ++k)
                node.value.insert(node.value.end(), mean.begin(), mean.end());
            node.shape[0] = V + n_new;
            if (!node.grad.empty()) node.grad.assign(node.value.size(), T(0));
        }
    }

    // ids flat [B*S]; substitution rows must sit on the designated token
    LMForwardResult<T> forward(const std::vector<int32_t>& ids, int B, int S,
                               const std::vector<Substitution<T>>& subs = {}) const {
        if (S > cfg_.context_len)
            throw TensorError("lm forward: sequence length " + std::to_string(S) +
                              " exceeds context " + std::to_string(cfg_.context_len));
        for (const auto& sub : subs)
            if (ids[size_t(sub.batch) * S + sub.pos] != st_his_id_)
                throw TensorError("lm forward: substitution at position " +
                                  std::to_string(sub.pos) +
                                  " does not hold the spatio-temporal history token");
        const int D = cfg_.d_model, Hh = cfg_.n_heads, hd = D / cfg_.n_heads;
        const T inv_sqrt_hd = T(1.0 / std::sqrt(double(hd)));
        auto x = add_position(embed_tokens(ids, B, S, tok_embed_, subs), pos_embed_);
        for (int l = 0; l < cfg_.n_layers; ++l) {
            const size_t li = size_t(l);
            auto h = layer_norm(x, ln1g_[li], ln1b_[li], T(cfg_.ln_eps));
            auto q = split_heads(add_bias(matmul(h, wq_[li]), bq_[li]), Hh);
            auto k = split_heads(add_bias(matmul(h, wk_[li]), bk_[li]), Hh);
            auto v = split_heads(add_bias(matmul(h, wv_[li]), bv_[li]), Hh);
            auto ctx = merge_heads(causal_attention(q, k, v, inv_sqrt_hd), Hh);
            x = add(x, add_bias(matmul(ctx, wo_[li]), bo_[li]));
            auto h2 = layer_norm(x, ln2g_[li], ln2b_[li], T(cfg_.ln_eps));
            auto m = relu(add_bias(matmul(h2, mw1_[li]), mb1_[li]));
            x = add(x, add_bias(matmul(m, mw2_[li]), mb2_[li]));
        }
        LMForwardResult<T> out;
        out.hidden = layer_norm(x, lnfg_, lnfb_, T(cfg_.ln_eps));
        out.logits = matmul_nt(out.hidden, out_w_);
        return out;
    }

    // greedy decoding; deterministic (ties break toward the lowest id)
    std::vector<int32_t> generate(const std::vector<int32_t>& prompt_ids, int max_new_tokens,
                                  const std::vector<Substitution<T>>& subs = {}) const {
        NoGradGuard ng;
        std::vector<int32_t> ids = prompt_ids;
        std::vector<int32_t> suffix;
        for (int step = 0; step < max_new_tokens; ++step) {
            if (int(ids.size()) + 1 > cfg_.context_len)
                throw TensorError("lm generate: context overflow at length " +
                                  std::to_string(ids.size()));
            auto fwd = forward(ids, 1, int(ids.size()), subs);
            const int V = vocab_size();
            const T* row = fwd.logits.data().data() + (ids.size() - 1) * size_t(V);
            int32_t best = 0;
            for (int vv = 1; vv < V; ++vv)
                if (row[vv] > row[best]) best = vv;
            ids.push_back(best);
            suffix.push_back(best);
            if (best == eos_id_) break;
        }
        return suffix;
    }

private:
    LMConfig cfg_;
    int32_t st_his_id_ = -1;
    int32_t eos_id_ = -1;
    Tensor<T> tok_embed_, pos_embed_, out_w_;
    std::vector<Tensor<T>> ln1g_, ln1b_, wq_, bq_, wk_, bk_, wv_, bv_, wo_, bo_;
    std::vector<Tensor<T>> ln2g_, ln2b_, mw1_, mb1_, mw2_, mb2_;
    Tensor<T> lnfg_, lnfb_;
};

}  // namespace stit
