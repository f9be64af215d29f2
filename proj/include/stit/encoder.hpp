#pragma once

// Spatio-temporal dependency encoder: per-(region, feature) scalar series
// are lifted to channel sequences, passed through gated dilated
// convolution layers with residual slices, accumulated through
// time-collapsing injection convolutions, and fused to one d-vector.
// No cross-region mixing anywhere.

#include <string>
#include <vector>

#include "stit/params.hpp"
#include "stit/tensor.hpp"

namespace stit {

struct EncoderConfig {
    int layers = 2;
    int kernel_len = 3;         // gate/filter kernel length
    int inject_kernel_len = 0;  // 0 = span the full remaining time axis per layer
    std::vector<int> dilations;  // per layer; defaults to all-1
    int d_in = 32;
    int d_out = 32;
    int d_out_prime = 32;
    int d = 64;  // fused output width
    int history_len = 12;
    double input_scale = 0.05;  // fixed count normalization before the linear lift

    int dilation(int layer) const {
        if (dilations.empty()) return 1;
        return dilations[size_t(layer)];
    }

    // sequence length after layer l (0-based; -1 = input)
    int length_after(int layer) const {
        int len = history_len;
        for (int l = 0; l <= layer; ++l) len -= dilation(l) * (kernel_len - 1);
        return len;
    }

    int receptive_field() const {
        int rf = 1;
        for (int l = 0; l < layers; ++l) rf += dilation(l) * (kernel_len - 1);
        return rf;
    }

    void validate() const {
        if (layers < 1 || kernel_len < 1 || d_in < 1 || d_out < 1 || d_out_prime < 1 || d < 1)
            throw TensorError("encoder config: extents must be positive");
        if (!dilations.empty() && int(dilations.size()) != layers)
            throw TensorError("encoder config: " + std::to_string(dilations.size()) +
                              " dilations for " + std::to_string(layers) + " layers");
        if (length_after(layers - 1) < 1)
            throw TensorError("encoder config: receptive field " +
                              std::to_string(receptive_field()) + " exceeds history length " +
                              std::to_string(history_len));
        if (inject_kernel_len != 0)
            for (int l = 0; l < layers; ++l)
                if (inject_kernel_len != length_after(l))
                    throw TensorError(
                        "encoder config: explicit injection kernel length must collapse each "
                        "layer's remaining time axis (layer " +
                        std::to_string(l) + " has length " + std::to_string(length_after(l)) + ")");
    }
};

template <class T>
class StEncoder {
public:
    StEncoder() = default;
    explicit StEncoder(EncoderConfig cfg) : cfg_(cfg) { cfg_.validate(); }

    const EncoderConfig& config() const { return cfg_; }

    // registers parameters under "encoder.*" (reusing entries that already
    // exist, e.g. after a checkpoint restore) and keeps handles
    void bind(ParameterSet<T>& params, uint64_t seed) {
        auto want = [&](const std::string& name, Shape shape, int fan_in) -> Tensor<T> {
            if (params.contains(name)) {
                auto& t = params.get(name);
                if (t.shape() != shape)
                    throw TensorError("parameter '" + name + "' has shape " +
                                      shape_str(t.shape()) + ", expected " + shape_str(shape));
                return t;
            }
            return params.add(name, init_uniform_fanin<T>(name, shape, fan_in, seed));
        };
        auto want_zeros = [&](const std::string& name, Shape shape) -> Tensor<T> {
            if (params.contains(name)) return params.get(name);
            return params.add(name, Tensor<T>::zeros(shape));
        };

        embed_w_ = want("encoder.embed.w", {1, cfg_.d_in}, 1);
        embed_b_ = want_zeros("encoder.embed.b", {cfg_.d_in});
        wk_.clear();
        bk_.clear();
        wg_.clear();
        bg_.clear();
        wres_.clear();
        ws_.clear();
        bs_.clear();
        for (int l = 0; l < cfg_.layers; ++l) {
            const int cin = l == 0 ? cfg_.d_in : cfg_.d_out;
            const std::string base = "encoder.layer" + std::to_string(l);
            wk_.push_back(want(base + ".wk", {cfg_.kernel_len, cin, cfg_.d_out},
                               cfg_.kernel_len * cin));
            bk_.push_back(want_zeros(base + ".bk", {cfg_.d_out}));
            wg_.push_back(want(base + ".wg", {cfg_.kernel_len, cin, cfg_.d_out},
                               cfg_.kernel_len * cin));
            bg_.push_back(want_zeros(base + ".bg", {cfg_.d_out}));
            if (cin != cfg_.d_out)
                wres_.push_back(want(base + ".wres", {cin, cfg_.d_out}, cin));
            else
                wres_.push_back(Tensor<T>());  // identity residual
            const int span = cfg_.length_after(l);
            ws_.push_back(want(base + ".ws", {span, cfg_.d_out, cfg_.d_out_prime},
                               span * cfg_.d_out));
            bs_.push_back(want_zeros(base + ".bs", {cfg_.d_out_prime}));
        }
        fuse_w_ = want("encoder.fuse.w", {cfg_.d_out_prime + cfg_.d_out, cfg_.d},
                       cfg_.d_out_prime + cfg_.d_out);
        fuse_b_ = want_zeros("encoder.fuse.b", {cfg_.d});
        bound_ = true;
    }

    // scalar series -> [T, d_in] via the shared linear lift
    Tensor<T> embed_input(const Tensor<T>& series_col) const {
        return add_bias(matmul(series_col, embed_w_), embed_b_);
    }

    // one gated dilated convolution layer with residual slice
    Tensor<T> gated_layer(const Tensor<T>& e, int layer) const {
        auto filter = conv1d(e, wk_[size_t(layer)], bk_[size_t(layer)], cfg_.dilation(layer));
        auto gate = sigmoid(conv1d(e, wg_[size_t(layer)], bg_[size_t(layer)], cfg_.dilation(layer)));
        auto gated = mul(filter, gate);
        const int t_out = gated.dim(0);
        auto residual = slice_rows(e, e.dim(0) - t_out, t_out);
        if (wres_[size_t(layer)].defined()) residual = matmul(residual, wres_[size_t(layer)]);
        return add(gated, residual);
    }

    // multi-level accumulation of time-collapsed injections: the running
    // sum starts at zero and each layer adds its collapsed convolution;
    // returns the accumulator of shape [1, d_out']
    Tensor<T> inject(const std::vector<Tensor<T>>& psis) const {
        if (int(psis.size()) != cfg_.layers)
            throw TensorError("inject: got " + std::to_string(psis.size()) +
                              " layer outputs for " + std::to_string(cfg_.layers) + " layers");
        Tensor<T> s;
        for (int l = 0; l < cfg_.layers; ++l) {
            auto inj = conv1d(psis[size_t(l)], ws_[size_t(l)], bs_[size_t(l)], 1);
            if (inj.dim(0) != 1)
                throw TensorError("inject: injection at layer " + std::to_string(l) + " left " +
                                  std::to_string(inj.dim(0)) + " time steps");
            s = l == 0 ? inj : add(inj, s);
        }
        return s;
    }

    // fusion of the accumulated injections with the mean-pooled top layer
    Tensor<T> inject_and_fuse(const std::vector<Tensor<T>>& psis) const {
        auto s = inject(psis);
        auto pooled = mean_rows(psis.back());
        return relu(add_bias(matmul(concat_last(s, pooled), fuse_w_), fuse_b_));
    }

    // one region's history window [H, F] -> [F, d]
    Tensor<T> encode_window(const std::vector<float>& history, int H, int F) const {
        if (!bound_) throw TensorError("encoder: parameters not bound");
        if (int(history.size()) != H * F)
            throw TensorError("encode_window: history size mismatch");
        std::vector<Tensor<T>> rows;
        for (int f = 0; f < F; ++f) {
            std::vector<T> col(static_cast<size_t>(H));
            for (int t = 0; t < H; ++t)
                col[size_t(t)] = T(history[size_t(t) * F + f] * cfg_.input_scale);
            auto e = embed_input(Tensor<T>::from_vector(std::move(col), {H, 1}));
            std::vector<Tensor<T>> psis;
            for (int l = 0; l < cfg_.layers; ++l) {
                e = gated_layer(e, l);
                psis.push_back(e);
            }
            rows.push_back(inject_and_fuse(psis));
        }
        return stack_rows(rows);  // [F, d]
    }

    // batch of regions [R, H, F] -> [R, F, d]
    Tensor<T> encode(const std::vector<float>& batch, int R, int H, int F) const {
        std::vector<Tensor<T>> per_region;
        for (int r = 0; r < R; ++r) {
            std::vector<float> window(batch.begin() + size_t(r) * H * F,
                                      batch.begin() + size_t(r + 1) * H * F);
            per_region.push_back(encode_window(window, H, F));
        }
        auto flat = stack_rows(per_region);  // stacks [F,d] blocks row-wise
        // reinterpret as [R, F, d]
        auto n = flat.node();
        n->shape = {R, F, cfg_.d};
        return Tensor<T>(n);
    }

private:
    EncoderConfig cfg_;
    bool bound_ = false;
    Tensor<T> embed_w_, embed_b_;
    std::vector<Tensor<T>> wk_, bk_, wg_, bg_, wres_, ws_, bs_;
    Tensor<T> fuse_w_, fuse_b_;
};

}  // namespace stit
