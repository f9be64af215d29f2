#pragma once

// Named parameter collection with stable ordering, seeded initialization,
// and the adaptive-moment optimizer (bias-corrected, constant lr).

#include <string>
#include <unordered_map>
#include <vector>

#include "stit/rng.hpp"
#include "stit/tensor.hpp"

namespace stit {

template <class T>
class ParameterSet {
public:
    Tensor<T>& add(const std::string& name, Tensor<T> t) {
        if (index_.count(name)) throw TensorError("parameter '" + name + "' already registered");
        t.set_requires_grad(true);
        index_[name] = entries_.size();
        entries_.push_back({name, std::move(t)});
        return entries_.back().second;
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    Tensor<T>& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw TensorError("unknown parameter '" + name + "'");
        return entries_[it->second].second;
    }
    const Tensor<T>& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw TensorError("unknown parameter '" + name + "'");
        return entries_[it->second].second;
    }

    size_t size() const { return entries_.size(); }
    std::vector<std::pair<std::string, Tensor<T>>>& entries() { return entries_; }
    const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }

    void zero_grads() {
        for (auto& [name, t] : entries_) t.zero_grad();
    }

    size_t numel() const {
        size_t n = 0;
        for (const auto& [name, t] : entries_) n += t.numel();
        return n;
    }

private:
    std::vector<std::pair<std::string, Tensor<T>>> entries_;
    std::unordered_map<std::string, size_t> index_;
};

// uniform in +-1/sqrt(fan_in); seeded per parameter name so the result
// does not depend on registration order
template <class T>
Tensor<T> init_uniform_fanin(const std::string& name, Shape shape, int fan_in, uint64_t seed) {
    Rng rng(splitmix64(seed) ^ fnv1a64(name));
    const double bound = 1.0 / std::sqrt(double(std::max(1, fan_in)));
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = T(rng.uniform(-bound, bound));
    return Tensor<T>::from_vector(std::move(v), std::move(shape));
}

struct OptimizerConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double grad_clip = 0.0;  // 0 = off; otherwise global-norm clip
};

template <class T>
class AdamOptimizer {
public:
    explicit AdamOptimizer(OptimizerConfig config = {}) : config_(config) {}

    const OptimizerConfig& config() const { return config_; }
    int64_t step_count() const { return step_; }

    // one adaptive-moment update from accumulated grads; grads cleared after
    void step(ParameterSet<T>& params) {
        for (auto& [name, t] : params.entries())
            if (t.raw().grad.size() != t.numel())
                throw TensorError("optimizer_step: parameter '" + name + "' has no gradient");
        T clip_scale = T(1);
        if (config_.grad_clip > 0.0) {
            double sq = 0.0;
            for (auto& [name, t] : params.entries())
                for (T g : t.raw().grad) sq += double(g) * double(g);
            double norm = std::sqrt(sq);
            if (norm > config_.grad_clip) clip_scale = T(config_.grad_clip / norm);
        }
        step_ += 1;
        const double bc1 = 1.0 - std::pow(config_.beta1, double(step_));
        const double bc2 = 1.0 - std::pow(config_.beta2, double(step_));
        for (auto& [name, t] : params.entries()) {
            auto& st = state_[name];
            st.m.resize(t.numel(), T(0));
            st.v.resize(t.numel(), T(0));
            auto& value = t.data();
            auto& grad = t.raw().grad;
            for (size_t i = 0; i < value.size(); ++i) {
                T g = grad[i] * clip_scale;
                if (config_.weight_decay > 0.0) g += T(config_.weight_decay) * value[i];
                st.m[i] = T(config_.beta1) * st.m[i] + T(1.0 - config_.beta1) * g;
                st.v[i] = T(config_.beta2) * st.v[i] + T(1.0 - config_.beta2) * g * g;
                const double mhat = double(st.m[i]) / bc1;
                const double vhat = double(st.v[i]) / bc2;
                value[i] -= T(config_.learning_rate * mhat / (std::sqrt(vhat) + config_.eps));
            }
        }
        params.zero_grads();
    }

    struct MomentState {
        std::vector<T> m, v;
    };
    std::unordered_map<std::string, MomentState>& state() { return state_; }
    void set_step_count(int64_t s) { step_ = s; }

private:
    OptimizerConfig config_;
    std::unordered_map<std::string, MomentState> state_;
    int64_t step_ = 0;
};

}  // namespace stit
