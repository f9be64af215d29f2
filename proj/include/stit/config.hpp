#pragma once

// Run configuration: one JSON document with data/encoder/lm/train/eval
// blocks. Unknown keys are rejected; every field has a default except the
// seed, which training and evaluation require explicitly.

#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "stit/encoder.hpp"
#include "stit/eval.hpp"
#include "stit/lm.hpp"
#include "stit/rng.hpp"
#include "stit/synth.hpp"
#include "stit/train.hpp"

namespace stit {

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct DatasetConfig {
    std::string name;
    std::string tensor_path;  // .stt file; synthesized on demand when absent
    TaskKind task = TaskKind::regression;
    std::optional<SynthConfig> synth;
};

struct DataConfig {
    int h = 12;
    int p = 12;
    int train_stride = 120;
    int eval_stride = 12;
    int n_train_regions = 20;
    int n_zero_shot_regions = 20;
    int train_days = 10;  // train time range [0, train_days); test is the remainder
    std::vector<DatasetConfig> datasets;
    std::optional<DatasetConfig> cross_city;
};

struct RunConfig {
    uint64_t seed = 0;
    bool seed_set = false;
    int threads = 1;
    DataConfig data;
    EncoderConfig encoder;
    LMConfig lm;
    TrainConfig train;
    int d_prime = 128;
    bool classification_includes_l_r = false;
    EvalOptions eval;

    void require_seed() const {
        if (!seed_set) throw ConfigError("config: seed is mandatory for train/eval runs");
    }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                       const std::string& where) {
    if (!j.is_object()) throw ConfigError("config: '" + where + "' must be an object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError("config: unknown key '" + it.key() + "' in " + where);
}

template <class T>
void take(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

inline SynthConfig parse_synth(const nlohmann::json& j, const std::string& where) {
    check_keys(j,
               {"subject", "city", "seed", "regions", "days", "interval_minutes", "base_rate",
                "daily_amplitude", "weekly_amplitude", "phase_spread", "noise_scale", "sparsity",
                "feature_names"},
               where);
    SynthConfig s;
    take(j, "subject", s.subject);
    take(j, "city", s.city);
    take(j, "seed", s.seed);
    take(j, "regions", s.regions);
    take(j, "days", s.days);
    take(j, "interval_minutes", s.interval_minutes);
    take(j, "base_rate", s.base_rate);
    take(j, "daily_amplitude", s.daily_amplitude);
    take(j, "weekly_amplitude", s.weekly_amplitude);
    take(j, "phase_spread", s.phase_spread);
    take(j, "noise_scale", s.noise_scale);
    take(j, "sparsity", s.sparsity);
    take(j, "feature_names", s.feature_names);
    return s;
}

inline DatasetConfig parse_dataset(const nlohmann::json& j, const std::string& where) {
    check_keys(j, {"name", "tensor", "task", "synth"}, where);
    DatasetConfig d;
    take(j, "name", d.name);
    take(j, "tensor", d.tensor_path);
    if (j.contains("task")) {
        auto t = j.at("task").get<std::string>();
        if (t == "classification")
            d.task = TaskKind::classification;
        else if (t == "regression")
            d.task = TaskKind::regression;
        else
            throw ConfigError("config: unknown task '" + t + "' in " + where);
    }
    if (j.contains("synth")) {
        d.synth = parse_synth(j.at("synth"), where + ".synth");
        d.synth->name = d.name;
    }
    if (d.name.empty()) throw ConfigError("config: dataset in " + where + " needs a name");
    return d;
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
    detail::check_keys(j, {"seed", "threads", "data", "encoder", "lm", "train", "eval"}, "root");
    RunConfig c;
    if (j.contains("seed")) {
        c.seed = j.at("seed").get<uint64_t>();
        c.seed_set = true;
    }
    detail::take(j, "threads", c.threads);

    if (j.contains("data")) {
        const auto& d = j.at("data");
        detail::check_keys(d,
                           {"h", "p", "train_stride", "eval_stride", "n_train_regions",
                            "n_zero_shot_regions", "train_days", "datasets", "cross_city"},
                           "data");
        detail::take(d, "h", c.data.h);
        detail::take(d, "p", c.data.p);
        detail::take(d, "train_stride", c.data.train_stride);
        detail::take(d, "eval_stride", c.data.eval_stride);
        detail::take(d, "n_train_regions", c.data.n_train_regions);
        detail::take(d, "n_zero_shot_regions", c.data.n_zero_shot_regions);
        detail::take(d, "train_days", c.data.train_days);
        if (d.contains("datasets")) {
            size_t i = 0;
            for (const auto& dj : d.at("datasets"))
                c.data.datasets.push_back(
                    detail::parse_dataset(dj, "data.datasets[" + std::to_string(i++) + "]"));
        }
        if (d.contains("cross_city"))
            c.data.cross_city = detail::parse_dataset(d.at("cross_city"), "data.cross_city");
    }

    if (j.contains("encoder")) {
        const auto& e = j.at("encoder");
        detail::check_keys(e,
                           {"layers", "kernel_len", "inject_kernel_len", "dilations", "d_in",
                            "d_out", "d_out_prime", "d", "input_scale"},
                           "encoder");
        detail::take(e, "layers", c.encoder.layers);
        detail::take(e, "kernel_len", c.encoder.kernel_len);
        detail::take(e, "inject_kernel_len", c.encoder.inject_kernel_len);
        detail::take(e, "dilations", c.encoder.dilations);
        detail::take(e, "d_in", c.encoder.d_in);
        detail::take(e, "d_out", c.encoder.d_out);
        detail::take(e, "d_out_prime", c.encoder.d_out_prime);
        detail::take(e, "d", c.encoder.d);
        detail::take(e, "input_scale", c.encoder.input_scale);
    }
    c.encoder.history_len = c.data.h;

    if (j.contains("lm")) {
        const auto& l = j.at("lm");
        detail::check_keys(l, {"n_layers", "n_heads", "d_model", "context_len"}, "lm");
        detail::take(l, "n_layers", c.lm.n_layers);
        detail::take(l, "n_heads", c.lm.n_heads);
        detail::take(l, "d_model", c.lm.d_model);
        detail::take(l, "context_len", c.lm.context_len);
    }

    if (j.contains("train")) {
        const auto& t = j.at("train");
        detail::check_keys(t,
                           {"epochs", "batch_size", "learning_rate", "beta1", "beta2",
                            "weight_decay", "grad_clip", "checkpoint_every", "d_prime",
                            "classification_includes_l_r"},
                           "train");
        detail::take(t, "epochs", c.train.epochs);
        detail::take(t, "batch_size", c.train.batch_size);
        detail::take(t, "learning_rate", c.train.learning_rate);
        detail::take(t, "beta1", c.train.beta1);
        detail::take(t, "beta2", c.train.beta2);
        detail::take(t, "weight_decay", c.train.weight_decay);
        detail::take(t, "grad_clip", c.train.grad_clip);
        detail::take(t, "checkpoint_every", c.train.checkpoint_every);
        detail::take(t, "d_prime", c.d_prime);
        detail::take(t, "classification_includes_l_r", c.classification_includes_l_r);
    }
    c.train.seed = c.seed;

    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        detail::check_keys(
            e, {"stride", "limit_windows_per_region", "baselines", "max_new_tokens"}, "eval");
        detail::take(e, "stride", c.eval.stride);
        detail::take(e, "limit_windows_per_region", c.eval.limit_windows_per_region);
        detail::take(e, "baselines", c.eval.baselines);
        detail::take(e, "max_new_tokens", c.eval.max_new_tokens);
    }
    c.eval.stride = c.eval.stride > 0 ? c.eval.stride : c.data.eval_stride;
    return c;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config '" + path + "': " + e.what());
    }
    return parse_run_config(j);
}

// stable content hash for run manifests
inline std::string config_fingerprint(const nlohmann::json& j, uint64_t seed) {
    const uint64_t h = fnv1a64(j.dump()) ^ (seed * 0x9e3779b97f4a7c15ULL);
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace stit
