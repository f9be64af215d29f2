#pragma once

// End-to-end experiment orchestration shared by the CLI and the
// acceptance suite: data preparation, tokenizer construction, variant
// wiring for ablations, training, evaluation, and run manifests.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "stit/config.hpp"
#include "stit/eval.hpp"
#include "stit/train.hpp"
#include "stit/version.hpp"

namespace stit {

enum class AblationVariant { FULL, STC_OFF, MULTI_OFF, STE_OFF, T2P };

inline const char* variant_name(AblationVariant v) {
    switch (v) {
        case AblationVariant::FULL: return "FULL";
        case AblationVariant::STC_OFF: return "STC_OFF";
        case AblationVariant::MULTI_OFF: return "MULTI_OFF";
        case AblationVariant::STE_OFF: return "STE_OFF";
        case AblationVariant::T2P: return "T2P";
    }
    return "?";
}

inline AblationVariant parse_variant(const std::string& s) {
    for (auto v : {AblationVariant::FULL, AblationVariant::STC_OFF, AblationVariant::MULTI_OFF,
                   AblationVariant::STE_OFF, AblationVariant::T2P})
        if (s == variant_name(v)) return v;
    throw ConfigError("unknown ablation variant '" + s + "'");
}

struct ExperimentData {
    std::vector<SpatioTemporalTensor> tensors;
    std::vector<TaskKind> tasks;
    std::vector<DatasetSplit> splits;
    std::optional<SpatioTemporalTensor> cross_tensor;
    std::optional<DatasetSplit> cross_split;
    TaskKind cross_task = TaskKind::regression;
};

namespace detail {

inline SpatioTemporalTensor load_or_synth(const DatasetConfig& d, const std::string& base_dir) {
    if (!d.tensor_path.empty()) {
        auto path = std::filesystem::path(d.tensor_path);
        if (path.is_relative() && !base_dir.empty()) path = std::filesystem::path(base_dir) / path;
        if (std::filesystem::exists(path)) {
            auto t = load_stt(path.string());
            if (t.name.empty()) t.name = d.name;
            return t;
        }
    }
    if (!d.synth)
        throw DataError("dataset '" + d.name + "': tensor file missing and no synth block given");
    auto t = synth_generate(*d.synth);
    t.name = d.name;
    return t;
}

inline TimeRange train_range(const RunConfig& cfg, const SpatioTemporalTensor& t) {
    const int spd = (24 * 60) / t.time.interval_minutes;
    return {0, std::min(cfg.data.train_days * spd, t.T())};
}

inline TimeRange test_range(const RunConfig& cfg, const SpatioTemporalTensor& t) {
    const int spd = (24 * 60) / t.time.interval_minutes;
    return {std::min(cfg.data.train_days * spd, t.T()), t.T()};
}

}  // namespace detail

inline ExperimentData prepare_data(const RunConfig& cfg, const std::string& base_dir = "") {
    if (cfg.data.datasets.empty()) throw ConfigError("config: data.datasets is empty");
    ExperimentData out;
    for (const auto& d : cfg.data.datasets) {
        auto t = detail::load_or_synth(d, base_dir);
        auto split = split_regions(t, cfg.seed ^ fnv1a64(d.name), cfg.data.n_train_regions,
                                   cfg.data.n_zero_shot_regions, detail::train_range(cfg, t),
                                   detail::test_range(cfg, t));
        out.tensors.push_back(std::move(t));
        out.tasks.push_back(d.task);
        out.splits.push_back(std::move(split));
    }
    if (cfg.data.cross_city) {
        auto t = detail::load_or_synth(*cfg.data.cross_city, base_dir);
        // a whole unseen city: every region is zero-shot
        auto split = split_regions(t, cfg.seed ^ fnv1a64(t.name), 0, t.R(),
                                   detail::train_range(cfg, t), detail::test_range(cfg, t));
        out.cross_split = std::move(split);
        out.cross_task = cfg.data.cross_city->task;
        out.cross_tensor = std::move(t);
    }
    return out;
}

// words the tokenizer must know beyond the training corpus: calendar
// names, digits, the fallback sentence, and region metadata of every
// dataset (zero-shot regions never appear in training prompts)
inline std::vector<std::string> tokenizer_bank(const ExperimentData& data) {
    std::vector<std::string> bank;
    std::string calendar;
    for (const auto* m : month_names()) calendar += std::string(m) + " ";
    for (const auto* w : weekday_names()) calendar += std::string(w) + " ";
    bank.push_back(calendar);
    bank.push_back("0 1 2 3 4 5 6 7 8 9 [ ] ( ) ' , . : - <");
    bank.push_back("No description is available for this region.");
    auto add_tensor = [&](const SpatioTemporalTensor& t) {
        std::string s = t.subject + " " + t.name;
        for (const auto& f : t.feature_names) s += " " + f + "s";
        for (const auto& r : t.regions) {
            s += " " + r.city + " " + r.borough;
            for (const auto& p : r.poi_categories) s += " " + p;
        }
        bank.push_back(s);
    };
    for (const auto& t : data.tensors) add_tensor(t);
    if (data.cross_tensor) add_tensor(*data.cross_tensor);
    return bank;
}

struct Experiment {
    RunConfig cfg;
    AblationVariant variant = AblationVariant::FULL;
    const ExperimentData* data = nullptr;
    PromptOptions prompt_opts;
    ModelBundle<float> bundle;
    std::vector<std::vector<CorpusEntry>> corpora;  // per training dataset
};

inline Experiment build_experiment(const RunConfig& cfg, const ExperimentData& data,
                                   AblationVariant variant = AblationVariant::FULL) {
    cfg.require_seed();
    Experiment exp;
    exp.cfg = cfg;
    exp.variant = variant;
    exp.data = &data;
    exp.prompt_opts.include_context = variant != AblationVariant::STC_OFF;
    exp.prompt_opts.target_mode = variant == AblationVariant::T2P ? TargetMode::text_numbers
                                                                  : TargetMode::token_regression;

    const size_t n_train_sets = variant == AblationVariant::MULTI_OFF ? 1 : data.tensors.size();
    for (size_t d = 0; d < n_train_sets; ++d)
        exp.corpora.push_back(build_corpus(data.tensors[d], data.splits[d].train_region_ids,
                                           data.splits[d].train_time, cfg.data.h, cfg.data.p,
                                           cfg.data.train_stride, data.tasks[d], nullptr,
                                           exp.prompt_opts));

    Tokenizer tok;
    for (auto s : {kStStart, kStHis, kStEnd, kStPre}) tok.add_special(s);
    std::vector<std::string> texts = tokenizer_bank(data);
    // both answer frames so ablation checkpoints can be evaluated either way
    for (const auto& corpus : exp.corpora)
        for (const auto& e : corpus) {
            texts.push_back(e.rec.prompt_text);
            texts.push_back(e.rec.target_text);
        }
    texts.push_back("Based on the given information, the predictions of x in this region are "
                    "<ST_PRE> and <ST_PRE>.");
    tok.build(texts);
    exp.bundle.tokenizer = std::move(tok);

    for (auto& corpus : exp.corpora)
        for (auto& e : corpus) finalize_positions(e.rec, exp.bundle.tokenizer);

    exp.bundle.cfg.encoder = cfg.encoder;
    exp.bundle.cfg.lm = cfg.lm;
    exp.bundle.cfg.d_prime = cfg.d_prime;
    exp.bundle.cfg.horizon = cfg.data.p;
    exp.bundle.cfg.use_encoder = variant != AblationVariant::STE_OFF;
    exp.bundle.cfg.classification_includes_l_r = cfg.classification_includes_l_r;
    exp.bundle.bind(cfg.seed);
    return exp;
}

inline std::vector<EvalDataset> eval_datasets(const Experiment& exp, Protocol protocol) {
    std::vector<EvalDataset> out;
    if (protocol == Protocol::cross_city) {
        if (!exp.data->cross_tensor)
            throw DataError("cross-city protocol: no cross-city dataset configured");
        EvalDataset d;
        d.tensor = &*exp.data->cross_tensor;
        d.split = *exp.data->cross_split;
        d.task = exp.data->cross_task;
        d.prompt_opts = exp.prompt_opts;
        out.push_back(d);
        return out;
    }
    for (size_t i = 0; i < exp.data->tensors.size(); ++i) {
        EvalDataset d;
        d.tensor = &exp.data->tensors[i];
        d.split = exp.data->splits[i];
        d.task = exp.data->tasks[i];
        d.prompt_opts = exp.prompt_opts;
        out.push_back(d);
    }
    return out;
}

inline MetricReport evaluate_experiment(Experiment& exp, Protocol protocol,
                                        const std::string& fingerprint = "") {
    EvalOptions opts = exp.cfg.eval;
    opts.t2p = exp.variant == AblationVariant::T2P;
    opts.threads = exp.cfg.threads;
    return evaluate_protocol(exp.bundle, eval_datasets(exp, protocol), protocol, opts, fingerprint);
}

// rebuild a trained experiment from a checkpoint: restored parameters,
// the stored tokenizer, and data re-prepared from the stored config
struct RestoredExperiment {
    std::shared_ptr<ExperimentData> data;
    Experiment exp;
    CheckpointExtras extras;
};

inline RestoredExperiment restore_experiment(const std::string& ckpt_path,
                                             const std::string& base_dir = "",
                                             const std::string& config_override = "") {
    RestoredExperiment out;
    ParameterSet<float> params;
    AdamOptimizer<float> opt;
    out.extras = load_checkpoint(ckpt_path, params, opt);

    RunConfig cfg = config_override.empty()
                        ? parse_run_config(out.extras.configs.at("run_config"))
                        : load_run_config(config_override);
    const auto variant =
        parse_variant(out.extras.configs.value("variant", std::string("FULL")));

    out.data = std::make_shared<ExperimentData>(prepare_data(cfg, base_dir));
    auto& exp = out.exp;
    exp.cfg = cfg;
    exp.variant = variant;
    exp.data = out.data.get();
    exp.prompt_opts.include_context = variant != AblationVariant::STC_OFF;
    exp.prompt_opts.target_mode = variant == AblationVariant::T2P ? TargetMode::text_numbers
                                                                  : TargetMode::token_regression;
    exp.bundle.tokenizer = Tokenizer::from_json(out.extras.tokenizer);
    exp.bundle.cfg.encoder = cfg.encoder;
    exp.bundle.cfg.lm = cfg.lm;
    exp.bundle.cfg.d_prime = cfg.d_prime;
    exp.bundle.cfg.horizon = cfg.data.p;
    exp.bundle.cfg.use_encoder = variant != AblationVariant::STE_OFF;
    exp.bundle.cfg.classification_includes_l_r = cfg.classification_includes_l_r;
    exp.bundle.params = std::move(params);
    exp.bundle.bind(cfg.seed);
    return out;
}

inline void write_run_manifest(const std::string& dir, const nlohmann::json& config_json,
                               uint64_t seed, const nlohmann::json& extra = {}) {
    nlohmann::json m = {{"config_hash", config_fingerprint(config_json, seed)},
                        {"seed", seed},
                        {"version", kVersion},
                        {"config", config_json}};
    if (!extra.is_null() && !extra.empty()) m["run"] = extra;
    std::ofstream out(std::filesystem::path(dir) / "manifest.json");
    if (!out) throw DataError("cannot write manifest in '" + dir + "'");
    out << m.dump(2) << "\n";
}

// ablation comparison rows (model metrics only)
inline nlohmann::json ablation_table(const MetricReport& full, const MetricReport& variant,
                                     const std::string& variant_label) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& e : full.entries) {
        if (e.source != "model") continue;
        const auto* v = variant.find(e.dataset, e.feature, "model");
        if (!v) continue;
        nlohmann::json row = {{"dataset", e.dataset}, {"feature", e.feature},
                              {"variant", variant_label}};
        if (e.classification) {
            row["full_recall"] = e.recall;
            row["full_macro_f1"] = e.macro_f1;
            row["variant_recall"] = v->recall;
            row["variant_macro_f1"] = v->macro_f1;
        } else {
            row["full_mae"] = e.mae;
            row["full_rmse"] = e.rmse;
            row["variant_mae"] = v->mae;
            row["variant_rmse"] = v->rmse;
        }
        rows.push_back(row);
    }
    return rows;
}

}  // namespace stit
