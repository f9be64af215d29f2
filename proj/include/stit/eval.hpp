#pragma once

// Evaluation protocols over trained models: supervised / zero-shot /
// cross-city, per-step error curves, variance-bucket robustness, the
// naive baselines, and report serialization.

#include <atomic>
#include <fstream>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "stit/metrics.hpp"
#include "stit/pipeline.hpp"

namespace stit {

// deterministic regardless of thread count: workers fill slots by index,
// consumers read them in order afterwards
template <class Fn>
void parallel_for(size_t n, int threads, Fn&& fn) {
    if (threads <= 1 || n <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<size_t> next{0};
    auto worker = [&] {
        for (;;) {
            const size_t i = next.fetch_add(1);
            if (i >= n) return;
            fn(i);
        }
    };
    std::vector<std::thread> pool;
    const int k = int(std::min<size_t>(size_t(threads), n));
    pool.reserve(size_t(k));
    for (int t = 0; t < k; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
}

enum class Protocol { supervised, zero_shot, cross_city };

inline const char* protocol_name(Protocol p) {
    switch (p) {
        case Protocol::supervised: return "supervised";
        case Protocol::zero_shot: return "zero-shot";
        case Protocol::cross_city: return "cross-city";
    }
    return "?";
}

// one dataset as the evaluator sees it
struct EvalDataset {
    const SpatioTemporalTensor* tensor = nullptr;
    DatasetSplit split;
    TaskKind task = TaskKind::regression;
    PromptOptions prompt_opts;  // matches how the model was trained
};

struct EvalOptions {
    int stride = 12;
    int limit_windows_per_region = 1;  // 0 = all
    bool baselines = true;
    bool t2p = false;  // predictions parsed from generated text
    int max_new_tokens = 64;
    int threads = 1;  // worker cap for the prediction pass
};

struct MetricReport {
    struct Entry {
        std::string dataset, feature, source;  // source: model | historical_average | copy_last
        bool classification = false;
        double mae = 0, rmse = 0;
        std::vector<double> step_mae, step_rmse;
        double recall = -1, macro_f1 = -1;
        size_t n = 0;  // evaluated windows
    };
    struct BucketEntry {
        std::string dataset;
        int bucket = 0;  // quartile of the variance rank
        double mae = 0, rmse = 0;
        size_t n = 0;
        bool degenerate_ranks = false;
    };
    std::string protocol;
    std::string fingerprint;
    std::vector<Entry> entries;
    std::vector<BucketEntry> buckets;
    size_t missing_pre_fallbacks = 0;
    size_t t2p_unparseable = 0;
    size_t samples_evaluated = 0;

    const Entry* find(const std::string& dataset, const std::string& feature,
                      const std::string& source) const {
        for (const auto& e : entries)
            if (e.dataset == dataset && e.feature == feature && e.source == source) return &e;
        return nullptr;
    }

    // mean model MAE across features of one dataset (probability scale
    // for classification datasets)
    double model_mae(const std::string& dataset) const { return baseline_mae(dataset, "model"); }

    double baseline_mae(const std::string& dataset, const std::string& source) const {
        double sum = 0;
        size_t k = 0;
        for (const auto& e : entries)
            if (e.dataset == dataset && e.source == source) {
                sum += e.mae;
                ++k;
            }
        return k ? sum / double(k) : -1;
    }
};

namespace detail {

struct SeriesAccum {
    std::vector<double> abs_sum, sq_sum;  // per step
    size_t windows = 0;
    std::vector<int> y_bin, yhat_bin;  // classification stream

    void ensure(int P) {
        if (abs_sum.empty()) {
            abs_sum.assign(size_t(P), 0.0);
            sq_sum.assign(size_t(P), 0.0);
        }
    }
    void add(int P, const float* y, const float* yhat, int stride_y, int stride_p) {
        ensure(P);
        for (int i = 0; i < P; ++i) {
            const double d = double(y[i * stride_y]) - double(yhat[i * stride_p]);
            abs_sum[size_t(i)] += std::abs(d);
            sq_sum[size_t(i)] += d * d;
        }
        ++windows;
    }
    void add_binary(int P, const float* y, const float* yhat_prob, int stride_y, int stride_p,
                    bool prob_threshold) {
        for (int i = 0; i < P; ++i) {
            y_bin.push_back(y[i * stride_y] > 0 ? 1 : 0);
            const float v = yhat_prob[i * stride_p];
            yhat_bin.push_back((prob_threshold ? v >= 0.5f : v > 0) ? 1 : 0);
        }
        ++windows;
    }
};

inline void finalize_entry(MetricReport::Entry& e, const SeriesAccum& acc, bool classification) {
    e.classification = classification;
    e.n = acc.windows;
    if (classification && !acc.y_bin.empty()) {
        auto rf = recall_macro_f1(acc.y_bin, acc.yhat_bin);
        e.recall = rf.recall;
        e.macro_f1 = rf.macro_f1;
        // mae/rmse continue below on the probability scale
    }
    if (acc.windows == 0 || acc.abs_sum.empty()) return;
    const int P = int(acc.abs_sum.size());
    double abs_total = 0, sq_total = 0;
    e.step_mae.resize(size_t(P));
    e.step_rmse.resize(size_t(P));
    for (int i = 0; i < P; ++i) {
        e.step_mae[size_t(i)] = acc.abs_sum[size_t(i)] / double(acc.windows);
        e.step_rmse[size_t(i)] = std::sqrt(acc.sq_sum[size_t(i)] / double(acc.windows));
        abs_total += acc.abs_sum[size_t(i)];
        sq_total += acc.sq_sum[size_t(i)];
    }
    e.mae = abs_total / double(acc.windows * size_t(P));
    e.rmse = std::sqrt(sq_total / double(acc.windows * size_t(P)));
}

}  // namespace detail

template <class T>
MetricReport evaluate_protocol(ModelBundle<T>& m, const std::vector<EvalDataset>& datasets,
                               Protocol protocol, const EvalOptions& opts = {},
                               const std::string& fingerprint = "") {
    MetricReport report;
    report.protocol = protocol_name(protocol);
    report.fingerprint = fingerprint;
    const int P = m.cfg.horizon;

    for (const auto& ds : datasets) {
        const auto& t = *ds.tensor;
        const bool cls = ds.task == TaskKind::classification;
        const std::vector<int>& regions = protocol == Protocol::supervised
                                              ? ds.split.train_region_ids
                                              : ds.split.zero_shot_region_ids;
        if (protocol != Protocol::supervised)
            for (int r : ds.split.zero_shot_region_ids)
                for (int tr : ds.split.train_region_ids)
                    if (r == tr)
                        throw DataError("evaluate: region " + std::to_string(r) +
                                        " appears in both train and zero-shot sets");
        const int H = m.cfg.encoder.history_len;
        auto entries = build_corpus(t, regions, ds.split.test_time, H, P, opts.stride, ds.task,
                                    &m.tokenizer, ds.prompt_opts);
        if (opts.limit_windows_per_region > 0) {
            std::map<int, int> per_region;
            std::vector<CorpusEntry> kept;
            for (auto& e : entries)
                if (per_region[e.window.region_id]++ < opts.limit_windows_per_region)
                    kept.push_back(std::move(e));
            entries = std::move(kept);
        }

        const int F = t.F();
        std::vector<detail::SeriesAccum> model_acc(static_cast<size_t>(F)), hist_acc(static_cast<size_t>(F)),
            copy_acc(static_cast<size_t>(F));
        // per-bucket model error, feature 0, regression datasets only
        std::vector<detail::SeriesAccum> bucket_acc(4);
        VarianceBuckets vb;
        bool have_buckets = false;
        if (!cls && int(regions.size()) >= 4) {
            vb = variance_buckets(t, regions, 0, ds.split.test_time);
            have_buckets = true;
        }
        std::map<int, int> region_bucket;
        if (have_buckets)
            for (size_t i = 0; i < vb.region_ids.size(); ++i)
                region_bucket[vb.region_ids[i]] = vb.bucket[i];

        // prediction pass, parallel over windows; accumulation stays ordered
        std::vector<WindowPrediction<T>> preds(entries.size());
        parallel_for(entries.size(), opts.threads,
                     [&](size_t i) { preds[i] = predict_window(m, entries[i], opts.max_new_tokens); });

        for (size_t ei = 0; ei < entries.size(); ++ei) {
            const auto& e = entries[ei];
            ++report.samples_evaluated;
            const auto& w = e.window;
            // naive baselines straight from the history
            std::vector<float> hist_avg(size_t(F), 0.f), last(size_t(F), 0.f);
            for (int f = 0; f < F; ++f) {
                for (int i = 0; i < w.H; ++i) hist_avg[size_t(f)] += w.hist(i, f);
                hist_avg[size_t(f)] /= float(w.H);
                last[size_t(f)] = w.hist(w.H - 1, f);
            }

            std::vector<float> yhat(size_t(P) * F, 0.f);
            if (opts.t2p) {
                auto lists = parse_bracket_lists(preds[ei].answer_text);
                bool ok = int(lists.size()) >= F;
                for (int f = 0; ok && f < F; ++f) ok = int(lists[size_t(f)].size()) == P;
                if (!ok) {
                    ++report.t2p_unparseable;
                    continue;  // excluded from metrics, counted
                }
                for (int f = 0; f < F; ++f)
                    for (int i = 0; i < P; ++i)
                        yhat[size_t(i) * F + f] = float(lists[size_t(f)][size_t(i)]);
            } else {
                yhat = preds[ei].yhat;
                for (int f = 0; f < F; ++f)
                    if (preds[ei].missing[size_t(f)]) {
                        ++report.missing_pre_fallbacks;
                        for (int i = 0; i < P; ++i) yhat[size_t(i) * F + f] = last[size_t(f)];
                    }
            }

            for (int f = 0; f < F; ++f) {
                const float* y = w.target.data() + f;
                const float* fit = yhat.data() + f;
                if (cls) {
                    // model emits probabilities; baselines are history
                    // statistics on the binarized scale
                    std::vector<float> probs(static_cast<size_t>(P));
                    std::vector<float> labels(static_cast<size_t>(P));
                    for (int i = 0; i < P; ++i) {
                        probs[size_t(i)] =
                            opts.t2p ? yhat[size_t(i) * F + f]
                                     : 1.0f / (1.0f + std::exp(-yhat[size_t(i) * F + f]));
                        labels[size_t(i)] = y[i * F] > 0 ? 1.f : 0.f;
                    }
                    float pos_rate = 0.f;
                    for (int i = 0; i < w.H; ++i) pos_rate += w.hist(i, f) > 0 ? 1.f : 0.f;
                    pos_rate /= float(w.H);
                    const float last_bin = w.hist(w.H - 1, f) > 0 ? 1.f : 0.f;
                    std::vector<float> ha(size_t(P), pos_rate), cl(size_t(P), last_bin);
                    model_acc[size_t(f)].add_binary(P, y, probs.data(), F, 1, !opts.t2p);
                    model_acc[size_t(f)].windows -= 1;  // counted once below
                    model_acc[size_t(f)].add(P, labels.data(), probs.data(), 1, 1);
                    hist_acc[size_t(f)].add_binary(P, y, ha.data(), F, 1, true);
                    hist_acc[size_t(f)].windows -= 1;
                    hist_acc[size_t(f)].add(P, labels.data(), ha.data(), 1, 1);
                    copy_acc[size_t(f)].add_binary(P, y, cl.data(), F, 1, true);
                    copy_acc[size_t(f)].windows -= 1;
                    copy_acc[size_t(f)].add(P, labels.data(), cl.data(), 1, 1);
                } else {
                    model_acc[size_t(f)].add(P, y, fit, F, F);
                    std::vector<float> ha(size_t(P), hist_avg[size_t(f)]),
                        cl(size_t(P), last[size_t(f)]);
                    hist_acc[size_t(f)].add(P, y, ha.data(), F, 1);
                    copy_acc[size_t(f)].add(P, y, cl.data(), F, 1);
                    if (f == 0 && have_buckets)
                        bucket_acc[size_t(region_bucket[w.region_id])].add(P, y, fit, F, F);
                }
            }
        }

        for (int f = 0; f < F; ++f) {
            MetricReport::Entry e;
            e.dataset = t.name;
            e.feature = t.feature_names[size_t(f)];
            e.source = "model";
            detail::finalize_entry(e, model_acc[size_t(f)], cls);
            report.entries.push_back(e);
            if (opts.baselines) {
                MetricReport::Entry h = e;
                h.source = "historical_average";
                h.step_mae.clear();
                h.step_rmse.clear();
                detail::finalize_entry(h, hist_acc[size_t(f)], cls);
                report.entries.push_back(h);
                MetricReport::Entry c = e;
                c.source = "copy_last";
                c.step_mae.clear();
                c.step_rmse.clear();
                detail::finalize_entry(c, copy_acc[size_t(f)], cls);
                report.entries.push_back(c);
            }
        }
        if (have_buckets)
            for (int b = 0; b < 4; ++b) {
                MetricReport::BucketEntry be;
                be.dataset = t.name;
                be.bucket = b;
                be.degenerate_ranks = vb.degenerate;
                MetricReport::Entry tmp;
                detail::finalize_entry(tmp, bucket_acc[size_t(b)], false);
                be.mae = tmp.mae;
                be.rmse = tmp.rmse;
                be.n = bucket_acc[size_t(b)].windows;
                report.buckets.push_back(be);
            }
    }
    return report;
}

// --------------------------------------------------------------------
// report serialization
// --------------------------------------------------------------------

inline nlohmann::json report_to_json(const MetricReport& r) {
    nlohmann::json j;
    j["protocol"] = r.protocol;
    j["fingerprint"] = r.fingerprint;
    j["samples_evaluated"] = r.samples_evaluated;
    j["missing_pre_fallbacks"] = r.missing_pre_fallbacks;
    j["t2p_unparseable"] = r.t2p_unparseable;
    j["entries"] = nlohmann::json::array();
    for (const auto& e : r.entries) {
        nlohmann::json ej = {{"dataset", e.dataset}, {"feature", e.feature},
                             {"source", e.source},  {"classification", e.classification},
                             {"n", e.n}};
        if (e.classification) {
            ej["recall"] = e.recall;
            ej["macro_f1"] = e.macro_f1;
            ej["mae"] = e.mae;  // probability scale
            ej["rmse"] = e.rmse;
        } else {
            ej["mae"] = e.mae;
            ej["rmse"] = e.rmse;
            ej["step_mae"] = e.step_mae;
            ej["step_rmse"] = e.step_rmse;
        }
        j["entries"].push_back(ej);
    }
    j["buckets"] = nlohmann::json::array();
    for (const auto& b : r.buckets)
        j["buckets"].push_back({{"dataset", b.dataset},
                                {"bucket", b.bucket},
                                {"mae", b.mae},
                                {"rmse", b.rmse},
                                {"n", b.n},
                                {"degenerate_ranks", b.degenerate_ranks}});
    return j;
}

inline void write_report_csv(const MetricReport& r, const std::string& summary_path,
                             const std::string& per_step_path) {
    std::ofstream sum(summary_path);
    if (!sum) throw DataError("cannot open '" + summary_path + "' for writing");
    sum << "protocol,dataset,feature,source,metric,value,n\n";
    for (const auto& e : r.entries) {
        if (e.classification) {
            sum << r.protocol << "," << e.dataset << "," << e.feature << "," << e.source
                << ",recall," << e.recall << "," << e.n << "\n";
            sum << r.protocol << "," << e.dataset << "," << e.feature << "," << e.source
                << ",macro_f1," << e.macro_f1 << "," << e.n << "\n";
        } else {
            sum << r.protocol << "," << e.dataset << "," << e.feature << "," << e.source << ",mae,"
                << e.mae << "," << e.n << "\n";
            sum << r.protocol << "," << e.dataset << "," << e.feature << "," << e.source << ",rmse,"
                << e.rmse << "," << e.n << "\n";
        }
    }
    for (const auto& b : r.buckets) {
        sum << r.protocol << "," << b.dataset << ",bucket" << b.bucket << ",model,bucket_mae,"
            << b.mae << "," << b.n << "\n";
    }
    std::ofstream steps(per_step_path);
    if (!steps) throw DataError("cannot open '" + per_step_path + "' for writing");
    steps << "protocol,dataset,feature,source,step,mae,rmse\n";
    for (const auto& e : r.entries)
        for (size_t i = 0; i < e.step_mae.size(); ++i)
            steps << r.protocol << "," << e.dataset << "," << e.feature << "," << e.source << ","
                  << (i + 1) << "," << e.step_mae[i] << "," << e.step_rmse[i] << "\n";
}

}  // namespace stit
