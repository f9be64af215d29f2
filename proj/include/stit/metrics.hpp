#pragma once

// Regression and classification metrics plus variance-rank bucketing.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "stit/st_data.hpp"

namespace stit {

struct MaeRmse {
    double mae = 0;
    double rmse = 0;
};

inline MaeRmse mae_rmse(const std::vector<double>& y, const std::vector<double>& yhat) {
    if (y.size() != yhat.size())
        throw DataError("mae_rmse: size mismatch " + std::to_string(y.size()) + " vs " +
                        std::to_string(yhat.size()));
    if (y.empty()) throw DataError("mae_rmse: empty input");
    double abs_sum = 0, sq_sum = 0;
    for (size_t i = 0; i < y.size(); ++i) {
        const double d = y[i] - yhat[i];
        abs_sum += std::abs(d);
        sq_sum += d * d;
    }
    return {abs_sum / double(y.size()), std::sqrt(sq_sum / double(y.size()))};
}

struct RecallF1 {
    double recall = 0;
    double macro_f1 = 0;
    bool no_positive_labels = false;
};

// Recall for the positive class; Macro-F1 = unweighted mean of per-class
// F1 over {0,1}, with zero-denominator F1 defined as 0.
inline RecallF1 recall_macro_f1(const std::vector<int>& y, const std::vector<int>& yhat) {
    if (y.size() != yhat.size())
        throw DataError("recall_macro_f1: size mismatch " + std::to_string(y.size()) + " vs " +
                        std::to_string(yhat.size()));
    if (y.empty()) throw DataError("recall_macro_f1: empty input");
    size_t tp = 0, fp = 0, tn = 0, fn = 0;
    for (size_t i = 0; i < y.size(); ++i) {
        if (y[i] != 0 && y[i] != 1)
            throw DataError("recall_macro_f1: labels must be binary");
        if (yhat[i] != 0 && yhat[i] != 1)
            throw DataError("recall_macro_f1: predictions must be binary");
        if (y[i] == 1 && yhat[i] == 1) ++tp;
        else if (y[i] == 0 && yhat[i] == 1) ++fp;
        else if (y[i] == 0 && yhat[i] == 0) ++tn;
        else ++fn;
    }
    RecallF1 out;
    out.no_positive_labels = (tp + fn) == 0;
    out.recall = out.no_positive_labels ? 0.0 : double(tp) / double(tp + fn);
    auto f1 = [](size_t tp_c, size_t fp_c, size_t fn_c) {
        const double denom = double(2 * tp_c + fp_c + fn_c);
        return denom == 0.0 ? 0.0 : 2.0 * double(tp_c) / denom;
    };
    const double f1_pos = f1(tp, fp, fn);
    const double f1_neg = f1(tn, fn, fp);  // class 0 as the positive class
    out.macro_f1 = 0.5 * (f1_pos + f1_neg);
    return out;
}

struct VarianceBuckets {
    std::vector<int> region_ids;          // evaluated regions, input order
    std::vector<double> variance;         // per region
    std::vector<double> normalized_rank;  // in (0, 1]
    std::vector<int> bucket;              // 0: (0,.25], 1: (.25,.5], 2: (.5,.75], 3: (.75,1]
    bool degenerate = false;              // all variances equal; ranks fall back to input order
};

// rank regions by temporal variance of one feature over a time range
inline VarianceBuckets variance_buckets(const SpatioTemporalTensor& t,
                                        const std::vector<int>& region_ids, int feature,
                                        const TimeRange& range) {
    if (region_ids.size() < 4) throw DataError("variance_buckets: need at least 4 regions");
    VarianceBuckets out;
    out.region_ids = region_ids;
    const int begin = range.begin_step, end = std::min(range.end_step, t.T());
    if (end - begin < 2) throw DataError("variance_buckets: time range too short");
    for (int rid : region_ids) {
        double mean = 0;
        for (int ts = begin; ts < end; ++ts) mean += t.at(rid, ts, feature);
        mean /= double(end - begin);
        double var = 0;
        for (int ts = begin; ts < end; ++ts) {
            const double d = t.at(rid, ts, feature) - mean;
            var += d * d;
        }
        out.variance.push_back(var / double(end - begin));
    }
    const size_t n = region_ids.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t(0));
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return out.variance[a] < out.variance[b]; });
    out.degenerate =
        *std::max_element(out.variance.begin(), out.variance.end()) ==
        *std::min_element(out.variance.begin(), out.variance.end());
    out.normalized_rank.resize(n);
    out.bucket.resize(n);
    for (size_t pos = 0; pos < n; ++pos) {
        const double q = double(pos + 1) / double(n);
        out.normalized_rank[order[pos]] = q;
        int b = q <= 0.25 ? 0 : q <= 0.5 ? 1 : q <= 0.75 ? 2 : 3;
        out.bucket[order[pos]] = b;
    }
    return out;
}

}  // namespace stit
