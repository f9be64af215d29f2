#pragma once

// The R x T x F spatio-temporal value grid with region/time metadata,
// window extraction, seeded region splits, and the .stt file format
// (single-line JSON header + '\n' + little-endian float32 payload).

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "stit/rng.hpp"
#include "stit/timeutil.hpp"

namespace stit {

class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

struct RegionMeta {
    int region_id = 0;
    std::string city;
    std::string borough;
    int cell_row = 0;
    int cell_col = 0;
    std::vector<std::string> poi_categories;
};

struct TimeMeta {
    int64_t start_epoch_s = 0;  // UTC
    int interval_minutes = 30;
    int steps = 0;

    int64_t step_time(int t) const { return start_epoch_s + int64_t(t) * interval_minutes * 60; }
};

struct SpatioTemporalTensor {
    std::string name;     // dataset label, e.g. "dense-a"
    std::string subject;  // flow noun used by prompts, e.g. "bike"
    std::vector<float> values;  // [R, T, F] row-major
    std::vector<RegionMeta> regions;
    TimeMeta time;
    std::vector<std::string> feature_names;

    int R() const { return int(regions.size()); }
    int T() const { return time.steps; }
    int F() const { return int(feature_names.size()); }

    float& at(int r, int t, int f) {
        return values[(size_t(r) * T() + t) * F() + f];
    }
    float at(int r, int t, int f) const {
        return values[(size_t(r) * T() + t) * F() + f];
    }

    void validate() const {
        if (values.size() != size_t(R()) * size_t(T()) * size_t(F()))
            throw DataError("tensor: " + std::to_string(values.size()) + " values for R=" +
                            std::to_string(R()) + " T=" + std::to_string(T()) +
                            " F=" + std::to_string(F()));
    }
};

struct WindowSample {
    int region_id = 0;
    int window_start_step = 0;
    int H = 0;
    int P = 0;
    int F = 0;
    std::vector<float> history;  // [H, F]
    std::vector<float> target;   // [P, F]

    float hist(int t, int f) const { return history[size_t(t) * F + f]; }
    float tgt(int t, int f) const { return target[size_t(t) * F + f]; }
};

struct TimeRange {
    int begin_step = 0;  // inclusive
    int end_step = 0;    // exclusive
};

struct DatasetSplit {
    std::vector<int> train_region_ids;
    std::vector<int> zero_shot_region_ids;
    TimeRange train_time;
    TimeRange test_time;
};

// --------------------------------------------------------------------
// windowing
// --------------------------------------------------------------------

// windows with history [s, s+H) and target [s+H, s+H+P), striding within
// [range.begin_step, range.end_step)
inline std::vector<WindowSample> make_windows(const SpatioTemporalTensor& t,
                                              const std::vector<int>& region_ids, int H, int P,
                                              int stride, const TimeRange& range) {
    if (H < 1 || P < 1 || stride < 1) throw DataError("make_windows: H, P, stride must be >= 1");
    const int begin = range.begin_step;
    const int end = std::min(range.end_step, t.T());
    if (end - begin < H + P)
        throw DataError("make_windows: range of " + std::to_string(end - begin) +
                        " steps cannot fit H+P=" + std::to_string(H + P));
    const int F = t.F();
    std::vector<WindowSample> out;
    for (int rid : region_ids) {
        if (rid < 0 || rid >= t.R()) throw DataError("make_windows: unknown region id");
        for (int s = begin; s + H + P <= end; s += stride) {
            WindowSample w;
            w.region_id = rid;
            w.window_start_step = s;
            w.H = H;
            w.P = P;
            w.F = F;
            w.history.resize(size_t(H) * F);
            w.target.resize(size_t(P) * F);
            for (int i = 0; i < H; ++i)
                for (int f = 0; f < F; ++f) w.history[size_t(i) * F + f] = t.at(rid, s + i, f);
            for (int i = 0; i < P; ++i)
                for (int f = 0; f < F; ++f) w.target[size_t(i) * F + f] = t.at(rid, s + H + i, f);
            out.push_back(std::move(w));
        }
    }
    return out;
}

inline std::vector<WindowSample> make_windows(const SpatioTemporalTensor& t, int H, int P,
                                              int stride) {
    std::vector<int> all(t.R());
    for (int r = 0; r < t.R(); ++r) all[size_t(r)] = r;
    return make_windows(t, all, H, P, stride, TimeRange{0, t.T()});
}

// --------------------------------------------------------------------
// region splits
// --------------------------------------------------------------------

inline DatasetSplit split_regions(const SpatioTemporalTensor& t, uint64_t seed, int n_train,
                                  int n_zero_shot, TimeRange train_time, TimeRange test_time) {
    if (n_train < 0 || n_zero_shot < 0 || n_train + n_zero_shot > t.R())
        throw DataError("split_regions: want " + std::to_string(n_train) + "+" +
                        std::to_string(n_zero_shot) + " regions from " + std::to_string(t.R()));
    std::vector<int> ids(t.R());
    for (int r = 0; r < t.R(); ++r) ids[size_t(r)] = r;
    Rng rng(seed);
    rng.shuffle(ids);
    DatasetSplit s;
    s.train_region_ids.assign(ids.begin(), ids.begin() + n_train);
    s.zero_shot_region_ids.assign(ids.begin() + n_train, ids.begin() + n_train + n_zero_shot);
    s.train_time = train_time;
    s.test_time = test_time;
    return s;
}

// --------------------------------------------------------------------
// JSON <-> metadata
// --------------------------------------------------------------------

inline nlohmann::json region_to_json(const RegionMeta& r) {
    return {{"region_id", r.region_id},
            {"city", r.city},
            {"borough", r.borough},
            {"cell", nlohmann::json::array({r.cell_row, r.cell_col})},
            {"poi_categories", r.poi_categories}};
}

inline RegionMeta region_from_json(const nlohmann::json& j) {
    RegionMeta r;
    r.region_id = j.at("region_id").get<int>();
    r.city = j.at("city").get<std::string>();
    r.borough = j.at("borough").get<std::string>();
    r.cell_row = j.at("cell").at(0).get<int>();
    r.cell_col = j.at("cell").at(1).get<int>();
    r.poi_categories = j.at("poi_categories").get<std::vector<std::string>>();
    return r;
}

inline nlohmann::json time_to_json(const TimeMeta& t) {
    return {{"start", format_iso8601(t.start_epoch_s)},
            {"interval_minutes", t.interval_minutes},
            {"steps", t.steps}};
}

inline TimeMeta time_from_json(const nlohmann::json& j) {
    TimeMeta t;
    t.start_epoch_s = parse_iso8601(j.at("start").get<std::string>());
    t.interval_minutes = j.at("interval_minutes").get<int>();
    t.steps = j.at("steps").get<int>();
    if (t.interval_minutes <= 0) throw DataError("time metadata: interval must be positive");
    return t;
}

inline nlohmann::json split_to_json(const DatasetSplit& s) {
    return {{"train_region_ids", s.train_region_ids},
            {"zero_shot_region_ids", s.zero_shot_region_ids},
            {"train_time", nlohmann::json::array({s.train_time.begin_step, s.train_time.end_step})},
            {"test_time", nlohmann::json::array({s.test_time.begin_step, s.test_time.end_step})}};
}

inline DatasetSplit split_from_json(const nlohmann::json& j) {
    DatasetSplit s;
    s.train_region_ids = j.at("train_region_ids").get<std::vector<int>>();
    s.zero_shot_region_ids = j.at("zero_shot_region_ids").get<std::vector<int>>();
    s.train_time = {j.at("train_time").at(0).get<int>(), j.at("train_time").at(1).get<int>()};
    s.test_time = {j.at("test_time").at(0).get<int>(), j.at("test_time").at(1).get<int>()};
    for (int a : s.train_region_ids)
        for (int b : s.zero_shot_region_ids)
            if (a == b) throw DataError("split: region " + std::to_string(a) +
                                        " is in both train and zero-shot sets");
    return s;
}

// --------------------------------------------------------------------
// .stt file io
// --------------------------------------------------------------------

inline void save_stt(const SpatioTemporalTensor& t, const std::string& path) {
    t.validate();
    nlohmann::json header = {{"shape", {t.R(), t.T(), t.F()}},
                             {"name", t.name},
                             {"subject", t.subject},
                             {"feature_names", t.feature_names},
                             {"regions", nlohmann::json::array()},
                             {"time", time_to_json(t.time)}};
    for (const auto& r : t.regions) header["regions"].push_back(region_to_json(r));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    out << header.dump() << "\n";
    static_assert(sizeof(float) == 4);
    out.write(reinterpret_cast<const char*>(t.values.data()),
              std::streamsize(t.values.size() * sizeof(float)));
    if (!out) throw DataError("short write to '" + path + "'");
}

inline SpatioTemporalTensor load_stt(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw DataError("'" + path + "': missing header line");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("'" + path + "': bad header: " + e.what());
    }
    SpatioTemporalTensor t;
    t.name = header.value("name", "");
    t.subject = header.value("subject", "");
    t.feature_names = header.at("feature_names").get<std::vector<std::string>>();
    t.time = time_from_json(header.at("time"));
    for (const auto& rj : header.at("regions")) t.regions.push_back(region_from_json(rj));
    const auto shape = header.at("shape");
    const int R = shape.at(0).get<int>(), T = shape.at(1).get<int>(), F = shape.at(2).get<int>();
    if (R != t.R() || T != t.time.steps || F != t.F())
        throw DataError("'" + path + "': header shape disagrees with metadata");
    t.values.resize(size_t(R) * T * F);
    in.read(reinterpret_cast<char*>(t.values.data()),
            std::streamsize(t.values.size() * sizeof(float)));
    if (size_t(in.gcount()) != t.values.size() * sizeof(float))
        throw DataError("'" + path + "': truncated payload");
    t.validate();
    return t;
}

}  // namespace stit
