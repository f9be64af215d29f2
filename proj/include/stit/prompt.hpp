#pragma once

// Renders prompt instructions and answer frames for windowed samples.
// The wording is a fixed canonical template; history and prediction
// values appear as bracketed integer lists, and the special-token run
// <ST_start><ST_HIS>...<ST_HIS><ST_end> carries one <ST_HIS> per feature.

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "stit/st_data.hpp"

namespace stit {

inline constexpr const char* kStStart = "<ST_start>";
inline constexpr const char* kStHis = "<ST_HIS>";
inline constexpr const char* kStEnd = "<ST_end>";
inline constexpr const char* kStPre = "<ST_PRE>";

enum class TaskKind { regression, classification };
enum class TargetMode { token_regression, text_numbers };

struct InstructionRecord {
    std::string prompt_text;
    std::vector<int> st_his_positions;  // token indices in the prompt
    std::string target_text;
    std::vector<int> st_pre_positions;  // token indices in prompt+target
    std::vector<float> ground_truth;    // [P, F] row-major
    TaskKind task_kind = TaskKind::regression;
    int region_id = 0;
    int window_start_step = 0;
    int P = 0;
    int F = 0;
    std::string dataset;
};

struct PromptOptions {
    bool include_context = true;  // false = the -STC ablation: no time/region sentences
    TargetMode target_mode = TargetMode::token_regression;
};

namespace detail {

inline std::string int_list(const std::vector<float>& vals, size_t offset, size_t stride,
                            size_t count) {
    std::string out = "[";
    for (size_t i = 0; i < count; ++i) {
        if (i) out += " ";
        out += std::to_string(llround(double(vals[offset + i * stride])));
    }
    return out + "]";
}

inline std::string join_names(const std::vector<std::string>& names) {
    std::string out;
    for (size_t i = 0; i < names.size(); ++i) {
        if (i > 0) out += (i + 1 == names.size()) ? " and " : ", ";
        out += names[i];
    }
    return out;
}

inline std::string ordinal_word(int i) {
    static const char* words[] = {"first", "second", "third",   "fourth", "fifth",    "sixth",
                                  "seventh", "eighth", "ninth", "tenth",  "eleventh", "twelfth"};
    if (i >= 1 && i <= 12) return words[i - 1];
    return std::to_string(i) + "-th";
}

inline std::string interval_phrase(int interval_minutes) {
    if (interval_minutes % 1440 == 0) {
        int days = interval_minutes / 1440;
        return std::to_string(days) + "-day intervals";
    }
    return std::to_string(interval_minutes) + "-minute intervals";
}

inline std::string time_span(int64_t from_s, int64_t to_s, int interval_minutes) {
    return "'" + format_prompt_time(from_s) + " to " + format_prompt_time(to_s) +
           ", with data points recorded at " + interval_phrase(interval_minutes) + "'";
}

}  // namespace detail

// prompt side of the instruction, following the canonical template
inline InstructionRecord build_instruction(const WindowSample& sample, const RegionMeta& region,
                                           const TimeMeta& time,
                                           const std::vector<std::string>& feature_names,
                                           const std::string& subject,
                                           const PromptOptions& opts = {}) {
    const int F = sample.F;
    if (int(feature_names.size()) != F)
        throw DataError("build_instruction: " + std::to_string(feature_names.size()) +
                        " feature names for F=" + std::to_string(F));
    if (sample.history.size() != size_t(sample.H) * F || sample.target.size() != size_t(sample.P) * F)
        throw DataError("build_instruction: window arrays disagree with H/P/F");

    InstructionRecord rec;
    rec.region_id = sample.region_id;
    rec.window_start_step = sample.window_start_step;
    rec.P = sample.P;
    rec.F = F;
    rec.ground_truth = sample.target;

    const std::string features_joined = detail::join_names(feature_names);
    std::string p;
    p += "Given the historical data for " + subject + " flow over " + std::to_string(sample.H) +
         " time steps in a specific region of " + region.city + ", ";
    for (int f = 0; f < F; ++f) {
        if (f > 0) p += ", and ";
        p += "the recorded " + subject + " " + feature_names[size_t(f)] + "s are " +
             detail::int_list(sample.history, size_t(f), size_t(F), size_t(sample.H));
    }
    p += ". ";

    const int64_t hist_from = time.step_time(sample.window_start_step);
    const int64_t hist_to = time.step_time(sample.window_start_step + sample.H - 1);
    const int64_t pred_from = time.step_time(sample.window_start_step + sample.H);
    const int64_t pred_to = time.step_time(sample.window_start_step + sample.H + sample.P - 1);

    if (opts.include_context) {
        p += "The recording time of the historical data is " +
             detail::time_span(hist_from, hist_to, time.interval_minutes) + ". ";
        if (!region.borough.empty() && !region.poi_categories.empty()) {
            p += "Here is the region information: This region is located within the " +
                 region.borough +
                 " borough district and encompasses various POIs within a one-kilometer radius, "
                 "covering ";
            for (size_t i = 0; i < region.poi_categories.size(); ++i) {
                if (i) p += ", ";
                p += region.poi_categories[i];
            }
            p += " categories. ";
        } else {
            p += "No description is available for this region. ";
        }
    }

    p += "We now aim to predict the " + subject + " " + features_joined + " for the next " +
         std::to_string(sample.P) + " time steps";
    if (opts.include_context)
        p += " during the time period of " +
             detail::time_span(pred_from, pred_to, time.interval_minutes);
    p += ". ";

    p += "To improve prediction accuracy, a spatio-temporal model is utilized to encode the "
         "historical " +
         subject + " data as tokens " + kStStart;
    for (int f = 0; f < F; ++f) p += kStHis;
    p += kStEnd;
    if (F == 1) {
        p += ", where the token corresponds to the representation of " + subject + " " +
             feature_names[0];
    } else {
        p += ", where ";
        std::vector<std::string> ords;
        for (int f = 1; f <= F; ++f) ords.push_back("the " + detail::ordinal_word(f));
        p += detail::join_names(ords) + " tokens correspond to the representations of " + subject +
             " " + features_joined;
    }
    p += ". ";
    p += "Please conduct an analysis of the traffic patterns in this region, taking into account "
         "the provided time and regional information, and then generate the predictions (the "
         "predictive tokens for regression).";

    rec.prompt_text = std::move(p);
    return rec;
}

// answer side; token-regression carries <ST_PRE> placeholders, the T2P
// ablation spells the numeric lists out
inline void build_target(InstructionRecord& rec, const WindowSample& sample,
                         const std::vector<std::string>& feature_names, const std::string& subject,
                         TargetMode mode) {
    std::string t = "Based on the given information, the predictions of " + subject + " " +
                    detail::join_names(feature_names) + " in this region are ";
    std::vector<std::string> parts;
    for (int f = 0; f < sample.F; ++f) {
        if (mode == TargetMode::token_regression)
            parts.push_back(kStPre);
        else
            parts.push_back(
                detail::int_list(sample.target, size_t(f), size_t(sample.F), size_t(sample.P)));
    }
    t += detail::join_names(parts) + ".";
    rec.target_text = std::move(t);
}

// every bracketed integer list in a generated answer, in order (T2P parsing)
inline std::vector<std::vector<long>> parse_bracket_lists(const std::string& text) {
    std::vector<std::vector<long>> lists;
    size_t i = 0;
    while (i < text.size()) {
        if (text[i] != '[') {
            ++i;
            continue;
        }
        ++i;
        std::vector<long> vals;
        bool ok = true;
        while (i < text.size() && text[i] != ']') {
            while (i < text.size() && text[i] == ' ') ++i;
            if (i < text.size() && text[i] == ']') break;
            bool neg = false;
            if (i < text.size() && text[i] == '-') {
                neg = true;
                ++i;
            }
            if (i >= text.size() || text[i] < '0' || text[i] > '9') {
                ok = false;
                break;
            }
            long v = 0;
            while (i < text.size() && text[i] >= '0' && text[i] <= '9') {
                v = v * 10 + (text[i] - '0');
                ++i;
            }
            vals.push_back(neg ? -v : v);
        }
        if (ok && i < text.size() && text[i] == ']') {
            lists.push_back(std::move(vals));
            ++i;
        }
    }
    return lists;
}

// --------------------------------------------------------------------
// corpus file (.stjsonl)
// --------------------------------------------------------------------

inline nlohmann::json record_to_json(const InstructionRecord& r) {
    return {{"prompt_text", r.prompt_text},
            {"st_his_positions", r.st_his_positions},
            {"target_text", r.target_text},
            {"st_pre_positions", r.st_pre_positions},
            {"ground_truth", r.ground_truth},
            {"task_kind", r.task_kind == TaskKind::classification ? "classification" : "regression"},
            {"region_id", r.region_id},
            {"window_start_step", r.window_start_step},
            {"p", r.P},
            {"f", r.F},
            {"dataset", r.dataset}};
}

inline InstructionRecord record_from_json(const nlohmann::json& j) {
    InstructionRecord r;
    r.prompt_text = j.at("prompt_text").get<std::string>();
    r.st_his_positions = j.at("st_his_positions").get<std::vector<int>>();
    r.target_text = j.at("target_text").get<std::string>();
    r.st_pre_positions = j.at("st_pre_positions").get<std::vector<int>>();
    r.ground_truth = j.at("ground_truth").get<std::vector<float>>();
    r.task_kind = j.at("task_kind").get<std::string>() == "classification"
                      ? TaskKind::classification
                      : TaskKind::regression;
    r.region_id = j.at("region_id").get<int>();
    r.window_start_step = j.at("window_start_step").get<int>();
    r.P = j.at("p").get<int>();
    r.F = j.at("f").get<int>();
    r.dataset = j.value("dataset", "");
    return r;
}

inline void save_stjsonl(const std::vector<InstructionRecord>& records, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    for (const auto& r : records) out << record_to_json(r).dump() << "\n";
}

inline std::vector<InstructionRecord> load_stjsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::vector<InstructionRecord> out;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            out.push_back(record_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw DataError("'" + path + "' line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace stit
