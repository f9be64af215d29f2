#pragma once

// Trip-record ingestion: CSV rows with pickup/dropoff coordinates are
// folded into per-cell inflow/outflow counts on a lat/lon grid.
// Row-major cell ids from the south-west corner, half-open cell edges.

#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "stit/st_data.hpp"

namespace stit {

struct GridConfig {
    double lat_min = 0, lat_max = 0, lon_min = 0, lon_max = 0;
    double cell_km = 1.0;
    int interval_minutes = 30;

    static GridConfig from_json(const nlohmann::json& j) {
        GridConfig g;
        g.lat_min = j.at("lat_min").get<double>();
        g.lat_max = j.at("lat_max").get<double>();
        g.lon_min = j.at("lon_min").get<double>();
        g.lon_max = j.at("lon_max").get<double>();
        g.cell_km = j.at("cell_km").get<double>();
        g.interval_minutes = j.at("interval_minutes").get<int>();
        return g;
    }
};

struct TripRecord {
    int64_t timestamp = 0;
    double pickup_lat = 0, pickup_lon = 0;
    double dropoff_lat = 0, dropoff_lon = 0;
};

struct IngestStats {
    size_t rows = 0;
    size_t skipped_out_of_bbox = 0;
    size_t skipped_out_of_time = 0;
};

class Grid {
public:
    Grid(const GridConfig& cfg) : cfg_(cfg) {
        if (!(cfg.lat_max > cfg.lat_min) || !(cfg.lon_max > cfg.lon_min))
            throw DataError("grid: degenerate bounding box");
        if (!(cfg.cell_km > 0)) throw DataError("grid: cell size must be positive");
        const double mid_lat = 0.5 * (cfg.lat_min + cfg.lat_max);
        dlat_ = cfg.cell_km / 111.32;
        dlon_ = cfg.cell_km / (111.32 * std::cos(mid_lat * 3.14159265358979 / 180.0));
        rows_ = int(std::ceil((cfg.lat_max - cfg.lat_min) / dlat_));
        cols_ = int(std::ceil((cfg.lon_max - cfg.lon_min) / dlon_));
        if (rows_ < 1 || cols_ < 1) throw DataError("grid: zero cells");
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    int cells() const { return rows_ * cols_; }

    // nullopt when outside the bbox; cells are half-open except the top edge
    std::optional<int> cell_of(double lat, double lon) const {
        if (lat < cfg_.lat_min || lat >= cfg_.lat_max || lon < cfg_.lon_min || lon >= cfg_.lon_max)
            return std::nullopt;
        int r = std::min(rows_ - 1, int((lat - cfg_.lat_min) / dlat_));
        int c = std::min(cols_ - 1, int((lon - cfg_.lon_min) / dlon_));
        return r * cols_ + c;
    }

    RegionMeta region_meta(int cell, const std::string& city) const {
        RegionMeta m;
        m.region_id = cell;
        m.city = city;
        m.cell_row = cell / cols_;
        m.cell_col = cell % cols_;
        return m;
    }

private:
    GridConfig cfg_;
    double dlat_ = 0, dlon_ = 0;
    int rows_ = 0, cols_ = 0;
};

namespace detail {

inline double parse_double_field(const std::string& field, size_t line_no, const char* name) {
    double v = 0;
    auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
    if (ec != std::errc{} || ptr != field.data() + field.size())
        throw DataError("trip CSV line " + std::to_string(line_no) + ": bad " + name + " '" +
                        field + "'");
    return v;
}

}  // namespace detail

// expects header: timestamp,pickup_lat,pickup_lon,dropoff_lat,dropoff_lon
inline std::vector<TripRecord> parse_trip_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw DataError("trip CSV: empty file");
    if (line.size() && line.back() == '\r') line.pop_back();
    if (line != "timestamp,pickup_lat,pickup_lon,dropoff_lat,dropoff_lon")
        throw DataError("trip CSV line 1: unexpected header '" + line + "'");
    std::vector<TripRecord> out;
    size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.size() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, ',')) fields.push_back(f);
        if (fields.size() != 5)
            throw DataError("trip CSV line " + std::to_string(line_no) + ": expected 5 fields, got " +
                            std::to_string(fields.size()));
        TripRecord r;
        try {
            r.timestamp = parse_iso8601(fields[0]);
        } catch (const std::exception& e) {
            throw DataError("trip CSV line " + std::to_string(line_no) + ": " + e.what());
        }
        r.pickup_lat = detail::parse_double_field(fields[1], line_no, "pickup_lat");
        r.pickup_lon = detail::parse_double_field(fields[2], line_no, "pickup_lon");
        r.dropoff_lat = detail::parse_double_field(fields[3], line_no, "dropoff_lat");
        r.dropoff_lon = detail::parse_double_field(fields[4], line_no, "dropoff_lon");
        out.push_back(r);
    }
    return out;
}

// feature 0 = inflow (dropoffs per cell per interval), feature 1 = outflow
// (pickups); out-of-bbox/time ends are counted and skipped, not errors.
inline SpatioTemporalTensor ingest_trips(const std::vector<TripRecord>& records,
                                         const GridConfig& grid_cfg, const TimeMeta& time,
                                         IngestStats* stats = nullptr,
                                         const std::string& city = "", const std::string& subject = "taxi") {
    Grid grid(grid_cfg);
    if (time.steps < 1) throw DataError("ingest: time metadata has no steps");
    SpatioTemporalTensor t;
    t.name = "ingested";
    t.subject = subject;
    t.feature_names = {"inflow", "outflow"};
    t.time = time;
    t.time.interval_minutes = grid_cfg.interval_minutes;
    for (int c = 0; c < grid.cells(); ++c) t.regions.push_back(grid.region_meta(c, city));
    t.values.assign(size_t(grid.cells()) * time.steps * 2, 0.0f);

    IngestStats local;
    const int64_t interval_s = int64_t(grid_cfg.interval_minutes) * 60;
    for (const auto& r : records) {
        ++local.rows;
        const int64_t dt = r.timestamp - time.start_epoch_s;
        if (dt < 0 || dt >= interval_s * time.steps) {
            ++local.skipped_out_of_time;
            continue;
        }
        const int step = int(dt / interval_s);
        bool any_in_bbox = false;
        if (auto cell = grid.cell_of(r.dropoff_lat, r.dropoff_lon)) {
            t.at(*cell, step, 0) += 1.0f;  // inflow
            any_in_bbox = true;
        }
        if (auto cell = grid.cell_of(r.pickup_lat, r.pickup_lon)) {
            t.at(*cell, step, 1) += 1.0f;  // outflow
            any_in_bbox = true;
        }
        if (!any_in_bbox) ++local.skipped_out_of_bbox;
    }
    if (stats) *stats = local;
    return t;
}

// optional static sidecar: {"<region_id>": {"borough": "...", "poi_categories": [...]}}
inline void apply_poi_sidecar(SpatioTemporalTensor& t, const nlohmann::json& sidecar) {
    for (auto it = sidecar.begin(); it != sidecar.end(); ++it) {
        int rid = std::stoi(it.key());
        if (rid < 0 || rid >= t.R()) throw DataError("poi sidecar: unknown region id " + it.key());
        auto& m = t.regions[size_t(rid)];
        if (it.value().contains("borough")) m.borough = it.value()["borough"].get<std::string>();
        if (it.value().contains("poi_categories"))
            m.poi_categories = it.value()["poi_categories"].get<std::vector<std::string>>();
    }
}

}  // namespace stit
