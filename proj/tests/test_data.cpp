#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>

#include "stit/ingest.hpp"
#include "stit/st_data.hpp"
#include "stit/synth.hpp"

using namespace stit;

namespace {

SynthConfig small_cfg() {
    SynthConfig cfg;
    cfg.name = "unit";
    cfg.subject = "taxi";
    cfg.seed = 42;
    cfg.regions = 6;
    cfg.days = 3;
    cfg.interval_minutes = 30;
    cfg.base_rate = 20;
    cfg.daily_amplitude = 10;
    cfg.noise_scale = 1.0;
    return cfg;
}

}  // namespace

TEST_CASE("synth is deterministic per seed") {
    auto a = synth_generate(small_cfg());
    auto b = synth_generate(small_cfg());
    CHECK(a.values == b.values);
    auto cfg = small_cfg();
    cfg.seed = 43;
    auto c = synth_generate(cfg);
    CHECK(a.values != c.values);
}

TEST_CASE("synth with zero amplitudes and noise is constant at the base rate") {
    auto cfg = small_cfg();
    cfg.daily_amplitude = 0;
    cfg.weekly_amplitude = 0;
    cfg.noise_scale = 0;
    cfg.base_rate = 17;
    auto t = synth_generate(cfg);
    for (float v : t.values) CHECK(v == 17.0f);
}

TEST_CASE("daily pattern dominates the autocorrelation at lag 48") {
    auto cfg = small_cfg();
    cfg.days = 7;
    cfg.noise_scale = 1.0;
    auto t = synth_generate(cfg);
    const int T = t.T();
    auto series = [&](int ts) { return double(t.at(0, ts, 0)); };
    double mean = 0;
    for (int ts = 0; ts < T; ++ts) mean += series(ts);
    mean /= T;
    auto acf = [&](int lag) {
        double s = 0;
        for (int ts = 0; ts + lag < T; ++ts) s += (series(ts) - mean) * (series(ts + lag) - mean);
        return s / (T - lag);
    };
    const double day = acf(48);
    for (int lag = 1; lag < 48; ++lag) CHECK(day > acf(lag));
}

TEST_CASE("sparse mode produces binary-heavy rare events") {
    auto cfg = small_cfg();
    cfg.sparsity = 0.15;
    cfg.days = 7;
    auto t = synth_generate(cfg);
    size_t positives = 0;
    for (float v : t.values) {
        CHECK((v == 0.0f || v == 1.0f));
        positives += v > 0 ? 1 : 0;
    }
    CHECK(positives > 0);
    CHECK(positives < t.values.size() / 2);
}

TEST_CASE("window counts follow the stride formula") {
    auto cfg = small_cfg();
    cfg.days = 1;
    cfg.regions = 2;
    auto t = synth_generate(cfg);  // T = 48

    // T=24 window budget, H=P=12 -> exactly 1 window per region
    auto w1 = make_windows(t, {0, 1}, 12, 12, 1, {0, 24});
    CHECK(w1.size() == 2);

    // T=30, H=P=12, stride=1 -> 7 windows per region
    auto w7 = make_windows(t, {0}, 12, 12, 1, {0, 30});
    CHECK(w7.size() == 7);

    CHECK_THROWS_AS(make_windows(t, {0}, 12, 12, 1, {0, 23}), DataError);
}

TEST_CASE("windows tile the series exactly at stride H+P") {
    auto t = synth_generate(small_cfg());
    const int H = 12, P = 12;
    auto windows = make_windows(t, {3}, H, P, H + P, {0, t.T()});
    std::vector<float> rebuilt;
    for (const auto& w : windows) {
        rebuilt.insert(rebuilt.end(), w.history.begin(), w.history.end());
        rebuilt.insert(rebuilt.end(), w.target.begin(), w.target.end());
    }
    const size_t covered = windows.size() * size_t(H + P);
    for (size_t i = 0; i < covered; ++i)
        for (int f = 0; f < t.F(); ++f)
            CHECK(rebuilt[i * t.F() + f] == t.at(3, int(i), f));
}

TEST_CASE("history immediately precedes target") {
    auto t = synth_generate(small_cfg());
    auto w = make_windows(t, {1}, 12, 12, 5, {0, t.T()});
    for (const auto& s : w) {
        for (int f = 0; f < s.F; ++f) {
            CHECK(s.hist(0, f) == t.at(1, s.window_start_step, f));
            CHECK(s.tgt(0, f) == t.at(1, s.window_start_step + s.H, f));
        }
    }
}

TEST_CASE("region splits are seeded, disjoint, and reproducible") {
    auto t = synth_generate(small_cfg());
    auto s1 = split_regions(t, 7, 3, 2, {0, 100}, {100, 144});
    auto s2 = split_regions(t, 7, 3, 2, {0, 100}, {100, 144});
    CHECK(s1.train_region_ids == s2.train_region_ids);
    CHECK(s1.zero_shot_region_ids == s2.zero_shot_region_ids);
    for (int a : s1.train_region_ids)
        for (int b : s1.zero_shot_region_ids) CHECK(a != b);

    auto all = split_regions(t, 7, t.R(), 0, {0, 100}, {100, 144});
    CHECK(int(all.train_region_ids.size()) == t.R());
    CHECK(all.zero_shot_region_ids.empty());

    CHECK_THROWS_AS(split_regions(t, 7, 5, 5, {0, 100}, {100, 144}), DataError);
}

TEST_CASE("stt round-trip preserves everything") {
    auto t = synth_generate(small_cfg());
    const std::string path = "unit_roundtrip.stt";
    save_stt(t, path);
    auto u = load_stt(path);
    CHECK(u.values == t.values);
    CHECK(u.name == t.name);
    CHECK(u.subject == t.subject);
    CHECK(u.feature_names == t.feature_names);
    CHECK(u.time.start_epoch_s == t.time.start_epoch_s);
    CHECK(u.regions.size() == t.regions.size());
    CHECK(u.regions[2].borough == t.regions[2].borough);
    CHECK(u.regions[2].poi_categories == t.regions[2].poi_categories);
    std::remove(path.c_str());
}

// ---------------------------------------------------------------- ingest

namespace {

GridConfig two_by_two() {
    GridConfig g;
    g.lat_min = 40.0;
    g.lat_max = 40.054;  // ~2 rows of 3km
    g.lon_min = -74.0;
    g.lon_max = -73.93;  // ~2 cols
    g.cell_km = 3.0;
    g.interval_minutes = 30;
    return g;
}

}  // namespace

TEST_CASE("empty record stream yields an all-zero tensor") {
    TimeMeta time{parse_iso8601("2024-03-01T00:00:00Z"), 30, 4};
    auto t = ingest_trips({}, two_by_two(), time);
    CHECK(t.F() == 2);
    CHECK(t.T() == 4);
    for (float v : t.values) CHECK(v == 0.0f);
}

TEST_CASE("pickups land in the south-west cell as outflow") {
    TimeMeta time{parse_iso8601("2024-03-01T00:00:00Z"), 30, 4};
    std::vector<TripRecord> recs;
    for (int i = 0; i < 3; ++i) {
        TripRecord r;
        r.timestamp = time.start_epoch_s + 60 * i;  // interval 0
        r.pickup_lat = 40.001;
        r.pickup_lon = -73.999;         // cell (0,0)
        r.dropoff_lat = 0;              // outside bbox
        r.dropoff_lon = 0;
        recs.push_back(r);
    }
    IngestStats stats;
    auto t = ingest_trips(recs, two_by_two(), time, &stats);
    CHECK(t.at(0, 0, 1) == 3.0f);  // outflow
    CHECK(t.at(0, 0, 0) == 0.0f);  // inflow
    CHECK(stats.rows == 3);
}

TEST_CASE("mass conservation: outflow total equals in-bbox in-range pickups") {
    TimeMeta time{parse_iso8601("2024-03-01T00:00:00Z"), 30, 8};
    Rng rng(5);
    std::vector<TripRecord> recs;
    size_t expected_out = 0, expected_in = 0;
    auto g = two_by_two();
    for (int i = 0; i < 500; ++i) {
        TripRecord r;
        r.timestamp = time.start_epoch_s + int64_t(rng.below(10 * 1800)) - 1800;  // some out of range
        r.pickup_lat = rng.uniform(39.95, 40.10);
        r.pickup_lon = rng.uniform(-74.05, -73.90);
        r.dropoff_lat = rng.uniform(39.95, 40.10);
        r.dropoff_lon = rng.uniform(-74.05, -73.90);
        bool in_time = r.timestamp >= time.start_epoch_s &&
                       r.timestamp < time.start_epoch_s + int64_t(time.steps) * 1800;
        auto in_bbox = [&](double lat, double lon) {
            return lat >= g.lat_min && lat < g.lat_max && lon >= g.lon_min && lon < g.lon_max;
        };
        if (in_time && in_bbox(r.pickup_lat, r.pickup_lon)) ++expected_out;
        if (in_time && in_bbox(r.dropoff_lat, r.dropoff_lon)) ++expected_in;
        recs.push_back(r);
    }
    auto t = ingest_trips(recs, g, time);
    double outflow = 0, inflow = 0;
    for (int r = 0; r < t.R(); ++r)
        for (int ts = 0; ts < t.T(); ++ts) {
            inflow += t.at(r, ts, 0);
            outflow += t.at(r, ts, 1);
        }
    CHECK(outflow == double(expected_out));
    CHECK(inflow == double(expected_in));
}

TEST_CASE("trip CSV parsing reports the offending line") {
    std::stringstream ok(
        "timestamp,pickup_lat,pickup_lon,dropoff_lat,dropoff_lon\n"
        "2024-03-01T00:05:00Z,40.01,-73.99,40.02,-73.95\n");
    auto recs = parse_trip_csv(ok);
    REQUIRE(recs.size() == 1);
    CHECK(recs[0].pickup_lat == doctest::Approx(40.01));

    std::stringstream bad(
        "timestamp,pickup_lat,pickup_lon,dropoff_lat,dropoff_lon\n"
        "2024-03-01T00:05:00Z,40.01,-73.99,40.02,-73.95\n"
        "2024-03-01T00:05:00Z,not-a-number,-73.99,40.02,-73.95\n");
    CHECK_THROWS_WITH_AS(parse_trip_csv(bad), doctest::Contains("line 3"), DataError);

    std::stringstream short_row(
        "timestamp,pickup_lat,pickup_lon,dropoff_lat,dropoff_lon\n"
        "2024-03-01T00:05:00Z,40.01,-73.99\n");
    CHECK_THROWS_WITH_AS(parse_trip_csv(short_row), doctest::Contains("line 2"), DataError);
}

TEST_CASE("degenerate grids are rejected") {
    GridConfig g = two_by_two();
    g.lat_max = g.lat_min;
    CHECK_THROWS_AS(Grid{g}, DataError);
    GridConfig g2 = two_by_two();
    g2.cell_km = 0;
    CHECK_THROWS_AS(Grid{g2}, DataError);
}

TEST_CASE("a 3km NYC-style grid config lands near the expected region count") {
    GridConfig g;
    g.lat_min = 40.49;
    g.lat_max = 40.92;
    g.lon_min = -74.27;
    g.lon_max = -73.68;
    g.cell_km = 3.0;
    g.interval_minutes = 30;
    Grid grid(g);
    CHECK(grid.cells() >= 250);
    CHECK(grid.cells() <= 300);
}

TEST_CASE("half-open cell edges put boundary points in the next cell") {
    Grid grid(two_by_two());
    // the shared edge between cell rows belongs to the upper row
    double edge_lat = 40.0 + 3.0 / 111.32;
    auto cell = grid.cell_of(edge_lat, -73.999);
    REQUIRE(cell.has_value());
    CHECK(*cell / grid.cols() == 1);
}

TEST_CASE("poi sidecar attaches region descriptions") {
    TimeMeta time{parse_iso8601("2024-03-01T00:00:00Z"), 30, 2};
    auto t = ingest_trips({}, two_by_two(), time);
    nlohmann::json sidecar = {
        {"0", {{"borough", "Harborview"}, {"poi_categories", {"Commercial", "Residential"}}}}};
    apply_poi_sidecar(t, sidecar);
    CHECK(t.regions[0].borough == "Harborview");
    CHECK(t.regions[0].poi_categories.size() == 2);
    nlohmann::json bad = {{"99", {{"borough", "X"}}}};
    CHECK_THROWS_AS(apply_poi_sidecar(t, bad), DataError);
}
