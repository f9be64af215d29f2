#pragma once

// Seeded synthetic corpus generator: daily/weekly sinusoidal count
// patterns with per-region phases, optional rare-event (crime-like)
// sparsification, and fictional region metadata.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "stit/rng.hpp"
#include "stit/st_data.hpp"

namespace stit {

struct SynthConfig {
    std::string name = "synthetic";
    std::string subject = "taxi";
    std::string city = "Rivergate City";
    std::vector<std::string> feature_names = {"inflow", "outflow"};
    uint64_t seed = 1;
    int regions = 40;
    int days = 14;
    int interval_minutes = 30;
    double base_rate = 20.0;
    double daily_amplitude = 10.0;
    double weekly_amplitude = 0.0;
    double phase_spread = 1.0;  // per-region phase offsets, as a fraction of 2*pi
    double noise_scale = 1.0;
    double sparsity = 0.0;  // > 0: rare-event binary-heavy data with this positive-rate scale
};

namespace detail {

inline const std::vector<std::string>& borough_pool() {
    static const std::vector<std::string> pool = {"Northside", "Harborview", "Old Mill",
                                                  "Eastgate",  "Southbank",  "Westfield"};
    return pool;
}

inline const std::vector<std::string>& poi_pool() {
    static const std::vector<std::string> pool = {
        "Education Facility", "Cultural Facility",      "Commercial",
        "Transportation Facility", "Residential",       "Recreational Facility",
        "Health Services",    "Public Safety",          "Religious Institution",
        "Water",              "Miscellaneous",          "Social Services"};
    return pool;
}

}  // namespace detail

inline SpatioTemporalTensor synth_generate(const SynthConfig& cfg) {
    if (cfg.regions < 1 || cfg.days < 1 || cfg.interval_minutes < 1)
        throw DataError("synth: regions, days and interval must be positive");
    if (cfg.base_rate < 0 || cfg.daily_amplitude < 0 || cfg.weekly_amplitude < 0 ||
        cfg.noise_scale < 0 || cfg.sparsity < 0)
        throw DataError("synth: scales must be non-negative");

    const int steps_per_day = (24 * 60) / cfg.interval_minutes;
    const int T = cfg.days * steps_per_day;
    const int F = int(cfg.feature_names.size());
    const double two_pi = 6.283185307179586;

    SpatioTemporalTensor t;
    t.name = cfg.name;
    t.subject = cfg.subject;
    t.feature_names = cfg.feature_names;
    t.time.start_epoch_s = parse_iso8601("2024-01-01T00:00:00Z");
    t.time.interval_minutes = cfg.interval_minutes;
    t.time.steps = T;

    Rng meta_rng = Rng(cfg.seed).fork("region-meta");
    const int grid_cols = std::max(1, int(std::ceil(std::sqrt(double(cfg.regions)))));
    for (int r = 0; r < cfg.regions; ++r) {
        RegionMeta m;
        m.region_id = r;
        m.city = cfg.city;
        m.borough = detail::borough_pool()[size_t(meta_rng.below(detail::borough_pool().size()))];
        m.cell_row = r / grid_cols;
        m.cell_col = r % grid_cols;
        size_t n_pois = 2 + meta_rng.below(3);
        std::vector<std::string> pois = detail::poi_pool();
        meta_rng.shuffle(pois);
        pois.resize(n_pois);
        std::sort(pois.begin(), pois.end());
        m.poi_categories = std::move(pois);
        t.regions.push_back(std::move(m));
    }

    t.values.resize(size_t(cfg.regions) * T * F);
    Rng noise_rng = Rng(cfg.seed).fork("values");
    Rng phase_rng = Rng(cfg.seed).fork("phases");
    std::vector<double> phase(size_t(cfg.regions) * F);
    std::vector<double> weekly_phase(size_t(cfg.regions) * F);
    for (auto& p : phase) p = two_pi * cfg.phase_spread * phase_rng.uniform();
    for (auto& p : weekly_phase) p = two_pi * phase_rng.uniform();

    for (int r = 0; r < cfg.regions; ++r)
        for (int ts = 0; ts < T; ++ts)
            for (int f = 0; f < F; ++f) {
                const double ph = phase[size_t(r) * F + f];
                double v = cfg.base_rate +
                           cfg.daily_amplitude * std::sin(two_pi * ts / steps_per_day + ph) +
                           cfg.weekly_amplitude *
                               std::sin(two_pi * ts / (7.0 * steps_per_day) +
                                        weekly_phase[size_t(r) * F + f]);
                double count;
                if (cfg.sparsity > 0.0) {
                    // thin the intensity into a Bernoulli event stream
                    double p = std::clamp(cfg.sparsity * std::max(0.0, v) /
                                              std::max(1.0, cfg.base_rate + cfg.daily_amplitude),
                                          0.0, 1.0);
                    count = noise_rng.uniform() < p ? 1.0 : 0.0;
                } else {
                    v += noise_rng.normal(0.0, cfg.noise_scale);
                    count = std::max(0.0, std::round(v));
                }
                t.at(r, ts, f) = float(count);
            }
    return t;
}

}  // namespace stit
