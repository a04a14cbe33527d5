#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "airdist/errors.h"
#include "airdist/geojson.h"
#include "airdist/geometry.h"
#include "airdist/ingest.h"
#include "airdist/rng.h"
#include "airdist/sde.h"

namespace airdist::synth {

enum class BaseFamily { kUniform, kBeta };  // Beta(2,5) for a skewed option

// Ground truth Y(s) = loc(s) + scale(s) * B with B on [0,1]. Location varies
// smoothly along x, scale along y, both through a logistic ramp, so every
// probability and quantile has a closed form.
struct SyntheticScenario {
    BaseFamily family = BaseFamily::kUniform;
    std::size_t n_stations = 50;
    std::size_t samples_per_station = 400;
    std::uint64_t seed = 1;

    double loc_base = 0.0;
    double loc_amp = 0.0;
    double x_center = 0.0;
    double x_width = 1.0;

    double scale_base = 100.0;
    double scale_amp = 0.0;
    double y_center = 0.0;
    double y_width = 1.0;
};

namespace detail_synth {

inline double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline double beta25_cdf(double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    static const double binom[7] = {1, 6, 15, 20, 15, 6, 1};
    double s = 0.0;
    for (int j = 2; j <= 6; ++j)
        s += binom[j] * std::pow(x, j) * std::pow(1.0 - x, 6 - j);
    return s;
}

inline double beta25_quantile(double a) {
    double lo = 0.0, hi = 1.0;
    while (hi - lo > 1e-12) {
        const double mid = 0.5 * (lo + hi);
        if (beta25_cdf(mid) < a)
            lo = mid;
        else
            hi = mid;
    }
    return 0.5 * (lo + hi);
}

}  // namespace detail_synth

inline void validate(const SyntheticScenario& sc) {
    if (sc.n_stations == 0) throw ValidationError("scenario needs at least one station");
    if (sc.samples_per_station == 0) throw ValidationError("scenario needs samples per station");
    if (!(sc.x_width > 0.0) || !(sc.y_width > 0.0))
        throw ValidationError("logistic widths must be positive");
    if (!(sc.scale_base > 0.0) || !(sc.scale_base + sc.scale_amp > 0.0))
        throw ValidationError("the scale field must stay positive");
}

inline double true_loc(const SyntheticScenario& sc, const Vec2& s) {
    return sc.loc_base + sc.loc_amp * detail_synth::logistic((s.x - sc.x_center) / sc.x_width);
}

inline double true_scale(const SyntheticScenario& sc, const Vec2& s) {
    return sc.scale_base + sc.scale_amp * detail_synth::logistic((s.y - sc.y_center) / sc.y_width);
}

inline double true_cdf(const SyntheticScenario& sc, const Vec2& s, double y) {
    const double u = (y - true_loc(sc, s)) / true_scale(sc, s);
    if (u <= 0.0) return 0.0;
    if (u >= 1.0) return 1.0;
    return sc.family == BaseFamily::kUniform ? u : detail_synth::beta25_cdf(u);
}

inline double true_exceedance(const SyntheticScenario& sc, const Vec2& s, double threshold) {
    return 1.0 - true_cdf(sc, s, threshold);
}

inline double true_quantile(const SyntheticScenario& sc, const Vec2& s, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("quantile level outside [0,1]");
    const double u =
        sc.family == BaseFamily::kUniform ? alpha : detail_synth::beta25_quantile(alpha);
    return true_loc(sc, s) + true_scale(sc, s) * u;
}

struct SyntheticData {
    std::vector<std::string> station_ids;
    std::vector<Vec2> locations;
    std::vector<std::vector<double>> series;  // one vector per station
};

// Stations uniform over the domain, series drawn from the local truth. Every
// draw derives from the scenario seed, so regeneration is exact.
inline SyntheticData generate(const SyntheticScenario& sc, const Polygon& domain) {
    validate(sc);
    if (domain.outer.size() < 3) throw ValidationError("domain polygon needs at least 3 vertices");
    const auto bb = domain.bbox();
    SyntheticData out;
    Rng place(derive_seed(sc.seed, "station-locations"));
    for (std::size_t i = 0; i < sc.n_stations; ++i) {
        Vec2 p;
        int tries = 0;
        do {
            p = {place.uniform(bb.xmin, bb.xmax), place.uniform(bb.ymin, bb.ymax)};
            if (++tries > 100000)
                throw ValidationError("could not place stations inside the domain polygon");
        } while (!point_in_polygon(p, domain));
        char id[16];
        std::snprintf(id, sizeof id, "st%04zu", i);
        out.station_ids.emplace_back(id);
        out.locations.push_back(p);

        Rng draw(derive_seed(sc.seed, std::string("station-series-") + id));
        const double loc = true_loc(sc, p);
        const double scale = true_scale(sc, p);
        std::vector<double> series(sc.samples_per_station);
        for (double& y : series) {
            const double b =
                sc.family == BaseFamily::kUniform ? draw.uniform() : draw.beta(2.0, 5.0);
            y = loc + scale * b;
        }
        out.series.push_back(std::move(series));
    }
    return out;
}

// Daily rows starting from the given date, one sensor per station.
inline void write_measurements_csv(std::ostream& os, const SyntheticData& data,
                                   ingest::Date start = {2018, 1, 1}) {
    os << "station_id,sensor_id,equipment,timestamp,value\n";
    os.precision(17);
    using namespace std::chrono;
    for (std::size_t i = 0; i < data.station_ids.size(); ++i) {
        const sys_days day0 = year_month_day{year{start.y}, month{static_cast<unsigned>(start.m)},
                                             day{static_cast<unsigned>(start.d)}};
        for (std::size_t k = 0; k < data.series[i].size(); ++k) {
            const year_month_day ymd{day0 + days{static_cast<long>(k)}};
            const ingest::Date d{static_cast<int>(ymd.year()),
                                 static_cast<int>(static_cast<unsigned>(ymd.month())),
                                 static_cast<int>(static_cast<unsigned>(ymd.day()))};
            os << data.station_ids[i] << "," << data.station_ids[i] << "-s1,beta-radiation,"
               << d.str() << "," << data.series[i][k] << "\n";
        }
    }
}

inline void write_registry_csv(std::ostream& os, const SyntheticData& data) {
    os << "station_id,x,y\n";
    os.precision(17);
    for (std::size_t i = 0; i < data.station_ids.size(); ++i)
        os << data.station_ids[i] << "," << data.locations[i].x << "," << data.locations[i].y
           << "\n";
}

struct TruthRow {
    std::string municipality_id;
    double p = 0.0;
    double q50 = 0.0;
    double q95 = 0.0;
};

// Truth averaged over an in-polygon point grid, matching how predictions are
// aggregated; a polygon too small for the grid falls back to its centroid.
inline std::vector<TruthRow> truth_table(const SyntheticScenario& sc,
                                         const std::vector<RegionFeature>& municipalities,
                                         double threshold, double spacing) {
    validate(sc);
    if (!(spacing > 0.0)) throw ValidationError("grid spacing must be positive");
    std::vector<TruthRow> out;
    for (const RegionFeature& rf : municipalities) {
        std::vector<Vec2> pts;
        for (const Polygon& poly : rf.parts) {
            const auto bb = poly.bbox();
            for (double y = bb.ymin + 0.5 * spacing; y < bb.ymax; y += spacing)
                for (double x = bb.xmin + 0.5 * spacing; x < bb.xmax; x += spacing)
                    if (point_in_polygon({x, y}, poly)) pts.push_back({x, y});
        }
        if (pts.empty()) pts.push_back(polygon_centroid(rf.parts.front()));
        TruthRow row;
        row.municipality_id = rf.id;
        for (const Vec2& p : pts) {
            row.p += true_exceedance(sc, p, threshold);
            row.q50 += true_quantile(sc, p, 0.5);
            row.q95 += true_quantile(sc, p, 0.95);
        }
        const double n = static_cast<double>(pts.size());
        row.p /= n;
        row.q50 /= n;
        row.q95 /= n;
        out.push_back(std::move(row));
    }
    return out;
}

inline void write_truth_csv(std::ostream& os, const std::vector<TruthRow>& rows) {
    os << "municipality_id,p_true,q50_true,q95_true\n";
    os.precision(17);
    for (const TruthRow& r : rows)
        os << r.municipality_id << "," << r.p << "," << r.q50 << "," << r.q95 << "\n";
}

}  // namespace airdist::synth
