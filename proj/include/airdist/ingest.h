#pragma once

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <functional>
#include <tuple>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "airdist/errors.h"
#include "airdist/geojson.h"
#include "airdist/geometry.h"
#include "airdist/mesh.h"

namespace airdist::ingest {

// ---------------------------------------------------------------------------
// Calendar dates
// ---------------------------------------------------------------------------

struct Date {
    int y = 0, m = 0, d = 0;

    bool ok() const {
        using namespace std::chrono;
        return year_month_day{year{y}, month{static_cast<unsigned>(m)},
                              day{static_cast<unsigned>(d)}}
            .ok();
    }
    int key() const { return y * 10000 + m * 100 + d; }
    bool operator<(const Date& o) const { return key() < o.key(); }
    bool operator==(const Date& o) const { return key() == o.key(); }
    bool operator<=(const Date& o) const { return key() <= o.key(); }

    std::string str() const {
        char buf[16];
        std::snprintf(buf, sizeof buf, "%04d-%02d-%02d", y, m, d);
        return buf;
    }
};

// ---------------------------------------------------------------------------
// Raw measurements
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& equipment_labels() {
    static const std::vector<std::string> labels = {"beta-radiation", "gravimetry", "OPC",
                                                    "nephelometry", "TEOM"};
    return labels;
}

inline bool known_equipment(const std::string& label) {
    const auto& ls = equipment_labels();
    return std::find(ls.begin(), ls.end(), label) != ls.end();
}

struct RawMeasurement {
    std::string station_id;
    std::string sensor_id;
    std::string equipment;
    std::string timestamp;  // YYYY-MM-DD for daily rows, YYYY-MM-DDTHH[:MM] for hourly
    double value = 0.0;
};

namespace detail_ingest {

struct ParsedStamp {
    Date date;
    int hour = -1;  // -1 marks daily granularity
};

inline std::optional<ParsedStamp> parse_timestamp(const std::string& s) {
    ParsedStamp p;
    int hh = 0, mm = 0;
    char sep = 0;
    const int n =
        std::sscanf(s.c_str(), "%4d-%2d-%2d%c%2d:%2d", &p.date.y, &p.date.m, &p.date.d, &sep,
                    &hh, &mm);
    if (n == 3) {
        if (s.size() != 10 || !p.date.ok()) return std::nullopt;
        return p;
    }
    if (n >= 5) {
        if ((sep != 'T' && sep != ' ') || !p.date.ok()) return std::nullopt;
        if (hh < 0 || hh > 23 || mm < 0 || mm > 59) return std::nullopt;
        p.hour = hh;
        return p;
    }
    return std::nullopt;
}

}  // namespace detail_ingest

// ---------------------------------------------------------------------------
// Ingestion report
// ---------------------------------------------------------------------------

// One stage of the pipeline: every input record is either kept or removed for
// a named reason, so kept + sum(removed) == input always holds.
struct StageLedger {
    std::size_t input = 0;
    std::size_t kept = 0;
    std::map<std::string, std::size_t> removed;

    std::size_t removed_total() const {
        std::size_t s = 0;
        for (const auto& [k, v] : removed) s += v;
        return s;
    }
    bool conserves() const { return kept + removed_total() == input; }
};

struct IngestionReport {
    StageLedger parse;  // csv lines -> parsed records
    StageLedger daily;  // raw records -> records contributing to a daily row
    StageLedger dedup;  // daily rows -> rows from the chosen sensor subset
    StageLedger length;  // daily rows -> rows in long-enough series
    StageLedger trim;   // daily values -> values inside the trim interval
    std::map<std::string, std::size_t> trim_removed_by_station;

    Json to_json() const {
        const auto stage = [](const StageLedger& l) {
            Json j;
            j["input"] = l.input;
            j["kept"] = l.kept;
            j["removed"] = l.removed;
            j["conserves"] = l.conserves();
            return j;
        };
        Json j;
        j["parse"] = stage(parse);
        j["daily_average"] = stage(daily);
        j["deduplicate_sensors"] = stage(dedup);
        j["minimum_length"] = stage(length);
        j["trim"] = stage(trim);
        j["trim_removed_by_station"] = trim_removed_by_station;
        return j;
    }
};

// ---------------------------------------------------------------------------
// Measurement CSV
// ---------------------------------------------------------------------------

namespace detail_ingest {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace detail_ingest

// Header: station_id,sensor_id,equipment,timestamp,value
inline std::vector<RawMeasurement> read_measurements_csv(std::istream& is,
                                                         IngestionReport& report) {
    std::string line;
    if (!std::getline(is, line)) throw ValidationError("empty measurement file");
    {
        const auto head = detail_ingest::split_csv_line(line);
        const std::vector<std::string> want = {"station_id", "sensor_id", "equipment",
                                               "timestamp", "value"};
        if (head != want)
            throw ValidationError("measurement csv header must be "
                                  "station_id,sensor_id,equipment,timestamp,value");
    }
    std::vector<RawMeasurement> rows;
    while (std::getline(is, line)) {
        if (line.empty() || line == "\r") continue;
        ++report.parse.input;
        const auto f = detail_ingest::split_csv_line(line);
        if (f.size() != 5) {
            ++report.parse.removed["wrong field count"];
            continue;
        }
        RawMeasurement r;
        r.station_id = f[0];
        r.sensor_id = f[1];
        r.equipment = f[2];
        r.timestamp = f[3];
        try {
            std::size_t used = 0;
            r.value = std::stod(f[4], &used);
            if (used != f[4].size()) throw std::invalid_argument("trailing junk");
        } catch (const std::exception&) {
            ++report.parse.removed["unparseable value"];
            continue;
        }
        if (r.station_id.empty() || r.sensor_id.empty()) {
            ++report.parse.removed["missing identifier"];
            continue;
        }
        ++report.parse.kept;
        rows.push_back(std::move(r));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Daily averaging
// ---------------------------------------------------------------------------

struct IngestOptions {
    Date window_start{2018, 1, 1};
    Date window_end{2022, 12, 31};
    int min_hourly_readings = 18;  // of 24 for a valid daily mean
    std::size_t min_series_length = 100;
};

// Collapses hourly rows to daily means and passes daily rows through. Output
// is sorted by (station, sensor, date) with one row per (sensor, date).
inline std::vector<RawMeasurement> daily_average(const std::vector<RawMeasurement>& raw,
                                                 IngestionReport& report,
                                                 const IngestOptions& opt = {}) {
    if (!opt.window_start.ok() || !opt.window_end.ok() ||
        !(opt.window_start <= opt.window_end))
        throw ValidationError("study window bounds are not valid ordered dates");
    if (opt.min_hourly_readings < 1 || opt.min_hourly_readings > 24)
        throw ValidationError("hourly completeness minimum must be in 1..24");

    struct DayBucket {
        std::vector<double> hourly;
        std::size_t hourly_records = 0;
        std::vector<double> daily;
        std::size_t daily_records = 0;
    };
    // key: station, sensor, date
    std::map<std::tuple<std::string, std::string, int>, DayBucket> buckets;
    std::map<std::tuple<std::string, std::string, int>, Date> dates;
    std::map<std::string, std::string> sensor_equipment;

    report.daily.input += raw.size();
    for (const RawMeasurement& r : raw) {
        const auto stamp = detail_ingest::parse_timestamp(r.timestamp);
        if (!stamp) {
            ++report.daily.removed["unparseable timestamp"];
            continue;
        }
        if (!known_equipment(r.equipment)) {
            ++report.daily.removed["unknown equipment type"];
            continue;
        }
        if (!std::isfinite(r.value) || r.value < 0.0) {
            ++report.daily.removed["invalid value"];
            continue;
        }
        if (stamp->date < opt.window_start || opt.window_end < stamp->date) {
            ++report.daily.removed["outside study window"];
            continue;
        }
        const auto key = std::make_tuple(r.station_id, r.sensor_id, stamp->date.key());
        auto& b = buckets[key];
        dates.emplace(key, stamp->date);
        sensor_equipment.emplace(r.sensor_id, r.equipment);
        if (stamp->hour >= 0) {
            b.hourly.push_back(r.value);
            ++b.hourly_records;
        } else {
            b.daily.push_back(r.value);
            ++b.daily_records;
        }
    }

    std::vector<RawMeasurement> out;
    for (const auto& [key, b] : buckets) {
        RawMeasurement r;
        r.station_id = std::get<0>(key);
        r.sensor_id = std::get<1>(key);
        r.equipment = sensor_equipment[r.sensor_id];
        r.timestamp = dates.at(key).str();
        if (!b.hourly.empty()) {
            // hourly data wins over a coexisting daily row on the same day
            report.daily.removed["daily row superseded by hourly data"] += b.daily_records;
            if (static_cast<int>(b.hourly.size()) < opt.min_hourly_readings) {
                report.daily.removed["incomplete hourly day"] += b.hourly_records;
                continue;
            }
            double s = 0.0;
            for (double v : b.hourly) s += v;
            r.value = s / static_cast<double>(b.hourly.size());
            report.daily.kept += b.hourly_records;
        } else {
            double s = 0.0;
            for (double v : b.daily) s += v;
            r.value = s / static_cast<double>(b.daily.size());
            report.daily.kept += b.daily_records;
        }
        out.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Station series
// ---------------------------------------------------------------------------

struct TrimBounds {
    double q1 = 0.0;
    double q99 = 0.0;
};

struct StationSeries {
    std::string station_id;
    Vec2 location{0.0, 0.0};
    Eigen::VectorXd covariates;  // empty until attach_covariates
    std::vector<Date> dates;
    std::vector<double> values;
    TrimBounds trim_bounds;
    bool trimmed = false;
};

namespace detail_ingest {

// Smallest set of equipment types whose sensors still cover every observed
// day; ties prefer beta-radiation, then the lexicographically smallest
// sensor id among the candidate types' sensors.
inline std::set<std::string> choose_equipment_subset(
    const std::map<std::string, std::string>& sensor_equipment,
    const std::map<std::string, std::set<int>>& sensor_days, const std::set<int>& all_days) {
    std::vector<std::string> types;
    for (const auto& [sensor, eq] : sensor_equipment)
        if (std::find(types.begin(), types.end(), eq) == types.end()) types.push_back(eq);
    std::sort(types.begin(), types.end());

    std::set<std::string> best;
    bool best_beta = false;
    std::string best_min_sensor;
    for (std::size_t mask = 1; mask < (std::size_t{1} << types.size()); ++mask) {
        std::set<std::string> cand;
        for (std::size_t t = 0; t < types.size(); ++t)
            if (mask & (std::size_t{1} << t)) cand.insert(types[t]);
        std::set<int> covered;
        std::string min_sensor;
        for (const auto& [sensor, days] : sensor_days) {
            if (!cand.count(sensor_equipment.at(sensor))) continue;
            covered.insert(days.begin(), days.end());
            if (min_sensor.empty() || sensor < min_sensor) min_sensor = sensor;
        }
        if (covered != all_days) continue;
        const bool has_beta = cand.count("beta-radiation") > 0;
        if (!best.empty()) {
            if (cand.size() > best.size()) continue;
            if (cand.size() == best.size()) {
                if (best_beta && !has_beta) continue;
                if (best_beta == has_beta && !(min_sensor < best_min_sensor)) continue;
            }
        }
        best = cand;
        best_beta = has_beta;
        best_min_sensor = min_sensor;
    }
    return best;
}

}  // namespace detail_ingest

// Resolves multi-sensor stations to one value per day, preferring the sensor
// subset with the fewest distinct equipment types over the station's history.
inline std::vector<StationSeries> deduplicate_sensors(const std::vector<RawMeasurement>& daily_rows,
                                                      IngestionReport& report) {
    struct Reading {
        std::string sensor_id, equipment;
        Date date;
        double value;
    };
    std::map<std::string, std::vector<Reading>> by_station;
    report.dedup.input += daily_rows.size();
    for (const RawMeasurement& r : daily_rows) {
        const auto stamp = detail_ingest::parse_timestamp(r.timestamp);
        if (!stamp || stamp->hour >= 0)
            throw ValidationError("deduplicate_sensors expects daily-granularity rows");
        by_station[r.station_id].push_back({r.sensor_id, r.equipment, stamp->date, r.value});
    }

    std::vector<StationSeries> out;
    for (auto& [station, readings] : by_station) {
        std::map<std::string, std::string> sensor_equipment;
        std::map<std::string, std::set<int>> sensor_days;
        std::set<int> all_days;
        for (const Reading& r : readings) {
            sensor_equipment.emplace(r.sensor_id, r.equipment);
            sensor_days[r.sensor_id].insert(r.date.key());
            all_days.insert(r.date.key());
        }
        const auto chosen =
            detail_ingest::choose_equipment_subset(sensor_equipment, sensor_days, all_days);

        // within the chosen types: beta-radiation first, then smallest sensor id
        std::map<int, const Reading*> per_day;
        for (const Reading& r : readings) {
            if (!chosen.count(r.equipment)) continue;
            auto& slot = per_day[r.date.key()];
            if (!slot) {
                slot = &r;
                continue;
            }
            const bool r_beta = r.equipment == "beta-radiation";
            const bool s_beta = slot->equipment == "beta-radiation";
            if (r_beta != s_beta ? r_beta : r.sensor_id < slot->sensor_id) slot = &r;
        }

        StationSeries s;
        s.station_id = station;
        for (const auto& [day, r] : per_day) {
            s.dates.push_back(r->date);
            s.values.push_back(r->value);
        }
        report.dedup.kept += per_day.size();
        report.dedup.removed["duplicate sensor reading"] += readings.size() - per_day.size();
        out.push_back(std::move(s));
    }
    return out;
}

// Registry header: station_id,x,y
inline std::map<std::string, Vec2> read_station_registry(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw ValidationError("empty station registry");
    if (detail_ingest::split_csv_line(line) !=
        std::vector<std::string>{"station_id", "x", "y"})
        throw ValidationError("station registry header must be station_id,x,y");
    std::map<std::string, Vec2> out;
    std::size_t n = 1;
    while (std::getline(is, line)) {
        ++n;
        if (line.empty() || line == "\r") continue;
        const auto f = detail_ingest::split_csv_line(line);
        if (f.size() != 3)
            throw ValidationError("registry line " + std::to_string(n) + ": expected 3 fields");
        try {
            const Vec2 p{std::stod(f[1]), std::stod(f[2])};
            if (!out.emplace(f[0], p).second)
                throw ValidationError("duplicate station in registry: " + f[0]);
        } catch (const ValidationError&) {
            throw;
        } catch (const std::exception&) {
            throw ValidationError("registry line " + std::to_string(n) + ": bad coordinate");
        }
    }
    return out;
}

inline void apply_registry(std::vector<StationSeries>& series,
                           const std::map<std::string, Vec2>& registry) {
    for (StationSeries& s : series) {
        const auto it = registry.find(s.station_id);
        if (it == registry.end())
            throw ValidationError("station " + s.station_id + " missing from the registry");
        s.location = it->second;
    }
}

// Drops stations with too few daily values to support density estimation.
inline std::vector<StationSeries> filter_short_series(std::vector<StationSeries> series,
                                                      IngestionReport& report,
                                                      std::size_t min_length) {
    std::vector<StationSeries> out;
    for (StationSeries& s : series) {
        report.length.input += s.values.size();
        if (s.values.size() < min_length) {
            report.length.removed["series shorter than minimum"] += s.values.size();
            continue;
        }
        report.length.kept += s.values.size();
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Trimming
// ---------------------------------------------------------------------------

using ScalarField = std::function<double(const Vec2&)>;

// Keeps values inside the closed interval [Q1(s), Q99(s)] and records the
// bounds. Idempotent: re-trimming removes nothing.
inline StationSeries trim_series(const StationSeries& series, const ScalarField& q1_field,
                                 const ScalarField& q99_field, IngestionReport& report) {
    const double lo = q1_field(series.location);
    const double hi = q99_field(series.location);
    if (!(lo < hi))
        throw ValidationError("degenerate trim interval at station " + series.station_id +
                              " (Q1 " + std::to_string(lo) + ", Q99 " + std::to_string(hi) + ")");
    StationSeries out;
    out.station_id = series.station_id;
    out.location = series.location;
    out.covariates = series.covariates;
    out.trim_bounds = {lo, hi};
    out.trimmed = true;
    std::size_t removed = 0;
    report.trim.input += series.values.size();
    for (std::size_t i = 0; i < series.values.size(); ++i) {
        if (series.values[i] < lo || series.values[i] > hi) {
            ++removed;
            continue;
        }
        if (i < series.dates.size()) out.dates.push_back(series.dates[i]);
        out.values.push_back(series.values[i]);
    }
    report.trim.kept += out.values.size();
    if (removed > 0) report.trim.removed["outside trim interval"] += removed;
    report.trim_removed_by_station[series.station_id] += removed;
    return out;
}

// ---------------------------------------------------------------------------
// Altitude raster (ESRI ASCII grid)
// ---------------------------------------------------------------------------

struct AscRaster {
    int ncols = 0, nrows = 0;
    double xll = 0.0, yll = 0.0, cellsize = 0.0;
    double nodata = -9999.0;
    std::vector<double> values;  // row-major, first row is the northern edge

    double sample(const Vec2& p) const {
        const int col = static_cast<int>(std::floor((p.x - xll) / cellsize));
        const int row_from_south = static_cast<int>(std::floor((p.y - yll) / cellsize));
        if (col < 0 || col >= ncols || row_from_south < 0 || row_from_south >= nrows)
            throw ValidationError("point outside the raster extent");
        const double v =
            values[static_cast<std::size_t>((nrows - 1 - row_from_south) * ncols + col)];
        if (v == nodata) throw ValidationError("raster has no data at the requested point");
        return v;
    }
};

inline AscRaster read_asc_raster(std::istream& is) {
    AscRaster r;
    std::map<std::string, double> header;
    std::string key;
    for (int i = 0; i < 6; ++i) {
        double v;
        if (!(is >> key >> v)) throw ValidationError("truncated raster header");
        std::transform(key.begin(), key.end(), key.begin(),
                       [](unsigned char c) { return std::tolower(c); });
        header[key] = v;
    }
    const auto need = [&](const std::string& k) {
        const auto it = header.find(k);
        if (it == header.end()) throw ValidationError("raster header missing " + k);
        return it->second;
    };
    r.ncols = static_cast<int>(need("ncols"));
    r.nrows = static_cast<int>(need("nrows"));
    r.cellsize = need("cellsize");
    r.nodata = need("nodata_value");
    if (header.count("xllcorner")) {
        r.xll = header["xllcorner"];
        r.yll = need("yllcorner");
    } else {
        // center registration shifts the corner by half a cell
        r.xll = need("xllcenter") - 0.5 * r.cellsize;
        r.yll = need("yllcenter") - 0.5 * r.cellsize;
    }
    if (r.ncols < 1 || r.nrows < 1 || !(r.cellsize > 0.0))
        throw ValidationError("raster header has non-positive dimensions");
    r.values.resize(static_cast<std::size_t>(r.ncols) * static_cast<std::size_t>(r.nrows));
    for (double& v : r.values)
        if (!(is >> v)) throw ValidationError("raster body shorter than ncols*nrows");
    return r;
}

// ---------------------------------------------------------------------------
// Covariates
// ---------------------------------------------------------------------------

struct CovariateModel {
    std::vector<std::string> names;
    Eigen::VectorXd mean;  // standardization parameters over stations
    Eigen::VectorXd sd;
    // smoothed density in raw units, one coefficient per mesh vertex, so the
    // same surface can be evaluated at prediction points later
    Eigen::VectorXd density_field;
};

// Altitude by containing raster cell, population density by containing
// municipality smoothed over the mesh, both standardized across stations.
inline CovariateModel attach_covariates(std::vector<StationSeries>& series,
                                        const AscRaster& altitude,
                                        const std::vector<RegionFeature>& municipalities,
                                        const mesh::FemOperators& ops, double smoothing_lambda,
                                        const std::string& density_key = "density") {
    if (series.empty()) throw ValidationError("no station series to attach covariates to");
    const int n = static_cast<int>(series.size());
    Eigen::MatrixXd x(n, 2);
    std::vector<Vec2> locations;
    for (int i = 0; i < n; ++i) {
        const StationSeries& s = series[static_cast<std::size_t>(i)];
        locations.push_back(s.location);
        try {
            x(i, 0) = altitude.sample(s.location);
        } catch (const ValidationError& e) {
            throw ValidationError("station " + s.station_id + ": " + e.what());
        }
        const RegionFeature* home = nullptr;
        for (const RegionFeature& rf : municipalities)
            if (rf.contains(s.location)) {
                home = &rf;
                break;
            }
        if (!home)
            throw ValidationError("station " + s.station_id + " lies outside every municipality");
        if (!home->properties.contains(density_key))
            throw ValidationError("municipality " + home->id + " lacks a '" + density_key +
                                  "' property");
        x(i, 1) = home->properties[density_key].get<double>();
    }

    // replace raw density by the mesh-smoothed field at the stations
    const Eigen::VectorXd field = mesh::smooth_covariate(ops, locations, x.col(1),
                                                         smoothing_lambda);
    x.col(1) = ops.evaluation(locations) * field;

    CovariateModel model;
    model.names = {"altitude_m", "popdensity_per_km2"};
    model.density_field = field;
    model.mean = x.colwise().mean();
    model.sd = Eigen::VectorXd(2);
    for (int c = 0; c < 2; ++c) {
        const double var = (x.col(c).array() - model.mean[c]).square().mean();
        model.sd[c] = std::sqrt(var);
        if (!(model.sd[c] > 0.0))
            throw ValidationError("zero-variance covariate: " + model.names[static_cast<std::size_t>(c)]);
        x.col(c) = (x.col(c).array() - model.mean[c]) / model.sd[c];
    }
    for (int i = 0; i < n; ++i) series[static_cast<std::size_t>(i)].covariates = x.row(i).transpose();
    return model;
}

// ---------------------------------------------------------------------------
// Trimmed-series CSV
// ---------------------------------------------------------------------------

inline void write_station_series_csv(std::ostream& os, const std::vector<StationSeries>& series) {
    os << "station_id,date,value\n";
    os.precision(17);
    for (const StationSeries& s : series)
        for (std::size_t i = 0; i < s.values.size(); ++i)
            os << s.station_id << "," << (i < s.dates.size() ? s.dates[i].str() : "") << ","
               << s.values[i] << "\n";
}

}  // namespace airdist::ingest
