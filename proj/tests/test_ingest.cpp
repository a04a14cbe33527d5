#include "airdist/ingest.h"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "airdist/geojson.h"
#include "airdist/mesh.h"

using airdist::Polygon;
using airdist::RegionFeature;
using airdist::ValidationError;
using airdist::Vec2;
namespace ingest = airdist::ingest;
namespace mesh = airdist::mesh;

namespace {

ingest::RawMeasurement row(const std::string& station, const std::string& sensor,
                           const std::string& equipment, const std::string& ts, double value) {
    return {station, sensor, equipment, ts, value};
}

std::string hour_stamp(const std::string& date, int h) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "T%02d:00", h);
    return date + buf;
}

}  // namespace

TEST(DailyAverage, ConstantHoursCollapseToOneRow) {
    std::vector<ingest::RawMeasurement> raw;
    for (int h = 0; h < 24; ++h)
        raw.push_back(row("st1", "sn1", "beta-radiation", hour_stamp("2020-03-05", h), 30.0));
    ingest::IngestionReport rep;
    const auto out = ingest::daily_average(raw, rep);
    ASSERT_EQ(out.size(), 1u);
    EXPECT_EQ(out[0].timestamp, "2020-03-05");
    EXPECT_DOUBLE_EQ(out[0].value, 30.0);
    EXPECT_EQ(rep.daily.kept, 24u);
    EXPECT_TRUE(rep.daily.conserves());
}

TEST(DailyAverage, HourlyMeanMatchesArithmeticOracle) {
    std::vector<ingest::RawMeasurement> raw;
    double oracle = 0.0;
    for (int h = 0; h < 24; ++h) {
        const double v = 10.0 * (h + 1);  // 10, 20, ..., 240
        oracle += v;
        raw.push_back(row("st1", "sn1", "TEOM", hour_stamp("2021-07-01", h), v));
    }
    oracle /= 24.0;
    EXPECT_DOUBLE_EQ(oracle, 125.0);
    ingest::IngestionReport rep;
    const auto out = ingest::daily_average(raw, rep);
    ASSERT_EQ(out.size(), 1u);
    EXPECT_DOUBLE_EQ(out[0].value, oracle);
}

TEST(DailyAverage, DailyRowPassesThrough) {
    ingest::IngestionReport rep;
    const auto out =
        ingest::daily_average({row("st1", "sn1", "gravimetry", "2019-11-20", 42.0)}, rep);
    ASSERT_EQ(out.size(), 1u);
    EXPECT_EQ(out[0].timestamp, "2019-11-20");
    EXPECT_DOUBLE_EQ(out[0].value, 42.0);
    EXPECT_EQ(out[0].equipment, "gravimetry");
}

TEST(DailyAverage, IncompleteHourlyDayIsDropped) {
    std::vector<ingest::RawMeasurement> raw;
    for (int h = 0; h < 17; ++h)
        raw.push_back(row("st1", "sn1", "OPC", hour_stamp("2020-01-02", h), 25.0));
    ingest::IngestionReport rep;
    EXPECT_TRUE(ingest::daily_average(raw, rep).empty());
    EXPECT_EQ(rep.daily.removed.at("incomplete hourly day"), 17u);
    EXPECT_TRUE(rep.daily.conserves());

    for (int h = 17; h < 18; ++h)
        raw.push_back(row("st1", "sn1", "OPC", hour_stamp("2020-01-02", h), 25.0));
    ingest::IngestionReport rep2;
    EXPECT_EQ(ingest::daily_average(raw, rep2).size(), 1u);  // 18 readings suffice
}

TEST(DailyAverage, HourlyWinsOverDailyOnTheSameDay) {
    std::vector<ingest::RawMeasurement> raw;
    raw.push_back(row("st1", "sn1", "beta-radiation", "2020-05-05", 99.0));
    for (int h = 0; h < 24; ++h)
        raw.push_back(row("st1", "sn1", "beta-radiation", hour_stamp("2020-05-05", h), 40.0));
    ingest::IngestionReport rep;
    const auto out = ingest::daily_average(raw, rep);
    ASSERT_EQ(out.size(), 1u);
    EXPECT_DOUBLE_EQ(out[0].value, 40.0);
    EXPECT_EQ(rep.daily.removed.at("daily row superseded by hourly data"), 1u);
    EXPECT_TRUE(rep.daily.conserves());
}

TEST(DailyAverage, RejectsInvalidRecordsWithReasons) {
    const std::vector<ingest::RawMeasurement> raw = {
        row("st1", "sn1", "TEOM", "2020-13-40", 10.0),
        row("st1", "sn1", "TEOM", "not a date", 10.0),
        row("st1", "sn1", "TEOM", "2020-02-30", 10.0),
        row("st1", "sn1", "laser", "2020-05-05", 10.0),
        row("st1", "sn1", "TEOM", "2020-05-05", -3.0),
        row("st1", "sn1", "TEOM", "2020-05-05", std::nan("")),
        row("st1", "sn1", "TEOM", "2017-12-31", 10.0),
        row("st1", "sn1", "TEOM", "2023-01-01", 10.0),
        row("st1", "sn1", "TEOM", "2020-05-06", 10.0),
    };
    ingest::IngestionReport rep;
    const auto out = ingest::daily_average(raw, rep);
    ASSERT_EQ(out.size(), 1u);
    EXPECT_EQ(rep.daily.removed.at("unparseable timestamp"), 3u);
    EXPECT_EQ(rep.daily.removed.at("unknown equipment type"), 1u);
    EXPECT_EQ(rep.daily.removed.at("invalid value"), 2u);
    EXPECT_EQ(rep.daily.removed.at("outside study window"), 2u);
    EXPECT_EQ(rep.daily.kept, 1u);
    EXPECT_TRUE(rep.daily.conserves());
}

TEST(DailyAverage, ExactRowCountOnSyntheticFixture) {
    std::vector<ingest::RawMeasurement> raw;
    for (int sensor = 0; sensor < 3; ++sensor)
        for (int day = 1; day <= 10; ++day) {
            char date[16];
            std::snprintf(date, sizeof date, "2020-06-%02d", day);
            for (int h = 0; h < 24; ++h)
                raw.push_back(row("st1", "sn" + std::to_string(sensor), "TEOM",
                                  hour_stamp(date, h), 20.0 + h));
        }
    ingest::IngestionReport rep;
    const auto out = ingest::daily_average(raw, rep);
    EXPECT_EQ(out.size(), 30u);  // one row per (sensor, date)
    EXPECT_EQ(rep.daily.kept, raw.size());
    EXPECT_TRUE(rep.daily.conserves());
}

TEST(Dedup, SingleSensorIsIdentity) {
    std::vector<ingest::RawMeasurement> rows;
    for (int day = 1; day <= 5; ++day)
        rows.push_back(row("st1", "sn1", "OPC", "2020-04-0" + std::to_string(day), 10.0 + day));
    ingest::IngestionReport rep;
    const auto series = ingest::deduplicate_sensors(rows, rep);
    ASSERT_EQ(series.size(), 1u);
    EXPECT_EQ(series[0].station_id, "st1");
    ASSERT_EQ(series[0].values.size(), 5u);
    for (int day = 1; day <= 5; ++day) EXPECT_DOUBLE_EQ(series[0].values[day - 1], 10.0 + day);
    EXPECT_TRUE(rep.dedup.conserves());
}

TEST(Dedup, SingleEquipmentSubsetWinsOnOverlap) {
    // beta sensor covers everything; a TEOM sensor overlaps in the middle
    std::vector<ingest::RawMeasurement> rows;
    for (int day = 1; day <= 9; ++day)
        rows.push_back(row("st1", "beta-1", "beta-radiation", "2020-04-0" + std::to_string(day),
                           1.0 * day));
    for (int day = 4; day <= 6; ++day)
        rows.push_back(row("st1", "teom-1", "TEOM", "2020-04-0" + std::to_string(day), 100.0));
    ingest::IngestionReport rep;
    const auto series = ingest::deduplicate_sensors(rows, rep);
    ASSERT_EQ(series.size(), 1u);
    ASSERT_EQ(series[0].values.size(), 9u);
    for (int day = 1; day <= 9; ++day) EXPECT_DOUBLE_EQ(series[0].values[day - 1], 1.0 * day);
    EXPECT_EQ(rep.dedup.removed.at("duplicate sensor reading"), 3u);
    EXPECT_TRUE(rep.dedup.conserves());
}

TEST(Dedup, SecondEquipmentKeptWhenNeededForCoverage) {
    std::vector<ingest::RawMeasurement> rows;
    for (int day = 1; day <= 6; ++day)
        rows.push_back(row("st1", "beta-1", "beta-radiation", "2020-04-0" + std::to_string(day),
                           1.0));
    for (int day = 5; day <= 9; ++day)
        rows.push_back(row("st1", "teom-1", "TEOM", "2020-04-0" + std::to_string(day), 2.0));
    ingest::IngestionReport rep;
    const auto series = ingest::deduplicate_sensors(rows, rep);
    ASSERT_EQ(series[0].values.size(), 9u);
    for (int day = 1; day <= 9; ++day)
        EXPECT_DOUBLE_EQ(series[0].values[day - 1], day <= 6 ? 1.0 : 2.0);  // beta wins overlap
}

TEST(Dedup, LexicographicSensorIdBreaksEquipmentTies) {
    std::vector<ingest::RawMeasurement> rows;
    for (int day = 1; day <= 4; ++day) {
        rows.push_back(row("st1", "s2", "gravimetry", "2020-04-0" + std::to_string(day), 7.0));
        rows.push_back(row("st1", "s1", "OPC", "2020-04-0" + std::to_string(day), 9.0));
    }
    ingest::IngestionReport rep;
    const auto series = ingest::deduplicate_sensors(rows, rep);
    ASSERT_EQ(series[0].values.size(), 4u);
    for (double v : series[0].values) EXPECT_DOUBLE_EQ(v, 9.0);  // s1 wins
}

TEST(Dedup, RejectsHourlyRows) {
    ingest::IngestionReport rep;
    EXPECT_THROW(
        ingest::deduplicate_sensors({row("st1", "sn1", "TEOM", "2020-04-01T10:00", 5.0)}, rep),
        ValidationError);
}

TEST(MeasurementCsv, ParsesAndCountsMalformedLines) {
    std::istringstream is(
        "station_id,sensor_id,equipment,timestamp,value\n"
        "st1,sn1,TEOM,2020-05-05,12.5\n"
        "st1,sn1,TEOM,2020-05-06\n"
        "st1,sn1,TEOM,2020-05-07,abc\n"
        ",sn1,TEOM,2020-05-08,4.0\n"
        "st1,sn1,TEOM,2020-05-09,17.25\n");
    ingest::IngestionReport rep;
    const auto rows = ingest::read_measurements_csv(is, rep);
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_DOUBLE_EQ(rows[0].value, 12.5);
    EXPECT_DOUBLE_EQ(rows[1].value, 17.25);
    EXPECT_EQ(rep.parse.input, 5u);
    EXPECT_EQ(rep.parse.removed.at("wrong field count"), 1u);
    EXPECT_EQ(rep.parse.removed.at("unparseable value"), 1u);
    EXPECT_EQ(rep.parse.removed.at("missing identifier"), 1u);
    EXPECT_TRUE(rep.parse.conserves());

    std::istringstream bad("wrong,header\n");
    ingest::IngestionReport rep2;
    EXPECT_THROW(ingest::read_measurements_csv(bad, rep2), ValidationError);
}

TEST(Registry, ReadAndApply) {
    std::istringstream is("station_id,x,y\nst1,1000.5,2000.25\nst2,3000,4000\n");
    const auto reg = ingest::read_station_registry(is);
    ASSERT_EQ(reg.size(), 2u);
    EXPECT_DOUBLE_EQ(reg.at("st1").x, 1000.5);
    EXPECT_DOUBLE_EQ(reg.at("st2").y, 4000.0);

    std::vector<ingest::StationSeries> series(1);
    series[0].station_id = "st1";
    ingest::apply_registry(series, reg);
    EXPECT_DOUBLE_EQ(series[0].location.y, 2000.25);

    series[0].station_id = "st9";
    EXPECT_THROW(ingest::apply_registry(series, reg), ValidationError);

    std::istringstream dup("station_id,x,y\nst1,1,2\nst1,3,4\n");
    EXPECT_THROW(ingest::read_station_registry(dup), ValidationError);
    std::istringstream bad("id,x,y\nst1,1,2\n");
    EXPECT_THROW(ingest::read_station_registry(bad), ValidationError);
}

TEST(FilterShortSeries, DropsAndCounts) {
    std::vector<ingest::StationSeries> series(2);
    series[0].station_id = "short";
    series[0].values = {1, 2, 3, 4};
    series[1].station_id = "long";
    series[1].values = {1, 2, 3, 4, 5};
    ingest::IngestionReport rep;
    const auto kept = ingest::filter_short_series(series, rep, 5);
    ASSERT_EQ(kept.size(), 1u);
    EXPECT_EQ(kept[0].station_id, "long");
    EXPECT_EQ(rep.length.removed.at("series shorter than minimum"), 4u);
    EXPECT_EQ(rep.length.kept, 5u);
    EXPECT_TRUE(rep.length.conserves());
}

TEST(Trim, ClosedIntervalBoundaryFiltering) {
    ingest::StationSeries s;
    s.station_id = "st1";
    s.location = {0.5, 0.5};
    s.values = {3.0, 50.0, 95.0, 5.0, 90.0};
    s.dates.resize(5, ingest::Date{2020, 1, 1});
    const auto q1 = [](const Vec2&) { return 5.0; };
    const auto q99 = [](const Vec2&) { return 90.0; };
    ingest::IngestionReport rep;
    const auto t = ingest::trim_series(s, q1, q99, rep);
    ASSERT_EQ(t.values.size(), 3u);
    EXPECT_DOUBLE_EQ(t.values[0], 50.0);
    EXPECT_DOUBLE_EQ(t.values[1], 5.0);   // bounds retained: closed interval
    EXPECT_DOUBLE_EQ(t.values[2], 90.0);
    EXPECT_DOUBLE_EQ(t.trim_bounds.q1, 5.0);
    EXPECT_DOUBLE_EQ(t.trim_bounds.q99, 90.0);
    EXPECT_TRUE(t.trimmed);
    EXPECT_EQ(rep.trim_removed_by_station.at("st1"), 2u);
    EXPECT_TRUE(rep.trim.conserves());

    // idempotence: a second pass removes nothing
    ingest::IngestionReport rep2;
    const auto t2 = ingest::trim_series(t, q1, q99, rep2);
    EXPECT_EQ(t2.values.size(), t.values.size());
    EXPECT_EQ(rep2.trim_removed_by_station.at("st1"), 0u);
}

TEST(Trim, AllInsideIsIdentity) {
    ingest::StationSeries s;
    s.station_id = "st1";
    s.values = {10.0, 20.0, 30.0};
    ingest::IngestionReport rep;
    const auto t = ingest::trim_series(
        s, [](const Vec2&) { return 5.0; }, [](const Vec2&) { return 90.0; }, rep);
    EXPECT_EQ(t.values, s.values);
}

TEST(Trim, DegenerateIntervalIsAHardError) {
    ingest::StationSeries s;
    s.station_id = "st-bad";
    s.values = {10.0};
    ingest::IngestionReport rep;
    try {
        ingest::trim_series(
            s, [](const Vec2&) { return 50.0; }, [](const Vec2&) { return 50.0; }, rep);
        FAIL() << "expected a validation error";
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("st-bad"), std::string::npos);
    }
}

TEST(AscRaster, ParseAndSample) {
    std::istringstream is(
        "ncols 3\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 10\nNODATA_value -9999\n"
        "7 8 9\n"
        "1 2 -9999\n");
    const auto r = ingest::read_asc_raster(is);
    EXPECT_EQ(r.ncols, 3);
    EXPECT_EQ(r.nrows, 2);
    // bottom row is the southern edge
    EXPECT_DOUBLE_EQ(r.sample({5.0, 5.0}), 1.0);
    EXPECT_DOUBLE_EQ(r.sample({15.0, 5.0}), 2.0);
    EXPECT_DOUBLE_EQ(r.sample({5.0, 15.0}), 7.0);
    EXPECT_DOUBLE_EQ(r.sample({25.0, 15.0}), 9.0);
    EXPECT_THROW(r.sample({-1.0, 5.0}), ValidationError);
    EXPECT_THROW(r.sample({5.0, 25.0}), ValidationError);
    EXPECT_THROW(r.sample({25.0, 5.0}), ValidationError);  // nodata cell

    std::istringstream centered(
        "ncols 1\nnrows 1\nxllcenter 5\nyllcenter 5\ncellsize 10\nNODATA_value -9999\n42\n");
    const auto c = ingest::read_asc_raster(centered);
    EXPECT_DOUBLE_EQ(c.sample({3.0, 3.0}), 42.0);

    std::istringstream trunc(
        "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n1 2 3\n");
    EXPECT_THROW(ingest::read_asc_raster(trunc), ValidationError);
}

namespace {

RegionFeature region(const std::string& id, double x0, double y0, double x1, double y1,
                     double density) {
    RegionFeature rf;
    rf.id = id;
    Polygon p;
    p.outer = {{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}};
    rf.parts.push_back(p);
    rf.properties["density"] = density;
    return rf;
}

}  // namespace

TEST(AttachCovariates, StandardizesWithStoredParameters) {
    Polygon domain;
    domain.outer = {{0, 0}, {1, 0}, {1, 1}, {0, 1}};
    const auto ops = mesh::assemble(mesh::build_mesh(domain, 0.15));

    std::vector<ingest::StationSeries> series(4);
    const std::vector<Vec2> pts = {{0.2, 0.2}, {0.2, 0.8}, {0.8, 0.3}, {0.8, 0.7}};
    for (int i = 0; i < 4; ++i) {
        series[static_cast<std::size_t>(i)].station_id = "st" + std::to_string(i);
        series[static_cast<std::size_t>(i)].location = pts[static_cast<std::size_t>(i)];
    }

    // one altitude per quadrant; densities split left/right
    std::istringstream asc(
        "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 0.5\nNODATA_value -9999\n"
        "700 900\n"
        "100 300\n");
    const auto altitude = ingest::read_asc_raster(asc);
    const std::vector<RegionFeature> towns = {region("left", 0, 0, 0.5, 1, 100.0),
                                              region("right", 0.5, 0, 1, 1, 300.0)};

    const auto model = ingest::attach_covariates(series, altitude, towns, ops, 1e-8);
    ASSERT_EQ(model.names.size(), 2u);

    // altitude oracle: raw values (100, 700, 300, 900), standardized by hand
    const std::vector<double> alt = {100, 700, 300, 900};
    const double mean = 500.0;
    double var = 0.0;
    for (double a : alt) var += (a - mean) * (a - mean);
    const double sd = std::sqrt(var / 4.0);
    EXPECT_NEAR(model.mean[0], mean, 1e-12);
    EXPECT_NEAR(model.sd[0], sd, 1e-12);
    for (int i = 0; i < 4; ++i)
        EXPECT_NEAR(series[static_cast<std::size_t>(i)].covariates[0],
                    (alt[static_cast<std::size_t>(i)] - mean) / sd, 1e-12);

    // density oracle: with near-zero smoothing the fit reproduces (100, 100,
    // 300, 300), standardizing to -1, -1, +1, +1
    EXPECT_NEAR(series[0].covariates[1], -1.0, 0.05);
    EXPECT_NEAR(series[1].covariates[1], -1.0, 0.05);
    EXPECT_NEAR(series[2].covariates[1], 1.0, 0.05);
    EXPECT_NEAR(series[3].covariates[1], 1.0, 0.05);
    EXPECT_NEAR(model.mean[1], 200.0, 2.0);
}

TEST(AttachCovariates, NamedErrors) {
    Polygon domain;
    domain.outer = {{0, 0}, {1, 0}, {1, 1}, {0, 1}};
    const auto ops = mesh::assemble(mesh::build_mesh(domain, 0.2));
    std::vector<ingest::StationSeries> series(2);
    series[0].station_id = "in";
    series[0].location = {0.25, 0.25};
    series[1].station_id = "out";
    series[1].location = {0.75, 0.75};

    std::istringstream half(
        "ncols 1\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 0.5\nNODATA_value -9999\n55\n");
    const auto small_raster = ingest::read_asc_raster(half);
    const std::vector<RegionFeature> towns = {region("all", 0, 0, 1, 1, 100.0)};
    try {
        ingest::attach_covariates(series, small_raster, towns, ops, 1e-6);
        FAIL() << "expected a validation error";
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("out"), std::string::npos);
    }

    std::istringstream full(
        "ncols 1\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n55\n");
    const auto flat_raster = ingest::read_asc_raster(full);
    try {
        ingest::attach_covariates(series, flat_raster, towns, ops, 1e-6);
        FAIL() << "expected a zero-variance error";
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("zero-variance"), std::string::npos);
    }

    // a station in no municipality is named
    std::istringstream vary(
        "ncols 2\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 0.5\nNODATA_value -9999\n10 20\n");
    const auto two_cell = ingest::read_asc_raster(vary);
    const std::vector<RegionFeature> west_only = {region("west", 0, 0, 0.5, 1, 100.0)};
    try {
        ingest::attach_covariates(series, two_cell, west_only, ops, 1e-6);
        FAIL() << "expected a validation error";
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("out"), std::string::npos);
    }
}

TEST(Report, JsonCarriesConservingStages) {
    std::istringstream is(
        "station_id,sensor_id,equipment,timestamp,value\n"
        "st1,sn1,TEOM,2020-05-05,12.5\n"
        "st1,sn1,TEOM,bad-stamp,1.0\n"
        "st1,sn1,TEOM,2020-05-06,oops\n");
    ingest::IngestionReport rep;
    const auto rows = ingest::read_measurements_csv(is, rep);
    const auto daily = ingest::daily_average(rows, rep);
    ingest::deduplicate_sensors(daily, rep);
    const auto j = rep.to_json();
    for (const char* stage : {"parse", "daily_average", "deduplicate_sensors"})
        EXPECT_TRUE(j.at(stage).at("conserves").get<bool>()) << stage;
    EXPECT_EQ(j.at("parse").at("input").get<std::size_t>(), 3u);
    EXPECT_EQ(j.at("daily_average").at("kept").get<std::size_t>(), 1u);
}

TEST(SeriesCsv, OneRowPerStationDay) {
    std::vector<ingest::StationSeries> series(1);
    series[0].station_id = "st1";
    series[0].dates = {{2020, 1, 2}, {2020, 1, 3}};
    series[0].values = {12.5, 14.0};
    std::ostringstream os;
    ingest::write_station_series_csv(os, series);
    EXPECT_EQ(os.str(), "station_id,date,value\nst1,2020-01-02,12.5\nst1,2020-01-03,14\n");
}
