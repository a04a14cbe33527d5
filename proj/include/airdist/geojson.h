#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "airdist/errors.h"
#include "airdist/geometry.h"

namespace airdist {

using Json = nlohmann::json;

inline Json read_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ValidationError("cannot read file: " + path);
    Json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw ValidationError("invalid json in " + path + ": " + e.what());
    }
    return j;
}

inline void write_json_file(const std::string& path, const Json& j) {
    std::ofstream f(path);
    if (!f) throw ValidationError("cannot write file: " + path);
    f << j.dump(2) << "\n";
}

// A named region: one or more polygons with holes plus free-form properties.
struct RegionFeature {
    std::string id;
    std::vector<Polygon> parts;
    Json properties = Json::object();

    double area() const {
        double s = 0.0;
        for (const Polygon& p : parts) s += p.area();
        return s;
    }

    bool contains(const Vec2& pt) const {
        for (const Polygon& p : parts)
            if (point_in_polygon(pt, p)) return true;
        return false;
    }
};

namespace detail_geojson {

inline Ring parse_ring(const Json& arr, const std::string& where) {
    if (!arr.is_array() || arr.size() < 4)
        throw ValidationError(where + ": ring needs at least 4 coordinate pairs");
    Ring r;
    for (const auto& c : arr) {
        if (!c.is_array() || c.size() < 2)
            throw ValidationError(where + ": coordinate is not an [x, y] pair");
        r.push_back({c[0].get<double>(), c[1].get<double>()});
    }
    // rings arrive closed; drop the repeated last vertex
    if (distance(r.front(), r.back()) > 1e-12)
        throw ValidationError(where + ": ring is not closed");
    r.pop_back();
    return r;
}

inline Polygon parse_polygon(const Json& coords, const std::string& where) {
    if (!coords.is_array() || coords.empty())
        throw ValidationError(where + ": polygon has no rings");
    Polygon p;
    p.outer = parse_ring(coords[0], where);
    for (std::size_t i = 1; i < coords.size(); ++i) p.holes.push_back(parse_ring(coords[i], where));
    p.normalize();
    return p;
}

inline Json ring_json(const Ring& r) {
    Json arr = Json::array();
    for (const Vec2& p : r) arr.push_back(Json::array({p.x, p.y}));
    arr.push_back(Json::array({r.front().x, r.front().y}));
    return arr;
}

inline Json polygon_coords(const Polygon& p) {
    Json arr = Json::array();
    arr.push_back(ring_json(p.outer));
    for (const Ring& h : p.holes) arr.push_back(ring_json(h));
    return arr;
}

}  // namespace detail_geojson

inline std::vector<RegionFeature> parse_region_features(const Json& j) {
    if (!j.is_object() || j.value("type", "") != "FeatureCollection")
        throw ValidationError("expected a FeatureCollection");
    if (!j.contains("features") || !j["features"].is_array())
        throw ValidationError("FeatureCollection has no features array");
    std::vector<RegionFeature> out;
    std::size_t idx = 0;
    for (const auto& f : j["features"]) {
        const std::string where = "feature " + std::to_string(idx++);
        if (f.value("type", "") != "Feature") throw ValidationError(where + ": not a Feature");
        RegionFeature rf;
        if (f.contains("id")) {
            rf.id = f["id"].is_string() ? f["id"].get<std::string>() : f["id"].dump();
        }
        if (f.contains("properties") && f["properties"].is_object()) {
            rf.properties = f["properties"];
            if (rf.id.empty() && rf.properties.contains("id")) {
                const auto& pid = rf.properties["id"];
                rf.id = pid.is_string() ? pid.get<std::string>() : pid.dump();
            }
        }
        if (rf.id.empty()) throw ValidationError(where + ": missing id");
        if (!f.contains("geometry") || !f["geometry"].is_object())
            throw ValidationError(where + ": missing geometry");
        const auto& g = f["geometry"];
        const std::string gtype = g.value("type", "");
        if (gtype == "Polygon") {
            rf.parts.push_back(detail_geojson::parse_polygon(g["coordinates"], where));
        } else if (gtype == "MultiPolygon") {
            for (const auto& pc : g["coordinates"])
                rf.parts.push_back(detail_geojson::parse_polygon(pc, where));
        } else {
            throw ValidationError(where + ": unsupported geometry type '" + gtype + "'");
        }
        out.push_back(std::move(rf));
    }
    return out;
}

inline std::vector<RegionFeature> read_region_features(const std::string& path) {
    return parse_region_features(read_json_file(path));
}

inline Json region_feature_json(const RegionFeature& rf) {
    Json f;
    f["type"] = "Feature";
    f["id"] = rf.id;
    f["properties"] = rf.properties;
    if (rf.parts.size() == 1) {
        f["geometry"] = {{"type", "Polygon"},
                         {"coordinates", detail_geojson::polygon_coords(rf.parts[0])}};
    } else {
        Json coords = Json::array();
        for (const Polygon& p : rf.parts) coords.push_back(detail_geojson::polygon_coords(p));
        f["geometry"] = {{"type", "MultiPolygon"}, {"coordinates", coords}};
    }
    return f;
}

inline Json feature_collection_json(const std::vector<RegionFeature>& features) {
    Json j;
    j["type"] = "FeatureCollection";
    Json arr = Json::array();
    for (const auto& rf : features) arr.push_back(region_feature_json(rf));
    j["features"] = arr;
    return j;
}

}  // namespace airdist
