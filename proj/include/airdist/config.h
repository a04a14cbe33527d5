#pragma once

#include <cstdint>
#include <functional>
#include <istream>
#include <sstream>
#include <string>
#include <vector>

#include "airdist/errors.h"
#include "airdist/mqsr.h"
#include "airdist/rng.h"

namespace airdist::config {

// Every numeric key carries its unit in the name so a saved run is auditable
// without consulting documentation.
struct RunConfig {
    // inputs and outputs
    std::string measurements_csv;
    std::string registry_csv;
    std::string boundary_geojson;
    std::string municipalities_geojson;
    std::string altitude_asc;
    std::string output_dir = "out";

    // method selection
    bool run_cfrk = true;
    bool run_mqsr = true;
    bool run_sde = true;
    bool use_covariates = false;

    // regulatory constants
    double threshold_ug_m3 = 50.0;
    double day_limit_days = 35.0;

    // mesh and kriging grids
    double mesh_edge_m = 10000.0;
    double bau_cell_m = 1600.0;
    std::vector<int> frk_basis_counts = {334, 134, 34};

    // quantile regression; smoothing weights are dimensionless curvature
    // penalties, multiplied by mesh_edge_m^2 internally so one value means
    // the same amount of smoothing on any mesh scale
    std::vector<double> quantile_grid = {0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99};
    std::vector<double> mqsr_lambda_grid = {1e-2, 1e-1, 1.0, 10.0};
    double mqsr_gamma = 0.0;  // 0 selects the automatic scale
    double mqsr_eps_ug_m3 = 0.01;
    double trim_field_lambda = 1.0;

    // density estimation
    int sde_interior_knots = 9;
    double sde_variance_target = 0.90;
    int sde_components = 0;  // 0 selects by variance target
    double support_grid_m = 500.0;

    // ingestion
    std::string window_start = "2018-01-01";
    std::string window_end = "2022-12-31";
    int min_hourly_readings = 18;
    int min_series_length = 100;
    double covariate_smoothing_lambda = 1.0;  // dimensionless, like the mqsr weights

    // reproducibility
    std::uint64_t seed = 20180101;
    int threads = 0;  // 0 uses the hardware count
};

namespace detail_config {

inline std::string join_doubles(const std::vector<double>& v) {
    std::ostringstream os;
    os.precision(17);
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    return os.str();
}

inline std::string join_ints(const std::vector<int>& v) {
    std::ostringstream os;
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    return os.str();
}

inline double parse_double(const std::string& key, const std::string& s) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument("trailing junk");
        return v;
    } catch (const std::exception&) {
        throw ValidationError("config key " + key + ": '" + s + "' is not a number");
    }
}

inline std::vector<double> parse_doubles(const std::string& key, const std::string& s) {
    std::vector<double> out;
    std::istringstream is(s);
    std::string tok;
    while (std::getline(is, tok, ',')) out.push_back(parse_double(key, tok));
    return out;
}

inline std::vector<int> parse_ints(const std::string& key, const std::string& s) {
    std::vector<int> out;
    for (double v : parse_doubles(key, s)) {
        const int i = static_cast<int>(v);
        if (static_cast<double>(i) != v)
            throw ValidationError("config key " + key + ": '" + s + "' is not an integer list");
        out.push_back(i);
    }
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
    if (s == "true") return true;
    if (s == "false") return false;
    throw ValidationError("config key " + key + ": expected true or false, got '" + s + "'");
}

struct Entry {
    std::string key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

inline const std::vector<Entry>& entries() {
    static const std::vector<Entry> table = [] {
        std::vector<Entry> t;
        const auto str = [&t](const std::string& k, std::string RunConfig::*f) {
            t.push_back({k, [f](const RunConfig& c) { return c.*f; },
                         [f](RunConfig& c, const std::string& s) { c.*f = s; }});
        };
        const auto num = [&t](const std::string& k, double RunConfig::*f) {
            t.push_back({k,
                         [f](const RunConfig& c) {
                             std::ostringstream os;
                             os.precision(17);
                             os << c.*f;
                             return os.str();
                         },
                         [f, k](RunConfig& c, const std::string& s) { c.*f = parse_double(k, s); }});
        };
        const auto integer = [&t](const std::string& k, int RunConfig::*f) {
            t.push_back({k, [f](const RunConfig& c) { return std::to_string(c.*f); },
                         [f, k](RunConfig& c, const std::string& s) {
                             const double v = parse_double(k, s);
                             if (static_cast<double>(static_cast<int>(v)) != v)
                                 throw ValidationError("config key " + k + ": expected an integer");
                             c.*f = static_cast<int>(v);
                         }});
        };
        const auto boolean = [&t](const std::string& k, bool RunConfig::*f) {
            t.push_back({k, [f](const RunConfig& c) { return c.*f ? "true" : "false"; },
                         [f, k](RunConfig& c, const std::string& s) { c.*f = parse_bool(k, s); }});
        };

        str("altitude_asc", &RunConfig::altitude_asc);
        num("bau_cell_m", &RunConfig::bau_cell_m);
        str("boundary_geojson", &RunConfig::boundary_geojson);
        num("covariate_smoothing_lambda", &RunConfig::covariate_smoothing_lambda);
        num("day_limit_days", &RunConfig::day_limit_days);
        t.push_back({"frk_basis_counts",
                     [](const RunConfig& c) { return join_ints(c.frk_basis_counts); },
                     [](RunConfig& c, const std::string& s) {
                         c.frk_basis_counts = parse_ints("frk_basis_counts", s);
                     }});
        str("measurements_csv", &RunConfig::measurements_csv);
        num("mesh_edge_m", &RunConfig::mesh_edge_m);
        integer("min_hourly_readings", &RunConfig::min_hourly_readings);
        integer("min_series_length", &RunConfig::min_series_length);
        num("mqsr_eps_ug_m3", &RunConfig::mqsr_eps_ug_m3);
        num("mqsr_gamma", &RunConfig::mqsr_gamma);
        t.push_back({"mqsr_lambda_grid",
                     [](const RunConfig& c) { return join_doubles(c.mqsr_lambda_grid); },
                     [](RunConfig& c, const std::string& s) {
                         c.mqsr_lambda_grid = parse_doubles("mqsr_lambda_grid", s);
                     }});
        str("municipalities_geojson", &RunConfig::municipalities_geojson);
        str("output_dir", &RunConfig::output_dir);
        t.push_back({"quantile_grid",
                     [](const RunConfig& c) { return join_doubles(c.quantile_grid); },
                     [](RunConfig& c, const std::string& s) {
                         c.quantile_grid = parse_doubles("quantile_grid", s);
                     }});
        str("registry_csv", &RunConfig::registry_csv);
        boolean("run_cfrk", &RunConfig::run_cfrk);
        boolean("run_mqsr", &RunConfig::run_mqsr);
        boolean("run_sde", &RunConfig::run_sde);
        integer("sde_components", &RunConfig::sde_components);
        integer("sde_interior_knots", &RunConfig::sde_interior_knots);
        num("sde_variance_target", &RunConfig::sde_variance_target);
        t.push_back({"seed",
                     [](const RunConfig& c) { return std::to_string(c.seed); },
                     [](RunConfig& c, const std::string& s) {
                         try {
                             // stoull would silently wrap a negative value
                             if (s.find('-') != std::string::npos)
                                 throw std::invalid_argument("negative");
                             std::size_t used = 0;
                             c.seed = std::stoull(s, &used);
                             if (used != s.size()) throw std::invalid_argument("trailing junk");
                         } catch (const std::exception&) {
                             throw ValidationError("config key seed: '" + s +
                                                   "' is not an unsigned integer");
                         }
                     }});
        num("support_grid_m", &RunConfig::support_grid_m);
        num("threshold_ug_m3", &RunConfig::threshold_ug_m3);
        integer("threads", &RunConfig::threads);
        num("trim_field_lambda", &RunConfig::trim_field_lambda);
        boolean("use_covariates", &RunConfig::use_covariates);
        str("window_end", &RunConfig::window_end);
        str("window_start", &RunConfig::window_start);
        return t;
    }();
    return table;
}

}  // namespace detail_config

// Applies one key=value override; the same setters back both file parsing and
// command-line overrides.
inline void set_key(RunConfig& c, const std::string& key, const std::string& value) {
    for (const auto& e : detail_config::entries()) {
        if (e.key == key) {
            e.set(c, value);
            return;
        }
    }
    throw ValidationError("unknown config key: " + key);
}

// Flat key=value lines; '#' starts a comment; unknown keys are errors.
inline RunConfig parse_config(std::istream& is) {
    RunConfig c;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        while (!line.empty() && (line.back() == ' ' || line.back() == '\t' || line.back() == '\r'))
            line.pop_back();
        std::size_t start = 0;
        while (start < line.size() && (line[start] == ' ' || line[start] == '\t')) ++start;
        line.erase(0, start);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ValidationError("config line " + std::to_string(lineno) +
                                  ": expected key=value");
        const auto trim = [](std::string s) {
            while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.pop_back();
            std::size_t b = 0;
            while (b < s.size() && (s[b] == ' ' || s[b] == '\t')) ++b;
            return s.substr(b);
        };
        set_key(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return c;
}

inline RunConfig parse_config_string(const std::string& text) {
    std::istringstream is(text);
    return parse_config(is);
}

// Canonical form: every key, sorted, one per line.
inline std::string serialize(const RunConfig& c) {
    std::ostringstream os;
    for (const auto& e : detail_config::entries()) os << e.key << "=" << e.get(c) << "\n";
    return os.str();
}

inline std::uint64_t config_hash(const RunConfig& c) { return fnv1a(serialize(c)); }

// Checks every numeric parameter against its owning module's preconditions
// before any computation starts.
inline void validate(const RunConfig& c) {
    const auto positive = [](double v, const char* what) {
        if (!(v > 0.0)) throw ValidationError(std::string(what) + " must be positive");
    };
    positive(c.threshold_ug_m3, "threshold_ug_m3");
    if (!(c.day_limit_days >= 0.0 && c.day_limit_days <= 365.0))
        throw ValidationError("day_limit_days must lie in [0, 365]");
    positive(c.mesh_edge_m, "mesh_edge_m");
    positive(c.bau_cell_m, "bau_cell_m");
    if (c.frk_basis_counts.empty()) throw ValidationError("frk_basis_counts must not be empty");
    for (int n : c.frk_basis_counts)
        if (n < 1) throw ValidationError("frk_basis_counts entries must be positive");
    mqsr::QuantileLevels{c.quantile_grid}.validate();
    if (c.mqsr_lambda_grid.empty()) throw ValidationError("mqsr_lambda_grid must not be empty");
    for (double l : c.mqsr_lambda_grid) positive(l, "mqsr_lambda_grid entries");
    if (c.mqsr_gamma < 0.0) throw ValidationError("mqsr_gamma must be nonnegative");
    positive(c.mqsr_eps_ug_m3, "mqsr_eps_ug_m3");
    positive(c.trim_field_lambda, "trim_field_lambda");
    if (c.sde_interior_knots < 1) throw ValidationError("sde_interior_knots must be at least 1");
    if (!(c.sde_variance_target > 0.0 && c.sde_variance_target <= 1.0))
        throw ValidationError("sde_variance_target must lie in (0, 1]");
    if (c.sde_components < 0) throw ValidationError("sde_components must be nonnegative");
    positive(c.support_grid_m, "support_grid_m");
    const auto date_shaped = [](const std::string& s, const char* key) {
        // calendar validity is checked where the date is actually parsed
        bool ok = s.size() == 10 && s[4] == '-' && s[7] == '-';
        for (std::size_t i = 0; ok && i < s.size(); ++i)
            if (i != 4 && i != 7) ok = s[i] >= '0' && s[i] <= '9';
        if (!ok)
            throw ValidationError(std::string(key) + " must look like YYYY-MM-DD, got '" + s +
                                  "'");
    };
    date_shaped(c.window_start, "window_start");
    date_shaped(c.window_end, "window_end");
    if (c.min_hourly_readings < 1 || c.min_hourly_readings > 24)
        throw ValidationError("min_hourly_readings must lie in 1..24");
    if (c.min_series_length < 2) throw ValidationError("min_series_length must be at least 2");
    positive(c.covariate_smoothing_lambda, "covariate_smoothing_lambda");
    if (c.threads < 0) throw ValidationError("threads must be nonnegative");
}

}  // namespace airdist::config
