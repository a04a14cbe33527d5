#pragma once

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "airdist/config.h"
#include "airdist/errors.h"
#include "airdist/frk.h"
#include "airdist/geojson.h"
#include "airdist/geom.h"
#include "airdist/geometry.h"
#include "airdist/indicators.h"
#include "airdist/ingest.h"
#include "airdist/mesh.h"
#include "airdist/mqsr.h"
#include "airdist/rng.h"
#include "airdist/sde.h"

namespace airdist::pipeline {

struct MethodOutput {
    indicators::Method method = indicators::Method::kCfrk;
    std::vector<indicators::MunicipalIndicator> rows;  // one per municipality, input order
};

struct RunResult {
    ingest::IngestionReport report;
    std::vector<ingest::StationSeries> series;  // trimmed series the methods consumed
    std::vector<RegionFeature> municipalities;
    std::vector<MethodOutput> methods;  // enabled methods in CFRK, MQSR, SDE order
    std::vector<sde::ReconstructedDensity> densities;  // one per municipality when SDE ran
    std::vector<indicators::ConsensusResult> consensus;  // filled only when all three ran
    Json manifest;
    std::vector<std::string> files;  // everything written under output_dir
};

namespace detail_pipeline {

// Reruns the body and prefixes any error with the owning stage, preserving
// the error type so exit-code mapping still works downstream.
template <typename F>
auto stage(const char* name, F&& body) -> decltype(body()) {
    try {
        return body();
    } catch (const ValidationError& e) {
        throw ValidationError(std::string(name) + ": " + e.what());
    } catch (const NumericError& e) {
        throw NumericError(std::string(name) + ": " + e.what());
    }
}

inline ingest::Date parse_date(const char* key, const std::string& s) {
    ingest::Date d;
    if (std::sscanf(s.c_str(), "%4d-%2d-%2d", &d.y, &d.m, &d.d) != 3 || !d.ok())
        throw ValidationError(std::string(key) + ": '" + s + "' is not a calendar date");
    return d;
}

inline void require_file(const std::string& path, const char* what) {
    if (path.empty())
        throw ValidationError(std::string("no ") + what + " configured");
    if (!std::filesystem::exists(path))
        throw ValidationError(std::string(what) + " not found: " + path);
}

inline Polygon read_boundary(const std::string& path) {
    const auto features = read_region_features(path);
    if (features.size() != 1 || features[0].parts.size() != 1)
        throw ValidationError("boundary must be a single one-part polygon feature");
    return features[0].parts[0];
}

// In-polygon evaluation points per municipality. The quantile averaging and
// the support prediction share these so both see the same geometry.
struct MunicipalPoints {
    std::vector<Vec2> points;
    std::vector<std::pair<std::size_t, std::size_t>> ranges;  // [begin, end)
    std::vector<std::uint8_t> centroid_fallback;
};

inline MunicipalPoints municipal_points(const std::vector<RegionFeature>& regions,
                                        const mesh::FemOperators& ops, double spacing) {
    MunicipalPoints out;
    out.centroid_fallback.assign(regions.size(), 0);
    for (std::size_t p = 0; p < regions.size(); ++p) {
        const auto& rf = regions[p];
        if (rf.parts.empty()) throw ValidationError("municipality " + rf.id + " has no geometry");
        const std::size_t begin = out.points.size();
        for (const Polygon& poly : rf.parts) {
            const auto bb = poly.bbox();
            for (double y = bb.ymin + 0.5 * spacing; y < bb.ymax; y += spacing)
                for (double x = bb.xmin + 0.5 * spacing; x < bb.xmax; x += spacing) {
                    const Vec2 pt{x, y};
                    if (point_in_polygon(pt, poly) && ops.contains(pt)) out.points.push_back(pt);
                }
        }
        if (out.points.size() == begin) {
            // municipality smaller than the grid: fall back to the centroid
            // of its largest part
            const Polygon* big = &rf.parts.front();
            for (const Polygon& poly : rf.parts)
                if (poly.area() > big->area()) big = &poly;
            const Vec2 c = polygon_centroid(*big);
            if (!ops.contains(c))
                throw ValidationError("municipality " + rf.id +
                                      " has no evaluable point inside the mesh");
            out.points.push_back(c);
            out.centroid_fallback[p] = 1;
        }
        out.ranges.emplace_back(begin, out.points.size());
    }
    return out;
}

// Municipality parts flattened for per-cell aggregation, with the in-domain
// overlap area of each part cached as its recombination weight.
struct FlatParts {
    std::vector<Polygon> parts;
    std::vector<std::size_t> owner;
    std::vector<double> weight;
};

inline FlatParts flatten_parts(const std::vector<RegionFeature>& regions,
                               const frk::BauGrid& grid) {
    FlatParts fp;
    for (std::size_t p = 0; p < regions.size(); ++p)
        for (const Polygon& poly : regions[p].parts) {
            fp.parts.push_back(poly);
            fp.owner.push_back(p);
        }
    const auto agg = frk::aggregate_to_polygons(
        grid, Eigen::VectorXd::Zero(static_cast<int>(grid.n_cells())), fp.parts);
    fp.weight = agg.overlap_area;
    return fp;
}

inline Eigen::VectorXd combine_parts(const FlatParts& fp, const Eigen::VectorXd& part_values,
                                     const std::vector<RegionFeature>& regions) {
    const int np = static_cast<int>(regions.size());
    Eigen::VectorXd value = Eigen::VectorXd::Zero(np);
    Eigen::VectorXd weight = Eigen::VectorXd::Zero(np);
    for (std::size_t k = 0; k < fp.parts.size(); ++k) {
        if (!(fp.weight[k] > 0.0)) continue;
        const int p = static_cast<int>(fp.owner[k]);
        value[p] += fp.weight[k] * part_values[static_cast<int>(k)];
        weight[p] += fp.weight[k];
    }
    for (int p = 0; p < np; ++p) {
        if (!(weight[p] > 0.0))
            throw ValidationError("municipality " + regions[static_cast<std::size_t>(p)].id +
                                  " overlaps no in-domain grid cell; refine bau_cell_m");
        value[p] /= weight[p];
    }
    return value;
}

// Standardized covariate rows at arbitrary points, using the exact surfaces
// and parameters that produced the station covariates.
struct CovariateField {
    bool enabled = false;
    std::shared_ptr<const mesh::FemOperators> ops;
    std::shared_ptr<const ingest::AscRaster> altitude;
    ingest::CovariateModel model;

    int cols() const { return enabled ? 2 : 0; }

    Eigen::MatrixXd at(const std::vector<Vec2>& points) const {
        const int n = static_cast<int>(points.size());
        if (!enabled) return Eigen::MatrixXd(n, 0);
        Eigen::MatrixXd x(n, 2);
        for (int i = 0; i < n; ++i) x(i, 0) = altitude->sample(points[static_cast<std::size_t>(i)]);
        x.col(1) = ops->evaluation(points) * model.density_field;
        for (int c = 0; c < 2; ++c) x.col(c) = (x.col(c).array() - model.mean[c]) / model.sd[c];
        return x;
    }

    // One row per BAU cell. Out-of-domain cells get zeros (they are never
    // aggregated), so the raster only has to cover the domain.
    Eigen::MatrixXd at_cells(const frk::BauGrid& grid) const {
        const int nc = static_cast<int>(grid.n_cells());
        Eigen::MatrixXd x = Eigen::MatrixXd::Zero(nc, cols());
        if (!enabled) return x;
        std::vector<Vec2> pts;
        std::vector<int> idx;
        for (int c = 0; c < nc; ++c)
            if (grid.in_domain[static_cast<std::size_t>(c)]) {
                pts.push_back(grid.centroid(static_cast<std::size_t>(c)));
                idx.push_back(c);
            }
        const Eigen::MatrixXd rows = at(pts);
        for (std::size_t k = 0; k < idx.size(); ++k)
            x.row(idx[k]) = rows.row(static_cast<int>(k));
        return x;
    }
};

inline Eigen::MatrixXd with_intercept(const Eigen::MatrixXd& x) {
    Eigen::MatrixXd out(x.rows(), x.cols() + 1);
    out.col(0).setOnes();
    out.rightCols(x.cols()) = x;
    return out;
}

// Strictly widens the trim envelope until it brackets the fitted quantile
// knots; the piecewise cdf requires its support to contain them strictly.
inline std::pair<double, double> widen_support(double lo, double hi, double qf, double ql) {
    const double span = std::max(hi, ql) - std::min(lo, qf);
    const double pad = std::max(1e-9 * span, 1e-12);
    if (!(lo < qf)) lo = qf - pad;
    if (!(hi > ql)) hi = ql + pad;
    return {lo, hi};
}

}  // namespace detail_pipeline

// Executes every enabled stage on the configured inputs and writes all run
// artifacts under output_dir. Same config and inputs give byte-identical
// outputs; any failure carries the name of the stage that raised it.
inline RunResult run(const config::RunConfig& cfg) {
    namespace fs = std::filesystem;
    using detail_pipeline::stage;

    config::validate(cfg);
    if (cfg.threads > 0) Eigen::setNbThreads(cfg.threads);
    RunResult out;

    // every missing input is reported before any computation starts
    stage("pre-flight", [&] {
        detail_pipeline::require_file(cfg.measurements_csv, "measurements file");
        detail_pipeline::require_file(cfg.registry_csv, "registry file");
        detail_pipeline::require_file(cfg.boundary_geojson, "boundary file");
        detail_pipeline::require_file(cfg.municipalities_geojson, "municipalities file");
        if (cfg.use_covariates) detail_pipeline::require_file(cfg.altitude_asc, "altitude raster");
        if (!cfg.run_cfrk && !cfg.run_mqsr && !cfg.run_sde)
            throw ValidationError("no method selected");
        fs::create_directories(cfg.output_dir);
    });

    auto series = stage("ingest", [&] {
        std::ifstream ms(cfg.measurements_csv);
        const auto raw = ingest::read_measurements_csv(ms, out.report);
        ingest::IngestOptions opt;
        opt.window_start = detail_pipeline::parse_date("window_start", cfg.window_start);
        opt.window_end = detail_pipeline::parse_date("window_end", cfg.window_end);
        opt.min_hourly_readings = cfg.min_hourly_readings;
        opt.min_series_length = static_cast<std::size_t>(cfg.min_series_length);
        const auto daily = ingest::daily_average(raw, out.report, opt);
        auto st = ingest::deduplicate_sensors(daily, out.report);
        if (st.empty()) throw ValidationError("no stations survived ingestion");
        std::ifstream rs(cfg.registry_csv);
        ingest::apply_registry(st, ingest::read_station_registry(rs));
        return st;
    });

    const Polygon domain =
        stage("mesh", [&] { return detail_pipeline::read_boundary(cfg.boundary_geojson); });
    const auto ops = stage("mesh", [&] {
        auto o = std::make_shared<const mesh::FemOperators>(
            mesh::assemble(mesh::build_mesh(domain, cfg.mesh_edge_m)));
        for (const auto& s : series)
            if (!o->contains(s.location))
                throw ValidationError("station " + s.station_id + " lies outside the mesh");
        return o;
    });

    // the curvature penalty integrates a second derivative, so its natural
    // magnitude shrinks with the squared mesh resolution; scaling the
    // dimensionless config weights by edge^2 keeps them mesh-independent
    const double pen_scale = cfg.mesh_edge_m * cfg.mesh_edge_m;

    out.municipalities = stage("municipalities", [&] {
        auto regions = read_region_features(cfg.municipalities_geojson);
        if (regions.empty()) throw ValidationError("no municipality features");
        return regions;
    });
    const auto muni = stage("municipalities", [&] {
        return detail_pipeline::municipal_points(out.municipalities, *ops, cfg.support_grid_m);
    });

    detail_pipeline::CovariateField cov;
    if (cfg.use_covariates) {
        stage("covariates", [&] {
            std::ifstream as(cfg.altitude_asc);
            auto raster = std::make_shared<const ingest::AscRaster>(ingest::read_asc_raster(as));
            cov.model = ingest::attach_covariates(series, *raster, out.municipalities, *ops,
                                                  cfg.covariate_smoothing_lambda * pen_scale);
            cov.enabled = true;
            cov.ops = ops;
            cov.altitude = std::move(raster);
        });
    }

    std::vector<Vec2> locations;
    std::vector<std::vector<double>> samples;
    const auto refresh_station_views = [&] {
        locations.clear();
        samples.clear();
        for (const auto& s : series) {
            locations.push_back(s.location);
            samples.push_back(s.values);
        }
    };
    refresh_station_views();

    mqsr::FitOptions mqsr_opts;
    mqsr_opts.gamma = cfg.mqsr_gamma;
    mqsr_opts.eps = cfg.mqsr_eps_ug_m3;

    // one joint covariate-free fit of the two extreme surfaces; the
    // non-crossing constraint keeps Q1 below Q99 everywhere, and the same
    // fields later supply the density supports
    const auto trim_fields = stage("trim", [&] {
        return mqsr::fit(ops, locations, samples,
                         Eigen::MatrixXd(static_cast<int>(series.size()), 0),
                         mqsr::QuantileLevels{{0.01, 0.99}},
                         {cfg.trim_field_lambda * pen_scale}, mqsr_opts);
    });
    series = stage("trim", [&] {
        const Eigen::MatrixXd q = mqsr::evaluate(
            trim_fields, locations, Eigen::MatrixXd(static_cast<int>(locations.size()), 0));
        std::vector<ingest::StationSeries> trimmed;
        for (std::size_t i = 0; i < series.size(); ++i) {
            const int col = static_cast<int>(i);
            trimmed.push_back(ingest::trim_series(
                series[i], [&](const Vec2&) { return q(0, col); },
                [&](const Vec2&) { return q(1, col); }, out.report));
        }
        auto kept = ingest::filter_short_series(std::move(trimmed), out.report,
                                                static_cast<std::size_t>(cfg.min_series_length));
        if (kept.empty()) throw ValidationError("no station series long enough after trimming");
        return kept;
    });
    refresh_station_views();

    Eigen::MatrixXd station_cov(static_cast<int>(series.size()), cov.cols());
    for (std::size_t i = 0; i < series.size(); ++i)
        if (cov.enabled) station_cov.row(static_cast<int>(i)) = series[i].covariates.transpose();

    frk::BauGrid grid;
    frk::BasisSet basis;
    detail_pipeline::FlatParts flat;
    if (cfg.run_cfrk || cfg.run_sde) {
        stage("kriging-grid", [&] {
            grid = frk::make_grid(domain, cfg.bau_cell_m);
            grid.covariates = detail_pipeline::with_intercept(cov.at_cells(grid));
            basis = frk::make_basis(grid, cfg.frk_basis_counts, derive_seed(cfg.seed, "frk-basis"));
            flat = detail_pipeline::flatten_parts(out.municipalities, grid);
        });
    }

    if (cfg.run_cfrk) {
        MethodOutput mo;
        mo.method = indicators::Method::kCfrk;
        stage("cfrk", [&] {
            Eigen::VectorXd z(static_cast<int>(series.size()));
            for (std::size_t i = 0; i < series.size(); ++i) {
                std::size_t above = 0;
                for (double v : series[i].values)
                    if (v > cfg.threshold_ug_m3) ++above;
                z[static_cast<int>(i)] =
                    geom::ilr(geom::zero_replace(series[i].values.size() - above, above));
            }
            const auto model =
                frk::fit_em(locations, detail_pipeline::with_intercept(station_cov), z, basis, grid);
            const auto pred = frk::predict(model, grid);
            const auto parts = frk::aggregate_to_polygons(grid, pred.mean, flat.parts);
            const Eigen::VectorXd zbar =
                detail_pipeline::combine_parts(flat, parts.value, out.municipalities);
            for (std::size_t p = 0; p < out.municipalities.size(); ++p)
                mo.rows.push_back(indicators::indicator(
                    out.municipalities[p].id,
                    indicators::Representation{geom::ilr_inverse(zbar[static_cast<int>(p)])},
                    cfg.threshold_ug_m3));
        });
        out.methods.push_back(std::move(mo));
    }

    if (cfg.run_mqsr) {
        MethodOutput mo;
        mo.method = indicators::Method::kMqsr;
        stage("mqsr", [&] {
            const mqsr::QuantileLevels levels{cfg.quantile_grid};
            std::vector<double> lambda = cfg.mqsr_lambda_grid;
            for (double& l : lambda) l *= pen_scale;
            if (lambda.size() > 1) {
                const int folds = std::min<int>(5, static_cast<int>(series.size()));
                lambda = mqsr::select_lambda(ops, locations, samples, station_cov, levels, lambda,
                                             folds, derive_seed(cfg.seed, "mqsr-cv"), mqsr_opts);
            }
            const auto fields =
                mqsr::fit(ops, locations, samples, station_cov, levels, lambda, mqsr_opts);
            const Eigen::MatrixXd q = mqsr::evaluate(fields, muni.points, cov.at(muni.points));
            double lo = series[0].trim_bounds.q1, hi = series[0].trim_bounds.q99;
            for (const auto& s : series) {
                lo = std::min(lo, s.trim_bounds.q1);
                hi = std::max(hi, s.trim_bounds.q99);
            }
            const std::size_t r = levels.alphas.size();
            for (std::size_t p = 0; p < out.municipalities.size(); ++p) {
                const auto [b, e] = muni.ranges[p];
                std::vector<double> qbar(r, 0.0);
                for (std::size_t i = b; i < e; ++i)
                    for (std::size_t j = 0; j < r; ++j)
                        qbar[j] += q(static_cast<int>(j), static_cast<int>(i));
                for (double& v : qbar) v /= static_cast<double>(e - b);
                const auto [slo, shi] =
                    detail_pipeline::widen_support(lo, hi, qbar.front(), qbar.back());
                mo.rows.push_back(indicators::indicator(
                    out.municipalities[p].id,
                    indicators::Representation{
                        indicators::cdf_from_quantiles(levels.alphas, qbar, slo, shi)},
                    cfg.threshold_ug_m3));
            }
        });
        out.methods.push_back(std::move(mo));
    }

    if (cfg.run_sde) {
        MethodOutput mo;
        mo.method = indicators::Method::kSde;
        stage("sde", [&] {
            sde::DensityOptions dopt;
            dopt.interior_knots = cfg.sde_interior_knots;
            dopt.min_samples = cfg.min_series_length;
            std::vector<sde::ScaledDensityEstimate> dens;
            for (const auto& s : series)
                dens.push_back(sde::estimate_density(
                    sde::align(s.values, s.trim_bounds.q1, s.trim_bounds.q99), s.station_id, dopt));
            sde::FpcaOptions fopt;
            fopt.variance_target = cfg.sde_variance_target;
            fopt.components = cfg.sde_components;
            const auto fp = sde::fpca(dens, fopt);
            const auto kriged =
                sde::krige_scores(locations, fp.scores, detail_pipeline::with_intercept(station_cov),
                                  basis, grid, flat.parts);
            const int np = static_cast<int>(out.municipalities.size());
            Eigen::MatrixXd scores(np, fp.basis.n_components());
            for (int h = 0; h < fp.basis.n_components(); ++h)
                scores.col(h) =
                    detail_pipeline::combine_parts(flat, kriged.scores.col(h), out.municipalities);
            const Eigen::MatrixXd qs = mqsr::evaluate(
                trim_fields, muni.points, Eigen::MatrixXd(static_cast<int>(muni.points.size()), 0));
            for (std::size_t p = 0; p < out.municipalities.size(); ++p) {
                const auto [b, e] = muni.ranges[p];
                double lo = 0.0, hi = 0.0;
                for (std::size_t i = b; i < e; ++i) {
                    lo += qs(0, static_cast<int>(i));
                    hi += qs(1, static_cast<int>(i));
                }
                lo /= static_cast<double>(e - b);
                hi /= static_cast<double>(e - b);
                const auto recon = sde::reconstruct(
                    fp.basis, scores.row(static_cast<int>(p)).transpose(), {lo, hi});
                out.densities.push_back(recon);
                mo.rows.push_back(indicators::indicator(out.municipalities[p].id,
                                                        indicators::Representation{recon},
                                                        cfg.threshold_ug_m3));
            }
        });
        out.methods.push_back(std::move(mo));
    }

    if (cfg.run_cfrk && cfg.run_mqsr && cfg.run_sde) {
        for (std::size_t p = 0; p < out.municipalities.size(); ++p) {
            std::vector<bool> flags;
            for (const auto& mo : out.methods)
                flags.push_back(mo.rows[p].expected_days > cfg.day_limit_days);
            out.consensus.push_back(indicators::consensus(out.municipalities[p].id, flags));
        }
    }

    stage("outputs", [&] {
        const fs::path dir(cfg.output_dir);
        const auto open = [&](const std::string& name) {
            std::ofstream os(dir / name);
            if (!os) throw ValidationError("cannot write " + (dir / name).string());
            out.files.push_back((dir / name).string());
            return os;
        };
        {
            auto os = open("trimmed_series.csv");
            ingest::write_station_series_csv(os, series);
        }
        {
            auto os = open("ingestion_report.json");
            os << out.report.to_json().dump(2) << "\n";
        }
        for (const auto& mo : out.methods) {
            std::string name = "indicators_";
            for (char ch : std::string(indicators::method_name(mo.method)))
                name += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
            auto os = open(name + ".csv");
            indicators::write_indicator_csv(os, mo.rows);
        }
        if (!out.densities.empty()) {
            auto os = open("sde_densities.csv");
            os.precision(17);
            os << "municipality_id,q1,q99";
            for (std::size_t g = 0; g < geom::kGridSize; ++g) os << ",d" << g;
            os << "\n";
            for (std::size_t p = 0; p < out.densities.size(); ++p) {
                os << out.municipalities[p].id << "," << out.densities[p].support.q1 << ","
                   << out.densities[p].support.q99;
                for (double v : out.densities[p].values()) os << "," << v;
                os << "\n";
            }
        }
        if (!out.consensus.empty()) {
            const auto path = (dir / "consensus.geojson").string();
            write_json_file(
                path, indicators::consensus_geojson(out.municipalities, out.consensus));
            out.files.push_back(path);
        }

        Json m;
        m["config"] = config::serialize(cfg);
        std::ostringstream hx;
        hx << std::hex << config::config_hash(cfg);
        m["config_hash"] = hx.str();
        m["seed"] = cfg.seed;
        m["library"] = "airdist 0.1.0";
        m["counts"] = {{"stations", series.size()},
                       {"municipalities", out.municipalities.size()}};
        Json names = Json::array();
        for (const auto& f : out.files) names.push_back(fs::path(f).filename().string());
        names.push_back("manifest.json");
        m["outputs"] = names;
        out.manifest = m;
        write_json_file((dir / "manifest.json").string(), m);
        out.files.push_back((dir / "manifest.json").string());
    });

    out.series = std::move(series);
    return out;
}

// Rebuilds the exact configuration a manifest records, so a run can be
// repeated from its output directory alone.
inline config::RunConfig config_from_manifest(const Json& manifest) {
    if (!manifest.contains("config"))
        throw ValidationError("manifest lacks the embedded config");
    return config::parse_config_string(manifest["config"].get<std::string>());
}

}  // namespace airdist::pipeline
