#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "airdist/bspline.h"
#include "airdist/errors.h"
#include "airdist/frk.h"
#include "airdist/geom.h"
#include "airdist/geometry.h"
#include "airdist/mqsr.h"

// Spatial density estimation: station series are rescaled onto [0,1], turned
// into smoothed densities, decomposed by functional PCA of their clr
// transforms, and the scores kriged to municipalities. Combined with a
// predicted support, that reconstructs a full density per municipality.
namespace airdist::sde {

// ---------------------------------------------------------------------------
// Alignment onto the unit interval
// ---------------------------------------------------------------------------

inline double align_value(double y, double q1, double q99) {
    if (!(q1 < q99)) throw ValidationError("alignment requires q1 < q99");
    if (y < q1 || y > q99) {
        std::ostringstream os;
        os << "value " << y << " outside the trimmed support [" << q1 << ", " << q99 << "]";
        throw ValidationError(os.str());
    }
    return (y - q1) / (q99 - q1);
}

inline std::vector<double> align(const std::vector<double>& values, double q1, double q99) {
    std::vector<double> out;
    out.reserve(values.size());
    for (double y : values) out.push_back(align_value(y, q1, q99));
    return out;
}

inline double unalign(double scaled, double q1, double q99) {
    if (!(q1 < q99)) throw ValidationError("alignment requires q1 < q99");
    return q1 + scaled * (q99 - q1);
}

// ---------------------------------------------------------------------------
// Per-station density estimation
// ---------------------------------------------------------------------------

struct DensityOptions {
    int bins = 24;
    double count_smoothing = 0.5;
    int interior_knots = 9;
    double smoothing_weight = 1e-4;
    int min_samples = 100;
};

struct ScaledDensityEstimate {
    std::string station_id;
    geom::DensityOnUnit density;
    int interior_knots = 0;
    double smoothing_weight = 0.0;
    std::size_t sample_size = 0;
};

// Histogram with additive count smoothing, clr of the bin densities, then a
// curvature-penalized cubic spline fit evaluated on the common grid. The
// zero-integral clr constraint is restored by projection (quadrature-mean
// subtraction) when the density is rebuilt.
inline ScaledDensityEstimate estimate_density(const std::vector<double>& scaled,
                                              std::string station_id = {},
                                              const DensityOptions& opt = {}) {
    if (opt.bins < 4) throw ValidationError("density histogram needs at least 4 bins");
    if (!(opt.count_smoothing > 0.0))
        throw ValidationError("count smoothing must be positive to keep logs finite");
    if (!(opt.smoothing_weight >= 0.0)) throw ValidationError("smoothing weight must be >= 0");
    if (static_cast<int>(scaled.size()) < opt.min_samples) {
        std::ostringstream os;
        os << "density estimation needs at least " << opt.min_samples << " samples, got "
           << scaled.size();
        throw ValidationError(os.str());
    }
    for (double v : scaled)
        if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("scaled values must lie in [0,1]");

    std::vector<double> counts(static_cast<std::size_t>(opt.bins), opt.count_smoothing);
    for (double v : scaled) {
        const int b = std::min(static_cast<int>(v * opt.bins), opt.bins - 1);
        counts[static_cast<std::size_t>(b)] += 1.0;
    }
    const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
    const double width = 1.0 / opt.bins;

    Eigen::VectorXd z(opt.bins);
    std::vector<double> centers(static_cast<std::size_t>(opt.bins));
    for (int b = 0; b < opt.bins; ++b) {
        centers[static_cast<std::size_t>(b)] = (b + 0.5) * width;
        z[b] = std::log(counts[static_cast<std::size_t>(b)] / (total * width));
    }
    z.array() -= z.mean();  // discrete clr over equal bins

    const bspline::CubicBasis basis(opt.interior_knots);
    const Eigen::MatrixXd b = basis.design(centers);
    const Eigen::MatrixXd h =
        b.transpose() * b + opt.smoothing_weight * basis.curvature_gram();
    const Eigen::LDLT<Eigen::MatrixXd> solver(h);
    if (solver.info() != Eigen::Success)
        throw NumericError("density spline system is not positive definite");
    const Eigen::VectorXd theta = solver.solve(b.transpose() * z);
    if (!theta.allFinite()) throw NumericError("density spline fit produced non-finite values");

    const auto grid = geom::unit_grid();
    std::vector<double> clr_values(grid.size());
    for (std::size_t g = 0; g < grid.size(); ++g)
        clr_values[g] = basis.values(grid[g]).dot(theta);

    ScaledDensityEstimate out;
    out.station_id = std::move(station_id);
    out.density = geom::density_from_clr(std::move(clr_values));
    out.interior_knots = opt.interior_knots;
    out.smoothing_weight = opt.smoothing_weight;
    out.sample_size = scaled.size();
    return out;
}

// ---------------------------------------------------------------------------
// Functional PCA of clr densities
// ---------------------------------------------------------------------------

struct FpcaOptions {
    double variance_target = 0.90;
    int components = 0;  // 0 selects the smallest count reaching the target
};

struct FpcaBasis {
    Eigen::VectorXd mean;         // clr mean on the common grid
    Eigen::MatrixXd components;   // grid x k, orthonormal under quadrature
    Eigen::VectorXd eigenvalues;  // k leading
    Eigen::VectorXd explained;    // k variance ratios
    Eigen::VectorXd spectrum;     // all eigenvalues, descending

    int n_components() const { return static_cast<int>(components.cols()); }
};

struct FpcaResult {
    FpcaBasis basis;
    Eigen::MatrixXd scores;  // stations x k
};

inline FpcaResult fpca(const std::vector<ScaledDensityEstimate>& densities,
                       const FpcaOptions& opt = {}) {
    const int n = static_cast<int>(densities.size());
    if (n < 2) throw ValidationError("functional PCA needs at least two stations");
    const int m = static_cast<int>(geom::kGridSize);
    for (const auto& d : densities)
        if (d.density.clr_values.size() != geom::kGridSize)
            throw ValidationError("density not on the common grid");

    Eigen::MatrixXd x(n, m);
    for (int i = 0; i < n; ++i)
        for (int g = 0; g < m; ++g) x(i, g) = densities[static_cast<std::size_t>(i)].density.clr_values[static_cast<std::size_t>(g)];
    const Eigen::VectorXd mean = x.colwise().mean();
    const Eigen::MatrixXd xc = x.rowwise() - mean.transpose();

    const auto wv = geom::quadrature_weights();
    Eigen::VectorXd w(m), ws(m), wis(m);
    for (int g = 0; g < m; ++g) {
        w[g] = wv[static_cast<std::size_t>(g)];
        ws[g] = std::sqrt(w[g]);
        wis[g] = 1.0 / ws[g];
    }

    // quadrature-weighted covariance, symmetrized by W^1/2 on both sides
    const Eigen::MatrixXd a = ws.asDiagonal() * (xc.transpose() * xc / static_cast<double>(n)) *
                              ws.asDiagonal();
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
    if (es.info() != Eigen::Success) throw NumericError("functional PCA eigensolver failed");

    Eigen::VectorXd spectrum(m);
    for (int h = 0; h < m; ++h) spectrum[h] = std::max(es.eigenvalues()[m - 1 - h], 0.0);
    const double total = spectrum.sum();
    const auto ratios_text = [&]() {
        std::ostringstream os;
        for (int h = 0; h < std::min(m, 8); ++h) os << (h ? ", " : "") << spectrum[h] / total;
        return os.str();
    };
    if (!(total > 0.0))
        throw ValidationError("variance target unreachable: densities carry no variance");

    int k = opt.components;
    if (k <= 0) {
        if (!(opt.variance_target > 0.0))
            throw ValidationError("variance target must be positive");
        double cum = 0.0;
        k = 0;
        for (int h = 0; h < m; ++h) {
            cum += spectrum[h] / total;
            if (cum >= opt.variance_target - 1e-12) {
                k = h + 1;
                break;
            }
        }
        if (k == 0)
            throw ValidationError("variance target unreachable; explained ratios: " +
                                  ratios_text());
    }
    if (k > m) throw ValidationError("more components requested than grid dimensions");
    if (n < k + 1) {
        std::ostringstream os;
        os << "functional PCA with " << k << " components needs at least " << k + 1
           << " stations, got " << n;
        throw ValidationError(os.str());
    }

    FpcaResult out;
    out.basis.mean = mean;
    out.basis.spectrum = spectrum;
    out.basis.eigenvalues = spectrum.head(k);
    out.basis.explained = spectrum.head(k) / total;
    out.basis.components.resize(m, k);
    for (int h = 0; h < k; ++h) {
        Eigen::VectorXd phi = wis.asDiagonal() * es.eigenvectors().col(m - 1 - h);
        // deterministic orientation: largest-magnitude grid value positive
        int arg = 0;
        phi.cwiseAbs().maxCoeff(&arg);
        if (phi[arg] < 0.0) phi = -phi;
        out.basis.components.col(h) = phi;
    }
    out.scores = xc * w.asDiagonal() * out.basis.components;
    return out;
}

// ---------------------------------------------------------------------------
// Score kriging
// ---------------------------------------------------------------------------

struct KrigedScores {
    Eigen::MatrixXd scores;  // municipalities x k
    std::vector<std::uint8_t> has_overlap;
    std::vector<frk::FrkModel> models;
};

// One FRK model per score dimension, each predicted on the BAU grid and
// area-averaged over the municipality polygons.
inline KrigedScores krige_scores(const std::vector<Vec2>& locations,
                                 const Eigen::MatrixXd& station_scores,
                                 const Eigen::MatrixXd& covariates, const frk::BasisSet& basis,
                                 const frk::BauGrid& grid,
                                 const std::vector<Polygon>& municipalities,
                                 const frk::FitOptions& opts = {}) {
    const int k = static_cast<int>(station_scores.cols());
    const int np = static_cast<int>(municipalities.size());
    if (static_cast<int>(locations.size()) != station_scores.rows())
        throw ValidationError("one score vector per station location");
    KrigedScores out;
    out.scores.resize(np, k);
    out.has_overlap.assign(static_cast<std::size_t>(np), 1);
    for (int h = 0; h < k; ++h) {
        auto model = frk::fit_em(locations, covariates, station_scores.col(h), basis, grid, opts);
        const auto pred = frk::predict(model, grid);
        const auto agg = frk::aggregate_to_polygons(grid, pred.mean, municipalities);
        out.scores.col(h) = agg.value;
        for (int p = 0; p < np; ++p)
            if (!agg.has_overlap[static_cast<std::size_t>(p)])
                out.has_overlap[static_cast<std::size_t>(p)] = 0;
        out.models.push_back(std::move(model));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reconstruction on a predicted support
// ---------------------------------------------------------------------------

struct SupportInterval {
    double q1 = 0.0;
    double q99 = 1.0;

    void validate() const {
        if (!(q1 < q99)) throw ValidationError("support requires q1 < q99");
    }
    double width() const { return q99 - q1; }
};

inline Eigen::VectorXd reconstruct_clr(const FpcaBasis& basis, const Eigen::VectorXd& scores) {
    if (scores.size() != basis.components.cols())
        throw ValidationError("score dimension does not match the basis");
    return basis.mean + basis.components * scores;
}

struct ReconstructedDensity {
    SupportInterval support;
    geom::DensityOnUnit scaled;

    // y values of the common grid mapped onto the support
    std::vector<double> grid() const {
        auto g = geom::unit_grid();
        for (double& u : g) u = support.q1 + u * support.width();
        return g;
    }

    // density values on grid(); the alignment Jacobian divides by the width
    std::vector<double> values() const {
        auto v = geom::density_values(scaled);
        for (double& d : v) d /= support.width();
        return v;
    }
};

inline ReconstructedDensity reconstruct(const FpcaBasis& basis, const Eigen::VectorXd& scores,
                                        const SupportInterval& support) {
    support.validate();
    const Eigen::VectorXd g = reconstruct_clr(basis, scores);
    ReconstructedDensity out;
    out.support = support;
    out.scaled = geom::density_from_clr(std::vector<double>(g.data(), g.data() + g.size()));
    return out;
}

// ---------------------------------------------------------------------------
// Support prediction from extreme quantile fields
// ---------------------------------------------------------------------------

struct SupportField {
    std::vector<SupportInterval> supports;
    std::vector<std::uint8_t> centroid_fallback;
};

// Averages the two extreme quantile fields over an in-polygon point grid per
// municipality. Municipalities too small to catch a grid point fall back to
// their centroid and are flagged.
inline SupportField predict_support(const mqsr::QuantileFieldSet& fields,
                                    const std::vector<Polygon>& municipalities,
                                    double spacing = 500.0) {
    if (!(spacing > 0.0)) throw ValidationError("grid spacing must be positive");
    if (fields.beta.cols() != 0)
        throw ValidationError("support prediction requires covariate-free quantile fields");
    int j_lo = -1, j_hi = -1;
    for (std::size_t j = 0; j < fields.alphas.size(); ++j) {
        if (std::abs(fields.alphas[j] - 0.01) < 1e-9) j_lo = static_cast<int>(j);
        if (std::abs(fields.alphas[j] - 0.99) < 1e-9) j_hi = static_cast<int>(j);
    }
    if (j_lo < 0 || j_hi < 0) {
        std::ostringstream os;
        os << "support prediction needs levels 0.01 and 0.99; fitted levels:";
        for (double a : fields.alphas) os << " " << a;
        throw ValidationError(os.str());
    }

    std::vector<Vec2> points;
    std::vector<std::pair<std::size_t, std::size_t>> ranges;  // [begin, end) per municipality
    SupportField out;
    out.centroid_fallback.assign(municipalities.size(), 0);
    for (std::size_t p = 0; p < municipalities.size(); ++p) {
        const auto& poly = municipalities[p];
        if (poly.outer.size() < 3) throw ValidationError("municipality polygon needs 3+ vertices");
        const auto bb = poly.bbox();
        const std::size_t begin = points.size();
        for (double y = bb.ymin + 0.5 * spacing; y < bb.ymax; y += spacing)
            for (double x = bb.xmin + 0.5 * spacing; x < bb.xmax; x += spacing) {
                const Vec2 pt{x, y};
                if (point_in_polygon(pt, poly) && fields.ops->contains(pt)) points.push_back(pt);
            }
        if (points.size() == begin) {
            const Vec2 c = polygon_centroid(poly);
            if (!fields.ops->contains(c)) {
                std::ostringstream os;
                os << "municipality " << p << " has no evaluable points inside the mesh";
                throw ValidationError(os.str());
            }
            points.push_back(c);
            out.centroid_fallback[p] = 1;
        }
        ranges.emplace_back(begin, points.size());
    }

    const Eigen::MatrixXd q =
        mqsr::evaluate(fields, points, Eigen::MatrixXd(static_cast<int>(points.size()), 0));
    out.supports.reserve(municipalities.size());
    for (std::size_t p = 0; p < municipalities.size(); ++p) {
        SupportInterval s;
        double lo = 0.0, hi = 0.0;
        const auto [b, e] = ranges[p];
        for (std::size_t i = b; i < e; ++i) {
            lo += q(j_lo, static_cast<int>(i));
            hi += q(j_hi, static_cast<int>(i));
        }
        const double cnt = static_cast<double>(e - b);
        s.q1 = lo / cnt;
        s.q99 = hi / cnt;
        if (!(s.q1 < s.q99)) {
            std::ostringstream os;
            os << "degenerate predicted support for municipality " << p << " (q1 " << s.q1
               << ", q99 " << s.q99 << ")";
            throw NumericError(os.str());
        }
        out.supports.push_back(s);
    }
    return out;
}

}  // namespace airdist::sde
