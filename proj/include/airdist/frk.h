#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include <json.hpp>

#include "airdist/errors.h"
#include "airdist/geometry.h"
#include "airdist/rng.h"

// Fixed Rank Kriging: a low-rank Gaussian spatial mixed model over a regular
// grid of basic area units (BAUs), with multi-resolution compactly supported
// radial basis functions, EM parameter estimation, per-BAU prediction, and
// area-weighted aggregation to polygons.
namespace airdist::frk {

// Regular cell grid covering the domain bounding box. Cells are addressed
// row-major (cell = row * ncols + col); the in-domain mask is decided by the
// cell centroid against the domain polygon.
struct BauGrid {
    Vec2 origin{0.0, 0.0};
    double cell_size = 0.0;
    int ncols = 0;
    int nrows = 0;
    std::vector<std::uint8_t> in_domain;
    // one row per cell; empty until covariates are attached
    Eigen::MatrixXd covariates;

    std::size_t n_cells() const { return static_cast<std::size_t>(ncols) * nrows; }
    std::size_t cell_index(int row, int col) const {
        return static_cast<std::size_t>(row) * ncols + col;
    }
    double cell_area() const { return cell_size * cell_size; }

    Vec2 centroid(std::size_t cell) const {
        const int row = static_cast<int>(cell) / ncols;
        const int col = static_cast<int>(cell) % ncols;
        return {origin.x + (col + 0.5) * cell_size, origin.y + (row + 0.5) * cell_size};
    }

    std::vector<std::size_t> domain_cells() const {
        std::vector<std::size_t> out;
        for (std::size_t c = 0; c < n_cells(); ++c)
            if (in_domain[c]) out.push_back(c);
        return out;
    }
};

inline BauGrid make_grid(const Polygon& domain, double cell_size) {
    if (!(cell_size > 0.0)) throw ValidationError("BAU cell size must be positive");
    if (domain.outer.size() < 3) throw ValidationError("domain polygon needs at least 3 vertices");
    const auto bb = domain.bbox();
    BauGrid g;
    g.origin = {bb.xmin, bb.ymin};
    g.cell_size = cell_size;
    g.ncols = std::max(1, static_cast<int>(std::ceil((bb.xmax - bb.xmin) / cell_size)));
    g.nrows = std::max(1, static_cast<int>(std::ceil((bb.ymax - bb.ymin) / cell_size)));
    g.in_domain.resize(g.n_cells());
    for (std::size_t c = 0; c < g.n_cells(); ++c)
        g.in_domain[c] = point_in_polygon(g.centroid(c), domain) ? 1 : 0;
    return g;
}

// Multi-resolution radial basis: per-center location and resolution level,
// per-level scale parameter.
struct BasisSet {
    std::vector<Vec2> centers;
    std::vector<int> level;
    std::vector<double> scales;

    std::size_t size() const { return centers.size(); }
    std::size_t n_levels() const { return scales.size(); }
};

// Centers are drawn without replacement from in-domain cell centroids; the
// first counts[0] draws form level 0, the next counts[1] level 1, and so on.
// Each level's scale is 1.5 times the median nearest-neighbor distance among
// its own centers.
inline BasisSet make_basis(const BauGrid& grid, const std::vector<int>& counts_per_level,
                           std::uint64_t seed) {
    if (counts_per_level.empty()) throw ValidationError("basis needs at least one level");
    std::size_t total = 0;
    for (int c : counts_per_level) {
        if (c < 2) throw ValidationError("each basis level needs at least 2 centers");
        total += static_cast<std::size_t>(c);
    }
    const auto cells = grid.domain_cells();
    if (total > cells.size())
        throw ValidationError("basis center count exceeds in-domain BAU count");

    Rng rng(seed);
    const auto picks = rng.sample_without_replacement(cells.size(), total);
    BasisSet basis;
    basis.centers.reserve(total);
    basis.level.reserve(total);
    std::size_t at = 0;
    for (std::size_t l = 0; l < counts_per_level.size(); ++l)
        for (int i = 0; i < counts_per_level[l]; ++i, ++at) {
            basis.centers.push_back(grid.centroid(cells[picks[at]]));
            basis.level.push_back(static_cast<int>(l));
        }

    basis.scales.resize(counts_per_level.size());
    for (std::size_t l = 0; l < counts_per_level.size(); ++l) {
        std::vector<Vec2> pts;
        for (std::size_t i = 0; i < basis.size(); ++i)
            if (basis.level[i] == static_cast<int>(l)) pts.push_back(basis.centers[i]);
        std::vector<double> nn(pts.size());
        for (std::size_t i = 0; i < pts.size(); ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < pts.size(); ++j)
                if (j != i) best = std::min(best, distance(pts[i], pts[j]));
            nn[i] = best;
        }
        std::sort(nn.begin(), nn.end());
        const std::size_t m = nn.size();
        const double median = m % 2 ? nn[m / 2] : 0.5 * (nn[m / 2 - 1] + nn[m / 2]);
        if (!(median > 0.0)) throw ValidationError("coincident basis centers within a level");
        basis.scales[l] = 1.5 * median;
    }
    return basis;
}

// Bisquare value of basis function j at point p.
inline double basis_value(const BasisSet& basis, std::size_t j, const Vec2& p) {
    const double sigma = basis.scales[basis.level[j]];
    const double d = distance(p, basis.centers[j]);
    if (d > sigma) return 0.0;
    const double u = 1.0 - (d / sigma) * (d / sigma);
    return u * u;
}

inline Eigen::MatrixXd eval_basis(const BasisSet& basis, const std::vector<Vec2>& points) {
    Eigen::MatrixXd phi(static_cast<int>(points.size()), static_cast<int>(basis.size()));
    for (std::size_t i = 0; i < points.size(); ++i)
        for (std::size_t j = 0; j < basis.size(); ++j)
            phi(static_cast<int>(i), static_cast<int>(j)) = basis_value(basis, j, points[i]);
    return phi;
}

// Block-exponential covariance of the basis coefficients: levels independent,
// within level l the entries are tau2[l] * exp(-d / phi[l]).
inline Eigen::MatrixXd build_covariance(const BasisSet& basis, const std::vector<double>& tau2,
                                        const std::vector<double>& phi) {
    const int r = static_cast<int>(basis.size());
    if (tau2.size() != basis.n_levels() || phi.size() != basis.n_levels())
        throw ValidationError("covariance parameters must match the basis levels");
    Eigen::MatrixXd k = Eigen::MatrixXd::Zero(r, r);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < r; ++j) {
            if (basis.level[i] != basis.level[j]) continue;
            const int l = basis.level[i];
            k(i, j) = tau2[l] * std::exp(-distance(basis.centers[i], basis.centers[j]) / phi[l]);
        }
    return k;
}

struct FrkModel {
    Eigen::VectorXd beta;
    std::vector<double> tau2;
    std::vector<double> phi;
    double sigma2_xi = 0.0;
    BasisSet basis;
    Eigen::VectorXd mu_eta;
    Eigen::MatrixXd sigma_eta;
    Eigen::MatrixXd sigma_beta;
    std::vector<double> loglik_path;
    bool converged = true;
    int iterations = 0;
};

struct FitOptions {
    double tol = 1e-6;
    int max_iter = 200;
};

namespace detail_frk {

// Per-level Cholesky factors of the block covariance; throws on a
// non-positive-definite block.
struct KFactor {
    std::vector<Eigen::LLT<Eigen::MatrixXd>> blocks;
    std::vector<std::vector<int>> index;

    static KFactor build(const BasisSet& basis, const std::vector<double>& tau2,
                         const std::vector<double>& phi) {
        KFactor f;
        f.index.resize(basis.n_levels());
        for (std::size_t i = 0; i < basis.size(); ++i)
            f.index[basis.level[i]].push_back(static_cast<int>(i));
        for (std::size_t l = 0; l < basis.n_levels(); ++l) {
            const auto& idx = f.index[l];
            const int m = static_cast<int>(idx.size());
            Eigen::MatrixXd c(m, m);
            for (int a = 0; a < m; ++a)
                for (int b = 0; b < m; ++b)
                    c(a, b) = tau2[l] * std::exp(-distance(basis.centers[idx[a]],
                                                           basis.centers[idx[b]]) /
                                                 phi[l]);
            f.blocks.emplace_back(c);
            if (f.blocks.back().info() != Eigen::Success)
                throw NumericError("basis coefficient covariance is not positive definite");
        }
        return f;
    }

    Eigen::MatrixXd inverse(int r) const {
        Eigen::MatrixXd inv = Eigen::MatrixXd::Zero(r, r);
        for (std::size_t l = 0; l < blocks.size(); ++l) {
            const auto& idx = index[l];
            const int m = static_cast<int>(idx.size());
            const Eigen::MatrixXd bi = blocks[l].solve(Eigen::MatrixXd::Identity(m, m));
            for (int a = 0; a < m; ++a)
                for (int b = 0; b < m; ++b) inv(idx[a], idx[b]) = bi(a, b);
        }
        return inv;
    }

    double log_det() const {
        double s = 0.0;
        for (const auto& b : blocks)
            for (int i = 0; i < b.matrixLLT().rows(); ++i)
                s += 2.0 * std::log(b.matrixLLT()(i, i));
        return s;
    }

    // Lower Cholesky factor of the full block matrix.
    Eigen::MatrixXd chol(int r) const {
        Eigen::MatrixXd lfull = Eigen::MatrixXd::Zero(r, r);
        for (std::size_t l = 0; l < blocks.size(); ++l) {
            const auto& idx = index[l];
            const int m = static_cast<int>(idx.size());
            const Eigen::MatrixXd lb = blocks[l].matrixL();
            for (int a = 0; a < m; ++a)
                for (int b = 0; b <= a; ++b) lfull(idx[a], idx[b]) = lb(a, b);
        }
        return lfull;
    }
};

// Observed-data log-likelihood of y ~ N(X beta, Phi K Phi' + sigma2 I),
// evaluated through the rank-r factorization so the n x n covariance is never
// formed.
inline double log_likelihood(const Eigen::VectorXd& y, const Eigen::MatrixXd& x,
                             const Eigen::MatrixXd& phi, const Eigen::MatrixXd& ptp,
                             const Eigen::VectorXd& beta, const KFactor& kf, double sigma2) {
    const int n = static_cast<int>(y.size());
    const int r = static_cast<int>(phi.cols());
    const Eigen::VectorXd resid = y - x * beta;
    double logdet = n * std::log(sigma2);
    double quad = resid.squaredNorm() / sigma2;
    if (r > 0) {
        const Eigen::MatrixXd l = kf.chol(r);
        Eigen::MatrixXd inner = l.transpose() * ptp * l / sigma2;
        inner.diagonal().array() += 1.0;
        const Eigen::LLT<Eigen::MatrixXd> illt(inner);
        if (illt.info() != Eigen::Success)
            throw NumericError("log-likelihood evaluation failed (capacitance not PD)");
        for (int i = 0; i < r; ++i) logdet += 2.0 * std::log(illt.matrixLLT()(i, i));

        const Eigen::MatrixXd q = ptp / sigma2 + kf.inverse(r);
        const Eigen::LDLT<Eigen::MatrixXd> qldlt(q);
        const Eigen::VectorXd u = phi.transpose() * resid;
        quad -= u.dot(qldlt.solve(u)) / (sigma2 * sigma2);
    }
    return -0.5 * (n * std::log(2.0 * M_PI) + logdet + quad);
}

}  // namespace detail_frk

// Posterior of the basis coefficients given data, with the model's fixed
// effects and covariance parameters held fixed. Updates mu_eta / sigma_eta.
inline void condition_on_data(FrkModel& model, const std::vector<Vec2>& locations,
                              const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
    const int r = static_cast<int>(model.basis.size());
    if (r == 0) {
        model.mu_eta.resize(0);
        model.sigma_eta.resize(0, 0);
        return;
    }
    const Eigen::MatrixXd phi = eval_basis(model.basis, locations);
    const auto kf = detail_frk::KFactor::build(model.basis, model.tau2, model.phi);
    Eigen::MatrixXd q = phi.transpose() * phi / model.sigma2_xi + kf.inverse(r);
    const Eigen::LDLT<Eigen::MatrixXd> qldlt(q);
    if (qldlt.info() != Eigen::Success)
        throw NumericError("basis coefficient posterior is singular");
    model.sigma_eta = qldlt.solve(Eigen::MatrixXd::Identity(r, r));
    model.mu_eta = qldlt.solve(phi.transpose() * (y - x * model.beta)) / model.sigma2_xi;
}

// EM fit of y = X beta + Phi eta + xi. The M-step is closed-form in beta and
// sigma2 and profiles each level's (tau2, phi) over a candidate range set that
// always contains the current phi, so every iteration is a generalized EM
// step and the log-likelihood cannot decrease.
inline FrkModel fit_em(const std::vector<Vec2>& locations, const Eigen::MatrixXd& x,
                       const Eigen::VectorXd& y, const BasisSet& basis, const BauGrid& grid,
                       const FitOptions& opts = {}) {
    (void)grid;
    const int n = static_cast<int>(y.size());
    const int q = static_cast<int>(x.cols());
    const int r = static_cast<int>(basis.size());
    const int nl = static_cast<int>(basis.n_levels());
    if (locations.size() != static_cast<std::size_t>(n) || x.rows() != n)
        throw ValidationError("locations, covariates and responses must align");
    if (n < q + 2 * nl + 1)
        throw ValidationError("too few observations for the requested model size");

    const Eigen::MatrixXd phi = eval_basis(basis, locations);
    const Eigen::MatrixXd ptp = phi.transpose() * phi;
    const Eigen::LDLT<Eigen::MatrixXd> xtx(x.transpose() * x);
    if (xtx.info() != Eigen::Success) throw NumericError("covariate matrix is rank deficient");

    const double var_y = (y.array() - y.mean()).square().sum() / n;
    const double sigma2_floor = std::max(1e-10 * var_y, 1e-30 * (1.0 + y.mean() * y.mean()));
    const double tau2_floor = 1e-12 * var_y + 1e-300;

    FrkModel model;
    model.basis = basis;
    model.beta = xtx.solve(x.transpose() * y);
    double resid_var = (y - x * model.beta).squaredNorm() / n;
    model.sigma2_xi = std::max(0.5 * resid_var, sigma2_floor);
    model.tau2.assign(nl, std::max(0.5 * resid_var / std::max(1, nl), tau2_floor));
    model.phi.assign(nl, 1.0);
    for (int l = 0; l < nl; ++l) model.phi[l] = basis.scales[l];

    auto kf = detail_frk::KFactor::build(basis, model.tau2, model.phi);
    double ll = detail_frk::log_likelihood(y, x, phi, ptp, model.beta, kf, model.sigma2_xi);
    if (!std::isfinite(ll)) throw NumericError("non-finite likelihood at initialization");
    model.loglik_path.push_back(ll);

    Eigen::VectorXd mu = Eigen::VectorXd::Zero(r);
    Eigen::MatrixXd sigma_eta = Eigen::MatrixXd::Zero(r, r);
    model.converged = false;
    for (int it = 0; it < opts.max_iter; ++it) {
        // E-step
        if (r > 0) {
            const Eigen::MatrixXd qm = ptp / model.sigma2_xi + kf.inverse(r);
            const Eigen::LDLT<Eigen::MatrixXd> qldlt(qm);
            if (qldlt.info() != Eigen::Success)
                throw NumericError("posterior precision is singular during EM");
            sigma_eta = qldlt.solve(Eigen::MatrixXd::Identity(r, r));
            mu = qldlt.solve(phi.transpose() * (y - x * model.beta)) / model.sigma2_xi;
        }

        // M-step: fixed effects, nugget, then per-level profiled (tau2, phi)
        model.beta = xtx.solve(x.transpose() * (y - phi * mu));
        const Eigen::VectorXd resid = y - x * model.beta - phi * mu;
        const double trace_term = r > 0 ? ptp.cwiseProduct(sigma_eta).sum() : 0.0;
        model.sigma2_xi = std::max((resid.squaredNorm() + trace_term) / n, sigma2_floor);

        for (int l = 0; l < nl; ++l) {
            const auto& idx = kf.index[l];
            const int m = static_cast<int>(idx.size());
            Eigen::MatrixXd s(m, m);
            for (int a = 0; a < m; ++a)
                for (int b = 0; b < m; ++b)
                    s(a, b) = sigma_eta(idx[a], idx[b]) + mu[idx[a]] * mu[idx[b]];
            std::vector<double> candidates = {model.phi[l]};
            for (double f : {0.25, 0.5, 1.0, 2.0, 4.0, 8.0}) candidates.push_back(basis.scales[l] * f);
            double best_obj = std::numeric_limits<double>::infinity();
            double best_phi = model.phi[l], best_tau2 = model.tau2[l];
            for (double cand : candidates) {
                Eigen::MatrixXd c(m, m);
                for (int a = 0; a < m; ++a)
                    for (int b = 0; b < m; ++b)
                        c(a, b) = std::exp(
                            -distance(basis.centers[idx[a]], basis.centers[idx[b]]) / cand);
                const Eigen::LLT<Eigen::MatrixXd> cllt(c);
                if (cllt.info() != Eigen::Success) continue;
                const double tau2 =
                    std::max(cllt.solve(s).trace() / m, tau2_floor);
                double logdet_c = 0.0;
                for (int i = 0; i < m; ++i) logdet_c += 2.0 * std::log(cllt.matrixLLT()(i, i));
                const double obj = m * std::log(tau2) + logdet_c;
                if (std::isfinite(obj) && obj < best_obj) {
                    best_obj = obj;
                    best_phi = cand;
                    best_tau2 = tau2;
                }
            }
            model.phi[l] = best_phi;
            model.tau2[l] = best_tau2;
        }

        kf = detail_frk::KFactor::build(basis, model.tau2, model.phi);
        ll = detail_frk::log_likelihood(y, x, phi, ptp, model.beta, kf, model.sigma2_xi);
        if (!std::isfinite(ll)) throw NumericError("non-finite likelihood during EM");
        const double prev = model.loglik_path.back();
        model.loglik_path.push_back(ll);
        model.iterations = it + 1;
        if (std::abs(ll - prev) < opts.tol * (1.0 + std::abs(ll))) {
            model.converged = true;
            break;
        }
    }

    // final posterior and fixed-effect covariance at the fitted parameters
    condition_on_data(model, locations, x, y);
    Eigen::MatrixXd xsx = x.transpose() * x / model.sigma2_xi;
    if (r > 0) {
        const Eigen::MatrixXd px = phi.transpose() * x;
        xsx -= px.transpose() * model.sigma_eta * px /
               (model.sigma2_xi * model.sigma2_xi);
    }
    const Eigen::LDLT<Eigen::MatrixXd> xsx_ldlt(xsx);
    model.sigma_beta = xsx_ldlt.solve(Eigen::MatrixXd::Identity(q, q));
    return model;
}

struct FrkPrediction {
    Eigen::VectorXd mean;
    Eigen::VectorXd variance;
};

// Universal-kriging prediction at every in-domain BAU centroid; out-of-domain
// cells are NaN. The variance combines the coefficient posterior, the fixed
// effect uncertainty and the fine-scale variance.
inline FrkPrediction predict(const FrkModel& model, const BauGrid& grid) {
    const int q = static_cast<int>(model.beta.size());
    const int r = static_cast<int>(model.basis.size());
    const int nc = static_cast<int>(grid.n_cells());
    if (grid.covariates.rows() != nc || grid.covariates.cols() != q)
        throw ValidationError("BAU covariates missing or not matching the model's fixed effects");
    FrkPrediction out;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    out.mean = Eigen::VectorXd::Constant(nc, nan);
    out.variance = Eigen::VectorXd::Constant(nc, nan);
    Eigen::VectorXd phi_row(r);
    for (int c = 0; c < nc; ++c) {
        if (!grid.in_domain[static_cast<std::size_t>(c)]) continue;
        const Vec2 s = grid.centroid(static_cast<std::size_t>(c));
        const Eigen::VectorXd xc = grid.covariates.row(c);
        double mean = xc.dot(model.beta);
        double var = xc.dot(model.sigma_beta * xc) + model.sigma2_xi;
        if (r > 0) {
            for (int j = 0; j < r; ++j)
                phi_row[j] = basis_value(model.basis, static_cast<std::size_t>(j), s);
            mean += phi_row.dot(model.mu_eta);
            var += phi_row.dot(model.sigma_eta * phi_row);
        }
        out.mean[c] = mean;
        out.variance[c] = std::max(var, 0.0);
    }
    return out;
}

namespace detail_frk {

// Area of the intersection of a simple ring with an axis-aligned rectangle
// (Sutherland-Hodgman against the four half-planes).
inline double ring_rect_overlap(const Ring& ring, double x0, double y0, double x1, double y1) {
    std::vector<Vec2> poly(ring.begin(), ring.end());
    const auto clip_pass = [&poly](auto keep, auto cut) {
        std::vector<Vec2> out;
        out.reserve(poly.size() + 4);
        const std::size_t n = poly.size();
        for (std::size_t i = 0; i < n; ++i) {
            const Vec2& a = poly[i];
            const Vec2& b = poly[(i + 1) % n];
            const bool ka = keep(a), kb = keep(b);
            if (ka) {
                out.push_back(a);
                if (!kb) out.push_back(cut(a, b));
            } else if (kb) {
                out.push_back(cut(a, b));
            }
        }
        poly = std::move(out);
    };
    clip_pass([x0](const Vec2& p) { return p.x >= x0; },
              [x0](const Vec2& a, const Vec2& b) {
                  const double t = (x0 - a.x) / (b.x - a.x);
                  return Vec2{x0, a.y + t * (b.y - a.y)};
              });
    if (poly.size() < 3) return 0.0;
    clip_pass([x1](const Vec2& p) { return p.x <= x1; },
              [x1](const Vec2& a, const Vec2& b) {
                  const double t = (x1 - a.x) / (b.x - a.x);
                  return Vec2{x1, a.y + t * (b.y - a.y)};
              });
    if (poly.size() < 3) return 0.0;
    clip_pass([y0](const Vec2& p) { return p.y >= y0; },
              [y0](const Vec2& a, const Vec2& b) {
                  const double t = (y0 - a.y) / (b.y - a.y);
                  return Vec2{a.x + t * (b.x - a.x), y0};
              });
    if (poly.size() < 3) return 0.0;
    clip_pass([y1](const Vec2& p) { return p.y <= y1; },
              [y1](const Vec2& a, const Vec2& b) {
                  const double t = (y1 - a.y) / (b.y - a.y);
                  return Vec2{a.x + t * (b.x - a.x), y1};
              });
    if (poly.size() < 3) return 0.0;
    return std::abs(ring_signed_area(poly));
}

inline double polygon_rect_overlap(const Polygon& poly, double x0, double y0, double x1,
                                   double y1) {
    double a = ring_rect_overlap(poly.outer, x0, y0, x1, y1);
    for (const Ring& h : poly.holes) a -= ring_rect_overlap(h, x0, y0, x1, y1);
    return std::max(a, 0.0);
}

}  // namespace detail_frk

struct Aggregation {
    Eigen::VectorXd value;
    std::vector<double> overlap_area;
    std::vector<std::uint8_t> has_overlap;
};

// Area-weighted mean of per-BAU values over each polygon. Weights are the
// overlap areas between in-domain cells and the polygon; a polygon that
// overlaps no in-domain cell is flagged and its value left NaN.
inline Aggregation aggregate_to_polygons(const BauGrid& grid, const Eigen::VectorXd& values,
                                         const std::vector<Polygon>& polygons) {
    if (values.size() != static_cast<int>(grid.n_cells()))
        throw ValidationError("per-BAU values must cover every grid cell");
    Aggregation agg;
    agg.value = Eigen::VectorXd::Constant(static_cast<int>(polygons.size()),
                                          std::numeric_limits<double>::quiet_NaN());
    agg.overlap_area.assign(polygons.size(), 0.0);
    agg.has_overlap.assign(polygons.size(), 0);
    for (std::size_t p = 0; p < polygons.size(); ++p) {
        const auto bb = polygons[p].bbox();
        const int c0 = std::clamp(
            static_cast<int>(std::floor((bb.xmin - grid.origin.x) / grid.cell_size)), 0,
            grid.ncols - 1);
        const int c1 = std::clamp(
            static_cast<int>(std::ceil((bb.xmax - grid.origin.x) / grid.cell_size)), 0,
            grid.ncols - 1);
        const int r0 = std::clamp(
            static_cast<int>(std::floor((bb.ymin - grid.origin.y) / grid.cell_size)), 0,
            grid.nrows - 1);
        const int r1 = std::clamp(
            static_cast<int>(std::ceil((bb.ymax - grid.origin.y) / grid.cell_size)), 0,
            grid.nrows - 1);
        double total = 0.0, acc = 0.0;
        for (int row = r0; row <= r1; ++row)
            for (int col = c0; col <= c1; ++col) {
                const std::size_t cell = grid.cell_index(row, col);
                if (!grid.in_domain[cell]) continue;
                const double x0 = grid.origin.x + col * grid.cell_size;
                const double y0 = grid.origin.y + row * grid.cell_size;
                const double w = detail_frk::polygon_rect_overlap(
                    polygons[p], x0, y0, x0 + grid.cell_size, y0 + grid.cell_size);
                if (w <= 0.0) continue;
                total += w;
                acc += w * values[static_cast<int>(cell)];
            }
        agg.overlap_area[p] = total;
        if (total > 1e-12 * grid.cell_area()) {
            agg.has_overlap[p] = 1;
            agg.value[static_cast<int>(p)] = acc / total;
        }
    }
    return agg;
}

// ---------------------------------------------------------------------------
// Model persistence
// ---------------------------------------------------------------------------

inline constexpr int kModelFormatVersion = 1;

namespace detail_frk {

inline nlohmann::json matrix_json(const Eigen::MatrixXd& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (int i = 0; i < m.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
    const int rows = static_cast<int>(j.size());
    const int cols = rows > 0 ? static_cast<int>(j.at(0).size()) : 0;
    Eigen::MatrixXd m(rows, cols);
    for (int i = 0; i < rows; ++i) {
        if (static_cast<int>(j.at(i).size()) != cols)
            throw ValidationError("ragged matrix in model file");
        for (int c = 0; c < cols; ++c) m(i, c) = j.at(i).at(c).get<double>();
    }
    return m;
}

}  // namespace detail_frk

inline void save_model(const FrkModel& model, const std::string& path) {
    nlohmann::json j;
    j["format_version"] = kModelFormatVersion;
    j["beta"] = std::vector<double>(model.beta.data(), model.beta.data() + model.beta.size());
    j["tau2"] = model.tau2;
    j["phi"] = model.phi;
    j["sigma2_xi"] = model.sigma2_xi;
    nlohmann::json centers = nlohmann::json::array();
    for (const Vec2& c : model.basis.centers) centers.push_back({c.x, c.y});
    j["basis"] = {{"centers", std::move(centers)},
                  {"level", model.basis.level},
                  {"scales", model.basis.scales}};
    j["posterior"] = {
        {"mean",
         std::vector<double>(model.mu_eta.data(), model.mu_eta.data() + model.mu_eta.size())},
        {"cov", detail_frk::matrix_json(model.sigma_eta)}};
    j["sigma_beta"] = detail_frk::matrix_json(model.sigma_beta);
    j["converged"] = model.converged;
    j["iterations"] = model.iterations;
    j["loglik_path"] = model.loglik_path;
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot write model file: " + path);
    out << j.dump(2) << "\n";
    if (!out) throw ValidationError("failed writing model file: " + path);
}

inline FrkModel load_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot read model file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("malformed model file " + path + ": " + e.what());
    }
    try {
        if (j.at("format_version").get<int>() != kModelFormatVersion)
            throw ValidationError("unsupported model format version in " + path);
        FrkModel m;
        const auto beta = j.at("beta").get<std::vector<double>>();
        m.beta = Eigen::Map<const Eigen::VectorXd>(beta.data(), static_cast<int>(beta.size()));
        m.tau2 = j.at("tau2").get<std::vector<double>>();
        m.phi = j.at("phi").get<std::vector<double>>();
        m.sigma2_xi = j.at("sigma2_xi").get<double>();
        for (const auto& c : j.at("basis").at("centers"))
            m.basis.centers.push_back({c.at(0).get<double>(), c.at(1).get<double>()});
        m.basis.level = j.at("basis").at("level").get<std::vector<int>>();
        m.basis.scales = j.at("basis").at("scales").get<std::vector<double>>();
        const auto mean = j.at("posterior").at("mean").get<std::vector<double>>();
        m.mu_eta = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<int>(mean.size()));
        m.sigma_eta = detail_frk::matrix_from_json(j.at("posterior").at("cov"));
        m.sigma_beta = detail_frk::matrix_from_json(j.at("sigma_beta"));
        m.converged = j.at("converged").get<bool>();
        m.iterations = j.at("iterations").get<int>();
        m.loglik_path = j.at("loglik_path").get<std::vector<double>>();
        if (m.basis.level.size() != m.basis.centers.size())
            throw ValidationError("basis levels and centers disagree in " + path);
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("incomplete model file " + path + ": " + e.what());
    }
}

}  // namespace airdist::frk
