#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <json.hpp>

#include "airdist/errors.h"
#include "airdist/geometry.h"
#include "airdist/mesh.h"
#include "airdist/rng.h"

// Simultaneous estimation of non-crossing quantile fields: per level j a
// linear covariate effect beta_j plus a finite element field f_j, fitted by
// minimizing pinball loss + Laplacian roughness + a hinge crossing penalty
// via majorization-minimization.
namespace airdist::mqsr {

inline double pinball(double alpha, double u) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("quantile level must be in (0,1)");
    return u * (alpha - (u < 0.0 ? 1.0 : 0.0));
}

struct QuantileLevels {
    std::vector<double> alphas;

    void validate() const {
        if (alphas.empty()) throw ValidationError("need at least one quantile level");
        double prev = 0.0;
        for (double a : alphas) {
            if (!(a > 0.0 && a < 1.0)) throw ValidationError("quantile levels must lie in (0,1)");
            if (!(a > prev)) throw ValidationError("quantile levels must be strictly increasing");
            prev = a;
        }
    }
};

// Hinge crossing penalty over consecutive level pairs of an r x n matrix of
// evaluated quantiles.
inline double crossing_penalty(const Eigen::MatrixXd& values, double gamma, double eps) {
    double s = 0.0;
    for (int j = 0; j + 1 < values.rows(); ++j)
        for (int i = 0; i < values.cols(); ++i)
            s += std::max(0.0, eps - (values(j + 1, i) - values(j, i)));
    return gamma * s;
}

// Linear-interpolation empirical quantile of unsorted data.
inline double empirical_quantile(std::vector<double> data, double alpha) {
    if (data.empty()) throw ValidationError("empirical quantile of empty data");
    std::sort(data.begin(), data.end());
    const double h = (static_cast<double>(data.size()) - 1.0) * alpha;
    const std::size_t lo = static_cast<std::size_t>(h);
    if (lo + 1 >= data.size()) return data.back();
    const double frac = h - static_cast<double>(lo);
    return data[lo] + frac * (data[lo + 1] - data[lo]);
}

struct FitOptions {
    double tol = 1e-6;
    int max_iter = 500;
    // 0 means derive the default: 1e6 times the per-observation pinball loss
    // at the initializer
    double gamma = 0.0;
    double eps = 0.01;
};

struct QuantileFieldSet {
    std::shared_ptr<const mesh::FemOperators> ops;
    std::vector<double> alphas;
    Eigen::MatrixXd beta;  // r x q
    Eigen::MatrixXd f;     // r x N
    std::vector<double> lambda;
    double gamma = 0.0;
    double eps = 0.0;
    std::vector<double> objective_path;
    int iterations = 0;
    bool converged = false;

    std::size_t n_levels() const { return alphas.size(); }
};

// Evaluates all quantile fields at the given points; covariates must have one
// row per point (zero columns when the fit used none). Outputs are checked,
// then clamped, to be non-decreasing across levels at every point.
inline Eigen::MatrixXd evaluate(const QuantileFieldSet& fields, const std::vector<Vec2>& points,
                                const Eigen::MatrixXd& covariates) {
    const int r = static_cast<int>(fields.n_levels());
    const int np = static_cast<int>(points.size());
    if (covariates.rows() != np)
        throw ValidationError("covariates must have one row per evaluation point");
    if (covariates.cols() != fields.beta.cols())
        throw ValidationError("covariate count does not match the fitted model");
    const mesh::SparseMat e = fields.ops->evaluation(points);
    Eigen::MatrixXd q(r, np);
    for (int j = 0; j < r; ++j)
        q.row(j) = (e * fields.f.row(j).transpose() + covariates * fields.beta.row(j).transpose())
                       .transpose();
    const double tol = 1e-9 * (1.0 + q.cwiseAbs().maxCoeff());
    for (int i = 0; i < np; ++i)
        for (int j = 0; j + 1 < r; ++j) {
            if (q(j + 1, i) < q(j, i) - tol)
                throw NumericError("fitted quantiles cross at an evaluation point");
            q(j + 1, i) = std::max(q(j + 1, i), q(j, i));
        }
    return q;
}

namespace detail_mqsr {

// Pool-adjacent-violators: least-squares isotonic (non-decreasing) projection.
inline void isotonic_inplace(std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<double> level(n), weight(n);
    std::vector<std::size_t> len(n);
    std::size_t blocks = 0;
    for (std::size_t i = 0; i < n; ++i) {
        level[blocks] = v[i];
        weight[blocks] = 1.0;
        len[blocks] = 1;
        ++blocks;
        while (blocks > 1 && level[blocks - 2] > level[blocks - 1]) {
            const double w = weight[blocks - 2] + weight[blocks - 1];
            level[blocks - 2] =
                (level[blocks - 2] * weight[blocks - 2] + level[blocks - 1] * weight[blocks - 1]) /
                w;
            weight[blocks - 2] = w;
            len[blocks - 2] += len[blocks - 1];
            --blocks;
        }
    }
    std::size_t at = 0;
    for (std::size_t b = 0; b < blocks; ++b)
        for (std::size_t k = 0; k < len[b]; ++k) v[at++] = level[b];
}

struct StationRow {
    // mesh vertices and barycentric weights of the station location
    int idx[3];
    double w[3];
};

}  // namespace detail_mqsr

// Joint MM fit of all quantile levels. `samples[i]` holds the observations of
// station i; `covariates` is n_stations x q and must not contain a constant
// column (the fields absorb the intercept). `lambda` has one entry per level
// or a single shared entry.
inline QuantileFieldSet fit(std::shared_ptr<const mesh::FemOperators> ops,
                            const std::vector<Vec2>& locations,
                            const std::vector<std::vector<double>>& samples,
                            const Eigen::MatrixXd& covariates, const QuantileLevels& levels,
                            std::vector<double> lambda, const FitOptions& opts = {}) {
    levels.validate();
    if (!ops) throw ValidationError("quantile fit needs assembled mesh operators");
    const int n_st = static_cast<int>(locations.size());
    const int r = static_cast<int>(levels.alphas.size());
    const int q = static_cast<int>(covariates.cols());
    const int nv = static_cast<int>(ops->n_dof());
    if (n_st == 0) throw ValidationError("quantile fit needs at least one station");
    if (samples.size() != static_cast<std::size_t>(n_st) || covariates.rows() != n_st)
        throw ValidationError("stations, samples and covariates must align");
    for (const auto& s : samples)
        if (s.empty()) throw ValidationError("every station needs at least one observation");
    if (lambda.size() == 1) lambda.assign(r, lambda[0]);
    if (lambda.size() != static_cast<std::size_t>(r))
        throw ValidationError("one smoothing parameter per level (or a single shared one)");
    for (double l : lambda)
        if (!(l > 0.0)) throw ValidationError("smoothing parameters must be positive");
    if (!(opts.eps > 0.0)) throw ValidationError("crossing margin eps must be positive");
    for (int c = 0; c < q; ++c) {
        const double span = covariates.col(c).maxCoeff() - covariates.col(c).minCoeff();
        if (span == 0.0)
            throw ValidationError(
                "constant covariate column; the spatial fields absorb the intercept");
    }

    // station geometry (throws when a station lies outside the mesh)
    const mesh::SparseMat e = ops->evaluation(locations);
    std::vector<detail_mqsr::StationRow> rows(n_st);
    {
        std::vector<int> fill(n_st, 0);
        for (int k = 0; k < e.outerSize(); ++k)
            for (mesh::SparseMat::InnerIterator it(e, k); it; ++it) {
                auto& row = rows[it.row()];
                row.idx[fill[it.row()]] = static_cast<int>(it.col());
                row.w[fill[it.row()]] = it.value();
                ++fill[it.row()];
            }
        for (int i = 0; i < n_st; ++i)
            for (int k = fill[i]; k < 3; ++k) {
                rows[i].idx[k] = rows[i].idx[0];
                rows[i].w[k] = 0.0;
            }
    }

    std::vector<double> pooled;
    for (const auto& s : samples) pooled.insert(pooled.end(), s.begin(), s.end());
    const double n_total = static_cast<double>(pooled.size());
    const double mean_y = std::accumulate(pooled.begin(), pooled.end(), 0.0) / n_total;
    double scale = 0.0;
    for (double y : pooled) scale += (y - mean_y) * (y - mean_y);
    scale = std::sqrt(scale / n_total);
    const double delta = 1e-6 * std::max(scale, 1e-12);

    // initialization: smoothed centered station means shifted by the pooled
    // empirical quantile of each level; crossing-free by construction
    const int bs = q + nv;  // per-level block size
    Eigen::VectorXd z = Eigen::VectorXd::Zero(r * bs);
    {
        Eigen::VectorXd means(n_st);
        for (int i = 0; i < n_st; ++i)
            means[i] = std::accumulate(samples[i].begin(), samples[i].end(), 0.0) /
                       static_cast<double>(samples[i].size());
        const double center = means.mean();
        for (int j = 0; j < r; ++j) {
            const Eigen::VectorXd base = mesh::smooth_covariate(
                *ops, locations, (means.array() - center).matrix(), lambda[j]);
            const double shift = empirical_quantile(pooled, levels.alphas[j]);
            z.segment(j * bs + q, nv) = base.array() + shift;
        }
    }

    const auto predict_station = [&](const Eigen::VectorXd& zz, int i, int j) {
        const auto& row = rows[i];
        double p = 0.0;
        for (int k = 0; k < 3; ++k) p += row.w[k] * zz[j * bs + q + row.idx[k]];
        for (int c = 0; c < q; ++c) p += covariates(i, c) * zz[j * bs + c];
        return p;
    };

    FitOptions cfg = opts;
    const auto objective = [&](const Eigen::VectorXd& zz, double gamma) {
        double loss = 0.0;
        for (int j = 0; j < r; ++j)
            for (int i = 0; i < n_st; ++i) {
                const double p = predict_station(zz, i, j);
                for (double y : samples[static_cast<std::size_t>(i)])
                    loss += pinball(levels.alphas[j], y - p);
            }
        loss /= static_cast<double>(n_st);
        for (int j = 0; j < r; ++j)
            loss += lambda[j] * ops->roughness(zz.segment(j * bs + q, nv));
        for (int j = 0; j + 1 < r; ++j)
            for (int i = 0; i < n_st; ++i) {
                const double gap = predict_station(zz, i, j + 1) - predict_station(zz, i, j);
                loss += gamma * std::max(0.0, cfg.eps - gap);
            }
        return loss;
    };

    double gamma = cfg.gamma;
    if (!(gamma > 0.0)) {
        double l0 = 0.0;
        for (int j = 0; j < r; ++j)
            for (int i = 0; i < n_st; ++i) {
                const double p = predict_station(z, i, j);
                for (double y : samples[static_cast<std::size_t>(i)])
                    l0 += pinball(levels.alphas[j], y - p);
            }
        l0 /= (static_cast<double>(r) * n_total);
        gamma = 1e6 * std::max(l0, 1e-12 * std::max(scale, 1e-12));
    }

    QuantileFieldSet out;
    out.ops = ops;
    out.alphas = levels.alphas;
    out.lambda = lambda;
    out.eps = cfg.eps;

    const mesh::SparseMat& pen = ops->penalty();
    const double inv_n = 1.0 / static_cast<double>(n_st);

    const int max_escalations = 3;
    for (int attempt = 0;; ++attempt) {
        double j_prev = objective(z, gamma);
        out.objective_path.assign(1, j_prev);
        out.converged = false;

        for (int it = 0; it < cfg.max_iter; ++it) {
            // quadratic majorizer at z: pinball |u| <= u^2/(2c) + c/2 with
            // c = |u0| + delta, hinge likewise on eps - gap
            std::vector<Eigen::Triplet<double>> trips;
            trips.reserve(static_cast<std::size_t>(n_st) * r * 16 + pen.nonZeros() * r + r * bs);
            Eigen::VectorXd rhs = Eigen::VectorXd::Zero(r * bs);

            const auto add_rank1 = [&](int i, int jblk_a, int jblk_b, double coef) {
                // coef * u_i u_i' into block (jblk_a, jblk_b)
                const auto& row = rows[i];
                const int oa = jblk_a * bs, ob = jblk_b * bs;
                for (int a = 0; a < q + 3; ++a) {
                    const int ia = a < q ? oa + a : oa + q + row.idx[a - q];
                    const double va = a < q ? covariates(i, a) : row.w[a - q];
                    if (va == 0.0) continue;
                    for (int b = 0; b < q + 3; ++b) {
                        const int ib = b < q ? ob + b : ob + q + row.idx[b - q];
                        const double vb = b < q ? covariates(i, b) : row.w[b - q];
                        if (vb == 0.0) continue;
                        trips.emplace_back(ia, ib, coef * va * vb);
                    }
                }
            };
            const auto add_vec = [&](int i, int jblk, double coef) {
                const auto& row = rows[i];
                const int o = jblk * bs;
                for (int c = 0; c < q; ++c) rhs[o + c] += coef * covariates(i, c);
                for (int k = 0; k < 3; ++k) rhs[o + q + row.idx[k]] += coef * row.w[k];
            };

            for (int j = 0; j < r; ++j) {
                const double am = levels.alphas[j] - 0.5;
                for (int i = 0; i < n_st; ++i) {
                    const double p = predict_station(z, i, j);
                    double wsum = 0.0, bsum = 0.0;
                    for (double y : samples[static_cast<std::size_t>(i)]) {
                        const double c = std::abs(y - p) + delta;
                        wsum += 1.0 / (2.0 * c);
                        bsum += y / (2.0 * c) + am;
                    }
                    add_rank1(i, j, j, inv_n * wsum);
                    add_vec(i, j, inv_n * bsum);
                }
                // roughness: lambda_j f' P f contributes 2 lambda_j P
                for (int k = 0; k < pen.outerSize(); ++k)
                    for (mesh::SparseMat::InnerIterator it2(pen, k); it2; ++it2)
                        trips.emplace_back(j * bs + q + static_cast<int>(it2.row()),
                                           j * bs + q + static_cast<int>(it2.col()),
                                           2.0 * lambda[j] * it2.value());
            }
            for (int j = 0; j + 1 < r; ++j)
                for (int i = 0; i < n_st; ++i) {
                    const double gap = predict_station(z, i, j + 1) - predict_station(z, i, j);
                    const double c = std::abs(cfg.eps - gap) + delta;
                    const double quad = gamma / (2.0 * c);
                    const double lin = gamma * (cfg.eps / (2.0 * c) + 0.5);
                    add_rank1(i, j, j, quad);
                    add_rank1(i, j + 1, j + 1, quad);
                    add_rank1(i, j, j + 1, -quad);
                    add_rank1(i, j + 1, j, -quad);
                    add_vec(i, j + 1, lin);
                    add_vec(i, j, -lin);
                }

            Eigen::SparseMatrix<double> h(r * bs, r * bs);
            h.setFromTriplets(trips.begin(), trips.end());
            // proximal ridge keeps the system positive definite without
            // disturbing the descent property
            double diag_scale = 0.0;
            for (int i = 0; i < h.rows(); ++i) diag_scale += h.coeff(i, i);
            diag_scale /= static_cast<double>(h.rows());
            const double rho = 1e-12 * std::max(diag_scale, 1e-300);
            for (int i = 0; i < h.rows(); ++i) h.coeffRef(i, i) += 2.0 * rho;
            rhs += 2.0 * rho * z;

            Eigen::VectorXd d(h.rows());
            for (int i = 0; i < h.rows(); ++i) {
                const double hii = h.coeff(i, i);
                d[i] = hii > 0.0 ? 1.0 / std::sqrt(hii) : 1.0;
            }
            Eigen::SparseMatrix<double> hs = d.asDiagonal() * h * d.asDiagonal();
            Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(hs);
            if (solver.info() != Eigen::Success) {
                std::ostringstream os;
                os << "quantile system factorization failed (lambda:";
                for (double l : lambda) os << " " << l;
                os << ")";
                throw NumericError(os.str());
            }
            Eigen::VectorXd z_hat = d.asDiagonal() * solver.solve(d.asDiagonal() * rhs).eval();
            if (!z_hat.allFinite()) {
                std::ostringstream os;
                os << "quantile system solve produced non-finite coefficients (lambda:";
                for (double l : lambda) os << " " << l;
                os << ")";
                throw NumericError(os.str());
            }

            // backtracking guard: the majorizer uses the formed penalty
            // matrix, whose roundoff can differ from the exact objective at
            // the 1e-10 level near convergence
            Eigen::VectorXd z_new = z_hat;
            double j_new = objective(z_new, gamma);
            int halvings = 0;
            while (j_new > j_prev && halvings < 40) {
                z_new = 0.5 * (z_new + z);
                j_new = objective(z_new, gamma);
                ++halvings;
            }
            if (j_new > j_prev) {
                out.converged = true;  // no descent direction left
                break;
            }
            double rel = 0.0;
            for (int i = 0; i < z.size(); ++i)
                rel = std::max(rel, std::abs(z_new[i] - z[i]) / (1.0 + std::abs(z[i])));
            z = z_new;
            out.objective_path.push_back(j_new);
            j_prev = j_new;
            out.iterations = it + 1;
            if (rel < cfg.tol) {
                out.converged = true;
                break;
            }
        }

        // post-fit monotonicity: vertex fields and data-location surfaces
        const double mono_tol = 1e-9 * std::max(scale, 1e-12);
        bool ok = true;
        for (int v = 0; v < nv && ok; ++v)
            for (int j = 0; j + 1 < r; ++j)
                if (z[(j + 1) * bs + q + v] < z[j * bs + q + v] - mono_tol) {
                    ok = false;
                    break;
                }
        for (int i = 0; i < n_st && ok; ++i)
            for (int j = 0; j + 1 < r; ++j)
                if (predict_station(z, i, j + 1) < predict_station(z, i, j) - mono_tol) {
                    ok = false;
                    break;
                }
        if (ok || attempt >= max_escalations) break;
        gamma *= 10.0;
    }

    // exact per-vertex isotonic projection, then a hard re-check of the data
    // locations
    std::vector<double> col(r);
    for (int v = 0; v < nv; ++v) {
        for (int j = 0; j < r; ++j) col[static_cast<std::size_t>(j)] = z[j * bs + q + v];
        detail_mqsr::isotonic_inplace(col);
        for (int j = 1; j < r; ++j)
            col[static_cast<std::size_t>(j)] =
                std::max(col[static_cast<std::size_t>(j)], col[static_cast<std::size_t>(j - 1)]);
        for (int j = 0; j < r; ++j) z[j * bs + q + v] = col[static_cast<std::size_t>(j)];
    }
    for (int i = 0; i < n_st; ++i)
        for (int j = 0; j + 1 < r; ++j)
            if (predict_station(z, i, j + 1) <
                predict_station(z, i, j) - 1e-9 * std::max(scale, 1e-12))
                throw NumericError("quantile fields cross at a data location after fitting");

    out.gamma = gamma;
    out.beta.resize(r, q);
    out.f.resize(r, nv);
    for (int j = 0; j < r; ++j) {
        for (int c = 0; c < q; ++c) out.beta(j, c) = z[j * bs + c];
        for (int v = 0; v < nv; ++v) out.f(j, v) = z[j * bs + q + v];
    }
    return out;
}

// K-fold cross-validation over stations: every candidate smoothing value is
// fitted with all levels sharing it and scored by held-out pinball loss per
// level. Candidates are visited from largest to smallest and replaced only on
// strict improvement, so ties resolve to the larger value.
inline std::vector<double> select_lambda(std::shared_ptr<const mesh::FemOperators> ops,
                                         const std::vector<Vec2>& locations,
                                         const std::vector<std::vector<double>>& samples,
                                         const Eigen::MatrixXd& covariates,
                                         const QuantileLevels& levels,
                                         std::vector<double> candidates, int folds = 10,
                                         std::uint64_t seed = 0x6d71737263764bULL,
                                         const FitOptions& opts = {}) {
    levels.validate();
    if (candidates.empty()) throw ValidationError("need at least one smoothing candidate");
    const int r = static_cast<int>(levels.alphas.size());
    if (candidates.size() == 1) return std::vector<double>(r, candidates[0]);
    const int n_st = static_cast<int>(locations.size());
    if (folds < 2) throw ValidationError("cross-validation needs at least 2 folds");
    if (n_st < folds) throw ValidationError("fewer stations than cross-validation folds");

    std::sort(candidates.begin(), candidates.end(), std::greater<>());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

    Rng rng(seed);
    const auto order = rng.sample_without_replacement(static_cast<std::size_t>(n_st),
                                                      static_cast<std::size_t>(n_st));
    std::vector<int> fold_of(n_st);
    for (int i = 0; i < n_st; ++i) fold_of[order[i]] = i % folds;

    std::vector<double> best(r, candidates[0]);
    std::vector<double> best_score(r, std::numeric_limits<double>::infinity());
    for (double cand : candidates) {
        std::vector<double> score(r, 0.0);
        for (int fold = 0; fold < folds; ++fold) {
            std::vector<Vec2> tr_loc, te_loc;
            std::vector<std::vector<double>> tr_s, te_s;
            std::vector<int> tr_idx, te_idx;
            for (int i = 0; i < n_st; ++i)
                (fold_of[i] == fold ? te_idx : tr_idx).push_back(i);
            if (te_idx.empty() || tr_idx.empty()) continue;
            Eigen::MatrixXd tr_x(static_cast<int>(tr_idx.size()), covariates.cols());
            Eigen::MatrixXd te_x(static_cast<int>(te_idx.size()), covariates.cols());
            for (std::size_t k = 0; k < tr_idx.size(); ++k) {
                tr_loc.push_back(locations[tr_idx[k]]);
                tr_s.push_back(samples[tr_idx[k]]);
                tr_x.row(static_cast<int>(k)) = covariates.row(tr_idx[k]);
            }
            for (std::size_t k = 0; k < te_idx.size(); ++k) {
                te_loc.push_back(locations[te_idx[k]]);
                te_s.push_back(samples[te_idx[k]]);
                te_x.row(static_cast<int>(k)) = covariates.row(te_idx[k]);
            }
            const auto fields =
                fit(ops, tr_loc, tr_s, tr_x, levels, std::vector<double>{cand}, opts);
            const Eigen::MatrixXd qv = evaluate(fields, te_loc, te_x);
            for (int j = 0; j < r; ++j) {
                double s = 0.0;
                std::size_t cnt = 0;
                for (std::size_t i = 0; i < te_s.size(); ++i)
                    for (double y : te_s[i]) {
                        s += pinball(levels.alphas[j], y - qv(j, static_cast<int>(i)));
                        ++cnt;
                    }
                score[j] += s / static_cast<double>(cnt);
            }
        }
        for (int j = 0; j < r; ++j)
            if (score[j] < best_score[j]) {
                best_score[j] = score[j];
                best[j] = cand;
            }
    }
    return best;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

inline constexpr int kFieldsFormatVersion = 1;

inline void save_fields(const QuantileFieldSet& fields, const std::string& path) {
    nlohmann::json j;
    j["format_version"] = kFieldsFormatVersion;
    j["alphas"] = fields.alphas;
    j["lambda"] = fields.lambda;
    j["gamma"] = fields.gamma;
    j["eps"] = fields.eps;
    j["mesh_checksum"] = fields.ops->mesh().checksum();
    nlohmann::json beta = nlohmann::json::array();
    for (int r0 = 0; r0 < fields.beta.rows(); ++r0) {
        nlohmann::json row = nlohmann::json::array();
        for (int c = 0; c < fields.beta.cols(); ++c) row.push_back(fields.beta(r0, c));
        beta.push_back(std::move(row));
    }
    j["beta"] = std::move(beta);
    nlohmann::json f = nlohmann::json::array();
    for (int r0 = 0; r0 < fields.f.rows(); ++r0) {
        nlohmann::json row = nlohmann::json::array();
        for (int c = 0; c < fields.f.cols(); ++c) row.push_back(fields.f(r0, c));
        f.push_back(std::move(row));
    }
    j["f"] = std::move(f);
    std::ofstream outf(path);
    if (!outf) throw ValidationError("cannot write quantile fields file: " + path);
    outf << j.dump(2) << "\n";
    if (!outf) throw ValidationError("failed writing quantile fields file: " + path);
}

inline QuantileFieldSet load_fields(const std::string& path,
                                    std::shared_ptr<const mesh::FemOperators> ops) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot read quantile fields file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("malformed quantile fields file " + path + ": " + e.what());
    }
    try {
        if (j.at("format_version").get<int>() != kFieldsFormatVersion)
            throw ValidationError("unsupported quantile fields format version in " + path);
        QuantileFieldSet out;
        out.ops = std::move(ops);
        if (j.at("mesh_checksum").get<std::uint64_t>() != out.ops->mesh().checksum())
            throw ValidationError("quantile fields were fitted on a different mesh");
        out.alphas = j.at("alphas").get<std::vector<double>>();
        out.lambda = j.at("lambda").get<std::vector<double>>();
        out.gamma = j.at("gamma").get<double>();
        out.eps = j.at("eps").get<double>();
        const auto& jb = j.at("beta");
        const auto& jf = j.at("f");
        const int r = static_cast<int>(jb.size());
        if (r != static_cast<int>(out.alphas.size()) || r != static_cast<int>(jf.size()))
            throw ValidationError("level count mismatch in " + path);
        const int q = r > 0 ? static_cast<int>(jb.at(0).size()) : 0;
        const int nv = r > 0 ? static_cast<int>(jf.at(0).size()) : 0;
        if (nv != static_cast<int>(out.ops->n_dof()))
            throw ValidationError("field coefficient count does not match the mesh in " + path);
        out.beta.resize(r, q);
        out.f.resize(r, nv);
        for (int a = 0; a < r; ++a) {
            for (int b = 0; b < q; ++b) out.beta(a, b) = jb.at(a).at(b).get<double>();
            for (int b = 0; b < nv; ++b) out.f(a, b) = jf.at(a).at(b).get<double>();
        }
        return out;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("incomplete quantile fields file " + path + ": " + e.what());
    }
}

}  // namespace airdist::mqsr
