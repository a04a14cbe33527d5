#include "airdist/frk.h"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "airdist/geom.h"
#include "airdist/rng.h"

using airdist::Polygon;
using airdist::Rng;
using airdist::ValidationError;
using airdist::Vec2;
namespace frk = airdist::frk;

namespace {

Polygon rect(double x0, double y0, double x1, double y1) {
    Polygon p;
    p.outer = {{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}};
    return p;
}

// Dense GLS oracle: beta = (X' S^-1 X)^-1 X' S^-1 y.
Eigen::VectorXd gls_oracle(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                           const Eigen::MatrixXd& sigma) {
    const Eigen::MatrixXd si = sigma.llt().solve(Eigen::MatrixXd::Identity(y.size(), y.size()));
    const Eigen::MatrixXd xtsx = x.transpose() * si * x;
    return xtsx.ldlt().solve(x.transpose() * si * y);
}

// Dense Gaussian log-likelihood oracle, no Woodbury shortcuts.
double loglik_oracle(const Eigen::VectorXd& y, const Eigen::MatrixXd& x,
                     const Eigen::VectorXd& beta, const Eigen::MatrixXd& phi,
                     const Eigen::MatrixXd& k, double sigma2) {
    const int n = static_cast<int>(y.size());
    Eigen::MatrixXd sigma = phi * k * phi.transpose();
    sigma.diagonal().array() += sigma2;
    const Eigen::LLT<Eigen::MatrixXd> llt(sigma);
    const Eigen::VectorXd r = y - x * beta;
    const Eigen::VectorXd z = llt.solve(r);
    double logdet = 0.0;
    for (int i = 0; i < n; ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
    return -0.5 * (n * std::log(2.0 * M_PI) + logdet + r.dot(z));
}

double shoelace(const std::vector<Vec2>& ring) {
    double a = 0.0;
    for (std::size_t i = 0; i < ring.size(); ++i) {
        const Vec2& p = ring[i];
        const Vec2& q = ring[(i + 1) % ring.size()];
        a += p.cross(q);
    }
    return 0.5 * a;
}

}  // namespace

TEST(BauGrid, TilesBoundingBoxAndMasksByCentroid) {
    const auto g = frk::make_grid(rect(0, 0, 10, 10), 2.0);
    EXPECT_EQ(g.ncols, 5);
    EXPECT_EQ(g.nrows, 5);
    EXPECT_EQ(g.n_cells(), 25u);
    for (int r = 0; r < g.nrows; ++r)
        for (int c = 0; c < g.ncols; ++c) {
            const Vec2 cen = g.centroid(g.cell_index(r, c));
            EXPECT_DOUBLE_EQ(cen.x, 2.0 * c + 1.0);
            EXPECT_DOUBLE_EQ(cen.y, 2.0 * r + 1.0);
            EXPECT_TRUE(g.in_domain[g.cell_index(r, c)]);
        }
    EXPECT_DOUBLE_EQ(g.cell_area(), 4.0);

    // an L-shaped domain leaves the notch cells out
    Polygon ell;
    ell.outer = {{0, 0}, {10, 0}, {10, 4}, {4, 4}, {4, 10}, {0, 10}};
    const auto gl = frk::make_grid(ell, 2.0);
    EXPECT_FALSE(gl.in_domain[gl.cell_index(4, 4)]);  // centroid (9,9)
    EXPECT_TRUE(gl.in_domain[gl.cell_index(0, 4)]);   // centroid (9,1)
    EXPECT_TRUE(gl.in_domain[gl.cell_index(4, 0)]);   // centroid (1,9)
}

TEST(BauGrid, CoversRaggedExtent) {
    const auto g = frk::make_grid(rect(0, 0, 9, 7), 2.0);
    EXPECT_EQ(g.ncols, 5);
    EXPECT_EQ(g.nrows, 4);
    EXPECT_GE(g.origin.x + g.ncols * g.cell_size, 9.0);
    EXPECT_GE(g.origin.y + g.nrows * g.cell_size, 7.0);
    EXPECT_THROW(frk::make_grid(rect(0, 0, 9, 7), -1.0), ValidationError);
}

TEST(MakeBasis, ExhaustiveSamplingOnTinyGrid) {
    const auto g = frk::make_grid(rect(0, 0, 4, 4), 2.0);
    ASSERT_EQ(g.n_cells(), 4u);
    const auto basis = frk::make_basis(g, {4}, 7);
    ASSERT_EQ(basis.size(), 4u);
    std::vector<Vec2> got = basis.centers;
    std::sort(got.begin(), got.end(),
              [](const Vec2& a, const Vec2& b) { return a.y != b.y ? a.y < b.y : a.x < b.x; });
    const std::vector<Vec2> want = {{1, 1}, {3, 1}, {1, 3}, {3, 3}};
    for (int i = 0; i < 4; ++i) {
        EXPECT_DOUBLE_EQ(got[i].x, want[i].x);
        EXPECT_DOUBLE_EQ(got[i].y, want[i].y);
    }
}

TEST(MakeBasis, DeterministicForSeedAndSensitiveToIt) {
    const auto g = frk::make_grid(rect(0, 0, 100, 100), 5.0);
    const auto a = frk::make_basis(g, {20, 6}, 42);
    const auto b = frk::make_basis(g, {20, 6}, 42);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a.centers[i].x, b.centers[i].x);
        EXPECT_EQ(a.centers[i].y, b.centers[i].y);
        EXPECT_EQ(a.level[i], b.level[i]);
    }
    ASSERT_EQ(a.scales.size(), b.scales.size());
    for (std::size_t l = 0; l < a.scales.size(); ++l) EXPECT_EQ(a.scales[l], b.scales[l]);

    const auto c = frk::make_basis(g, {20, 6}, 43);
    bool any_diff = false;
    for (std::size_t i = 0; i < a.size() && !any_diff; ++i)
        any_diff = a.centers[i].x != c.centers[i].x || a.centers[i].y != c.centers[i].y;
    EXPECT_TRUE(any_diff);
}

TEST(MakeBasis, ScaleIsOneAndAHalfTimesMedianNearestNeighbor) {
    const auto g = frk::make_grid(rect(0, 0, 200, 200), 4.0);
    const auto basis = frk::make_basis(g, {30, 8}, 11);
    ASSERT_EQ(basis.scales.size(), 2u);
    for (int l = 0; l < 2; ++l) {
        std::vector<Vec2> pts;
        for (std::size_t i = 0; i < basis.size(); ++i)
            if (basis.level[i] == l) pts.push_back(basis.centers[i]);
        std::vector<double> nn;
        for (std::size_t i = 0; i < pts.size(); ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < pts.size(); ++j)
                if (j != i) best = std::min(best, airdist::distance(pts[i], pts[j]));
            nn.push_back(best);
        }
        std::sort(nn.begin(), nn.end());
        const std::size_t m = nn.size();
        const double median = m % 2 ? nn[m / 2] : 0.5 * (nn[m / 2 - 1] + nn[m / 2]);
        EXPECT_NEAR(basis.scales[l], 1.5 * median, 1e-12 * (1.0 + median));
    }
}

TEST(MakeBasis, RejectsTinyLevelsAndOversampling) {
    const auto g = frk::make_grid(rect(0, 0, 10, 10), 2.0);
    EXPECT_THROW(frk::make_basis(g, {1}, 3), ValidationError);
    EXPECT_THROW(frk::make_basis(g, {20, 10}, 3), ValidationError);
    EXPECT_THROW(frk::make_basis(g, {}, 3), ValidationError);
}

TEST(EvalBasis, BisquareClosedForm) {
    frk::BasisSet basis;
    basis.centers = {{0.0, 0.0}};
    basis.level = {0};
    basis.scales = {2.0};
    const Eigen::MatrixXd phi = frk::eval_basis(
        basis, {{0.0, 0.0}, {2.0, 0.0}, {0.0, 3.0}, {1.0, 0.0}, {0.0, -1.0}});
    ASSERT_EQ(phi.rows(), 5);
    ASSERT_EQ(phi.cols(), 1);
    EXPECT_DOUBLE_EQ(phi(0, 0), 1.0);       // at the center
    EXPECT_DOUBLE_EQ(phi(1, 0), 0.0);       // at distance sigma
    EXPECT_DOUBLE_EQ(phi(2, 0), 0.0);       // beyond support
    EXPECT_NEAR(phi(3, 0), 0.5625, 1e-15);  // (1 - 1/4)^2 at half scale
    EXPECT_NEAR(phi(4, 0), 0.5625, 1e-15);
}

TEST(EvalBasis, EmptyBasisGivesZeroColumns) {
    frk::BasisSet basis;
    const Eigen::MatrixXd phi = frk::eval_basis(basis, {{0.0, 0.0}, {1.0, 1.0}});
    EXPECT_EQ(phi.rows(), 2);
    EXPECT_EQ(phi.cols(), 0);
}

namespace {

struct SimData {
    std::vector<Vec2> locations;
    Eigen::MatrixXd x;
    Eigen::VectorXd y;
};

SimData simulate_regression(const frk::BauGrid& g, int n, double b0, double b1, double noise_sd,
                            Rng& rng) {
    SimData d;
    d.x.resize(n, 2);
    d.y.resize(n);
    const double w = g.ncols * g.cell_size;
    const double h = g.nrows * g.cell_size;
    for (int i = 0; i < n; ++i) {
        d.locations.push_back({g.origin.x + rng.uniform() * w, g.origin.y + rng.uniform() * h});
        const double cov = rng.normal();
        d.x(i, 0) = 1.0;
        d.x(i, 1) = cov;
        d.y[i] = b0 + b1 * cov + noise_sd * rng.normal();
    }
    return d;
}

}  // namespace

TEST(FitEm, RecoversRegressionWithoutSpatialSignal) {
    const auto g = frk::make_grid(rect(0, 0, 100, 100), 5.0);
    const auto basis = frk::make_basis(g, {16, 8}, 5);
    Rng rng(0x51);
    const auto d = simulate_regression(g, 500, 2.0, 1.0, 0.1, rng);
    const auto model = frk::fit_em(d.locations, d.x, d.y, basis, g, {});
    EXPECT_NEAR(model.beta[0], 2.0, 0.05);
    EXPECT_NEAR(model.beta[1], 1.0, 0.05);
    // no spatial signal: spatial variance components stay small
    const double vary = (d.y.array() - d.y.mean()).square().mean();
    for (double t2 : model.tau2) EXPECT_LE(t2, 0.05 * vary);
    EXPECT_NEAR(model.sigma2_xi, 0.01, 0.01);
    // the log-likelihood trace is non-decreasing
    for (std::size_t i = 1; i < model.loglik_path.size(); ++i)
        EXPECT_GE(model.loglik_path[i],
                  model.loglik_path[i - 1] - 1e-8 * (1.0 + std::abs(model.loglik_path[i - 1])));
}

TEST(FitEm, SolutionLikelihoodNotWorseThanTruth) {
    const auto g = frk::make_grid(rect(0, 0, 60, 60), 6.0);
    frk::BasisSet basis = frk::make_basis(g, {9}, 77);
    Rng rng(0x52);
    const int n = 300;
    const double true_tau2 = 1.0, true_phi = 25.0, true_sigma2 = 0.05;
    const Eigen::VectorXd true_beta = Eigen::Vector2d(1.0, -0.5);

    SimData d;
    d.x.resize(n, 2);
    d.y.resize(n);
    for (int i = 0; i < n; ++i) {
        d.locations.push_back({rng.uniform() * 60.0, rng.uniform() * 60.0});
        d.x(i, 0) = 1.0;
        d.x(i, 1) = rng.normal();
    }
    const Eigen::MatrixXd k =
        frk::build_covariance(basis, std::vector<double>{true_tau2}, std::vector<double>{true_phi});
    const Eigen::LLT<Eigen::MatrixXd> kl(k);
    Eigen::VectorXd eta(basis.size());
    for (int j = 0; j < eta.size(); ++j) eta[j] = rng.normal();
    eta = kl.matrixL() * eta;
    const Eigen::MatrixXd phi = frk::eval_basis(basis, d.locations);
    for (int i = 0; i < n; ++i)
        d.y[i] = d.x.row(i).dot(true_beta) + phi.row(i).dot(eta) +
                 std::sqrt(true_sigma2) * rng.normal();

    const auto model = frk::fit_em(d.locations, d.x, d.y, basis, g, {1e-9, 400});
    const Eigen::MatrixXd k_hat = frk::build_covariance(basis, model.tau2, model.phi);
    const double ll_hat = loglik_oracle(d.y, d.x, model.beta, phi, k_hat, model.sigma2_xi);
    const double ll_true = loglik_oracle(d.y, d.x, true_beta, phi, k, true_sigma2);
    EXPECT_GE(ll_hat, ll_true - 1e-6);
    // the trace reported by the fit matches the oracle at the solution
    EXPECT_NEAR(model.loglik_path.back(), ll_hat, 1e-6 * (1.0 + std::abs(ll_hat)));
    for (std::size_t i = 1; i < model.loglik_path.size(); ++i)
        EXPECT_GE(model.loglik_path[i],
                  model.loglik_path[i - 1] - 1e-8 * (1.0 + std::abs(model.loglik_path[i - 1])));
}

TEST(FitEm, ConstantResponsesDegenerate) {
    const auto g = frk::make_grid(rect(0, 0, 40, 40), 4.0);
    const auto basis = frk::make_basis(g, {6}, 9);
    Rng rng(0x53);
    std::vector<Vec2> locs;
    Eigen::MatrixXd x(30, 1);
    const Eigen::VectorXd y = Eigen::VectorXd::Constant(30, 3.25);
    for (int i = 0; i < 30; ++i) {
        locs.push_back({rng.uniform() * 40.0, rng.uniform() * 40.0});
        x(i, 0) = 1.0;
    }
    const auto model = frk::fit_em(locs, x, y, basis, g, {});
    EXPECT_NEAR(model.beta[0], 3.25, 1e-10);
    EXPECT_LE(model.sigma2_xi, 1e-20);
    EXPECT_TRUE(std::isfinite(model.loglik_path.back()));
}

TEST(FitEm, ImpliedCovarianceIsPositiveDefinite) {
    const auto g = frk::make_grid(rect(0, 0, 80, 80), 8.0);
    const auto basis = frk::make_basis(g, {12}, 21);
    Rng rng(0x54);
    const auto d = simulate_regression(g, 120, 0.5, 0.8, 0.3, rng);
    const auto model = frk::fit_em(d.locations, d.x, d.y, basis, g, {});
    const Eigen::MatrixXd phi = frk::eval_basis(basis, d.locations);
    const Eigen::MatrixXd k = frk::build_covariance(basis, model.tau2, model.phi);
    Eigen::MatrixXd sigma = phi * k * phi.transpose();
    sigma.diagonal().array() += model.sigma2_xi;
    EXPECT_LE((sigma - sigma.transpose()).cwiseAbs().maxCoeff(), 1e-12);
    for (int rep = 0; rep < 20; ++rep) {
        Eigen::VectorXd v(sigma.rows());
        for (int i = 0; i < v.size(); ++i) v[i] = rng.normal();
        EXPECT_GT(v.dot(sigma * v), 0.0);
    }
}

TEST(FitEm, NoBasisReducesToGls) {
    const auto g = frk::make_grid(rect(0, 0, 50, 50), 5.0);
    frk::BasisSet empty;
    Rng rng(0x55);
    const auto d = simulate_regression(g, 80, -1.0, 2.0, 0.5, rng);
    const auto model = frk::fit_em(d.locations, d.x, d.y, empty, g, {});
    const Eigen::MatrixXd sigma =
        model.sigma2_xi * Eigen::MatrixXd::Identity(d.y.size(), d.y.size());
    const Eigen::VectorXd oracle = gls_oracle(d.x, d.y, sigma);
    EXPECT_NEAR(model.beta[0], oracle[0], 1e-8);
    EXPECT_NEAR(model.beta[1], oracle[1], 1e-8);
}

TEST(Predict, PriorModelGivesFixedEffectMeanEverywhere) {
    auto g = frk::make_grid(rect(0, 0, 30, 30), 3.0);
    const auto basis = frk::make_basis(g, {8}, 31);
    // covariates: intercept and a linear-in-x field
    g.covariates.resize(static_cast<int>(g.n_cells()), 2);
    for (std::size_t c = 0; c < g.n_cells(); ++c) {
        g.covariates(static_cast<int>(c), 0) = 1.0;
        g.covariates(static_cast<int>(c), 1) = g.centroid(c).x;
    }
    frk::FrkModel prior;
    prior.basis = basis;
    prior.beta = Eigen::Vector2d(4.0, 0.25);
    prior.tau2 = {2.0};
    prior.phi = {10.0};
    prior.sigma2_xi = 0.1;
    prior.mu_eta = Eigen::VectorXd::Zero(static_cast<int>(basis.size()));
    prior.sigma_eta = frk::build_covariance(basis, prior.tau2, prior.phi);
    prior.sigma_beta = Eigen::MatrixXd::Zero(2, 2);
    const auto pred = frk::predict(prior, g);
    for (std::size_t c = 0; c < g.n_cells(); ++c) {
        ASSERT_TRUE(g.in_domain[c]);
        EXPECT_NEAR(pred.mean[static_cast<int>(c)], 4.0 + 0.25 * g.centroid(c).x, 1e-12);
        EXPECT_GE(pred.variance[static_cast<int>(c)], 0.0);
    }
}

TEST(Predict, InterpolatesObservationsWhenNuggetVanishes) {
    auto g = frk::make_grid(rect(0, 0, 50, 50), 10.0);
    g.covariates = Eigen::MatrixXd::Ones(static_cast<int>(g.n_cells()), 1);
    // five observations at cell centroids, basis centered on the same cells
    const std::vector<std::size_t> cells = {0, 6, 12, 18, 24};
    frk::BasisSet basis;
    for (std::size_t c : cells) {
        basis.centers.push_back(g.centroid(c));
        basis.level.push_back(0);
    }
    basis.scales = {25.0};
    std::vector<Vec2> locs;
    for (std::size_t c : cells) locs.push_back(g.centroid(c));
    Eigen::MatrixXd x = Eigen::MatrixXd::Ones(5, 1);
    Eigen::VectorXd y(5);
    y << 1.0, -2.0, 0.5, 3.0, -1.0;

    frk::FrkModel m;
    m.basis = basis;
    m.beta = Eigen::VectorXd::Zero(1);
    m.beta[0] = y.mean();
    m.tau2 = {50.0};
    m.phi = {30.0};
    m.sigma2_xi = 1e-8;
    m.sigma_beta = Eigen::MatrixXd::Zero(1, 1);
    frk::condition_on_data(m, locs, x, y);
    const auto pred = frk::predict(m, g);
    for (std::size_t i = 0; i < cells.size(); ++i)
        EXPECT_NEAR(pred.mean[static_cast<int>(cells[i])], y[static_cast<int>(i)], 1e-3);
}

TEST(Predict, MissingCovariatesRejected) {
    const auto g = frk::make_grid(rect(0, 0, 30, 30), 3.0);
    frk::FrkModel m;
    m.basis = frk::make_basis(g, {4}, 1);
    m.beta = Eigen::VectorXd::Ones(1);
    m.tau2 = {1.0};
    m.phi = {5.0};
    m.sigma2_xi = 0.1;
    m.mu_eta = Eigen::VectorXd::Zero(4);
    m.sigma_eta = frk::build_covariance(m.basis, m.tau2, m.phi);
    m.sigma_beta = Eigen::MatrixXd::Zero(1, 1);
    EXPECT_THROW(frk::predict(m, g), ValidationError);  // grid has no covariates
}

TEST(Aggregate, SingleCellIdentityAndTwoCellMean) {
    const auto g = frk::make_grid(rect(0, 0, 8, 4), 2.0);
    Eigen::VectorXd v = Eigen::VectorXd::Zero(static_cast<int>(g.n_cells()));
    v[static_cast<int>(g.cell_index(0, 1))] = 1.0;
    v[static_cast<int>(g.cell_index(0, 2))] = 3.0;

    const auto one = frk::aggregate_to_polygons(g, v, {rect(2, 0, 4, 2)});
    ASSERT_EQ(one.value.size(), 1);
    EXPECT_TRUE(one.has_overlap[0]);
    EXPECT_NEAR(one.value[0], 1.0, 1e-12);
    EXPECT_NEAR(one.overlap_area[0], 4.0, 1e-10);

    const auto two = frk::aggregate_to_polygons(g, v, {rect(2, 0, 6, 2)});
    EXPECT_NEAR(two.value[0], 2.0, 1e-12);
    EXPECT_NEAR(two.overlap_area[0], 8.0, 1e-10);
}

TEST(Aggregate, PartialOverlapUsesClippedArea) {
    const auto g = frk::make_grid(rect(0, 0, 4, 4), 2.0);
    Eigen::VectorXd v(static_cast<int>(g.n_cells()));
    v << 1.0, 5.0, 9.0, 13.0;
    // triangle over the lower-left cell: half of it
    Polygon tri;
    tri.outer = {{0, 0}, {2, 0}, {0, 2}};
    const auto agg = frk::aggregate_to_polygons(g, v, {tri});
    EXPECT_NEAR(agg.overlap_area[0], std::abs(shoelace(tri.outer)), 1e-10);
    EXPECT_NEAR(agg.value[0], 1.0, 1e-12);

    // straddling polygon: weights proportional to clipped areas
    Polygon band = rect(1, 0, 3, 1);  // half in cell (0,0), half in cell (0,1)
    const auto agg2 = frk::aggregate_to_polygons(g, v, {band});
    EXPECT_NEAR(agg2.value[0], 0.5 * 1.0 + 0.5 * 5.0, 1e-12);
    EXPECT_NEAR(agg2.overlap_area[0], 2.0, 1e-10);
}

TEST(Aggregate, HolesReduceOverlapAndZeroOverlapIsFlagged) {
    const auto g = frk::make_grid(rect(0, 0, 4, 4), 2.0);
    const Eigen::VectorXd v = Eigen::VectorXd::Constant(static_cast<int>(g.n_cells()), 2.5);
    Polygon ring = rect(0, 0, 4, 4);
    ring.holes.push_back({{1, 1}, {3, 1}, {3, 3}, {1, 3}});
    const auto agg = frk::aggregate_to_polygons(g, v, {ring});
    EXPECT_NEAR(agg.overlap_area[0], 16.0 - 4.0, 1e-10);
    EXPECT_NEAR(agg.value[0], 2.5, 1e-12);

    const auto off = frk::aggregate_to_polygons(g, v, {rect(10, 10, 12, 12)});
    EXPECT_FALSE(off.has_overlap[0]);
}

namespace {

// Smooth exceedance surface used for the compositional end-to-end check.
double true_ilr_field(const Vec2& s, double extent) {
    const double u = s.x / extent, w = s.y / extent;
    return 0.4 + 0.9 * std::sin(2.0 * M_PI * u) * std::cos(M_PI * w) - 0.6 * w;
}

double cfrk_mae(int n_stations, std::uint64_t seed) {
    const double extent = 60.0;
    auto g = frk::make_grid(rect(0, 0, extent, extent), 3.0);
    g.covariates = Eigen::MatrixXd::Ones(static_cast<int>(g.n_cells()), 1);
    const auto basis = frk::make_basis(g, {25, 9}, 1234);
    Rng rng(seed);

    std::vector<Vec2> locs;
    Eigen::MatrixXd x = Eigen::MatrixXd::Ones(n_stations, 1);
    Eigen::VectorXd z(n_stations);
    for (int i = 0; i < n_stations; ++i) {
        const Vec2 s{rng.uniform() * extent, rng.uniform() * extent};
        locs.push_back(s);
        const double p = airdist::geom::ilr_inverse(true_ilr_field(s, extent)).above;
        std::size_t above = 0;
        for (int day = 0; day < 365; ++day)
            if (rng.uniform() < p) ++above;
        z[i] = airdist::geom::ilr(airdist::geom::zero_replace(365 - above, above));
    }
    const auto model = frk::fit_em(locs, x, z, basis, g, {});
    const auto pred = frk::predict(model, g);
    double mae = 0.0;
    for (std::size_t c = 0; c < g.n_cells(); ++c) {
        const double p_hat = airdist::geom::ilr_inverse(pred.mean[static_cast<int>(c)]).above;
        const double p_true = airdist::geom::ilr_inverse(true_ilr_field(g.centroid(c), extent)).above;
        mae += std::abs(p_hat - p_true);
    }
    return mae / static_cast<double>(g.n_cells());
}

}  // namespace

TEST(CompositionalKriging, ExceedanceErrorShrinksWithStationCount) {
    double prev = std::numeric_limits<double>::infinity();
    for (int n : {50, 100, 200}) {
        double mae = 0.0;
        for (std::uint64_t seed : {1u, 2u, 3u}) mae += cfrk_mae(n, seed);
        mae /= 3.0;
        EXPECT_LT(mae, prev) << "station count " << n;
        prev = mae;
    }
}

TEST(Persistence, JsonRoundTripPreservesPredictions) {
    auto g = frk::make_grid(rect(0, 0, 40, 40), 4.0);
    g.covariates.resize(static_cast<int>(g.n_cells()), 2);
    for (std::size_t c = 0; c < g.n_cells(); ++c) {
        g.covariates(static_cast<int>(c), 0) = 1.0;
        g.covariates(static_cast<int>(c), 1) = 0.1 * g.centroid(c).y;
    }
    const auto basis = frk::make_basis(g, {10, 4}, 3);
    Rng rng(0x56);
    SimData d;
    d.x.resize(60, 2);
    d.y.resize(60);
    for (int i = 0; i < 60; ++i) {
        d.locations.push_back({rng.uniform() * 40.0, rng.uniform() * 40.0});
        d.x(i, 0) = 1.0;
        d.x(i, 1) = rng.normal();
        d.y[i] = 1.0 + 0.5 * d.x(i, 1) + 0.2 * rng.normal();
    }
    const auto model = frk::fit_em(d.locations, d.x, d.y, basis, g, {});
    const std::string path = testing::TempDir() + "frk_model.json";
    frk::save_model(model, path);
    const auto loaded = frk::load_model(path);
    const auto p0 = frk::predict(model, g);
    const auto p1 = frk::predict(loaded, g);
    for (int c = 0; c < p0.mean.size(); ++c) {
        EXPECT_EQ(p0.mean[c], p1.mean[c]);
        EXPECT_EQ(p0.variance[c], p1.variance[c]);
    }
    EXPECT_THROW(frk::load_model(testing::TempDir() + "missing_model.json"), ValidationError);
}
