#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <vector>

#include <gtest/gtest.h>

#include "airdist/errors.h"
#include "airdist/mesh.h"
#include "airdist/rng.h"

using airdist::NumericError;
using airdist::Polygon;
using airdist::Ring;
using airdist::Rng;
using airdist::ValidationError;
using airdist::Vec2;
namespace mesh = airdist::mesh;

namespace {

Polygon unit_square() {
    Polygon p;
    p.outer = {{0, 0}, {1, 0}, {1, 1}, {0, 1}};
    return p;
}

Polygon l_shape() {
    Polygon p;
    p.outer = {{0, 0}, {2, 0}, {2, 1}, {1, 1}, {1, 2}, {0, 2}};
    return p;
}

// Star-shaped region at regional scale (hundreds of km), used for the
// production-resolution check.
Polygon regional_domain() {
    Polygon p;
    const int n = 36;
    for (int k = 0; k < n; ++k) {
        const double th = 2.0 * 3.14159265358979323846 * k / n;
        const double r = 1.0 + 0.25 * std::sin(3.0 * th + 0.7) + 0.15 * std::cos(5.0 * th);
        p.outer.push_back({250e3 + 230e3 * r * std::cos(th), 130e3 + 120e3 * r * std::sin(th)});
    }
    return p;
}

double min_angle_deg(const mesh::TriangularMesh& m) {
    double worst = 180.0;
    for (const auto& t : m.triangles) {
        const Vec2& a = m.vertices[t[0]];
        const Vec2& b = m.vertices[t[1]];
        const Vec2& c = m.vertices[t[2]];
        const double la = distance(b, c), lb = distance(c, a), lc = distance(a, b);
        const double area2 = std::abs((b - a).cross(c - a));
        const double sin_min = std::min({la, lb, lc}) * area2 / (la * lb * lc);
        worst = std::min(worst, std::asin(std::min(1.0, sin_min)) * 180.0 / 3.14159265358979323846);
    }
    return worst;
}

double max_edge(const mesh::TriangularMesh& m) {
    double worst = 0.0;
    for (const auto& t : m.triangles)
        for (int k = 0; k < 3; ++k)
            worst = std::max(worst, distance(m.vertices[t[(k + 1) % 3]], m.vertices[t[(k + 2) % 3]]));
    return worst;
}

std::vector<Vec2> sample_inside(const Polygon& poly, std::size_t n, Rng& rng) {
    const auto bb = poly.bbox();
    std::vector<Vec2> pts;
    while (pts.size() < n) {
        const Vec2 p{rng.uniform(bb.xmin, bb.xmax), rng.uniform(bb.ymin, bb.ymax)};
        if (airdist::point_in_polygon(p, poly)) pts.push_back(p);
    }
    return pts;
}

}  // namespace

TEST(BuildMesh, UnitSquareAtTargetOneIsMinimal) {
    const auto m = mesh::build_mesh(unit_square(), 1.0);
    EXPECT_EQ(m.vertex_count(), 4u);
    EXPECT_EQ(m.triangle_count(), 2u);
    EXPECT_NEAR(m.area(), 1.0, 1e-12);
    for (std::size_t t = 0; t < m.triangle_count(); ++t) EXPECT_GT(m.triangle_area(t), 0.0);
    for (auto f : m.boundary) EXPECT_EQ(f, 1);
}

TEST(BuildMesh, UnitSquareAtHalfTargetRefines) {
    const auto m = mesh::build_mesh(unit_square(), 0.5);
    EXPECT_GE(m.triangle_count(), 8u);
    EXPECT_NEAR(m.area(), 1.0, 1e-10);
    EXPECT_LE(max_edge(m), 0.75 * (1.0 + 1e-9));
    EXPECT_GE(min_angle_deg(m), 20.0 - 1e-6);
}

TEST(BuildMesh, QualityAndConservationOnLShape) {
    const auto m = mesh::build_mesh(l_shape(), 0.2);
    EXPECT_NEAR(m.area(), 3.0, 1e-8 * 3.0);
    EXPECT_GE(min_angle_deg(m), 20.0 - 1e-6);
    EXPECT_LE(max_edge(m), 0.3 * (1.0 + 1e-9));
    // every edge shared by at most two triangles; indices in range
    std::map<std::pair<int, int>, int> edges;
    for (const auto& t : m.triangles)
        for (int k = 0; k < 3; ++k) {
            const int u = t[(k + 1) % 3], w = t[(k + 2) % 3];
            ASSERT_GE(u, 0);
            ASSERT_LT(u, static_cast<int>(m.vertex_count()));
            edges[{std::min(u, w), std::max(u, w)}]++;
        }
    for (const auto& [e, c] : edges) EXPECT_LE(c, 2);
    for (std::size_t t = 0; t < m.triangle_count(); ++t) EXPECT_GT(m.triangle_area(t), 1e-12);
}

TEST(BuildMesh, HoleIsExcluded) {
    Polygon p = unit_square();
    Ring hole = {{0.4, 0.4}, {0.6, 0.4}, {0.6, 0.6}, {0.4, 0.6}};
    p.holes.push_back(hole);
    const auto m = mesh::build_mesh(p, 0.15);
    EXPECT_NEAR(m.area(), 1.0 - 0.04, 1e-8);
    Polygon hole_poly;
    hole_poly.outer = hole;
    for (std::size_t t = 0; t < m.triangle_count(); ++t) {
        const Vec2& a = m.vertices[m.triangles[t][0]];
        const Vec2& b = m.vertices[m.triangles[t][1]];
        const Vec2& c = m.vertices[m.triangles[t][2]];
        const Vec2 cen{(a.x + b.x + c.x) / 3.0, (a.y + b.y + c.y) / 3.0};
        EXPECT_FALSE(airdist::point_in_polygon(cen, hole_poly));
    }
}

TEST(BuildMesh, SelfIntersectingBoundaryRejected) {
    Polygon bowtie;
    bowtie.outer = {{0, 0}, {1, 1}, {1, 0}, {0, 1}};
    EXPECT_THROW(mesh::build_mesh(bowtie, 0.5), ValidationError);
}

TEST(BuildMesh, DeterministicAcrossRuns) {
    const auto a = mesh::build_mesh(l_shape(), 0.23);
    const auto b = mesh::build_mesh(l_shape(), 0.23);
    EXPECT_EQ(a.checksum(), b.checksum());
}

TEST(BuildMesh, RegionalDomainReachesProductionScale) {
    const auto m = mesh::build_mesh(regional_domain(), 1800.0);
    EXPECT_GE(m.vertex_count(), 8000u);
    EXPECT_LE(m.vertex_count(), 100000u);
    EXPECT_GE(min_angle_deg(m), 20.0 - 1e-6);
    const double poly_area = regional_domain().area();
    EXPECT_NEAR(m.area(), poly_area, 1e-8 * poly_area);
}

TEST(MeshIO, SaveLoadRoundTrip) {
    const auto m = mesh::build_mesh(l_shape(), 0.3);
    mesh::save_mesh(m, "t_roundtrip.node", "t_roundtrip.ele");
    const auto back = mesh::load_mesh("t_roundtrip.node", "t_roundtrip.ele");
    ASSERT_EQ(back.vertex_count(), m.vertex_count());
    ASSERT_EQ(back.triangle_count(), m.triangle_count());
    EXPECT_EQ(back.checksum(), m.checksum());
    for (std::size_t i = 0; i < m.vertex_count(); ++i) EXPECT_EQ(back.boundary[i], m.boundary[i]);
    std::remove("t_roundtrip.node");
    std::remove("t_roundtrip.ele");
}

TEST(MeshIO, TruncatedFileRejected) {
    const auto m = mesh::build_mesh(unit_square(), 1.0);
    mesh::save_mesh(m, "t_trunc.node", "t_trunc.ele");
    {
        std::ofstream f("t_trunc.node");
        f << "10\n0 0 1\n";
    }
    EXPECT_THROW(mesh::load_mesh("t_trunc.node", "t_trunc.ele"), ValidationError);
    std::remove("t_trunc.node");
    std::remove("t_trunc.ele");
}

TEST(Assemble, ReferenceElementOracles) {
    Polygon tri;
    tri.outer = {{0, 0}, {1, 0}, {0, 1}};
    const auto m = mesh::build_mesh(tri, 2.0);
    ASSERT_EQ(m.vertex_count(), 3u);
    ASSERT_EQ(m.triangle_count(), 1u);
    const auto ops = mesh::assemble(m);

    auto idx_of = [&](double x, double y) {
        for (std::size_t i = 0; i < m.vertex_count(); ++i)
            if (distance(m.vertices[i], {x, y}) < 1e-12) return static_cast<int>(i);
        ADD_FAILURE() << "vertex not found";
        return -1;
    };
    const int a = idx_of(0, 0), b = idx_of(1, 0), c = idx_of(0, 1);

    const double mref[3][3] = {{2, 1, 1}, {1, 2, 1}, {1, 1, 2}};
    const double kref[3][3] = {{2, -1, -1}, {-1, 1, 0}, {-1, 0, 1}};
    const int id[3] = {a, b, c};
    const Eigen::MatrixXd md = Eigen::MatrixXd(ops.mass());
    const Eigen::MatrixXd kd = Eigen::MatrixXd(ops.stiffness());
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            EXPECT_NEAR(md(id[i], id[j]), 0.5 / 12.0 * mref[i][j], 1e-14);
            EXPECT_NEAR(kd(id[i], id[j]), 0.5 * kref[i][j], 1e-14);
        }
}

TEST(Assemble, StiffnessAnnihilatesConstants) {
    const auto ops = mesh::assemble(mesh::build_mesh(l_shape(), 0.2));
    const Eigen::VectorXd ones = Eigen::VectorXd::Ones(static_cast<int>(ops.n_dof()));
    const Eigen::VectorXd r = ops.stiffness() * ones;
    EXPECT_LE(r.cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Assemble, MassRowSumsTotalMeshArea) {
    const auto m = mesh::build_mesh(l_shape(), 0.2);
    const auto ops = mesh::assemble(m);
    EXPECT_NEAR(ops.lumped_mass().sum(), m.area(), 1e-8 * m.area());
}

TEST(Assemble, SymmetryAndPositiveSemidefiniteness) {
    const auto ops = mesh::assemble(mesh::build_mesh(unit_square(), 0.3));
    const Eigen::MatrixXd kd = Eigen::MatrixXd(ops.stiffness());
    const Eigen::MatrixXd md = Eigen::MatrixXd(ops.mass());
    EXPECT_LE((kd - kd.transpose()).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_LE((md - md.transpose()).cwiseAbs().maxCoeff(), 1e-14);
    Rng rng(0x21);
    for (int i = 0; i < 20; ++i) {
        Eigen::VectorXd x(kd.rows());
        for (int k = 0; k < x.size(); ++k) x[k] = rng.normal();
        EXPECT_GE(x.dot(kd * x), -1e-10);
        EXPECT_GT(x.dot(md * x), 0.0);
    }
}

TEST(Assemble, EvaluationReproducesLinearFields) {
    const auto m = mesh::build_mesh(l_shape(), 0.25);
    const auto ops = mesh::assemble(m);
    const double pa = 1.7, pb = -0.6, pc = 2.3;
    Eigen::VectorXd coeffs(static_cast<int>(m.vertex_count()));
    for (std::size_t i = 0; i < m.vertex_count(); ++i)
        coeffs[static_cast<int>(i)] = pa + pb * m.vertices[i].x + pc * m.vertices[i].y;
    Rng rng(0x22);
    const auto pts = sample_inside(l_shape(), 50, rng);
    const Eigen::VectorXd vals = ops.evaluate(coeffs, pts);
    for (std::size_t i = 0; i < pts.size(); ++i)
        EXPECT_NEAR(vals[static_cast<int>(i)], pa + pb * pts[i].x + pc * pts[i].y, 1e-10);
}

TEST(Assemble, PenaltyNullExactlyOnLinearFields) {
    const auto m = mesh::build_mesh(l_shape(), 0.2);
    const auto ops = mesh::assemble(m);
    Rng rng(0x23);
    for (int rep = 0; rep < 5; ++rep) {
        const double pa = rng.normal(), pb = rng.normal(), pc = rng.normal();
        Eigen::VectorXd f(static_cast<int>(m.vertex_count()));
        for (std::size_t i = 0; i < m.vertex_count(); ++i)
            f[static_cast<int>(i)] = pa + pb * m.vertices[i].x + pc * m.vertices[i].y;
        EXPECT_LE(ops.roughness(f), 1e-18);
        // the formed matrix agrees up to its own entry roundoff
        EXPECT_NEAR(f.dot(ops.penalty() * f), 0.0, 1e-10);
    }
    // non-linear fields are penalized
    Eigen::VectorXd g(static_cast<int>(m.vertex_count()));
    for (std::size_t i = 0; i < m.vertex_count(); ++i)
        g[static_cast<int>(i)] = m.vertices[i].x * m.vertices[i].x;
    EXPECT_GT(ops.roughness(g), 1e-6);
    // both evaluation paths are positive semidefinite and consistent
    for (int rep = 0; rep < 20; ++rep) {
        Eigen::VectorXd x(static_cast<int>(m.vertex_count()));
        for (int k = 0; k < x.size(); ++k) x[k] = rng.normal();
        const double form = ops.roughness(x);
        EXPECT_GE(form, 0.0);
        EXPECT_GE(x.dot(ops.penalty() * x), -1e-10);
        EXPECT_NEAR(x.dot(ops.penalty() * x), form, 1e-8 * (1.0 + form));
    }
}

TEST(Assemble, DegenerateTriangleRejected) {
    mesh::TriangularMesh m;
    m.vertices = {{0, 0}, {1, 0}, {2, 0}};
    m.triangles = {{0, 1, 2}};
    m.boundary = {1, 1, 1};
    EXPECT_THROW(mesh::assemble(m), NumericError);
}

TEST(Smoother, ConstantDataReproducedForAnyLambda) {
    const auto ops = mesh::assemble(mesh::build_mesh(unit_square(), 0.25));
    Rng rng(0x24);
    const auto pts = sample_inside(unit_square(), 40, rng);
    const Eigen::VectorXd vals = Eigen::VectorXd::Constant(40, 7.0);
    for (double lambda : {1e-6, 1.0, 1e6}) {
        const auto coeffs = mesh::smooth_covariate(ops, pts, vals, lambda);
        for (int i = 0; i < coeffs.size(); ++i) EXPECT_NEAR(coeffs[i], 7.0, 1e-8);
    }
}

TEST(Smoother, HugeLambdaProjectsOntoLeastSquaresPlane) {
    const auto m = mesh::build_mesh(unit_square(), 0.25);
    const auto ops = mesh::assemble(m);
    Rng rng(0x25);
    const auto pts = sample_inside(unit_square(), 120, rng);
    Eigen::VectorXd vals(120);
    for (int i = 0; i < 120; ++i)
        vals[i] = 2.0 + 0.5 * pts[i].x - 0.3 * pts[i].y + 0.02 * rng.normal();
    const auto coeffs = mesh::smooth_covariate(ops, pts, vals, 1e12);

    // least-squares plane oracle fitted directly on the data
    Eigen::MatrixXd x(120, 3);
    for (int i = 0; i < 120; ++i) {
        x(i, 0) = 1.0;
        x(i, 1) = pts[i].x;
        x(i, 2) = pts[i].y;
    }
    const Eigen::Vector3d beta = (x.transpose() * x).ldlt().solve(x.transpose() * vals);
    for (std::size_t i = 0; i < m.vertex_count(); ++i) {
        const double plane = beta[0] + beta[1] * m.vertices[i].x + beta[2] * m.vertices[i].y;
        EXPECT_NEAR(coeffs[static_cast<int>(i)], plane, 1e-4);
    }
}

TEST(Smoother, TinyLambdaInterpolatesVertexData) {
    const auto m = mesh::build_mesh(unit_square(), 0.3);
    const auto ops = mesh::assemble(m);
    Rng rng(0x26);
    Eigen::VectorXd vals(static_cast<int>(m.vertex_count()));
    for (int i = 0; i < vals.size(); ++i) vals[i] = rng.uniform(-3.0, 3.0);
    const auto coeffs = mesh::smooth_covariate(ops, m.vertices, vals, 1e-12);
    for (int i = 0; i < vals.size(); ++i) EXPECT_NEAR(coeffs[i], vals[i], 1e-6);
}

TEST(Smoother, InvalidInputsRejected) {
    const auto ops = mesh::assemble(mesh::build_mesh(unit_square(), 0.5));
    const std::vector<Vec2> pts = {{0.5, 0.5}};
    const Eigen::VectorXd vals = Eigen::VectorXd::Constant(1, 1.0);
    EXPECT_THROW(mesh::smooth_covariate(ops, pts, vals, 0.0), ValidationError);
    EXPECT_THROW(mesh::smooth_covariate(ops, pts, vals, -1.0), ValidationError);
    const std::vector<Vec2> outside = {{5.0, 5.0}};
    EXPECT_THROW(mesh::smooth_covariate(ops, outside, vals, 1.0), ValidationError);
}

TEST(PointLocator, SnapsPointsJustOutsideBoundary) {
    const auto m = mesh::build_mesh(unit_square(), 0.5);
    mesh::PointLocator loc(m);
    const auto hit = loc.locate({0.5, -1e-10});
    ASSERT_GE(hit.triangle, 0);
    double s = 0.0;
    for (double w : hit.weights) {
        EXPECT_GE(w, 0.0);
        s += w;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
    EXPECT_LT(loc.locate({5.0, 5.0}).triangle, 0);
    EXPECT_LT(loc.locate({0.5, -0.1}).triangle, 0);
}

TEST(PointLocator, ExactVertexAndEdgeHits) {
    const auto m = mesh::build_mesh(unit_square(), 0.5);
    mesh::PointLocator loc(m);
    for (const Vec2& v : m.vertices) {
        const auto hit = loc.locate(v);
        ASSERT_GE(hit.triangle, 0);
        double interp = 0.0;
        for (int k = 0; k < 3; ++k)
            interp += hit.weights[k] *
                      (m.vertices[hit.vertices[k]].x + 2.0 * m.vertices[hit.vertices[k]].y);
        EXPECT_NEAR(interp, v.x + 2.0 * v.y, 1e-10);
    }
}
