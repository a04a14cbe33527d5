#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "airdist/errors.h"
#include "airdist/geometry.h"
#include "airdist/rng.h"

namespace airdist::mesh {

// ---------------------------------------------------------------------------
// Mesh container and plain-text node/element files
// ---------------------------------------------------------------------------

struct TriangularMesh {
    std::vector<Vec2> vertices;
    std::vector<std::array<int, 3>> triangles;  // CCW vertex indices
    std::vector<std::uint8_t> boundary;         // per-vertex boundary flag

    std::size_t vertex_count() const { return vertices.size(); }
    std::size_t triangle_count() const { return triangles.size(); }

    double triangle_area(std::size_t t) const {
        const Vec2& a = vertices[triangles[t][0]];
        const Vec2& b = vertices[triangles[t][1]];
        const Vec2& c = vertices[triangles[t][2]];
        return 0.5 * (b - a).cross(c - a);
    }

    double area() const {
        double s = 0.0;
        for (std::size_t t = 0; t < triangles.size(); ++t) s += triangle_area(t);
        return s;
    }

    std::uint64_t checksum() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        char buf[128];
        for (const Vec2& v : vertices) {
            std::snprintf(buf, sizeof(buf), "%.17g %.17g;", v.x, v.y);
            h = fnv1a(buf, std::char_traits<char>::length(buf), h);
        }
        for (const auto& t : triangles) {
            std::snprintf(buf, sizeof(buf), "%d %d %d;", t[0], t[1], t[2]);
            h = fnv1a(buf, std::char_traits<char>::length(buf), h);
        }
        return h;
    }
};

inline void save_mesh(const TriangularMesh& m, const std::string& node_path,
                      const std::string& ele_path) {
    std::ofstream nf(node_path);
    if (!nf) throw ValidationError("cannot write node file: " + node_path);
    nf << m.vertices.size() << "\n";
    char buf[96];
    for (std::size_t i = 0; i < m.vertices.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.17g %.17g %d\n", m.vertices[i].x, m.vertices[i].y,
                      static_cast<int>(m.boundary[i]));
        nf << buf;
    }
    std::ofstream ef(ele_path);
    if (!ef) throw ValidationError("cannot write element file: " + ele_path);
    ef << m.triangles.size() << "\n";
    for (const auto& t : m.triangles) ef << t[0] << " " << t[1] << " " << t[2] << "\n";
}

inline TriangularMesh load_mesh(const std::string& node_path, const std::string& ele_path) {
    std::ifstream nf(node_path);
    if (!nf) throw ValidationError("cannot read node file: " + node_path);
    std::size_t n = 0;
    nf >> n;
    TriangularMesh m;
    m.vertices.resize(n);
    m.boundary.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        int flag = 0;
        nf >> m.vertices[i].x >> m.vertices[i].y >> flag;
        m.boundary[i] = static_cast<std::uint8_t>(flag);
    }
    if (!nf) throw ValidationError("truncated node file: " + node_path);
    std::ifstream ef(ele_path);
    if (!ef) throw ValidationError("cannot read element file: " + ele_path);
    std::size_t t = 0;
    ef >> t;
    m.triangles.resize(t);
    for (std::size_t i = 0; i < t; ++i) {
        ef >> m.triangles[i][0] >> m.triangles[i][1] >> m.triangles[i][2];
        for (int k = 0; k < 3; ++k)
            if (m.triangles[i][k] < 0 || m.triangles[i][k] >= static_cast<int>(n))
                throw ValidationError("element file references vertex out of range");
    }
    if (!ef) throw ValidationError("truncated element file: " + ele_path);
    return m;
}

// ---------------------------------------------------------------------------
// Constrained Delaunay triangulation with diametral-circle refinement
// ---------------------------------------------------------------------------

namespace detail {

inline long double orient2d(const Vec2& a, const Vec2& b, const Vec2& c) {
    const long double abx = static_cast<long double>(b.x) - a.x;
    const long double aby = static_cast<long double>(b.y) - a.y;
    const long double acx = static_cast<long double>(c.x) - a.x;
    const long double acy = static_cast<long double>(c.y) - a.y;
    return abx * acy - aby * acx;
}

// Positive iff d lies strictly inside the circumcircle of CCW triangle (a,b,c).
inline long double in_circle(const Vec2& a, const Vec2& b, const Vec2& c, const Vec2& d) {
    const long double adx = static_cast<long double>(a.x) - d.x;
    const long double ady = static_cast<long double>(a.y) - d.y;
    const long double bdx = static_cast<long double>(b.x) - d.x;
    const long double bdy = static_cast<long double>(b.y) - d.y;
    const long double cdx = static_cast<long double>(c.x) - d.x;
    const long double cdy = static_cast<long double>(c.y) - d.y;
    const long double ad2 = adx * adx + ady * ady;
    const long double bd2 = bdx * bdx + bdy * bdy;
    const long double cd2 = cdx * cdx + cdy * cdy;
    return adx * (bdy * cd2 - cdy * bd2) - ady * (bdx * cd2 - cdx * bd2) +
           ad2 * (bdx * cdy - cdx * bdy);
}

// Roundoff envelope of the in_circle determinant: the same expression with
// every cancellation removed. |det| below a small multiple of this cannot be
// distinguished from exact cocircularity.
inline long double in_circle_magnitude(const Vec2& a, const Vec2& b, const Vec2& c,
                                       const Vec2& d) {
    const long double adx = std::abs(static_cast<long double>(a.x) - d.x);
    const long double ady = std::abs(static_cast<long double>(a.y) - d.y);
    const long double bdx = std::abs(static_cast<long double>(b.x) - d.x);
    const long double bdy = std::abs(static_cast<long double>(b.y) - d.y);
    const long double cdx = std::abs(static_cast<long double>(c.x) - d.x);
    const long double cdy = std::abs(static_cast<long double>(c.y) - d.y);
    const long double ad2 = adx * adx + ady * ady;
    const long double bd2 = bdx * bdx + bdy * bdy;
    const long double cd2 = cdx * cdx + cdy * cdy;
    return adx * (bdy * cd2 + cdy * bd2) + ady * (bdx * cd2 + cdx * bd2) +
           ad2 * (bdx * cdy + cdx * bdy);
}

class Triangulator {
   public:
    // Edge k of a triangle is the one opposite vertex k.
    struct Tri {
        int v[3];
        int adj[3];
        bool con[3];
    };

    explicit Triangulator(const Polygon& domain) : domain_(domain) {
        const auto bb = domain.bbox();
        const double dx = bb.xmax - bb.xmin;
        const double dy = bb.ymax - bb.ymin;
        scale_ = std::max({dx, dy, 1e-12});
        const double cx = 0.5 * (bb.xmin + bb.xmax);
        const double cy = 0.5 * (bb.ymin + bb.ymax);
        const double r = 20.0 * scale_;
        // enclosing triangle; its 3 vertices are virtual and never extracted
        add_vertex({cx - 2.0 * r, cy - r});
        add_vertex({cx + 2.0 * r, cy - r});
        add_vertex({cx, cy + 2.0 * r});
        Tri t{};
        t.v[0] = 0;
        t.v[1] = 1;
        t.v[2] = 2;
        t.adj[0] = t.adj[1] = t.adj[2] = -1;
        tris_.push_back(t);
        vert_tri_ = {0, 0, 0};
    }

    // Inserts point p, returning its vertex index (an existing index when p
    // coincides with a vertex within tolerance).
    int insert_point(const Vec2& p) {
        auto [t, kind, k] = locate(p);
        if (kind == LocateKind::Vertex) return tris_[t].v[k];
        const int vi = add_vertex(p);
        if (kind == LocateKind::Edge)
            split_edge(t, k, vi);
        else
            split_interior(t, vi);
        return vi;
    }

    // Splits edge (a, b) at its midpoint without a point-location walk; the
    // refiner uses this on segments and on fallback edge splits.
    int split_known_edge(int a, int b) {
        auto [t, k] = find_edge(a, b);
        if (t < 0) throw NumericError("mesh refinement lost track of an edge");
        const Vec2 mid{0.5 * (points_[a].x + points_[b].x), 0.5 * (points_[a].y + points_[b].y)};
        const int vi = add_vertex(mid);
        split_edge(t, k, vi);
        return vi;
    }

    // Flip-based recovery of constraint edge (a, b). The triangulation holds
    // only polygon vertices at this stage, so scanning is affordable.
    void insert_constraint(int a, int b) {
        // a vertex exactly on the open segment splits the constraint in two
        for (int v = 3; v < static_cast<int>(points_.size()); ++v) {
            if (v == a || v == b) continue;
            if (orient2d(points_[a], points_[b], points_[v]) == 0.0L) {
                const Vec2& pa = points_[a];
                const Vec2& pb = points_[b];
                const Vec2& pv = points_[v];
                const double t = std::abs(pb.x - pa.x) > std::abs(pb.y - pa.y)
                                     ? (pv.x - pa.x) / (pb.x - pa.x)
                                     : (pv.y - pa.y) / (pb.y - pa.y);
                if (t > 1e-12 && t < 1.0 - 1e-12) {
                    insert_constraint(a, v);
                    insert_constraint(v, b);
                    return;
                }
            }
        }
        std::size_t guard = 0;
        const std::size_t guard_max = 100 * tris_.size() * tris_.size() + 1000;
        while (true) {
            auto [t, k] = find_edge(a, b);
            if (t >= 0) {
                mark_constrained(t, k);
                segments_.insert(norm_edge(a, b));
                return;
            }
            bool flipped = false;
            for (std::size_t ti = 0; ti < tris_.size() && !flipped; ++ti) {
                for (int e = 0; e < 3; ++e) {
                    const int u = tris_[ti].v[(e + 1) % 3];
                    const int w = tris_[ti].v[(e + 2) % 3];
                    if (u == a || u == b || w == a || w == b) continue;
                    if (!properly_cross(points_[a], points_[b], points_[u], points_[w])) continue;
                    if (tris_[ti].con[e]) throw ValidationError("boundary constraints intersect");
                    if (!flippable(static_cast<int>(ti), e)) continue;
                    flip(static_cast<int>(ti), e);
                    flipped = true;
                    break;
                }
            }
            if (!flipped || ++guard > guard_max)
                throw NumericError("constraint recovery failed; boundary may be degenerate");
        }
    }

    // Lawson passes until no flippable edge violates the Delaunay criterion.
    void legalize_all() {
        for (int pass = 0; pass < 500; ++pass) {
            bool any = false;
            for (std::size_t t = 0; t < tris_.size(); ++t) {
                for (int k = 0; k < 3; ++k) {
                    if (edge_illegal(static_cast<int>(t), k)) {
                        flip(static_cast<int>(t), k);
                        any = true;
                        break;
                    }
                }
            }
            if (!any) return;
        }
        throw NumericError("Delaunay legalization did not converge");
    }

    void refine(double target_edge_length, double min_angle_deg, std::size_t max_vertices);

    TriangularMesh extract() const;

   private:
    enum class LocateKind { Interior, Edge, Vertex };

    using EdgeKey = std::pair<int, int>;
    static EdgeKey norm_edge(int a, int b) { return {std::min(a, b), std::max(a, b)}; }
    static bool is_virtual(int v) { return v < 3; }

    int add_vertex(const Vec2& p) {
        points_.push_back(p);
        vert_tri_.push_back(-1);
        return static_cast<int>(points_.size()) - 1;
    }

    static bool properly_cross(const Vec2& a, const Vec2& b, const Vec2& c, const Vec2& d) {
        const long double o1 = orient2d(a, b, c);
        const long double o2 = orient2d(a, b, d);
        const long double o3 = orient2d(c, d, a);
        const long double o4 = orient2d(c, d, b);
        if (o1 == 0 || o2 == 0 || o3 == 0 || o4 == 0) return false;
        return ((o1 > 0) != (o2 > 0)) && ((o3 > 0) != (o4 > 0));
    }

    int opposite_index(int t, int neighbor) const {
        for (int k = 0; k < 3; ++k)
            if (tris_[t].adj[k] == neighbor) return k;
        throw NumericError("inconsistent triangulation adjacency");
    }

    void relink(int neighbor, int old_tri, int new_tri) {
        if (neighbor < 0) return;
        tris_[neighbor].adj[opposite_index(neighbor, old_tri)] = new_tri;
    }

    void mark_constrained(int t, int k) {
        tris_[t].con[k] = true;
        const int n = tris_[t].adj[k];
        if (n >= 0) tris_[n].con[opposite_index(n, t)] = true;
    }

    void register_tri(int t) {
        for (int k = 0; k < 3; ++k) vert_tri_[tris_[t].v[k]] = t;
        dirty_.push_back(t);
    }

    // Finds (triangle, edge index) carrying undirected edge (a, b), or (-1,-1).
    std::pair<int, int> find_edge(int a, int b) const {
        int t0 = vert_tri_[a];
        if (t0 >= 0 && tris_[t0].v[0] != a && tris_[t0].v[1] != a && tris_[t0].v[2] != a) t0 = -1;
        if (t0 >= 0) {
            for (int dir = 0; dir < 2; ++dir) {
                int cur = t0;
                for (std::size_t step = 0; step <= tris_.size(); ++step) {
                    int ka = -1;
                    for (int k = 0; k < 3; ++k)
                        if (tris_[cur].v[k] == a) ka = k;
                    if (ka < 0) break;
                    for (int k = 0; k < 3; ++k) {
                        if (k == ka) continue;
                        const int u = tris_[cur].v[(k + 1) % 3];
                        const int w = tris_[cur].v[(k + 2) % 3];
                        if ((u == a && w == b) || (u == b && w == a)) return {cur, k};
                    }
                    // cross one of the two edges incident to a
                    const int kn = (dir == 0) ? (ka + 1) % 3 : (ka + 2) % 3;
                    const int next = tris_[cur].adj[kn];
                    if (next < 0 || next == t0) break;
                    cur = next;
                }
            }
        }
        for (std::size_t t = 0; t < tris_.size(); ++t)
            for (int k = 0; k < 3; ++k) {
                const int u = tris_[t].v[(k + 1) % 3];
                const int w = tris_[t].v[(k + 2) % 3];
                if ((u == a && w == b) || (u == b && w == a)) return {static_cast<int>(t), k};
            }
        return {-1, -1};
    }

    std::tuple<int, LocateKind, int> classify_in_tri(int t, const Vec2& p,
                                                     const long double* o) const {
        for (int k = 0; k < 3; ++k) {
            const Vec2& v = points_[tris_[t].v[k]];
            if (distance(v, p) <= 1e-12 * scale_) return {t, LocateKind::Vertex, k};
        }
        const long double edge_tol = 1e-13L * scale_ * scale_;
        for (int k = 0; k < 3; ++k)
            if (o[k] <= edge_tol) return {t, LocateKind::Edge, k};
        return {t, LocateKind::Interior, -1};
    }

    std::tuple<int, LocateKind, int> locate(const Vec2& p) const {
        int t = last_located_ >= 0 && last_located_ < static_cast<int>(tris_.size())
                    ? last_located_
                    : 0;
        long double o[3];
        for (std::size_t step = 0; step < 4 * tris_.size() + 16; ++step) {
            int next = -1;
            long double best = 0.0L;
            for (int k = 0; k < 3; ++k) {
                const Vec2& u = points_[tris_[t].v[(k + 1) % 3]];
                const Vec2& w = points_[tris_[t].v[(k + 2) % 3]];
                o[k] = orient2d(u, w, p);
                if (o[k] < best) {
                    best = o[k];
                    next = tris_[t].adj[k];
                }
            }
            if (best < 0.0L && next >= 0) {
                t = next;
                continue;
            }
            last_located_ = t;
            return classify_in_tri(t, p, o);
        }
        // walk failed to settle (possible on near-degenerate patches);
        // fall back to scanning for a containing triangle
        for (std::size_t ti = 0; ti < tris_.size(); ++ti) {
            bool inside = true;
            for (int k = 0; k < 3; ++k) {
                const Vec2& u = points_[tris_[ti].v[(k + 1) % 3]];
                const Vec2& w = points_[tris_[ti].v[(k + 2) % 3]];
                o[k] = orient2d(u, w, p);
                if (o[k] < -1e-13L * scale_ * scale_) {
                    inside = false;
                    break;
                }
            }
            if (inside) {
                last_located_ = static_cast<int>(ti);
                return classify_in_tri(static_cast<int>(ti), p, o);
            }
        }
        throw NumericError("point location failed");
    }

    void split_interior(int t, int vi) {
        const Tri old = tris_[t];
        const int a = old.v[0], b = old.v[1], c = old.v[2];
        const int t1 = static_cast<int>(tris_.size());
        const int t2 = t1 + 1;
        Tri n0{}, n1{}, n2{};
        n0.v[0] = a; n0.v[1] = b; n0.v[2] = vi;
        n0.adj[0] = t1; n0.adj[1] = t2; n0.adj[2] = old.adj[2];
        n0.con[2] = old.con[2];
        n1.v[0] = b; n1.v[1] = c; n1.v[2] = vi;
        n1.adj[0] = t2; n1.adj[1] = t; n1.adj[2] = old.adj[0];
        n1.con[2] = old.con[0];
        n2.v[0] = c; n2.v[1] = a; n2.v[2] = vi;
        n2.adj[0] = t; n2.adj[1] = t1; n2.adj[2] = old.adj[1];
        n2.con[2] = old.con[1];
        tris_[t] = n0;
        tris_.push_back(n1);
        tris_.push_back(n2);
        relink(old.adj[0], t, t1);
        relink(old.adj[1], t, t2);
        register_tri(t);
        register_tri(t1);
        register_tri(t2);
        legalize(t, 2);
        legalize(t1, 2);
        legalize(t2, 2);
    }

    void split_edge(int t, int k, int vi) {
        const Tri oldt = tris_[t];
        const int a = oldt.v[k];
        const int b = oldt.v[(k + 1) % 3];
        const int c = oldt.v[(k + 2) % 3];
        const bool was_con = oldt.con[k];
        const int o = oldt.adj[k];
        if (was_con) {
            segments_.erase(norm_edge(b, c));
            segments_.insert(norm_edge(b, vi));
            segments_.insert(norm_edge(vi, c));
        }
        // t=(a,b,c) becomes (a,b,vi) and (a,vi,c)
        const int t1 = static_cast<int>(tris_.size());
        Tri n0{}, n1{};
        n0.v[0] = a; n0.v[1] = b; n0.v[2] = vi;
        n0.adj[0] = -1;  // (b,vi): paired below when o exists
        n0.con[0] = was_con;
        n0.adj[1] = t1;  // (vi,a)
        n0.adj[2] = oldt.adj[(k + 2) % 3];  // (a,b)
        n0.con[2] = oldt.con[(k + 2) % 3];
        n1.v[0] = a; n1.v[1] = vi; n1.v[2] = c;
        n1.adj[0] = -1;  // (vi,c)
        n1.con[0] = was_con;
        n1.adj[1] = oldt.adj[(k + 1) % 3];  // (c,a)
        n1.con[1] = oldt.con[(k + 1) % 3];
        n1.adj[2] = t;  // (a,vi)
        tris_[t] = n0;
        tris_.push_back(n1);
        relink(n1.adj[1], t, t1);
        int o0 = -1, o1 = -1;
        if (o >= 0) {
            const Tri oldo = tris_[o];
            const int k2 = opposite_index(o, t);
            const int d = oldo.v[k2];
            // oldo around the shared edge reads (d, c, b)
            o0 = o;
            o1 = static_cast<int>(tris_.size());
            Tri m0{}, m1{};
            m0.v[0] = d; m0.v[1] = oldo.v[(k2 + 1) % 3]; m0.v[2] = vi;  // (d, c, vi)
            m0.adj[0] = t1;  // (c,vi) pairs (vi,c)
            m0.con[0] = was_con;
            m0.adj[1] = o1;  // (vi,d)
            m0.adj[2] = oldo.adj[(k2 + 2) % 3];  // (d,c)
            m0.con[2] = oldo.con[(k2 + 2) % 3];
            m1.v[0] = d; m1.v[1] = vi; m1.v[2] = oldo.v[(k2 + 2) % 3];  // (d, vi, b)
            m1.adj[0] = t;  // (vi,b) pairs (b,vi)
            m1.con[0] = was_con;
            m1.adj[1] = oldo.adj[(k2 + 1) % 3];  // (b,d)
            m1.con[1] = oldo.con[(k2 + 1) % 3];
            m1.adj[2] = o0;  // (d,vi)
            tris_[o] = m0;
            tris_.push_back(m1);
            relink(m1.adj[1], o, o1);
            tris_[t].adj[0] = o1;
            tris_[t1].adj[0] = o0;
            register_tri(o0);
            register_tri(o1);
        }
        register_tri(t);
        register_tri(t1);
        legalize(t, 2);
        legalize(t1, 1);
        if (o0 >= 0) {
            legalize(o0, 2);
            legalize(o1, 1);
        }
    }

    bool edge_illegal(int t, int k) const {
        if (tris_[t].con[k]) return false;
        const int o = tris_[t].adj[k];
        if (o < 0) return false;
        const int k2 = opposite_index(o, t);
        const Vec2& a = points_[tris_[t].v[k]];
        const Vec2& b = points_[tris_[t].v[(k + 1) % 3]];
        const Vec2& c = points_[tris_[t].v[(k + 2) % 3]];
        const Vec2& d = points_[tris_[o].v[k2]];
        // treat exactly-cocircular (up to roundoff) quads as legal, otherwise
        // Lawson flips cycle between the two diagonals forever
        const long double det = in_circle(a, b, c, d);
        if (det <= 1e-15L * in_circle_magnitude(a, b, c, d)) return false;
        return flippable(t, k);
    }

    bool flippable(int t, int k) const {
        const int o = tris_[t].adj[k];
        if (o < 0 || tris_[t].con[k]) return false;
        const int k2 = opposite_index(o, t);
        const Vec2& a = points_[tris_[t].v[k]];
        const Vec2& b = points_[tris_[t].v[(k + 1) % 3]];
        const Vec2& c = points_[tris_[t].v[(k + 2) % 3]];
        const Vec2& d = points_[tris_[o].v[k2]];
        // quad (a, b, d, c) must be strictly convex
        return orient2d(a, b, d) > 0 && orient2d(b, d, c) > 0 && orient2d(d, c, a) > 0 &&
               orient2d(c, a, b) > 0;
    }

    // Flips edge k of t. Afterwards t = (a, b, d) and its old neighbor holds
    // (a, d, c), with a = former apex t.v[k] at local index 0 in both.
    void flip(int t, int k) {
        const int o = tris_[t].adj[k];
        const int k2 = opposite_index(o, t);
        const Tri oldt = tris_[t];
        const Tri oldo = tris_[o];
        const int a = oldt.v[k];
        const int b = oldt.v[(k + 1) % 3];
        const int c = oldt.v[(k + 2) % 3];
        const int d = oldo.v[k2];
        Tri n0{}, n1{};
        n0.v[0] = a; n0.v[1] = b; n0.v[2] = d;
        n0.adj[0] = oldo.adj[(k2 + 1) % 3];
        n0.con[0] = oldo.con[(k2 + 1) % 3];
        n0.adj[1] = o;
        n0.adj[2] = oldt.adj[(k + 2) % 3];
        n0.con[2] = oldt.con[(k + 2) % 3];
        n1.v[0] = a; n1.v[1] = d; n1.v[2] = c;
        n1.adj[0] = oldo.adj[(k2 + 2) % 3];
        n1.con[0] = oldo.con[(k2 + 2) % 3];
        n1.adj[1] = oldt.adj[(k + 1) % 3];
        n1.con[1] = oldt.con[(k + 1) % 3];
        n1.adj[2] = t;
        tris_[t] = n0;
        tris_[o] = n1;
        relink(n0.adj[0], o, t);
        relink(n1.adj[1], t, o);
        register_tri(t);
        register_tri(o);
    }

    // Lawson cascade restoring the Delaunay criterion around an inserted
    // vertex; (t0, k0) must have the inserted vertex at t0.v[k0].
    void legalize(int t0, int k0) {
        std::vector<std::pair<int, int>> stack{{t0, k0}};
        std::size_t guard = 0;
        while (!stack.empty()) {
            if (++guard > 64 * tris_.size() + 4096)
                throw NumericError("Delaunay legalization did not terminate");
            const auto [t, k] = stack.back();
            stack.pop_back();
            if (t < 0) continue;
            if (!edge_illegal(t, k)) continue;
            flip(t, k);
            stack.push_back({t, 0});
            stack.push_back({tris_[t].adj[1], 0});
        }
    }

    bool point_in_diametral_circle(const Vec2& p, EdgeKey s) const {
        const Vec2& pa = points_[s.first];
        const Vec2& pb = points_[s.second];
        const Vec2 mid{0.5 * (pa.x + pb.x), 0.5 * (pa.y + pb.y)};
        const double r2 = 0.25 * (pa - pb).squared_norm();
        return (p - mid).squared_norm() < r2 * (1.0 - 1e-12);
    }

    // Apex test: with the Delaunay criterion restored, a segment's diametral
    // circle contains a vertex iff it contains one of the two adjacent apexes.
    bool segment_encroached(EdgeKey s) const {
        auto [t, k] = find_edge(s.first, s.second);
        if (t < 0) return false;
        const int apex1 = tris_[t].v[k];
        if (!is_virtual(apex1) && point_in_diametral_circle(points_[apex1], s)) return true;
        const int o = tris_[t].adj[k];
        if (o >= 0) {
            const int apex2 = tris_[o].v[opposite_index(o, t)];
            if (!is_virtual(apex2) && point_in_diametral_circle(points_[apex2], s)) return true;
        }
        return false;
    }

    const Polygon& domain_;
    std::vector<Vec2> points_;
    std::vector<Tri> tris_;
    std::vector<int> vert_tri_;
    std::set<EdgeKey> segments_;
    std::vector<int> dirty_;
    double scale_ = 1.0;
    mutable int last_located_ = -1;
};

inline void Triangulator::refine(double target_edge_length, double min_angle_deg,
                                 std::size_t max_vertices) {
    const double size_limit = 1.5 * target_edge_length;
    const double sin_min = std::sin(min_angle_deg * 3.14159265358979323846 / 180.0);

    auto tri_interior = [&](int t) {
        for (int k = 0; k < 3; ++k)
            if (is_virtual(tris_[t].v[k])) return false;
        const Vec2& a = points_[tris_[t].v[0]];
        const Vec2& b = points_[tris_[t].v[1]];
        const Vec2& c = points_[tris_[t].v[2]];
        const Vec2 cen{(a.x + b.x + c.x) / 3.0, (a.y + b.y + c.y) / 3.0};
        return point_in_polygon(cen, domain_);
    };

    auto tri_bad = [&](int t) {
        if (!tri_interior(t)) return false;
        const Vec2& a = points_[tris_[t].v[0]];
        const Vec2& b = points_[tris_[t].v[1]];
        const Vec2& c = points_[tris_[t].v[2]];
        const double la = distance(b, c), lb = distance(c, a), lc = distance(a, b);
        if (std::max({la, lb, lc}) > size_limit) return true;
        // sin(min angle) = shortest edge / circumdiameter
        const double area2 = std::abs((b - a).cross(c - a));
        const double circum_d = la * lb * lc / std::max(area2, 1e-300);
        return std::min({la, lb, lc}) / circum_d < sin_min;
    };

    // Queue of segments that must be split; each entry was witnessed as
    // encroached or chosen by the circumcenter rule.
    std::vector<EdgeKey> equeue;
    auto split_and_followup = [&](EdgeKey s) {
        const int vi = split_known_edge(s.first, s.second);
        if (points_.size() > max_vertices)
            throw NumericError("mesh refinement exceeded the vertex budget");
        const EdgeKey h1 = norm_edge(s.first, vi);
        const EdgeKey h2 = norm_edge(vi, s.second);
        if (segments_.count(h1) && segment_encroached(h1)) equeue.push_back(h1);
        if (segments_.count(h2) && segment_encroached(h2)) equeue.push_back(h2);
        // the new midpoint may encroach other segments
        for (const EdgeKey& s2 : segments_) {
            if (s2.first == vi || s2.second == vi) continue;
            if (point_in_diametral_circle(points_[vi], s2)) equeue.push_back(s2);
        }
    };
    auto drain = [&]() {
        while (!equeue.empty()) {
            const EdgeKey s = equeue.back();
            equeue.pop_back();
            if (!segments_.count(s)) continue;
            split_and_followup(s);
        }
    };

    for (const EdgeKey& s : segments_)
        if (segment_encroached(s)) equeue.push_back(s);
    drain();

    dirty_.clear();
    for (std::size_t t = 0; t < tris_.size(); ++t) dirty_.push_back(static_cast<int>(t));

    std::size_t guard = 0;
    const std::size_t guard_max = 400 * max_vertices + 100000;
    while (!dirty_.empty()) {
        if (++guard > guard_max) throw NumericError("mesh refinement did not terminate");
        const int t = dirty_.back();
        dirty_.pop_back();
        if (t < 0 || t >= static_cast<int>(tris_.size())) continue;
        if (!tri_bad(t)) continue;
        if (points_.size() > max_vertices)
            throw NumericError("mesh refinement exceeded the vertex budget");

        const Vec2 a = points_[tris_[t].v[0]];
        const Vec2 b = points_[tris_[t].v[1]];
        const Vec2 c = points_[tris_[t].v[2]];
        auto split_longest_edge = [&]() {
            double best = -1.0;
            int bk = 0;
            for (int k = 0; k < 3; ++k) {
                const double len =
                    distance(points_[tris_[t].v[(k + 1) % 3]], points_[tris_[t].v[(k + 2) % 3]]);
                if (len > best) {
                    best = len;
                    bk = k;
                }
            }
            const EdgeKey e = norm_edge(tris_[t].v[(bk + 1) % 3], tris_[t].v[(bk + 2) % 3]);
            if (segments_.count(e)) {
                equeue.push_back(e);
            } else {
                const int vi = split_known_edge(e.first, e.second);
                if (points_.size() > max_vertices)
                    throw NumericError("mesh refinement exceeded the vertex budget");
                for (const EdgeKey& s2 : segments_)
                    if (point_in_diametral_circle(points_[vi], s2)) equeue.push_back(s2);
            }
            drain();
        };
        const double det = 2.0 * ((b - a).cross(c - a));
        if (std::abs(det) < 1e-30) {
            split_longest_edge();
            continue;
        }
        const double a2 = a.squared_norm(), b2 = b.squared_norm(), c2 = c.squared_norm();
        const Vec2 cc{(a2 * (b.y - c.y) + b2 * (c.y - a.y) + c2 * (a.y - b.y)) / det,
                      (a2 * (c.x - b.x) + b2 * (a.x - c.x) + c2 * (b.x - a.x)) / det};

        bool any_encroached = false;
        for (const EdgeKey& s : segments_)
            if (point_in_diametral_circle(cc, s)) {
                equeue.push_back(s);
                any_encroached = true;
            }
        if (any_encroached) {
            drain();
            dirty_.push_back(t);
            continue;
        }
        if (!point_in_polygon(cc, domain_)) {
            split_longest_edge();
            continue;
        }
        insert_point(cc);
    }
}

inline TriangularMesh Triangulator::extract() const {
    TriangularMesh m;
    std::vector<int> remap(points_.size(), -1);
    std::vector<int> kept;
    for (std::size_t t = 0; t < tris_.size(); ++t) {
        bool virt = false;
        for (int k = 0; k < 3; ++k)
            if (is_virtual(tris_[t].v[k])) virt = true;
        if (virt) continue;
        const Vec2& a = points_[tris_[t].v[0]];
        const Vec2& b = points_[tris_[t].v[1]];
        const Vec2& c = points_[tris_[t].v[2]];
        const Vec2 cen{(a.x + b.x + c.x) / 3.0, (a.y + b.y + c.y) / 3.0};
        if (!point_in_polygon(cen, domain_)) continue;
        kept.push_back(static_cast<int>(t));
    }
    for (int t : kept)
        for (int k = 0; k < 3; ++k) {
            const int v = tris_[t].v[k];
            if (remap[v] < 0) {
                remap[v] = static_cast<int>(m.vertices.size());
                m.vertices.push_back(points_[v]);
            }
        }
    std::map<EdgeKey, int> edge_count;
    for (int t : kept) {
        std::array<int, 3> tv{remap[tris_[t].v[0]], remap[tris_[t].v[1]], remap[tris_[t].v[2]]};
        m.triangles.push_back(tv);
        for (int k = 0; k < 3; ++k) edge_count[norm_edge(tv[(k + 1) % 3], tv[(k + 2) % 3])]++;
    }
    m.boundary.assign(m.vertices.size(), 0);
    for (const auto& [e, cnt] : edge_count)
        if (cnt == 1) {
            m.boundary[e.first] = 1;
            m.boundary[e.second] = 1;
        }
    for (std::size_t t = 0; t < m.triangles.size(); ++t)
        if (m.triangle_area(t) <= 1e-12) throw NumericError("degenerate triangle in mesh");
    return m;
}

inline TriangularMesh build_mesh_impl(const Polygon& boundary, double target_edge_length) {
    Polygon poly = boundary;
    poly.normalize();
    auto dedupe = [](Ring& r) {
        Ring out;
        for (const Vec2& p : r)
            if (out.empty() || distance(out.back(), p) > 1e-9) out.push_back(p);
        while (out.size() > 1 && distance(out.front(), out.back()) <= 1e-9) out.pop_back();
        r = out;
    };
    dedupe(poly.outer);
    for (Ring& h : poly.holes) dedupe(h);
    if (poly.outer.size() < 3) throw ValidationError("boundary polygon needs at least 3 vertices");
    if (ring_self_intersects(poly.outer))
        throw ValidationError("self-intersecting boundary polygon");
    for (const Ring& h : poly.holes)
        if (ring_self_intersects(h)) throw ValidationError("self-intersecting hole polygon");
    if (!(target_edge_length > 0)) throw ValidationError("target edge length must be positive");

    Triangulator tr(poly);
    auto insert_ring = [&tr](const Ring& r) {
        std::vector<int> ids;
        ids.reserve(r.size());
        for (const Vec2& p : r) ids.push_back(tr.insert_point(p));
        return ids;
    };
    const std::vector<int> outer_ids = insert_ring(poly.outer);
    std::vector<std::vector<int>> hole_ids;
    for (const Ring& h : poly.holes) hole_ids.push_back(insert_ring(h));
    for (std::size_t i = 0; i < outer_ids.size(); ++i)
        tr.insert_constraint(outer_ids[i], outer_ids[(i + 1) % outer_ids.size()]);
    for (const auto& ids : hole_ids)
        for (std::size_t i = 0; i < ids.size(); ++i)
            tr.insert_constraint(ids[i], ids[(i + 1) % ids.size()]);
    tr.legalize_all();
    tr.refine(target_edge_length, 20.0, 2'000'000);
    return tr.extract();
}

}  // namespace detail

// Constrained Delaunay triangulation of the domain polygon, refined until
// interior triangles meet the 20 degree angle bound and the size target.
inline TriangularMesh build_mesh(const Polygon& boundary, double target_edge_length) {
    return detail::build_mesh_impl(boundary, target_edge_length);
}

// ---------------------------------------------------------------------------
// Point location with a uniform-grid accelerator
// ---------------------------------------------------------------------------

class PointLocator {
   public:
    struct Hit {
        int triangle = -1;
        std::array<int, 3> vertices{};
        std::array<double, 3> weights{};  // barycentric, clamped non-negative
    };

    PointLocator() = default;

    explicit PointLocator(const TriangularMesh& m) { build(m); }

    void build(const TriangularMesh& m) {
        mesh_ = &m;
        double xmin = 1e300, ymin = 1e300, xmax = -1e300, ymax = -1e300;
        for (const Vec2& p : m.vertices) {
            xmin = std::min(xmin, p.x);
            ymin = std::min(ymin, p.y);
            xmax = std::max(xmax, p.x);
            ymax = std::max(ymax, p.y);
        }
        xmin_ = xmin;
        ymin_ = ymin;
        const double w = std::max(xmax - xmin, 1e-12);
        const double h = std::max(ymax - ymin, 1e-12);
        const double cells = std::max<double>(static_cast<double>(m.triangles.size()), 1.0);
        nx_ = std::max(1, static_cast<int>(std::sqrt(cells * w / h)));
        ny_ = std::max(1, static_cast<int>(cells / nx_));
        cw_ = w / nx_;
        ch_ = h / ny_;
        cells_.assign(static_cast<std::size_t>(nx_) * ny_, {});
        for (std::size_t t = 0; t < m.triangles.size(); ++t) {
            double txmin = 1e300, tymin = 1e300, txmax = -1e300, tymax = -1e300;
            for (int k = 0; k < 3; ++k) {
                const Vec2& p = m.vertices[m.triangles[t][k]];
                txmin = std::min(txmin, p.x);
                tymin = std::min(tymin, p.y);
                txmax = std::max(txmax, p.x);
                tymax = std::max(tymax, p.y);
            }
            for (int j = cell_y(tymin); j <= cell_y(tymax); ++j)
                for (int i = cell_x(txmin); i <= cell_x(txmax); ++i)
                    cells_[static_cast<std::size_t>(j) * nx_ + i].push_back(static_cast<int>(t));
        }
    }

    // Locates a point; points just outside are snapped to the nearest
    // triangle within a relative barycentric tolerance. Returns triangle -1
    // when the point is truly outside.
    Hit locate(const Vec2& p) const {
        Hit hit;
        Hit snap;
        double snap_min_w = -1e300;
        auto consider = [&](int t) {
            std::array<double, 3> w;
            if (!barycentric(t, p, w)) return false;
            const double mw = std::min({w[0], w[1], w[2]});
            if (mw >= -1e-12) {
                set_hit(hit, t, w);
                return true;
            }
            if (mw > snap_min_w) {
                snap_min_w = mw;
                set_hit(snap, t, w);
            }
            return false;
        };
        const int ci = cell_x(p.x);
        const int cj = cell_y(p.y);
        for (int j = std::max(0, cj - 1); j <= std::min(ny_ - 1, cj + 1); ++j)
            for (int i = std::max(0, ci - 1); i <= std::min(nx_ - 1, ci + 1); ++i)
                for (int t : cells_[static_cast<std::size_t>(j) * nx_ + i])
                    if (consider(t)) return hit;
        if (snap.triangle >= 0 && snap_min_w >= -kSnapTol) {
            clamp_weights(snap);
            return snap;
        }
        // rare: empty grid neighborhood; scan everything
        snap = Hit{};
        snap_min_w = -1e300;
        for (std::size_t t = 0; t < mesh_->triangles.size(); ++t)
            if (consider(static_cast<int>(t))) return hit;
        if (snap.triangle >= 0 && snap_min_w >= -kSnapTol) {
            clamp_weights(snap);
            return snap;
        }
        return Hit{};
    }

    const TriangularMesh& mesh() const { return *mesh_; }

    // Repoints the locator at a mesh copy with identical geometry; the grid
    // itself only depends on that geometry.
    void rebind(const TriangularMesh& m) { mesh_ = &m; }

   private:
    static constexpr double kSnapTol = 1e-7;

    void set_hit(Hit& h, int t, const std::array<double, 3>& w) const {
        h.triangle = t;
        for (int k = 0; k < 3; ++k) {
            h.vertices[k] = mesh_->triangles[t][k];
            h.weights[k] = w[k];
        }
    }

    static void clamp_weights(Hit& h) {
        double s = 0.0;
        for (int k = 0; k < 3; ++k) {
            h.weights[k] = std::max(0.0, h.weights[k]);
            s += h.weights[k];
        }
        for (int k = 0; k < 3; ++k) h.weights[k] /= s;
    }

    bool barycentric(int t, const Vec2& p, std::array<double, 3>& w) const {
        const Vec2& a = mesh_->vertices[mesh_->triangles[t][0]];
        const Vec2& b = mesh_->vertices[mesh_->triangles[t][1]];
        const Vec2& c = mesh_->vertices[mesh_->triangles[t][2]];
        const double det = (b - a).cross(c - a);
        if (det == 0.0) return false;
        w[1] = (p - a).cross(c - a) / det;
        w[2] = (b - a).cross(p - a) / det;
        w[0] = 1.0 - w[1] - w[2];
        return true;
    }

    int cell_x(double x) const {
        return std::clamp(static_cast<int>((x - xmin_) / cw_), 0, nx_ - 1);
    }
    int cell_y(double y) const {
        return std::clamp(static_cast<int>((y - ymin_) / ch_), 0, ny_ - 1);
    }

    const TriangularMesh* mesh_ = nullptr;
    std::vector<std::vector<int>> cells_;
    double xmin_ = 0, ymin_ = 0, cw_ = 1, ch_ = 1;
    int nx_ = 1, ny_ = 1;
};

// ---------------------------------------------------------------------------
// Linear finite elements: mass, stiffness, Laplacian penalty, evaluation
// ---------------------------------------------------------------------------

using SparseMat = Eigen::SparseMatrix<double>;

// Assembled P1 operators. The roughness penalty discretizes the squared
// Laplacian in mixed form with a lumped mass inverse; the discrete Laplacian
// keeps its boundary flux term so the penalty vanishes on globally linear
// fields, not just on constants.
class FemOperators {
   public:
    FemOperators() = default;

    explicit FemOperators(TriangularMesh m) : mesh_(std::move(m)) { assemble_all(); }

    // The locator points into the owned mesh, so copies and moves must rebind
    // it or it would keep referencing the source object.
    FemOperators(const FemOperators& o)
        : mesh_(o.mesh_),
          mass_(o.mass_),
          stiffness_(o.stiffness_),
          penalty_(o.penalty_),
          lap_(o.lap_),
          lumped_mass_(o.lumped_mass_),
          locator_(o.locator_) {
        locator_.rebind(mesh_);
    }

    FemOperators(FemOperators&& o) noexcept
        : mesh_(std::move(o.mesh_)),
          mass_(std::move(o.mass_)),
          stiffness_(std::move(o.stiffness_)),
          penalty_(std::move(o.penalty_)),
          lap_(std::move(o.lap_)),
          lumped_mass_(std::move(o.lumped_mass_)),
          locator_(std::move(o.locator_)) {
        locator_.rebind(mesh_);
    }

    FemOperators& operator=(const FemOperators& o) {
        if (this != &o) {
            mesh_ = o.mesh_;
            mass_ = o.mass_;
            stiffness_ = o.stiffness_;
            penalty_ = o.penalty_;
            lap_ = o.lap_;
            lumped_mass_ = o.lumped_mass_;
            locator_ = o.locator_;
            locator_.rebind(mesh_);
        }
        return *this;
    }

    FemOperators& operator=(FemOperators&& o) noexcept {
        if (this != &o) {
            mesh_ = std::move(o.mesh_);
            mass_ = std::move(o.mass_);
            stiffness_ = std::move(o.stiffness_);
            penalty_ = std::move(o.penalty_);
            lap_ = std::move(o.lap_);
            lumped_mass_ = std::move(o.lumped_mass_);
            locator_ = std::move(o.locator_);
            locator_.rebind(mesh_);
        }
        return *this;
    }

    const TriangularMesh& mesh() const { return mesh_; }
    const SparseMat& mass() const { return mass_; }
    const SparseMat& stiffness() const { return stiffness_; }
    const SparseMat& penalty() const { return penalty_; }
    const SparseMat& laplacian() const { return lap_; }
    const Eigen::VectorXd& lumped_mass() const { return lumped_mass_; }
    const PointLocator& locator() const { return locator_; }
    std::size_t n_dof() const { return mesh_.vertices.size(); }

    // f' P f evaluated through the factors as a sum of squares. The formed
    // penalty matrix carries entry roundoff of order 1e-13 that swamps the
    // null space; this form is nonnegative by construction and vanishes to
    // machine precision on globally linear fields.
    double roughness(const Eigen::VectorXd& f) const {
        const Eigen::VectorXd r = lap_ * f;
        double s = 0.0;
        for (int i = 0; i < r.size(); ++i) s += r[i] * r[i] / lumped_mass_[i];
        return s;
    }

    // Gradient of 0.5 * roughness(f); exact counterpart of penalty() * f.
    Eigen::VectorXd roughness_gradient(const Eigen::VectorXd& f) const {
        Eigen::VectorXd r = lap_ * f;
        for (int i = 0; i < r.size(); ++i) r[i] /= lumped_mass_[i];
        return lap_.transpose() * r;
    }

    // Barycentric evaluation matrix (|points| x N). Throws when a point lies
    // outside the mesh beyond the snapping tolerance.
    SparseMat evaluation(const std::vector<Vec2>& points) const {
        std::vector<Eigen::Triplet<double>> trips;
        trips.reserve(points.size() * 3);
        for (std::size_t i = 0; i < points.size(); ++i) {
            const auto hit = locator_.locate(points[i]);
            if (hit.triangle < 0) {
                std::ostringstream os;
                os << "point (" << points[i].x << ", " << points[i].y << ") lies outside the mesh";
                throw ValidationError(os.str());
            }
            for (int k = 0; k < 3; ++k)
                trips.emplace_back(static_cast<int>(i), hit.vertices[k], hit.weights[k]);
        }
        SparseMat e(static_cast<int>(points.size()), static_cast<int>(n_dof()));
        e.setFromTriplets(trips.begin(), trips.end());
        return e;
    }

    Eigen::VectorXd evaluate(const Eigen::VectorXd& coeffs, const std::vector<Vec2>& points) const {
        return evaluation(points) * coeffs;
    }

    bool contains(const Vec2& p) const { return locator_.locate(p).triangle >= 0; }

   private:
    void assemble_all() {
        const int n = static_cast<int>(mesh_.vertices.size());
        std::vector<Eigen::Triplet<double>> mt, st;
        mt.reserve(mesh_.triangles.size() * 9);
        st.reserve(mesh_.triangles.size() * 9);
        for (std::size_t t = 0; t < mesh_.triangles.size(); ++t) {
            const auto& tv = mesh_.triangles[t];
            const Vec2& a = mesh_.vertices[tv[0]];
            const Vec2& b = mesh_.vertices[tv[1]];
            const Vec2& c = mesh_.vertices[tv[2]];
            const double area = 0.5 * (b - a).cross(c - a);
            if (area <= 1e-12) {
                std::ostringstream os;
                os << "degenerate triangle " << t << " (area " << area << ")";
                throw NumericError(os.str());
            }
            const Vec2 g[3] = {grad_shape(b, c, area), grad_shape(c, a, area),
                               grad_shape(a, b, area)};
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) {
                    mt.emplace_back(tv[i], tv[j], area / 12.0 * (i == j ? 2.0 : 1.0));
                    st.emplace_back(tv[i], tv[j], area * g[i].dot(g[j]));
                }
        }
        mass_.resize(n, n);
        mass_.setFromTriplets(mt.begin(), mt.end());
        stiffness_.resize(n, n);
        stiffness_.setFromTriplets(st.begin(), st.end());
        lumped_mass_ = mass_ * Eigen::VectorXd::Ones(n);

        // boundary flux B(i,m) = int_e phi_i (n . grad phi_m) ds over boundary edges
        std::map<std::pair<int, int>, int> edge_use;
        for (const auto& tv : mesh_.triangles)
            for (int k = 0; k < 3; ++k) {
                const int u = tv[(k + 1) % 3], w = tv[(k + 2) % 3];
                edge_use[{std::min(u, w), std::max(u, w)}]++;
            }
        std::vector<Eigen::Triplet<double>> bt;
        for (std::size_t t = 0; t < mesh_.triangles.size(); ++t) {
            const auto& tv = mesh_.triangles[t];
            const Vec2& a = mesh_.vertices[tv[0]];
            const Vec2& b = mesh_.vertices[tv[1]];
            const Vec2& c = mesh_.vertices[tv[2]];
            const double area = 0.5 * (b - a).cross(c - a);
            const Vec2 g[3] = {grad_shape(b, c, area), grad_shape(c, a, area),
                               grad_shape(a, b, area)};
            for (int k = 0; k < 3; ++k) {
                const int u = tv[(k + 1) % 3], w = tv[(k + 2) % 3];
                if (edge_use[{std::min(u, w), std::max(u, w)}] != 1) continue;
                const Vec2 ev = mesh_.vertices[w] - mesh_.vertices[u];
                const double len = ev.norm();
                const Vec2 nrm{ev.y / len, -ev.x / len};  // outward for CCW traversal
                for (int m = 0; m < 3; ++m) {
                    const double flux = nrm.dot(g[m]);
                    bt.emplace_back(u, tv[m], 0.5 * len * flux);
                    bt.emplace_back(w, tv[m], 0.5 * len * flux);
                }
            }
        }
        SparseMat bflux(n, n);
        bflux.setFromTriplets(bt.begin(), bt.end());

        // (D f)_i ~ int phi_i laplacian(f); penalty = D' diag(1/lumped) D
        lap_ = bflux - stiffness_;
        std::vector<Eigen::Triplet<double>> it;
        it.reserve(n);
        for (int i = 0; i < n; ++i) it.emplace_back(i, i, 1.0 / lumped_mass_[i]);
        SparseMat inv_lumped(n, n);
        inv_lumped.setFromTriplets(it.begin(), it.end());
        penalty_ = SparseMat(lap_.transpose()) * inv_lumped * lap_;
        penalty_.makeCompressed();
        locator_.build(mesh_);
    }

    static Vec2 grad_shape(const Vec2& p1, const Vec2& p2, double area) {
        // gradient of the shape function equal to 1 at the vertex opposite
        // edge (p1, p2): rot90(p2 - p1) / (2 area)
        const Vec2 e = p2 - p1;
        return Vec2{-e.y, e.x} * (1.0 / (2.0 * area));
    }

    TriangularMesh mesh_;
    SparseMat mass_, stiffness_, penalty_, lap_;
    Eigen::VectorXd lumped_mass_;
    PointLocator locator_;
};

inline FemOperators assemble(const TriangularMesh& m) { return FemOperators(m); }

// ---------------------------------------------------------------------------
// Penalized least-squares field smoother
// ---------------------------------------------------------------------------

// Minimizes sum_k (value_k - f(point_k))^2 + lambda f' P f over P1 fields.
inline Eigen::VectorXd smooth_covariate(const FemOperators& ops, const std::vector<Vec2>& points,
                                        const Eigen::VectorXd& values, double lambda) {
    if (!(lambda > 0)) throw ValidationError("smoothing parameter must be positive");
    if (points.size() != static_cast<std::size_t>(values.size()))
        throw ValidationError("points/values size mismatch");
    const SparseMat e = ops.evaluation(points);
    SparseMat h = SparseMat(e.transpose()) * e + lambda * ops.penalty();
    h.makeCompressed();
    const Eigen::VectorXd rhs = e.transpose() * values;

    // Jacobi equilibration keeps the factorization stable across the wide
    // lambda range callers use.
    const int n = h.rows();
    Eigen::VectorXd d(n);
    for (int i = 0; i < n; ++i) {
        const double hii = h.coeff(i, i);
        d[i] = hii > 0 ? 1.0 / std::sqrt(hii) : 1.0;
    }
    SparseMat hs = d.asDiagonal() * h * d.asDiagonal();
    Eigen::SimplicialLDLT<SparseMat> solver(hs);
    if (solver.info() != Eigen::Success)
        throw NumericError("singular smoothing system (lambda=" + std::to_string(lambda) + ")");
    const Eigen::VectorXd y = solver.solve(d.asDiagonal() * rhs);
    Eigen::VectorXd coeffs = d.asDiagonal() * y;
    if (!coeffs.allFinite()) throw NumericError("smoothing solve produced non-finite coefficients");

    // Iterative refinement against the factored normal equations. The formed
    // system matrix carries the penalty's entry roundoff, which lambda
    // amplifies; the factored residual does not, and the factorization stays
    // a good enough preconditioner for a handful of correction solves.
    double prev = std::numeric_limits<double>::infinity();
    for (int it = 0; it < 20; ++it) {
        const Eigen::VectorXd r = e.transpose() * (values - e * coeffs) -
                                  lambda * ops.roughness_gradient(coeffs);
        const double rn = r.norm();
        if (!(rn < prev) || rn == 0.0) break;
        prev = rn;
        const Eigen::VectorXd delta =
            d.asDiagonal() * solver.solve(d.asDiagonal() * r).eval();
        coeffs += delta;
        if (!coeffs.allFinite())
            throw NumericError("smoothing refinement produced non-finite coefficients");
    }
    return coeffs;
}

}  // namespace airdist::mesh
